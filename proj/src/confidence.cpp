#include "piecewise/confidence.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "piecewise/transmission.hpp"

namespace piecewise {

void ConfidenceConfig::validate(Index num_classes) const {
  if (batch_size < num_classes) throw ContractViolation("batch size must be at least the number of classes");
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw ContractViolation("epsilon must lie in (0, 1)");
}

namespace {
// Smallest integer strictly above v, snapping v to an integer when it is one
// up to round-off.
Index strictly_above(double v) {
  const double r = std::round(v);
  if (std::abs(v - r) <= 1e-12 * std::max(1.0, std::abs(v))) v = r;
  return static_cast<Index>(std::floor(v)) + 1;
}
}  // namespace

Index batch_size_bound(double prior_min, std::int64_t num_batches, Index num_classes, double epsilon) {
  if (!(prior_min > 0.0 && prior_min <= 1.0)) throw ContractViolation("prior_min must lie in (0, 1]");
  if (num_batches < 1) throw ContractViolation("num_batches must be at least 1");
  if (num_classes < 1) throw ContractViolation("num_classes must be positive");
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw ContractViolation("epsilon must lie in (0, 1)");
  const double bound =
      std::log(static_cast<double>(num_batches) * static_cast<double>(num_classes) / epsilon) / prior_min;
  return std::max<Index>(strictly_above(bound), 1);
}

SelfConsistentBatchSize self_consistent_batch_size(Index num_classes, Index dataset_size, double sweeps,
                                                   double epsilon) {
  if (num_classes < 2 || dataset_size < 1 || !(sweeps > 0.0)) {
    throw ContractViolation("self-consistent batch size needs |Y| >= 2, |U| >= 1 and sweeps > 0");
  }
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw ContractViolation("epsilon must lie in (0, 1)");
  const double k = static_cast<double>(num_classes);
  const double scale = sweeps * static_cast<double>(dataset_size) * k / epsilon;
  auto g = [&](double b) { return k * std::log(scale / b); };
  // g is decreasing with |g'(b)| = k/b < 1 near the fixed point, so the
  // iteration contracts.
  SelfConsistentBatchSize out;
  double b = k;
  for (out.iterations = 1; out.iterations <= 200; ++out.iterations) {
    const double next = g(b);
    if (std::abs(next - b) <= 1e-12 * next) {
      b = next;
      break;
    }
    b = next;
  }
  out.fixed_point = b;
  out.batch_size = strictly_above(b);
  return out;
}

Eigen::VectorXd transmission_failures(const Matrix& t, DivergenceKind kind) {
  Eigen::VectorXd out(t.rows());
  for (Index y = 0; y < t.rows(); ++y) {
    const double stay = std::clamp(t(y, y), kProbFloor, 1.0);
    out(y) = kind == DivergenceKind::KL ? -std::log(stay) : 1.0 - std::sqrt(stay);
  }
  return out;
}

double confidence_loss(const Matrix& q, DivergenceKind kind) {
  return transmission_failures(label_transition(q), kind).maxCoeff();
}

ad::NodeId confidence_loss(ad::Graph& graph, ad::NodeId log_q, DivergenceKind kind) {
  const ad::NodeId q = graph.exp(log_q);
  const ad::NodeId stay = graph.clamp(graph.diag(label_transition(graph, q)), kProbFloor, 1.0);
  ad::NodeId failure;
  if (kind == DivergenceKind::KL) {
    failure = graph.scale(graph.log(stay), -1.0);
  } else {
    const Index k = graph.node(stay).rows;
    failure = graph.sub(graph.constant(Matrix::Ones(k, 1)), graph.sqrt(stay));
  }
  return graph.max(failure);
}

bool is_label_complete(std::span<const Index> batch, std::span<const int> labels, Index num_classes) {
  std::vector<char> seen(static_cast<std::size_t>(num_classes), 0);
  Index found = 0;
  for (Index i : batch) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y >= 0 && y < num_classes && !seen[y]) {
      seen[y] = 1;
      ++found;
    }
  }
  return found == num_classes;
}

double exact_worst_case_loss(const Matrix& q, std::span<const int> labels, Index num_classes, DivergenceKind kind) {
  const Index n = q.rows();
  if (static_cast<Index>(labels.size()) != n) throw ContractViolation("one label per instance is required");
  if (n > 12) throw ContractViolation("exact worst-case loss enumerates subsets; |U| must be at most 12");
  double worst = -1.0;
  std::vector<Index> rows;
  for (std::uint32_t mask = 1; mask < (1u << n); ++mask) {
    rows.clear();
    for (Index i = 0; i < n; ++i) {
      if (mask & (1u << i)) rows.push_back(i);
    }
    if (!is_label_complete(rows, labels, num_classes)) continue;
    Matrix sub(static_cast<Index>(rows.size()), q.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) sub.row(static_cast<Index>(r)) = q.row(rows[r]);
    worst = std::max(worst, confidence_loss(sub, kind));
  }
  if (worst < 0.0) throw NoLabelCompleteSubset("no subset of U contains every label");
  return worst;
}

double exact_worst_case_loss(const ModelParams& params, const Matrix& u, std::span<const int> labels,
                             DivergenceKind kind) {
  return exact_worst_case_loss(predict(params, u), labels, params.spec.num_classes, kind);
}

std::vector<Index> sample_batch(Index n, Index b, std::mt19937_64& rng) {
  if (b > n || b < 0) throw ContractViolation("batch size exceeds the dataset size");
  std::vector<Index> pool(static_cast<std::size_t>(n));
  std::iota(pool.begin(), pool.end(), Index{0});
  for (Index i = 0; i < b; ++i) {
    std::uniform_int_distribution<Index> pick(i, n - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(static_cast<std::size_t>(b));
  return pool;
}

std::vector<std::vector<Index>> epoch_batches(Index n, Index b, std::mt19937_64& rng) {
  if (b <= 0 || b > n) throw ContractViolation("batch size must lie in [1, n]");
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<Index>> out;
  for (Index start = 0; start + b <= n; start += b) {
    out.emplace_back(order.begin() + start, order.begin() + start + b);
  }
  return out;
}

}  // namespace piecewise
