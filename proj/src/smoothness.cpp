#include "piecewise/smoothness.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "piecewise/parallel.hpp"

namespace piecewise {

std::vector<double> evenly_spaced_grid(int points) {
  if (points < 2) throw ContractViolation("grid needs at least 2 points");
  std::vector<double> grid(static_cast<std::size_t>(points));
  for (int i = 0; i < points; ++i) grid[i] = -1.0 + 2.0 * i / (points - 1);
  grid.back() = 1.0;
  return grid;
}

void SmoothnessConfig::validate() const {
  if (!(rho > 0.0)) throw ContractViolation("rho must be positive");
  if (k < 1) throw ContractViolation("k must be a positive integer");
  if (m < 1) throw ContractViolation("m must be a positive integer");
  bool has_lo = false;
  bool has_hi = false;
  for (double v : grid) {
    if (!(v >= -1.0 && v <= 1.0)) throw ContractViolation("grid values must lie in [-1, 1]");
    has_lo = has_lo || v == -1.0;
    has_hi = has_hi || v == 1.0;
  }
  if (!has_lo || !has_hi) throw ContractViolation("grid must contain -1 and 1");
}

double fisher_trace(const Matrix& a) { return a.squaredNorm(); }

double fisher_top_eig(const Matrix& a) {
  if (a.size() == 0) return 0.0;
  const Eigen::MatrixXd gram = a.transpose() * a;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(gram, Eigen::EigenvaluesOnly);
  return std::max(0.0, solver.eigenvalues().maxCoeff());
}

Eigen::VectorXd sample_direction(const Matrix& a, int k, std::mt19937_64& rng) {
  if (k < 1) throw ContractViolation("k must be a positive integer");
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd e;
  int products;
  if (k % 2 == 1) {
    Eigen::VectorXd n(a.cols());
    for (Index i = 0; i < n.size(); ++i) n(i) = normal(rng);
    e = a * n;
    products = (k - 1) / 2;
  } else {
    e.resize(a.rows());
    for (Index i = 0; i < e.size(); ++i) e(i) = normal(rng);
    products = k / 2;
  }
  for (int i = 0; i < products; ++i) {
    Eigen::VectorXd t = a.transpose() * e;
    e = a * t;
  }
  return e;
}

PerturbationPlan plan_perturbations(const std::vector<ScoreMatrix>& scores, const SmoothnessConfig& cfg,
                                    std::mt19937_64& rng) {
  cfg.validate();
  PerturbationPlan plan;
  plan.instances = static_cast<Index>(scores.size());
  plan.probes_per_instance = static_cast<Index>(cfg.m) * static_cast<Index>(cfg.grid.size());
  const Index h = scores.empty() ? 0 : scores.front().a.rows();
  plan.offsets = Matrix::Zero(plan.instances * plan.probes_per_instance, h);
  plan.active.assign(static_cast<std::size_t>(plan.offsets.rows()), 0);

  Index row = 0;
  for (const ScoreMatrix& s : scores) {
    // The direction is invariant to rescaling A, so normalize first to keep
    // the k-fold products away from underflow.
    const double scale = s.a.norm();
    const Matrix a = scale > 0.0 ? Matrix(s.a / scale) : s.a;
    for (int draw = 0; draw < cfg.m; ++draw) {
      const Eigen::VectorXd e = sample_direction(a, cfg.k, rng);
      const double len = e.norm();
      const bool usable = len >= 1e-12;
      for (double nu : cfg.grid) {
        if (usable) {
          Eigen::RowVectorXd offset = (nu * cfg.rho / len) * e.transpose();
          while (offset.norm() > cfg.rho) offset *= 1.0 - 4.0 * std::numeric_limits<double>::epsilon();
          plan.offsets.row(row) = offset;
          plan.active[row] = 1;
        }
        ++row;
      }
    }
  }
  return plan;
}

PerturbationPlan plan_perturbations(const ModelParams& params, const Matrix& x, const SmoothnessConfig& cfg,
                                    std::mt19937_64& rng) {
  return plan_perturbations(score_matrices(params, x), cfg, rng);
}

SmoothnessNodes build_smoothness_loss(ad::Graph& graph, const ModelLeaves& leaves, const ModelParams& params,
                                      ad::NodeId x_node, const Matrix& x, const PerturbationPlan& plan,
                                      DivergenceKind kind) {
  if (plan.instances != x.rows() || x.rows() == 0) {
    throw ContractViolation("perturbation plan does not match the batch");
  }
  const Index probes = plan.probes_per_instance;
  Matrix shifted(plan.offsets.rows(), x.cols());
  std::vector<Index> owner(static_cast<std::size_t>(plan.offsets.rows()));
  Matrix mask(plan.offsets.rows(), 1);
  for (Index r = 0; r < plan.offsets.rows(); ++r) {
    owner[r] = r / probes;
    shifted.row(r) = x.row(owner[r]) + plan.offsets.row(r);
    mask(r, 0) = plan.active[r] ? 1.0 : 0.0;
  }

  const ad::NodeId base = build_forward(graph, leaves, params, x_node, Mode::Eval).log_probs;
  const ad::NodeId moved =
      build_forward(graph, leaves, params, graph.constant(std::move(shifted), "perturbed"), Mode::Eval).log_probs;
  ad::NodeId div = row_divergence(graph, kind, graph.gather_rows(base, std::move(owner)), moved);
  div = graph.mul(div, graph.constant(std::move(mask), "probe_mask"));
  SmoothnessNodes out;
  out.per_instance = graph.segment_max(div, probes);
  out.loss = graph.mean(out.per_instance);
  return out;
}

namespace {
double evaluate_smoothness(const ModelParams& params, const Matrix& x, const SmoothnessConfig& cfg,
                           std::mt19937_64& rng) {
  const PerturbationPlan plan = plan_perturbations(params, x, cfg, rng);
  ad::Graph graph;
  const ModelLeaves leaves = add_parameter_leaves(graph, params);
  const ad::NodeId in = graph.constant(x, "x");
  const SmoothnessNodes nodes = build_smoothness_loss(graph, leaves, params, in, x, plan, cfg.divergence);
  ad::Bindings bindings;
  bind_parameters(bindings, leaves, params);
  return evaluate(graph, bindings).scalar(nodes.loss);
}
}  // namespace

double smoothness_bound(const ModelParams& params, std::span<const double> x, const SmoothnessConfig& cfg,
                        std::mt19937_64& rng) {
  Matrix row(1, static_cast<Index>(x.size()));
  for (std::size_t k = 0; k < x.size(); ++k) row(0, static_cast<Index>(k)) = x[k];
  return evaluate_smoothness(params, row, cfg, rng);
}

double smoothness_loss(const ModelParams& params, const Matrix& x, const SmoothnessConfig& cfg,
                       std::mt19937_64& rng) {
  if (x.rows() == 0) throw ContractViolation("smoothness loss needs a non-empty batch");
  return evaluate_smoothness(params, x, cfg, rng);
}

double margin_probe(const ModelParams& params, const Matrix& data, double tau, const std::vector<double>& rho_grid,
                    DivergenceKind kind, std::uint64_t seed, int directions) {
  if (rho_grid.empty()) throw ContractViolation("rho grid must be non-empty");
  for (std::size_t i = 0; i < rho_grid.size(); ++i) {
    if (!(rho_grid[i] > 0.0) || (i > 0 && !(rho_grid[i] > rho_grid[i - 1]))) {
      throw ContractViolation("rho grid must be increasing positive reals");
    }
  }
  if (directions < 1) throw ContractViolation("margin probe needs at least one direction");
  const Index n = data.rows();
  const Index h = data.cols();
  const Index radii = static_cast<Index>(rho_grid.size());

  // worst(i, g): largest divergence found at instance i with radius rho_grid[g].
  Matrix worst = Matrix::Zero(n, radii);
  parallel_for(n, [&](Index i) {
    std::mt19937_64 rng(seed ^ (0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(i + 1)));
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix pts(1 + radii * directions, h);
    pts.row(0) = data.row(i);
    for (int d = 0; d < directions; ++d) {
      Eigen::RowVectorXd u(h);
      for (Index c = 0; c < h; ++c) u(c) = normal(rng);
      const double len = u.norm();
      if (len > 0.0) u /= len;
      for (Index g = 0; g < radii; ++g) pts.row(1 + g * directions + d) = data.row(i) + rho_grid[g] * u;
    }
    const Matrix lp = log_predict(params, pts);
    const std::span<const double> base(lp.row(0).data(), static_cast<std::size_t>(lp.cols()));
    for (Index g = 0; g < radii; ++g) {
      double best = 0.0;
      for (int d = 0; d < directions; ++d) {
        const Index r = 1 + g * directions + d;
        best = std::max(best, divergence_from_logs(kind, base, {lp.row(r).data(), static_cast<std::size_t>(lp.cols())}));
      }
      worst(i, g) = best;
    }
  });

  double margin = 0.0;
  double running = 0.0;
  for (Index g = 0; g < radii; ++g) {
    if (n > 0) running = std::max(running, worst.col(g).maxCoeff());
    if (running > tau) break;
    margin = rho_grid[g];
  }
  return margin;
}

}  // namespace piecewise
