#include "piecewise/divergence.hpp"

#include <algorithm>
#include <cmath>

namespace piecewise {

std::string_view to_string(DivergenceKind kind) {
  return kind == DivergenceKind::KL ? "kl" : "sqhellinger";
}

DivergenceKind parse_divergence(std::string_view name) {
  if (name == "kl") return DivergenceKind::KL;
  if (name == "sqhellinger" || name == "hel2") return DivergenceKind::SqHellinger;
  throw ContractViolation("unknown divergence '" + std::string(name) + "' (expected kl or sqhellinger)");
}

double curvature_constant(DivergenceKind kind) {
  return kind == DivergenceKind::KL ? 1.0 : 0.25;
}

namespace {
void require_same_size(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size() || p.empty()) throw ContractViolation("distributions must be non-empty and equally sized");
}
}  // namespace

double kl(std::span<const double> p, std::span<const double> q) {
  require_same_size(p, q);
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    const double qi = std::clamp(q[i], kProbFloor, 1.0);
    total += p[i] * (std::log(p[i]) - std::log(qi));
  }
  return std::max(total, 0.0);
}

double hel2(std::span<const double> p, std::span<const double> q) {
  require_same_size(p, q);
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = std::sqrt(std::max(p[i], 0.0)) - std::sqrt(std::max(q[i], 0.0));
    total += d * d;
  }
  return 0.5 * total;
}

double divergence(DivergenceKind kind, std::span<const double> p, std::span<const double> q) {
  return kind == DivergenceKind::KL ? kl(p, q) : hel2(p, q);
}

double divergence_from_logs(DivergenceKind kind, std::span<const double> log_p, std::span<const double> log_q) {
  require_same_size(log_p, log_q);
  double total = 0.0;
  for (std::size_t i = 0; i < log_p.size(); ++i) {
    if (kind == DivergenceKind::KL) {
      total += std::exp(log_p[i]) * (log_p[i] - log_q[i]);
    } else {
      const double d = std::exp(0.5 * log_p[i]) - std::exp(0.5 * log_q[i]);
      total += d * d;
    }
  }
  return kind == DivergenceKind::KL ? total : 0.5 * total;
}

double phi(const ModelParams& params, std::span<const double> x, std::span<const double> r, DivergenceKind kind) {
  if (x.size() != r.size()) throw ContractViolation("x and r must have the same dimension");
  const Index h = static_cast<Index>(x.size());
  Matrix pts(2, h);
  for (Index k = 0; k < h; ++k) {
    pts(0, k) = x[k];
    pts(1, k) = x[k] + r[k];
  }
  const Matrix lp = log_predict(params, pts);
  return divergence_from_logs(kind, {lp.row(0).data(), static_cast<std::size_t>(lp.cols())},
                              {lp.row(1).data(), static_cast<std::size_t>(lp.cols())});
}

ad::NodeId row_divergence(ad::Graph& graph, DivergenceKind kind, ad::NodeId log_p, ad::NodeId log_q) {
  if (kind == DivergenceKind::KL) {
    return graph.row_sum(graph.mul(graph.exp(log_p), graph.sub(log_p, log_q)));
  }
  const ad::NodeId d = graph.sub(graph.exp(graph.scale(log_p, 0.5)), graph.exp(graph.scale(log_q, 0.5)));
  return graph.scale(graph.row_sum(graph.mul(d, d)), 0.5);
}

}  // namespace piecewise
