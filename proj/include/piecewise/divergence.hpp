#pragma once

#include <span>
#include <string>
#include <string_view>

#include "piecewise/autodiff.hpp"
#include "piecewise/model.hpp"

namespace piecewise {

enum class DivergenceKind { KL, SqHellinger };

std::string_view to_string(DivergenceKind kind);
/// Accepts "kl" and "sqhellinger" (also "hel2").
DivergenceKind parse_divergence(std::string_view name);

/// c_f in ψ''(0) = c_f·eᵗ I_F e: 1 for KL, 1/4 for squared Hellinger.
double curvature_constant(DivergenceKind kind);

/// Σ p·(log p − log q) with 0·log 0 = 0 and q clamped to ≥ kProbFloor.
double kl(std::span<const double> p, std::span<const double> q);

/// Squared Hellinger distance 1 − Σ√(pq), evaluated as ½Σ(√p − √q)²
/// (identical on probability vectors, and free of cancellation near p = q).
double hel2(std::span<const double> p, std::span<const double> q);

double divergence(DivergenceKind kind, std::span<const double> p, std::span<const double> q);

/// Same divergences from log-probabilities; no clamping is needed.
double divergence_from_logs(DivergenceKind kind, std::span<const double> log_p, std::span<const double> log_q);

/// φ_f(r; x, θ) = f(Q(·|x) ‖ Q(·|x + r)) with eval-mode predictions.
double phi(const ModelParams& params, std::span<const double> x, std::span<const double> r, DivergenceKind kind);

/// Row-wise f(P_i ‖ Q_i) from two n×|Y| log-probability nodes → n×1 node.
/// Gradients flow through both arguments.
ad::NodeId row_divergence(ad::Graph& graph, DivergenceKind kind, ad::NodeId log_p, ad::NodeId log_q);

}  // namespace piecewise
