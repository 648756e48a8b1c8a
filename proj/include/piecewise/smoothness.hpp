#pragma once

// Smoothness regularization: a random lower bound of sup_{‖r‖≤ρ} φ_f(r; x, θ)
// probed along directions drawn from N(0, I_F^k), plus Fisher-information
// diagnostics.

#include <cstdint>
#include <random>
#include <vector>

#include "piecewise/autodiff.hpp"
#include "piecewise/divergence.hpp"
#include "piecewise/model.hpp"

namespace piecewise {

/// `points` evenly spaced values from −1 to 1 inclusive.
std::vector<double> evenly_spaced_grid(int points);

struct SmoothnessConfig {
  double rho = 0.04;
  int k = 4;  // covariance power
  int m = 1;  // directions per instance
  std::vector<double> grid = evenly_spaced_grid(10);
  DivergenceKind divergence = DivergenceKind::SqHellinger;

  void validate() const;
};

/// tr(A·Aᵗ) as the sum of squared entries of A.
double fisher_trace(const Matrix& a);

/// Largest eigenvalue of Aᵗ·A (same non-zero spectrum as A·Aᵗ).
double fisher_top_eig(const Matrix& a);

/// A draw from N(0, (A·Aᵗ)^k) using only products with A and Aᵗ:
/// odd k: (AAᵗ)^((k−1)/2)·A·n with n ~ N(0, I_|Y|);
/// even k: (AAᵗ)^(k/2)·n' with n' ~ N(0, I_h).
Eigen::VectorXd sample_direction(const Matrix& a, int k, std::mt19937_64& rng);

/// Probe offsets ν·ρ·e/‖e‖ for every instance of a batch, grouped by instance
/// (m·|grid| consecutive rows each). Directions are constants: no gradient
/// flows through the sampler.
struct PerturbationPlan {
  Index instances = 0;
  Index probes_per_instance = 0;
  Matrix offsets;            // (instances·probes) × h, every row has norm ≤ ρ
  std::vector<char> active;  // 0 where the score matrix gave no usable direction
};

PerturbationPlan plan_perturbations(const ModelParams& params, const Matrix& x, const SmoothnessConfig& cfg,
                                    std::mt19937_64& rng);
/// Same, from precomputed score matrices (one per row of the batch).
PerturbationPlan plan_perturbations(const std::vector<ScoreMatrix>& scores, const SmoothnessConfig& cfg,
                                    std::mt19937_64& rng);

struct SmoothnessNodes {
  ad::NodeId per_instance;  // n × 1 lower bounds
  ad::NodeId loss;          // their mean
};

/// Appends the smoothness loss for batch `x` (bound to node `x_node`) to a
/// graph sharing the parameter leaves. Both arguments of φ_f use eval-mode
/// batchnorm and carry parameter gradients.
SmoothnessNodes build_smoothness_loss(ad::Graph& graph, const ModelLeaves& leaves, const ModelParams& params,
                                      ad::NodeId x_node, const Matrix& x, const PerturbationPlan& plan,
                                      DivergenceKind kind);

/// Random lower bound on the worst divergence over the ρ-ball at one instance.
double smoothness_bound(const ModelParams& params, std::span<const double> x, const SmoothnessConfig& cfg,
                        std::mt19937_64& rng);

/// Mean of smoothness_bound over the rows of `x`.
double smoothness_loss(const ModelParams& params, const Matrix& x, const SmoothnessConfig& cfg, std::mt19937_64& rng);

/// Largest radius in `rho_grid` (increasing) such that, over all rows of
/// `data`, the largest divergence found among `directions` random unit
/// directions at every radius up to it stays ≤ tau; 0 if none.
double margin_probe(const ModelParams& params, const Matrix& data, double tau, const std::vector<double>& rho_grid,
                    DivergenceKind kind = DivergenceKind::SqHellinger, std::uint64_t seed = 0,
                    int directions = 1000);

}  // namespace piecewise
