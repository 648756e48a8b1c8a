#pragma once

// Confidence regularization: worst-label transmission failure on a batch.

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "piecewise/autodiff.hpp"
#include "piecewise/divergence.hpp"
#include "piecewise/model.hpp"

namespace piecewise {

struct ConfidenceConfig {
  Index batch_size = 0;
  DivergenceKind divergence = DivergenceKind::KL;
  double epsilon = 1e-4;  // tolerated probability that some batch is not label complete

  void validate(Index num_classes) const;
};

/// Raised when a labeled set has no label-complete subset.
class NoLabelCompleteSubset : public Error {
 public:
  using Error::Error;
};

/// Smallest integer b with b > ln(T·|Y|/ε) / prior_min: with that many i.i.d.
/// draws per batch, all T batches are label complete with probability > 1 − ε.
Index batch_size_bound(double prior_min, std::int64_t num_batches, Index num_classes, double epsilon);

/// Balanced data swept `sweeps` times in batches of b: the smallest integer b
/// with b > |Y|·ln(r·|U|·|Y| / (ε·b)), found by fixed-point iteration.
struct SelfConsistentBatchSize {
  double fixed_point = 0.0;
  Index batch_size = 0;
  int iterations = 0;
};
SelfConsistentBatchSize self_consistent_batch_size(Index num_classes, Index dataset_size, double sweeps,
                                                   double epsilon);

/// f(1_y ‖ T(·|y)) for every label y: −log T(y|y) for KL (T clamped to
/// ≥ kProbFloor) and 1 − √T(y|y) for squared Hellinger.
Eigen::VectorXd transmission_failures(const Matrix& t, DivergenceKind kind = DivergenceKind::KL);

/// max_y f(1_y ‖ T(·|y; Q, batch)) for a batch of predictions.
double confidence_loss(const Matrix& q, DivergenceKind kind = DivergenceKind::KL);

/// Graph form from n×|Y| log-probabilities. The max selects the lowest label
/// index on ties and passes gradient through that label only.
ad::NodeId confidence_loss(ad::Graph& graph, ad::NodeId log_q, DivergenceKind kind = DivergenceKind::KL);

/// Worst case over every label-complete subset S of a small labeled set U
/// (|U| ≤ 12) and every label. Labels are only used to enumerate subsets.
double exact_worst_case_loss(const Matrix& q, std::span<const int> labels, Index num_classes,
                             DivergenceKind kind = DivergenceKind::KL);
/// Same, with Q taken from eval-mode predictions of `params` on U.
double exact_worst_case_loss(const ModelParams& params, const Matrix& u, std::span<const int> labels,
                             DivergenceKind kind = DivergenceKind::KL);

/// b distinct indices drawn uniformly from [0, n).
std::vector<Index> sample_batch(Index n, Index b, std::mt19937_64& rng);

/// One shuffled epoch split into ⌊n/b⌋ batches; the incomplete tail is dropped.
std::vector<std::vector<Index>> epoch_batches(Index n, Index b, std::mt19937_64& rng);

/// True iff every label in [0, num_classes) occurs among `labels[batch]`.
bool is_label_complete(std::span<const Index> batch, std::span<const int> labels, Index num_classes);

}  // namespace piecewise
