#pragma once

// MLP discriminator Q(y|x; θ): affine → [batchnorm] → ReLU per hidden layer,
// then an affine head and a softmax.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "piecewise/autodiff.hpp"

namespace piecewise {

enum class Mode { Train, Eval };

/// Running statistics are blended as (1 − m)·old + m·batch.
inline constexpr double kBatchNormMomentum = 0.1;

struct MlpSpec {
  Index input_dim = 0;
  std::vector<Index> hidden_dims;
  Index num_classes = 2;
  /// One flag per hidden layer. Empty means "batch normalization everywhere".
  std::vector<bool> batchnorm;

  void validate() const;
  bool has_batchnorm(std::size_t layer) const;
};

struct DenseLayer {
  Matrix weight;  // out × in
  Matrix bias;    // 1 × out
};

struct BatchNormLayer {
  Matrix gamma;         // 1 × d
  Matrix beta;          // 1 × d
  Matrix running_mean;  // 1 × d
  Matrix running_var;   // 1 × d, entries > 0
};

struct NamedBlock {
  std::string name;
  Matrix* value;
};

struct ConstNamedBlock {
  std::string name;
  const Matrix* value;
};

struct ModelParams {
  MlpSpec spec;
  std::vector<DenseLayer> dense;                   // hidden layers then head
  std::vector<std::optional<BatchNormLayer>> norms;  // one per hidden layer
  std::uint64_t seed = 0;

  /// Trainable blocks in a fixed order: layer{i}.weight, layer{i}.bias,
  /// bn{i}.gamma, bn{i}.beta per hidden layer, then the head.
  std::vector<NamedBlock> trainable();
  std::vector<ConstNamedBlock> trainable() const;
  Index trainable_count() const;

  friend bool operator==(const ModelParams&, const ModelParams&);
};

/// He-normal weights (std √(2/fan_in)), zero biases, unit scale, zero shift.
ModelParams init_params(const MlpSpec& spec, std::uint64_t seed);

/// Graph leaves for the trainable blocks, aligned with ModelParams::trainable().
struct ModelLeaves {
  std::vector<ad::NodeId> nodes;
};

ModelLeaves add_parameter_leaves(ad::Graph& graph, const ModelParams& params);
void bind_parameters(ad::Bindings& bindings, const ModelLeaves& leaves, const ModelParams& params);

struct ForwardNodes {
  ad::NodeId logits;
  ad::NodeId log_probs;
  /// Inputs of each training-mode batchnorm node (empty entries otherwise).
  std::vector<std::optional<ad::NodeId>> batchnorm_inputs;
};

/// Appends the network to `graph`. In Eval mode batch normalization uses the
/// running statistics stored in `params` as constants.
ForwardNodes build_forward(ad::Graph& graph, const ModelLeaves& leaves, const ModelParams& params,
                           ad::NodeId x, Mode mode);

/// Blends batch statistics of each training-mode batchnorm input into the
/// running statistics.
void update_running_stats(ModelParams& params, const ad::Graph& graph, const ad::Evaluation& eval,
                          const ForwardNodes& forward);

/// Copy of `params` whose running statistics are replaced by the (biased)
/// batch statistics of `x`, so eval mode reproduces the training-mode function
/// on that batch.
ModelParams freeze_batch_statistics(const ModelParams& params, const Matrix& x);

/// Row-stochastic predictions. Train mode uses batch statistics and updates
/// the running statistics.
Matrix predict(ModelParams& params, const Matrix& x, Mode mode);
/// Eval-mode predictions.
Matrix predict(const ModelParams& params, const Matrix& x);
/// Eval-mode log-probabilities.
Matrix log_predict(const ModelParams& params, const Matrix& x);

/// h × |Y| matrix whose column y is √Q(y|x)·∇ₓ log Q(y|x), evaluated with
/// frozen batchnorm statistics. I_F(x) = A·Aᵗ.
struct ScoreMatrix {
  Matrix a;
  Eigen::VectorXd x;
  Eigen::VectorXd probs;
};

ScoreMatrix score_matrix(const ModelParams& params, std::span<const double> x);
/// Score matrices for every row of `x` from |Y| backward passes over the batch.
std::vector<ScoreMatrix> score_matrices(const ModelParams& params, const Matrix& x);

/// Checkpoint JSON: spec, seed and every parameter block (including running
/// statistics). Doubles round-trip bit-exactly.
std::string checkpoint_to_json(const ModelParams& params);
ModelParams checkpoint_from_json(const std::string& text);
void save_checkpoint(const ModelParams& params, const std::string& path);
ModelParams load_checkpoint(const std::string& path);

}  // namespace piecewise
