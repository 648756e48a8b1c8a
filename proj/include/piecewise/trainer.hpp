#pragma once

// R(θ) = L'_c + λ·L'_s minimized with ADAM over shuffled minibatches.

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "piecewise/data.hpp"
#include "piecewise/divergence.hpp"
#include "piecewise/model.hpp"
#include "piecewise/smoothness.hpp"

namespace piecewise {

/// Normalization statistics used by the smoothness forward passes.
enum class SmoothnessStatistics {
  Batch,    // statistics of the current training batch, held fixed
  Running,  // running statistics accumulated so far
};

struct TrainConfig {
  double lambda = 1.0;
  double rho = 0.04;  // copied into smoothness.rho
  Index batch_size = 16;
  int epochs = 1;
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  double epsilon = 1e-4;  // batch-sampling failure rate used to size batches
  DivergenceKind confidence_divergence = DivergenceKind::KL;
  SmoothnessConfig smoothness;
  SmoothnessStatistics smoothness_statistics = SmoothnessStatistics::Batch;

  void validate(Index num_classes, Index dataset_size) const;
  SmoothnessConfig effective_smoothness() const;
};

struct StepRecord {
  int epoch = 0;
  Index step = 0;
  double confidence = 0.0;
  double smoothness = 0.0;
  double total = 0.0;
};

struct EpochRecord {
  int epoch = 0;
  double seconds = 0.0;
  double mean_confidence = 0.0;
  double mean_smoothness = 0.0;
  double mean_total = 0.0;
  /// Mean of running mean / running variance per batchnorm layer.
  std::vector<double> running_mean_avg;
  std::vector<double> running_var_avg;
};

struct TrainHistory {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
};

struct AdamState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  std::int64_t t = 0;
};

/// Non-finite loss or gradient during training.
class TrainingAborted : public Error {
 public:
  TrainingAborted(const std::string& what, std::string snapshot)
      : Error(what), snapshot_(std::move(snapshot)) {}
  const std::string& snapshot() const noexcept { return snapshot_; }

 private:
  std::string snapshot_;
};

/// Bias-corrected ADAM update. `grads` is aligned with params.trainable().
void adam_step(ModelParams& params, std::span<const Matrix> grads, AdamState& state, const TrainConfig& cfg);

struct StepResult {
  double confidence = 0.0;
  double smoothness = 0.0;
  double total = 0.0;
};

/// Loss values and gradients of R on one batch without touching the model.
struct LossGradient {
  StepResult values;
  std::vector<Matrix> grads;
};

/// Builds the combined loss graph for one batch. Confidence uses training-mode
/// batchnorm; smoothness and score matrices use frozen statistics chosen by
/// cfg.smoothness_statistics.
/// `rng` drives the direction sampler. When `running_update` is given it
/// receives the batch-statistics update.
LossGradient loss_and_gradient(const ModelParams& params, const Matrix& batch, const TrainConfig& cfg,
                               std::mt19937_64& rng, ModelParams* running_update = nullptr);

/// One optimizer step: loss_and_gradient, running-statistics update, ADAM.
StepResult train_step(ModelParams& params, const Matrix& batch, const TrainConfig& cfg, AdamState& state,
                      std::mt19937_64& rng);

/// Called after every epoch; returning false stops training.
using EpochCallback = std::function<bool(const EpochRecord&, const ModelParams&)>;

struct TrainResult {
  ModelParams params;
  TrainHistory history;
};

/// Trains a freshly initialized model (seeded with cfg.seed). Labels in `data`
/// are ignored.
TrainResult train(const MlpSpec& spec, const Dataset& data, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});
/// Continues training from `initial` (cfg.seed drives shuffling and
/// direction sampling only).
TrainResult train(ModelParams initial, const Dataset& data, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

/// Per-step CSV (epoch,step,confidence,smoothness,total).
void write_history_csv(const TrainHistory& history, const std::string& path);
/// Per-epoch CSV; wall time is omitted when `with_wall_time` is false so
/// repeated runs produce identical files.
void write_epochs_csv(const TrainHistory& history, const std::string& path, bool with_wall_time);

}  // namespace piecewise
