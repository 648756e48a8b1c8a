#include "piecewise/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "piecewise/confidence.hpp"

namespace piecewise {

void TrainConfig::validate(Index num_classes, Index dataset_size) const {
  if (!(lambda >= 0.0)) throw ContractViolation("lambda must be non-negative");
  if (!(rho > 0.0)) throw ContractViolation("rho must be positive");
  if (batch_size < num_classes) throw ContractViolation("batch_size must be at least the number of classes");
  if (batch_size > dataset_size) throw ContractViolation("batch_size exceeds the dataset size");
  if (epochs < 1) throw ContractViolation("epochs must be at least 1");
  if (!(learning_rate > 0.0)) throw ContractViolation("learning_rate must be positive");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw ContractViolation("ADAM betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ContractViolation("adam_eps must be positive");
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw ContractViolation("epsilon must lie in (0, 1)");
  effective_smoothness().validate();
}

SmoothnessConfig TrainConfig::effective_smoothness() const {
  SmoothnessConfig s = smoothness;
  s.rho = rho;
  return s;
}

void adam_step(ModelParams& params, std::span<const Matrix> grads, AdamState& state, const TrainConfig& cfg) {
  auto blocks = params.trainable();
  if (grads.size() != blocks.size()) throw ContractViolation("gradient count does not match the model");
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (grads[i].rows() != blocks[i].value->rows() || grads[i].cols() != blocks[i].value->cols()) {
      throw ContractViolation("gradient shape mismatch for " + blocks[i].name);
    }
    if (!grads[i].allFinite()) {
      throw TrainingAborted("non-finite gradient in parameter block '" + blocks[i].name + "'",
                            "step " + std::to_string(state.t + 1));
    }
  }
  if (state.m.empty()) {
    for (const auto& b : blocks) {
      state.m.push_back(Matrix::Zero(b.value->rows(), b.value->cols()));
      state.v.push_back(Matrix::Zero(b.value->rows(), b.value->cols()));
    }
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    state.m[i] = cfg.adam_beta1 * state.m[i] + (1.0 - cfg.adam_beta1) * grads[i];
    state.v[i] = cfg.adam_beta2 * state.v[i] + (1.0 - cfg.adam_beta2) * grads[i].cwiseAbs2();
    const auto mhat = state.m[i].array() / c1;
    const auto vhat = state.v[i].array() / c2;
    blocks[i].value->array() -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.adam_eps);
  }
}

LossGradient loss_and_gradient(const ModelParams& params, const Matrix& batch, const TrainConfig& cfg,
                               std::mt19937_64& rng, ModelParams* running_update) {
  ad::Graph graph;
  const ModelLeaves leaves = add_parameter_leaves(graph, params);
  const ad::NodeId x = graph.constant(batch, "batch");
  const ForwardNodes train_fwd = build_forward(graph, leaves, params, x, Mode::Train);
  const ad::NodeId conf = confidence_loss(graph, train_fwd.log_probs, cfg.confidence_divergence);
  ad::NodeId total = conf;
  std::optional<ad::NodeId> smooth;
  if (cfg.lambda > 0.0) {
    const SmoothnessConfig sc = cfg.effective_smoothness();
    const ModelParams frozen = cfg.smoothness_statistics == SmoothnessStatistics::Batch
                                   ? freeze_batch_statistics(params, batch)
                                   : params;
    const PerturbationPlan plan = plan_perturbations(frozen, batch, sc, rng);
    smooth = build_smoothness_loss(graph, leaves, frozen, x, batch, plan, sc.divergence).loss;
    total = graph.add(conf, graph.scale(*smooth, cfg.lambda));
  }
  graph.set_name(total, "R");

  ad::Bindings bindings;
  bind_parameters(bindings, leaves, params);
  ad::Evaluation eval;
  try {
    eval = evaluate(graph, bindings);
  } catch (const OverflowError& e) {
    throw TrainingAborted(std::string("loss is not finite: ") + e.what(), "batch of " + std::to_string(batch.rows()));
  }
  LossGradient out;
  out.values.confidence = eval.scalar(conf);
  out.values.smoothness = smooth ? eval.scalar(*smooth) : 0.0;
  out.values.total = eval.scalar(total);
  const ad::GradientMap grads = backward(graph, eval, total, leaves.nodes);
  for (ad::NodeId leaf : leaves.nodes) out.grads.push_back(grads.at(leaf));
  if (running_update != nullptr) update_running_stats(*running_update, graph, eval, train_fwd);
  return out;
}

StepResult train_step(ModelParams& params, const Matrix& batch, const TrainConfig& cfg, AdamState& state,
                      std::mt19937_64& rng) {
  LossGradient lg = loss_and_gradient(params, batch, cfg, rng, &params);
  adam_step(params, lg.grads, state, cfg);
  return lg.values;
}

namespace {
std::string snapshot(int epoch, Index step, const StepResult& last) {
  std::ostringstream ss;
  ss << "epoch " << epoch << " step " << step << " last confidence " << last.confidence << " smoothness "
     << last.smoothness << " total " << last.total;
  return ss.str();
}
}  // namespace

TrainResult train(const MlpSpec& spec, const Dataset& data, const TrainConfig& cfg, const EpochCallback& on_epoch) {
  spec.validate();
  return train(init_params(spec, cfg.seed), data, cfg, on_epoch);
}

TrainResult train(ModelParams initial, const Dataset& data, const TrainConfig& cfg, const EpochCallback& on_epoch) {
  const MlpSpec& spec = initial.spec;
  if (data.dim() != spec.input_dim) throw ContractViolation("dataset width does not match the model input");
  cfg.validate(spec.num_classes, data.size());

  TrainResult result{std::move(initial), {}};
  ModelParams& params = result.params;
  AdamState state;
  std::mt19937_64 rng(cfg.seed);
  Matrix batch(cfg.batch_size, data.dim());
  StepResult last;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.epoch = epoch;
    const auto batches = epoch_batches(data.size(), cfg.batch_size, rng);
    Index step = 0;
    for (const auto& idx : batches) {
      for (Index r = 0; r < cfg.batch_size; ++r) batch.row(r) = data.x.row(idx[r]);
      try {
        last = train_step(params, batch, cfg, state, rng);
      } catch (const TrainingAborted& e) {
        throw TrainingAborted(e.what(), snapshot(epoch, step, last) + "; " + e.snapshot());
      }
      if (!std::isfinite(last.total)) throw TrainingAborted("loss is not finite", snapshot(epoch, step, last));
      result.history.steps.push_back({epoch, step, last.confidence, last.smoothness, last.total});
      rec.mean_confidence += last.confidence;
      rec.mean_smoothness += last.smoothness;
      rec.mean_total += last.total;
      ++step;
    }
    const double nb = static_cast<double>(std::max<Index>(step, 1));
    rec.mean_confidence /= nb;
    rec.mean_smoothness /= nb;
    rec.mean_total /= nb;
    for (const auto& bn : params.norms) {
      if (!bn) continue;
      rec.running_mean_avg.push_back(bn->running_mean.mean());
      rec.running_var_avg.push_back(bn->running_var.mean());
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.history.epochs.push_back(rec);
    if (on_epoch && !on_epoch(rec, params)) break;
  }
  return result;
}

namespace {
std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
}  // namespace

void write_history_csv(const TrainHistory& history, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << "epoch,step,confidence,smoothness,total\n";
  for (const auto& s : history.steps) {
    out << s.epoch << ',' << s.step << ',' << num(s.confidence) << ',' << num(s.smoothness) << ',' << num(s.total)
        << '\n';
  }
}

void write_epochs_csv(const TrainHistory& history, const std::string& path, bool with_wall_time) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  const std::size_t layers = history.epochs.empty() ? 0 : history.epochs.front().running_mean_avg.size();
  out << "epoch,mean_confidence,mean_smoothness,mean_total";
  for (std::size_t l = 0; l < layers; ++l) out << ",bn" << l << "_running_mean,bn" << l << "_running_var";
  if (with_wall_time) out << ",seconds";
  out << '\n';
  for (const auto& e : history.epochs) {
    out << e.epoch << ',' << num(e.mean_confidence) << ',' << num(e.mean_smoothness) << ',' << num(e.mean_total);
    for (std::size_t l = 0; l < e.running_mean_avg.size(); ++l) {
      out << ',' << num(e.running_mean_avg[l]) << ',' << num(e.running_var_avg[l]);
    }
    if (with_wall_time) out << ',' << num(e.seconds);
    out << '\n';
  }
}

}  // namespace piecewise
