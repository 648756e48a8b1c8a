#include "piecewise/model.hpp"

#include <array>
#include <cmath>
#include <random>

namespace piecewise {

void MlpSpec::validate() const {
  if (input_dim <= 0) throw ContractViolation("input_dim must be positive");
  if (hidden_dims.empty()) throw ContractViolation("hidden_dims must be non-empty");
  for (Index d : hidden_dims) {
    if (d <= 0) throw ContractViolation("hidden layer widths must be positive");
  }
  if (num_classes < 2) throw ContractViolation("num_classes must be at least 2");
  if (!batchnorm.empty() && batchnorm.size() != hidden_dims.size()) {
    throw ContractViolation("batchnorm flags must match the number of hidden layers");
  }
}

bool MlpSpec::has_batchnorm(std::size_t layer) const {
  return batchnorm.empty() ? true : batchnorm.at(layer);
}

std::vector<NamedBlock> ModelParams::trainable() {
  std::vector<NamedBlock> out;
  for (std::size_t i = 0; i < dense.size(); ++i) {
    const std::string li = "layer" + std::to_string(i);
    out.push_back({li + ".weight", &dense[i].weight});
    out.push_back({li + ".bias", &dense[i].bias});
    if (i < norms.size() && norms[i]) {
      const std::string bi = "bn" + std::to_string(i);
      out.push_back({bi + ".gamma", &norms[i]->gamma});
      out.push_back({bi + ".beta", &norms[i]->beta});
    }
  }
  return out;
}

std::vector<ConstNamedBlock> ModelParams::trainable() const {
  std::vector<ConstNamedBlock> out;
  for (auto& b : const_cast<ModelParams*>(this)->trainable()) out.push_back({b.name, b.value});
  return out;
}

Index ModelParams::trainable_count() const {
  Index n = 0;
  for (const auto& b : trainable()) n += b.value->size();
  return n;
}

bool operator==(const ModelParams& a, const ModelParams& b) {
  if (a.seed != b.seed || a.dense.size() != b.dense.size() || a.norms.size() != b.norms.size()) return false;
  if (a.spec.input_dim != b.spec.input_dim || a.spec.hidden_dims != b.spec.hidden_dims ||
      a.spec.num_classes != b.spec.num_classes) {
    return false;
  }
  for (std::size_t i = 0; i < a.dense.size(); ++i) {
    if (a.dense[i].weight != b.dense[i].weight || a.dense[i].bias != b.dense[i].bias) return false;
  }
  for (std::size_t i = 0; i < a.norms.size(); ++i) {
    if (a.norms[i].has_value() != b.norms[i].has_value()) return false;
    if (!a.norms[i]) continue;
    const auto& x = *a.norms[i];
    const auto& y = *b.norms[i];
    if (x.gamma != y.gamma || x.beta != y.beta || x.running_mean != y.running_mean ||
        x.running_var != y.running_var) {
      return false;
    }
  }
  return true;
}

ModelParams init_params(const MlpSpec& spec, std::uint64_t seed) {
  spec.validate();
  ModelParams p;
  p.spec = spec;
  p.seed = seed;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  std::vector<Index> widths{spec.input_dim};
  widths.insert(widths.end(), spec.hidden_dims.begin(), spec.hidden_dims.end());
  widths.push_back(spec.num_classes);

  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const Index fan_in = widths[i];
    const Index fan_out = widths[i + 1];
    const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
    DenseLayer layer;
    layer.weight.resize(fan_out, fan_in);
    for (Index k = 0; k < layer.weight.size(); ++k) layer.weight.data()[k] = std_dev * normal(rng);
    layer.bias = Matrix::Zero(1, fan_out);
    p.dense.push_back(std::move(layer));
  }
  for (std::size_t i = 0; i < spec.hidden_dims.size(); ++i) {
    if (!spec.has_batchnorm(i)) {
      p.norms.emplace_back(std::nullopt);
      continue;
    }
    const Index d = spec.hidden_dims[i];
    p.norms.emplace_back(BatchNormLayer{Matrix::Ones(1, d), Matrix::Zero(1, d), Matrix::Zero(1, d), Matrix::Ones(1, d)});
  }
  return p;
}

ModelLeaves add_parameter_leaves(ad::Graph& graph, const ModelParams& params) {
  ModelLeaves leaves;
  for (const auto& b : params.trainable()) {
    leaves.nodes.push_back(graph.parameter(b.name, b.value->rows(), b.value->cols()));
  }
  return leaves;
}

void bind_parameters(ad::Bindings& bindings, const ModelLeaves& leaves, const ModelParams& params) {
  const auto blocks = params.trainable();
  if (blocks.size() != leaves.nodes.size()) throw ContractViolation("parameter leaves do not match the model");
  for (std::size_t i = 0; i < blocks.size(); ++i) bindings.bind(leaves.nodes[i], *blocks[i].value);
}

ForwardNodes build_forward(ad::Graph& graph, const ModelLeaves& leaves, const ModelParams& params,
                           ad::NodeId x, Mode mode) {
  ForwardNodes out;
  std::size_t cursor = 0;
  auto next = [&] { return leaves.nodes.at(cursor++); };
  ad::NodeId h = x;
  const std::size_t hidden = params.spec.hidden_dims.size();
  for (std::size_t i = 0; i < hidden; ++i) {
    const ad::NodeId w = next();
    const ad::NodeId b = next();
    h = graph.affine(h, w, b);
    if (params.norms[i]) {
      const ad::NodeId gamma = next();
      const ad::NodeId beta = next();
      if (mode == Mode::Train) {
        out.batchnorm_inputs.emplace_back(h);
        h = graph.batchnorm_train(h, gamma, beta);
      } else {
        out.batchnorm_inputs.emplace_back(std::nullopt);
        h = graph.batchnorm_eval(h, gamma, beta, params.norms[i]->running_mean, params.norms[i]->running_var);
      }
    } else {
      out.batchnorm_inputs.emplace_back(std::nullopt);
    }
    h = graph.relu(h);
  }
  const ad::NodeId w = next();
  const ad::NodeId b = next();
  out.logits = graph.affine(h, w, b);
  out.log_probs = graph.log_softmax(out.logits);
  return out;
}

void update_running_stats(ModelParams& params, const ad::Graph&, const ad::Evaluation& eval,
                          const ForwardNodes& forward) {
  for (std::size_t i = 0; i < forward.batchnorm_inputs.size(); ++i) {
    if (!forward.batchnorm_inputs[i] || !params.norms[i]) continue;
    const Matrix& h = eval.value(*forward.batchnorm_inputs[i]);
    const double n = static_cast<double>(h.rows());
    Matrix mean = h.colwise().sum() / n;
    Matrix var = (h.rowwise() - mean.row(0)).array().square().colwise().sum() / n;
    auto& bn = *params.norms[i];
    bn.running_mean = (1.0 - kBatchNormMomentum) * bn.running_mean + kBatchNormMomentum * mean;
    bn.running_var = (1.0 - kBatchNormMomentum) * bn.running_var + kBatchNormMomentum * var;
  }
}

namespace {

Matrix forward_log_probs(const ModelParams& params, const Matrix& x, Mode mode, ModelParams* update) {
  if (x.cols() != params.spec.input_dim) {
    throw ContractViolation("input has " + std::to_string(x.cols()) + " columns, model expects " +
                            std::to_string(params.spec.input_dim));
  }
  if (mode == Mode::Train && x.rows() < 2) {
    for (const auto& bn : params.norms) {
      if (bn) throw ContractViolation("training-mode prediction with batchnorm needs at least 2 instances");
    }
  }
  ad::Graph graph;
  const ModelLeaves leaves = add_parameter_leaves(graph, params);
  const ad::NodeId in = graph.input("x", x.rows(), x.cols());
  const ForwardNodes fwd = build_forward(graph, leaves, params, in, mode);
  ad::Bindings bindings;
  bind_parameters(bindings, leaves, params);
  bindings.bind(in, x);
  const ad::Evaluation eval = evaluate(graph, bindings);
  if (update != nullptr) update_running_stats(*update, graph, eval, fwd);
  return eval.value(fwd.log_probs);
}

}  // namespace

ModelParams freeze_batch_statistics(const ModelParams& params, const Matrix& x) {
  ModelParams out = params;
  bool any = false;
  for (auto& bn : out.norms) {
    if (!bn) continue;
    any = true;
    bn->running_mean.setZero();
    bn->running_var.setZero();
  }
  if (!any) return out;
  if (x.rows() < 2) throw ContractViolation("batch statistics need at least 2 instances");
  ad::Graph graph;
  const ModelLeaves leaves = add_parameter_leaves(graph, params);
  const ad::NodeId in = graph.constant(x, "x");
  const ForwardNodes fwd = build_forward(graph, leaves, params, in, Mode::Train);
  ad::Bindings bindings;
  bind_parameters(bindings, leaves, params);
  const ad::Evaluation eval = evaluate(graph, bindings);
  for (std::size_t i = 0; i < fwd.batchnorm_inputs.size(); ++i) {
    if (!fwd.batchnorm_inputs[i]) continue;
    const Matrix& h = eval.value(*fwd.batchnorm_inputs[i]);
    const double n = static_cast<double>(h.rows());
    auto& bn = *out.norms[i];
    bn.running_mean = h.colwise().sum() / n;
    bn.running_var = (h.rowwise() - bn.running_mean.row(0)).array().square().colwise().sum() / n;
  }
  return out;
}

Matrix predict(ModelParams& params, const Matrix& x, Mode mode) {
  return forward_log_probs(params, x, mode, mode == Mode::Train ? &params : nullptr).array().exp().matrix();
}

Matrix predict(const ModelParams& params, const Matrix& x) {
  return forward_log_probs(params, x, Mode::Eval, nullptr).array().exp().matrix();
}

Matrix log_predict(const ModelParams& params, const Matrix& x) {
  return forward_log_probs(params, x, Mode::Eval, nullptr);
}

std::vector<ScoreMatrix> score_matrices(const ModelParams& params, const Matrix& x) {
  if (x.cols() != params.spec.input_dim) throw ContractViolation("input width does not match the model");
  const Index n = x.rows();
  const Index classes = params.spec.num_classes;
  ad::Graph graph;
  const ModelLeaves leaves = add_parameter_leaves(graph, params);
  const ad::NodeId in = graph.input("x", n, x.cols());
  const ForwardNodes fwd = build_forward(graph, leaves, params, in, Mode::Eval);
  std::vector<ad::NodeId> picks;
  for (Index y = 0; y < classes; ++y) {
    Matrix mask = Matrix::Zero(n, classes);
    mask.col(y).setOnes();
    picks.push_back(graph.sum(graph.mul(fwd.log_probs, graph.constant(std::move(mask)))));
  }
  ad::Bindings bindings;
  bind_parameters(bindings, leaves, params);
  bindings.bind(in, x);
  const ad::Evaluation eval = evaluate(graph, bindings);
  const Matrix probs = eval.value(fwd.log_probs).array().exp().matrix();

  std::vector<ScoreMatrix> out(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    out[i].a.resize(x.cols(), classes);
    out[i].x = x.row(i).transpose();
    out[i].probs = probs.row(i).transpose();
  }
  const std::array<ad::NodeId, 1> wrt{in};
  for (Index y = 0; y < classes; ++y) {
    const Matrix grad = backward(graph, eval, picks[y], wrt).at(in);
    for (Index i = 0; i < n; ++i) {
      out[i].a.col(y) = std::sqrt(probs(i, y)) * grad.row(i).transpose();
    }
  }
  return out;
}

ScoreMatrix score_matrix(const ModelParams& params, std::span<const double> x) {
  Matrix row(1, static_cast<Index>(x.size()));
  for (std::size_t k = 0; k < x.size(); ++k) row(0, static_cast<Index>(k)) = x[k];
  return std::move(score_matrices(params, row).front());
}

}  // namespace piecewise
