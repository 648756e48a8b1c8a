#include "piecewise/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace piecewise {

void require_finite(const Matrix& m, const std::string& what) {
  if (!m.allFinite()) throw OverflowError(what);
}

namespace ad {
namespace {

std::string shape_str(Index r, Index c) {
  return "(" + std::to_string(r) + "x" + std::to_string(c) + ")";
}

// Index of the largest entry of a contiguous range; ties go to the lowest index.
Index argmax_of(const double* data, Index n) {
  Index best = 0;
  for (Index i = 1; i < n; ++i) {
    if (data[i] > data[best]) best = i;
  }
  return best;
}

double top_two_gap(const double* data, Index n) {
  if (n < 2) return std::numeric_limits<double>::infinity();
  double first = -std::numeric_limits<double>::infinity();
  double second = first;
  for (Index i = 0; i < n; ++i) {
    if (data[i] > first) {
      second = first;
      first = data[i];
    } else if (data[i] > second) {
      second = data[i];
    }
  }
  return first - second;
}

struct BatchStats {
  Eigen::RowVectorXd mean;
  Eigen::RowVectorXd inv_std;
};

BatchStats batch_stats(const Matrix& x, double eps) {
  BatchStats s;
  const double n = static_cast<double>(x.rows());
  s.mean = x.colwise().sum() / n;
  Eigen::RowVectorXd var = (x.rowwise() - s.mean).array().square().colwise().sum() / n;
  s.inv_std = (var.array() + eps).rsqrt();
  return s;
}

void accumulate(std::vector<Matrix>& adj, NodeId id, const Matrix& delta) {
  Matrix& slot = adj[id.index];
  if (slot.size() == 0) {
    slot = delta;
  } else {
    slot += delta;
  }
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::Parameter: return "parameter";
    case Op::Input: return "input";
    case Op::Constant: return "constant";
    case Op::MatMul: return "matmul";
    case Op::Affine: return "affine";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Scale: return "scale";
    case Op::Relu: return "relu";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Sqrt: return "sqrt";
    case Op::Clamp: return "clamp";
    case Op::LogSoftmax: return "log_softmax";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::ColSum: return "col_sum";
    case Op::RowSum: return "row_sum";
    case Op::Diag: return "diag";
    case Op::Max: return "max";
    case Op::SegmentMax: return "segment_max";
    case Op::Transpose: return "transpose";
    case Op::GatherRows: return "gather_rows";
    case Op::StopGradient: return "stop_gradient";
    case Op::BatchNormTrain: return "batchnorm_train";
    case Op::BatchNormEval: return "batchnorm_eval";
    case Op::NormalizeColumns: return "normalize_columns";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Graph construction with shape inference.

NodeId Graph::push(Node node) {
  if (node.name.empty()) {
    node.name = std::string(op_name(node.op)) + "#" + std::to_string(nodes_.size());
  }
  nodes_.push_back(std::move(node));
  return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

const Node& Graph::checked(NodeId id) const {
  if (id.index >= nodes_.size()) throw ContractViolation("node id out of range");
  return nodes_[id.index];
}

NodeId Graph::parameter(std::string name, Index rows, Index cols) {
  Node n{.op = Op::Parameter, .name = std::move(name), .rows = rows, .cols = cols};
  return push(std::move(n));
}

NodeId Graph::input(std::string name, Index rows, Index cols) {
  Node n{.op = Op::Input, .name = std::move(name), .rows = rows, .cols = cols};
  return push(std::move(n));
}

NodeId Graph::constant(Matrix value, std::string name) {
  require_finite(value, name.empty() ? "constant" : name);
  Node n{.op = Op::Constant, .name = std::move(name), .rows = value.rows(), .cols = value.cols()};
  n.constant = std::move(value);
  return push(std::move(n));
}

NodeId Graph::matmul(NodeId a, NodeId b) {
  const Node& x = checked(a);
  const Node& y = checked(b);
  if (x.cols != y.rows) {
    throw ShapeError("matmul#" + std::to_string(nodes_.size()),
                     shape_str(x.rows, x.cols) + " * " + shape_str(y.rows, y.cols));
  }
  return push(Node{.op = Op::MatMul, .inputs = {a, b}, .rows = x.rows, .cols = y.cols});
}

NodeId Graph::affine(NodeId x, NodeId weight, NodeId bias) {
  const Node& in = checked(x);
  const Node& w = checked(weight);
  const Node& b = checked(bias);
  if (w.cols != in.cols || b.rows != 1 || b.cols != w.rows) {
    throw ShapeError("affine#" + std::to_string(nodes_.size()),
                     "x" + shape_str(in.rows, in.cols) + " W" + shape_str(w.rows, w.cols) + " b" +
                         shape_str(b.rows, b.cols));
  }
  return push(Node{.op = Op::Affine, .inputs = {x, weight, bias}, .rows = in.rows, .cols = w.rows});
}

namespace {
Node elementwise(Op op, const Node& x, const Node& y, NodeId a, NodeId b, std::size_t index) {
  if (x.rows != y.rows || x.cols != y.cols) {
    throw ShapeError(std::string(op_name(op)) + "#" + std::to_string(index),
                     shape_str(x.rows, x.cols) + " vs " + shape_str(y.rows, y.cols));
  }
  return Node{.op = op, .inputs = {a, b}, .rows = x.rows, .cols = x.cols};
}
}  // namespace

NodeId Graph::add(NodeId a, NodeId b) { return push(elementwise(Op::Add, checked(a), checked(b), a, b, size())); }
NodeId Graph::sub(NodeId a, NodeId b) { return push(elementwise(Op::Sub, checked(a), checked(b), a, b, size())); }
NodeId Graph::mul(NodeId a, NodeId b) { return push(elementwise(Op::Mul, checked(a), checked(b), a, b, size())); }
NodeId Graph::div(NodeId a, NodeId b) { return push(elementwise(Op::Div, checked(a), checked(b), a, b, size())); }

NodeId Graph::scale(NodeId a, double factor) {
  const Node& x = checked(a);
  return push(Node{.op = Op::Scale, .inputs = {a}, .rows = x.rows, .cols = x.cols, .attr0 = factor});
}

#define PIECEWISE_UNARY(fn, OPCODE)                                                   \
  NodeId Graph::fn(NodeId a) {                                                        \
    const Node& x = checked(a);                                                       \
    return push(Node{.op = Op::OPCODE, .inputs = {a}, .rows = x.rows, .cols = x.cols}); \
  }
PIECEWISE_UNARY(relu, Relu)
PIECEWISE_UNARY(exp, Exp)
PIECEWISE_UNARY(log, Log)
PIECEWISE_UNARY(sqrt, Sqrt)
PIECEWISE_UNARY(log_softmax, LogSoftmax)
PIECEWISE_UNARY(stop_gradient, StopGradient)
#undef PIECEWISE_UNARY

NodeId Graph::clamp(NodeId a, double lo, double hi) {
  if (!(lo <= hi)) throw ContractViolation("clamp requires lo <= hi");
  const Node& x = checked(a);
  return push(Node{.op = Op::Clamp, .inputs = {a}, .rows = x.rows, .cols = x.cols, .attr0 = lo, .attr1 = hi});
}

NodeId Graph::sum(NodeId a) {
  checked(a);
  return push(Node{.op = Op::Sum, .inputs = {a}, .rows = 1, .cols = 1});
}

NodeId Graph::mean(NodeId a) {
  const Node& x = checked(a);
  if (x.rows * x.cols == 0) throw ShapeError("mean#" + std::to_string(size()), "empty operand");
  return push(Node{.op = Op::Mean, .inputs = {a}, .rows = 1, .cols = 1});
}

NodeId Graph::col_sum(NodeId a) {
  const Node& x = checked(a);
  return push(Node{.op = Op::ColSum, .inputs = {a}, .rows = 1, .cols = x.cols});
}

NodeId Graph::row_sum(NodeId a) {
  const Node& x = checked(a);
  return push(Node{.op = Op::RowSum, .inputs = {a}, .rows = x.rows, .cols = 1});
}

NodeId Graph::diag(NodeId a) {
  const Node& x = checked(a);
  if (x.rows != x.cols) throw ShapeError("diag#" + std::to_string(size()), "not square " + shape_str(x.rows, x.cols));
  return push(Node{.op = Op::Diag, .inputs = {a}, .rows = x.rows, .cols = 1});
}

NodeId Graph::max(NodeId a) {
  const Node& x = checked(a);
  if (x.rows * x.cols == 0) throw ShapeError("max#" + std::to_string(size()), "empty operand");
  return push(Node{.op = Op::Max, .inputs = {a}, .rows = 1, .cols = 1});
}

NodeId Graph::segment_max(NodeId a, Index segment_length) {
  const Node& x = checked(a);
  if (x.cols != 1 || segment_length <= 0 || x.rows % segment_length != 0) {
    throw ShapeError("segment_max#" + std::to_string(size()),
                     shape_str(x.rows, x.cols) + " with segment " + std::to_string(segment_length));
  }
  Node n{.op = Op::SegmentMax, .inputs = {a}, .rows = x.rows / segment_length, .cols = 1};
  n.indices = {segment_length};
  return push(std::move(n));
}

NodeId Graph::transpose(NodeId a) {
  const Node& x = checked(a);
  return push(Node{.op = Op::Transpose, .inputs = {a}, .rows = x.cols, .cols = x.rows});
}

NodeId Graph::gather_rows(NodeId a, std::vector<Index> rows) {
  const Node& x = checked(a);
  for (Index r : rows) {
    if (r < 0 || r >= x.rows) {
      throw ShapeError("gather_rows#" + std::to_string(size()),
                       "row " + std::to_string(r) + " outside " + shape_str(x.rows, x.cols));
    }
  }
  Node n{.op = Op::GatherRows, .inputs = {a}, .rows = static_cast<Index>(rows.size()), .cols = x.cols};
  n.indices = std::move(rows);
  return push(std::move(n));
}

NodeId Graph::batchnorm_train(NodeId x, NodeId gamma, NodeId beta, double eps) {
  const Node& in = checked(x);
  const Node& g = checked(gamma);
  const Node& b = checked(beta);
  if (g.rows != 1 || b.rows != 1 || g.cols != in.cols || b.cols != in.cols) {
    throw ShapeError("batchnorm_train#" + std::to_string(size()), "scale/shift must be 1x" + std::to_string(in.cols));
  }
  return push(Node{.op = Op::BatchNormTrain, .inputs = {x, gamma, beta}, .rows = in.rows, .cols = in.cols, .attr0 = eps});
}

NodeId Graph::batchnorm_eval(NodeId x, NodeId gamma, NodeId beta, const Matrix& running_mean,
                             const Matrix& running_var, double eps) {
  const Node& in = checked(x);
  const Node& g = checked(gamma);
  const Node& b = checked(beta);
  if (g.rows != 1 || b.rows != 1 || g.cols != in.cols || b.cols != in.cols ||
      running_mean.size() != in.cols || running_var.size() != in.cols) {
    throw ShapeError("batchnorm_eval#" + std::to_string(size()), "statistics must be 1x" + std::to_string(in.cols));
  }
  Node n{.op = Op::BatchNormEval, .inputs = {x, gamma, beta}, .rows = in.rows, .cols = in.cols, .attr0 = eps};
  n.constant.resize(2, in.cols);
  n.constant.row(0) = running_mean.reshaped<Eigen::RowMajor>().transpose();
  n.constant.row(1) = running_var.reshaped<Eigen::RowMajor>().transpose();
  return push(std::move(n));
}

NodeId Graph::normalize_columns(NodeId a, double floor) {
  const Node& x = checked(a);
  return push(Node{.op = Op::NormalizeColumns, .inputs = {a}, .rows = x.rows, .cols = x.cols, .attr0 = floor});
}

std::vector<NodeId> Graph::leaves() const {
  std::vector<NodeId> out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].op == Op::Parameter || nodes_[i].op == Op::Input) {
      out.push_back(NodeId{static_cast<std::uint32_t>(i)});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

void Bindings::bind(NodeId leaf, Matrix value) {
  require_finite(value, "binding #" + std::to_string(leaf.index));
  values_[leaf.index] = std::move(value);
}

const Matrix* Bindings::find(NodeId leaf) const {
  auto it = values_.find(leaf.index);
  return it == values_.end() ? nullptr : &it->second;
}

Matrix& Bindings::at(NodeId leaf) {
  auto it = values_.find(leaf.index);
  if (it == values_.end()) throw ContractViolation("leaf #" + std::to_string(leaf.index) + " is not bound");
  return it->second;
}

const Matrix& Bindings::at(NodeId leaf) const {
  auto it = values_.find(leaf.index);
  if (it == values_.end()) throw ContractViolation("leaf #" + std::to_string(leaf.index) + " is not bound");
  return it->second;
}

double Evaluation::scalar(NodeId id) const {
  const Matrix& v = value(id);
  if (v.size() != 1) throw ContractViolation("node is not scalar");
  return v(0, 0);
}

const Matrix& GradientMap::at(NodeId leaf) const {
  auto it = grads_.find(leaf.index);
  if (it == grads_.end()) throw ContractViolation("no gradient recorded for leaf #" + std::to_string(leaf.index));
  return it->second;
}

// ---------------------------------------------------------------------------
// Forward pass.

Evaluation evaluate(const Graph& graph, const Bindings& bindings) {
  Evaluation out;
  out.values_.resize(graph.size());
  auto& v = out.values_;
  for (std::size_t i = 0; i < graph.size(); ++i) {
    const Node& n = graph.node(NodeId{static_cast<std::uint32_t>(i)});
    auto in = [&](std::size_t k) -> const Matrix& { return v[n.inputs[k].index]; };
    Matrix& y = v[i];
    switch (n.op) {
      case Op::Parameter:
      case Op::Input: {
        const Matrix* bound = bindings.find(NodeId{static_cast<std::uint32_t>(i)});
        if (bound == nullptr) throw ContractViolation("leaf '" + n.name + "' is not bound");
        if (bound->rows() != n.rows || bound->cols() != n.cols) {
          throw ShapeError(n.name, "bound " + shape_str(bound->rows(), bound->cols()) + ", declared " +
                                       shape_str(n.rows, n.cols));
        }
        y = *bound;
        break;
      }
      case Op::Constant: y = n.constant; break;
      case Op::MatMul: y.noalias() = in(0) * in(1); break;
      case Op::Affine: {
        const Matrix& x = in(0);
        const Matrix& w = in(1);
        const Matrix& b = in(2);
        y.resize(x.rows(), w.rows());
        for (Index r = 0; r < x.rows(); ++r) {
          y.row(r).noalias() = x.row(r) * w.transpose();
          y.row(r) += b.row(0);
        }
        break;
      }
      case Op::Add: y = in(0) + in(1); break;
      case Op::Sub: y = in(0) - in(1); break;
      case Op::Mul: y = in(0).cwiseProduct(in(1)); break;
      case Op::Div: y = in(0).cwiseQuotient(in(1)); break;
      case Op::Scale: y = n.attr0 * in(0); break;
      case Op::Relu: y = in(0).cwiseMax(0.0); break;
      case Op::Exp: y = in(0).array().exp().matrix(); break;
      case Op::Log: y = in(0).array().log().matrix(); break;
      case Op::Sqrt: y = in(0).array().sqrt().matrix(); break;
      case Op::Clamp: y = in(0).cwiseMax(n.attr0).cwiseMin(n.attr1); break;
      case Op::LogSoftmax: {
        const Matrix& x = in(0);
        y.resize(x.rows(), x.cols());
        for (Index r = 0; r < x.rows(); ++r) {
          const double m = x.row(r).maxCoeff();
          const double lse = m + std::log((x.row(r).array() - m).exp().sum());
          y.row(r) = x.row(r).array() - lse;
        }
        break;
      }
      case Op::Sum: y = Matrix::Constant(1, 1, in(0).sum()); break;
      case Op::Mean: y = Matrix::Constant(1, 1, in(0).mean()); break;
      case Op::ColSum: y = in(0).colwise().sum(); break;
      case Op::RowSum: y = in(0).rowwise().sum(); break;
      case Op::Diag: y = in(0).diagonal(); break;
      case Op::Max: {
        const Matrix& x = in(0);
        y = Matrix::Constant(1, 1, x.data()[argmax_of(x.data(), x.size())]);
        break;
      }
      case Op::SegmentMax: {
        const Matrix& x = in(0);
        const Index len = n.indices[0];
        y.resize(n.rows, 1);
        for (Index s = 0; s < n.rows; ++s) {
          const double* seg = x.data() + s * len;
          y(s, 0) = seg[argmax_of(seg, len)];
        }
        break;
      }
      case Op::Transpose: y = in(0).transpose(); break;
      case Op::GatherRows: {
        const Matrix& x = in(0);
        y.resize(n.rows, n.cols);
        for (Index r = 0; r < n.rows; ++r) y.row(r) = x.row(n.indices[r]);
        break;
      }
      case Op::StopGradient: y = in(0); break;
      case Op::BatchNormTrain: {
        const Matrix& x = in(0);
        if (x.rows() < 2) throw ContractViolation("batchnorm in training mode needs at least 2 rows at '" + n.name + "'");
        const BatchStats s = batch_stats(x, n.attr0);
        y = ((x.rowwise() - s.mean).array().rowwise() * (s.inv_std.array() * in(1).row(0).array())).matrix();
        y.rowwise() += in(2).row(0);
        break;
      }
      case Op::BatchNormEval: {
        const Matrix& x = in(0);
        Eigen::RowVectorXd inv_std = (n.constant.row(1).array() + n.attr0).rsqrt();
        Eigen::RowVectorXd mean = n.constant.row(0);
        y = ((x.rowwise() - mean).array().rowwise() * (inv_std.array() * in(1).row(0).array())).matrix();
        y.rowwise() += in(2).row(0);
        break;
      }
      case Op::NormalizeColumns: {
        const Matrix& x = in(0);
        y.resize(x.rows(), x.cols());
        const double uniform = 1.0 / static_cast<double>(x.rows());
        for (Index c = 0; c < x.cols(); ++c) {
          const double z = x.col(c).sum();
          if (z < n.attr0) {
            y.col(c).setConstant(uniform);
          } else {
            y.col(c) = x.col(c) / z;
          }
        }
        break;
      }
    }
    require_finite(y, n.name);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reverse pass.

GradientMap backward(const Graph& graph, const Evaluation& eval, NodeId output,
                     std::span<const NodeId> wrt, const AdjointHook& hook) {
  if (output.index >= graph.size()) throw ContractViolation("output node out of range");
  if (eval.size() != graph.size()) throw ContractViolation("evaluation does not belong to this graph");
  if (eval.value(output).size() != 1) {
    throw ContractViolation("backward requires a scalar output, got node '" + graph.node(output).name + "'");
  }

  // Forward reachability from requested leaves; only these nodes need adjoints.
  std::vector<char> needs(graph.size(), 0);
  for (NodeId leaf : wrt) {
    const Op op = graph.node(leaf).op;
    if (op != Op::Parameter && op != Op::Input) {
      throw ContractViolation("gradient requested for non-leaf node '" + graph.node(leaf).name + "'");
    }
    needs[leaf.index] = 1;
  }
  for (std::size_t i = 0; i < graph.size(); ++i) {
    const Node& n = graph.node(NodeId{static_cast<std::uint32_t>(i)});
    if (n.op == Op::StopGradient) continue;
    for (NodeId p : n.inputs) needs[i] = needs[i] || needs[p.index];
  }

  std::vector<Matrix> adj(graph.size());
  adj[output.index] = Matrix::Ones(1, 1);

  for (std::size_t i = output.index + 1; i-- > 0;) {
    if (adj[i].size() == 0 || !needs[i]) continue;
    const NodeId id{static_cast<std::uint32_t>(i)};
    const Node& n = graph.node(id);
    if (hook) hook(id, adj[i]);
    const Matrix& g = adj[i];
    const Matrix& y = eval.value(id);
    auto in = [&](std::size_t k) -> const Matrix& { return eval.value(n.inputs[k]); };
    auto want = [&](std::size_t k) { return needs[n.inputs[k].index] != 0; };
    auto push = [&](std::size_t k, const Matrix& delta) { accumulate(adj, n.inputs[k], delta); };

    switch (n.op) {
      case Op::Parameter:
      case Op::Input:
      case Op::Constant:
      case Op::StopGradient:
        break;
      case Op::MatMul:
        if (want(0)) push(0, g * in(1).transpose());
        if (want(1)) push(1, in(0).transpose() * g);
        break;
      case Op::Affine:
        if (want(0)) push(0, g * in(1));
        if (want(1)) push(1, g.transpose() * in(0));
        if (want(2)) push(2, g.colwise().sum());
        break;
      case Op::Add:
        if (want(0)) push(0, g);
        if (want(1)) push(1, g);
        break;
      case Op::Sub:
        if (want(0)) push(0, g);
        if (want(1)) push(1, -g);
        break;
      case Op::Mul:
        if (want(0)) push(0, g.cwiseProduct(in(1)));
        if (want(1)) push(1, g.cwiseProduct(in(0)));
        break;
      case Op::Div:
        if (want(0)) push(0, g.cwiseQuotient(in(1)));
        if (want(1)) push(1, -(g.cwiseProduct(y)).cwiseQuotient(in(1)));
        break;
      case Op::Scale: push(0, n.attr0 * g); break;
      case Op::Relu: push(0, (in(0).array() > 0.0).select(g, 0.0)); break;
      case Op::Exp: push(0, g.cwiseProduct(y)); break;
      case Op::Log: push(0, g.cwiseQuotient(in(0))); break;
      case Op::Sqrt: push(0, (y.array() > 0.0).select(0.5 * g.array() / y.array(), 0.0).matrix()); break;
      case Op::Clamp: {
        const auto& x = in(0).array();
        push(0, (x >= n.attr0 && x <= n.attr1).select(g, 0.0));
        break;
      }
      case Op::LogSoftmax: {
        Matrix soft = y.array().exp().matrix();
        Eigen::VectorXd row_total = g.rowwise().sum();
        push(0, g - (soft.array().colwise() * row_total.array()).matrix());
        break;
      }
      case Op::Sum: push(0, Matrix::Constant(in(0).rows(), in(0).cols(), g(0, 0))); break;
      case Op::Mean:
        push(0, Matrix::Constant(in(0).rows(), in(0).cols(), g(0, 0) / static_cast<double>(in(0).size())));
        break;
      case Op::ColSum: push(0, g.replicate(in(0).rows(), 1)); break;
      case Op::RowSum: push(0, g.replicate(1, in(0).cols())); break;
      case Op::Diag: {
        Matrix d = Matrix::Zero(in(0).rows(), in(0).cols());
        d.diagonal() = g.col(0);
        push(0, d);
        break;
      }
      case Op::Max: {
        const Matrix& x = in(0);
        Matrix d = Matrix::Zero(x.rows(), x.cols());
        d.data()[argmax_of(x.data(), x.size())] = g(0, 0);
        push(0, d);
        break;
      }
      case Op::SegmentMax: {
        const Matrix& x = in(0);
        const Index len = n.indices[0];
        Matrix d = Matrix::Zero(x.rows(), 1);
        for (Index s = 0; s < n.rows; ++s) {
          d(s * len + argmax_of(x.data() + s * len, len), 0) = g(s, 0);
        }
        push(0, d);
        break;
      }
      case Op::Transpose: push(0, g.transpose()); break;
      case Op::GatherRows: {
        Matrix d = Matrix::Zero(in(0).rows(), in(0).cols());
        for (Index r = 0; r < n.rows; ++r) d.row(n.indices[r]) += g.row(r);
        push(0, d);
        break;
      }
      case Op::BatchNormTrain: {
        const Matrix& x = in(0);
        const BatchStats s = batch_stats(x, n.attr0);
        Matrix xhat = ((x.rowwise() - s.mean).array().rowwise() * s.inv_std.array()).matrix();
        if (want(1)) push(1, g.cwiseProduct(xhat).colwise().sum());
        if (want(2)) push(2, g.colwise().sum());
        if (want(0)) {
          const double m = static_cast<double>(x.rows());
          Matrix dxhat = (g.array().rowwise() * in(1).row(0).array()).matrix();
          Eigen::RowVectorXd sum_d = dxhat.colwise().sum();
          Eigen::RowVectorXd sum_dx = dxhat.cwiseProduct(xhat).colwise().sum();
          Matrix dx = (m * dxhat.array()).matrix();
          dx.rowwise() -= sum_d;
          dx -= (xhat.array().rowwise() * sum_dx.array()).matrix();
          dx = (dx.array().rowwise() * (s.inv_std.array() / m)).matrix();
          push(0, dx);
        }
        break;
      }
      case Op::BatchNormEval: {
        const Matrix& x = in(0);
        Eigen::RowVectorXd inv_std = (n.constant.row(1).array() + n.attr0).rsqrt();
        Eigen::RowVectorXd mean = n.constant.row(0);
        if (want(1)) {
          Matrix xhat = ((x.rowwise() - mean).array().rowwise() * inv_std.array()).matrix();
          push(1, g.cwiseProduct(xhat).colwise().sum());
        }
        if (want(2)) push(2, g.colwise().sum());
        if (want(0)) push(0, (g.array().rowwise() * (inv_std.array() * in(1).row(0).array())).matrix());
        break;
      }
      case Op::NormalizeColumns: {
        const Matrix& x = in(0);
        Matrix d = Matrix::Zero(x.rows(), x.cols());
        for (Index c = 0; c < x.cols(); ++c) {
          const double z = x.col(c).sum();
          if (z < n.attr0) continue;
          const double inner = g.col(c).dot(y.col(c));
          d.col(c) = (g.col(c).array() - inner) / z;
        }
        push(0, d);
        break;
      }
    }
  }

  GradientMap out;
  for (NodeId leaf : wrt) {
    Matrix& a = adj[leaf.index];
    if (a.size() == 0) a = Matrix::Zero(graph.node(leaf).rows, graph.node(leaf).cols);
    out.set(leaf, a);
  }
  return out;
}

// ---------------------------------------------------------------------------

double GradientCheckReport::worst() const {
  double w = 0.0;
  for (const auto& l : leaves) w = std::max(w, l.max_rel_error);
  return w;
}

GradientCheckReport gradient_check(const Graph& graph, NodeId output, const Bindings& bindings,
                                   std::span<const NodeId> wrt, double step, double tol,
                                   const AdjointHook& hook) {
  if (!(step > 0.0)) throw ContractViolation("gradient_check requires step > 0");
  const Evaluation base = evaluate(graph, bindings);
  const GradientMap analytic = backward(graph, base, output, wrt, hook);

  GradientCheckReport report;
  report.tolerance = tol;
  Bindings probe = bindings;
  std::vector<Matrix> numerics;
  double scale = 0.0;
  for (NodeId leaf : wrt) {
    Matrix& value = probe.at(leaf);
    Matrix numeric(value.rows(), value.cols());
    for (Index k = 0; k < value.size(); ++k) {
      const double saved = value.data()[k];
      value.data()[k] = saved + step;
      const double plus = evaluate(graph, probe).scalar(output);
      value.data()[k] = saved - step;
      const double minus = evaluate(graph, probe).scalar(output);
      value.data()[k] = saved;
      numeric.data()[k] = (plus - minus) / (2.0 * step);
    }
    const Matrix& a = analytic.at(leaf);
    if (a.size() > 0) scale = std::max({scale, a.cwiseAbs().maxCoeff(), numeric.cwiseAbs().maxCoeff()});
    numerics.push_back(std::move(numeric));
  }
  const double floor = scale > 0.0 ? 1e-3 * scale : 1e-12;
  for (std::size_t i = 0; i < wrt.size(); ++i) {
    const Matrix& a = analytic.at(wrt[i]);
    const Matrix& numeric = numerics[i];
    double worst = 0.0;
    for (Index k = 0; k < a.size(); ++k) {
      const double x = a.data()[k];
      const double nx = numeric.data()[k];
      const double denom = std::max({std::abs(x), std::abs(nx), floor});
      worst = std::max(worst, std::abs(x - nx) / denom);
    }
    report.leaves.push_back({wrt[i], graph.node(wrt[i]).name, worst});
    if (!(worst < tol)) report.passed = false;
  }
  return report;
}

double nonsmooth_margin(const Graph& graph, const Evaluation& eval) {
  double margin = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < graph.size(); ++i) {
    const Node& n = graph.node(NodeId{static_cast<std::uint32_t>(i)});
    if (n.inputs.empty()) continue;
    const Matrix& x = eval.value(n.inputs[0]);
    switch (n.op) {
      case Op::Relu:
        if (x.size() > 0) margin = std::min(margin, x.cwiseAbs().minCoeff());
        break;
      case Op::Max: margin = std::min(margin, top_two_gap(x.data(), x.size())); break;
      case Op::SegmentMax:
        for (Index s = 0; s < n.rows; ++s) {
          margin = std::min(margin, top_two_gap(x.data() + s * n.indices[0], n.indices[0]));
        }
        break;
      case Op::Clamp:
        if (x.size() > 0) {
          margin = std::min(margin, (x.array() - n.attr0).abs().minCoeff());
          margin = std::min(margin, (x.array() - n.attr1).abs().minCoeff());
        }
        break;
      case Op::NormalizeColumns:
        if (x.size() > 0) margin = std::min(margin, (x.colwise().sum().array() - n.attr0).abs().minCoeff());
        break;
      default: break;
    }
  }
  return margin;
}

}  // namespace ad
}  // namespace piecewise
