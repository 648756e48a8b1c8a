#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. A Graph is a static list of primitives; values are supplied
// through Bindings at evaluation time so the same graph can be re-evaluated
// under perturbed leaves (finite-difference checks).

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "piecewise/error.hpp"

namespace piecewise {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

/// Probabilities are clamped to [kProbFloor, 1] before any logarithm.
inline constexpr double kProbFloor = 1e-8;
/// Variance offset inside batch normalization.
inline constexpr double kBatchNormEps = 1e-5;

/// Throws OverflowError naming `what` if any entry of `m` is NaN or infinite.
void require_finite(const Matrix& m, const std::string& what);

namespace ad {

struct NodeId {
  std::uint32_t index = 0;
  friend bool operator==(NodeId, NodeId) = default;
  friend auto operator<=>(NodeId, NodeId) = default;
};

enum class Op : std::uint8_t {
  Parameter,
  Input,
  Constant,
  MatMul,
  Affine,
  Add,
  Sub,
  Mul,
  Div,
  Scale,
  Relu,
  Exp,
  Log,
  Sqrt,
  Clamp,
  LogSoftmax,
  Sum,
  Mean,
  ColSum,
  RowSum,
  Diag,
  Max,
  SegmentMax,
  Transpose,
  GatherRows,
  StopGradient,
  BatchNormTrain,
  BatchNormEval,
  NormalizeColumns,
};

const char* op_name(Op op);

struct Node {
  Op op = Op::Constant;
  std::string name;
  std::vector<NodeId> inputs;
  Index rows = 0;
  Index cols = 0;
  double attr0 = 0.0;           // scale factor, clamp low, eps, column floor
  double attr1 = 0.0;           // clamp high
  std::vector<Index> indices;   // gathered rows; segment length in [0]
  Matrix constant;              // Constant value; running mean/var for BatchNormEval
};

class Graph {
 public:
  NodeId parameter(std::string name, Index rows, Index cols);
  NodeId input(std::string name, Index rows, Index cols);
  NodeId constant(Matrix value, std::string name = {});

  NodeId matmul(NodeId a, NodeId b);
  /// x·Wᵗ + b with x (n×in), W (out×in), b (1×out). Each output row depends
  /// only on its own input row, bit for bit, regardless of n.
  NodeId affine(NodeId x, NodeId weight, NodeId bias);
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId div(NodeId a, NodeId b);
  NodeId scale(NodeId a, double factor);
  NodeId relu(NodeId a);
  NodeId exp(NodeId a);
  NodeId log(NodeId a);
  NodeId sqrt(NodeId a);
  NodeId clamp(NodeId a, double lo, double hi);
  NodeId log_softmax(NodeId logits);
  NodeId sum(NodeId a);
  NodeId mean(NodeId a);
  NodeId col_sum(NodeId a);
  NodeId row_sum(NodeId a);
  /// Diagonal of a square matrix as a column vector.
  NodeId diag(NodeId a);
  /// Largest entry; ties go to the lowest row-major index.
  NodeId max(NodeId a);
  /// Column vector (N×1) → (N/len × 1) maxima over consecutive segments.
  NodeId segment_max(NodeId a, Index segment_length);
  NodeId transpose(NodeId a);
  NodeId gather_rows(NodeId a, std::vector<Index> rows);
  NodeId stop_gradient(NodeId a);
  /// Training-mode batch normalization (biased batch variance).
  NodeId batchnorm_train(NodeId x, NodeId gamma, NodeId beta, double eps = kBatchNormEps);
  /// Inference-mode batch normalization against frozen statistics.
  NodeId batchnorm_eval(NodeId x, NodeId gamma, NodeId beta, const Matrix& running_mean,
                        const Matrix& running_var, double eps = kBatchNormEps);
  /// Divides each column by its sum. Columns whose sum is below `floor`
  /// become uniform 1/n and pass no gradient.
  NodeId normalize_columns(NodeId a, double floor = kProbFloor);

  const Node& node(NodeId id) const { return nodes_.at(id.index); }
  std::size_t size() const noexcept { return nodes_.size(); }
  std::vector<NodeId> leaves() const;

  /// Renames a node; used for readable error messages.
  void set_name(NodeId id, std::string name) { nodes_.at(id.index).name = std::move(name); }

 private:
  NodeId push(Node node);
  const Node& checked(NodeId id) const;

  std::vector<Node> nodes_;
};

/// Leaf values for one evaluation.
class Bindings {
 public:
  void bind(NodeId leaf, Matrix value);
  const Matrix* find(NodeId leaf) const;
  Matrix& at(NodeId leaf);
  const Matrix& at(NodeId leaf) const;

 private:
  std::unordered_map<std::uint32_t, Matrix> values_;
};

/// Forward values for every node of a graph.
class Evaluation {
 public:
  const Matrix& value(NodeId id) const { return values_.at(id.index); }
  double scalar(NodeId id) const;
  std::size_t size() const noexcept { return values_.size(); }

 private:
  friend Evaluation evaluate(const Graph&, const Bindings&);
  std::vector<Matrix> values_;
};

class GradientMap {
 public:
  void set(NodeId leaf, Matrix grad) { grads_[leaf.index] = std::move(grad); }
  const Matrix& at(NodeId leaf) const;
  bool contains(NodeId leaf) const { return grads_.contains(leaf.index); }
  std::size_t size() const noexcept { return grads_.size(); }

 private:
  std::unordered_map<std::uint32_t, Matrix> grads_;
};

Evaluation evaluate(const Graph& graph, const Bindings& bindings);

/// Optional hook applied to each node's accumulated adjoint before it is
/// propagated to the node's inputs. Only test fixtures use it.
using AdjointHook = std::function<void(NodeId, Matrix&)>;

GradientMap backward(const Graph& graph, const Evaluation& eval, NodeId output,
                     std::span<const NodeId> wrt, const AdjointHook& hook = {});

struct LeafCheck {
  NodeId leaf;
  std::string name;
  double max_rel_error = 0.0;
};

struct GradientCheckReport {
  std::vector<LeafCheck> leaves;
  double tolerance = 0.0;
  bool passed = true;
  double worst() const;
};

/// Compares backward() with central differences for every entry of every
/// leaf in `wrt`. The error of an entry is |a−n| / max(|a|, |n|, s) where s
/// is 1e-3 times the largest gradient magnitude over all checked leaves, so
/// entries far below the gradient's overall scale are compared at that scale.
GradientCheckReport gradient_check(const Graph& graph, NodeId output, const Bindings& bindings,
                                   std::span<const NodeId> wrt, double step, double tol,
                                   const AdjointHook& hook = {});

/// Distance to the nearest non-differentiable point: min over ReLU inputs of
/// |x|, over max/segment-max nodes of the top-two gap, and over clamp nodes
/// of the distance to a bound. +inf for smooth graphs.
double nonsmooth_margin(const Graph& graph, const Evaluation& eval);

}  // namespace ad
}  // namespace piecewise
