#include "piecewise/transmission.hpp"

#include <numeric>

namespace piecewise {

Matrix reverse_conditional(const Matrix& q) {
  const Index n = q.rows();
  if (n == 0) throw ContractViolation("empty batch");
  Matrix p(n, q.cols());
  for (Index y = 0; y < q.cols(); ++y) {
    const double z = q.col(y).sum();
    if (z < kProbFloor) {
      p.col(y).setConstant(1.0 / static_cast<double>(n));
    } else {
      p.col(y) = q.col(y) / z;
    }
  }
  return p;
}

Matrix label_transition(const Matrix& q) { return reverse_conditional(q).transpose() * q; }

Matrix instance_transition(const Matrix& q) { return q * reverse_conditional(q).transpose(); }

bool is_diagonal(const Matrix& t, double tol) {
  for (Index r = 0; r < t.rows(); ++r) {
    for (Index c = 0; c < t.cols(); ++c) {
      if (r != c && !(t(r, c) < tol)) return false;
    }
  }
  return true;
}

int recurrent_class_count(const Matrix& s, double tol) {
  if (s.rows() != s.cols()) throw ContractViolation("instance transition matrix must be square");
  if ((s - s.transpose()).cwiseAbs().maxCoeff() > 1e-6) {
    throw ContractViolation("instance transition matrix is not symmetric");
  }
  const Index n = s.rows();
  std::vector<Index> parent(static_cast<std::size_t>(n));
  std::iota(parent.begin(), parent.end(), Index{0});
  auto find = [&](Index a) {
    while (parent[a] != a) a = parent[a] = parent[parent[a]];
    return a;
  };
  int components = static_cast<int>(n);
  for (Index r = 0; r < n; ++r) {
    for (Index c = r + 1; c < n; ++c) {
      if (s(r, c) >= tol || s(c, r) >= tol) {
        const Index a = find(r);
        const Index b = find(c);
        if (a != b) {
          parent[b] = a;
          --components;
        }
      }
    }
  }
  return components;
}

ad::NodeId label_transition(ad::Graph& graph, ad::NodeId q) {
  const ad::NodeId p = graph.normalize_columns(q);
  return graph.matmul(graph.transpose(p), q);
}

}  // namespace piecewise
