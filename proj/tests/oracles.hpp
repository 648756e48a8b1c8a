#pragma once

// Independent reference implementations used as test oracles. They follow the
// definitions literally (loops, enumeration, finite differences) and share no
// code with the library beyond the parameter containers.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "piecewise/model.hpp"

namespace oracle {

using piecewise::Index;
using piecewise::Matrix;

/// P(x|y) = Q(y|x) / Σ_x' Q(y|x'), uniform when the column is dead.
inline Matrix reverse_conditional(const Matrix& q) {
  Matrix p(q.rows(), q.cols());
  for (Index y = 0; y < q.cols(); ++y) {
    double total = 0.0;
    for (Index x = 0; x < q.rows(); ++x) total += q(x, y);
    for (Index x = 0; x < q.rows(); ++x) {
      p(x, y) = total < 1e-8 ? 1.0 / static_cast<double>(q.rows()) : q(x, y) / total;
    }
  }
  return p;
}

/// T(y, y') = Σ_x P(x|y) Q(y'|x).
inline Matrix label_transition(const Matrix& q) {
  const Matrix p = reverse_conditional(q);
  const Index k = q.cols();
  Matrix t = Matrix::Zero(k, k);
  for (Index y = 0; y < k; ++y) {
    for (Index z = 0; z < k; ++z) {
      for (Index x = 0; x < q.rows(); ++x) t(y, z) += p(x, y) * q(x, z);
    }
  }
  return t;
}

/// S(x, x') = Σ_y Q(y|x) P(x'|y).
inline Matrix instance_transition(const Matrix& q) {
  const Matrix p = reverse_conditional(q);
  const Index n = q.rows();
  Matrix s = Matrix::Zero(n, n);
  for (Index a = 0; a < n; ++a) {
    for (Index b = 0; b < n; ++b) {
      for (Index y = 0; y < q.cols(); ++y) s(a, b) += q(a, y) * p(b, y);
    }
  }
  return s;
}

/// Connected components of the graph with an edge wherever s(i,j) ≥ tol (DFS).
inline int components(const Matrix& s, double tol) {
  const Index n = s.rows();
  std::vector<int> seen(static_cast<std::size_t>(n), 0);
  int count = 0;
  for (Index start = 0; start < n; ++start) {
    if (seen[start]) continue;
    ++count;
    std::vector<Index> stack{start};
    seen[start] = 1;
    while (!stack.empty()) {
      const Index i = stack.back();
      stack.pop_back();
      for (Index j = 0; j < n; ++j) {
        if (!seen[j] && (s(i, j) >= tol || s(j, i) >= tol)) {
          seen[j] = 1;
          stack.push_back(j);
        }
      }
    }
  }
  return count;
}

/// Accuracy maximized over every permutation of the predicted labels.
inline double brute_force_accuracy(const std::vector<int>& pred, const std::vector<int>& truth, int k) {
  std::vector<int> perm(static_cast<std::size_t>(k));
  std::iota(perm.begin(), perm.end(), 0);
  std::size_t best = 0;
  do {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hits += perm[pred[i]] == truth[i] ? 1 : 0;
    best = std::max(best, hits);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return pred.empty() ? 0.0 : static_cast<double>(best) / static_cast<double>(pred.size());
}

inline double kl(const std::vector<double>& p, const std::vector<double>& q) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) s += p[i] * std::log(p[i] / std::max(q[i], 1e-8));
  }
  return s;
}

/// Squared Hellinger distance via the Bhattacharyya coefficient.
inline double hel2(const std::vector<double>& p, const std::vector<double>& q) {
  double bc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) bc += std::sqrt(p[i] * q[i]);
  return 1.0 - bc;
}

/// Eval-mode MLP forward pass written with explicit loops.
inline std::vector<double> mlp_probs(const piecewise::ModelParams& params, const std::vector<double>& x) {
  std::vector<double> h = x;
  const std::size_t hidden = params.spec.hidden_dims.size();
  for (std::size_t l = 0; l < params.dense.size(); ++l) {
    const Matrix& w = params.dense[l].weight;
    const Matrix& b = params.dense[l].bias;
    std::vector<double> z(static_cast<std::size_t>(w.rows()));
    for (Index o = 0; o < w.rows(); ++o) {
      double acc = b(0, o);
      for (Index i = 0; i < w.cols(); ++i) acc += w(o, i) * h[i];
      z[o] = acc;
    }
    if (l < hidden) {
      if (params.norms[l]) {
        const auto& bn = *params.norms[l];
        for (std::size_t o = 0; o < z.size(); ++o) {
          z[o] = bn.gamma(0, o) * (z[o] - bn.running_mean(0, o)) / std::sqrt(bn.running_var(0, o) + 1e-5) +
                 bn.beta(0, o);
        }
      }
      for (double& v : z) v = std::max(0.0, v);
    }
    h = std::move(z);
  }
  const double m = *std::max_element(h.begin(), h.end());
  double total = 0.0;
  for (double& v : h) total += (v = std::exp(v - m));
  for (double& v : h) v /= total;
  return h;
}

/// Signs of every hidden pre-activation (after batchnorm) in eval mode.
inline std::vector<bool> relu_pattern(const piecewise::ModelParams& params, const std::vector<double>& x) {
  std::vector<bool> pattern;
  std::vector<double> h = x;
  for (std::size_t l = 0; l < params.spec.hidden_dims.size(); ++l) {
    const Matrix& w = params.dense[l].weight;
    const Matrix& b = params.dense[l].bias;
    std::vector<double> z(static_cast<std::size_t>(w.rows()));
    for (Index o = 0; o < w.rows(); ++o) {
      double acc = b(0, o);
      for (Index i = 0; i < w.cols(); ++i) acc += w(o, i) * h[i];
      if (params.norms[l]) {
        const auto& bn = *params.norms[l];
        acc = bn.gamma(0, o) * (acc - bn.running_mean(0, o)) / std::sqrt(bn.running_var(0, o) + 1e-5) + bn.beta(0, o);
      }
      pattern.push_back(acc > 0.0);
      z[o] = std::max(0.0, acc);
    }
    h = std::move(z);
  }
  return pattern;
}

/// True when x + ν·e keeps one ReLU pattern for every ν in [−reach, reach]
/// (checked on a fine grid).
inline bool linear_region(const piecewise::ModelParams& params, const std::vector<double>& x,
                          const Eigen::VectorXd& e, double reach, int points = 41) {
  const auto base = relu_pattern(params, x);
  std::vector<double> probe(x.size());
  for (int k = 0; k < points; ++k) {
    const double nu = -reach + 2.0 * reach * k / (points - 1);
    for (std::size_t i = 0; i < x.size(); ++i) probe[i] = x[i] + nu * e(static_cast<Index>(i));
    if (relu_pattern(params, probe) != base) return false;
  }
  return true;
}

/// Central difference of a scalar function of a vector along every coordinate.
inline Eigen::VectorXd numeric_gradient(const std::function<double(const Eigen::VectorXd&)>& f,
                                        const Eigen::VectorXd& x, double step) {
  Eigen::VectorXd g(x.size());
  Eigen::VectorXd probe = x;
  for (Index i = 0; i < x.size(); ++i) {
    probe(i) = x(i) + step;
    const double plus = f(probe);
    probe(i) = x(i) - step;
    const double minus = f(probe);
    probe(i) = x(i);
    g(i) = (plus - minus) / (2.0 * step);
  }
  return g;
}

/// ADAM on one scalar, written from the update rule.
struct ScalarAdam {
  double m = 0.0, v = 0.0;
  int t = 0;
  double step(double theta, double g, double lr = 1e-3, double b1 = 0.9, double b2 = 0.999, double eps = 1e-8) {
    ++t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    return theta - lr * mh / (std::sqrt(vh) + eps);
  }
};

/// All index subsets of {0..n-1} as bit masks, excluding the empty set.
inline std::vector<unsigned> nonempty_subsets(int n) {
  std::vector<unsigned> out;
  for (unsigned mask = 1; mask < (1u << n); ++mask) out.push_back(mask);
  return out;
}

/// Estimate of sup over the disk ‖r‖ ≤ rho of f(r) for 2-D perturbations:
/// uniform random samples (half on the circle), then a pattern search in
/// polar coordinates from the best few samples.
inline double disk_sup(const std::function<double(double, double)>& f, double rho, int samples,
                       std::mt19937_64& rng, int polish_starts = 8) {
  std::uniform_real_distribution<double> angle(0.0, 2.0 * M_PI);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto at = [&](double r, double th) { return f(r * std::cos(th), r * std::sin(th)); };
  struct Sample {
    double value, r, th;
  };
  std::vector<Sample> found;
  found.reserve(static_cast<std::size_t>(samples));
  for (int s = 0; s < samples; ++s) {
    const double r = rho * (s % 2 == 0 ? 1.0 : std::sqrt(unit(rng)));
    const double th = angle(rng);
    found.push_back({at(r, th), r, th});
  }
  const std::size_t starts = std::min<std::size_t>(found.size(), static_cast<std::size_t>(polish_starts));
  std::partial_sort(found.begin(), found.begin() + static_cast<std::ptrdiff_t>(starts), found.end(),
                    [](const Sample& a, const Sample& b) { return a.value > b.value; });
  double best = found.empty() ? 0.0 : found.front().value;
  for (std::size_t i = 0; i < starts; ++i) {
    Sample cur = found[i];
    double dth = 2.0 * M_PI / 64.0;
    double dr = rho / 8.0;
    while (dth > 1e-13) {
      bool moved = false;
      const double cands[4][2] = {{cur.r, cur.th + dth}, {cur.r, cur.th - dth},
                                  {std::min(rho, cur.r + dr), cur.th}, {std::max(0.0, cur.r - dr), cur.th}};
      for (const auto& c : cands) {
        const double v = at(c[0], c[1]);
        if (v > cur.value) {
          cur = {v, c[0], c[1]};
          moved = true;
        }
      }
      if (!moved) {
        dth *= 0.5;
        dr *= 0.5;
      }
    }
    best = std::max(best, cur.value);
  }
  return best;
}

}  // namespace oracle
