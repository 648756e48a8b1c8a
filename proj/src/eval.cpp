#include "piecewise/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>

#include <json.hpp>

#include "piecewise/parallel.hpp"
#include "piecewise/smoothness.hpp"

namespace piecewise {

std::vector<int> solve_assignment(const Matrix& cost) {
  if (cost.rows() != cost.cols()) throw ContractViolation("assignment needs a square cost matrix");
  const int n = static_cast<int>(cost.rows());
  const double inf = std::numeric_limits<double>::infinity();
  // Shortest augmenting paths with row/column potentials; index 0 is a sentinel.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> match(n + 1, 0), way(n + 1, 0);
  for (int row = 1; row <= n; ++row) {
    match[0] = row;
    int col0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[col0] = 1;
      const int r = match[col0];
      double delta = inf;
      int col1 = 0;
      for (int c = 1; c <= n; ++c) {
        if (used[c]) continue;
        const double reduced = cost(r - 1, c - 1) - u[r] - v[c];
        if (reduced < minv[c]) {
          minv[c] = reduced;
          way[c] = col0;
        }
        if (minv[c] < delta) {
          delta = minv[c];
          col1 = c;
        }
      }
      for (int c = 0; c <= n; ++c) {
        if (used[c]) {
          u[match[c]] += delta;
          v[c] -= delta;
        } else {
          minv[c] -= delta;
        }
      }
      col0 = col1;
    } while (match[col0] != 0);
    do {
      const int col1 = way[col0];
      match[col0] = match[col1];
      col0 = col1;
    } while (col0 != 0);
  }
  std::vector<int> assignment(n, -1);
  for (int c = 1; c <= n; ++c) {
    if (match[c] > 0) assignment[match[c] - 1] = c - 1;
  }
  return assignment;
}

AssignmentResult clustering_accuracy(const std::vector<int>& pred, const std::vector<int>& truth, Index num_classes) {
  if (pred.size() != truth.size()) throw ContractViolation("predictions and labels differ in length");
  if (pred.empty()) throw ContractViolation("clustering accuracy needs at least one instance");
  Index k = num_classes;
  if (k == 0) {
    k = 1 + std::max(*std::max_element(pred.begin(), pred.end()), *std::max_element(truth.begin(), truth.end()));
  }
  AssignmentResult out;
  out.confusion = Matrix::Zero(k, k);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] < 0 || pred[i] >= k || truth[i] < 0 || truth[i] >= k) throw ContractViolation("label out of range");
    out.confusion(pred[i], truth[i]) += 1.0;
  }
  out.permutation = solve_assignment(-out.confusion);
  double matched = 0.0;
  for (Index l = 0; l < k; ++l) matched += out.confusion(l, out.permutation[l]);
  out.accuracy = matched / static_cast<double>(pred.size());
  return out;
}

std::vector<int> predict_labels(const ModelParams& params, const Matrix& x) {
  const Matrix q = predict(params, x);
  std::vector<int> out(static_cast<std::size_t>(q.rows()));
  for (Index i = 0; i < q.rows(); ++i) {
    Index best = 0;
    for (Index c = 1; c < q.cols(); ++c) {
      if (q(i, c) > q(i, best)) best = c;
    }
    out[i] = static_cast<int>(best);
  }
  return out;
}

namespace {

// Linear interpolation between order statistics.
double quantile(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) return 0.0;
  const double pos = p * static_cast<double>(sorted.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

// Score matrices for many rows, computed in chunks across workers.
std::vector<ScoreMatrix> chunked_scores(const ModelParams& params, const Matrix& x) {
  constexpr Index kChunk = 256;
  const Index n = x.rows();
  const Index chunks = (n + kChunk - 1) / kChunk;
  std::vector<std::vector<ScoreMatrix>> parts(static_cast<std::size_t>(chunks));
  parallel_for(chunks, [&](Index c) {
    const Index lo = c * kChunk;
    const Index len = std::min(kChunk, n - lo);
    parts[c] = score_matrices(params, x.middleRows(lo, len));
  });
  std::vector<ScoreMatrix> out;
  out.reserve(static_cast<std::size_t>(n));
  for (auto& p : parts) {
    for (auto& s : p) out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

StabilityStats stability_stats(const ModelParams& params, const Dataset& ds) {
  StabilityStats stats;
  const std::vector<ScoreMatrix> scores = chunked_scores(params, ds.x);
  stats.rows.resize(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const ScoreMatrix& s = scores[i];
    StabilityRow& row = stats.rows[i];
    row.index = static_cast<Index>(i);
    Index best = 0;
    for (Index c = 1; c < s.probs.size(); ++c) {
      if (s.probs(c) > s.probs(best)) best = c;
    }
    row.predicted_label = static_cast<int>(best);
    row.confidence = s.probs(best);
    row.fisher_trace = fisher_trace(s.a);
    row.top_eigenvalue = fisher_top_eig(s.a);
  }

  std::map<int, std::vector<const StabilityRow*>> by_class;
  for (const auto& r : stats.rows) by_class[r.predicted_label].push_back(&r);
  for (const auto& [label, members] : by_class) {
    ClassSummary cs;
    cs.label = label;
    cs.count = static_cast<Index>(members.size());
    std::vector<double> traces;
    for (const StabilityRow* r : members) {
      cs.mean_confidence += r->confidence;
      cs.mean_trace += r->fisher_trace;
      traces.push_back(r->fisher_trace);
    }
    cs.mean_confidence /= static_cast<double>(cs.count);
    cs.mean_trace /= static_cast<double>(cs.count);
    std::sort(traces.begin(), traces.end());
    cs.trace_min = traces.front();
    cs.trace_q1 = quantile(traces, 0.25);
    cs.trace_median = quantile(traces, 0.5);
    cs.trace_q3 = quantile(traces, 0.75);
    cs.trace_max = traces.back();
    stats.classes.push_back(cs);
  }
  return stats;
}

std::vector<HeatmapPoint> heatmap_grid(const ModelParams& params, const BoundingBox& box, Index resolution) {
  if (params.spec.input_dim != 2) throw ContractViolation("heatmap needs a model on 2-D inputs");
  if (resolution < 2) throw ContractViolation("heatmap resolution must be at least 2");
  if (!(box.xmin < box.xmax && box.ymin < box.ymax)) throw ContractViolation("empty bounding box");
  Matrix pts(resolution * resolution, 2);
  for (Index r = 0; r < resolution; ++r) {
    const double y = box.ymin + (box.ymax - box.ymin) * static_cast<double>(r) / static_cast<double>(resolution - 1);
    for (Index c = 0; c < resolution; ++c) {
      const double x = box.xmin + (box.xmax - box.xmin) * static_cast<double>(c) / static_cast<double>(resolution - 1);
      pts(r * resolution + c, 0) = x;
      pts(r * resolution + c, 1) = y;
    }
  }
  const std::vector<ScoreMatrix> scores = chunked_scores(params, pts);
  std::vector<HeatmapPoint> out(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const ScoreMatrix& s = scores[i];
    HeatmapPoint& p = out[i];
    p.x = pts(static_cast<Index>(i), 0);
    p.y = pts(static_cast<Index>(i), 1);
    p.prob = s.probs(1);
    p.trace = fisher_trace(s.a);
    for (Index c = 0; c < s.probs.size(); ++c) {
      if (s.probs(c) > 0.0) p.entropy -= s.probs(c) * std::log(s.probs(c));
    }
    p.entropy = std::clamp(p.entropy, 0.0, std::log(static_cast<double>(s.probs.size())));
  }
  return out;
}

namespace {
std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
}  // namespace

void write_stability_csv(const StabilityStats& stats, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << "index,predicted_label,confidence,fisher_trace,top_eigenvalue\n";
  for (const auto& r : stats.rows) {
    out << r.index << ',' << r.predicted_label << ',' << num(r.confidence) << ',' << num(r.fisher_trace) << ','
        << num(r.top_eigenvalue) << '\n';
  }
}

void write_heatmap_csv(const std::vector<HeatmapPoint>& points, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << "x,y,prob,trace,entropy\n";
  for (const auto& p : points) {
    out << num(p.x) << ',' << num(p.y) << ',' << num(p.prob) << ',' << num(p.trace) << ',' << num(p.entropy) << '\n';
  }
}

std::string assignment_json(const AssignmentResult& result) {
  nlohmann::json confusion = nlohmann::json::array();
  for (Index r = 0; r < result.confusion.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Index c = 0; c < result.confusion.cols(); ++c) row.push_back(static_cast<long long>(result.confusion(r, c)));
    confusion.push_back(row);
  }
  nlohmann::json j{{"accuracy", result.accuracy}, {"permutation", result.permutation}, {"confusion", confusion}};
  return j.dump();
}

}  // namespace piecewise
