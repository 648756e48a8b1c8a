#pragma once

#include <string>
#include <vector>

#include "piecewise/data.hpp"
#include "piecewise/model.hpp"

namespace piecewise {

struct AssignmentResult {
  std::vector<int> permutation;  // predicted cluster l ↦ true label π(l)
  double accuracy = 0.0;
  Matrix confusion;              // counts, rows = predicted, cols = true
};

/// Unsupervised clustering accuracy: max over label permutations π of the
/// fraction of i with truth[i] = π(pred[i]), solved as an assignment problem.
/// `num_classes` = 0 infers it from the labels.
AssignmentResult clustering_accuracy(const std::vector<int>& pred, const std::vector<int>& truth,
                                     Index num_classes = 0);

/// Minimum-cost perfect assignment on a square cost matrix (Hungarian
/// method, O(n³)). Returns the column assigned to each row.
std::vector<int> solve_assignment(const Matrix& cost);

/// Most probable label per row, lowest index on ties.
std::vector<int> predict_labels(const ModelParams& params, const Matrix& x);

struct StabilityRow {
  Index index = 0;
  int predicted_label = 0;
  double confidence = 0.0;
  double fisher_trace = 0.0;
  double top_eigenvalue = 0.0;
};

struct ClassSummary {
  int label = 0;
  Index count = 0;
  double mean_confidence = 0.0;
  double mean_trace = 0.0;
  double trace_min = 0.0, trace_q1 = 0.0, trace_median = 0.0, trace_q3 = 0.0, trace_max = 0.0;
};

struct StabilityStats {
  std::vector<StabilityRow> rows;
  std::vector<ClassSummary> classes;  // one per predicted label that occurs
};

StabilityStats stability_stats(const ModelParams& params, const Dataset& ds);

struct HeatmapPoint {
  double x = 0.0, y = 0.0;
  double prob = 0.0;     // Q(1|x)
  double trace = 0.0;    // Fisher criterion
  double entropy = 0.0;  // nats
};

struct BoundingBox {
  double xmin = -1.0, xmax = 1.0, ymin = -1.0, ymax = 1.0;
};

/// resolution × resolution grid over the box, row by row. Requires a model
/// on 2-D inputs.
std::vector<HeatmapPoint> heatmap_grid(const ModelParams& params, const BoundingBox& box, Index resolution);

void write_stability_csv(const StabilityStats& stats, const std::string& path);
void write_heatmap_csv(const std::vector<HeatmapPoint>& points, const std::string& path);
/// {"accuracy":…, "permutation":[…], "confusion":[[…]]}
std::string assignment_json(const AssignmentResult& result);

}  // namespace piecewise
