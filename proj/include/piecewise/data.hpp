#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "piecewise/autodiff.hpp"

namespace piecewise {

/// Instances as rows of `x`. Labels, when present, are for evaluation only.
struct Dataset {
  Matrix x;
  std::optional<std::vector<int>> labels;
  std::string name;

  Index size() const noexcept { return x.rows(); }
  Index dim() const noexcept { return x.cols(); }
  /// 1 + largest label; 0 without labels.
  Index num_classes() const;
  void validate() const;
};

/// Two concentric circles, labels 0 (inner) and 1 (outer), uniform angles and
/// Gaussian radial noise. Rows are inner points first, then outer points.
Dataset gen_two_circles(Index n_per_class, double r_inner = 1.0, double r_outer = 2.0, double noise_sigma = 0.1,
                        std::uint64_t seed = 0);

/// IDX image/label pair (big-endian, magic 0x00000803 / 0x00000801, unsigned
/// bytes). Pixels become reals in [0, 255].
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

/// Writes an IDX pair; pixel values are rounded and clamped to [0, 255].
void write_idx(const Dataset& ds, Index rows, Index cols, const std::string& images_path,
               const std::string& labels_path);

/// Global scalar standardization x ↦ (x − μ)/σ with μ, σ pooled over every value.
struct Standardizer {
  double mean = 0.0;
  double stddev = 1.0;

  static Standardizer fit(const Dataset& ds);
  Dataset apply(const Dataset& ds) const;
};

struct StandardizeResult {
  Dataset data;
  Standardizer transform;
};
StandardizeResult standardize(const Dataset& ds);

/// Balanced random subsample of `per_class` instances of each listed class;
/// labels are remapped to their position in `classes`.
Dataset subset(const Dataset& ds, const std::vector<int>& classes, Index per_class, std::uint64_t seed);

/// CSV with a header row. All columns are features except `label_column`
/// (when non-empty), which must hold integer labels.
Dataset load_csv(const std::string& path, const std::string& label_column = "label");
void write_csv(const Dataset& ds, const std::string& path);

}  // namespace piecewise
