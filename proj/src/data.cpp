#include "piecewise/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

namespace piecewise {

Index Dataset::num_classes() const {
  if (!labels || labels->empty()) return 0;
  return *std::max_element(labels->begin(), labels->end()) + 1;
}

void Dataset::validate() const {
  require_finite(x, name.empty() ? "dataset" : name);
  if (labels) {
    if (static_cast<Index>(labels->size()) != x.rows()) throw ContractViolation("label count does not match rows");
    for (int y : *labels) {
      if (y < 0) throw ContractViolation("labels must be non-negative");
    }
  }
}

Dataset gen_two_circles(Index n_per_class, double r_inner, double r_outer, double noise_sigma, std::uint64_t seed) {
  if (n_per_class < 1) throw ContractViolation("n_per_class must be positive");
  if (!(r_inner > 0.0 && r_inner < r_outer)) throw ContractViolation("radii must satisfy 0 < r_inner < r_outer");
  if (!(noise_sigma >= 0.0)) throw ContractViolation("noise_sigma must be non-negative");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  std::normal_distribution<double> normal(0.0, 1.0);

  Dataset ds;
  ds.name = "two_circles";
  ds.x.resize(2 * n_per_class, 2);
  ds.labels.emplace(static_cast<std::size_t>(2 * n_per_class));
  for (Index i = 0; i < 2 * n_per_class; ++i) {
    const int label = i < n_per_class ? 0 : 1;
    const double r = label == 0 ? r_inner : r_outer;
    const double t = angle(rng);
    const double nx = normal(rng);
    const double ny = normal(rng);
    ds.x(i, 0) = r * std::cos(t) + noise_sigma * nx;
    ds.x(i, 1) = r * std::sin(t) + noise_sigma * ny;
    (*ds.labels)[i] = label;
  }
  return ds;
}

// ---------------------------------------------------------------------------
// IDX

namespace {

std::vector<unsigned char> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(path, 0, "cannot open file");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t offset, const std::string& path) {
  if (offset + 4 > b.size()) throw ParseError(path, offset, "truncated header");
  return (std::uint32_t{b[offset]} << 24) | (std::uint32_t{b[offset + 1]} << 16) |
         (std::uint32_t{b[offset + 2]} << 8) | std::uint32_t{b[offset + 3]};
}

void put_be32(std::ostream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                         static_cast<char>(v)};
  out.write(bytes, 4);
}

std::string hex(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "0x%08X", v);
  return buf;
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  const auto img = read_bytes(images_path);
  const std::uint32_t img_magic = be32(img, 0, images_path);
  if (img_magic != 0x00000803u) {
    throw ParseError(images_path, 0, "bad image magic " + hex(img_magic) + ", expected 0x00000803");
  }
  const std::uint32_t n = be32(img, 4, images_path);
  const std::uint32_t rows = be32(img, 8, images_path);
  const std::uint32_t cols = be32(img, 12, images_path);
  const std::size_t pixels = static_cast<std::size_t>(rows) * cols;
  const std::size_t need = 16 + static_cast<std::size_t>(n) * pixels;
  if (img.size() < need) {
    throw ParseError(images_path, img.size(), "truncated image data: expected " + std::to_string(need) + " bytes");
  }

  const auto lab = read_bytes(labels_path);
  const std::uint32_t lab_magic = be32(lab, 0, labels_path);
  if (lab_magic != 0x00000801u) {
    throw ParseError(labels_path, 0, "bad label magic " + hex(lab_magic) + ", expected 0x00000801");
  }
  const std::uint32_t m = be32(lab, 4, labels_path);
  if (m != n) {
    throw ParseError(labels_path, 4, "label count " + std::to_string(m) + " does not match image count " +
                                         std::to_string(n));
  }
  if (lab.size() < 8 + static_cast<std::size_t>(m)) {
    throw ParseError(labels_path, lab.size(), "truncated label data");
  }

  Dataset ds;
  ds.name = images_path;
  ds.x.resize(n, static_cast<Index>(pixels));
  for (std::size_t i = 0; i < static_cast<std::size_t>(n) * pixels; ++i) ds.x.data()[i] = img[16 + i];
  ds.labels.emplace(n);
  for (std::uint32_t i = 0; i < n; ++i) (*ds.labels)[i] = lab[8 + i];
  return ds;
}

void write_idx(const Dataset& ds, Index rows, Index cols, const std::string& images_path,
               const std::string& labels_path) {
  if (rows * cols != ds.dim()) throw ContractViolation("image shape does not match dataset width");
  if (!ds.labels) throw ContractViolation("IDX output needs labels");
  std::ofstream img(images_path, std::ios::binary);
  std::ofstream lab(labels_path, std::ios::binary);
  if (!img || !lab) throw Error("cannot write IDX files");
  put_be32(img, 0x00000803u);
  put_be32(img, static_cast<std::uint32_t>(ds.size()));
  put_be32(img, static_cast<std::uint32_t>(rows));
  put_be32(img, static_cast<std::uint32_t>(cols));
  for (Index i = 0; i < ds.x.size(); ++i) {
    img.put(static_cast<char>(static_cast<unsigned char>(std::clamp(std::round(ds.x.data()[i]), 0.0, 255.0))));
  }
  put_be32(lab, 0x00000801u);
  put_be32(lab, static_cast<std::uint32_t>(ds.size()));
  for (int y : *ds.labels) lab.put(static_cast<char>(static_cast<unsigned char>(y)));
}

// ---------------------------------------------------------------------------

Standardizer Standardizer::fit(const Dataset& ds) {
  if (ds.x.size() == 0) throw ContractViolation("cannot standardize an empty dataset");
  Standardizer s;
  s.mean = ds.x.mean();
  const double var = (ds.x.array() - s.mean).square().mean();
  if (!(var > 0.0)) throw ContractViolation("cannot standardize: pooled variance is zero");
  s.stddev = std::sqrt(var);
  return s;
}

Dataset Standardizer::apply(const Dataset& ds) const {
  Dataset out = ds;
  out.x = ((ds.x.array() - mean) / stddev).matrix();
  return out;
}

StandardizeResult standardize(const Dataset& ds) {
  const Standardizer s = Standardizer::fit(ds);
  return {s.apply(ds), s};
}

Dataset subset(const Dataset& ds, const std::vector<int>& classes, Index per_class, std::uint64_t seed) {
  if (!ds.labels) throw ContractViolation("subset needs labels");
  if (classes.empty() || per_class < 1) throw ContractViolation("subset needs classes and a positive per_class");
  std::mt19937_64 rng(seed);
  std::vector<Index> picked;
  std::vector<int> remapped;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    std::vector<Index> pool;
    for (Index i = 0; i < ds.size(); ++i) {
      if ((*ds.labels)[i] == classes[c]) pool.push_back(i);
    }
    if (static_cast<Index>(pool.size()) < per_class) {
      throw ContractViolation("class " + std::to_string(classes[c]) + " has " + std::to_string(pool.size()) +
                              " instances, " + std::to_string(per_class) + " requested");
    }
    std::shuffle(pool.begin(), pool.end(), rng);
    pool.resize(static_cast<std::size_t>(per_class));
    std::sort(pool.begin(), pool.end());
    for (Index i : pool) {
      picked.push_back(i);
      remapped.push_back(static_cast<int>(c));
    }
  }
  Dataset out;
  out.name = ds.name + "[subset]";
  out.x.resize(static_cast<Index>(picked.size()), ds.dim());
  for (std::size_t r = 0; r < picked.size(); ++r) out.x.row(static_cast<Index>(r)) = ds.x.row(picked[r]);
  out.labels = std::move(remapped);
  return out;
}

// ---------------------------------------------------------------------------
// CSV

namespace {
std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
    out.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}
}  // namespace

Dataset load_csv(const std::string& path, const std::string& label_column) {
  std::ifstream in(path);
  if (!in) throw ParseError(path, 0, "cannot open file");
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path, 0, "missing header row");
  const auto header = split_csv_line(line);
  int label_idx = -1;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (!label_column.empty() && header[i] == label_column) label_idx = static_cast<int>(i);
  }
  std::vector<double> values;
  std::vector<int> labels;
  std::size_t offset = line.size() + 1;
  Index rows = 0;
  const Index width = static_cast<Index>(header.size()) - (label_idx >= 0 ? 1 : 0);
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") {
      offset += line.size() + 1;
      continue;
    }
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size()) throw ParseError(path, offset, "row has " + std::to_string(cells.size()) + " cells, header has " + std::to_string(header.size()));
    for (std::size_t i = 0; i < cells.size(); ++i) {
      char* end = nullptr;
      const double v = std::strtod(cells[i].c_str(), &end);
      if (cells[i].empty() || end != cells[i].c_str() + cells[i].size() || !std::isfinite(v)) {
        throw ParseError(path, offset, "not a finite number: '" + cells[i] + "'");
      }
      if (static_cast<int>(i) == label_idx) {
        if (v != std::floor(v) || v < 0) throw ParseError(path, offset, "label must be a non-negative integer");
        labels.push_back(static_cast<int>(v));
      } else {
        values.push_back(v);
      }
    }
    ++rows;
    offset += line.size() + 1;
  }
  Dataset ds;
  ds.name = path;
  ds.x.resize(rows, width);
  std::copy(values.begin(), values.end(), ds.x.data());
  if (label_idx >= 0) ds.labels = std::move(labels);
  return ds;
}

void write_csv(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  for (Index c = 0; c < ds.dim(); ++c) out << (c ? "," : "") << "x" << c;
  if (ds.labels) out << ",label";
  out << '\n';
  char buf[32];
  for (Index r = 0; r < ds.size(); ++r) {
    for (Index c = 0; c < ds.dim(); ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", ds.x(r, c));
      out << (c ? "," : "") << buf;
    }
    if (ds.labels) out << ',' << (*ds.labels)[r];
    out << '\n';
  }
}

}  // namespace piecewise
