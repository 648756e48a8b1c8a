#include "piecewise/cli.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "piecewise/confidence.hpp"
#include "piecewise/eval.hpp"
#include "piecewise/parallel.hpp"
#include "piecewise/smoothness.hpp"
#include "piecewise/transmission.hpp"

#ifndef PIECEWISE_VERSION
#define PIECEWISE_VERSION "unknown"
#endif

namespace piecewise::cli {

namespace fs = std::filesystem;
using nlohmann::json;

std::string version() { return PIECEWISE_VERSION; }

// ---------------------------------------------------------------------------
// RunConfig

namespace {

class Schema {
 public:
  void fail(const std::string& msg) { errors_.push_back(msg); }

  void keys(const json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
    if (!obj.is_object()) {
      fail(where + ": expected an object");
      return;
    }
    for (const auto& [key, _] : obj.items()) {
      bool ok = false;
      for (const char* a : allowed) ok = ok || key == a;
      if (!ok) fail(where + ": unknown key '" + key + "'");
    }
  }

  template <typename T>
  void get(const json& obj, const char* key, const std::string& where, T& out) {
    if (!obj.is_object() || !obj.contains(key)) return;
    const json& v = obj.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw std::invalid_argument("expected a boolean");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw std::invalid_argument("expected an integer");
        if (std::is_unsigned_v<T> && v.get<long long>() < 0) throw std::invalid_argument("expected a non-negative integer");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw std::invalid_argument("expected a number");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw std::invalid_argument("expected a string");
      }
      out = v.get<T>();
    } catch (const std::exception& e) {
      fail(where + "." + key + ": " + e.what());
    }
  }

  void finish() const {
    if (errors_.empty()) return;
    std::string msg = "invalid configuration:";
    for (const auto& e : errors_) msg += "\n  " + e;
    throw ConfigError(msg);
  }

 private:
  std::vector<std::string> errors_;
};

template <typename Fn>
void guard(Schema& schema, const std::string& where, Fn&& fn) {
  try {
    fn();
  } catch (const ContractViolation& e) {
    schema.fail(where + ": " + e.what());
  } catch (const std::exception& e) {
    schema.fail(where + ": " + e.what());
  }
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("configuration is not valid JSON: ") + e.what());
  }
  Schema s;
  RunConfig cfg;
  s.keys(doc, "config", {"model", "train", "smoothness", "data", "output_dir"});
  if (!doc.is_object()) s.finish();

  if (!doc.contains("model")) s.fail("config: missing 'model'");
  const json model = doc.value("model", json::object());
  s.keys(model, "model", {"hidden_dims", "num_classes", "batchnorm"});
  s.get(model, "hidden_dims", "model", cfg.model.hidden_dims);
  s.get(model, "num_classes", "model", cfg.model.num_classes);
  if (!model.contains("hidden_dims")) s.fail("model: missing 'hidden_dims'");
  if (!model.contains("num_classes")) s.fail("model: missing 'num_classes'");
  if (model.contains("batchnorm")) {
    const json& bn = model.at("batchnorm");
    if (bn.is_boolean()) {
      cfg.model.batchnorm.assign(cfg.model.hidden_dims.size(), bn.get<bool>());
    } else {
      s.get(model, "batchnorm", "model", cfg.model.batchnorm);
    }
  }
  guard(s, "model", [&] {
    MlpSpec probe = cfg.model;
    probe.input_dim = 1;
    probe.validate();
  });

  const json train = doc.value("train", json::object());
  s.keys(train, "train",
         {"lambda", "rho", "batch_size", "epochs", "learning_rate", "adam_beta1", "adam_beta2", "adam_eps", "seed",
          "epsilon", "confidence_divergence", "smoothness_statistics", "checkpoint_every"});
  TrainConfig& t = cfg.train;
  s.get(train, "lambda", "train", t.lambda);
  s.get(train, "rho", "train", t.rho);
  s.get(train, "batch_size", "train", t.batch_size);
  s.get(train, "epochs", "train", t.epochs);
  s.get(train, "learning_rate", "train", t.learning_rate);
  s.get(train, "adam_beta1", "train", t.adam_beta1);
  s.get(train, "adam_beta2", "train", t.adam_beta2);
  s.get(train, "adam_eps", "train", t.adam_eps);
  s.get(train, "seed", "train", t.seed);
  s.get(train, "epsilon", "train", t.epsilon);
  s.get(train, "checkpoint_every", "train", cfg.checkpoint_every);
  std::string conf_div = std::string(to_string(t.confidence_divergence));
  s.get(train, "confidence_divergence", "train", conf_div);
  guard(s, "train.confidence_divergence", [&] { t.confidence_divergence = parse_divergence(conf_div); });
  std::string stats = "batch";
  s.get(train, "smoothness_statistics", "train", stats);
  if (stats == "batch") {
    t.smoothness_statistics = SmoothnessStatistics::Batch;
  } else if (stats == "running") {
    t.smoothness_statistics = SmoothnessStatistics::Running;
  } else {
    s.fail("train.smoothness_statistics: expected 'batch' or 'running'");
  }
  if (cfg.checkpoint_every < 0) s.fail("train.checkpoint_every: must be non-negative");

  const json smooth = doc.value("smoothness", json::object());
  s.keys(smooth, "smoothness", {"k", "m", "grid_points", "grid", "divergence"});
  SmoothnessConfig& sc = t.smoothness;
  s.get(smooth, "k", "smoothness", sc.k);
  s.get(smooth, "m", "smoothness", sc.m);
  if (smooth.contains("grid") && smooth.contains("grid_points")) {
    s.fail("smoothness: give either 'grid' or 'grid_points', not both");
  }
  if (smooth.contains("grid_points")) {
    int points = 10;
    s.get(smooth, "grid_points", "smoothness", points);
    guard(s, "smoothness.grid_points", [&] { sc.grid = evenly_spaced_grid(points); });
  }
  s.get(smooth, "grid", "smoothness", sc.grid);
  std::string sdiv = std::string(to_string(sc.divergence));
  s.get(smooth, "divergence", "smoothness", sdiv);
  guard(s, "smoothness.divergence", [&] { sc.divergence = parse_divergence(sdiv); });

  const json data = doc.value("data", json::object());
  s.keys(data, "data",
         {"source", "n_per_class", "r_inner", "r_outer", "noise_sigma", "seed", "images", "labels", "classes",
          "per_class", "path", "label_column", "standardize"});
  DataSelection& d = cfg.data;
  s.get(data, "source", "data", d.source);
  s.get(data, "n_per_class", "data", d.n_per_class);
  s.get(data, "r_inner", "data", d.r_inner);
  s.get(data, "r_outer", "data", d.r_outer);
  s.get(data, "noise_sigma", "data", d.noise_sigma);
  s.get(data, "seed", "data", d.data_seed);
  s.get(data, "images", "data", d.images);
  s.get(data, "labels", "data", d.labels);
  s.get(data, "classes", "data", d.classes);
  s.get(data, "per_class", "data", d.per_class);
  s.get(data, "path", "data", d.path);
  s.get(data, "label_column", "data", d.label_column);
  s.get(data, "standardize", "data", d.standardize);
  if (d.source == "idx") {
    if (d.images.empty() || d.labels.empty()) s.fail("data: idx source needs 'images' and 'labels'");
  } else if (d.source == "csv") {
    if (d.path.empty()) s.fail("data: csv source needs 'path'");
  } else if (d.source != "two_circles") {
    s.fail("data.source: expected 'two_circles', 'idx' or 'csv'");
  }

  s.get(doc, "output_dir", "config", cfg.output_dir);
  if (cfg.output_dir.empty()) s.fail("config.output_dir: must be non-empty");

  if (t.batch_size < cfg.model.num_classes) {
    s.fail("train.batch_size: " + std::to_string(t.batch_size) + " is smaller than the number of classes " +
           std::to_string(cfg.model.num_classes));
  }
  guard(s, "train", [&] {
    TrainConfig probe = t;
    probe.batch_size = std::max<Index>(probe.batch_size, 1);
    probe.validate(std::min<Index>(cfg.model.num_classes, probe.batch_size), probe.batch_size);
  });
  s.finish();
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open configuration " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string run_config_json(const RunConfig& cfg) {
  const TrainConfig& t = cfg.train;
  json model{{"hidden_dims", cfg.model.hidden_dims}, {"num_classes", cfg.model.num_classes}};
  std::vector<bool> bn;
  for (std::size_t i = 0; i < cfg.model.hidden_dims.size(); ++i) bn.push_back(cfg.model.has_batchnorm(i));
  model["batchnorm"] = bn;
  json train{{"lambda", t.lambda},
             {"rho", t.rho},
             {"batch_size", t.batch_size},
             {"epochs", t.epochs},
             {"learning_rate", t.learning_rate},
             {"adam_beta1", t.adam_beta1},
             {"adam_beta2", t.adam_beta2},
             {"adam_eps", t.adam_eps},
             {"seed", t.seed},
             {"epsilon", t.epsilon},
             {"confidence_divergence", std::string(to_string(t.confidence_divergence))},
             {"smoothness_statistics", t.smoothness_statistics == SmoothnessStatistics::Batch ? "batch" : "running"},
             {"checkpoint_every", cfg.checkpoint_every}};
  json smooth{{"k", t.smoothness.k},
              {"m", t.smoothness.m},
              {"grid", t.smoothness.grid},
              {"divergence", std::string(to_string(t.smoothness.divergence))}};
  const DataSelection& d = cfg.data;
  json data{{"source", d.source}, {"standardize", d.standardize}};
  if (d.source == "two_circles") {
    data.update({{"n_per_class", d.n_per_class},
                 {"r_inner", d.r_inner},
                 {"r_outer", d.r_outer},
                 {"noise_sigma", d.noise_sigma},
                 {"seed", d.data_seed}});
  } else if (d.source == "idx") {
    data.update({{"images", d.images}, {"labels", d.labels}, {"classes", d.classes}, {"per_class", d.per_class},
                 {"seed", d.data_seed}});
  } else {
    data.update({{"path", d.path}, {"label_column", d.label_column}});
  }
  return json{{"model", model}, {"train", train}, {"smoothness", smooth}, {"data", data}, {"output_dir", cfg.output_dir}}
      .dump(2);
}

LoadedData load_data(const DataSelection& sel) {
  LoadedData out;
  if (sel.source == "two_circles") {
    out.data = gen_two_circles(sel.n_per_class, sel.r_inner, sel.r_outer, sel.noise_sigma, sel.data_seed);
  } else if (sel.source == "idx") {
    out.data = load_idx(sel.images, sel.labels);
    if (!sel.classes.empty()) {
      Index per_class = sel.per_class;
      if (per_class <= 0) throw ConfigError("data.per_class must be positive when classes are selected");
      out.data = subset(out.data, sel.classes, per_class, sel.data_seed);
    }
  } else if (sel.source == "csv") {
    out.data = load_csv(sel.path, sel.label_column);
  } else {
    throw ConfigError("unknown data source '" + sel.source + "'");
  }
  if (sel.standardize) {
    auto res = standardize(out.data);
    out.data = std::move(res.data);
    out.transform = res.transform;
  }
  out.data.validate();
  return out;
}

// ---------------------------------------------------------------------------
// helpers

namespace {

struct Checkpoint {
  ModelParams params;
  std::optional<Standardizer> transform;
};

std::string checkpoint_document(const ModelParams& params, const std::optional<Standardizer>& transform) {
  json doc = json::parse(checkpoint_to_json(params));
  if (transform) doc["input_transform"] = {{"mean", transform->mean}, {"stddev", transform->stddev}};
  return doc.dump();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text << '\n';
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ContractViolation("cannot open checkpoint " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  Checkpoint c{checkpoint_from_json(ss.str()), std::nullopt};
  const json doc = json::parse(ss.str());
  if (doc.contains("input_transform")) {
    try {
      Standardizer st;
      st.mean = doc["input_transform"].at("mean").get<double>();
      st.stddev = doc["input_transform"].at("stddev").get<double>();
      if (!(st.stddev > 0.0)) throw ContractViolation("input_transform.stddev must be positive");
      c.transform = st;
    } catch (const json::exception& e) {
      throw ContractViolation(std::string("malformed input_transform: ") + e.what());
    }
  }
  return c;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

Dataset read_dataset(const std::string& data, const std::string& labels, const std::string& label_column,
                     const Checkpoint& ckpt) {
  Dataset ds;
  if (!labels.empty()) {
    ds = load_idx(data, labels);
  } else if (ends_with(data, ".csv")) {
    ds = load_csv(data, label_column);
  } else {
    throw ContractViolation("cannot tell the format of " + data + ": use a .csv file or pass --labels for IDX");
  }
  if (ckpt.transform) ds = ckpt.transform->apply(ds);
  ds.validate();
  if (ds.dim() != ckpt.params.spec.input_dim) {
    throw ContractViolation("dataset has " + std::to_string(ds.dim()) + " features, model expects " +
                            std::to_string(ckpt.params.spec.input_dim));
  }
  return ds;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_matrix_csv(const Matrix& m, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  for (Index r = 0; r < m.rows(); ++r) {
    for (Index c = 0; c < m.cols(); ++c) out << (c ? "," : "") << num(m(r, c));
    out << '\n';
  }
}

std::vector<double> parse_list(const std::string& text, const char* what) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(cell, &used));
      if (used != cell.size()) throw std::invalid_argument(cell);
    } catch (const std::exception&) {
      throw ContractViolation(std::string("cannot parse ") + what + " entry '" + cell + "'");
    }
  }
  return out;
}

struct Globals {
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
};

// ---------------------------------------------------------------------------
// commands

int cmd_train(const std::string& config_path, const std::string& out_override, int checkpoint_every,
              const Globals& g, std::ostream& out, std::ostream& err) {
  RunConfig cfg = load_run_config(config_path);
  if (g.seed) cfg.train.seed = *g.seed;
  if (!out_override.empty()) cfg.output_dir = out_override;
  if (checkpoint_every >= 0) cfg.checkpoint_every = checkpoint_every;

  LoadedData loaded = load_data(cfg.data);
  MlpSpec spec = cfg.model;
  spec.input_dim = loaded.data.dim();
  spec.validate();
  cfg.train.validate(spec.num_classes, loaded.data.size());

  const fs::path dir(cfg.output_dir);
  fs::create_directories(dir);
  if (cfg.checkpoint_every > 0) fs::create_directories(dir / "checkpoints");

  Dataset unlabeled = loaded.data;
  unlabeled.labels.reset();
  const auto start = std::chrono::steady_clock::now();
  TrainResult result;
  try {
    result = train(spec, unlabeled, cfg.train, [&](const EpochRecord& e, const ModelParams& p) {
      if (cfg.checkpoint_every > 0 && e.epoch % cfg.checkpoint_every == 0) {
        write_text(dir / "checkpoints" / ("epoch_" + std::to_string(e.epoch) + ".json"),
                   checkpoint_document(p, loaded.transform));
      }
      return true;
    });
  } catch (const TrainingAborted& e) {
    err << "training aborted: " << e.what() << "\n  at " << e.snapshot() << '\n';
    return kExitRuntime;
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  write_text(dir / "checkpoint.json", checkpoint_document(result.params, loaded.transform));
  write_history_csv(result.history, (dir / "history.csv").string());
  write_epochs_csv(result.history, (dir / "epochs.csv").string(), !g.deterministic);

  json manifest{{"command", "train"},
                {"version", version()},
                {"seed", cfg.train.seed},
                {"deterministic", g.deterministic},
                {"config", json::parse(run_config_json(cfg))},
                {"dataset", {{"name", loaded.data.name}, {"size", loaded.data.size()}, {"dim", loaded.data.dim()}}},
                {"steps", result.history.steps.size()},
                {"epochs", result.history.epochs.size()}};
  if (loaded.transform) manifest["input_transform"] = {{"mean", loaded.transform->mean}, {"stddev", loaded.transform->stddev}};
  if (!g.deterministic) {
    manifest["wall_seconds"] = seconds;
    manifest["threads"] = worker_count();
  }
  write_text(dir / "manifest.json", manifest.dump(2));

  const auto& last = result.history.epochs.back();
  out << json{{"status", "ok"},
              {"output_dir", dir.string()},
              {"epochs", result.history.epochs.size()},
              {"final_confidence", last.mean_confidence},
              {"final_smoothness", last.mean_smoothness},
              {"final_total", last.mean_total}}
             .dump()
      << '\n';
  return kExitOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& data, const std::string& labels,
             const std::string& label_column, bool stability, const std::string& stability_out, std::ostream& out,
             std::ostream& err) {
  const Checkpoint ckpt = read_checkpoint(checkpoint);
  const Dataset ds = read_dataset(data, labels, label_column, ckpt);
  if (!ds.labels) {
    err << "error: labels required for evaluation (dataset " << data << " has none)\n";
    return kExitUsage;
  }
  const auto pred = predict_labels(ckpt.params, ds.x);
  const AssignmentResult res = clustering_accuracy(pred, *ds.labels, ckpt.params.spec.num_classes);
  json summary = json::parse(assignment_json(res));
  summary["n"] = ds.size();
  if (stability) {
    const StabilityStats stats = stability_stats(ckpt.params, ds);
    write_stability_csv(stats, stability_out);
    summary["stability_csv"] = stability_out;
  }
  out << summary.dump() << '\n';
  return kExitOk;
}

int cmd_heatmap(const std::string& checkpoint, const std::string& bbox, Index resolution, const std::string& path,
                std::ostream& out) {
  const Checkpoint ckpt = read_checkpoint(checkpoint);
  const auto b = parse_list(bbox, "bbox");
  if (b.size() != 4) throw ContractViolation("bbox needs four values: xmin,xmax,ymin,ymax");
  const BoundingBox box{b[0], b[1], b[2], b[3]};
  if (ckpt.params.spec.input_dim != 2) throw ContractViolation("heatmap needs a model with 2 inputs");
  // Grid coordinates are given in the raw input space.
  std::vector<HeatmapPoint> pts;
  if (ckpt.transform) {
    const auto& t = *ckpt.transform;
    const BoundingBox scaled{(box.xmin - t.mean) / t.stddev, (box.xmax - t.mean) / t.stddev,
                             (box.ymin - t.mean) / t.stddev, (box.ymax - t.mean) / t.stddev};
    pts = heatmap_grid(ckpt.params, scaled, resolution);
    for (auto& p : pts) {
      p.x = p.x * t.stddev + t.mean;
      p.y = p.y * t.stddev + t.mean;
      p.trace /= t.stddev * t.stddev;
    }
  } else {
    pts = heatmap_grid(ckpt.params, box, resolution);
  }
  write_heatmap_csv(pts, path);
  out << json{{"points", pts.size()}, {"out", path}}.dump() << '\n';
  return kExitOk;
}

int cmd_batch_size(Index classes, std::optional<double> prior_min, std::int64_t batches, double epsilon,
                   std::optional<Index> dataset_size, std::optional<double> sweeps, std::ostream& out) {
  if (classes < 2) throw ContractViolation("--classes must be at least 2");
  const double pmin = prior_min.value_or(1.0 / static_cast<double>(classes));
  json res{{"batch_size", batch_size_bound(pmin, batches, classes, epsilon)},
           {"prior_min", pmin},
           {"batches", batches},
           {"classes", classes},
           {"epsilon", epsilon}};
  if (dataset_size || sweeps) {
    if (!dataset_size || !sweeps) throw ContractViolation("--dataset-size and --sweeps go together");
    const auto sc = self_consistent_batch_size(classes, *dataset_size, *sweeps, epsilon);
    res["self_consistent"] = {{"fixed_point", sc.fixed_point},
                              {"batch_size", sc.batch_size},
                              {"iterations", sc.iterations},
                              {"dataset_size", *dataset_size},
                              {"sweeps", *sweeps}};
  }
  out << res.dump() << '\n';
  return kExitOk;
}

int cmd_probe_margin(const std::string& checkpoint, const std::string& data, const std::string& labels,
                     const std::string& label_column, double tau, const std::string& grid, const std::string& div,
                     int directions, const Globals& g, std::ostream& out) {
  const Checkpoint ckpt = read_checkpoint(checkpoint);
  const Dataset ds = read_dataset(data, labels, label_column, ckpt);
  const auto rho = parse_list(grid, "rho-grid");
  const DivergenceKind kind = parse_divergence(div);
  const std::uint64_t seed = g.seed.value_or(0);
  const double margin = margin_probe(ckpt.params, ds.x, tau, rho, kind, seed, directions);
  out << json{{"margin", margin}, {"tau", tau}, {"rho_grid", rho}, {"divergence", std::string(to_string(kind))},
              {"directions", directions}, {"seed", seed}}
             .dump()
      << '\n';
  return kExitOk;
}

int cmd_transmission(const std::string& checkpoint, const std::string& data, const std::string& labels,
                     const std::string& label_column, const std::string& out_dir, std::ostream& out) {
  const Checkpoint ckpt = read_checkpoint(checkpoint);
  const Dataset ds = read_dataset(data, labels, label_column, ckpt);
  const Matrix q = predict(ckpt.params, ds.x);
  const Matrix t = label_transition(q);
  const Matrix s = instance_transition(q);
  const fs::path dir(out_dir);
  fs::create_directories(dir);
  write_matrix_csv(t, dir / "T.csv");
  write_matrix_csv(s, dir / "S.csv");
  out << json{{"label_transition", (dir / "T.csv").string()},
              {"instance_transition", (dir / "S.csv").string()},
              {"diagonal", is_diagonal(t, 1e-6)},
              {"recurrent_classes", recurrent_class_count(s)}}
             .dump()
      << '\n';
  return kExitOk;
}

int cmd_gen_two_circles(Index n_per_class, double r_inner, double r_outer, double sigma, const Globals& g,
                        const std::string& path, std::ostream& out) {
  const Dataset ds = gen_two_circles(n_per_class, r_inner, r_outer, sigma, g.seed.value_or(0));
  write_csv(ds, path);
  out << json{{"rows", ds.size()}, {"out", path}}.dump() << '\n';
  return kExitOk;
}

}  // namespace

// ---------------------------------------------------------------------------

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Piecewise-constant unsupervised discriminative learning", "piecewise"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", version());

  Globals g;
  std::uint64_t seed_value = 0;
  auto* seed_opt = app.add_option("--seed", seed_value, "Random seed (overrides the config)");
  app.add_flag("--deterministic", g.deterministic, "Omit wall-clock fields so reruns produce identical files");

  std::string config, out_path, checkpoint, data, labels, label_column = "label", bbox = "-3,3,-3,3";
  std::string rho_grid, divergence = "hel2";
  int checkpoint_every = -1;
  int directions = 1000;
  Index resolution = 100;
  bool stability = false;
  double tau = 1e-3;

  auto* train = app.add_subcommand("train", "Train a model from a JSON run configuration");
  train->add_option("--config", config, "Run configuration")->required();
  train->add_option("--out", out_path, "Output directory (overrides the config)");
  train->add_option("--checkpoint-every", checkpoint_every, "Write a checkpoint every N epochs");

  auto add_data = [&](CLI::App* sub) {
    sub->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
    sub->add_option("--data", data, "Dataset: CSV file, or IDX images with --labels")->required();
    sub->add_option("--labels", labels, "IDX label file");
    sub->add_option("--label-column", label_column, "CSV label column");
  };

  auto* eval = app.add_subcommand("eval", "Clustering accuracy of a checkpoint on labeled data");
  add_data(eval);
  eval->add_flag("--stability", stability, "Write per-instance stability statistics");
  std::string stability_out = "stability.csv";
  eval->add_option("--out", stability_out, "Stability CSV path");

  auto* heat = app.add_subcommand("heatmap", "Probability, Fisher trace and entropy over a 2-D grid");
  heat->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  heat->add_option("--bbox", bbox, "xmin,xmax,ymin,ymax");
  heat->add_option("--resolution", resolution, "Grid points per axis");
  std::string heat_out = "heatmap.csv";
  heat->add_option("--out", heat_out, "Output CSV");

  auto* bsz = app.add_subcommand("batch-size", "Batch size making every batch label complete w.h.p.");
  Index classes = 0;
  double prior_min = 0.0, epsilon = 1e-4, sweeps = 0.0;
  std::int64_t batches = 1;
  Index dataset_size = 0;
  bsz->add_option("--classes", classes, "Number of classes")->required();
  auto* prior_opt = bsz->add_option("--prior-min", prior_min, "Smallest class prior (default 1/classes)");
  bsz->add_option("--batches", batches, "Number of batches T that must all be label complete");
  bsz->add_option("--epsilon", epsilon, "Tolerated failure probability");
  auto* size_opt = bsz->add_option("--dataset-size", dataset_size, "|U| for the self-consistent solution");
  auto* sweeps_opt = bsz->add_option("--sweeps", sweeps, "Epochs for the self-consistent solution");

  auto* probe = app.add_subcommand("probe-margin", "Empirical attack-free margin of a checkpoint");
  add_data(probe);
  probe->add_option("--tau", tau, "Divergence threshold");
  probe->add_option("--rho-grid", rho_grid, "Increasing radii, comma separated")->required();
  probe->add_option("--divergence", divergence, "kl or hel2");
  probe->add_option("--directions", directions, "Random directions per instance and radius");

  auto* dump = app.add_subcommand("transmission-dump", "Write T and S of a checkpoint on a dataset as CSV");
  add_data(dump);
  std::string dump_out = "transmission";
  dump->add_option("--out", dump_out, "Output directory");

  auto* gen = app.add_subcommand("gen-two-circles", "Write a two-circles dataset as CSV");
  Index n_per_class = 300;
  double r_inner = 1.0, r_outer = 2.0, sigma = 0.1;
  std::string gen_out = "two_circles.csv";
  gen->add_option("--n-per-class", n_per_class, "Points per ring");
  gen->add_option("--r-inner", r_inner, "Inner radius");
  gen->add_option("--r-outer", r_outer, "Outer radius");
  gen->add_option("--noise-sigma", sigma, "Gaussian noise standard deviation");
  gen->add_option("--out", gen_out, "Output CSV");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << version() << '\n';
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n' << "run with --help for usage\n";
    return kExitUsage;
  }
  if (seed_opt->count() > 0) g.seed = seed_value;

  try {
    if (*train) return cmd_train(config, out_path, checkpoint_every, g, out, err);
    if (*eval) return cmd_eval(checkpoint, data, labels, label_column, stability, stability_out, out, err);
    if (*heat) return cmd_heatmap(checkpoint, bbox, resolution, heat_out, out);
    if (*bsz) {
      return cmd_batch_size(classes, prior_opt->count() ? std::optional<double>(prior_min) : std::nullopt, batches,
                            epsilon, size_opt->count() ? std::optional<Index>(dataset_size) : std::nullopt,
                            sweeps_opt->count() ? std::optional<double>(sweeps) : std::nullopt, out);
    }
    if (*probe) return cmd_probe_margin(checkpoint, data, labels, label_column, tau, rho_grid, divergence, directions, g, out);
    if (*dump) return cmd_transmission(checkpoint, data, labels, label_column, dump_out, out);
    if (*gen) return cmd_gen_two_circles(n_per_class, r_inner, r_outer, sigma, g, gen_out, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ContractViolation& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const TrainingAborted& e) {
    err << "training aborted: " << e.what() << "\n  at " << e.snapshot() << '\n';
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "runtime error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace piecewise::cli
