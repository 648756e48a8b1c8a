#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "piecewise/cli.hpp"

using namespace piecewise;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("piecewise_test_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json tiny_config(const fs::path& out_dir) {
  return json{{"model", {{"hidden_dims", {8, 4}}, {"num_classes", 2}}},
              {"train", {{"lambda", 10.0}, {"rho", 0.04}, {"batch_size", 8}, {"epochs", 2}, {"seed", 3}}},
              {"smoothness", {{"k", 4}, {"m", 1}, {"grid_points", 10}}},
              {"data", {{"source", "two_circles"}, {"n_per_class", 20}}},
              {"output_dir", out_dir.string()}};
}

fs::path write_config(const fs::path& dir, const json& cfg, const std::string& name = "config.json") {
  std::ofstream(dir / name) << cfg.dump(2);
  return dir / name;
}

}  // namespace

TEST_CASE("batch-size prints the bound") {
  const Outcome r = run_cli({"batch-size", "--classes", "2", "--prior-min", "0.5", "--batches", "1", "--epsilon", "0.01"});
  CHECK(r.code == 0);
  CHECK(json::parse(r.out).at("batch_size") == 11);

  const Outcome sc = run_cli({"batch-size", "--classes", "10", "--dataset-size", "60000", "--sweeps", "1000",
                              "--epsilon", "1e-4"});
  CHECK(sc.code == 0);
  CHECK(json::parse(sc.out).at("self_consistent").at("batch_size") == 240);
}

TEST_CASE("usage errors exit with 2") {
  CHECK(run_cli({}).code == 2);
  CHECK(run_cli({"no-such-command"}).code == 2);
  CHECK(run_cli({"train"}).code == 2);
  CHECK(run_cli({"batch-size", "--classes", "2", "--prior-min", "0"}).code == 2);
  CHECK(run_cli({"--version"}).code == 0);
}

TEST_CASE("train writes artifacts; reruns are bit identical") {
  const fs::path dir = fresh_dir("train");
  const fs::path cfg = write_config(dir, tiny_config(dir / "run"));
  const Outcome a = run_cli({"--deterministic", "train", "--config", cfg.string(), "--checkpoint-every", "1"});
  REQUIRE_MESSAGE(a.code == 0, a.err);
  for (const char* f : {"checkpoint.json", "history.csv", "epochs.csv", "manifest.json", "checkpoints/epoch_1.json"}) {
    CHECK_MESSAGE(fs::exists(dir / "run" / f), f);
  }
  const json manifest = json::parse(slurp(dir / "run" / "manifest.json"));
  CHECK(manifest.at("command") == "train");
  CHECK(manifest.contains("version"));
  CHECK(manifest.at("seed") == 3);
  CHECK(manifest.at("config").at("train").at("lambda") == 10.0);
  CHECK_FALSE(manifest.contains("wall_seconds"));

  const std::string first = slurp(dir / "run" / "checkpoint.json");
  const std::string first_manifest = slurp(dir / "run" / "manifest.json");
  const std::string first_history = slurp(dir / "run" / "history.csv");
  const Outcome b = run_cli({"--deterministic", "train", "--config", cfg.string(), "--checkpoint-every", "1"});
  REQUIRE(b.code == 0);
  CHECK(slurp(dir / "run" / "checkpoint.json") == first);
  CHECK(slurp(dir / "run" / "manifest.json") == first_manifest);
  CHECK(slurp(dir / "run" / "history.csv") == first_history);

  const Outcome other = run_cli({"--deterministic", "--seed", "4", "train", "--config", cfg.string(), "--out",
                                 (dir / "other").string()});
  REQUIRE(other.code == 0);
  CHECK(slurp(dir / "other" / "checkpoint.json") != first);
}

TEST_CASE("invalid configurations exit with 2") {
  const fs::path dir = fresh_dir("invalid");
  json small_batch = tiny_config(dir / "run");
  small_batch["train"]["batch_size"] = 1;
  const Outcome r = run_cli({"train", "--config", write_config(dir, small_batch, "a.json").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("batch_size") != std::string::npos);

  json unknown = tiny_config(dir / "run");
  unknown["train"]["momentum"] = 0.9;
  const Outcome u = run_cli({"train", "--config", write_config(dir, unknown, "b.json").string()});
  CHECK(u.code == 2);
  CHECK(u.err.find("momentum") != std::string::npos);

  json missing = tiny_config(dir / "run");
  missing["data"] = {{"source", "csv"}, {"path", (dir / "nope.csv").string()}};
  CHECK(run_cli({"train", "--config", write_config(dir, missing, "c.json").string()}).code == 2);

  std::ofstream(dir / "broken.json") << "{ not json";
  CHECK(run_cli({"train", "--config", (dir / "broken.json").string()}).code == 2);
  CHECK(run_cli({"train", "--config", (dir / "absent.json").string()}).code == 2);
}

TEST_CASE("eval, heatmap, probe-margin and transmission-dump") {
  const fs::path dir = fresh_dir("eval");
  const fs::path cfg = write_config(dir, tiny_config(dir / "run"));
  REQUIRE(run_cli({"--deterministic", "train", "--config", cfg.string()}).code == 0);
  const std::string ckpt = (dir / "run" / "checkpoint.json").string();

  REQUIRE(run_cli({"--seed", "9", "gen-two-circles", "--n-per-class", "15", "--out", (dir / "test.csv").string()}).code == 0);
  const Outcome e = run_cli({"eval", "--checkpoint", ckpt, "--data", (dir / "test.csv").string(), "--stability", "--out",
                             (dir / "stability.csv").string()});
  REQUIRE_MESSAGE(e.code == 0, e.err);
  const double acc = json::parse(e.out).at("accuracy").get<double>();
  CHECK(acc >= 0.0);
  CHECK(acc <= 1.0);
  std::ifstream st(dir / "stability.csv");
  std::string header;
  std::getline(st, header);
  CHECK(std::count(header.begin(), header.end(), ',') == 4);

  std::ofstream(dir / "unlabeled.csv") << "x0,x1\n0.1,0.2\n1.5,0.3\n";
  const Outcome nl = run_cli({"eval", "--checkpoint", ckpt, "--data", (dir / "unlabeled.csv").string()});
  CHECK(nl.code == 2);
  CHECK(nl.err.find("labels required") != std::string::npos);
  CHECK(run_cli({"eval", "--checkpoint", (dir / "nope.json").string(), "--data", (dir / "test.csv").string()}).code == 2);

  const Outcome h = run_cli({"heatmap", "--checkpoint", ckpt, "--resolution", "6", "--out", (dir / "heat.csv").string()});
  REQUIRE(h.code == 0);
  std::ifstream heat(dir / "heat.csv");
  int lines = 0;
  for (std::string l; std::getline(heat, l);) ++lines;
  CHECK(lines == 37);

  save_checkpoint(init_params(MlpSpec{3, {4}, 2, {}}, 0), (dir / "three.json").string());
  CHECK(run_cli({"heatmap", "--checkpoint", (dir / "three.json").string(), "--out", (dir / "h3.csv").string()}).code == 2);

  ModelParams flat = init_params(MlpSpec{2, {4}, 2, {}}, 0);
  flat.dense.back().weight.setZero();
  save_checkpoint(flat, (dir / "flat.json").string());
  const Outcome pm = run_cli({"probe-margin", "--checkpoint", (dir / "flat.json").string(), "--data",
                              (dir / "test.csv").string(), "--tau", "0", "--rho-grid", "0.01,0.05,0.2",
                              "--directions", "20"});
  REQUIRE_MESSAGE(pm.code == 0, pm.err);
  CHECK(json::parse(pm.out).at("margin") == 0.2);

  const Outcome td = run_cli({"transmission-dump", "--checkpoint", ckpt, "--data", (dir / "test.csv").string(), "--out",
                              (dir / "tm").string()});
  REQUIRE(td.code == 0);
  CHECK(fs::exists(dir / "tm" / "T.csv"));
  CHECK(fs::exists(dir / "tm" / "S.csv"));
}

TEST_CASE("config parsing round trips through the echo") {
  const cli::RunConfig cfg = cli::parse_run_config(tiny_config("out").dump());
  CHECK(cfg.train.lambda == 10.0);
  CHECK(cfg.model.hidden_dims == std::vector<Index>{8, 4});
  const cli::RunConfig again = cli::parse_run_config(cli::run_config_json(cfg));
  CHECK(cli::run_config_json(again) == cli::run_config_json(cfg));
  CHECK_THROWS_AS(cli::parse_run_config("{}"), cli::ConfigError);
}
