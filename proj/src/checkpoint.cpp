#include <fstream>
#include <sstream>

#include <json.hpp>

#include "piecewise/model.hpp"

namespace piecewise {
namespace {

using nlohmann::json;

constexpr const char* kFormat = "piecewise-mlp-checkpoint";
constexpr int kVersion = 1;

json block_json(const std::string& name, const Matrix& m) {
  return json{{"name", name},
              {"shape", {m.rows(), m.cols()}},
              {"values", std::vector<double>(m.data(), m.data() + m.size())}};
}

Matrix block_matrix(const json& j, const std::string& expected, Index rows, Index cols) {
  if (j.at("name").get<std::string>() != expected) {
    throw ContractViolation("checkpoint block '" + j.at("name").get<std::string>() + "' where '" + expected +
                            "' was expected");
  }
  const auto shape = j.at("shape").get<std::vector<Index>>();
  const auto values = j.at("values").get<std::vector<double>>();
  if (shape.size() != 2 || shape[0] != rows || shape[1] != cols ||
      static_cast<Index>(values.size()) != rows * cols) {
    throw ContractViolation("checkpoint block '" + expected + "' has the wrong shape");
  }
  Matrix m(rows, cols);
  std::copy(values.begin(), values.end(), m.data());
  require_finite(m, expected);
  return m;
}

}  // namespace

std::string checkpoint_to_json(const ModelParams& params) {
  json spec{{"input_dim", params.spec.input_dim},
            {"hidden_dims", params.spec.hidden_dims},
            {"num_classes", params.spec.num_classes}};
  std::vector<bool> bn;
  for (const auto& n : params.norms) bn.push_back(n.has_value());
  spec["batchnorm"] = bn;

  json blocks = json::array();
  for (std::size_t i = 0; i < params.dense.size(); ++i) {
    const std::string li = "layer" + std::to_string(i);
    blocks.push_back(block_json(li + ".weight", params.dense[i].weight));
    blocks.push_back(block_json(li + ".bias", params.dense[i].bias));
    if (i < params.norms.size() && params.norms[i]) {
      const std::string bi = "bn" + std::to_string(i);
      blocks.push_back(block_json(bi + ".gamma", params.norms[i]->gamma));
      blocks.push_back(block_json(bi + ".beta", params.norms[i]->beta));
      blocks.push_back(block_json(bi + ".running_mean", params.norms[i]->running_mean));
      blocks.push_back(block_json(bi + ".running_var", params.norms[i]->running_var));
    }
  }
  json doc{{"format", kFormat}, {"version", kVersion}, {"spec", spec}, {"seed", params.seed}, {"blocks", blocks}};
  return doc.dump();
}

ModelParams checkpoint_from_json(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ContractViolation(std::string("checkpoint is not valid JSON: ") + e.what());
  }
  try {
    if (doc.at("format").get<std::string>() != kFormat || doc.at("version").get<int>() != kVersion) {
      throw ContractViolation("unsupported checkpoint format");
    }
    MlpSpec spec;
    const json& s = doc.at("spec");
    spec.input_dim = s.at("input_dim").get<Index>();
    spec.hidden_dims = s.at("hidden_dims").get<std::vector<Index>>();
    spec.num_classes = s.at("num_classes").get<Index>();
    spec.batchnorm = s.at("batchnorm").get<std::vector<bool>>();
    ModelParams p = init_params(spec, doc.at("seed").get<std::uint64_t>());

    const json& blocks = doc.at("blocks");
    std::size_t k = 0;
    auto take = [&](const std::string& name, const Matrix& like) {
      if (k >= blocks.size()) throw ContractViolation("checkpoint is missing block '" + name + "'");
      return block_matrix(blocks[k++], name, like.rows(), like.cols());
    };
    for (std::size_t i = 0; i < p.dense.size(); ++i) {
      const std::string li = "layer" + std::to_string(i);
      p.dense[i].weight = take(li + ".weight", p.dense[i].weight);
      p.dense[i].bias = take(li + ".bias", p.dense[i].bias);
      if (i < p.norms.size() && p.norms[i]) {
        const std::string bi = "bn" + std::to_string(i);
        auto& bn = *p.norms[i];
        bn.gamma = take(bi + ".gamma", bn.gamma);
        bn.beta = take(bi + ".beta", bn.beta);
        bn.running_mean = take(bi + ".running_mean", bn.running_mean);
        bn.running_var = take(bi + ".running_var", bn.running_var);
        if ((bn.running_var.array() <= 0.0).any()) throw ContractViolation("running variance must be positive");
      }
    }
    if (k != blocks.size()) throw ContractViolation("checkpoint has unexpected extra blocks");
    return p;
  } catch (const json::exception& e) {
    throw ContractViolation(std::string("malformed checkpoint: ") + e.what());
  }
}

void save_checkpoint(const ModelParams& params, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint " + path);
  out << checkpoint_to_json(params) << '\n';
}

ModelParams load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ContractViolation("cannot open checkpoint " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return checkpoint_from_json(ss.str());
}

}  // namespace piecewise
