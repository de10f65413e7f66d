#pragma once

#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "gam/model.hpp"

namespace gam {

constexpr const char* kCheckpointMagic = "gam.checkpoint";
constexpr int kCheckpointVersion = 1;

namespace checkpoint_detail {

inline nlohmann::json mlp_json(const Mlp& m) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : m.layers) {
    nlohmann::json jl;
    jl["rows"] = l.w.rows();
    jl["cols"] = l.w.cols();
    std::vector<double> w(l.w.data(), l.w.data() + l.w.size());
    std::vector<double> b(l.b.data(), l.b.data() + l.b.size());
    jl["w"] = std::move(w);
    jl["b"] = std::move(b);
    layers.push_back(std::move(jl));
  }
  return {{"layers", std::move(layers)},
          {"activation", to_string(m.act)},
          {"final_activation", m.final_activation}};
}

inline Mlp mlp_from_json(const nlohmann::json& j) {
  Mlp m;
  m.act = activation_from_string(j.at("activation").get<std::string>());
  m.final_activation = j.at("final_activation").get<bool>();
  for (const auto& jl : j.at("layers")) {
    const int rows = jl.at("rows").get<int>();
    const int cols = jl.at("cols").get<int>();
    const auto w = jl.at("w").get<std::vector<double>>();
    const auto b = jl.at("b").get<std::vector<double>>();
    if (static_cast<int>(w.size()) != rows * cols || static_cast<int>(b.size()) != rows)
      throw FormatError("checkpoint: layer size mismatch");
    Linear l;
    l.w = Eigen::Map<const MatX>(w.data(), rows, cols);
    l.b = Eigen::Map<const VecX>(b.data(), rows);
    m.layers.push_back(std::move(l));
  }
  return m;
}

inline nlohmann::json linear_json(const Linear& l) {
  nlohmann::json j;
  j["rows"] = l.w.rows();
  j["cols"] = l.w.cols();
  j["w"] = std::vector<double>(l.w.data(), l.w.data() + l.w.size());
  j["b"] = std::vector<double>(l.b.data(), l.b.data() + l.b.size());
  return j;
}

inline Linear linear_from_json(const nlohmann::json& j) {
  const int rows = j.at("rows").get<int>();
  const int cols = j.at("cols").get<int>();
  const auto w = j.at("w").get<std::vector<double>>();
  const auto b = j.at("b").get<std::vector<double>>();
  if (static_cast<int>(w.size()) != rows * cols || static_cast<int>(b.size()) != rows)
    throw FormatError("checkpoint: head size mismatch");
  Linear l;
  l.w = Eigen::Map<const MatX>(w.data(), rows, cols);
  l.b = Eigen::Map<const VecX>(b.data(), rows);
  return l;
}

}  // namespace checkpoint_detail

inline void save_weights(const std::string& path, const ModelWeights& w) {
  using namespace checkpoint_detail;
  nlohmann::json j;
  j["format"] = kCheckpointMagic;
  j["version"] = kCheckpointVersion;
  j["config"] = w.config.to_json();
  j["motion_encoder"] = mlp_json(w.motion_encoder);
  j["interaction_encoder"] = mlp_json(w.interaction_encoder);
  j["motion_prior"] = mlp_json(w.motion_prior);
  j["interaction_prior"] = mlp_json(w.interaction_prior);
  j["decoder_trunk"] = mlp_json(w.decoder_trunk);
  j["head_state"] = linear_json(w.head_state);
  j["head_interaction"] = linear_json(w.head_interaction);
  j["head_contact"] = linear_json(w.head_contact);
  std::ofstream out(path);
  if (!out) throw FormatError("checkpoint: cannot write " + path);
  out << j.dump() << "\n";
  if (!out) throw FormatError("checkpoint: write failed for " + path);
}

inline ModelWeights load_weights(const std::string& path) {
  using namespace checkpoint_detail;
  std::ifstream in(path);
  if (!in) throw FormatError("checkpoint: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": invalid or truncated checkpoint: " + e.what());
  }
  if (!j.contains("format") || j["format"] != kCheckpointMagic)
    throw FormatError(path + ": not a checkpoint file");
  if (j.at("version").get<int>() != kCheckpointVersion)
    throw FormatError(path + ": unsupported checkpoint version");
  ModelWeights w;
  try {
    w.config = ModelConfig::from_json(j.at("config"));
    w.motion_encoder = mlp_from_json(j.at("motion_encoder"));
    w.interaction_encoder = mlp_from_json(j.at("interaction_encoder"));
    w.motion_prior = mlp_from_json(j.at("motion_prior"));
    w.interaction_prior = mlp_from_json(j.at("interaction_prior"));
    w.decoder_trunk = mlp_from_json(j.at("decoder_trunk"));
    w.head_state = linear_from_json(j.at("head_state"));
    w.head_interaction = linear_from_json(j.at("head_interaction"));
    w.head_contact = linear_from_json(j.at("head_contact"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": malformed checkpoint: " + e.what());
  }
  if (w.motion_encoder.in_dim() != 2 * w.config.state_dim ||
      w.decoder_trunk.in_dim() != w.config.decoder_input_dim() ||
      w.head_state.w.rows() != w.config.state_dim)
    throw FormatError(path + ": weight shapes disagree with the embedded config");
  return w;
}

// Variant for callers that require a specific architecture.
inline ModelWeights load_weights(const std::string& path, const ModelConfig& expected) {
  ModelWeights w = load_weights(path);
  if (!(w.config == expected))
    throw ConfigError(path + ": checkpoint config does not match the expected config");
  return w;
}

}  // namespace gam
