// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "percept/dit.hpp"
#include "percept/latent_codec.hpp"

#include <nlohmann/json.hpp>

namespace percept {

using nlohmann::json;

inline void to_json(json& j, const MoESpec& m) {
  j = {{"num_experts", m.num_experts}, {"active_k", m.active_k}, {"shared_experts", m.shared_experts}, {"balance_weight", m.balance_weight}};
}

inline void from_json(const json& j, MoESpec& m) {
  m = MoESpec{};
  m.num_experts = j.value("num_experts", m.num_experts);
  m.active_k = j.value("active_k", m.active_k);
  m.shared_experts = j.value("shared_experts", m.shared_experts);
  m.balance_weight = j.value("balance_weight", m.balance_weight);
}

inline void to_json(json& j, const ModelSpec& s) {
  j = {{"id", s.id},
       {"hidden_dim", s.hidden_dim},
       {"num_layers", s.num_layers},
       {"num_heads", s.num_heads},
       {"patch_size", s.patch_size},
       {"latent_channels", s.latent_channels},
       {"num_classes", s.num_classes},
       {"mlp_ratio", s.mlp_ratio},
       {"freq_dim", s.freq_dim},
       {"base_grid", s.base_grid}};
  j["inputs"] = json::array();
  for (const auto& in : s.inputs) j["inputs"].push_back({{"name", in.name}, {"num_latents", in.num_latents}});
  j["moe"] = s.moe ? json(*s.moe) : json(nullptr);
}

inline void from_json(const json& j, ModelSpec& s) {
  s = ModelSpec{};
  s.id = j.value("id", s.id);
  s.hidden_dim = j.at("hidden_dim").get<int>();
  s.num_layers = j.at("num_layers").get<int>();
  s.num_heads = j.at("num_heads").get<int>();
  s.patch_size = j.value("patch_size", s.patch_size);
  s.latent_channels = j.value("latent_channels", s.latent_channels);
  s.num_classes = j.value("num_classes", s.num_classes);
  s.mlp_ratio = j.value("mlp_ratio", s.mlp_ratio);
  s.freq_dim = j.value("freq_dim", s.freq_dim);
  s.base_grid = j.value("base_grid", s.base_grid);
  if (j.contains("inputs")) {
    s.inputs.clear();
    for (const auto& in : j["inputs"]) s.inputs.push_back({in.at("name").get<std::string>(), in.at("num_latents").get<int>()});
  }
  if (j.contains("moe") && !j["moe"].is_null()) s.moe = j["moe"].get<MoESpec>();
  s.validate();
}

inline json codec_json(const CodecSpec& c) { return {{"factor", c.factor}, {"channels", c.channels}, {"seed", c.seed}}; }

inline CodecSpec codec_from_json(const json& j) {
  return make_codec(j.at("factor").get<int>(), j.at("channels").get<int>(), j.at("seed").get<std::uint64_t>());
}

}  // namespace percept
