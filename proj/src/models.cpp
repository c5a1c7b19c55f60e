// SPDX-License-Identifier: Apache-2.0
#include "percept/dit.hpp"

#include <array>

namespace percept {

namespace {

struct Row {
  const char* name;
  int dim, heads, layers;
};

constexpr std::array<Row, 6> kDense{{{"a1", 256, 16, 12},
                                     {"a2", 512, 16, 16},
                                     {"a3", 768, 16, 20},
                                     {"a4", 1024, 16, 24},
                                     {"a5", 1536, 16, 28},
                                     {"a6", 1792, 16, 32}}};

constexpr std::array<Row, 4> kToy{{{"b1", 32, 2, 2}, {"b2", 64, 4, 4}, {"b3", 96, 6, 6}, {"b4", 128, 8, 8}}};

ModelSpec full_scale(const std::string& id, int dim, int heads, int layers) {
  ModelSpec s;
  s.id = id;
  s.hidden_dim = dim;
  s.num_heads = heads;
  s.num_layers = layers;
  s.latent_channels = 4;
  s.num_classes = 1000;
  s.base_grid = 16;  // 256 px / codec 8 / patch 2
  return s;
}

}  // namespace

ModelSpec dense_ladder(const std::string& name) {
  for (const Row& r : kDense)
    if (name == r.name) return full_scale(r.name, r.dim, r.heads, r.layers);
  throw ConfigError("unknown dense model '" + name + "' (expected a1..a6)");
}

ModelSpec toy_ladder(const std::string& name) {
  for (const Row& r : kToy)
    if (name == r.name) {
      ModelSpec s;
      s.id = r.name;
      s.hidden_dim = r.dim;
      s.num_heads = r.heads;
      s.num_layers = r.layers;
      s.latent_channels = 12;
      s.num_classes = 10;
      s.base_grid = 4;  // 16 px / codec 2 / patch 2
      return s;
    }
  throw ConfigError("unknown toy model '" + name + "' (expected b1..b4)");
}

ModelSpec moe_config(const std::string& name) {
  ModelSpec s;
  MoESpec m;
  if (name == "S/2-8E2A" || name == "S/2-16E2A") {
    s = full_scale(name, 384, 6, 12);
    m.num_experts = name == "S/2-8E2A" ? 8 : 16;
  } else if (name == "L/2-8E2A") {
    s = full_scale(name, 1024, 16, 24);
    m.num_experts = 8;
  } else {
    throw ConfigError("unknown MoE model '" + name + "' (expected S/2-8E2A, S/2-16E2A or L/2-8E2A)");
  }
  m.active_k = 2;
  s.moe = m;
  return s;
}

ModelSpec named_model(const std::string& name) {
  if (name.size() == 2 && name[0] == 'a') return dense_ladder(name);
  if (name.size() == 2 && name[0] == 'b') return toy_ladder(name);
  return moe_config(name);
}

}  // namespace percept
