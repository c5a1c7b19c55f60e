// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "percept/dit.hpp"

namespace percept {

/// Dense -> MoE conversion. Every block's MLP is copied into all E routed
/// experts; the router starts as N(0, 1e-3^2) noise. Shared experts are also
/// copies of the dense MLP but with a zeroed output projection, so right
/// after conversion the block still computes exactly the dense MLP.
template <typename Scalar>
ModelParameters<Scalar> upcycle(const ModelParameters<Scalar>& dense, const MoESpec& spec, std::uint64_t seed) {
  if (dense.spec.moe) throw ConfigError("upcycle: model '" + dense.spec.id + "' already has MoE blocks");
  spec.validate();
  ModelParameters<Scalar> out = dense;
  out.spec.moe = spec;
  if (out.spec.id.find("-moe") == std::string::npos)
    out.spec.id += "-moe" + std::to_string(spec.num_experts) + "e" + std::to_string(spec.active_k) + "a";
  Rng rng(seed);
  std::normal_distribution<double> noise(0.0, 1e-3);
  for (auto& b : out.blocks) {
    b.moe.router = Mat<Scalar>(dense.spec.hidden_dim, spec.num_experts);
    for (Eigen::Index i = 0; i < b.moe.router.size(); ++i) b.moe.router.data()[i] = Scalar(noise(rng));
    b.moe.experts.assign(spec.num_experts, b.mlp);
    Mlp<Scalar> shared = b.mlp;
    shared.fc2.weight.setZero();
    shared.fc2.bias.setZero();
    b.moe.shared.assign(spec.shared_experts, shared);
    b.mlp = Mlp<Scalar>();
  }
  return out;
}

/// Parameters added by upcycle: per block (E + S - 1) MLP copies plus the router.
inline std::size_t upcycle_parameter_delta(const ModelSpec& dense, const MoESpec& spec) {
  const std::size_t d = dense.hidden_dim, h = dense.mlp_hidden();
  const std::size_t mlp = d * h + h + h * d + d;
  const std::size_t copies = std::size_t(spec.num_experts + spec.shared_experts) - 1;
  return std::size_t(dense.num_layers) * (copies * mlp + d * spec.num_experts);
}

}  // namespace percept
