// SPDX-License-Identifier: Apache-2.0
#pragma once

// Diffusion transformer over latent patch tokens with adaptive layer-norm
// conditioning (zero-initialized), optional MoE feed-forward blocks, and one
// patch-embedding projection per input route.

#include "percept/layers.hpp"
#include "percept/moe.hpp"
#include "percept/tensor.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace percept {

/// One patch-embedding route: how many latents it concatenates on input.
struct InputProjection {
  std::string name = "image";
  int num_latents = 1;
  bool operator==(const InputProjection&) const = default;
};

struct ModelSpec {
  std::string id = "custom";
  int hidden_dim = 32;
  int num_layers = 2;
  int num_heads = 2;
  int patch_size = 2;
  int latent_channels = 12;
  int num_classes = 10;
  int mlp_ratio = 4;
  int freq_dim = 256;
  /// Token-grid side the positional embedding is defined on; other grids are
  /// mapped onto it by coordinate interpolation. 0 means "use the actual grid".
  int base_grid = 0;
  std::vector<InputProjection> inputs = {InputProjection{}};
  std::optional<MoESpec> moe;

  int head_dim() const { return hidden_dim / num_heads; }
  int mlp_hidden() const { return hidden_dim * mlp_ratio; }
  int input_channels(int route = 0) const { return latent_channels * inputs.at(route).num_latents; }
  int patch_in(int route = 0) const { return patch_size * patch_size * input_channels(route); }
  int patch_out() const { return patch_size * patch_size * latent_channels; }

  void validate() const {
    if (hidden_dim < 4 || num_layers < 0 || num_heads < 1 || patch_size < 1 || latent_channels < 1 || num_classes < 1)
      throw ConfigError("model spec '" + id + "': nonpositive dimension");
    if (hidden_dim % num_heads != 0)
      throw ConfigError("model spec '" + id + "': hidden_dim " + std::to_string(hidden_dim) + " not divisible by num_heads " +
                        std::to_string(num_heads));
    if (hidden_dim % 4 != 0) throw ConfigError("model spec '" + id + "': hidden_dim must be divisible by 4");
    if (freq_dim % 2 != 0) throw ConfigError("model spec '" + id + "': freq_dim must be even");
    if (inputs.empty()) throw ConfigError("model spec '" + id + "': no input projection");
    for (const auto& in : inputs)
      if (in.num_latents < 1) throw ConfigError("model spec '" + id + "': input route needs >= 1 latent");
    if (moe) moe->validate();
  }
  bool operator==(const ModelSpec&) const = default;
};

/// Dense ladder a1..a6 at full scale (256 px images, 8x codec, 4 latent channels).
ModelSpec dense_ladder(const std::string& name);
/// Desk-scale ladder b1..b4 (toy codec, 12 latent channels, 10 classes).
ModelSpec toy_ladder(const std::string& name);
/// MoE configs S/2-8E2A, S/2-16E2A, L/2-8E2A.
ModelSpec moe_config(const std::string& name);
ModelSpec named_model(const std::string& name);

template <typename Scalar>
struct BlockWeights {
  Linear<Scalar> qkv, proj, mod;
  Mlp<Scalar> mlp;
  MoeWeights<Scalar> moe;
};

/// Patch embeddings, timestep/class embeddings, transformer blocks and the
/// output head. Tensor names follow the checkpoint schema.
template <typename Scalar>
struct ModelParameters {
  ModelSpec spec;
  std::vector<Linear<Scalar>> patch_embed;
  Linear<Scalar> t_fc1, t_fc2;
  Mat<Scalar> y_embed;
  std::vector<BlockWeights<Scalar>> blocks;
  Linear<Scalar> final_mod, head;

  template <typename F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <typename F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const Mat<Scalar>& m) { n += std::size_t(m.size()); });
    return n;
  }

  int route_index(const std::string& name) const {
    for (std::size_t i = 0; i < spec.inputs.size(); ++i)
      if (spec.inputs[i].name == name) return int(i);
    throw ConfigError("unknown input route '" + name + "'");
  }

  template <typename Other>
  ModelParameters<Other> cast() const {
    ModelParameters<Other> out = shape_like<Other>();
    std::vector<const Mat<Scalar>*> src;
    visit([&](const std::string&, const Mat<Scalar>& m) { src.push_back(&m); });
    std::size_t i = 0;
    out.visit([&](const std::string&, Mat<Other>& m) { m = src[i++]->template cast<Other>(); });
    return out;
  }

  /// Same schema, every tensor zero.
  template <typename Other = Scalar>
  ModelParameters<Other> shape_like() const;

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& self, F& f) {
    for (std::size_t i = 0; i < self.patch_embed.size(); ++i) {
      const std::string base = "patch_embed." + self.spec.inputs[i].name;
      f(base + ".weight", self.patch_embed[i].weight);
      f(base + ".bias", self.patch_embed[i].bias);
    }
    f(std::string("t_embed.fc1.weight"), self.t_fc1.weight);
    f(std::string("t_embed.fc1.bias"), self.t_fc1.bias);
    f(std::string("t_embed.fc2.weight"), self.t_fc2.weight);
    f(std::string("t_embed.fc2.bias"), self.t_fc2.bias);
    f(std::string("y_embed.weight"), self.y_embed);
    for (std::size_t i = 0; i < self.blocks.size(); ++i) {
      auto& b = self.blocks[i];
      const std::string p = "blocks." + std::to_string(i) + ".";
      f(p + "attn.qkv.weight", b.qkv.weight);
      f(p + "attn.qkv.bias", b.qkv.bias);
      f(p + "attn.proj.weight", b.proj.weight);
      f(p + "attn.proj.bias", b.proj.bias);
      f(p + "mod.weight", b.mod.weight);
      f(p + "mod.bias", b.mod.bias);
      auto visit_mlp = [&](const std::string& q, auto& m) {
        f(q + "fc1.weight", m.fc1.weight);
        f(q + "fc1.bias", m.fc1.bias);
        f(q + "fc2.weight", m.fc2.weight);
        f(q + "fc2.bias", m.fc2.bias);
      };
      if (self.spec.moe) {
        f(p + "mlp.router.weight", b.moe.router);
        for (std::size_t e = 0; e < b.moe.experts.size(); ++e) visit_mlp(p + "mlp.experts." + std::to_string(e) + ".", b.moe.experts[e]);
        for (std::size_t s = 0; s < b.moe.shared.size(); ++s) visit_mlp(p + "mlp.shared." + std::to_string(s) + ".", b.moe.shared[s]);
      } else {
        visit_mlp(p + "mlp.", b.mlp);
      }
    }
    f(std::string("head.mod.weight"), self.final_mod.weight);
    f(std::string("head.mod.bias"), self.final_mod.bias);
    f(std::string("head.proj.weight"), self.head.weight);
    f(std::string("head.proj.bias"), self.head.bias);
  }
};

/// Allocates zero tensors for every name in the schema of `spec`.
template <typename Scalar>
ModelParameters<Scalar> allocate_model(const ModelSpec& spec) {
  spec.validate();
  const int d = spec.hidden_dim;
  ModelParameters<Scalar> p;
  p.spec = spec;
  for (std::size_t i = 0; i < spec.inputs.size(); ++i) p.patch_embed.emplace_back(spec.patch_in(int(i)), d);
  p.t_fc1 = Linear<Scalar>(spec.freq_dim, d);
  p.t_fc2 = Linear<Scalar>(d, d);
  p.y_embed = Mat<Scalar>::Zero(spec.num_classes, d);
  p.blocks.resize(spec.num_layers);
  for (auto& b : p.blocks) {
    b.qkv = Linear<Scalar>(d, 3 * d);
    b.proj = Linear<Scalar>(d, d);
    b.mod = Linear<Scalar>(d, 6 * d);
    if (spec.moe) {
      b.moe.router = Mat<Scalar>::Zero(d, spec.moe->num_experts);
      b.moe.experts.assign(spec.moe->num_experts, Mlp<Scalar>(d, spec.mlp_hidden()));
      b.moe.shared.assign(spec.moe->shared_experts, Mlp<Scalar>(d, spec.mlp_hidden()));
    } else {
      b.mlp = Mlp<Scalar>(d, spec.mlp_hidden());
    }
  }
  p.final_mod = Linear<Scalar>(d, 2 * d);
  p.head = Linear<Scalar>(d, spec.patch_out());
  return p;
}

template <typename Scalar>
template <typename Other>
ModelParameters<Other> ModelParameters<Scalar>::shape_like() const {
  return allocate_model<Other>(spec);
}

/// Parameter count from the schema arithmetic alone (no allocation).
inline std::size_t parameter_count(const ModelSpec& s) {
  const std::size_t d = s.hidden_dim, h = s.mlp_hidden();
  std::size_t n = 0;
  for (std::size_t i = 0; i < s.inputs.size(); ++i) n += std::size_t(s.patch_in(int(i))) * d + d;
  n += s.freq_dim * d + d + d * d + d;
  n += std::size_t(s.num_classes) * d;
  const std::size_t mlp = d * h + h + h * d + d;
  std::size_t block = 3 * d * d + 3 * d + d * d + d + 6 * d * d + 6 * d;
  if (s.moe)
    block += d * s.moe->num_experts + mlp * (s.moe->num_experts + s.moe->shared_experts);
  else
    block += mlp;
  n += block * s.num_layers;
  n += 2 * d * d + 2 * d + d * s.patch_out() + s.patch_out();
  return n;
}

/// Truncated normal (sigma 0.02) projections; zero biases, zero modulation
/// outputs and zero head, so every block starts as an identity map.
template <typename Scalar>
ModelParameters<Scalar> build_model(const ModelSpec& spec, std::uint64_t seed) {
  ModelParameters<Scalar> p = allocate_model<Scalar>(spec);
  Rng rng(seed);
  constexpr double sd = 0.02;
  for (auto& pe : p.patch_embed) truncated_normal(pe.weight, sd, rng);
  truncated_normal(p.t_fc1.weight, sd, rng);
  truncated_normal(p.t_fc2.weight, sd, rng);
  truncated_normal(p.y_embed, sd, rng);
  for (auto& b : p.blocks) {
    truncated_normal(b.qkv.weight, sd, rng);
    truncated_normal(b.proj.weight, sd, rng);
    if (spec.moe) {
      truncated_normal(b.moe.router, sd, rng);
      for (auto& e : b.moe.experts) {
        truncated_normal(e.fc1.weight, sd, rng);
        truncated_normal(e.fc2.weight, sd, rng);
      }
      for (auto& e : b.moe.shared) {
        truncated_normal(e.fc1.weight, sd, rng);
        truncated_normal(e.fc2.weight, sd, rng);
      }
    } else {
      truncated_normal(b.mlp.fc1.weight, sd, rng);
      truncated_normal(b.mlp.fc2.weight, sd, rng);
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Token layout helpers

/// Latent (h x w x C) -> tokens (n x p*p*C), row = gy*gw + gx,
/// column = (py*p + px)*C + channel.
template <typename Scalar>
void patchify_into(const Latent<Scalar>& z, int p, Mat<Scalar>& out, Eigen::Index row0) {
  const int gh = z.height / p, gw = z.width / p, c = z.channels;
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) {
      const Eigen::Index r = row0 + gy * gw + gx;
      for (int py = 0; py < p; ++py)
        for (int px = 0; px < p; ++px)
          for (int ch = 0; ch < c; ++ch) out(r, (py * p + px) * c + ch) = z.at(gy * p + py, gx * p + px, ch);
    }
}

template <typename Scalar>
Latent<Scalar> unpatchify(const Mat<Scalar>& tokens, Eigen::Index row0, int gh, int gw, int p, int c) {
  Latent<Scalar> z(gh * p, gw * p, c);
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) {
      const Eigen::Index r = row0 + gy * gw + gx;
      for (int py = 0; py < p; ++py)
        for (int px = 0; px < p; ++px)
          for (int ch = 0; ch < c; ++ch) z.at(gy * p + py, gx * p + px, ch) = tokens(r, (py * p + px) * c + ch);
    }
  return z;
}

template <typename Scalar>
Mat<Scalar> timestep_features(const std::vector<int>& t, int freq_dim) {
  const int half = freq_dim / 2;
  Mat<Scalar> e(t.size(), freq_dim);
  for (std::size_t b = 0; b < t.size(); ++b)
    for (int i = 0; i < half; ++i) {
      const double f = std::exp(-std::log(10000.0) * i / half);
      e(b, i) = Scalar(std::cos(t[b] * f));
      e(b, half + i) = Scalar(std::sin(t[b] * f));
    }
  return e;
}

/// Fixed 2-D sine-cosine positional embedding; the first half of the
/// features encodes x, the second half y.
template <typename Scalar>
Mat<Scalar> position_embedding(int gh, int gw, int dim, int base_grid) {
  const int quarter = dim / 4;
  const double sy = base_grid > 0 ? double(base_grid) / gh : 1.0;
  const double sx = base_grid > 0 ? double(base_grid) / gw : 1.0;
  Mat<Scalar> e(gh * gw, dim);
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) {
      const int r = gy * gw + gx;
      for (int i = 0; i < quarter; ++i) {
        const double omega = 1.0 / std::pow(10000.0, double(i) / quarter);
        e(r, i) = Scalar(std::sin(gx * sx * omega));
        e(r, quarter + i) = Scalar(std::cos(gx * sx * omega));
        e(r, 2 * quarter + i) = Scalar(std::sin(gy * sy * omega));
        e(r, 3 * quarter + i) = Scalar(std::cos(gy * sy * omega));
      }
    }
  return e;
}

// ---------------------------------------------------------------------------
// Forward / backward over a batch of token sequences

template <typename Scalar>
struct BlockCache {
  Mat<Scalar> x_in, a_in, qkv, attn_cat, attn_out, x_mid, m_in, mlp_out, mod;
  LayerNormCache<Scalar> ln1, ln2;
  std::vector<Mat<Scalar>> probs;  // batch*heads, each n x n
  MlpCache<Scalar> mlp;
  MoeCache<Scalar> moe;
};

template <typename Scalar>
struct ForwardCache {
  int batch = 0, tokens = 0, route = 0;
  Mat<Scalar> patches, t_feat, t_pre, t_act, cond, silu_cond, final_in, final_mod;
  LayerNormCache<Scalar> ln_final;
  std::vector<int> labels;
  std::vector<BlockCache<Scalar>> blocks;
};

template <typename Scalar>
struct ForwardResult {
  Mat<Scalar> tokens;           // (batch*n) x patch_out
  double balance_loss = 0.0;    // mean over MoE layers, 0 for dense models
  std::vector<RoutingDecision> routing;
};

namespace detail {

template <typename Scalar>
void modulate_inplace(Mat<Scalar>& x, const Mat<Scalar>& mod, int shift_col, int scale_col, int n) {
  const Eigen::Index d = x.cols();
  for (Eigen::Index b = 0; b < mod.rows(); ++b) {
    auto rows = x.middleRows(b * n, n);
    const auto scale = (mod.row(b).segment(scale_col * d, d).array() + Scalar(1)).matrix();
    const auto shift = mod.row(b).segment(shift_col * d, d);
    for (int r = 0; r < n; ++r) rows.row(r) = (rows.row(r).array() * scale.array()).matrix() + shift;
  }
}

// dy: gradient w.r.t. modulated output; xn: pre-modulation input.
// Writes d(shift), d(scale) into dmod and returns d(xn).
template <typename Scalar>
Mat<Scalar> modulate_backward(const Mat<Scalar>& dy, const Mat<Scalar>& xn, const Mat<Scalar>& mod, Mat<Scalar>& dmod,
                              int shift_col, int scale_col, int n) {
  const Eigen::Index d = dy.cols();
  Mat<Scalar> dx(dy.rows(), d);
  for (Eigen::Index b = 0; b < mod.rows(); ++b) {
    const auto dyb = dy.middleRows(b * n, n);
    const auto xb = xn.middleRows(b * n, n);
    dmod.row(b).segment(shift_col * d, d) += dyb.colwise().sum();
    dmod.row(b).segment(scale_col * d, d) += dyb.cwiseProduct(xb).colwise().sum();
    const auto scale = (mod.row(b).segment(scale_col * d, d).array() + Scalar(1)).matrix();
    for (int r = 0; r < n; ++r) dx.row(b * n + r) = (dyb.row(r).array() * scale.array()).matrix();
  }
  return dx;
}

// x += gate ⊙ branch, per sample
template <typename Scalar>
void gated_add(Mat<Scalar>& x, const Mat<Scalar>& branch, const Mat<Scalar>& mod, int gate_col, int n) {
  const Eigen::Index d = x.cols();
  for (Eigen::Index b = 0; b < mod.rows(); ++b) {
    const auto gate = mod.row(b).segment(gate_col * d, d);
    for (int r = 0; r < n; ++r) x.row(b * n + r) += (branch.row(b * n + r).array() * gate.array()).matrix();
  }
}

template <typename Scalar>
Mat<Scalar> gated_backward(const Mat<Scalar>& dy, const Mat<Scalar>& branch, const Mat<Scalar>& mod, Mat<Scalar>& dmod,
                           int gate_col, int n) {
  const Eigen::Index d = dy.cols();
  Mat<Scalar> dbranch(dy.rows(), d);
  for (Eigen::Index b = 0; b < mod.rows(); ++b) {
    const auto gate = mod.row(b).segment(gate_col * d, d);
    dmod.row(b).segment(gate_col * d, d) += dy.middleRows(b * n, n).cwiseProduct(branch.middleRows(b * n, n)).colwise().sum();
    for (int r = 0; r < n; ++r) dbranch.row(b * n + r) = (dy.row(b * n + r).array() * gate.array()).matrix();
  }
  return dbranch;
}

}  // namespace detail

/// Runs the network on a batch. `patches` holds batch*n token rows built
/// with patchify_into using the chosen input route.
template <typename Scalar>
ForwardResult<Scalar> forward_tokens(const ModelParameters<Scalar>& p, const Mat<Scalar>& patches, int grid_h, int grid_w,
                                     const std::vector<int>& timesteps, const std::vector<int>& labels, int route,
                                     ForwardCache<Scalar>* cache = nullptr) {
  const ModelSpec& s = p.spec;
  const int batch = int(timesteps.size());
  const int n = grid_h * grid_w;
  const int d = s.hidden_dim, heads = s.num_heads, dh = s.head_dim();
  if (route < 0 || route >= int(p.patch_embed.size())) throw ConfigError("forward: input route " + std::to_string(route) + " out of range");
  if (patches.cols() != p.patch_embed[route].in())
    throw ShapeError("forward: token width " + std::to_string(patches.cols()) + " but route '" + s.inputs[route].name +
                     "' expects " + std::to_string(p.patch_embed[route].in()));
  if (patches.rows() != Eigen::Index(batch) * n || int(labels.size()) != batch) throw ShapeError("forward: batch size mismatch");
  for (int y : labels)
    if (y < 0 || y >= s.num_classes) throw ConfigError("forward: label " + std::to_string(y) + " out of range");

  ForwardResult<Scalar> res;
  if (cache) {
    cache->batch = batch;
    cache->tokens = n;
    cache->route = route;
    cache->patches = patches;
    cache->labels = labels;
    cache->blocks.assign(s.num_layers, {});
  }

  Mat<Scalar> x = p.patch_embed[route].forward(patches);
  const Mat<Scalar> pos = position_embedding<Scalar>(grid_h, grid_w, d, s.base_grid);
  for (int b = 0; b < batch; ++b) x.middleRows(Eigen::Index(b) * n, n) += pos;

  Mat<Scalar> t_feat = timestep_features<Scalar>(timesteps, s.freq_dim);
  Mat<Scalar> t_pre = p.t_fc1.forward(t_feat);
  Mat<Scalar> t_act = silu(t_pre);
  Mat<Scalar> cond = p.t_fc2.forward(t_act);
  for (int b = 0; b < batch; ++b) cond.row(b) += p.y_embed.row(labels[b]);
  const Mat<Scalar> silu_cond = silu(cond);

  int moe_layers = 0;
  for (int l = 0; l < s.num_layers; ++l) {
    const BlockWeights<Scalar>& w = p.blocks[l];
    BlockCache<Scalar> local;
    BlockCache<Scalar>& bc = cache ? cache->blocks[l] : local;
    bc.x_in = x;
    bc.mod = w.mod.forward(silu_cond);

    bc.a_in = layer_norm(x, bc.ln1);
    detail::modulate_inplace(bc.a_in, bc.mod, 0, 1, n);
    bc.qkv = w.qkv.forward(bc.a_in);
    bc.attn_cat.resize(x.rows(), d);
    if (cache) bc.probs.resize(std::size_t(batch) * heads);
    const Scalar inv_sqrt = Scalar(1.0 / std::sqrt(double(dh)));
    for (int b = 0; b < batch; ++b)
      for (int h = 0; h < heads; ++h) {
        const auto q = bc.qkv.block(Eigen::Index(b) * n, h * dh, n, dh);
        const auto k = bc.qkv.block(Eigen::Index(b) * n, d + h * dh, n, dh);
        const auto v = bc.qkv.block(Eigen::Index(b) * n, 2 * d + h * dh, n, dh);
        Mat<Scalar> sc = (q * k.transpose()) * inv_sqrt;
        for (int r = 0; r < n; ++r) {
          sc.row(r).array() -= sc.row(r).maxCoeff();
          sc.row(r) = sc.row(r).array().exp().matrix();
          sc.row(r) /= sc.row(r).sum();
        }
        bc.attn_cat.block(Eigen::Index(b) * n, h * dh, n, dh).noalias() = sc * v;
        if (cache) bc.probs[std::size_t(b) * heads + h] = std::move(sc);
      }
    bc.attn_out = w.proj.forward(bc.attn_cat);
    detail::gated_add(x, bc.attn_out, bc.mod, 2, n);
    bc.x_mid = x;

    bc.m_in = layer_norm(x, bc.ln2);
    detail::modulate_inplace(bc.m_in, bc.mod, 3, 4, n);
    if (s.moe) {
      auto out = moe_forward(*s.moe, w.moe, bc.m_in, cache ? &bc.moe : nullptr);
      bc.mlp_out = std::move(out.tokens);
      res.balance_loss += balance_loss(out.decision);
      res.routing.push_back(std::move(out.decision));
      ++moe_layers;
    } else {
      bc.mlp_out = mlp_forward(w.mlp, bc.m_in, cache ? &bc.mlp : nullptr);
    }
    detail::gated_add(x, bc.mlp_out, bc.mod, 5, n);
  }
  if (moe_layers > 0) res.balance_loss /= moe_layers;

  Mat<Scalar> final_mod = p.final_mod.forward(silu_cond);
  LayerNormCache<Scalar> lnf;
  Mat<Scalar> final_in = layer_norm(x, lnf);
  detail::modulate_inplace(final_in, final_mod, 0, 1, n);
  res.tokens = p.head.forward(final_in);

  if (cache) {
    cache->t_feat = std::move(t_feat);
    cache->t_pre = std::move(t_pre);
    cache->t_act = std::move(t_act);
    cache->cond = std::move(cond);
    cache->silu_cond = silu_cond;
    cache->final_in = std::move(final_in);
    cache->final_mod = std::move(final_mod);
    cache->ln_final = std::move(lnf);
  }
  return res;
}

/// Accumulates parameter gradients of (task loss + balance_weight * mean
/// layer balance loss) into `grad`, given d(task loss)/d(output tokens).
template <typename Scalar>
void backward_tokens(const ModelParameters<Scalar>& p, const ForwardCache<Scalar>& c, const Mat<Scalar>& dout,
                     ModelParameters<Scalar>& grad) {
  const ModelSpec& s = p.spec;
  const int n = c.tokens, batch = c.batch;
  const int d = s.hidden_dim, heads = s.num_heads, dh = s.head_dim();

  Mat<Scalar> dfinal_in = p.head.backward(c.final_in, dout, grad.head);
  Mat<Scalar> dfinal_mod = Mat<Scalar>::Zero(batch, 2 * d);
  Mat<Scalar> dln = detail::modulate_backward(dfinal_in, c.ln_final.normalized, c.final_mod, dfinal_mod, 0, 1, n);
  Mat<Scalar> dx = layer_norm_backward(c.ln_final, dln);
  Mat<Scalar> dsilu_cond = p.final_mod.backward(c.silu_cond, dfinal_mod, grad.final_mod);

  const double balance_scale = s.moe ? s.moe->balance_weight / std::max(1, s.num_layers) : 0.0;
  const Scalar inv_sqrt = Scalar(1.0 / std::sqrt(double(dh)));
  for (int l = s.num_layers - 1; l >= 0; --l) {
    const BlockWeights<Scalar>& w = p.blocks[l];
    BlockWeights<Scalar>& g = grad.blocks[l];
    const BlockCache<Scalar>& bc = c.blocks[l];
    Mat<Scalar> dmod = Mat<Scalar>::Zero(batch, 6 * d);

    // x = x_mid + gate_mlp ⊙ mlp(modulate(LN(x_mid)))
    Mat<Scalar> dmlp_out = detail::gated_backward(dx, bc.mlp_out, bc.mod, dmod, 5, n);
    Mat<Scalar> dm_in = s.moe ? moe_backward(*s.moe, w.moe, bc.moe, dmlp_out, g.moe, balance_scale)
                              : mlp_backward(w.mlp, bc.mlp, dmlp_out, g.mlp);
    Mat<Scalar> dln2 = detail::modulate_backward(dm_in, bc.ln2.normalized, bc.mod, dmod, 3, 4, n);
    dx += layer_norm_backward(bc.ln2, dln2);

    // x_mid = x_in + gate_msa ⊙ attn(modulate(LN(x_in)))
    Mat<Scalar> dattn_out = detail::gated_backward(dx, bc.attn_out, bc.mod, dmod, 2, n);
    Mat<Scalar> dattn_cat = w.proj.backward(bc.attn_cat, dattn_out, g.proj);
    Mat<Scalar> dqkv(bc.qkv.rows(), 3 * d);
    for (int b = 0; b < batch; ++b)
      for (int h = 0; h < heads; ++h) {
        const Eigen::Index r0 = Eigen::Index(b) * n;
        const auto q = bc.qkv.block(r0, h * dh, n, dh);
        const auto k = bc.qkv.block(r0, d + h * dh, n, dh);
        const auto v = bc.qkv.block(r0, 2 * d + h * dh, n, dh);
        const Mat<Scalar>& a = bc.probs[std::size_t(b) * heads + h];
        const auto dO = dattn_cat.block(r0, h * dh, n, dh);
        Mat<Scalar> da = dO * v.transpose();
        dqkv.block(r0, 2 * d + h * dh, n, dh).noalias() = a.transpose() * dO;
        Mat<Scalar> ds(n, n);
        for (int r = 0; r < n; ++r) {
          const Scalar inner = da.row(r).dot(a.row(r));
          ds.row(r) = (a.row(r).array() * (da.row(r).array() - inner)).matrix();
        }
        ds *= inv_sqrt;
        dqkv.block(r0, h * dh, n, dh).noalias() = ds * k;
        dqkv.block(r0, d + h * dh, n, dh).noalias() = ds.transpose() * q;
      }
    Mat<Scalar> da_in = w.qkv.backward(bc.a_in, dqkv, g.qkv);
    Mat<Scalar> dln1 = detail::modulate_backward(da_in, bc.ln1.normalized, bc.mod, dmod, 0, 1, n);
    dx += layer_norm_backward(bc.ln1, dln1);

    dsilu_cond += w.mod.backward(c.silu_cond, dmod, g.mod);
  }

  Mat<Scalar> dcond = dsilu_cond.cwiseProduct(silu_grad(c.cond));
  for (int b = 0; b < batch; ++b) grad.y_embed.row(c.labels[b]) += dcond.row(b);
  Mat<Scalar> dt_act = p.t_fc2.backward(c.t_act, dcond, grad.t_fc2);
  Mat<Scalar> dt_pre = dt_act.cwiseProduct(silu_grad(c.t_pre));
  p.t_fc1.backward(c.t_feat, dt_pre, grad.t_fc1);
  p.patch_embed[c.route].backward(c.patches, dx, grad.patch_embed[c.route]);
}

/// Single-sample convenience: noise estimate with the target-latent shape.
template <typename Scalar>
Latent<Scalar> forward(const ModelParameters<Scalar>& p, const Latent<Scalar>& z, int t, int label, int route = 0) {
  const ModelSpec& s = p.spec;
  if (route < 0 || route >= int(s.inputs.size())) throw ConfigError("forward: input route out of range");
  if (z.channels != s.input_channels(route))
    throw ShapeError("forward: latent has " + std::to_string(z.channels) + " channels, route '" + s.inputs[route].name +
                     "' expects " + std::to_string(s.input_channels(route)));
  if (z.height % s.patch_size || z.width % s.patch_size) throw ShapeError("forward: latent size not divisible by patch size");
  const int gh = z.height / s.patch_size, gw = z.width / s.patch_size;
  Mat<Scalar> patches(gh * gw, s.patch_in(route));
  patchify_into(z, s.patch_size, patches, 0);
  auto res = forward_tokens(p, patches, gh, gw, {t}, {label}, route);
  return unpatchify(res.tokens, 0, gh, gw, s.patch_size, s.latent_channels);
}

/// Widens a single-latent input projection to k concatenated latents:
/// original weights are replicated k times along input channels, scaled 1/k.
template <typename Scalar>
Linear<Scalar> widen_projection(const Linear<Scalar>& src, int patch, int channels, int k) {
  Linear<Scalar> out(patch * patch * channels * k, src.out());
  out.bias = src.bias;
  for (int pp = 0; pp < patch * patch; ++pp)
    for (int j = 0; j < k; ++j)
      for (int ch = 0; ch < channels; ++ch)
        out.weight.row((pp * k + j) * channels + ch) = src.weight.row(pp * channels + ch) / Scalar(k);
  return out;
}

template <typename Scalar>
ModelParameters<Scalar> convert_input_layer(const ModelParameters<Scalar>& params, int k) {
  if (params.spec.inputs.size() != 1 || params.spec.inputs[0].num_latents != 1)
    throw ConfigError("convert_input_layer: model input layer is already converted");
  if (k < 1) throw ConfigError("convert_input_layer: k must be >= 1");
  ModelParameters<Scalar> out = params;
  out.spec.inputs[0].num_latents = k;
  out.patch_embed[0] = widen_projection(params.patch_embed[0], params.spec.patch_size, params.spec.latent_channels, k);
  return out;
}

/// Generalist model: one widened input projection per task route, all other
/// weights shared. Starts from a single-latent model.
template <typename Scalar>
ModelParameters<Scalar> make_routed(const ModelParameters<Scalar>& params, const std::vector<InputProjection>& routes) {
  if (params.spec.inputs.size() != 1 || params.spec.inputs[0].num_latents != 1)
    throw ConfigError("make_routed: source model must have a single one-latent input layer");
  if (routes.empty()) throw ConfigError("make_routed: no routes");
  ModelParameters<Scalar> out = params;
  out.spec.inputs = routes;
  out.patch_embed.clear();
  for (const auto& r : routes)
    out.patch_embed.push_back(widen_projection(params.patch_embed[0], params.spec.patch_size, params.spec.latent_channels, r.num_latents));
  return out;
}

/// Index of the input projection serving `task`.
template <typename Scalar>
int route_patch_embed(const ModelParameters<Scalar>& params, const std::string& task) {
  if (params.spec.inputs.size() == 1) return 0;
  return params.route_index(task);
}

/// Wraps a model as a sampler-compatible denoiser for one route/label.
template <typename Scalar>
struct DiTDenoiser {
  const ModelParameters<Scalar>* params = nullptr;
  int route = 0;
  int label = 0;
  int input_channels() const { return params->spec.input_channels(route); }
  Latent<Scalar> operator()(const Latent<Scalar>& z, int t) const { return forward(*params, z, t, label, route); }
};

}  // namespace percept
