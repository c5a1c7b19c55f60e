// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "percept/diffusion.hpp"
#include "percept/dit.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace percept {

enum class Phase { pretrain, finetune };

struct TrainConfig {
  Phase phase = Phase::pretrain;
  int steps = 1000;
  int batch_size = 32;
  double lr_start = 1e-4;
  double lr_end = 1e-4;
  int resolution = 16;
  std::vector<std::string> tasks;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;
  int log_interval = 50;

  void validate() const {
    if (steps < 0) throw ConfigError("train: steps must be >= 0");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (!(lr_start > 0) || !(lr_end > 0)) throw ConfigError("train: learning rates must be > 0");
    if (log_interval < 1) throw ConfigError("train: log_interval must be >= 1");
  }
};

/// Geometric interpolation lr_start * (lr_end / lr_start)^(step / steps).
inline double lr_at(const TrainConfig& cfg, long step) {
  if (cfg.lr_end == cfg.lr_start || cfg.steps == 0) return cfg.lr_start;
  if (step >= cfg.steps) return cfg.lr_end;
  return cfg.lr_start * std::pow(cfg.lr_end / cfg.lr_start, double(step) / double(cfg.steps));
}

/// Multiply-accumulates of one forward pass over `tokens` patch tokens:
///   embed     n * patch_in * d
///   t-embed   freq * d + d * d
///   per layer 6d^2 (modulation) + 3nd^2 (qkv) + 2n^2 d (scores, values)
///             + nd^2 (out proj) + 2ndh (MLP; MoE: router nE + k routed
///             and S shared experts at 2ndh each)
///   head      2d^2 (modulation) + n * d * patch_out
/// Elementwise work (norms, softmax, activations) is not counted.
inline std::uint64_t count_macs(const ModelSpec& s, std::uint64_t tokens, int route = 0) {
  const std::uint64_t n = tokens, d = s.hidden_dim, h = s.mlp_hidden();
  std::uint64_t m = n * std::uint64_t(s.patch_in(route)) * d;
  m += std::uint64_t(s.freq_dim) * d + d * d;
  std::uint64_t layer = 6 * d * d + 3 * n * d * d + 2 * n * n * d + n * d * d;
  if (s.moe)
    layer += n * d * s.moe->num_experts + std::uint64_t(s.moe->active_k + s.moe->shared_experts) * 2 * n * d * h;
  else
    layer += 2 * n * d * h;
  m += layer * std::uint64_t(s.num_layers);
  m += 2 * d * d + n * d * std::uint64_t(s.patch_out());
  return m;
}

inline std::uint64_t tokens_for(const ModelSpec& s, int latent_h, int latent_w) {
  return std::uint64_t(latent_h / s.patch_size) * std::uint64_t(latent_w / s.patch_size);
}

inline constexpr int kBackwardMultiplier = 2;

struct ComputeMeter {
  std::uint64_t macs_per_forward = 0;
  std::uint64_t cumulative_train_macs = 0;
  std::uint64_t cumulative_inference_macs = 0;

  void add_train_step(int batch) { cumulative_train_macs += std::uint64_t(batch) * (1 + kBackwardMultiplier) * macs_per_forward; }
  void add_inference(std::uint64_t macs) { cumulative_inference_macs += macs; }
};

struct RunRecord {
  long step = 0;
  double compute = 0;  // cumulative training MACs
  double train_loss = 0;
  std::map<std::string, double> metrics;  // absrel, delta1, epe, miou as applicable
  std::string model_id;
  int batch_size = 0;  // toy batches stand in for the full-scale ones
};

/// One supervised example: clean target latent, clean condition latents
/// (empty during pre-training), a class or task label and the input route.
struct TrainExample {
  std::vector<LatentTensor> conditions;
  LatentTensor target;
  int label = 0;
  int route = 0;
};

template <typename Scalar>
struct TrainState {
  ModelParameters<Scalar> params;
  ModelParameters<Scalar> adam_m, adam_v;
  long adam_step = 0;
  long step = 0;
  ComputeMeter meter;

  explicit TrainState(ModelParameters<Scalar> p) : params(std::move(p)) {
    adam_m = params.shape_like();
    adam_v = params.shape_like();
  }
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

/// Per-step randomness is derived from (seed, step) so a resumed run draws
/// exactly what an uninterrupted one would.
inline Rng step_rng(std::uint64_t seed, long step) {
  std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(step), std::uint32_t(std::uint64_t(step) >> 32), 0x70726574u};
  return Rng(seq);
}

template <typename Scalar>
struct BatchLoss {
  double loss = 0;          // mean squared noise-prediction error
  double balance = 0;       // mean MoE balance loss (0 if dense)
  std::vector<double> per_sample;
};

/// Builds the (conditions ++ noisy target) token batch for examples sharing
/// one route, runs forward, and optionally backward into `grad`.
template <typename Scalar>
BatchLoss<Scalar> batch_loss(const ModelParameters<Scalar>& p, const std::vector<const TrainExample*>& batch,
                             const std::vector<int>& timesteps, const std::vector<Latent<Scalar>>& eps,
                             const NoiseSchedule& sched, ModelParameters<Scalar>* grad = nullptr,
                             const std::vector<const Latent<Scalar>*>* eps_hat_override = nullptr) {
  const ModelSpec& s = p.spec;
  if (batch.empty()) throw ConfigError("batch_loss: empty batch");
  const int route = batch[0]->route;
  const int ps = s.patch_size;
  const int lh = batch[0]->target.height, lw = batch[0]->target.width;
  const int gh = lh / ps, gw = lw / ps, n = gh * gw;
  const int want = s.inputs.at(route).num_latents;
  Mat<Scalar> patches(Eigen::Index(batch.size()) * n, s.patch_in(route));
  Mat<Scalar> target_tokens(Eigen::Index(batch.size()) * n, s.patch_out());
  std::vector<int> labels;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const TrainExample& ex = *batch[b];
    if (ex.route != route) throw ConfigError("batch_loss: mixed routes in one batch");
    if (int(ex.conditions.size()) + 1 != want)
      throw ConfigError("batch_loss: route '" + s.inputs[route].name + "' takes " + std::to_string(want) +
                        " latents but example provides " + std::to_string(ex.conditions.size() + 1) +
                        " (input layer not converted for this task?)");
    const Latent<Scalar> z0 = ex.target.template cast<Scalar>();
    const Latent<Scalar> zt = add_noise(z0, eps[b], timesteps[b], sched);
    std::vector<Latent<Scalar>> conds;
    for (const auto& c : ex.conditions) conds.push_back(c.template cast<Scalar>());
    std::vector<const Latent<Scalar>*> parts;
    for (const auto& c : conds) parts.push_back(&c);
    parts.push_back(&zt);
    patchify_into(concat_channels<Scalar>(parts), ps, patches, Eigen::Index(b) * n);
    patchify_into(eps[b], ps, target_tokens, Eigen::Index(b) * n);
    labels.push_back(ex.label);
  }
  ForwardCache<Scalar> cache;
  ForwardResult<Scalar> fr = forward_tokens(p, patches, gh, gw, timesteps, labels, route, grad ? &cache : nullptr);
  if (eps_hat_override) {
    for (std::size_t b = 0; b < batch.size(); ++b) patchify_into(*(*eps_hat_override)[b], ps, fr.tokens, Eigen::Index(b) * n);
  }
  const Mat<Scalar> diff = fr.tokens - target_tokens;
  BatchLoss<Scalar> out;
  out.balance = fr.balance_loss;
  const double per_n = double(n) * s.patch_out();
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const double l = double(diff.middleRows(Eigen::Index(b) * n, n).squaredNorm()) / per_n;
    out.per_sample.push_back(l);
    out.loss += l;
  }
  out.loss /= double(batch.size());
  if (grad) {
    const Mat<Scalar> dout = diff * Scalar(2.0 / (per_n * double(batch.size())));
    backward_tokens(p, cache, dout, *grad);
  }
  return out;
}

template <typename Scalar>
double global_norm(const ModelParameters<Scalar>& g) {
  double sq = 0;
  g.visit([&](const std::string&, const Mat<Scalar>& m) { sq += double(m.squaredNorm()); });
  return std::sqrt(sq);
}

template <typename Scalar>
void adam_update(TrainState<Scalar>& st, const ModelParameters<Scalar>& grad, const TrainConfig& cfg, double lr, double scale) {
  st.adam_step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(st.adam_step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(st.adam_step));
  std::vector<Mat<Scalar>*> ps, ms, vs;
  std::vector<const Mat<Scalar>*> gs;
  st.params.visit([&](const std::string&, Mat<Scalar>& m) { ps.push_back(&m); });
  st.adam_m.visit([&](const std::string&, Mat<Scalar>& m) { ms.push_back(&m); });
  st.adam_v.visit([&](const std::string&, Mat<Scalar>& m) { vs.push_back(&m); });
  grad.visit([&](const std::string&, const Mat<Scalar>& m) { gs.push_back(&m); });
  const Scalar b1 = Scalar(cfg.beta1), b2 = Scalar(cfg.beta2);
  const Scalar step_size = Scalar(lr / bc1), sbc2 = Scalar(std::sqrt(bc2)), eps = Scalar(cfg.adam_eps), sc = Scalar(scale);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    auto g = (*gs[i]).array() * sc;
    ms[i]->array() = b1 * ms[i]->array() + (Scalar(1) - b1) * g;
    vs[i]->array() = b2 * vs[i]->array() + (Scalar(1) - b2) * g * g;
    ps[i]->array() -= step_size * ms[i]->array() / (vs[i]->array().sqrt() / sbc2 + eps);
  }
}

using RecordCallback = std::function<void(const RunRecord&)>;

/// Shared loop behind pretrain and finetune. Each step draws a batch of one
/// route (routes alternate across steps), timesteps uniform over 1..T and
/// standard-normal noise; only the target latent is noised.
template <typename Scalar>
std::vector<RunRecord> train_loop(TrainState<Scalar>& st, const std::vector<TrainExample>& data, const TrainConfig& cfg,
                                  const NoiseSchedule& sched, const RecordCallback& on_record = {}) {
  cfg.validate();
  if (data.empty()) throw ConfigError("train: empty dataset");
  const ModelSpec& s = st.params.spec;
  std::vector<std::vector<int>> by_route(s.inputs.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].route < 0 || data[i].route >= int(s.inputs.size())) throw ConfigError("train: example route out of range");
    by_route[data[i].route].push_back(int(i));
  }
  std::vector<int> active;
  for (std::size_t r = 0; r < by_route.size(); ++r)
    if (!by_route[r].empty()) active.push_back(int(r));
  const LatentShape tshape{data[0].target.height, data[0].target.width, data[0].target.channels};
  if (tshape.channels != s.latent_channels) throw ShapeError("train: target latent channels differ from model");
  if (tshape.height % s.patch_size != 0 || tshape.width % s.patch_size != 0)
    throw ConfigError("train: resolution must be divisible by codec factor times patch size " + std::to_string(s.patch_size));
  st.meter.macs_per_forward = count_macs(s, tokens_for(s, tshape.height, tshape.width), active[0]);
  // Resumed state: the meter is not checkpointed, rebuild it from the step count.
  if (st.meter.cumulative_train_macs == 0)
    for (long k = 0; k < st.step; ++k) {
      ComputeMeter m;
      m.macs_per_forward = count_macs(s, tokens_for(s, tshape.height, tshape.width), active[k % long(active.size())]);
      m.add_train_step(cfg.batch_size);
      st.meter.cumulative_train_macs += m.cumulative_train_macs;
    }

  std::vector<RunRecord> records;
  double interval_loss = 0;
  int interval_n = 0;
  std::vector<double> route_loss(s.inputs.size(), 0.0);
  std::vector<int> route_n(s.inputs.size(), 0);
  for (; st.step < cfg.steps; ++st.step) {
    Rng rng = step_rng(cfg.seed, st.step);
    const int route = active[st.step % long(active.size())];
    const auto& pool = by_route[route];
    std::uniform_int_distribution<int> pick(0, int(pool.size()) - 1);
    std::uniform_int_distribution<int> tdist(1, sched.timesteps());
    std::vector<const TrainExample*> batch;
    std::vector<int> ts;
    std::vector<Latent<Scalar>> eps;
    for (int b = 0; b < cfg.batch_size; ++b) {
      batch.push_back(&data[pool[pick(rng)]]);
      ts.push_back(tdist(rng));
      eps.push_back(normal_latent<Scalar>(tshape, rng));
    }
    ModelParameters<Scalar> grad = st.params.shape_like();
    const BatchLoss<Scalar> bl = batch_loss(st.params, batch, ts, eps, sched, &grad);
    const double lr = lr_at(cfg, st.step);
    if (!std::isfinite(bl.loss) || !std::isfinite(bl.balance)) {
      std::ostringstream os;
      os << "non-finite loss at step " << st.step << " (lr=" << lr << ", loss=" << bl.loss << ", balance=" << bl.balance << ")";
      throw TrainingError(os.str());
    }
    const double norm = global_norm(grad);
    const double scale = (cfg.grad_clip > 0 && norm > cfg.grad_clip) ? cfg.grad_clip / norm : 1.0;
    adam_update(st, grad, cfg, lr, scale);
    st.meter.macs_per_forward = count_macs(s, tokens_for(s, tshape.height, tshape.width), route);
    st.meter.add_train_step(cfg.batch_size);
    interval_loss += bl.loss;
    ++interval_n;
    route_loss[route] += bl.loss;
    ++route_n[route];
    if ((st.step + 1) % cfg.log_interval == 0 || st.step + 1 == cfg.steps) {
      RunRecord rec;
      rec.step = st.step + 1;
      rec.compute = double(st.meter.cumulative_train_macs);
      rec.train_loss = interval_loss / interval_n;
      rec.model_id = s.id;
      rec.batch_size = cfg.batch_size;
      if (active.size() > 1)
        for (int r : active)
          if (route_n[r] > 0) rec.metrics["loss." + s.inputs[r].name] = route_loss[r] / route_n[r];
      interval_loss = 0;
      interval_n = 0;
      std::fill(route_loss.begin(), route_loss.end(), 0.0);
      std::fill(route_n.begin(), route_n.end(), 0);
      if (on_record) on_record(rec);
      records.push_back(std::move(rec));
    }
  }
  return records;
}

template <typename Scalar>
std::vector<RunRecord> pretrain(TrainState<Scalar>& st, const std::vector<TrainExample>& data, const TrainConfig& cfg,
                                const NoiseSchedule& sched, const RecordCallback& on_record = {}) {
  for (const auto& ex : data)
    if (!ex.conditions.empty()) throw ConfigError("pretrain: class-conditional examples carry no condition latents");
  return train_loop(st, data, cfg, sched, on_record);
}

template <typename Scalar>
std::vector<RunRecord> finetune(TrainState<Scalar>& st, const std::vector<TrainExample>& data, const TrainConfig& cfg,
                                const NoiseSchedule& sched, const RecordCallback& on_record = {}) {
  for (const auto& ex : data) {
    const auto& routes = st.params.spec.inputs;
    if (ex.route < 0 || ex.route >= int(routes.size())) throw ConfigError("finetune: example route out of range");
    if (routes[ex.route].num_latents != int(ex.conditions.size()) + 1)
      throw ConfigError("finetune: input layer of route '" + routes[ex.route].name + "' takes " +
                        std::to_string(routes[ex.route].num_latents) + " latents but the task supplies " +
                        std::to_string(ex.conditions.size() + 1) + "; convert the input layer first");
  }
  return train_loop(st, data, cfg, sched, on_record);
}

}  // namespace percept
