// SPDX-License-Identifier: Apache-2.0
#pragma once

// Test-time compute scaling: multi-sample prediction, per-pixel median
// ensembling and affine-invariant median compilation.

#include "percept/diffusion.hpp"
#include "percept/dit.hpp"
#include "percept/latent_codec.hpp"
#include "percept/metrics.hpp"
#include "percept/tasks_data.hpp"
#include "percept/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace percept {

enum class EnsembleMode { naive, median_compilation };

EnsembleMode parse_ensemble_mode(const std::string& name);
std::string to_string(EnsembleMode mode);

struct EnsembleConfig {
  int n = 1;
  EnsembleMode mode = EnsembleMode::naive;
  int iters = 10;
  double tol = 1e-4;
  std::uint64_t seed = 0;

  void validate() const {
    if (n < 1) throw ConfigError("ensemble: N must be >= 1");
    if (mode == EnsembleMode::median_compilation && iters < 1) throw ConfigError("ensemble: iters must be >= 1 for median compilation");
    if (!(tol >= 0)) throw ConfigError("ensemble: tol must be >= 0");
  }
};

template <typename Scalar>
using Plane = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

namespace detail {

template <typename Scalar>
void check_members(const std::vector<Plane<Scalar>>& preds, const char* what) {
  if (preds.empty()) throw ShapeError(std::string(what) + ": no members");
  for (std::size_t i = 1; i < preds.size(); ++i)
    if (preds[i].rows() != preds[0].rows() || preds[i].cols() != preds[0].cols())
      throw ShapeError(std::string(what) + ": member " + std::to_string(i) + " shape differs from member 0");
}

}  // namespace detail

/// Per-pixel median; even N takes the lower of the two middle values.
template <typename Scalar>
Plane<Scalar> ensemble_naive(const std::vector<Plane<Scalar>>& preds) {
  detail::check_members(preds, "ensemble_naive");
  const std::size_t n = preds.size();
  Plane<Scalar> out(preds[0].rows(), preds[0].cols());
  std::vector<Scalar> v(n);
  const std::size_t mid = (n - 1) / 2;
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    for (std::size_t k = 0; k < n; ++k) v[k] = preds[k](i);
    std::nth_element(v.begin(), v.begin() + std::ptrdiff_t(mid), v.end());
    out(i) = v[mid];
  }
  return out;
}

template <typename Scalar>
struct EnsembleResult {
  Plane<Scalar> merged;
  std::vector<double> scales, shifts;
  /// Objective after initialization and after each accepted update.
  std::vector<double> objective;
};

/// Sum over member pairs of mean((s_i d_i + t_i - s_j d_j - t_j)^2).
template <typename Scalar>
double pairwise_objective(const std::vector<Plane<Scalar>>& preds, const std::vector<double>& s, const std::vector<double>& t) {
  double j = 0;
  for (std::size_t a = 0; a < preds.size(); ++a)
    for (std::size_t b = a + 1; b < preds.size(); ++b)
      j += ((preds[a].template cast<double>() * s[a] + t[a]) - (preds[b].template cast<double>() * s[b] + t[b])).square().mean();
  return j;
}

/// Alternates a per-pixel median merge with per-member least-squares
/// (scale, shift) fits to the merge. The gauge is fixed by mean(scale) = 1
/// and mean(shift) = 0. A step that would raise the pairwise objective is
/// halved toward the current estimate until it does not; if none of the
/// shortened steps help, iteration stops.
template <typename Scalar>
EnsembleResult<Scalar> median_compile(const std::vector<Plane<Scalar>>& preds, const EnsembleConfig& cfg) {
  detail::check_members(preds, "median_compile");
  if (cfg.iters < 1) throw ConfigError("median_compile: iters must be >= 1");
  const std::size_t n = preds.size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto d = preds[i].template cast<double>();
    const double m = d.mean();
    const double var = (d - m).square().mean();
    if (!(var > 1e-24 * std::max(1.0, m * m)))
      throw DegenerateError("median_compile: member " + std::to_string(i) + " is constant (degenerate scale)");
  }
  EnsembleResult<Scalar> r;
  r.scales.assign(n, 1.0);
  r.shifts.assign(n, 0.0);
  auto merge = [&](const std::vector<double>& s, const std::vector<double>& t) {
    std::vector<Plane<Scalar>> aligned;
    aligned.reserve(n);
    for (std::size_t i = 0; i < n; ++i) aligned.push_back((preds[i].template cast<double>() * s[i] + t[i]).template cast<Scalar>());
    return ensemble_naive(aligned);
  };
  double cur = pairwise_objective(preds, r.scales, r.shifts);
  r.objective.push_back(cur);
  for (int it = 0; it < cfg.iters && n > 1 && cur > 0; ++it) {
    const Plane<Scalar> m = merge(r.scales, r.shifts);
    std::vector<double> cs(n), ct(n);
    for (std::size_t i = 0; i < n; ++i) {
      const Affine a = align_affine(preds[i], m);
      cs[i] = a.scale;
      ct[i] = a.shift;
    }
    double ms = 0, mt = 0;
    for (std::size_t i = 0; i < n; ++i) ms += cs[i] / double(n);
    if (!(std::abs(ms) > 1e-12)) break;
    for (std::size_t i = 0; i < n; ++i) mt += ct[i] / double(n);
    for (std::size_t i = 0; i < n; ++i) {
      cs[i] /= ms;
      ct[i] = (ct[i] - mt) / ms;
    }
    bool accepted = false;
    double lambda = 1.0, next = cur;
    std::vector<double> ts(n), tt(n);
    for (int half = 0; half < 12 && !accepted; ++half, lambda *= 0.5) {
      for (std::size_t i = 0; i < n; ++i) {
        ts[i] = r.scales[i] + lambda * (cs[i] - r.scales[i]);
        tt[i] = r.shifts[i] + lambda * (ct[i] - r.shifts[i]);
      }
      next = pairwise_objective(preds, ts, tt);
      accepted = next <= cur;
    }
    if (!accepted) break;
    r.scales = ts;
    r.shifts = tt;
    const double prev = cur;
    cur = next;
    r.objective.push_back(cur);
    if (prev - cur < cfg.tol * std::max(prev, std::numeric_limits<double>::min())) break;
  }
  r.merged = n == 1 ? preds[0] : merge(r.scales, r.shifts);
  return r;
}

/// Seed of ensemble member i.
inline std::uint64_t member_seed(std::uint64_t base, int i) {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ull * std::uint64_t(i);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

struct InferenceConfig {
  int steps = 50;
  EnsembleConfig ensemble;
  const NoiseSchedule* schedule = nullptr;
  double eta = 0.0;
};

/// Named preset: 200 steps, 5 members merged by median compilation, cosine
/// schedule.
struct Preset {
  int steps = 200;
  int ensemble = 5;
  EnsembleMode mode = EnsembleMode::median_compilation;
  ScheduleKind schedule = ScheduleKind::cosine;
};
Preset preset_by_name(const std::string& name);

struct InferenceCost {
  std::uint64_t macs_per_forward = 0;
  std::uint64_t denoise = 0;  // N * steps * macs_per_forward
  std::uint64_t encode = 0;   // condition images, once
  std::uint64_t decode = 0;   // one per member
  std::uint64_t merge = 0;    // upper bound on merge/alignment arithmetic
  std::uint64_t total() const { return denoise + encode + decode + merge; }
};

struct Prediction {
  Task task = Task::depth;
  TargetMap merged;                  // decoded prediction in target units
  std::vector<TargetMap> members;
  std::vector<double> objective;     // median compilation trace (depth only)
  std::vector<double> scales, shifts;
  InferenceCost cost;
};

template <typename Scalar>
std::vector<Latent<Scalar>> condition_latents(const PerceptionSample& s, const CodecSpec& codec) {
  std::vector<Latent<Scalar>> out;
  for (const ImageTensor& img : condition_images(s)) out.push_back(encode(img.cast<Scalar>(), codec));
  return out;
}

/// Draws N seeded samples, decodes each, merges them per the ensemble mode.
/// Median compilation applies only to depth; other tasks fall back to the
/// per-pixel median.
template <typename Scalar>
Prediction predict_scaled(const ModelParameters<Scalar>& params, const std::vector<Latent<Scalar>>& conditions, Task task,
                          const CodecSpec& codec, const InferenceConfig& cfg, const EncodeOptions& enc = {}) {
  cfg.ensemble.validate();
  if (conditions.empty()) throw ConfigError("predict_scaled: no condition latents");
  if (cfg.schedule == nullptr) throw ConfigError("predict_scaled: no noise schedule");
  const ModelSpec& spec = params.spec;
  const int route = route_patch_embed(params, to_string(task));
  DiTDenoiser<Scalar> model{&params, route, task_id(task)};
  const LatentShape shape{conditions[0].height, conditions[0].width, spec.latent_channels};
  Prediction out;
  out.task = task;
  const int n = cfg.ensemble.n;
  for (int i = 0; i < n; ++i) {
    SamplerConfig sc{cfg.steps, cfg.eta, cfg.schedule, member_seed(cfg.ensemble.seed, i)};
    const Latent<Scalar> z = sample(model, conditions, shape, sc);
    out.members.push_back(decode_target(task, decode(z, codec).template cast<float>(), enc));
  }
  const int h = shape.height * codec.factor, w = shape.width * codec.factor;
  InferenceCost& cost = out.cost;
  cost.macs_per_forward = count_macs(spec, tokens_for(spec, shape.height, shape.width), route);
  cost.denoise = std::uint64_t(n) * std::uint64_t(cfg.steps) * cost.macs_per_forward;
  cost.encode = std::uint64_t(conditions.size()) * codec_macs(codec, h, w);
  cost.decode = std::uint64_t(n) * codec_macs(codec, h, w);

  out.merged.task = task;
  const std::size_t planes = out.members[0].planes.size();
  const std::uint64_t pix = std::uint64_t(h) * std::uint64_t(w);
  for (std::size_t p = 0; p < planes; ++p) {
    std::vector<Plane<float>> ms;
    for (const auto& m : out.members) ms.push_back(m.planes[p]);
    if (task == Task::depth && cfg.ensemble.mode == EnsembleMode::median_compilation && n > 1) {
      EnsembleResult<float> r = median_compile(ms, cfg.ensemble);
      out.merged.planes.push_back(r.merged);
      out.objective = r.objective;
      out.scales = r.scales;
      out.shifts = r.shifts;
      // Each iteration: N-member median, N fits, up to 12 objective passes of N^2 pairs.
      cost.merge += std::uint64_t(cfg.ensemble.iters) * pix * std::uint64_t(n) * (2 + 12 * std::uint64_t(n));
    } else {
      out.merged.planes.push_back(ensemble_naive(ms));
      cost.merge += pix * std::uint64_t(n);
    }
  }
  return out;
}

}  // namespace percept
