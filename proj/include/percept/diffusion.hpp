// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "percept/tensor.hpp"

#include <cmath>
#include <concepts>
#include <string>
#include <vector>

namespace percept {

enum class ScheduleKind { linear, scaled_linear, cosine };

ScheduleKind parse_schedule_kind(const std::string& name);
std::string to_string(ScheduleKind kind);

/// Per-timestep variances beta_t and cumulative products alpha_bar_t, t = 1..T.
class NoiseSchedule {
 public:
  NoiseSchedule(ScheduleKind kind, int timesteps, std::vector<double> betas);

  ScheduleKind kind() const { return kind_; }
  int timesteps() const { return timesteps_; }
  double beta(int t) const { return betas_.at(t - 1); }
  /// alpha_bar(0) is 1 by convention (clean signal).
  double alpha_bar(int t) const { return t == 0 ? 1.0 : alpha_bars_.at(t - 1); }
  double snr(int t) const { return alpha_bar(t) / (1.0 - alpha_bar(t)); }
  const std::vector<double>& betas() const { return betas_; }
  const std::vector<double>& alpha_bars() const { return alpha_bars_; }

 private:
  ScheduleKind kind_;
  int timesteps_;
  std::vector<double> betas_;
  std::vector<double> alpha_bars_;
};

inline constexpr double kLinearBetaStart = 1e-4;
inline constexpr double kLinearBetaEnd = 0.02;
inline constexpr double kScaledBetaStart = 0.00085;
inline constexpr double kScaledBetaEnd = 0.012;
inline constexpr double kCosineOffset = 0.008;
inline constexpr double kCosineMaxBeta = 0.999;

NoiseSchedule make_schedule(ScheduleKind kind, int timesteps);
NoiseSchedule make_schedule(const std::string& kind, int timesteps);

/// sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps
template <typename Scalar>
Latent<Scalar> add_noise(const Latent<Scalar>& z0, const Latent<Scalar>& eps, int t, const NoiseSchedule& sched) {
  if (!z0.same_shape(eps))
    throw ShapeError("add_noise: z0 " + shape_string(z0.height, z0.width, z0.channels) + " vs eps " +
                     shape_string(eps.height, eps.width, eps.channels));
  if (t < 1 || t > sched.timesteps())
    throw ConfigError("add_noise: timestep " + std::to_string(t) + " outside [1, " + std::to_string(sched.timesteps()) + "]");
  const double ab = sched.alpha_bar(t);
  Latent<Scalar> out = z0;
  out.values = Scalar(std::sqrt(ab)) * z0.values + Scalar(std::sqrt(1.0 - ab)) * eps.values;
  return out;
}

/// Mean squared error between injected and predicted noise, averaged over
/// every element of one sample.
template <typename Scalar>
Scalar training_loss(const Latent<Scalar>& eps, const Latent<Scalar>& eps_hat) {
  if (!eps.same_shape(eps_hat)) throw ShapeError("training_loss: shape mismatch");
  return (eps.values - eps_hat.values).squaredNorm() / Scalar(eps.size());
}

/// Batch form: (1/n) sum_i mean((eps_i - eps_hat_i)^2).
template <typename Scalar>
Scalar training_loss(const std::vector<Latent<Scalar>>& eps, const std::vector<Latent<Scalar>>& eps_hat) {
  if (eps.size() != eps_hat.size() || eps.empty()) throw ShapeError("training_loss: batch size mismatch");
  Scalar total = 0;
  for (std::size_t i = 0; i < eps.size(); ++i) total += training_loss(eps[i], eps_hat[i]);
  return total / Scalar(eps.size());
}

struct SamplerConfig {
  int steps = 50;
  double eta = 0.0;
  const NoiseSchedule* schedule = nullptr;
  std::uint64_t seed = 0;
};

/// The denoising timesteps in increasing order: (j*T)/steps for j = 1..steps.
std::vector<int> sampling_timesteps(int steps, int timesteps);

/// Anything that maps a (condition ++ noisy target) latent at timestep t to
/// a noise estimate with the target's channel count.
template <typename M, typename Scalar>
concept Denoiser = requires(const M& m, const Latent<Scalar>& z, int t) {
  { m.input_channels() } -> std::convertible_to<int>;
  { m(z, t) } -> std::convertible_to<Latent<Scalar>>;
};

/// DDIM sampling from a seeded standard-normal target latent. Condition
/// latents are concatenated in front of the running sample at every step.
template <typename Scalar, Denoiser<Scalar> Model>
Latent<Scalar> sample(const Model& model, const std::vector<Latent<Scalar>>& conditions, const LatentShape& target,
                      const SamplerConfig& cfg) {
  if (cfg.schedule == nullptr) throw ConfigError("sample: no noise schedule");
  const NoiseSchedule& sched = *cfg.schedule;
  if (cfg.steps < 1 || cfg.steps > sched.timesteps())
    throw ConfigError("sample: steps " + std::to_string(cfg.steps) + " outside [1, " + std::to_string(sched.timesteps()) + "]");
  int in_channels = target.channels;
  for (const auto& c : conditions) {
    if (c.height != target.height || c.width != target.width) throw ShapeError("sample: condition spatial size mismatch");
    in_channels += c.channels;
  }
  if (in_channels != model.input_channels())
    throw ShapeError("sample: model expects " + std::to_string(model.input_channels()) + " input channels, got " +
                     std::to_string(in_channels));

  Rng rng(cfg.seed);
  Latent<Scalar> x = normal_latent<Scalar>(target, rng);
  std::vector<const Latent<Scalar>*> parts;
  for (const auto& c : conditions) parts.push_back(&c);
  parts.push_back(&x);

  const std::vector<int> ts = sampling_timesteps(cfg.steps, sched.timesteps());
  for (int j = int(ts.size()) - 1; j >= 0; --j) {
    const int t = ts[j];
    const int t_prev = j > 0 ? ts[j - 1] : 0;
    const double ab = sched.alpha_bar(t);
    const double ab_prev = sched.alpha_bar(t_prev);
    const Latent<Scalar> input = conditions.empty() ? x : concat_channels<Scalar>(parts);
    const Latent<Scalar> eps_hat = model(input, t);
    if (!eps_hat.same_shape(x)) throw ShapeError("sample: model output shape differs from target latent");
    const Vec<Scalar> x0_hat = (x.values - Scalar(std::sqrt(1.0 - ab)) * eps_hat.values) / Scalar(std::sqrt(ab));
    double sigma = 0.0;
    if (cfg.eta > 0.0 && t_prev > 0)
      sigma = cfg.eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_prev);
    const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
    x.values = Scalar(std::sqrt(ab_prev)) * x0_hat + Scalar(dir) * eps_hat.values;
    if (sigma > 0.0) {
      Vec<Scalar> z(x.size());
      fill_normal(z, rng);
      x.values += Scalar(sigma) * z;
    }
  }
  return x;
}

}  // namespace percept
