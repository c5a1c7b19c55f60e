// SPDX-License-Identifier: Apache-2.0
#include "percept/diffusion.hpp"

#include <algorithm>
#include <numbers>

namespace percept {

ScheduleKind parse_schedule_kind(const std::string& name) {
  if (name == "linear") return ScheduleKind::linear;
  if (name == "scaled_linear" || name == "scaled-linear") return ScheduleKind::scaled_linear;
  if (name == "cosine") return ScheduleKind::cosine;
  throw ConfigError("unknown noise schedule '" + name + "' (expected linear, scaled_linear or cosine)");
}

std::string to_string(ScheduleKind kind) {
  switch (kind) {
    case ScheduleKind::linear: return "linear";
    case ScheduleKind::scaled_linear: return "scaled_linear";
    case ScheduleKind::cosine: return "cosine";
  }
  return "unknown";
}

NoiseSchedule::NoiseSchedule(ScheduleKind kind, int timesteps, std::vector<double> betas)
    : kind_(kind), timesteps_(timesteps), betas_(std::move(betas)) {
  if (timesteps_ < 1 || int(betas_.size()) != timesteps_) throw ConfigError("schedule: need T >= 1 betas");
  alpha_bars_.resize(betas_.size());
  double prod = 1.0;
  for (std::size_t i = 0; i < betas_.size(); ++i) {
    if (!(betas_[i] > 0.0 && betas_[i] < 1.0)) throw ConfigError("schedule: beta outside (0, 1)");
    prod *= 1.0 - betas_[i];
    alpha_bars_[i] = prod;
  }
}

NoiseSchedule make_schedule(ScheduleKind kind, int timesteps) {
  if (timesteps < 1) throw ConfigError("schedule: T must be >= 1");
  std::vector<double> betas(timesteps);
  const double denom = timesteps > 1 ? double(timesteps - 1) : 1.0;
  switch (kind) {
    case ScheduleKind::linear:
      for (int t = 1; t <= timesteps; ++t)
        betas[t - 1] = kLinearBetaStart + (t - 1) / denom * (kLinearBetaEnd - kLinearBetaStart);
      break;
    case ScheduleKind::scaled_linear: {
      const double a = std::sqrt(kScaledBetaStart), b = std::sqrt(kScaledBetaEnd);
      for (int t = 1; t <= timesteps; ++t) {
        const double r = a + (t - 1) / denom * (b - a);
        betas[t - 1] = r * r;
      }
      break;
    }
    case ScheduleKind::cosine: {
      const double s = kCosineOffset;
      auto f = [&](double t) {
        const double c = std::cos((t / timesteps + s) / (1.0 + s) * std::numbers::pi / 2.0);
        return c * c;
      };
      const double f0 = f(0.0);
      for (int t = 1; t <= timesteps; ++t) {
        const double beta = 1.0 - (f(t) / f0) / (f(t - 1) / f0);
        betas[t - 1] = std::clamp(beta, 1e-12, kCosineMaxBeta);
      }
      break;
    }
  }
  return NoiseSchedule(kind, timesteps, std::move(betas));
}

NoiseSchedule make_schedule(const std::string& kind, int timesteps) {
  return make_schedule(parse_schedule_kind(kind), timesteps);
}

std::vector<int> sampling_timesteps(int steps, int timesteps) {
  if (steps < 1 || steps > timesteps)
    throw ConfigError("sampling steps " + std::to_string(steps) + " outside [1, " + std::to_string(timesteps) + "]");
  std::vector<int> ts(steps);
  for (int j = 1; j <= steps; ++j) ts[j - 1] = int((long long)j * timesteps / steps);
  return ts;
}

}  // namespace percept
