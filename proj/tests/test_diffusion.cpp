// SPDX-License-Identifier: Apache-2.0
#include "percept/diffusion.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace percept;

namespace {

const ScheduleKind kKinds[] = {ScheduleKind::linear, ScheduleKind::scaled_linear, ScheduleKind::cosine};

// Knows the clean latent, so it returns the exact injected noise.
struct OracleDenoiser {
  const NoiseSchedule* sched;
  Latent<double> z0;
  int input_channels() const { return z0.channels; }
  Latent<double> operator()(const Latent<double>& x, int t) const {
    const double ab = sched->alpha_bar(t);
    Latent<double> eps = x;
    eps.values = (x.values - std::sqrt(ab) * z0.values) / std::sqrt(1.0 - ab);
    return eps;
  }
};

// Fixed linear response, used where only the update arithmetic matters.
struct LinearDenoiser {
  int channels = 3;
  double gain = 0.3;
  int input_channels() const { return channels; }
  LatentTensor operator()(const LatentTensor& x, int t) const {
    LatentTensor out(x.height, x.width, 3);
    for (int y = 0; y < x.height; ++y)
      for (int xx = 0; xx < x.width; ++xx)
        for (int c = 0; c < 3; ++c) out.at(y, xx, c) = float(gain * x.at(y, xx, x.channels - 3 + c) + 1e-4 * t);
    return out;
  }
};

}  // namespace

TEST(Schedule, LinearFirstStep) {
  const NoiseSchedule s = make_schedule(ScheduleKind::linear, 1000);
  EXPECT_DOUBLE_EQ(s.beta(1), 1e-4);
  EXPECT_NEAR(s.alpha_bar(1), 0.9999, 1e-15);
  EXPECT_NEAR(s.beta(1000), 0.02, 1e-15);
}

TEST(Schedule, ScaledLinearSpotChecks) {
  const int T = 1000;
  const NoiseSchedule s = make_schedule("scaled_linear", T);
  for (int t : {1, 500, 1000}) {
    const double root = std::sqrt(0.00085) + double(t - 1) / (T - 1) * (std::sqrt(0.012) - std::sqrt(0.00085));
    EXPECT_NEAR(s.beta(t), root * root, 1e-15) << "t=" << t;
  }
}

TEST(Schedule, CosineStartsAtOne) {
  for (int T : {10, 1000}) {
    const NoiseSchedule s = make_schedule(ScheduleKind::cosine, T);
    EXPECT_EQ(s.alpha_bar(0), 1.0);
    auto f = [&](double t) { return std::pow(std::cos((t / T + 0.008) / 1.008 * M_PI / 2), 2); };
    EXPECT_NEAR(s.alpha_bar(1), f(1) / f(0), 1e-12);
  }
}

TEST(Schedule, Invariants) {
  for (ScheduleKind k : kKinds)
    for (int T : {1, 2, 50, 1000}) {
      const NoiseSchedule s = make_schedule(k, T);
      double prod = 1.0;
      for (int t = 1; t <= T; ++t) {
        EXPECT_GT(s.beta(t), 0.0);
        EXPECT_LT(s.beta(t), 1.0);
        prod *= 1.0 - s.beta(t);
        EXPECT_NEAR(s.alpha_bar(t), prod, 1e-12);
        if (t > 1) {
          EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
          EXPECT_LT(s.snr(t), s.snr(t - 1));
        }
      }
    }
}

TEST(Schedule, Errors) {
  EXPECT_THROW(make_schedule("quadratic", 1000), ConfigError);
  EXPECT_THROW(make_schedule(ScheduleKind::linear, 0), ConfigError);
  EXPECT_EQ(parse_schedule_kind(to_string(ScheduleKind::scaled_linear)), ScheduleKind::scaled_linear);
}

TEST(AddNoise, MatchesElementwise) {
  const NoiseSchedule s = make_schedule(ScheduleKind::cosine, 1000);
  Rng rng(5);
  const LatentShape shape{4, 4, 3};
  const Latent<double> z0 = normal_latent<double>(shape, rng), eps = normal_latent<double>(shape, rng);
  for (int t : {1, 321, 1000}) {
    const Latent<double> zt = add_noise(z0, eps, t, s);
    const double ab = s.alpha_bar(t);
    for (Eigen::Index i = 0; i < zt.values.size(); ++i)
      EXPECT_DOUBLE_EQ(zt.values[i], std::sqrt(ab) * z0.values[i] + std::sqrt(1 - ab) * eps.values[i]);
  }
}

TEST(AddNoise, ZeroNoiseAndPureNoise) {
  const NoiseSchedule s = make_schedule(ScheduleKind::linear, 1000);
  Rng rng(6);
  const LatentShape shape{2, 3, 4};
  const Latent<double> z0 = normal_latent<double>(shape, rng), eps = normal_latent<double>(shape, rng);
  const Latent<double> zeros(2, 3, 4);
  EXPECT_LE((add_noise(z0, zeros, 400, s).values - std::sqrt(s.alpha_bar(400)) * z0.values).cwiseAbs().maxCoeff(), 1e-15);
  const double bound = std::sqrt(s.alpha_bar(1000)) * z0.values.cwiseAbs().maxCoeff();
  EXPECT_LE((add_noise(z0, eps, 1000, s).values - eps.values).cwiseAbs().maxCoeff(), bound + 1e-4);
}

TEST(AddNoise, Errors) {
  const NoiseSchedule s = make_schedule(ScheduleKind::linear, 10);
  EXPECT_THROW(add_noise(Latent<double>(2, 2, 1), Latent<double>(2, 2, 2), 1, s), ShapeError);
  EXPECT_THROW(add_noise(Latent<double>(2, 2, 1), Latent<double>(2, 2, 1), 0, s), ConfigError);
  EXPECT_THROW(add_noise(Latent<double>(2, 2, 1), Latent<double>(2, 2, 1), 11, s), ConfigError);
}

TEST(AddNoise, MomentCheck) {
  const int T = 1000, n = 100000;
  for (ScheduleKind k : kKinds) {
    const NoiseSchedule s = make_schedule(k, T);
    for (int t : {1, T / 2, T}) {
      Rng rng(17 + t);
      const LatentShape shape{1, 1, n};
      const Latent<double> z0 = normal_latent<double>(shape, rng), eps = normal_latent<double>(shape, rng);
      const Eigen::ArrayXd zt = add_noise(z0, eps, t, s).values.array();
      const double var0 = (z0.values.array() - z0.values.mean()).square().sum() / (n - 1);
      const double expected = s.alpha_bar(t) * var0 + (1 - s.alpha_bar(t));
      const double var = (zt - zt.mean()).square().sum() / (n - 1);
      const double se = expected * std::sqrt(2.0 / (n - 1));
      EXPECT_LE(std::abs(var - expected), 3 * se) << to_string(k) << " t=" << t;
    }
  }
}

TEST(Loss, Examples) {
  Rng rng(8);
  const LatentShape shape{3, 3, 2};
  const Latent<double> eps = normal_latent<double>(shape, rng);
  EXPECT_EQ(training_loss(eps, eps), 0.0);
  Latent<double> shifted = eps;
  shifted.values.array() += 0.25;
  EXPECT_NEAR(training_loss(eps, shifted), 0.0625, 1e-15);

  Latent<double> a(1, 1, 2), b(1, 1, 2), c(1, 1, 2), d(1, 1, 2);
  b.values << 1.0, 0.0;          // mean 0.5
  d.values << 1.0, std::sqrt(2.0);  // mean 1.5
  EXPECT_NEAR(training_loss(std::vector{a, c}, std::vector{b, d}), 1.0, 1e-15);
  EXPECT_THROW(training_loss(a, Latent<double>(1, 1, 3)), ShapeError);
  EXPECT_THROW(training_loss(std::vector{a}, std::vector{b, d}), ShapeError);
}

TEST(Sampler, Timesteps) {
  EXPECT_EQ(sampling_timesteps(1, 1000), std::vector<int>{1000});
  EXPECT_EQ(sampling_timesteps(4, 1000), (std::vector<int>{250, 500, 750, 1000}));
  for (int steps : {1, 2, 5, 10, 20, 50, 100}) {
    const auto ts = sampling_timesteps(steps, 1000);
    ASSERT_EQ(int(ts.size()), steps);
    EXPECT_EQ(ts.back(), 1000);
    for (std::size_t i = 1; i < ts.size(); ++i) EXPECT_GT(ts[i], ts[i - 1]);
  }
  const auto all = sampling_timesteps(7, 7);
  EXPECT_EQ(all, (std::vector<int>{1, 2, 3, 4, 5, 6, 7}));
}

TEST(Sampler, StepSweepAccepted) {
  const NoiseSchedule s = make_schedule(ScheduleKind::linear, 100);
  LinearDenoiser m;
  for (int steps : {1, 2, 5, 10, 20, 50, 100})
    EXPECT_NO_THROW(sample(m, std::vector<LatentTensor>{}, LatentShape{2, 2, 3}, SamplerConfig{steps, 0.0, &s, 1}));
  EXPECT_THROW(sample(m, std::vector<LatentTensor>{}, LatentShape{2, 2, 3}, SamplerConfig{101, 0.0, &s, 1}), ConfigError);
  EXPECT_THROW(sample(m, std::vector<LatentTensor>{}, LatentShape{2, 2, 3}, SamplerConfig{0, 0.0, &s, 1}), ConfigError);
}

TEST(Sampler, Deterministic) {
  const NoiseSchedule s = make_schedule(ScheduleKind::cosine, 1000);
  LinearDenoiser m{6};
  Rng rng(1);
  const std::vector<LatentTensor> cond{normal_latent<float>({4, 4, 3}, rng)};
  const SamplerConfig cfg{20, 0.0, &s, 42};
  const LatentTensor a = sample(m, cond, {4, 4, 3}, cfg), b = sample(m, cond, {4, 4, 3}, cfg);
  EXPECT_EQ(a.values, b.values);
  const LatentTensor c = sample(m, cond, {4, 4, 3}, SamplerConfig{20, 0.0, &s, 43});
  EXPECT_NE(a.values, c.values);
}

TEST(Sampler, ChannelMismatch) {
  const NoiseSchedule s = make_schedule(ScheduleKind::linear, 10);
  LinearDenoiser m{3};
  Rng rng(1);
  const std::vector<LatentTensor> cond{normal_latent<float>({2, 2, 3}, rng)};
  EXPECT_THROW(sample(m, cond, {2, 2, 3}, SamplerConfig{1, 0.0, &s, 0}), ShapeError);
}

TEST(Sampler, SingleStepClosedForm) {
  const NoiseSchedule s = make_schedule(ScheduleKind::linear, 1000);
  LinearDenoiser m;
  const LatentShape shape{2, 2, 3};
  const LatentTensor out = sample(m, std::vector<LatentTensor>{}, shape, SamplerConfig{1, 0.0, &s, 9});
  Rng rng(9);
  const LatentTensor x = normal_latent<float>(shape, rng);
  const double ab = s.alpha_bar(1000);
  for (Eigen::Index i = 0; i < x.values.size(); ++i) {
    const double eps = float(0.3 * x.values[i] + 1e-4 * 1000);
    const double x0 = (x.values[i] - std::sqrt(1 - ab) * eps) / std::sqrt(ab);
    EXPECT_NEAR(out.values[i], x0, 1e-4 * std::max(1.0, std::abs(x0)));
  }
}

TEST(Sampler, PerfectDenoiserRecoversSignal) {
  for (ScheduleKind k : kKinds) {
    const NoiseSchedule s = make_schedule(k, 1000);
    Latent<double> z0(1, 1, 1);
    z0.values << 0.7;
    OracleDenoiser m{&s, z0};
    const Latent<double> out = sample(m, std::vector<Latent<double>>{}, {1, 1, 1}, SamplerConfig{1000, 0.0, &s, 3});
    EXPECT_NEAR(out.values[0], 0.7, 1e-5) << to_string(k);
    const Latent<double> few = sample(m, std::vector<Latent<double>>{}, {1, 1, 1}, SamplerConfig{7, 0.0, &s, 3});
    EXPECT_NEAR(few.values[0], 0.7, 1e-5) << to_string(k);
  }
}
