// SPDX-License-Identifier: Apache-2.0
#include "oracles.hpp"

#include "percept/dit.hpp"
#include "percept/train.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace percept;

namespace {

ModelSpec toy_spec(int dim = 32, int layers = 2, int heads = 4) {
  ModelSpec s;
  s.id = "toy";
  s.hidden_dim = dim;
  s.num_layers = layers;
  s.num_heads = heads;
  s.latent_channels = 12;
  s.num_classes = 10;
  return s;
}

Latent<double> random_latent(int side, int channels, Rng& rng) { return normal_latent<double>({side, side, channels}, rng); }

double max_abs_diff(const Latent<double>& a, const Latent<double>& b) { return (a.values - b.values).cwiseAbs().maxCoeff(); }

}  // namespace

TEST(ParamCount, FullScaleFirstRung) {
  const std::size_t n = parameter_count(dense_ladder("a1"));
  EXPECT_NEAR(double(n) / 14.8e6, 1.0, 0.02) << n;
}

TEST(ParamCount, ClosedFormMatchesSchemaForEveryRung) {
  for (const char* name : {"a1", "a2", "a3", "a4", "a5", "a6"}) {
    const ModelSpec s = dense_ladder(name);
    EXPECT_EQ(parameter_count(s), oracle::hand_parameter_count(s.hidden_dim, s.num_layers, 2, 1, 4, 1000)) << name;
  }
  for (const char* name : {"b1", "b2", "b3", "b4"}) {
    const ModelSpec s = toy_ladder(name);
    EXPECT_EQ(parameter_count(s), oracle::hand_parameter_count(s.hidden_dim, s.num_layers, 2, 1, 12, 10)) << name;
    EXPECT_EQ(build_model<float>(s, 1).param_count(), parameter_count(s)) << name;
  }
  for (const char* name : {"a1", "a2"}) {
    const ModelSpec s = dense_ladder(name);
    EXPECT_EQ(allocate_model<float>(s).param_count(), parameter_count(s)) << name;
  }
}

TEST(ParamCount, ToyHandCount) {
  const ModelSpec s = toy_spec();
  // Worked by hand: d=32, h=128, patch_in=patch_out=48, freq=256.
  const std::size_t expected = (48 * 32 + 32) + (256 * 32 + 32 + 32 * 32 + 32) + 10 * 32 +
                               2 * ((32 * 96 + 96) + (32 * 32 + 32) + (32 * 192 + 192) + (32 * 128 + 128) + (128 * 32 + 32)) +
                               (32 * 64 + 64) + (32 * 48 + 48);
  EXPECT_EQ(parameter_count(s), expected);
  EXPECT_EQ(build_model<float>(s, 0).param_count(), expected);
}

TEST(ParamCount, MoeSchema) {
  for (const char* name : {"S/2-8E2A", "S/2-16E2A"}) {
    const ModelSpec s = moe_config(name);
    EXPECT_EQ(parameter_count(s),
              oracle::hand_parameter_count(s.hidden_dim, s.num_layers, 2, 1, 4, 1000, 256, 4, s.moe->num_experts, s.moe->shared_experts));
  }
}

TEST(Build, ValidationAndDeterminism) {
  ModelSpec bad = toy_spec(36, 1, 5);
  EXPECT_THROW(build_model<float>(bad, 0), ConfigError);
  const auto a = build_model<float>(toy_spec(), 3), b = build_model<float>(toy_spec(), 3), c = build_model<float>(toy_spec(), 4);
  std::vector<Mat<float>> ta, tb, tc;
  a.visit([&](const std::string&, const Mat<float>& m) { ta.push_back(m); });
  b.visit([&](const std::string&, const Mat<float>& m) { tb.push_back(m); });
  c.visit([&](const std::string&, const Mat<float>& m) { tc.push_back(m); });
  EXPECT_EQ(ta, tb);
  EXPECT_NE(ta, tc);
}

TEST(Build, TensorNamesUnique) {
  ModelSpec s = toy_spec();
  s.moe = MoESpec{4, 2, 1, 0.01};
  std::set<std::string> names;
  std::size_t count = 0;
  build_model<float>(s, 0).visit([&](const std::string& n, const Mat<float>& m) {
    names.insert(n);
    ++count;
    EXPECT_TRUE(m.allFinite());
  });
  EXPECT_EQ(names.size(), count);
  EXPECT_TRUE(names.count("blocks.1.mlp.experts.3.fc2.weight"));
  EXPECT_TRUE(names.count("patch_embed.image.weight"));
}

TEST(Forward, ShapeContract) {
  auto p = build_model<double>(toy_spec(), 1);
  oracle::randomize(p, 0.05, 2);
  Rng rng(3);
  for (int side : {2, 4, 8}) {
    const Latent<double> out = forward(p, random_latent(side, 12, rng), 500, 3);
    EXPECT_EQ(out.height, side);
    EXPECT_EQ(out.width, side);
    EXPECT_EQ(out.channels, 12);
  }
  const auto conv = convert_input_layer(p, 3);
  const Latent<double> out = forward(conv, random_latent(4, 36, rng), 2, 0);
  EXPECT_EQ(out.channels, 12);
  EXPECT_THROW(forward(p, random_latent(4, 24, rng), 1, 0), ShapeError);
  EXPECT_THROW(forward(p, random_latent(4, 12, rng), 1, 10), ConfigError);
}

TEST(Forward, Deterministic) {
  auto p = build_model<double>(toy_spec(), 1);
  oracle::randomize(p, 0.05, 5);
  Rng rng(6);
  const auto z = random_latent(4, 12, rng);
  EXPECT_EQ(forward(p, z, 10, 1).values, forward(p, z, 10, 1).values);
}

TEST(Forward, ZeroModulationBlocksAreIdentity) {
  // One-block model with random weights everywhere except the block modulation.
  auto full = build_model<double>(toy_spec(32, 1, 4), 7);
  oracle::randomize(full, 0.05, 8);
  full.blocks[0].mod.weight.setZero();
  full.blocks[0].mod.bias.setZero();
  ModelParameters<double> bare = full;
  bare.spec.num_layers = 0;
  bare.blocks.clear();
  Rng rng(9);
  for (int i = 0; i < 5; ++i) {
    const auto z = random_latent(4, 12, rng);
    const auto a = forward(full, z, 100 + i, i), b = forward(bare, z, 100 + i, i);
    EXPECT_GT(a.values.cwiseAbs().maxCoeff(), 1e-3);
    EXPECT_LE(max_abs_diff(a, b), 1e-12);
  }
  // Freshly built models predict exactly zero noise.
  const auto fresh = build_model<double>(toy_spec(), 1);
  EXPECT_EQ(forward(fresh, random_latent(4, 12, rng), 5, 0).values.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Gradient, FiniteDifferenceToyModel) {
  auto p = build_model<double>(toy_ladder("b1"), 11);
  oracle::randomize(p, 0.1, 12);
  const NoiseSchedule sched = make_schedule(ScheduleKind::linear, 1000);
  const auto ex = oracle::random_batch(p.spec, 2, 4, 13);
  const auto r = oracle::finite_difference_check(p, ex, sched, 20, 14);
  EXPECT_EQ(r.checked, 20);
  EXPECT_LE(r.max_rel_err, 1e-4);
}

TEST(Gradient, FiniteDifferenceRoutedModel) {
  auto base = build_model<double>(toy_spec(16, 1, 2), 11);
  auto p = make_routed(base, {{"depth", 2}, {"amodal", 3}});
  oracle::randomize(p, 0.1, 15);
  const NoiseSchedule sched = make_schedule(ScheduleKind::cosine, 1000);
  const auto ex = oracle::random_batch(p.spec, 2, 4, 16, 1);
  EXPECT_LE(oracle::finite_difference_check(p, ex, sched, 20, 17).max_rel_err, 1e-4);
}

TEST(Convert, DuplicatedInputEquivalence) {
  auto p = build_model<double>(toy_spec(), 21);
  oracle::randomize(p, 0.05, 22);
  const auto conv = convert_input_layer(p, 2);
  Rng rng(23);
  for (int i = 0; i < 20; ++i) {
    const auto x = random_latent(4, 12, rng);
    const auto xx = concat_channels<double>({&x, &x});
    EXPECT_LE(max_abs_diff(forward(conv, xx, 50 * i + 1, i % 10), forward(p, x, 50 * i + 1, i % 10)), 1e-6);
  }
}

TEST(Convert, ZeroSecondInputHalvesFirst) {
  auto p = build_model<double>(toy_spec(), 24);
  oracle::randomize(p, 0.05, 25);
  const auto conv = convert_input_layer(p, 2);
  // Oracle: original model with its patch weights halved, evaluated on x.
  ModelParameters<double> halved = p;
  halved.patch_embed[0].weight *= 0.5;
  Rng rng(26);
  const auto x = random_latent(4, 12, rng);
  Latent<double> zero(4, 4, 12), half = x;
  half.values *= 0.5;
  const auto a = forward(conv, concat_channels<double>({&x, &zero}), 7, 2);
  EXPECT_LE(max_abs_diff(a, forward(halved, x, 7, 2)), 1e-10);
  EXPECT_LE(max_abs_diff(a, forward(p, half, 7, 2)), 1e-10);
}

TEST(Convert, CountsAndErrors) {
  const ModelSpec s = toy_spec();
  const auto p = build_model<float>(s, 0);
  for (int k : {2, 3}) {
    const auto conv = convert_input_layer(p, k);
    EXPECT_EQ(conv.param_count() - p.param_count(), std::size_t(k - 1) * 2 * 2 * 12 * 32);
    EXPECT_EQ(conv.param_count(), parameter_count(conv.spec));
  }
  EXPECT_THROW(convert_input_layer(convert_input_layer(p, 2), 2), ConfigError);
  // All non-input weights are untouched.
  const auto conv = convert_input_layer(p, 2);
  EXPECT_EQ(conv.blocks[1].qkv.weight, p.blocks[1].qkv.weight);
  EXPECT_EQ(conv.patch_embed[0].bias, p.patch_embed[0].bias);
}

TEST(Routing, PerTaskChannelCounts) {
  const auto p = make_routed(build_model<float>(toy_spec(), 0), {{"depth", 2}, {"flow", 2}, {"amodal", 3}});
  EXPECT_EQ(p.spec.input_channels(route_patch_embed(p, "depth")), 24);
  EXPECT_EQ(p.spec.input_channels(route_patch_embed(p, "flow")), 24);
  EXPECT_EQ(p.spec.input_channels(route_patch_embed(p, "amodal")), 36);
  EXPECT_THROW(route_patch_embed(p, "segmentation"), ConfigError);
  const auto single = build_model<float>(toy_spec(), 0);
  EXPECT_EQ(route_patch_embed(single, "depth"), 0);
  EXPECT_EQ(route_patch_embed(single, "anything"), 0);
}

TEST(Routing, OtherRoutesReceiveNoGradient) {
  auto p = make_routed(build_model<double>(toy_spec(), 0), {{"depth", 2}, {"flow", 2}, {"amodal", 3}});
  oracle::randomize(p, 0.05, 31);
  const NoiseSchedule sched = make_schedule(ScheduleKind::linear, 1000);
  const auto ex = oracle::random_batch(p.spec, 3, 4, 32, p.route_index("depth"));
  ModelParameters<double> grad = p.shape_like();
  batch_loss(p, oracle::pointers(ex.data), ex.timesteps, ex.eps, sched, &grad);
  const int depth = p.route_index("depth"), flow = p.route_index("flow"), amodal = p.route_index("amodal");
  EXPECT_GT(grad.patch_embed[depth].weight.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(grad.patch_embed[flow].weight.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(grad.patch_embed[flow].bias.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(grad.patch_embed[amodal].weight.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_GT(grad.blocks[0].qkv.weight.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Layout, PatchifyRoundTrip) {
  Rng rng(41);
  const auto z = random_latent(6, 5, rng);
  Mat<double> tokens(9, 2 * 2 * 5);
  patchify_into(z, 2, tokens, 0);
  EXPECT_EQ(unpatchify(tokens, 0, 3, 3, 2, 5).values, z.values);
  // token row = gy*gw + gx, column = (py*p + px)*C + channel
  EXPECT_EQ(tokens(1 * 3 + 2, (1 * 2 + 0) * 5 + 4), z.at(3, 4, 4));
}

TEST(Layout, PositionEmbeddingInterpolation) {
  const Mat<double> native = position_embedding<double>(4, 4, 32, 0);
  const Mat<double> based = position_embedding<double>(4, 4, 32, 4);
  EXPECT_LE((native - based).cwiseAbs().maxCoeff(), 1e-12);
  const Mat<double> fine = position_embedding<double>(8, 8, 32, 4);
  EXPECT_EQ(fine.rows(), 64);
  EXPECT_TRUE(fine.allFinite());
  // Even cells of the finer grid land on the base grid's coordinates.
  EXPECT_LE((fine.row(2 * 8 + 2) - native.row(1 * 4 + 1)).cwiseAbs().maxCoeff(), 1e-12);
}
