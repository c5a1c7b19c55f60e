// SPDX-License-Identifier: Apache-2.0
#include "oracles.hpp"

#include "percept/image_io.hpp"
#include "percept/metrics.hpp"
#include "percept/tasks_data.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <unistd.h>

using namespace percept;
namespace fs = std::filesystem;

namespace {

TargetMap random_flow(Rng& rng, int res, int u_max) {
  std::uniform_real_distribution<float> d(-float(u_max), float(u_max));
  TargetMap t{Task::flow, {Map2(res, res), Map2(res, res)}};
  for (auto& p : t.planes)
    for (Eigen::Index i = 0; i < p.size(); ++i) p(i) = d(rng);
  return t;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) : path(fs::temp_directory_path() / ("percept_" + tag + "_" + std::to_string(::getpid()))) {
    fs::remove_all(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST(Classes, LabelsAndDeterminism) {
  for (int label = 0; label < kNumClasses; ++label) {
    const ClassSample a = gen_class_image(77, 16, label), b = gen_class_image(77, 16, label);
    EXPECT_EQ(a.label, label);
    EXPECT_EQ(a.rgb.values, b.rgb.values);
    EXPECT_LE(a.rgb.values.cwiseAbs().maxCoeff(), 1.f);
  }
  EXPECT_NE(gen_class_image(1, 16, 0).rgb.values, gen_class_image(1, 16, 5).rgb.values);
}

TEST(Depth, EmptySceneIsBackground) {
  const DepthSample s = gen_depth(3, 16, 0);
  EXPECT_TRUE((s.depth == float(kBackgroundDepth)).all());
}

TEST(Depth, DeterministicAndPositive) {
  const DepthSample a = gen_depth(11, 32, 4), b = gen_depth(11, 32, 4);
  EXPECT_EQ(a.rgb.values, b.rgb.values);
  EXPECT_TRUE((a.depth == b.depth).all());
  EXPECT_TRUE((a.depth > 0).all());
  EXPECT_TRUE((a.depth >= 1.f && a.depth <= 10.f).all());
}

TEST(Depth, NearestShapeHoldsTheMinimum) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const DepthSample s = gen_depth(seed, 32, 1 + int(seed % 4));
    // Painter's algorithm oracle: last covering shape wins.
    Map2 oracle = Map2::Constant(32, 32, float(kBackgroundDepth));
    for (const Shape& sh : s.shapes) {
      const Map2 m = rasterize(sh, 32);
      oracle = (m > 0.5f).select(Map2::Constant(32, 32, float(sh.depth)), oracle);
    }
    ASSERT_TRUE((oracle == s.depth).all()) << "seed " << seed;
    const Shape& top = s.shapes.back();
    if ((rasterize(top, 32) > 0.5f).any()) {
      Eigen::Index r, c;
      s.depth.minCoeff(&r, &c);
      EXPECT_TRUE(top.covers(int(c), int(r))) << "seed " << seed;
    }
    for (std::size_t i = 1; i < s.shapes.size(); ++i) EXPECT_GE(s.shapes[i - 1].depth, s.shapes[i].depth);
  }
}

TEST(Flow, ZeroDisplacement) {
  const FlowSample s = gen_flow(5, 32, 3, 0);
  EXPECT_EQ(s.frame1.values, s.frame2.values);
  EXPECT_TRUE((s.u == 0).all() && (s.v == 0).all());
}

TEST(Flow, BoundsAndBackground) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const FlowSample s = gen_flow(seed, 32, 3, 4);
    EXPECT_LE(s.u.abs().maxCoeff(), 4.f);
    EXPECT_LE(s.v.abs().maxCoeff(), 4.f);
    EXPECT_TRUE(((s.sprite_mask > 0.5f) || (s.u == 0 && s.v == 0)).all());
    EXPECT_TRUE((s.u == s.u.round()).all());
  }
}

TEST(Flow, WarpConsistency) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const FlowSample s = gen_flow(seed, 32, 1 + int(seed % 3), 8);
    EXPECT_GE(oracle::warp_agreement(s), 0.99) << "seed " << seed;
  }
}

TEST(Flow, ShiftEpe) {
  FlowSample s = gen_flow(8, 32, 1, 0);
  const Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> on = s.sprite_mask > 0.5f;
  ASSERT_TRUE(on.any());
  const Map2 u = on.select(Map2::Constant(32, 32, 3.f), Map2::Zero(32, 32));
  const Map2 zero = Map2::Zero(32, 32);
  EXPECT_EQ(epe(u, zero, u, zero), 0.0);
  const Eigen::Index n = on.count();
  Map2 pu(n, 1), gu(n, 1), z(n, 1);
  z.setZero();
  for (Eigen::Index i = 0, k = 0; i < u.size(); ++i)
    if (on(i)) {
      gu(k) = u(i);
      pu(k++) = 0;
    }
  EXPECT_NEAR(epe(pu, z, gu, z), 3.0, 1e-12);
}

TEST(Amodal, MaskAlgebra) {
  for (std::uint64_t seed = 0; seed < 10000; ++seed) {
    const AmodalSample s = gen_amodal(seed, 16);
    ASSERT_TRUE((s.modal <= s.amodal).all()) << "seed " << seed;
    ASSERT_TRUE(((s.modal * s.occluder) == 0).all()) << "seed " << seed;
    ASSERT_TRUE((s.modal == s.amodal * (1 - s.occluder)).all()) << "seed " << seed;
  }
}

TEST(Amodal, EdgeCases) {
  Shape target{ShapeKind::rect, 4, 4, 3};
  Shape far_occluder{ShapeKind::rect, 26, 26, 3};
  const AmodalSample apart = compose_amodal(32, target, far_occluder, 1);
  EXPECT_TRUE((apart.modal == apart.amodal).all());
  EXPECT_TRUE((apart.amodal == rasterize(target, 32)).all());

  Shape cover{ShapeKind::rect, 4, 4, 8};
  const AmodalSample hidden = compose_amodal(32, target, cover, 1);
  EXPECT_EQ(hidden.modal.sum(), 0.f);
  EXPECT_TRUE((hidden.amodal == rasterize(target, 32)).all());
}

TEST(Encoding, TaskLayouts) {
  EXPECT_EQ(task_encoding(Task::depth).num_latents, 2);
  EXPECT_EQ(task_encoding(Task::flow).num_latents, 2);
  EXPECT_EQ(task_encoding(Task::amodal).num_latents, 3);
  EXPECT_EQ(parse_task("amodal"), Task::amodal);
  EXPECT_THROW(parse_task("segmentation"), ConfigError);
}

TEST(Encoding, ConstantDepthIsZeros) {
  const TargetMap t{Task::depth, {Map2::Constant(8, 8, 4.f)}};
  const ImageTensor img = encode_target(t);
  EXPECT_EQ(img.channels, 3);
  EXPECT_EQ(img.values.cwiseAbs().maxCoeff(), 0.f);
}

TEST(Encoding, DepthRoundTrip) {
  const DepthSample s = gen_depth(4, 16, 3);
  DepthRange range;
  const ImageTensor img = encode_target({Task::depth, {s.depth}}, {}, &range);
  EXPECT_NEAR(img.values.minCoeff(), -1.f, 1e-6f);
  EXPECT_NEAR(img.values.maxCoeff(), 1.f, 1e-6f);
  const TargetMap metric = decode_target(Task::depth, img, {}, range);
  EXPECT_LE(((metric.planes[0] - s.depth).abs() / s.depth).maxCoeff(), 1e-5f);
  // Without the range the decode is relative log-depth, affine in log(gt).
  const TargetMap rel = decode_target(Task::depth, img);
  const Eigen::ArrayXXd lg = s.depth.cast<double>().log();
  const Eigen::ArrayXXd fit = apply_affine(rel.planes[0], align_affine(rel.planes[0], lg));
  EXPECT_LE((fit - lg).abs().maxCoeff(), 1e-5);
}

TEST(Encoding, FlowUnit) {
  const int u_max = 8;
  TargetMap t{Task::flow, {Map2::Constant(2, 2, float(u_max)), Map2::Zero(2, 2)}};
  const ImageTensor img = encode_target(t, {u_max});
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 2; ++x) {
      EXPECT_EQ(img.at(y, x, 0), 1.f);
      EXPECT_EQ(img.at(y, x, 1), 0.f);
      EXPECT_EQ(img.at(y, x, 2), 0.f);
    }
  t.planes[0](0, 0) = 9;
  EXPECT_THROW(encode_target(t, {u_max}), ValidationError);
}

TEST(Encoding, FlowRoundTripWithinQuantization) {
  Rng rng(12);
  for (int u_max : {4, 8}) {
    for (int i = 0; i < 100; ++i) {
      const TargetMap t = random_flow(rng, 8, u_max);
      ImageTensor img = encode_target(t, {u_max});
      const TargetMap exact = decode_target(Task::flow, img, {u_max});
      EXPECT_LE((exact.planes[0] - t.planes[0]).abs().maxCoeff(), 1e-5f);
      for (Eigen::Index k = 0; k < img.values.size(); ++k) img.values[k] = quantize8(img.values[k]);
      const TargetMap q = decode_target(Task::flow, img, {u_max});
      for (int p = 0; p < 2; ++p) EXPECT_LE((q.planes[p] - t.planes[p]).abs().maxCoeff(), float(u_max) / 127.f);
    }
  }
}

TEST(Encoding, AmodalRoundTrip) {
  const AmodalSample s = gen_amodal(21, 16);
  const ImageTensor img = encode_target({Task::amodal, {s.amodal}});
  EXPECT_TRUE((img.values.array().abs() == 1.f).all());
  const TargetMap back = decode_target(Task::amodal, img);
  EXPECT_TRUE((binarize(back.planes[0]) == s.amodal).all());
}

TEST(Samples, ConditionLayout) {
  const PerceptionSample d = make_sample(Task::depth, 1, 16);
  EXPECT_EQ(condition_images(d).size(), 1u);
  const PerceptionSample f = make_sample(Task::flow, 1, 16);
  EXPECT_EQ(condition_images(f).size(), 1u);
  EXPECT_EQ(f.target.planes.size(), 2u);
  const PerceptionSample a = make_sample(Task::amodal, 1, 16);
  const auto ca = condition_images(a);
  ASSERT_EQ(ca.size(), 2u);
  EXPECT_EQ(ca[0].values, a.rgb.values);
  for (Task t : {Task::depth, Task::flow, Task::amodal})
    EXPECT_EQ(make_sample(t, 9, 16).rgb.values, make_sample(t, 9, 16).rgb.values);
}

TEST(Dataset, WriteReadRoundTrip) {
  TempDir tmp("ds");
  for (const std::string task : {"depth", "flow", "amodal"}) {
    const fs::path root = tmp.path / task;
    const DatasetManifest m = write_dataset(root, task, 5, 16, 3, 0.4);
    ASSERT_EQ(m.samples.size(), 5u);
    EXPECT_EQ(m.samples[2].split, "train");
    EXPECT_EQ(m.samples[3].split, "val");
    const DatasetManifest r = read_manifest(root);
    EXPECT_EQ(r.samples.size(), 5u);
    EXPECT_EQ(r.task, task);
    for (const auto& e : r.samples) EXPECT_FALSE(fs::exists(root / (e.dir + ".tmp")));
    const PerceptionSample loaded = load_sample(root / r.samples[1].dir);
    const PerceptionSample fresh = make_sample(parse_task(task), 3 * 1000003ull + 1, 16);
    EXPECT_EQ(loaded.seed, fresh.seed);
    for (std::size_t p = 0; p < fresh.target.planes.size(); ++p)
      EXPECT_TRUE((loaded.target.planes[p] == fresh.target.planes[p]).all()) << task;
    for (Eigen::Index k = 0; k < fresh.rgb.values.size(); ++k) EXPECT_EQ(loaded.rgb.values[k], quantize8(fresh.rgb.values[k]));
    EXPECT_EQ(loaded.cond.has_value(), fresh.cond.has_value());
  }
  const DatasetManifest c = write_dataset(tmp.path / "classes", "classes", 3, 16, 1);
  const ClassSample cs = load_class_sample(tmp.path / "classes" / c.samples[0].dir);
  EXPECT_EQ(cs.label, gen_class_image(1000003ull, 16).label);
}

TEST(Dataset, RegeneratesBitIdentically) {
  TempDir tmp("regen");
  write_dataset(tmp.path / "a", "depth", 2, 16, 5);
  write_dataset(tmp.path / "b", "depth", 2, 16, 5);
  for (const char* f : {"rgb.png", "target.bin", "meta.json"}) {
    std::ifstream a(tmp.path / "a" / "sample_00001" / f, std::ios::binary), b(tmp.path / "b" / "sample_00001" / f, std::ios::binary);
    const std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
    EXPECT_FALSE(sa.empty());
    EXPECT_EQ(sa, sb) << f;
  }
}

TEST(Dataset, TargetBinLayout) {
  TempDir tmp("bin");
  fs::create_directories(tmp.path);
  TargetMap t{Task::flow, {Map2(2, 3), Map2(2, 3)}};
  for (int i = 0; i < 6; ++i) {
    t.planes[0](i / 3, i % 3) = float(i);
    t.planes[1](i / 3, i % 3) = float(-i);
  }
  write_target_bin(tmp.path / "t.bin", t);
  std::ifstream is(tmp.path / "t.bin", std::ios::binary);
  std::vector<float> raw(12);
  is.read(reinterpret_cast<char*>(raw.data()), 48);
  ASSERT_TRUE(is);
  // row-major pixels, planes interleaved
  EXPECT_EQ(raw[2], 1.f);
  EXPECT_EQ(raw[3], -1.f);
  EXPECT_EQ(raw[6], 3.f);
  const TargetMap back = read_target_bin(tmp.path / "t.bin", Task::flow, 2, 3);
  EXPECT_TRUE((back.planes[1] == t.planes[1]).all());
  EXPECT_THROW(read_target_bin(tmp.path / "t.bin", Task::flow, 3, 3), Error);
}
