// SPDX-License-Identifier: Apache-2.0
#include "percept/latent_codec.hpp"

#include <gtest/gtest.h>

using namespace percept;

namespace {

ImageTensor random_image(int h, int w, Rng& rng) {
  ImageTensor img(h, w, 3);
  std::uniform_real_distribution<float> u(-1.f, 1.f);
  for (Eigen::Index i = 0; i < img.values.size(); ++i) img.values[i] = u(rng);
  return img;
}

template <typename F>
std::string error_message(F&& f) {
  try {
    f();
  } catch (const ShapeError& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST(Codec, ProductionShape) {
  const CodecSpec spec = default_codec(3);
  Rng rng(1);
  const LatentTensor z = encode(random_image(256, 256, rng), spec);
  EXPECT_EQ(z.height, 32);
  EXPECT_EQ(z.width, 32);
  EXPECT_EQ(z.channels, 4);
  EXPECT_FALSE(spec.lossless());
}

TEST(Codec, ProjectionOrthonormal) {
  for (auto spec : {default_codec(5), toy_codec(5), make_codec(4, 7, 11)}) {
    const Eigen::MatrixXd gram = spec.projection.transpose() * spec.projection;
    EXPECT_LT((gram - Eigen::MatrixXd::Identity(spec.channels, spec.channels)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Codec, ZeroMapsToZero) {
  const CodecSpec spec = default_codec(0);
  const LatentTensor z = encode(ImageTensor(64, 64, 3), spec);
  EXPECT_EQ(z.values.cwiseAbs().maxCoeff(), 0.f);
  const ImageTensor back = decode(LatentTensor(8, 8, 4), spec);
  EXPECT_EQ(back.height, 64);
  EXPECT_EQ(back.values.cwiseAbs().maxCoeff(), 0.f);
}

TEST(Codec, LosslessRoundTrip) {
  const CodecSpec spec = toy_codec(9);
  ASSERT_TRUE(spec.lossless());
  Rng rng(2);
  for (int i = 0; i < 20; ++i) {
    const ImageTensor x = random_image(32, 32, rng);
    const ImageTensor y = decode(encode(x, spec), spec);
    EXPECT_LE((x.values - y.values).cwiseAbs().maxCoeff(), 1e-6f);
  }
}

TEST(Codec, Linear) {
  const CodecSpec spec = default_codec(4);
  Rng rng(3);
  const Image<double> x = random_image(32, 32, rng).cast<double>();
  const Image<double> y = random_image(32, 32, rng).cast<double>();
  Image<double> sum = x;
  sum.values += y.values;
  Image<double> scaled = x;
  scaled.values *= -2.5;
  const auto zx = encode(x, spec), zy = encode(y, spec);
  EXPECT_LE((encode(sum, spec).values - zx.values - zy.values).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_LE((encode(scaled, spec).values + 2.5 * zx.values).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Codec, LossyProjectionIdempotent) {
  const CodecSpec spec = default_codec(6);
  Rng rng(4);
  for (int i = 0; i < 10; ++i) {
    const ImageTensor x = random_image(64, 64, rng);
    const LatentTensor z = encode(x, spec);
    const ImageTensor p = decode(z, spec);
    EXPECT_LE((encode(p, spec).values - z.values).cwiseAbs().maxCoeff(), 1e-6f);
    // Projection residual is orthogonal to the retained subspace.
    ImageTensor r = x;
    r.values -= p.values;
    EXPECT_LE(encode(r, spec).values.cwiseAbs().maxCoeff(), 1e-5f);
    const ImageTensor pp = decode(encode(p, spec), spec);
    EXPECT_LE((pp.values - p.values).cwiseAbs().maxCoeff(), 1e-6f);
  }
}

TEST(Codec, SeedDeterminesProjection) {
  EXPECT_EQ(make_codec(2, 12, 7).projection, make_codec(2, 12, 7).projection);
  EXPECT_NE(make_codec(2, 12, 7).projection, make_codec(2, 12, 8).projection);
}

TEST(Codec, ShapeErrorsNameAxis) {
  const CodecSpec spec = default_codec(0);
  EXPECT_NE(error_message([&] { encode(ImageTensor(60, 64, 3), spec); }).find("height"), std::string::npos);
  EXPECT_NE(error_message([&] { encode(ImageTensor(64, 60, 3), spec); }).find("width"), std::string::npos);
  EXPECT_NE(error_message([&] { encode(ImageTensor(64, 64, 1), spec); }).find("channels"), std::string::npos);
  EXPECT_THROW(decode(LatentTensor(8, 8, 5), spec), ShapeError);
}

TEST(Codec, InvalidSpec) {
  EXPECT_THROW(make_codec(0, 1, 0), ConfigError);
  EXPECT_THROW(make_codec(2, 13, 0), ConfigError);
  EXPECT_THROW(make_codec(2, 0, 0), ConfigError);
}

TEST(Codec, MacCount) {
  const CodecSpec spec = default_codec(0);
  EXPECT_EQ(codec_macs(spec, 256, 256), 32ull * 32 * 192 * 4);
}

TEST(Codec, ClampOnlyOnEmission) {
  const CodecSpec spec = toy_codec(0);
  ImageTensor x(4, 4, 3);
  x.values.setConstant(1.5f);
  const ImageTensor back = decode(encode(x, spec), spec);
  EXPECT_NEAR(back.values.maxCoeff(), 1.5f, 1e-5f);
  EXPECT_EQ(clamp_unit(back).values.maxCoeff(), 1.f);
}
