// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "percept/tensor.hpp"

#include <cstdint>

namespace percept {

/// Space-to-depth rearrangement by `factor` followed by an orthonormal
/// projection of each 3*f^2 patch vector onto `channels` latent channels.
/// Exactly invertible when channels == 3*f^2.
struct CodecSpec {
  int factor = 8;
  int channels = 4;
  std::uint64_t seed = 0;
  Eigen::MatrixXd projection;  // (3 f^2) x channels, orthonormal columns

  int patch_dim() const { return 3 * factor * factor; }
  bool lossless() const { return channels == patch_dim(); }
};

/// Builds the projection by QR of a seeded standard-normal matrix.
inline CodecSpec make_codec(int factor, int channels, std::uint64_t seed) {
  if (factor < 1) throw ConfigError("codec factor must be >= 1");
  const int rows = 3 * factor * factor;
  if (channels < 1 || channels > rows)
    throw ConfigError("codec channels must lie in [1, " + std::to_string(rows) + "]");
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd g(rows, channels);
  for (int j = 0; j < channels; ++j)
    for (int i = 0; i < rows; ++i) g(i, j) = n(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(rows, channels);
  // Fix column signs so the basis does not depend on Householder conventions.
  Eigen::MatrixXd r = qr.matrixQR().topRows(channels).triangularView<Eigen::Upper>();
  for (int j = 0; j < channels; ++j)
    if (r(j, j) < 0) q.col(j) = -q.col(j);
  return CodecSpec{factor, channels, seed, std::move(q)};
}

/// Production shapes: 8x spatial downsample to 4 channels (lossy).
inline CodecSpec default_codec(std::uint64_t seed = 0) { return make_codec(8, 4, seed); }
/// Toy shapes: 2x downsample to 12 channels (lossless).
inline CodecSpec toy_codec(std::uint64_t seed = 0) { return make_codec(2, 12, seed); }

template <typename Scalar>
Latent<Scalar> encode(const Image<Scalar>& image, const CodecSpec& spec) {
  const int f = spec.factor;
  if (image.channels != 3) throw ShapeError("encode: image must have 3 channels, got " + std::to_string(image.channels));
  if (image.height % f != 0) throw ShapeError("encode: height " + std::to_string(image.height) + " not divisible by factor " + std::to_string(f));
  if (image.width % f != 0) throw ShapeError("encode: width " + std::to_string(image.width) + " not divisible by factor " + std::to_string(f));
  const Mat<Scalar> gt = spec.projection.transpose().cast<Scalar>();
  Latent<Scalar> out(image.height / f, image.width / f, spec.channels);
  Vec<Scalar> patch(spec.patch_dim());
  for (int ly = 0; ly < out.height; ++ly)
    for (int lx = 0; lx < out.width; ++lx) {
      for (int py = 0; py < f; ++py)
        for (int px = 0; px < f; ++px)
          for (int ch = 0; ch < 3; ++ch) patch[(py * f + px) * 3 + ch] = image.at(ly * f + py, lx * f + px, ch);
      out.values.segment(out.index(ly, lx, 0), spec.channels) = gt * patch;
    }
  return out;
}

template <typename Scalar>
Image<Scalar> decode(const Latent<Scalar>& latent, const CodecSpec& spec) {
  const int f = spec.factor;
  if (latent.channels != spec.channels)
    throw ShapeError("decode: latent has " + std::to_string(latent.channels) + " channels, codec expects " + std::to_string(spec.channels));
  const Mat<Scalar> g = spec.projection.cast<Scalar>();
  Image<Scalar> out(latent.height * f, latent.width * f, 3);
  for (int ly = 0; ly < latent.height; ++ly)
    for (int lx = 0; lx < latent.width; ++lx) {
      Vec<Scalar> patch = g * latent.values.segment(latent.index(ly, lx, 0), spec.channels);
      for (int py = 0; py < f; ++py)
        for (int px = 0; px < f; ++px)
          for (int ch = 0; ch < 3; ++ch) out.at(ly * f + py, lx * f + px, ch) = patch[(py * f + px) * 3 + ch];
    }
  return out;
}

/// MACs of one encode (equal to one decode) for an image of the given size.
inline std::uint64_t codec_macs(const CodecSpec& spec, int height, int width) {
  return std::uint64_t(height / spec.factor) * std::uint64_t(width / spec.factor) * std::uint64_t(spec.patch_dim()) *
         std::uint64_t(spec.channels);
}

template <typename Scalar>
Image<Scalar> clamp_unit(Image<Scalar> img) {
  img.values = img.values.cwiseMax(Scalar(-1)).cwiseMin(Scalar(1));
  return img;
}

}  // namespace percept
