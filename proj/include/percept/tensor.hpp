// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace percept {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DegenerateError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Single-channel H x W map (depth, masks, flow components). Indexed (y, x).
using Map2 = Eigen::ArrayXXf;

struct ImageTag {};
struct LatentTag {};

/// Dense H x W x C grid stored row-major with channels innermost.
/// The tag keeps pixel-space images and codec latents from being mixed up.
template <typename Scalar, typename Tag>
struct Grid {
  int height = 0;
  int width = 0;
  int channels = 0;
  Vec<Scalar> values;

  Grid() = default;
  Grid(int h, int w, int c) : height(h), width(w), channels(c), values(Vec<Scalar>::Zero(Eigen::Index(h) * w * c)) {}

  Eigen::Index index(int y, int x, int c) const { return (Eigen::Index(y) * width + x) * channels + c; }
  Scalar& at(int y, int x, int c) { return values[index(y, x, c)]; }
  Scalar at(int y, int x, int c) const { return values[index(y, x, c)]; }
  Eigen::Index size() const { return values.size(); }

  bool same_shape(const Grid& o) const { return height == o.height && width == o.width && channels == o.channels; }

  template <typename Other>
  Grid<Other, Tag> cast() const {
    Grid<Other, Tag> out;
    out.height = height;
    out.width = width;
    out.channels = channels;
    out.values = values.template cast<Other>();
    return out;
  }
};

template <typename Scalar>
using Image = Grid<Scalar, ImageTag>;
template <typename Scalar>
using Latent = Grid<Scalar, LatentTag>;

using ImageTensor = Image<float>;
using LatentTensor = Latent<float>;

struct LatentShape {
  int height = 0;
  int width = 0;
  int channels = 0;
};

inline std::string shape_string(int h, int w, int c) {
  return std::to_string(h) + "x" + std::to_string(w) + "x" + std::to_string(c);
}

/// Concatenates latents along the channel axis, first argument first.
template <typename Scalar>
Latent<Scalar> concat_channels(const std::vector<const Latent<Scalar>*>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const int h = parts[0]->height, w = parts[0]->width;
  int total = 0;
  for (const auto* p : parts) {
    if (p->height != h || p->width != w)
      throw ShapeError("concat_channels: spatial mismatch " + shape_string(p->height, p->width, p->channels));
    total += p->channels;
  }
  Latent<Scalar> out(h, w, total);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int off = 0;
      for (const auto* p : parts) {
        for (int c = 0; c < p->channels; ++c) out.at(y, x, off + c) = p->at(y, x, c);
        off += p->channels;
      }
    }
  return out;
}

using Rng = std::mt19937_64;

template <typename Scalar>
void fill_normal(Vec<Scalar>& v, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = static_cast<Scalar>(n(rng));
}

template <typename Scalar>
Latent<Scalar> normal_latent(const LatentShape& s, Rng& rng) {
  Latent<Scalar> z(s.height, s.width, s.channels);
  fill_normal(z.values, rng);
  return z;
}

}  // namespace percept
