// SPDX-License-Identifier: Apache-2.0
#pragma once

// Building blocks with explicit forward caches and backward passes. All
// activations are row-major (tokens x features); weights are (in x out).

#include "percept/tensor.hpp"

#include <cmath>
#include <numbers>

namespace percept {

template <typename Scalar>
struct Linear {
  Mat<Scalar> weight;  // in x out
  Mat<Scalar> bias;    // 1 x out

  Linear() = default;
  Linear(int in, int out) : weight(Mat<Scalar>::Zero(in, out)), bias(Mat<Scalar>::Zero(1, out)) {}
  int in() const { return int(weight.rows()); }
  int out() const { return int(weight.cols()); }
  std::size_t param_count() const { return std::size_t(weight.size() + bias.size()); }

  Mat<Scalar> forward(const Mat<Scalar>& x) const {
    Mat<Scalar> y = x * weight;
    y.rowwise() += bias.row(0);
    return y;
  }
  /// Accumulates into grad; returns d(input).
  Mat<Scalar> backward(const Mat<Scalar>& x, const Mat<Scalar>& dy, Linear& grad) const {
    grad.weight.noalias() += x.transpose() * dy;
    grad.bias += dy.colwise().sum();
    return dy * weight.transpose();
  }
};

template <typename Scalar>
Mat<Scalar> silu(const Mat<Scalar>& x) {
  return x.unaryExpr([](Scalar v) { return v / (Scalar(1) + std::exp(-v)); });
}

template <typename Scalar>
Mat<Scalar> silu_grad(const Mat<Scalar>& x) {
  return x.unaryExpr([](Scalar v) {
    const Scalar s = Scalar(1) / (Scalar(1) + std::exp(-v));
    return s * (Scalar(1) + v * (Scalar(1) - s));
  });
}

// tanh approximation
template <typename Scalar>
Mat<Scalar> gelu(const Mat<Scalar>& x) {
  const Scalar k = Scalar(std::sqrt(2.0 / std::numbers::pi));
  return x.unaryExpr([k](Scalar v) { return Scalar(0.5) * v * (Scalar(1) + std::tanh(k * (v + Scalar(0.044715) * v * v * v))); });
}

template <typename Scalar>
Mat<Scalar> gelu_grad(const Mat<Scalar>& x) {
  const Scalar k = Scalar(std::sqrt(2.0 / std::numbers::pi));
  return x.unaryExpr([k](Scalar v) {
    const Scalar th = std::tanh(k * (v + Scalar(0.044715) * v * v * v));
    return Scalar(0.5) * (Scalar(1) + th) +
           Scalar(0.5) * v * (Scalar(1) - th * th) * k * (Scalar(1) + Scalar(3 * 0.044715) * v * v);
  });
}

/// Layer norm over features without affine parameters.
template <typename Scalar>
struct LayerNormCache {
  Mat<Scalar> normalized;
  Vec<Scalar> rstd;
};

template <typename Scalar>
Mat<Scalar> layer_norm(const Mat<Scalar>& x, LayerNormCache<Scalar>& cache, Scalar eps = Scalar(1e-6)) {
  const Eigen::Index d = x.cols();
  cache.normalized.resize(x.rows(), d);
  cache.rstd.resize(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Scalar mu = x.row(r).mean();
    const auto centered = (x.row(r).array() - mu).matrix();
    const Scalar var = centered.squaredNorm() / Scalar(d);
    const Scalar rs = Scalar(1) / std::sqrt(var + eps);
    cache.rstd[r] = rs;
    cache.normalized.row(r) = centered * rs;
  }
  return cache.normalized;
}

template <typename Scalar>
Mat<Scalar> layer_norm_backward(const LayerNormCache<Scalar>& cache, const Mat<Scalar>& dy) {
  const Eigen::Index d = dy.cols();
  Mat<Scalar> dx(dy.rows(), d);
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const Scalar mean_dy = dy.row(r).mean();
    const Scalar mean_dyx = dy.row(r).dot(cache.normalized.row(r)) / Scalar(d);
    dx.row(r) = cache.rstd[r] * (dy.row(r).array() - mean_dy - cache.normalized.row(r).array() * mean_dyx).matrix();
  }
  return dx;
}

/// Two-layer GELU feed-forward network.
template <typename Scalar>
struct Mlp {
  Linear<Scalar> fc1, fc2;

  Mlp() = default;
  Mlp(int dim, int hidden) : fc1(dim, hidden), fc2(hidden, dim) {}
  std::size_t param_count() const { return fc1.param_count() + fc2.param_count(); }
};

template <typename Scalar>
struct MlpCache {
  Mat<Scalar> input, pre, act;
};

template <typename Scalar>
Mat<Scalar> mlp_forward(const Mlp<Scalar>& m, const Mat<Scalar>& x, MlpCache<Scalar>* cache) {
  Mat<Scalar> pre = m.fc1.forward(x);
  Mat<Scalar> act = gelu(pre);
  Mat<Scalar> y = m.fc2.forward(act);
  if (cache) {
    cache->input = x;
    cache->pre = std::move(pre);
    cache->act = std::move(act);
  }
  return y;
}

template <typename Scalar>
Mat<Scalar> mlp_backward(const Mlp<Scalar>& m, const MlpCache<Scalar>& cache, const Mat<Scalar>& dy, Mlp<Scalar>& grad) {
  Mat<Scalar> dact = m.fc2.backward(cache.act, dy, grad.fc2);
  Mat<Scalar> dpre = dact.cwiseProduct(gelu_grad(cache.pre));
  return m.fc1.backward(cache.input, dpre, grad.fc1);
}

template <typename Scalar>
void truncated_normal(Mat<Scalar>& m, double stddev, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    double v;
    do v = n(rng);
    while (std::abs(v) > 2.0);
    m.data()[i] = Scalar(v * stddev);
  }
}

}  // namespace percept
