// SPDX-License-Identifier: Apache-2.0
#pragma once

// Perception metrics, affine alignment, power-law fitting and the
// train/inference compute allocation frontier.

#include "percept/tensor.hpp"

#include <Eigen/Dense>

#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace percept {

namespace detail {
template <typename A, typename B>
void require_same_shape(const Eigen::ArrayBase<A>& a, const Eigen::ArrayBase<B>& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(what) + ": shape mismatch " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                     " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  if (a.size() == 0) throw ShapeError(std::string(what) + ": empty map");
}
template <typename B>
void require_positive(const Eigen::ArrayBase<B>& gt, const char* what) {
  if (!(gt > 0).all()) throw ValidationError(std::string(what) + ": ground truth must be > 0 everywhere");
}
}  // namespace detail

template <typename A, typename B>
double absrel(const Eigen::ArrayBase<A>& pred, const Eigen::ArrayBase<B>& gt) {
  detail::require_same_shape(pred, gt, "absrel");
  detail::require_positive(gt, "absrel");
  const auto p = pred.derived().template cast<double>();
  const auto g = gt.derived().template cast<double>();
  return ((p - g).abs() / g).mean();
}

/// Percentage of pixels with max(pred/gt, gt/pred) < 1.25. Nonpositive
/// predictions count as misses.
template <typename A, typename B>
double delta1(const Eigen::ArrayBase<A>& pred, const Eigen::ArrayBase<B>& gt) {
  detail::require_same_shape(pred, gt, "delta1");
  detail::require_positive(gt, "delta1");
  const auto p = pred.derived().template cast<double>();
  const auto g = gt.derived().template cast<double>();
  const auto ratio = (p / g).max(g / p);
  return 100.0 * ((p > 0) && (ratio < 1.25)).template cast<double>().mean();
}

struct Affine {
  double scale = 1, shift = 0;
};

/// Least-squares (s, t) minimizing mean((s * pred + t - gt)^2).
template <typename A, typename B>
Affine align_affine(const Eigen::ArrayBase<A>& pred, const Eigen::ArrayBase<B>& gt) {
  detail::require_same_shape(pred, gt, "align_affine");
  const Eigen::ArrayXXd p = pred.derived().template cast<double>();
  const Eigen::ArrayXXd g = gt.derived().template cast<double>();
  const double mp = p.mean(), mg = g.mean();
  const double var = (p - mp).square().mean();
  if (!(var > 1e-300) || var <= 1e-24 * std::max(1.0, mp * mp)) throw DegenerateError("align_affine: prediction has zero variance");
  const double cov = ((p - mp) * (g - mg)).mean();
  const double s = cov / var;
  return {s, mg - s * mp};
}

template <typename A>
Eigen::ArrayXXd apply_affine(const Eigen::ArrayBase<A>& pred, const Affine& a) {
  return pred.derived().template cast<double>() * a.scale + a.shift;
}

/// Depth evaluation. With `aligned`, `pred` is fitted to log(gt) by
/// least squares and exponentiated before scoring; otherwise it is scored
/// as metric depth.
struct DepthScores {
  double absrel = 0, delta1 = 0;
};

template <typename A, typename B>
DepthScores depth_scores(const Eigen::ArrayBase<A>& pred, const Eigen::ArrayBase<B>& gt, bool aligned = true) {
  detail::require_same_shape(pred, gt, "depth_scores");
  detail::require_positive(gt, "depth_scores");
  if (!aligned) return {absrel(pred, gt), delta1(pred, gt)};
  const Eigen::ArrayXXd lg = gt.derived().template cast<double>().log();
  Eigen::ArrayXXd d;
  try {
    d = apply_affine(pred, align_affine(pred, lg)).exp();
  } catch (const DegenerateError&) {
    d = Eigen::ArrayXXd::Constant(lg.rows(), lg.cols(), std::exp(lg.mean()));
  }
  return {absrel(d, gt), delta1(d, gt)};
}

/// Mean per-pixel endpoint error.
template <typename A, typename B, typename C, typename D>
double epe(const Eigen::ArrayBase<A>& pu, const Eigen::ArrayBase<B>& pv, const Eigen::ArrayBase<C>& gu,
           const Eigen::ArrayBase<D>& gv) {
  detail::require_same_shape(pu, gu, "epe");
  detail::require_same_shape(pv, gv, "epe");
  detail::require_same_shape(pu, pv, "epe");
  const auto du = pu.derived().template cast<double>() - gu.derived().template cast<double>();
  const auto dv = pv.derived().template cast<double>() - gv.derived().template cast<double>();
  return (du.square() + dv.square()).sqrt().mean();
}

/// Intersection over union after thresholding both masks at 0.5. Two empty
/// masks score 1.
template <typename A, typename B>
double iou(const Eigen::ArrayBase<A>& pred, const Eigen::ArrayBase<B>& gt) {
  detail::require_same_shape(pred, gt, "iou");
  const auto p = pred.derived().template cast<double>() > 0.5;
  const auto g = gt.derived().template cast<double>() > 0.5;
  const double inter = (p && g).template cast<double>().sum();
  const double uni = (p || g).template cast<double>().sum();
  return uni == 0 ? 1.0 : inter / uni;
}

/// Mean IoU over instances.
double miou(const std::vector<Map2>& preds, const std::vector<Map2>& gts);

struct PowerLawFit {
  double a = 0, b = 0, r2 = 0;
  std::size_t n = 0;
  /// Set when r2 < 0.9.
  std::optional<std::string> warning;
  double operator()(double c) const;
};

/// OLS of log L on log C: L = a * C^b.
PowerLawFit fit_power_law(const std::vector<std::pair<double, double>>& points);

struct AllocationPoint {
  double train_macs = 0, infer_macs = 0, error = 0;
  std::string label;
  double total() const { return train_macs + infer_macs; }
};

struct Frontier {
  /// Pareto-minimal over (total MACs, error), sorted by total.
  std::vector<AllocationPoint> pareto;
  /// Lowest error with total <= budget; empty when nothing fits.
  std::optional<AllocationPoint> best;
  bool feasible() const { return best.has_value(); }
};

Frontier allocation_frontier(const std::vector<AllocationPoint>& points, double budget);

}  // namespace percept
