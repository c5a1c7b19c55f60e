// SPDX-License-Identifier: Apache-2.0
#include "percept/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace percept {

double miou(const std::vector<Map2>& preds, const std::vector<Map2>& gts) {
  if (preds.size() != gts.size()) throw ShapeError("miou: prediction/ground-truth count mismatch");
  if (preds.empty()) throw ShapeError("miou: no instances");
  double sum = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) sum += iou(preds[i], gts[i]);
  return sum / double(preds.size());
}

double PowerLawFit::operator()(double c) const { return a * std::pow(c, b); }

PowerLawFit fit_power_law(const std::vector<std::pair<double, double>>& points) {
  std::set<double> distinct;
  for (const auto& [c, l] : points) {
    if (!(c > 0) || !(l > 0) || !std::isfinite(c) || !std::isfinite(l))
      throw ValidationError("fit_power_law: compute and loss must be finite and > 0");
    distinct.insert(c);
  }
  if (distinct.size() < 2) throw ValidationError("fit_power_law: need at least 2 distinct compute values");
  const std::size_t n = points.size();
  Eigen::VectorXd x(n), y(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = std::log(points[i].first);
    y[i] = std::log(points[i].second);
  }
  const double mx = x.mean(), my = y.mean();
  const Eigen::VectorXd dx = x.array() - mx, dy = y.array() - my;
  const double sxx = dx.squaredNorm();
  PowerLawFit fit;
  fit.n = n;
  fit.b = dx.dot(dy) / sxx;
  fit.a = std::exp(my - fit.b * mx);
  const double ss_tot = dy.squaredNorm();
  const double ss_res = (dy - fit.b * dx).squaredNorm();
  fit.r2 = ss_tot > 0 ? 1.0 - ss_res / ss_tot : 1.0;
  if (fit.r2 < 0.9) fit.warning = "r2 " + std::to_string(fit.r2) + " below 0.9: weak power-law fit";
  return fit;
}

Frontier allocation_frontier(const std::vector<AllocationPoint>& points, double budget) {
  for (const auto& p : points)
    if (!(p.train_macs > 0) || !(p.infer_macs > 0) || !(p.error > 0) || !std::isfinite(p.total()) || !std::isfinite(p.error))
      throw ValidationError("allocation_frontier: point fields must be positive and finite");
  Frontier f;
  std::vector<AllocationPoint> sorted = points;
  std::stable_sort(sorted.begin(), sorted.end(), [](const AllocationPoint& a, const AllocationPoint& b) {
    return a.total() != b.total() ? a.total() < b.total() : a.error < b.error;
  });
  double best_err = std::numeric_limits<double>::infinity();
  for (const auto& p : sorted)
    if (p.error < best_err) {
      f.pareto.push_back(p);
      best_err = p.error;
    }
  for (const auto& p : sorted)
    if (p.total() <= budget && (!f.best || p.error < f.best->error)) f.best = p;
  return f;
}

}  // namespace percept
