// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "percept/layers.hpp"

#include <algorithm>
#include <numeric>
#include <vector>

namespace percept {

struct MoESpec {
  int num_experts = 8;
  int active_k = 2;
  int shared_experts = 1;
  double balance_weight = 0.01;

  void validate() const {
    if (num_experts < 1) throw ConfigError("moe: num_experts must be >= 1");
    if (active_k < 1 || active_k > num_experts)
      throw ConfigError("moe: active_k " + std::to_string(active_k) + " must lie in [1, E=" + std::to_string(num_experts) + "]");
    if (shared_experts < 0) throw ConfigError("moe: shared_experts must be >= 0");
    if (balance_weight < 0) throw ConfigError("moe: balance_weight must be >= 0");
  }
  bool operator==(const MoESpec&) const = default;
};

template <typename Scalar>
struct MoeWeights {
  Mat<Scalar> router;  // dim x E, no bias
  std::vector<Mlp<Scalar>> experts;
  std::vector<Mlp<Scalar>> shared;

  std::size_t param_count() const {
    std::size_t n = std::size_t(router.size());
    for (const auto& e : experts) n += e.param_count();
    for (const auto& s : shared) n += s.param_count();
    return n;
  }
};

/// Per-token expert choices plus the per-expert statistics the balance loss
/// consumes. Rows are tokens, columns are the k selection slots.
struct RoutingDecision {
  int num_experts = 0;
  Eigen::MatrixXi selected;   // tokens x k, slot 0 is the top-1 choice
  Eigen::MatrixXd weights;    // tokens x k, softmax over the selected logits
  Eigen::VectorXd load;       // f_i: fraction of tokens whose top-1 choice is i
  Eigen::VectorXd mean_prob;  // P_i: router probability of expert i averaged over tokens

  int tokens() const { return int(selected.rows()); }
};

/// E * sum_i f_i P_i.
inline double balance_loss(const RoutingDecision& d) {
  if (d.tokens() == 0) throw ValidationError("balance_loss: empty token batch");
  return double(d.num_experts) * d.load.dot(d.mean_prob);
}

inline double balance_loss(const RoutingDecision& d, const MoESpec& spec) {
  if (d.num_experts != spec.num_experts) throw ShapeError("balance_loss: decision/spec expert count mismatch");
  return balance_loss(d);
}

/// Builds a decision from raw router logits (tokens x E).
template <typename Scalar>
RoutingDecision route_tokens(const Mat<Scalar>& logits, int k, Mat<Scalar>* probs_out = nullptr) {
  const int n = int(logits.rows()), e = int(logits.cols());
  if (k < 1 || k > e) throw ConfigError("route_tokens: k=" + std::to_string(k) + " with E=" + std::to_string(e));
  RoutingDecision d;
  d.num_experts = e;
  d.selected.resize(n, k);
  d.weights.resize(n, k);
  d.load = Eigen::VectorXd::Zero(e);
  d.mean_prob = Eigen::VectorXd::Zero(e);
  Mat<Scalar> probs(n, e);
  std::vector<int> order(e);
  for (int r = 0; r < n; ++r) {
    const Scalar mx = logits.row(r).maxCoeff();
    probs.row(r) = (logits.row(r).array() - mx).exp().matrix();
    probs.row(r) /= probs.row(r).sum();
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return logits(r, a) > logits(r, b); });
    double top = double(logits(r, order[0]));
    double z = 0;
    for (int s = 0; s < k; ++s) {
      d.selected(r, s) = order[s];
      d.weights(r, s) = std::exp(double(logits(r, order[s])) - top);
      z += d.weights(r, s);
    }
    d.weights.row(r) /= z;
    d.load[order[0]] += 1.0;
    d.mean_prob += probs.row(r).template cast<double>().transpose();
  }
  if (n > 0) {
    d.load /= double(n);
    d.mean_prob /= double(n);
  }
  if (probs_out) *probs_out = std::move(probs);
  return d;
}

template <typename Scalar>
struct MoeCache {
  Mat<Scalar> input;
  Mat<Scalar> probs;
  RoutingDecision decision;
  std::vector<std::vector<int>> rows;    // per expert: token rows routed to it
  std::vector<std::vector<int>> slots;   // per expert: slot index of that routing
  std::vector<MlpCache<Scalar>> expert_caches;
  std::vector<Mat<Scalar>> expert_outputs;
  std::vector<MlpCache<Scalar>> shared_caches;
};

template <typename Scalar>
struct MoeOutput {
  Mat<Scalar> tokens;
  RoutingDecision decision;
};

/// shared(x) + sum over the k selected experts of w_i * expert_i(x), per token.
template <typename Scalar>
MoeOutput<Scalar> moe_forward(const MoESpec& spec, const MoeWeights<Scalar>& w, const Mat<Scalar>& x,
                              MoeCache<Scalar>* cache = nullptr) {
  spec.validate();
  if (int(w.experts.size()) != spec.num_experts || int(w.shared.size()) != spec.shared_experts)
    throw ShapeError("moe_forward: weights do not match spec expert counts");
  if (w.router.rows() != x.cols())
    throw ShapeError("moe_forward: token dim " + std::to_string(x.cols()) + " vs router input " + std::to_string(w.router.rows()));
  const int n = int(x.rows());
  const Mat<Scalar> logits = x * w.router;
  Mat<Scalar> probs;
  RoutingDecision dec = route_tokens(logits, spec.active_k, &probs);

  std::vector<std::vector<int>> rows(spec.num_experts), slots(spec.num_experts);
  for (int r = 0; r < n; ++r)
    for (int s = 0; s < spec.active_k; ++s) {
      rows[dec.selected(r, s)].push_back(r);
      slots[dec.selected(r, s)].push_back(s);
    }

  Mat<Scalar> y = Mat<Scalar>::Zero(n, x.cols());
  std::vector<MlpCache<Scalar>> ecache(spec.num_experts);
  std::vector<Mat<Scalar>> eout(spec.num_experts);
  for (int e = 0; e < spec.num_experts; ++e) {
    if (rows[e].empty()) continue;
    Mat<Scalar> xe(rows[e].size(), x.cols());
    for (std::size_t i = 0; i < rows[e].size(); ++i) xe.row(i) = x.row(rows[e][i]);
    eout[e] = mlp_forward(w.experts[e], xe, cache ? &ecache[e] : nullptr);
    for (std::size_t i = 0; i < rows[e].size(); ++i)
      y.row(rows[e][i]) += Scalar(dec.weights(rows[e][i], slots[e][i])) * eout[e].row(i);
  }
  std::vector<MlpCache<Scalar>> scache(w.shared.size());
  for (std::size_t s = 0; s < w.shared.size(); ++s) y += mlp_forward(w.shared[s], x, cache ? &scache[s] : nullptr);

  if (cache) {
    cache->input = x;
    cache->probs = std::move(probs);
    cache->decision = dec;
    cache->rows = std::move(rows);
    cache->slots = std::move(slots);
    cache->expert_caches = std::move(ecache);
    cache->expert_outputs = std::move(eout);
    cache->shared_caches = std::move(scache);
  }
  return {std::move(y), std::move(dec)};
}

/// Backward through moe_forward. `balance_scale` multiplies d(balance_loss)
/// into the router gradient (0 disables it). Returns d(input).
template <typename Scalar>
Mat<Scalar> moe_backward(const MoESpec& spec, const MoeWeights<Scalar>& w, const MoeCache<Scalar>& cache,
                         const Mat<Scalar>& dy, MoeWeights<Scalar>& grad, double balance_scale) {
  const Mat<Scalar>& x = cache.input;
  const int n = int(x.rows()), k = spec.active_k;
  const RoutingDecision& dec = cache.decision;
  Mat<Scalar> dx = Mat<Scalar>::Zero(n, x.cols());
  Eigen::MatrixXd dweights = Eigen::MatrixXd::Zero(n, k);

  for (int e = 0; e < spec.num_experts; ++e) {
    const auto& rows = cache.rows[e];
    if (rows.empty()) continue;
    const auto& slots = cache.slots[e];
    Mat<Scalar> dye(rows.size(), x.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      dye.row(i) = Scalar(dec.weights(rows[i], slots[i])) * dy.row(rows[i]);
      dweights(rows[i], slots[i]) = double(dy.row(rows[i]).dot(cache.expert_outputs[e].row(i)));
    }
    Mat<Scalar> dxe = mlp_backward(w.experts[e], cache.expert_caches[e], dye, grad.experts[e]);
    for (std::size_t i = 0; i < rows.size(); ++i) dx.row(rows[i]) += dxe.row(i);
  }
  for (std::size_t s = 0; s < w.shared.size(); ++s) dx += mlp_backward(w.shared[s], cache.shared_caches[s], dy, grad.shared[s]);

  Mat<Scalar> dlogits = Mat<Scalar>::Zero(n, spec.num_experts);
  for (int r = 0; r < n; ++r) {
    const double inner = dec.weights.row(r).dot(dweights.row(r));
    for (int s = 0; s < k; ++s)
      dlogits(r, dec.selected(r, s)) += Scalar(dec.weights(r, s) * (dweights(r, s) - inner));
  }
  if (balance_scale != 0.0 && n > 0) {
    // d/dp_{r,i} of E * sum_i f_i * mean_r p_{r,i}
    const Eigen::VectorXd g = balance_scale * double(spec.num_experts) * dec.load / double(n);
    for (int r = 0; r < n; ++r) {
      const Eigen::VectorXd p = cache.probs.row(r).template cast<double>().transpose();
      const double pg = p.dot(g);
      dlogits.row(r) += (p.array() * (g.array() - pg)).matrix().transpose().template cast<Scalar>();
    }
  }
  grad.router.noalias() += x.transpose() * dlogits;
  dx.noalias() += dlogits * w.router.transpose();
  return dx;
}

}  // namespace percept
