// SPDX-License-Identifier: Apache-2.0
//
// Training objective: identity cross-entropy plus batch-hard triplet on the
// pooled feature, and a weighted domain cross-entropy per decomposed stage.
#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "cfd/ops.hpp"

namespace cfd {

struct LossWeights {
  std::array<double, 4> lambda{0.1, 0.1, 0.1, 0.1};  // per stage 1..4
  double margin = 0.3;

  void validate() const {
    for (double l : lambda)
      if (!std::isfinite(l) || l < 0) throw ConfigError("loss weights must be finite and nonnegative");
    if (!std::isfinite(margin) || margin < 0) throw ConfigError("triplet margin must be finite and nonnegative");
  }
};

template <typename T>
Tensor<T> id_loss(const Tensor<T>& logits, const std::vector<std::size_t>& labels, double smoothing = 0.0) {
  return cross_entropy(logits, labels, smoothing);
}

template <typename T>
Tensor<T> domain_loss(const Tensor<T>& logits, const std::vector<std::size_t>& domains) {
  return cross_entropy(logits, domains, 0.0);
}

template <typename T>
struct TripletResult {
  Tensor<T> loss;
  bool degenerate = false;  // no anchor had both a positive and a negative
  std::size_t anchors = 0;
};

/// Batch-hard triplet loss with Euclidean distance: for each anchor the
/// farthest positive and the nearest negative, hinged at the margin, averaged
/// over anchors that have both. Ties pick the lowest index.
template <typename T>
TripletResult<T> triplet_loss(const Tensor<T>& emb, const std::vector<std::size_t>& labels, double margin) {
  if (emb.rank() != 2) throw ShapeError("triplet_loss expects n x d embeddings");
  const std::size_t n = emb.dim(0), d = emb.dim(1);
  if (labels.size() != n) throw ShapeError("label count does not match embeddings");
  auto diff = sub(reshape(emb, {n, 1, d}), reshape(emb, {1, n, d}));
  auto dist = sqrt(clamp_min(sum(mul(diff, diff), {2}, false), static_cast<T>(1e-12)));
  const auto dv = dist.data();

  std::vector<std::size_t> pos_idx, neg_idx;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t bp = n, bn = n;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const T v = dv[i * n + j];
      if (labels[j] == labels[i]) {
        if (bp == n || v > dv[i * n + bp]) bp = j;
      } else if (bn == n || v < dv[i * n + bn]) {
        bn = j;
      }
    }
    if (bp < n && bn < n) {
      pos_idx.push_back(i * n + bp);
      neg_idx.push_back(i * n + bn);
    }
  }
  TripletResult<T> r;
  r.anchors = pos_idx.size();
  if (pos_idx.empty()) {
    r.degenerate = true;
    r.loss = Tensor<T>::scalar(T(0));
    return r;
  }
  auto hinge = relu(add_scalar(sub(take(dist, pos_idx), take(dist, neg_idx)), static_cast<T>(margin)));
  r.loss = mean_all(hinge);
  return r;
}

template <typename T>
struct LossParts {
  Tensor<T> id;
  Tensor<T> triplet;
  std::vector<std::pair<int, Tensor<T>>> domain;  // (stage 1..4, loss)
};

/// (id + triplet) + sum_i lambda_i * domain_i. Stages with lambda_i = 0 add
/// nothing.
template <typename T>
Tensor<T> total_loss(const LossParts<T>& parts, const LossWeights& w) {
  w.validate();
  if (!parts.id.defined() || !parts.triplet.defined()) throw ValueError("total_loss needs id and triplet parts");
  std::set<int> seen;
  Tensor<T> total = add(parts.id, parts.triplet);
  for (const auto& [stage, l] : parts.domain) {
    if (stage < 1 || stage > 4) throw ConfigError("domain loss stage " + std::to_string(stage) + " outside 1..4");
    if (!seen.insert(stage).second) throw ConfigError("duplicate domain loss for stage " + std::to_string(stage));
    const double lam = w.lambda[static_cast<std::size_t>(stage - 1)];
    if (lam == 0.0) continue;
    total = add(total, mul_scalar(l, static_cast<T>(lam)));
  }
  return total;
}

}  // namespace cfd
