// SPDX-License-Identifier: Apache-2.0
//
// Independent reference implementations shared by the unit and acceptance
// tests.
#pragma once

#include <algorithm>
#include <random>
#include <tuple>
#include <vector>

#include "cfd/metrics.hpp"

namespace oracle {

struct Retrieval {
  double mAP = 0;
  std::vector<double> cmc;
  std::size_t excluded = 0;
};

/// Sorts (distance, gallery index) tuples, drops filtered entries afterwards
/// and scores the remaining list.
inline Retrieval brute_force(const cfd::EmbeddingSet& q, const cfd::EmbeddingSet& g) {
  Retrieval out;
  out.cmc.assign(g.size(), 0.0);
  double ap_total = 0;
  std::size_t valid = 0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    std::vector<std::tuple<double, std::size_t>> ranked;
    for (std::size_t j = 0; j < g.size(); ++j) {
      double d = 0;
      for (std::size_t k = 0; k < q.dim; ++k) d += (q.row(i)[k] - g.row(j)[k]) * (q.row(i)[k] - g.row(j)[k]);
      ranked.emplace_back(d, j);
    }
    std::sort(ranked.begin(), ranked.end());
    std::vector<bool> relevant;
    for (auto [d, j] : ranked) {
      if (g.identities[j] == q.identities[i] && g.cameras[j] == q.cameras[i]) continue;
      relevant.push_back(g.identities[j] == q.identities[i]);
    }
    const auto matches = static_cast<std::size_t>(std::count(relevant.begin(), relevant.end(), true));
    if (matches == 0) {
      ++out.excluded;
      continue;
    }
    ++valid;
    double ap = 0;
    std::size_t hits = 0;
    for (std::size_t r = 0; r < relevant.size(); ++r)
      if (relevant[r]) ap += static_cast<double>(++hits) / static_cast<double>(r + 1);
    ap_total += ap / static_cast<double>(matches);
    const auto first = static_cast<std::size_t>(std::find(relevant.begin(), relevant.end(), true) - relevant.begin());
    for (std::size_t k = first; k < g.size(); ++k) out.cmc[k] += 1.0;
  }
  out.mAP = ap_total / static_cast<double>(valid);
  for (auto& c : out.cmc) c /= static_cast<double>(valid);
  return out;
}

/// Random retrieval instance on a coarse integer grid so distance ties are
/// frequent.
inline std::pair<cfd::EmbeddingSet, cfd::EmbeddingSet> tied_instance(std::mt19937_64& rng, std::size_t nq, std::size_t ng) {
  std::uniform_int_distribution<int> coord(0, 2), ids(0, 5), cam(0, 1);
  const std::size_t dim = 2 + rng() % 3;
  auto fill = [&](std::size_t n) {
    cfd::EmbeddingSet s;
    s.dim = dim;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < dim; ++k) s.values.push_back(coord(rng));
      s.identities.push_back(static_cast<std::size_t>(ids(rng)));
      s.cameras.push_back(static_cast<std::size_t>(cam(rng)));
    }
    return s;
  };
  auto q = fill(nq);
  auto g = fill(ng);
  return {q, g};
}

}  // namespace oracle
