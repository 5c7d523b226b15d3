// SPDX-License-Identifier: Apache-2.0
//
// Retrieval evaluation (mAP and CMC) with same-identity same-camera
// filtering, plus the query/gallery split of the unseen domain.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

#include "cfd/data.hpp"

namespace cfd {

struct EmbeddingSet {
  std::size_t dim = 0;
  std::vector<double> values;  // size() x dim, row-major
  std::vector<std::size_t> identities;
  std::vector<std::size_t> cameras;

  std::size_t size() const { return identities.size(); }
  const double* row(std::size_t i) const { return values.data() + i * dim; }
};

struct RetrievalResult {
  double mAP = 0.0;
  std::vector<double> cmc;  // cmc[k-1] = fraction with first match at rank <= k
  std::size_t valid_queries = 0;
  std::size_t excluded_queries = 0;  // no valid gallery match after filtering

  double rank(std::size_t k) const { return cmc.empty() ? 0.0 : cmc[std::min(k, cmc.size()) - 1]; }
};

struct EvalOptions {
  bool l2_normalize = false;
  std::size_t max_rank = 0;  // 0: gallery size
};

namespace detail {
inline void l2_normalize_rows(EmbeddingSet& s) {
  for (std::size_t i = 0; i < s.size(); ++i) {
    double n = 0.0;
    for (std::size_t k = 0; k < s.dim; ++k) n += s.values[i * s.dim + k] * s.values[i * s.dim + k];
    n = std::sqrt(n);
    if (n > 0)
      for (std::size_t k = 0; k < s.dim; ++k) s.values[i * s.dim + k] /= n;
  }
}
}  // namespace detail

/// Ranks the gallery by Euclidean distance for every query (ties broken by
/// gallery order), drops gallery entries sharing both identity and camera
/// with the query, and accumulates AP and CMC over queries that keep at least
/// one match.
inline RetrievalResult evaluate(EmbeddingSet query, EmbeddingSet gallery, const EvalOptions& opt = {}) {
  if (query.size() == 0 || gallery.size() == 0) throw ValueError("query and gallery must be nonempty");
  if (query.dim != gallery.dim) throw ShapeError("query and gallery embedding widths differ");
  if (opt.l2_normalize) {
    detail::l2_normalize_rows(query);
    detail::l2_normalize_rows(gallery);
  }
  const std::size_t ng = gallery.size();
  const std::size_t max_rank = opt.max_rank == 0 ? ng : std::min(opt.max_rank, ng);
  RetrievalResult r;
  std::vector<double> hits(max_rank, 0.0);
  double ap_sum = 0.0;
  std::vector<double> dist(ng);
  std::vector<std::size_t> order(ng);
  for (std::size_t q = 0; q < query.size(); ++q) {
    for (std::size_t g = 0; g < ng; ++g) {
      double s = 0.0;
      for (std::size_t k = 0; k < query.dim; ++k) {
        const double d = query.row(q)[k] - gallery.row(g)[k];
        s += d * d;
      }
      dist[g] = s;
    }
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });
    std::size_t rank = 0, found = 0, first = 0;
    double precision_sum = 0.0;
    for (std::size_t g : order) {
      const bool same_id = gallery.identities[g] == query.identities[q];
      if (same_id && gallery.cameras[g] == query.cameras[q]) continue;
      ++rank;
      if (same_id) {
        ++found;
        if (found == 1) first = rank;
        precision_sum += static_cast<double>(found) / static_cast<double>(rank);
      }
    }
    if (found == 0) {
      ++r.excluded_queries;
      continue;
    }
    ++r.valid_queries;
    ap_sum += precision_sum / static_cast<double>(found);
    for (std::size_t k = first; k <= max_rank; ++k) hits[k - 1] += 1.0;
  }
  if (r.valid_queries == 0) throw ValueError("no query has a valid gallery match");
  r.mAP = ap_sum / static_cast<double>(r.valid_queries);
  r.cmc.resize(max_rank);
  for (std::size_t k = 0; k < max_rank; ++k) r.cmc[k] = hits[k] / static_cast<double>(r.valid_queries);
  return r;
}

/// Expected AP of a uniformly random ranking of `gallery` items containing
/// `matches` relevant ones.
inline double random_ranking_ap(std::size_t gallery, std::size_t matches) {
  if (gallery == 0 || matches == 0 || matches > gallery) throw ValueError("random_ranking_ap needs 0 < matches <= gallery");
  double harmonic = 0.0;
  for (std::size_t r = 1; r <= gallery; ++r) harmonic += 1.0 / static_cast<double>(r);
  const double g = static_cast<double>(gallery), m = static_cast<double>(matches);
  if (gallery == 1) return 1.0;
  return (harmonic + (m - 1.0) / (g - 1.0) * (g - harmonic)) / g;
}

/// Unseen-domain split: image indices 0 and 1 of each identity are queries
/// (one per pseudo-camera), the rest form the gallery. Pseudo-camera is the
/// image index parity.
struct SplitIndices {
  std::vector<std::size_t> query, gallery;
};

inline SplitIndices unseen_split(const Dataset& ds, std::size_t queries_per_identity = 2) {
  SplitIndices s;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const auto& smp = ds.samples[i];
    if (smp.domain != ds.unseen_domain()) continue;
    (smp.index < queries_per_identity ? s.query : s.gallery).push_back(i);
  }
  if (s.query.empty() || s.gallery.empty()) throw DataError("unseen domain too small for a query/gallery split");
  return s;
}

inline std::size_t camera_of(const Sample& s) { return s.index % 2; }

}  // namespace cfd
