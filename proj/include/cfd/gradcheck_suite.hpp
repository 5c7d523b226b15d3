// SPDX-License-Identifier: Apache-2.0
//
// Named finite-difference checks over every layer at small shapes, in double.
#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "cfd/gradcheck.hpp"
#include "cfd/losses.hpp"
#include "cfd/model.hpp"

namespace cfd {

inline constexpr double kGradTolerance = 1e-4;

namespace detail {

using Rng = std::mt19937_64;

inline Tensor<double> leaf(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return Tensor<double>::uniform(std::move(s), lo, hi, rng, true);
}

/// Random fixed projection so the scalar depends on every output element
/// with distinct weights.
inline Tensor<double> probe(const Shape& s, Rng& rng) { return Tensor<double>::uniform(s, -1.0, 1.0, rng, false); }

inline Tensor<double> project(const Tensor<double>& y, const Tensor<double>& w) { return sum_all(mul(y, w)); }

inline void randomize(Tensor<double>& t, Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.data()) v = u(rng);
}

inline GradCheckReport named(GradCheckReport r, std::string scope) {
  r.scope = std::move(scope);
  return r;
}

inline BackboneConfig tiny_backbone() {
  BackboneConfig c;
  c.widths = {4, 4, 6, 8};
  c.strides = {1, 2, 2, 1};
  c.in_channels = 3;
  c.in_height = 8;
  c.in_width = 8;
  c.num_ids = 2;
  c.num_domains = 2;
  c.reduction = 4;
  return c;
}

}  // namespace detail

inline const std::vector<std::string>& gradcheck_scopes() {
  static const std::vector<std::string> s{"matmul",   "conv",   "pool-avg", "pool-max", "gem",
                                          "bn",       "in",     "centering", "csbn",    "cin",
                                          "channel-attention", "spatial-attention", "cfd", "pfd",
                                          "id-loss",  "triplet-loss", "domain-loss", "total-loss", "full-model"};
  return s;
}

/// Runs one scope (or "all"). Some scopes produce several reports (modes,
/// parameterizations).
inline std::vector<GradCheckReport> run_gradcheck(const std::string& scope, std::uint64_t seed = 1) {
  using detail::leaf;
  using detail::named;
  using detail::probe;
  using detail::project;
  std::vector<GradCheckReport> out;
  if (scope == "all") {
    for (const auto& s : gradcheck_scopes()) {
      auto r = run_gradcheck(s, seed);
      out.insert(out.end(), r.begin(), r.end());
    }
    return out;
  }
  detail::Rng rng(seed);
  const double tol = kGradTolerance;
  if (scope == "matmul") {
    auto a = leaf({3, 4}, rng), b = leaf({4, 5}, rng);
    auto w = probe({3, 5}, rng);
    out.push_back(named(grad_check([&] { return project(matmul(a, b), w); }, {{"a", a}, {"b", b}}, tol), scope));
  } else if (scope == "conv") {
    for (std::size_t stride : {1, 2}) {
      auto x = leaf({2, 3, 6, 5}, rng), k = leaf({4, 3, 3, 3}, rng);
      const std::size_t ho = (6 + 2 - 3) / stride + 1, wo = (5 + 2 - 3) / stride + 1;
      auto w = probe({2, 4, ho, wo}, rng);
      out.push_back(named(grad_check([&] { return project(conv2d(x, k, stride, 1), w); }, {{"x", x}, {"kernel", k}}, tol),
                          scope + "/stride" + std::to_string(stride)));
    }
  } else if (scope == "pool-avg" || scope == "pool-max") {
    const auto kind = scope == "pool-avg" ? PoolKind::kAvg : PoolKind::kMax;
    auto x = leaf({2, 3, 4, 3}, rng);
    auto w = probe({2, 3}, rng);
    out.push_back(named(grad_check([&] { return project(pool(x, kind), w); }, {{"x", x}}, tol), scope));
  } else if (scope == "gem") {
    auto x = leaf({2, 3, 4, 3}, rng, 0.1, 1.5);
    auto p = Tensor<double>::scalar(3.0, true);
    auto w = probe({2, 3}, rng);
    out.push_back(named(grad_check([&] { return project(gem(x, p), w); }, {{"x", x}, {"p", p}}, tol), scope));
  } else if (scope == "bn") {
    auto x = leaf({4, 3, 3, 2}, rng);
    auto s = BNState<double>::make(3, 1);
    detail::randomize(s.gamma[0], rng, 0.5, 1.5);
    detail::randomize(s.beta[0], rng, -0.5, 0.5);
    auto w = probe(x.shape(), rng);
    for (Mode mode : {Mode::kTrain, Mode::kEval}) {
      s.mode = mode;
      detail::randomize(s.running_var[0], rng, 0.5, 2.0);
      out.push_back(named(grad_check([&] { return project(batch_norm(x, s, 0), w); },
                                     {{"x", x}, {"gamma", s.gamma[0]}, {"beta", s.beta[0]}}, tol),
                          scope + (mode == Mode::kTrain ? "/train" : "/eval")));
    }
  } else if (scope == "in") {
    auto x = leaf({2, 3, 3, 4}, rng);
    auto s = INState<double>::make(3);
    detail::randomize(s.gamma, rng, 0.5, 1.5);
    detail::randomize(s.beta, rng, -0.5, 0.5);
    auto w = probe(x.shape(), rng);
    out.push_back(named(grad_check([&] { return project(instance_norm(x, s), w); },
                                   {{"x", x}, {"gamma", s.gamma}, {"beta", s.beta}}, tol),
                        scope));
  } else if (scope == "centering") {
    for (PoolKind kind : {PoolKind::kAvg, PoolKind::kMax}) {
      auto x = leaf({2, 3, 3, 3}, rng);
      auto wm = leaf({3}, rng);
      auto w = probe(x.shape(), rng);
      out.push_back(named(grad_check([&] { return project(centering_calibration(x, wm, kind), w); }, {{"x", x}, {"w_m", wm}}, tol),
                          scope + (kind == PoolKind::kAvg ? "/avg" : "/max")));
    }
  } else if (scope == "csbn") {
    for (MeanPath path : {MeanPath::kParamsAndStats, MeanPath::kStatsOnly})
      for (Mode mode : {Mode::kTrain, Mode::kEval}) {
        if (mode == Mode::kTrain && path == MeanPath::kStatsOnly) continue;
        auto x = leaf({4, 3, 3, 2}, rng);
        auto s = BNState<double>::make(3, 2);
        s.mean_path = path;
        s.mode = mode;
        for (std::size_t d = 0; d < 2; ++d) {
          detail::randomize(s.gamma[d], rng, 0.5, 1.5);
          detail::randomize(s.beta[d], rng, -0.5, 0.5);
          detail::randomize(s.running_mean[d], rng, -0.3, 0.3);
          detail::randomize(s.running_var[d], rng, 0.5, 2.0);
        }
        detail::randomize(s.w_m, rng, -0.5, 0.5);
        detail::randomize(s.w_gamma, rng, -0.5, 0.5);
        detail::randomize(s.w_beta, rng, -0.5, 0.5);
        const std::vector<std::size_t> domains{0, 1, 0, 1};
        auto w = probe(x.shape(), rng);
        auto f = [&] {
          if (mode == Mode::kEval) return project(csbn(x, s, 1), w);
          return project(apply_per_domain(x, domains, [&](const Tensor<double>& part, std::size_t d) { return csbn(part, s, d); }), w);
        };
        NamedTensors ps{{"x", x}, {"w_m", s.w_m}, {"w_gamma", s.w_gamma}, {"w_beta", s.w_beta}};
        for (std::size_t d = 0; d < 2; ++d) {
          ps.emplace_back("gamma." + std::to_string(d), s.gamma[d]);
          ps.emplace_back("beta." + std::to_string(d), s.beta[d]);
        }
        out.push_back(named(grad_check(f, ps, tol), scope + (mode == Mode::kTrain ? "/train" : std::string("/eval-") + to_string(path))));
      }
  } else if (scope == "cin") {
    for (int rep = 0; rep < 5; ++rep) {
      auto x = leaf({2, 3, 3, 4}, rng);
      auto s = INState<double>::make(3);
      s.calib_pool = rep % 2 ? PoolKind::kAvg : PoolKind::kMax;
      detail::randomize(s.gamma, rng, 0.5, 1.5);
      detail::randomize(s.beta, rng, -0.5, 0.5);
      detail::randomize(s.w_u, rng, -0.5, 0.5);
      detail::randomize(s.w_v, rng, -0.5, 0.5);
      detail::randomize(s.w_o, rng, -0.5, 0.5);
      auto w = probe(x.shape(), rng);
      out.push_back(named(grad_check([&] { return project(cin(x, s), w); },
                                     {{"x", x}, {"gamma", s.gamma}, {"beta", s.beta}, {"w_u", s.w_u}, {"w_v", s.w_v}, {"w_o", s.w_o}},
                                     tol),
                          scope + "/param" + std::to_string(rep)));
    }
  } else if (scope == "channel-attention") {
    auto x = leaf({2, 8, 3, 3}, rng);
    auto p = ChannelAttention<double>::make(8, 4, rng);
    auto w = probe({2, 8}, rng);
    out.push_back(named(grad_check([&] { return project(channel_attention(x, p), w); }, {{"x", x}, {"w1", p.w1}, {"w2", p.w2}}, tol),
                        scope));
  } else if (scope == "spatial-attention") {
    auto x = leaf({2, 3, 4, 5}, rng);
    auto p = SpatialAttention<double>::make(rng);
    auto w = probe({2, 1, 4, 5}, rng);
    out.push_back(named(grad_check([&] { return project(spatial_attention(x, p), w); }, {{"x", x}, {"kernel", p.kernel}}, tol),
                        scope));
  } else if (scope == "cfd" || scope == "pfd") {
    for (AttentionKind a : {AttentionKind::kChannel, AttentionKind::kSpatial, AttentionKind::kSpatialChannel}) {
      typename CFDParams<double>::Options o;
      o.channels = 8;
      o.domains = 2;
      o.reduction = 4;
      o.attention = a;
      o.kind = scope == "cfd" ? Decomposition::kCFD : Decomposition::kPFD;
      auto p = CFDParams<double>::make(o, rng);
      detail::randomize(p.input_norm.bn.w_m, rng, -0.3, 0.3);
      detail::randomize(p.id_norm.in.w_u, rng, -0.3, 0.3);
      detail::randomize(p.id_norm.in.w_v, rng, -0.3, 0.3);
      auto x = leaf({4, 8, 3, 3}, rng);
      const std::vector<std::size_t> domains{0, 0, 1, 1};
      auto wi = probe(x.shape(), rng), wd = probe(x.shape(), rng);
      auto f = [&] {
        auto r = cfd_forward(x, p, domains, Mode::kTrain);
        return add(project(r.identity, wi), project(r.domain, wd));
      };
      NamedTensors ps{{"x", x}};
      NamedTensors params, buffers;
      p.collect("m", params, buffers);
      ps.insert(ps.end(), params.begin(), params.end());
      out.push_back(named(grad_check(f, ps, tol), scope + "/" + to_string(a)));
    }
  } else if (scope == "id-loss") {
    for (double smoothing : {0.0, 0.1}) {
      auto logits = leaf({5, 4}, rng, -2.0, 2.0);
      const std::vector<std::size_t> labels{0, 3, 1, 1, 2};
      out.push_back(named(grad_check([&] { return id_loss(logits, labels, smoothing); }, {{"logits", logits}}, tol),
                          scope + (smoothing > 0 ? "/smoothed" : "")));
    }
  } else if (scope == "domain-loss") {
    auto logits = leaf({6, 3}, rng, -2.0, 2.0);
    const std::vector<std::size_t> domains{0, 0, 1, 1, 2, 2};
    out.push_back(named(grad_check([&] { return domain_loss(logits, domains); }, {{"logits", logits}}, tol), scope));
  } else if (scope == "triplet-loss") {
    auto emb = leaf({8, 5}, rng);
    const std::vector<std::size_t> labels{0, 0, 1, 1, 2, 2, 3, 3};
    // Margin large enough that every hinge is active.
    out.push_back(named(grad_check([&] { return triplet_loss(emb, labels, 3.0).loss; }, {{"embedding", emb}}, tol), scope));
  } else if (scope == "total-loss") {
    auto id = leaf({1}, rng, 0.5, 2.0), tri = leaf({1}, rng, 0.0, 1.0);
    auto d1 = leaf({1}, rng, 0.5, 1.5), d3 = leaf({1}, rng, 0.5, 1.5);
    LossWeights lw;
    lw.lambda = {0.3, 0.0, 0.7, 0.0};
    auto f = [&] {
      LossParts<double> parts{id, tri, {{1, d1}, {3, d3}}};
      return total_loss(parts, lw);
    };
    out.push_back(named(grad_check(f, {{"id", id}, {"triplet", tri}, {"domain1", d1}, {"domain3", d3}}, tol), scope));
  } else if (scope == "full-model") {
    auto cfg = detail::tiny_backbone();
    auto m = init_model<double>(cfg, seed);
    auto x = Tensor<double>::uniform({4, 3, 8, 8}, 0.0, 1.0, rng, true);
    const std::vector<std::size_t> ids{0, 1, 0, 1}, domains{0, 0, 1, 1};
    LossWeights lw;
    auto f = [&] {
      auto o = forward(x, m, domains, Mode::kTrain);
      LossParts<double> parts;
      parts.id = id_loss(o.id_logits, ids);
      parts.triplet = triplet_loss(o.global_feature, ids, 10.0).loss;
      for (std::size_t k = 0; k < o.domain_logits.size(); ++k)
        parts.domain.emplace_back(o.domain_stages[k], domain_loss(o.domain_logits[k], domains));
      return total_loss(parts, lw);
    };
    NamedTensors ps{{"input", x}};
    for (const auto& [name, t] : m.parameters()) ps.emplace_back(name, t);
    GradCheckOptions opt;
    opt.max_elements = 12;
    out.push_back(named(grad_check(f, ps, tol, opt), scope));
  } else {
    throw ConfigError("unknown gradcheck scope '" + scope + "'");
  }
  return out;
}

}  // namespace cfd
