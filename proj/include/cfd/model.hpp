// SPDX-License-Identifier: Apache-2.0
//
// Four-stage toy backbone with optional decomposition modules after each
// stage, GeM pooling, a BN neck and identity classifier, and one linear
// domain head per decomposed stage.
#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cfd/decomposition.hpp"

namespace cfd {

enum class DomainHeads { kAuto, kOn, kOff };

inline const char* to_string(DomainHeads h) {
  switch (h) {
    case DomainHeads::kAuto: return "auto";
    case DomainHeads::kOn: return "on";
    case DomainHeads::kOff: return "off";
  }
  return "?";
}
inline DomainHeads parse_domain_heads(const std::string& s) {
  if (s == "auto") return DomainHeads::kAuto;
  if (s == "on") return DomainHeads::kOn;
  if (s == "off") return DomainHeads::kOff;
  throw ConfigError("domain_heads must be auto|on|off, got '" + s + "'");
}
inline const char* to_string(PoolKind k) {
  switch (k) {
    case PoolKind::kAvg: return "avg";
    case PoolKind::kMax: return "max";
    case PoolKind::kGem: return "gem";
  }
  return "?";
}
inline PoolKind parse_pool_kind(const std::string& s) {
  if (s == "avg") return PoolKind::kAvg;
  if (s == "max") return PoolKind::kMax;
  if (s == "gem") return PoolKind::kGem;
  throw ConfigError("unknown pool kind '" + s + "'");
}
inline const char* to_string(MeanPath m) { return m == MeanPath::kParamsAndStats ? "params_and_stats" : "stats_only"; }
inline MeanPath parse_mean_path(const std::string& s) {
  if (s == "params_and_stats") return MeanPath::kParamsAndStats;
  if (s == "stats_only") return MeanPath::kStatsOnly;
  throw ConfigError("mean_path must be params_and_stats|stats_only, got '" + s + "'");
}

struct BackboneConfig {
  std::vector<std::size_t> widths{16, 32, 64, 128};
  std::vector<std::size_t> strides{1, 2, 2, 1};
  std::size_t in_channels = 3, in_height = 32, in_width = 16;
  std::set<int> cfd_stages{1, 2, 3, 4};
  Decomposition decomposition = Decomposition::kCFD;
  NormKind input_norm = NormKind::kCSBN;
  NormKind id_norm = NormKind::kCIN;
  AttentionKind attention = AttentionKind::kChannel;
  DomainHeads domain_heads = DomainHeads::kAuto;
  std::size_t embedding_dim = 0;  // 0: width of the last stage
  std::size_t num_ids = 20;
  std::size_t num_domains = 3;
  std::size_t reduction = 16;
  PoolKind calib_pool = PoolKind::kMax;
  MeanPath mean_path = MeanPath::kParamsAndStats;
  bool detach_entangled_in_domain = false;
  double eps = 1e-5;
  double momentum = 0.1;
  double gem_p = 3.0;

  std::size_t embedding() const { return embedding_dim == 0 ? widths.back() : embedding_dim; }

  bool stage_active(int stage) const {
    if (!cfd_stages.count(stage)) return false;
    return decomposition != Decomposition::kNone || input_norm != NormKind::kNone || id_norm != NormKind::kNone ||
           domain_heads == DomainHeads::kOn;
  }
  bool stage_has_head(int stage) const {
    if (!cfd_stages.count(stage) || domain_heads == DomainHeads::kOff) return false;
    return domain_heads == DomainHeads::kOn || decomposition != Decomposition::kNone;
  }

  void validate() const {
    if (widths.size() != 4 || strides.size() != 4) throw ConfigError("backbone needs exactly four stage widths and strides");
    for (std::size_t i = 0; i < 4; ++i) {
      if (widths[i] == 0) throw ConfigError("stage widths must be positive");
      if (i > 0 && widths[i] < widths[i - 1]) throw ConfigError("stage widths must be nondecreasing");
      if (strides[i] == 0) throw ConfigError("strides must be positive");
    }
    for (int s : cfd_stages)
      if (s < 1 || s > 4) throw ConfigError("cfd_stages must be a subset of {1,2,3,4}");
    if (num_ids < 2) throw ConfigError("need at least two identities");
    if (num_domains < 1) throw ConfigError("need at least one training domain");
    if (in_channels == 0 || in_height == 0 || in_width == 0) throw ConfigError("input extents must be positive");
    if (!(gem_p > 0)) throw ConfigError("gem_p must be positive");
  }

  /// Canonical text form; two configs with the same parameter layout and
  /// semantics produce the same string.
  std::string canonical() const {
    std::ostringstream os;
    auto list = [&](const auto& v) {
      for (auto x : v) os << x << ',';
      os << ';';
    };
    os << "widths=";
    list(widths);
    os << "strides=";
    list(strides);
    os << "input=" << in_channels << 'x' << in_height << 'x' << in_width << ';';
    os << "stages=";
    list(cfd_stages);
    os << "decomposition=" << to_string(decomposition) << ";input_norm=" << to_string(input_norm)
       << ";id_norm=" << to_string(id_norm) << ";attention=" << to_string(attention)
       << ";domain_heads=" << to_string(domain_heads) << ";embedding=" << embedding() << ";ids=" << num_ids
       << ";domains=" << num_domains << ";reduction=" << reduction << ";calib_pool=" << to_string(calib_pool)
       << ";mean_path=" << to_string(mean_path) << ";detach=" << detach_entangled_in_domain << ";eps=" << eps
       << ";momentum=" << momentum << ';';
    return os.str();
  }

  /// 64-bit FNV-1a of canonical(), as 16 hex digits.
  std::string digest() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : canonical()) {
      h ^= ch;
      h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
  }
};

template <typename T>
struct DomainHead {
  Tensor<T> weight;  // c x K
  Tensor<T> bias;    // 1 x K
};

template <typename T>
struct Stage {
  Tensor<T> conv1, conv2;
  std::optional<CFDParams<T>> cfd;
  std::optional<DomainHead<T>> head;
};

template <typename T>
struct ModelParams {
  BackboneConfig config;
  std::vector<Stage<T>> stages;
  Tensor<T> gem_p;
  std::optional<Tensor<T>> projection;  // last width x embedding, when they differ
  BNState<T> neck;                      // K = 1 BN on the pooled feature
  Tensor<T> classifier;                 // embedding x ids

  using Named = std::vector<std::pair<std::string, Tensor<T>>>;

  /// Deterministic, name-ordered listing of learnable leaves and buffers.
  void collect(Named& params, Named& buffers) const {
    for (std::size_t i = 0; i < stages.size(); ++i) {
      const std::string p = "stage" + std::to_string(i + 1);
      params.emplace_back(p + ".conv1", stages[i].conv1);
      params.emplace_back(p + ".conv2", stages[i].conv2);
      if (stages[i].cfd) stages[i].cfd->collect(p + ".cfd", params, buffers);
      if (stages[i].head) {
        params.emplace_back(p + ".head.weight", stages[i].head->weight);
        params.emplace_back(p + ".head.bias", stages[i].head->bias);
      }
    }
    params.emplace_back("gem_p", gem_p);
    if (projection) params.emplace_back("projection", *projection);
    params.emplace_back("neck.gamma", neck.gamma[0]);
    params.emplace_back("neck.beta", neck.beta[0]);
    buffers.emplace_back("neck.running_mean", neck.running_mean[0]);
    buffers.emplace_back("neck.running_var", neck.running_var[0]);
    params.emplace_back("classifier", classifier);
  }
  Named parameters() const {
    Named p, b;
    collect(p, b);
    return p;
  }
  Named buffers() const {
    Named p, b;
    collect(p, b);
    return b;
  }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : parameters()) n += t.numel();
    return n;
  }
};

namespace detail {
template <typename T, typename Rng>
Tensor<T> fan_in_uniform(Shape shape, std::size_t fan_in, double gain, Rng& rng) {
  const T b = static_cast<T>(gain * std::sqrt(3.0 / static_cast<double>(fan_in)));
  return Tensor<T>::uniform(std::move(shape), -b, b, rng, true);
}
}  // namespace detail

/// Fresh parameters; the layout is a pure function of the config and the
/// values a pure function of (config, seed).
template <typename T>
ModelParams<T> init_model(const BackboneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  ModelParams<T> m;
  m.config = cfg;
  std::size_t cin_ = cfg.in_channels;
  for (int s = 1; s <= 4; ++s) {
    const std::size_t c = cfg.widths[s - 1];
    Stage<T> st;
    // He-style: variance 2 / fan_in for relu layers.
    st.conv1 = detail::fan_in_uniform<T>({c, cin_, 3, 3}, cin_ * 9, std::sqrt(2.0), rng);
    st.conv2 = detail::fan_in_uniform<T>({c, c, 3, 3}, c * 9, std::sqrt(2.0), rng);
    if (cfg.stage_active(s)) {
      typename CFDParams<T>::Options o;
      o.channels = c;
      o.domains = cfg.num_domains;
      o.reduction = cfg.reduction;
      o.input_norm = cfg.input_norm;
      o.id_norm = cfg.id_norm;
      o.attention = cfg.attention;
      o.kind = cfg.decomposition;
      o.eps = cfg.eps;
      o.momentum = cfg.momentum;
      o.calib_pool = cfg.calib_pool;
      o.mean_path = cfg.mean_path;
      o.detach_entangled_in_domain = cfg.detach_entangled_in_domain;
      st.cfd = CFDParams<T>::make(o, rng);
    }
    if (cfg.stage_has_head(s)) {
      DomainHead<T> h;
      h.weight = detail::fan_in_uniform<T>({c, cfg.num_domains}, c, 1.0, rng);
      h.bias = Tensor<T>::zeros({1, cfg.num_domains}, true);
      st.head = h;
    }
    m.stages.push_back(std::move(st));
    cin_ = c;
  }
  m.gem_p = Tensor<T>::scalar(static_cast<T>(cfg.gem_p), true);
  const std::size_t e = cfg.embedding();
  if (e != cfg.widths.back())
    m.projection = detail::fan_in_uniform<T>({cfg.widths.back(), e}, cfg.widths.back(), 1.0, rng);
  m.neck = BNState<T>::make(e, 1);
  m.neck.eps = cfg.eps;
  m.neck.momentum = cfg.momentum;
  m.classifier = detail::fan_in_uniform<T>({e, cfg.num_ids}, e, 1.0, rng);
  return m;
}

template <typename T>
struct ForwardOutput {
  Tensor<T> embedding;       // after the BN neck; used for retrieval
  Tensor<T> global_feature;  // before the neck; used by the triplet loss
  Tensor<T> id_logits;
  std::vector<int> domain_stages;
  std::vector<Tensor<T>> domain_logits;
  std::vector<Tensor<T>> stage_features;  // each stage's conv output, before any module
};

/// Full network. `domains` are required in train mode (per-domain CSBN) and
/// ignored by CSBN in eval mode.
template <typename T>
ForwardOutput<T> forward(const Tensor<T>& x, ModelParams<T>& m, const std::vector<std::size_t>& domains, Mode mode) {
  const auto& cfg = m.config;
  if (x.rank() != 4 || x.dim(1) != cfg.in_channels)
    throw ShapeError("model input must be n x " + std::to_string(cfg.in_channels) + " x h x w, got " + to_string(x.shape()));
  if (m.stages.size() != 4) throw ConfigError("model parameters do not match a four-stage config");
  if (mode == Mode::kTrain) {
    if (domains.size() != x.dim(0)) throw DomainError("train mode needs one domain id per sample");
    for (auto d : domains)
      if (d >= cfg.num_domains) throw DomainError("domain id " + std::to_string(d) + " is not a training domain");
  }
  ForwardOutput<T> out;
  Tensor<T> h = x;
  for (int s = 1; s <= 4; ++s) {
    auto& st = m.stages[s - 1];
    h = relu(conv2d(h, st.conv1, cfg.strides[s - 1], 1));
    h = relu(conv2d(h, st.conv2, 1, 1));
    out.stage_features.push_back(h);
    if (!st.cfd) continue;
    auto o = cfd_forward(h, *st.cfd, domains, mode);
    if (st.head) {
      auto pooled = pool(o.domain, PoolKind::kAvg);
      out.domain_logits.push_back(add(matmul(pooled, st.head->weight), st.head->bias));
      out.domain_stages.push_back(s);
    }
    h = o.identity;
  }
  auto g = gem(relu(h), m.gem_p);
  if (m.projection) g = matmul(g, *m.projection);
  out.global_feature = g;
  m.neck.mode = mode;
  const std::size_t n = g.dim(0), e = g.dim(1);
  out.embedding = reshape(batch_norm(reshape(g, {n, e, 1, 1}), m.neck, 0), {n, e});
  out.id_logits = matmul(out.embedding, m.classifier);
  return out;
}

/// Same as forward() for a model whose modules use the single-split
/// decomposition.
template <typename T>
ForwardOutput<T> pfd_forward(const Tensor<T>& x, ModelParams<T>& m, const std::vector<std::size_t>& domains, Mode mode) {
  if (m.config.decomposition != Decomposition::kPFD) throw ConfigError("pfd_forward on a model not configured for PFD");
  return forward(x, m, domains, mode);
}

}  // namespace cfd
