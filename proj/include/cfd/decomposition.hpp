// SPDX-License-Identifier: Apache-2.0
//
// Calibrated feature decomposition: attention-gated split of the normalized
// feature into a domain part and an entangled part, a second split of the
// entangled part into a hard-entangled and a pure-id part, calibrated
// normalization on the pure-id part, and the two fusions feeding the next
// stage (identity) and the domain head (domain).
#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "cfd/norm.hpp"

namespace cfd {

enum class AttentionKind { kChannel, kSpatial, kSpatialChannel };
enum class Decomposition { kNone, kPFD, kCFD };

inline const char* to_string(AttentionKind k) {
  switch (k) {
    case AttentionKind::kChannel: return "C";
    case AttentionKind::kSpatial: return "S";
    case AttentionKind::kSpatialChannel: return "SC";
  }
  return "?";
}
inline AttentionKind parse_attention_kind(const std::string& s) {
  if (s == "C" || s == "channel") return AttentionKind::kChannel;
  if (s == "S" || s == "spatial") return AttentionKind::kSpatial;
  if (s == "SC" || s == "spatial-channel") return AttentionKind::kSpatialChannel;
  throw ConfigError("unsupported attention kind '" + s + "'");
}
inline const char* to_string(Decomposition d) {
  switch (d) {
    case Decomposition::kNone: return "none";
    case Decomposition::kPFD: return "PFD";
    case Decomposition::kCFD: return "CFD";
  }
  return "?";
}
inline Decomposition parse_decomposition(const std::string& s) {
  if (s == "none") return Decomposition::kNone;
  if (s == "PFD" || s == "pfd") return Decomposition::kPFD;
  if (s == "CFD" || s == "cfd") return Decomposition::kCFD;
  throw ConfigError("unknown decomposition kind '" + s + "'");
}

/// Squeeze-excitation style gate: sigmoid(relu(avgpool(x) W1) W2), no biases.
template <typename T>
struct ChannelAttention {
  std::size_t channels = 0, hidden = 0;
  Tensor<T> w1;  // c x c/r
  Tensor<T> w2;  // c/r x c

  template <typename Rng>
  static ChannelAttention make(std::size_t c, std::size_t reduction, Rng& rng) {
    if (c == 0 || reduction == 0) throw ShapeError("channel attention needs positive channels and reduction");
    ChannelAttention a;
    a.channels = c;
    a.hidden = std::max<std::size_t>(1, c / reduction);
    const T b1 = static_cast<T>(1.0 / std::sqrt(static_cast<double>(c)));
    const T b2 = static_cast<T>(1.0 / std::sqrt(static_cast<double>(a.hidden)));
    a.w1 = Tensor<T>::uniform({c, a.hidden}, -b1, b1, rng, true);
    a.w2 = Tensor<T>::uniform({a.hidden, c}, -b2, b2, rng, true);
    return a;
  }
};

/// Spatial gate from channel-wise mean and max maps through a 7x7 projector.
template <typename T>
struct SpatialAttention {
  Tensor<T> kernel;  // 1 x 2 x 7 x 7

  template <typename Rng>
  static SpatialAttention make(Rng& rng, std::size_t size = 7) {
    SpatialAttention s;
    const T b = static_cast<T>(1.0 / std::sqrt(2.0 * static_cast<double>(size * size)));
    s.kernel = Tensor<T>::uniform({1, 2, size, size}, -b, b, rng, true);
    return s;
  }
};

/// Both gate flavours for one attention site; the active kind decides which
/// are used.
template <typename T>
struct AttentionUnit {
  ChannelAttention<T> channel;
  SpatialAttention<T> spatial;
};

/// Per-sample channel gate, n x c, entries in (0, 1).
template <typename T>
Tensor<T> channel_attention(const Tensor<T>& x, const ChannelAttention<T>& p) {
  if (x.rank() != 4) throw ShapeError("channel_attention expects n x c x h x w");
  if (x.dim(1) != p.channels || p.w1.dim(0) != p.channels || p.w1.dim(1) != p.hidden || p.w2.dim(0) != p.hidden ||
      p.w2.dim(1) != p.channels)
    throw ShapeError("channel attention weights do not match input channels " + std::to_string(x.dim(1)));
  auto pooled = pool(x, PoolKind::kAvg);
  return sigmoid(matmul(relu(matmul(pooled, p.w1)), p.w2));
}

/// Per-sample spatial mask, n x 1 x h x w.
template <typename T>
Tensor<T> spatial_attention(const Tensor<T>& x, const SpatialAttention<T>& p) {
  if (x.rank() != 4) throw ShapeError("spatial_attention expects n x c x h x w");
  const std::size_t k = p.kernel.dim(2);
  auto maps = concat<T>({mean(x, {1}, true), max_reduce(x, {1}, true)}, 1);
  return sigmoid(conv2d(maps, p.kernel, 1, k / 2));
}

/// The effective per-element gate for a decomposition: n x c x 1 x 1 (C),
/// n x 1 x h x w (S) or their broadcast product n x c x h x w (SC).
template <typename T>
Tensor<T> attention_variant(const Tensor<T>& x, AttentionKind kind, const AttentionUnit<T>& p) {
  switch (kind) {
    case AttentionKind::kChannel:
      return reshape(channel_attention(x, p.channel), {x.dim(0), x.dim(1), 1, 1});
    case AttentionKind::kSpatial: return spatial_attention(x, p.spatial);
    case AttentionKind::kSpatialChannel:
      return mul(reshape(channel_attention(x, p.channel), {x.dim(0), x.dim(1), 1, 1}), spatial_attention(x, p.spatial));
  }
  throw ValueError("unsupported attention kind");
}

template <typename T>
struct Split {
  Tensor<T> kept;  // gate * x
  Tensor<T> rest;  // (1 - gate) * x, formed as x - kept
};

namespace detail {
template <typename T>
Tensor<T> gate_as_4d(const Tensor<T>& x, const Tensor<T>& gate) {
  if (gate.rank() == 1) {
    if (gate.numel() != x.dim(1)) throw ShapeError("gate length does not match channel count");
    return as_channel(gate);
  }
  if (gate.rank() == 2) {
    if (gate.dim(0) != x.dim(0) || gate.dim(1) != x.dim(1)) throw ShapeError("gate n x c does not match input");
    return reshape(gate, {gate.dim(0), gate.dim(1), 1, 1});
  }
  return gate;
}
}  // namespace detail

/// Soft split: R = a * F~ (entangled), R- = (1 - a) * F~ (pure domain).
/// `gate` may be a length-c vector, n x c, or any shape broadcastable to x.
template <typename T>
Split<T> decompose_soft(const Tensor<T>& x, const Tensor<T>& gate) {
  auto kept = mul(detail::gate_as_4d(x, gate), x);
  if (kept.shape() != x.shape()) throw ShapeError("gate broadcast changes the feature shape");
  return {kept, sub(x, kept)};
}

/// Hard split of the entangled feature: R* = b * R, R+ = (1 - b) * R.
template <typename T>
Split<T> decompose_hard(const Tensor<T>& r, const Tensor<T>& gate) {
  return decompose_soft(r, gate);
}

template <typename T>
struct CFDParams {
  AttentionUnit<T> attn_a;
  AttentionUnit<T> attn_b;
  NormSlot<T> input_norm;  // on F
  NormSlot<T> id_norm;     // on the pure-id feature
  AttentionKind attention_kind = AttentionKind::kChannel;
  Decomposition kind = Decomposition::kCFD;
  bool enabled = true;
  /// Blocks gradient from the domain output into the shared R* edge.
  bool detach_entangled_in_domain = false;

  struct Options {
    std::size_t channels = 0;
    std::size_t domains = 1;
    std::size_t reduction = 16;
    NormKind input_norm = NormKind::kCSBN;
    NormKind id_norm = NormKind::kCIN;
    AttentionKind attention = AttentionKind::kChannel;
    Decomposition kind = Decomposition::kCFD;
    double eps = 1e-5;
    double momentum = 0.1;
    PoolKind calib_pool = PoolKind::kMax;
    MeanPath mean_path = MeanPath::kParamsAndStats;
    bool detach_entangled_in_domain = false;
  };

  template <typename Rng>
  static CFDParams make(const Options& o, Rng& rng) {
    CFDParams p;
    p.attn_a = {ChannelAttention<T>::make(o.channels, o.reduction, rng), SpatialAttention<T>::make(rng)};
    p.attn_b = {ChannelAttention<T>::make(o.channels, o.reduction, rng), SpatialAttention<T>::make(rng)};
    p.input_norm = NormSlot<T>::make(o.input_norm, o.channels, o.domains, o.eps, o.momentum, o.calib_pool, o.mean_path);
    p.id_norm = NormSlot<T>::make(o.id_norm, o.channels, o.domains, o.eps, o.momentum, o.calib_pool, o.mean_path);
    p.attention_kind = o.attention;
    p.kind = o.kind;
    p.detach_entangled_in_domain = o.detach_entangled_in_domain;
    return p;
  }

  /// Learnable leaves actually used by the configured kind and attention.
  void collect(const std::string& prefix, std::vector<std::pair<std::string, Tensor<T>>>& params,
               std::vector<std::pair<std::string, Tensor<T>>>& buffers) const {
    auto unit = [&](const std::string& name, const AttentionUnit<T>& u) {
      if (attention_kind != AttentionKind::kSpatial) {
        params.emplace_back(prefix + "." + name + ".w1", u.channel.w1);
        params.emplace_back(prefix + "." + name + ".w2", u.channel.w2);
      }
      if (attention_kind != AttentionKind::kChannel) params.emplace_back(prefix + "." + name + ".spatial", u.spatial.kernel);
    };
    if (kind != Decomposition::kNone) unit("attn_a", attn_a);
    if (kind == Decomposition::kCFD) unit("attn_b", attn_b);
    input_norm.collect(prefix + ".input_norm", params, buffers);
    id_norm.collect(prefix + ".id_norm", params, buffers);
  }
};

/// Every intermediate of one module application. Fields not produced by the
/// configured kind stay undefined.
template <typename T>
struct CFDOutput {
  Tensor<T> identity;  // R^I
  Tensor<T> domain;    // R^D
  Tensor<T> normalized;  // F~
  Tensor<T> gate_a, gate_b;
  Tensor<T> entangled_soft;  // R
  Tensor<T> pure_domain;     // R-
  Tensor<T> entangled_hard;  // R*
  Tensor<T> pure_id;         // R+
  Tensor<T> pure_id_normalized;
};

/// One module application. `domains` holds per-sample domain ids (used by
/// CSBN in train mode only).
template <typename T>
CFDOutput<T> cfd_forward(const Tensor<T>& f, CFDParams<T>& p, const std::vector<std::size_t>& domains, Mode mode) {
  CFDOutput<T> o;
  if (!p.enabled) {
    o.identity = f;
    o.domain = Tensor<T>::zeros(f.shape());
    return o;
  }
  o.normalized = p.input_norm.forward(f, domains, mode);
  switch (p.kind) {
    case Decomposition::kNone: {
      o.identity = p.id_norm.forward(o.normalized, domains, mode);
      o.domain = o.identity;
      break;
    }
    case Decomposition::kPFD: {
      o.gate_a = attention_variant(o.normalized, p.attention_kind, p.attn_a);
      auto s = decompose_soft(o.normalized, o.gate_a);
      o.pure_id = s.kept;
      o.pure_domain = s.rest;
      o.pure_id_normalized = p.id_norm.forward(o.pure_id, domains, mode);
      o.identity = o.pure_id_normalized;
      o.domain = o.pure_domain;
      break;
    }
    case Decomposition::kCFD: {
      o.gate_a = attention_variant(o.normalized, p.attention_kind, p.attn_a);
      auto soft = decompose_soft(o.normalized, o.gate_a);
      o.entangled_soft = soft.kept;
      o.pure_domain = soft.rest;
      o.gate_b = attention_variant(o.entangled_soft, p.attention_kind, p.attn_b);
      auto hard = decompose_hard(o.entangled_soft, o.gate_b);
      o.entangled_hard = hard.kept;
      o.pure_id = hard.rest;
      o.pure_id_normalized = p.id_norm.forward(o.pure_id, domains, mode);
      o.identity = add(o.pure_id_normalized, o.entangled_hard);
      o.domain = add(o.pure_domain, p.detach_entangled_in_domain ? o.entangled_hard.detach() : o.entangled_hard);
      break;
    }
  }
  return o;
}

}  // namespace cfd
