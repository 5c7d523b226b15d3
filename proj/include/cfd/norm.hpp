// SPDX-License-Identifier: Apache-2.0
//
// Normalization layers: plain batch/instance normalization, the centering
// calibration, the calibrated-and-standardized BN (per-domain statistics and
// affine with shared instance-driven calibration) and calibrated IN.
//
// Parameters are stored as length-c vectors and viewed as 1 x c x 1 x 1 when
// applied. Feature maps are n x c x h x w.
#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cfd/ops.hpp"

namespace cfd {

enum class Mode { kTrain, kEval };

/// How eval-mode CSBN aggregates the per-domain state for unseen domains.
enum class MeanPath {
  kParamsAndStats,  // average affine parameters and running statistics
  kStatsOnly,       // average running statistics, keep the caller's domain affine
};

enum class NormKind { kNone, kBN, kIN, kCSBN, kCIN };

inline const char* to_string(NormKind k) {
  switch (k) {
    case NormKind::kNone: return "none";
    case NormKind::kBN: return "BN";
    case NormKind::kIN: return "IN";
    case NormKind::kCSBN: return "CSBN";
    case NormKind::kCIN: return "CIN";
  }
  return "?";
}

inline NormKind parse_norm_kind(const std::string& s) {
  if (s == "none" || s == "-") return NormKind::kNone;
  if (s == "BN" || s == "bn") return NormKind::kBN;
  if (s == "IN" || s == "in") return NormKind::kIN;
  if (s == "CSBN" || s == "csbn") return NormKind::kCSBN;
  if (s == "CIN" || s == "cin") return NormKind::kCIN;
  throw ConfigError("unknown norm kind '" + s + "'");
}

template <typename T>
Tensor<T> as_channel(const Tensor<T>& v) {
  return reshape(v, {1, v.numel(), 1, 1});
}

/// Per-domain BN state plus the shared calibration vectors used by CSBN.
/// Plain BN over all source domains is the K = 1 case.
template <typename T>
struct BNState {
  std::size_t channels = 0;
  std::vector<Tensor<T>> gamma, beta;                // one per domain, learnable
  std::vector<Tensor<T>> running_mean, running_var;  // one per domain, buffers
  Tensor<T> w_m, w_gamma, w_beta;                    // shared calibration weights
  double eps = 1e-5;
  double momentum = 0.1;
  Mode mode = Mode::kTrain;
  MeanPath mean_path = MeanPath::kParamsAndStats;
  PoolKind calib_pool = PoolKind::kMax;

  static BNState make(std::size_t c, std::size_t domains) {
    if (c == 0) throw ShapeError("BNState needs at least one channel");
    if (domains == 0) throw DomainError("BNState needs at least one domain");
    BNState s;
    s.channels = c;
    for (std::size_t d = 0; d < domains; ++d) {
      s.gamma.push_back(Tensor<T>::full({c}, T(1), true));
      s.beta.push_back(Tensor<T>::zeros({c}, true));
      s.running_mean.push_back(Tensor<T>::zeros({c}));
      s.running_var.push_back(Tensor<T>::full({c}, T(1)));
    }
    s.w_m = Tensor<T>::zeros({c}, true);
    s.w_gamma = Tensor<T>::zeros({c}, true);
    s.w_beta = Tensor<T>::zeros({c}, true);
    return s;
  }

  std::size_t domains() const { return gamma.size(); }

  void check_domain(std::size_t d) const {
    if (d >= domains())
      throw DomainError("domain id " + std::to_string(d) + " unknown (state has " + std::to_string(domains()) + ")");
  }
};

/// Instance-norm affine plus the CIN calibration weights.
template <typename T>
struct INState {
  std::size_t channels = 0;
  Tensor<T> gamma, beta;
  Tensor<T> w_u, w_v, w_o;
  double eps = 1e-5;
  PoolKind calib_pool = PoolKind::kMax;

  static INState make(std::size_t c) {
    if (c == 0) throw ShapeError("INState needs at least one channel");
    INState s;
    s.channels = c;
    s.gamma = Tensor<T>::full({c}, T(1), true);
    s.beta = Tensor<T>::zeros({c}, true);
    s.w_u = Tensor<T>::zeros({c}, true);
    s.w_v = Tensor<T>::zeros({c}, true);
    s.w_o = Tensor<T>::zeros({c}, true);
    return s;
  }
};

namespace detail {

template <typename T>
void check_feature(const Tensor<T>& x, std::size_t c, const char* who) {
  if (x.rank() != 4) throw ShapeError(std::string(who) + " expects n x c x h x w, got " + to_string(x.shape()));
  if (x.dim(1) != c)
    throw ShapeError(std::string(who) + ": input has " + std::to_string(x.dim(1)) + " channels, state has " + std::to_string(c));
}

template <typename T>
Tensor<T> inv_std(const Tensor<T>& var, double eps) {
  return reciprocal(sqrt(add_scalar(var, static_cast<T>(eps))));
}

/// running <- (1 - m) * running + m * batch, elementwise over channels.
template <typename T>
void update_running(Tensor<T>& running, const Tensor<T>& batch, double momentum) {
  auto r = running.data();
  const auto b = batch.data();
  for (std::size_t i = 0; i < r.size(); ++i)
    r[i] = static_cast<T>((1.0 - momentum) * static_cast<double>(r[i]) + momentum * static_cast<double>(b[i]));
}

}  // namespace detail

/// Effective single-domain parameters used by CSBN at inference.
template <typename T>
struct MeanPathParams {
  Tensor<T> gamma, beta;
  Tensor<T> running_mean, running_var;
};

/// Arithmetic mean over domains of the affine parameters (graph-connected, so
/// eval-mode gradients still reach every domain) and of the running stats.
template <typename T>
MeanPathParams<T> csbn_inference_mean_path(const BNState<T>& s) {
  const std::size_t k = s.domains();
  if (k == 0) throw DomainError("mean path over zero domains");
  const T inv_k = T(1) / static_cast<T>(k);
  auto avg = [&](const std::vector<Tensor<T>>& v) {
    Tensor<T> acc = v[0];
    for (std::size_t d = 1; d < k; ++d) acc = add(acc, v[d]);
    return mul_scalar(acc, inv_k);
  };
  auto avg_buf = [&](const std::vector<Tensor<T>>& v) {
    std::vector<double> acc(s.channels, 0.0);
    for (const auto& t : v)
      for (std::size_t i = 0; i < s.channels; ++i) acc[i] += static_cast<double>(t[i]);
    std::vector<T> out(s.channels);
    for (std::size_t i = 0; i < s.channels; ++i) out[i] = static_cast<T>(acc[i] / static_cast<double>(k));
    return Tensor<T>({s.channels}, std::move(out));
  };
  return {avg(s.gamma), avg(s.beta), avg_buf(s.running_mean), avg_buf(s.running_var)};
}

/// Standardizes x with the domain's batch statistics (train, updating the
/// running statistics) or the given running statistics (eval).
template <typename T>
Tensor<T> bn_standardize(const Tensor<T>& x, BNState<T>& s, std::size_t domain, const Tensor<T>& eval_mean,
                         const Tensor<T>& eval_var) {
  if (s.mode == Mode::kTrain) {
    if (x.dim(0) * x.dim(2) * x.dim(3) < 2)
      throw ValueError("batch norm in train mode needs at least two values per channel");
    auto st = reduce_stats(x, {0, 2, 3});
    detail::update_running(s.running_mean[domain], st.mean, s.momentum);
    detail::update_running(s.running_var[domain], st.var, s.momentum);
    return mul(sub(x, st.mean), detail::inv_std(st.var, s.eps));
  }
  return mul(sub(x, as_channel(eval_mean)), detail::inv_std(as_channel(eval_var), s.eps));
}

/// Plain BN on one domain's slice (or the whole batch for K = 1).
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, BNState<T>& s, std::size_t domain = 0) {
  detail::check_feature(x, s.channels, "batch_norm");
  s.check_domain(domain);
  auto xhat = bn_standardize(x, s, domain, s.running_mean[domain], s.running_var[domain]);
  return add(mul(xhat, as_channel(s.gamma[domain])), as_channel(s.beta[domain]));
}

/// F + w_m * pool(F), the pooled per-sample channel vector broadcast over h x w.
template <typename T>
Tensor<T> centering_calibration(const Tensor<T>& x, const Tensor<T>& w_m, PoolKind kind) {
  if (x.rank() != 4) throw ShapeError("centering_calibration expects n x c x h x w");
  if (w_m.numel() != x.dim(1))
    throw ShapeError("calibration weight has length " + std::to_string(w_m.numel()) + ", input has " +
                     std::to_string(x.dim(1)) + " channels");
  auto pooled = reshape(pool(x, kind), {x.dim(0), x.dim(1), 1, 1});
  return add(x, mul(as_channel(w_m), pooled));
}

/// Intermediates of one CSBN application.
template <typename T>
struct CsbnTrace {
  Tensor<T> calibrated;    // F^c
  Tensor<T> standardized;  // pre-affine, pre-gate
  Tensor<T> gate;
  Tensor<T> out;
};

template <typename T>
CsbnTrace<T> csbn_traced(const Tensor<T>& x, BNState<T>& s, std::size_t domain) {
  detail::check_feature(x, s.channels, "csbn");
  CsbnTrace<T> tr;
  tr.calibrated = centering_calibration(x, s.w_m, s.calib_pool);
  Tensor<T> gamma, beta;
  if (s.mode == Mode::kTrain) {
    s.check_domain(domain);
    tr.standardized = bn_standardize(tr.calibrated, s, domain, s.running_mean[domain], s.running_var[domain]);
    gamma = s.gamma[domain];
    beta = s.beta[domain];
  } else {
    auto mp = csbn_inference_mean_path(s);
    tr.standardized = bn_standardize(tr.calibrated, s, domain, mp.running_mean, mp.running_var);
    if (s.mean_path == MeanPath::kParamsAndStats) {
      gamma = mp.gamma;
      beta = mp.beta;
    } else {
      s.check_domain(domain);
      gamma = s.gamma[domain];
      beta = s.beta[domain];
    }
  }
  tr.gate = sigmoid(add(mul(as_channel(s.w_gamma), tr.calibrated), as_channel(s.w_beta)));
  tr.out = mul(add(mul(tr.standardized, as_channel(gamma)), as_channel(beta)), tr.gate);
  return tr;
}

template <typename T>
Tensor<T> csbn(const Tensor<T>& x, BNState<T>& s, std::size_t domain) {
  return csbn_traced(x, s, domain).out;
}

template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, const INState<T>& s) {
  detail::check_feature(x, s.channels, "instance_norm");
  if (x.dim(2) * x.dim(3) < 2) throw ValueError("instance norm needs at least two spatial positions");
  auto st = reduce_stats(x, {2, 3});
  auto xhat = mul(sub(x, st.mean), detail::inv_std(st.var, s.eps));
  return add(mul(xhat, as_channel(s.gamma)), as_channel(s.beta));
}

/// Calibrated IN. The standardizing statistics are those of the
/// uncalibrated input.
template <typename T>
Tensor<T> cin(const Tensor<T>& x, const INState<T>& s) {
  detail::check_feature(x, s.channels, "cin");
  if (x.dim(2) * x.dim(3) < 2) throw ValueError("calibrated instance norm needs at least two spatial positions");
  auto st = reduce_stats(x, {2, 3});
  auto calibrated = centering_calibration(x, s.w_u, s.calib_pool);
  auto xhat = mul(sub(calibrated, st.mean), detail::inv_std(st.var, s.eps));
  auto affine = add(mul(xhat, as_channel(s.gamma)), as_channel(s.beta));
  auto gate = sigmoid(add(mul(as_channel(s.w_v), calibrated), as_channel(s.w_o)));
  return mul(affine, gate);
}

/// Splits a mixed-domain batch into per-domain slices, applies `fn` to each
/// and restores the original row order.
template <typename T, typename Fn>
Tensor<T> apply_per_domain(const Tensor<T>& x, const std::vector<std::size_t>& domains, Fn&& fn) {
  if (domains.size() != x.dim(0)) throw ShapeError("domain label count does not match batch size");
  std::map<std::size_t, std::vector<std::size_t>> rows;
  for (std::size_t i = 0; i < domains.size(); ++i) rows[domains[i]].push_back(i);
  if (rows.size() == 1) return fn(x, rows.begin()->first);
  std::vector<Tensor<T>> parts;
  std::vector<std::size_t> order;
  for (auto& [d, idx] : rows) {
    parts.push_back(fn(index_select0(x, idx), d));
    order.insert(order.end(), idx.begin(), idx.end());
  }
  auto joined = concat(parts, 0);
  bool identity = true;
  for (std::size_t i = 0; i < order.size(); ++i) identity = identity && order[i] == i;
  if (identity) return joined;
  std::vector<std::size_t> inverse(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) inverse[order[i]] = i;
  return index_select0(joined, inverse);
}

/// A normalization position inside the decomposition module; holds the state
/// for whichever kind is selected.
template <typename T>
struct NormSlot {
  NormKind kind = NormKind::kNone;
  BNState<T> bn;  // BN (K = 1) or CSBN (K domains)
  INState<T> in;  // IN or CIN

  static NormSlot make(NormKind kind, std::size_t c, std::size_t domains, double eps, double momentum,
                       PoolKind calib_pool, MeanPath mean_path) {
    NormSlot s;
    s.kind = kind;
    if (kind == NormKind::kBN || kind == NormKind::kCSBN) {
      s.bn = BNState<T>::make(c, kind == NormKind::kBN ? 1 : domains);
      s.bn.eps = eps;
      s.bn.momentum = momentum;
      s.bn.calib_pool = calib_pool;
      s.bn.mean_path = mean_path;
    } else if (kind == NormKind::kIN || kind == NormKind::kCIN) {
      s.in = INState<T>::make(c);
      s.in.eps = eps;
      s.in.calib_pool = calib_pool;
    }
    return s;
  }

  Tensor<T> forward(const Tensor<T>& x, const std::vector<std::size_t>& domains, Mode mode) {
    switch (kind) {
      case NormKind::kNone: return x;
      case NormKind::kIN: return instance_norm(x, in);
      case NormKind::kCIN: return cin(x, in);
      case NormKind::kBN:
        bn.mode = mode;
        return batch_norm(x, bn, 0);
      case NormKind::kCSBN:
        bn.mode = mode;
        if (mode == Mode::kEval) return csbn(x, bn, domains.empty() ? 0 : domains[0]);
        return apply_per_domain(x, domains, [this](const Tensor<T>& part, std::size_t d) { return csbn(part, bn, d); });
    }
    throw ValueError("unknown norm kind");
  }

  void collect(const std::string& prefix, std::vector<std::pair<std::string, Tensor<T>>>& params,
               std::vector<std::pair<std::string, Tensor<T>>>& buffers) const {
    if (kind == NormKind::kBN || kind == NormKind::kCSBN) {
      for (std::size_t d = 0; d < bn.domains(); ++d) {
        const auto ds = std::to_string(d);
        params.emplace_back(prefix + ".gamma." + ds, bn.gamma[d]);
        params.emplace_back(prefix + ".beta." + ds, bn.beta[d]);
        buffers.emplace_back(prefix + ".running_mean." + ds, bn.running_mean[d]);
        buffers.emplace_back(prefix + ".running_var." + ds, bn.running_var[d]);
      }
      if (kind == NormKind::kCSBN) {
        params.emplace_back(prefix + ".w_m", bn.w_m);
        params.emplace_back(prefix + ".w_gamma", bn.w_gamma);
        params.emplace_back(prefix + ".w_beta", bn.w_beta);
      }
    } else if (kind == NormKind::kIN || kind == NormKind::kCIN) {
      params.emplace_back(prefix + ".gamma", in.gamma);
      params.emplace_back(prefix + ".beta", in.beta);
      if (kind == NormKind::kCIN) {
        params.emplace_back(prefix + ".w_u", in.w_u);
        params.emplace_back(prefix + ".w_v", in.w_v);
        params.emplace_back(prefix + ".w_o", in.w_o);
      }
    }
  }
};

}  // namespace cfd
