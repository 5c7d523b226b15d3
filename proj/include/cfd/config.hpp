// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: JSON file plus dotted-path overrides
// (e.g. "optim.epochs=10", "model.cfd_stages=[3]").
#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "cfd/data.hpp"
#include "cfd/losses.hpp"
#include "cfd/metrics.hpp"
#include "cfd/model.hpp"

namespace cfd {

struct OptimConfig {
  std::string kind = "sgd";  // sgd | adam
  double lr = 3.5e-4;
  double momentum = 0.9;  // sgd
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  double weight_decay = 5e-4;
  std::size_t epochs = 30;
  double decay_at = 2.0 / 3.0;  // fraction of epochs after which lr is scaled once
  double decay_factor = 0.1;
  std::size_t ids_per_domain = 4;     // P
  std::size_t images_per_id = 4;      // K
  std::size_t iterations_per_epoch = 0;  // 0: derived from the dataset
};

struct RunConfig {
  std::string name = "default";
  BackboneConfig model;
  LossWeights loss;
  bool domain_loss = true;
  double label_smoothing = 0.0;
  SyntheticSpec data;
  OptimConfig optim;
  EvalOptions eval;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};

  /// Copies dataset-derived extents into the model config and checks
  /// everything.
  void finalize() {
    model.num_ids = data.identities;
    model.num_domains = data.train_domains;
    model.in_channels = data.channels;
    model.in_height = data.height;
    model.in_width = data.width;
    model.validate();
    loss.validate();
    data.validate();
    if (optim.kind != "adam" && optim.kind != "sgd") throw ConfigError("optim.kind must be adam or sgd");
    if (!(optim.lr > 0) || optim.epochs == 0) throw ConfigError("optim.lr and optim.epochs must be positive");
    if (optim.decay_at < 0 || optim.decay_at > 1) throw ConfigError("optim.decay_at must lie in [0, 1]");
    if (seeds.empty()) throw ConfigError("at least one seed is required");
  }

  /// Effective per-stage weights after the domain-loss switch.
  LossWeights effective_weights() const {
    LossWeights w = loss;
    if (!domain_loss) w.lambda = {0, 0, 0, 0};
    return w;
  }
};

// ---------------------------------------------------------------- json mapping

inline void to_json(nlohmann::json& j, const DomainStyle& s) {
  j = {{"gain", s.gain}, {"offset", s.offset}, {"contrast", s.contrast}, {"noise", s.noise}};
}
inline void from_json(const nlohmann::json& j, DomainStyle& s) {
  j.at("gain").get_to(s.gain);
  j.at("offset").get_to(s.offset);
  j.at("contrast").get_to(s.contrast);
  j.at("noise").get_to(s.noise);
}

inline void to_json(nlohmann::json& j, const BackboneConfig& c) {
  j = {{"widths", c.widths},
       {"strides", c.strides},
       {"cfd_stages", c.cfd_stages},
       {"decomposition", to_string(c.decomposition)},
       {"input_norm", to_string(c.input_norm)},
       {"id_norm", to_string(c.id_norm)},
       {"attention", to_string(c.attention)},
       {"domain_heads", to_string(c.domain_heads)},
       {"embedding_dim", c.embedding_dim},
       {"reduction", c.reduction},
       {"calib_pool", to_string(c.calib_pool)},
       {"mean_path", to_string(c.mean_path)},
       {"detach_entangled_in_domain", c.detach_entangled_in_domain},
       {"eps", c.eps},
       {"momentum", c.momentum},
       {"gem_p", c.gem_p}};
}
inline void from_json(const nlohmann::json& j, BackboneConfig& c) {
  j.at("widths").get_to(c.widths);
  j.at("strides").get_to(c.strides);
  j.at("cfd_stages").get_to(c.cfd_stages);
  c.decomposition = parse_decomposition(j.at("decomposition").get<std::string>());
  c.input_norm = parse_norm_kind(j.at("input_norm").get<std::string>());
  c.id_norm = parse_norm_kind(j.at("id_norm").get<std::string>());
  c.attention = parse_attention_kind(j.at("attention").get<std::string>());
  c.domain_heads = parse_domain_heads(j.at("domain_heads").get<std::string>());
  j.at("embedding_dim").get_to(c.embedding_dim);
  j.at("reduction").get_to(c.reduction);
  c.calib_pool = parse_pool_kind(j.at("calib_pool").get<std::string>());
  if (c.calib_pool == PoolKind::kGem) throw ConfigError("calib_pool must be avg or max");
  c.mean_path = parse_mean_path(j.at("mean_path").get<std::string>());
  j.at("detach_entangled_in_domain").get_to(c.detach_entangled_in_domain);
  j.at("eps").get_to(c.eps);
  j.at("momentum").get_to(c.momentum);
  j.at("gem_p").get_to(c.gem_p);
}

inline void to_json(nlohmann::json& j, const SyntheticSpec& s) {
  j = {{"identities", s.identities},   {"images_per_identity", s.images_per_identity},
       {"train_domains", s.train_domains}, {"height", s.height},
       {"width", s.width},             {"styles", s.styles},
       {"min_style_distance", s.min_style_distance}, {"seed", s.seed}};
}
inline void from_json(const nlohmann::json& j, SyntheticSpec& s) {
  j.at("identities").get_to(s.identities);
  j.at("images_per_identity").get_to(s.images_per_identity);
  j.at("train_domains").get_to(s.train_domains);
  j.at("height").get_to(s.height);
  j.at("width").get_to(s.width);
  j.at("styles").get_to(s.styles);
  j.at("min_style_distance").get_to(s.min_style_distance);
  j.at("seed").get_to(s.seed);
}

inline void to_json(nlohmann::json& j, const OptimConfig& o) {
  j = {{"kind", o.kind},
       {"lr", o.lr},
       {"momentum", o.momentum},
       {"beta1", o.beta1},
       {"beta2", o.beta2},
       {"adam_eps", o.adam_eps},
       {"weight_decay", o.weight_decay},
       {"epochs", o.epochs},
       {"decay_at", o.decay_at},
       {"decay_factor", o.decay_factor},
       {"ids_per_domain", o.ids_per_domain},
       {"images_per_id", o.images_per_id},
       {"iterations_per_epoch", o.iterations_per_epoch}};
}
inline void from_json(const nlohmann::json& j, OptimConfig& o) {
  j.at("kind").get_to(o.kind);
  j.at("lr").get_to(o.lr);
  j.at("momentum").get_to(o.momentum);
  j.at("beta1").get_to(o.beta1);
  j.at("beta2").get_to(o.beta2);
  j.at("adam_eps").get_to(o.adam_eps);
  j.at("weight_decay").get_to(o.weight_decay);
  j.at("epochs").get_to(o.epochs);
  j.at("decay_at").get_to(o.decay_at);
  j.at("decay_factor").get_to(o.decay_factor);
  j.at("ids_per_domain").get_to(o.ids_per_domain);
  j.at("images_per_id").get_to(o.images_per_id);
  j.at("iterations_per_epoch").get_to(o.iterations_per_epoch);
}

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"name", c.name},
       {"model", c.model},
       {"loss",
        {{"lambda", c.loss.lambda},
         {"margin", c.loss.margin},
         {"domain_loss", c.domain_loss},
         {"label_smoothing", c.label_smoothing}}},
       {"data", c.data},
       {"optim", c.optim},
       {"eval", {{"l2_normalize", c.eval.l2_normalize}}},
       {"seeds", c.seeds}};
}
inline void from_json(const nlohmann::json& j, RunConfig& c) {
  j.at("name").get_to(c.name);
  j.at("model").get_to(c.model);
  const auto& l = j.at("loss");
  l.at("lambda").get_to(c.loss.lambda);
  l.at("margin").get_to(c.loss.margin);
  l.at("domain_loss").get_to(c.domain_loss);
  l.at("label_smoothing").get_to(c.label_smoothing);
  j.at("data").get_to(c.data);
  j.at("optim").get_to(c.optim);
  j.at("eval").at("l2_normalize").get_to(c.eval.l2_normalize);
  j.at("seeds").get_to(c.seeds);
}

namespace detail {
/// Overlays `patch` onto `base`, rejecting keys that `base` does not have.
inline void merge_known(nlohmann::json& base, const nlohmann::json& patch, const std::string& path) {
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string p = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + p + "'");
    if (base[it.key()].is_object() && it.value().is_object()) merge_known(base[it.key()], it.value(), p);
    else base[it.key()] = it.value();
  }
}
}  // namespace detail

/// Applies "a.b.c=value" overrides; values are parsed as JSON, falling back
/// to a plain string.
inline RunConfig apply_overrides(const RunConfig& cfg, const std::vector<std::string>& overrides) {
  nlohmann::json j = cfg;
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + o + "' is not path=value");
    const std::string path = o.substr(0, eq);
    const std::string raw = o.substr(eq + 1);
    nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    nlohmann::json* node = &j;
    std::size_t start = 0;
    while (true) {
      const auto dot = path.find('.', start);
      const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (!node->is_object() || !node->contains(key)) throw ConfigError("unknown config key '" + path + "'");
      node = &(*node)[key];
      if (dot == std::string::npos) break;
      start = dot + 1;
    }
    *node = value;
  }
  try {
    auto out = j.get<RunConfig>();
    out.finalize();
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad override value: ") + e.what());
  }
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read config '" + path + "'");
  nlohmann::json patch = nlohmann::json::parse(f, nullptr, false, true);
  if (patch.is_discarded()) throw ConfigError("config '" + path + "' is not valid JSON");
  nlohmann::json base = RunConfig{};
  detail::merge_known(base, patch, "");
  try {
    auto out = base.get<RunConfig>();
    out.finalize();
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
}

inline RunConfig default_config() {
  RunConfig c;
  c.finalize();
  return c;
}

}  // namespace cfd
