// SPDX-License-Identifier: Apache-2.0
//
// Training, unseen-domain evaluation and the ablation grids.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "cfd/config.hpp"
#include "cfd/data.hpp"
#include "cfd/losses.hpp"
#include "cfd/metrics.hpp"
#include "cfd/model.hpp"

namespace cfd {

// ------------------------------------------------------------------ optimizer

/// SGD with momentum or Adam, both with L2 weight decay folded into the
/// gradient. The GeM exponent is exempt from decay and kept >= 1.
template <typename T>
class Optimizer {
 public:
  Optimizer(typename ModelParams<T>::Named params, const OptimConfig& cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& [name, t] : params_) {
      m_.emplace_back(t.numel(), 0.0);
      v_.emplace_back(cfg.kind == "adam" ? t.numel() : 0, 0.0);
    }
  }

  void zero_grad() {
    for (auto& [name, t] : params_) t.zero_grad();
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& [name, p] = params_[k];
      if (!p.has_grad()) continue;
      const bool is_gem = name == "gem_p";
      const double wd = is_gem ? 0.0 : cfg_.weight_decay;
      auto values = p.data();
      const auto g = p.grad_span();
      auto& m = m_[k];
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double grad = static_cast<double>(g[i]) + wd * static_cast<double>(values[i]);
        double update;
        if (cfg_.kind == "adam") {
          m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * grad;
          v_[k][i] = cfg_.beta2 * v_[k][i] + (1.0 - cfg_.beta2) * grad * grad;
          update = (m[i] / bc1) / (std::sqrt(v_[k][i] / bc2) + cfg_.adam_eps);
        } else {
          m[i] = cfg_.momentum * m[i] + grad;
          update = m[i];
        }
        values[i] = static_cast<T>(static_cast<double>(values[i]) - lr * update);
      }
      if (is_gem) values[0] = std::max(values[0], T(1));
    }
  }

 private:
  typename ModelParams<T>::Named params_;
  OptimConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

/// Learning rate for a 0-based epoch under the single step decay.
inline double lr_at_epoch(const OptimConfig& o, std::size_t epoch) {
  const auto decay_epoch = static_cast<std::size_t>(std::llround(static_cast<double>(o.epochs) * o.decay_at));
  return epoch >= decay_epoch ? o.lr * o.decay_factor : o.lr;
}

// ------------------------------------------------------------------- training

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double lr = 0.0;
  double total = 0.0, id = 0.0, triplet = 0.0, domain = 0.0;
  double id_accuracy = 0.0;
};

struct TrainResult {
  ModelParams<float> model;
  std::vector<EpochLog> log;
  double seconds = 0.0;
};

using EpochCallback = std::function<void(const EpochLog&)>;

/// Trains one model. The dataset is fixed by the data seed; `seed` drives
/// initialization and batch sampling.
inline TrainResult train(const RunConfig& cfg, const Dataset& ds, std::uint64_t seed, const EpochCallback& on_epoch = {}) {
  const auto start = std::chrono::steady_clock::now();
  TrainResult r;
  r.model = init_model<float>(cfg.model, seed);
  auto& model = r.model;
  PKSampler sampler(ds, cfg.optim.ids_per_domain, cfg.optim.images_per_id, seed ^ 0x5bd1e995ULL);
  Optimizer<float> opt(model.parameters(), cfg.optim);
  const auto weights = cfg.effective_weights();
  const std::size_t iters = cfg.optim.iterations_per_epoch ? cfg.optim.iterations_per_epoch : sampler.iterations_per_epoch();
  long step = 0;
  for (std::size_t e = 0; e < cfg.optim.epochs; ++e) {
    EpochLog row;
    row.epoch = e + 1;
    row.lr = lr_at_epoch(cfg.optim, e);
    std::size_t correct = 0, seen = 0;
    for (std::size_t it = 0; it < iters; ++it, ++step) {
      auto batch = make_batch<float>(ds, sampler.next());
      auto out = forward(batch.images, model, batch.domains, Mode::kTrain);
      LossParts<float> parts;
      parts.id = id_loss(out.id_logits, batch.identities, cfg.label_smoothing);
      parts.triplet = triplet_loss(out.global_feature, batch.identities, weights.margin).loss;
      double dom_sum = 0.0;
      for (std::size_t k = 0; k < out.domain_logits.size(); ++k) {
        auto l = domain_loss(out.domain_logits[k], batch.domains);
        dom_sum += l.item();
        parts.domain.emplace_back(out.domain_stages[k], l);
      }
      auto loss = total_loss(parts, weights);
      if (!std::isfinite(loss.item()))
        throw DivergenceError(step, "non-finite loss at step " + std::to_string(step) + " (epoch " + std::to_string(e + 1) + ")");
      opt.zero_grad();
      backward(loss);
      opt.step(row.lr);
      row.total += loss.item();
      row.id += parts.id.item();
      row.triplet += parts.triplet.item();
      row.domain += out.domain_logits.empty() ? 0.0 : dom_sum / static_cast<double>(out.domain_logits.size());
      const auto logits = out.id_logits.data();
      const std::size_t ids = out.id_logits.dim(1);
      for (std::size_t i = 0; i < batch.identities.size(); ++i) {
        const auto* rowp = logits.data() + i * ids;
        correct += static_cast<std::size_t>(std::max_element(rowp, rowp + ids) - rowp) == batch.identities[i];
        ++seen;
      }
    }
    const double inv = 1.0 / static_cast<double>(iters);
    row.total *= inv;
    row.id *= inv;
    row.triplet *= inv;
    row.domain *= inv;
    row.id_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
    r.log.push_back(row);
    if (on_epoch) on_epoch(row);
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

// ----------------------------------------------------------------- evaluation

struct Metrics {
  double mAP = 0.0;
  double r1 = 0.0, r5 = 0.0, r10 = 0.0;
  std::size_t queries = 0, gallery = 0, excluded = 0;
  double random_mAP = 0.0;  // expected mAP of a uniformly random ranking

  bool operator==(const Metrics&) const = default;
};

inline void to_json(nlohmann::json& j, const Metrics& m) {
  j = {{"mAP", m.mAP},       {"rank1", m.r1},   {"rank5", m.r5},           {"rank10", m.r10},
       {"queries", m.queries}, {"gallery", m.gallery}, {"excluded_queries", m.excluded}, {"random_mAP", m.random_mAP}};
}

/// Eval-mode embeddings of the listed samples. `domain_labels` is passed to
/// the model unchanged (empty: none supplied).
template <typename T>
EmbeddingSet embed(ModelParams<T>& m, const Dataset& ds, const std::vector<std::size_t>& indices,
                   const std::vector<std::size_t>& domain_labels = {}, std::size_t batch = 64) {
  NoGradGuard ng;
  EmbeddingSet out;
  out.dim = m.config.embedding();
  for (std::size_t s = 0; s < indices.size(); s += batch) {
    const std::vector<std::size_t> chunk(indices.begin() + static_cast<long>(s),
                                         indices.begin() + static_cast<long>(std::min(indices.size(), s + batch)));
    auto b = make_batch<T>(ds, chunk);
    std::vector<std::size_t> labels;
    if (!domain_labels.empty())
      labels.assign(domain_labels.begin() + static_cast<long>(s), domain_labels.begin() + static_cast<long>(s + chunk.size()));
    auto f = forward(b.images, m, labels, Mode::kEval);
    for (T v : f.embedding.data()) out.values.push_back(static_cast<double>(v));
    for (auto i : chunk) {
      out.identities.push_back(ds.samples[i].identity);
      out.cameras.push_back(camera_of(ds.samples[i]));
    }
  }
  return out;
}

/// Analytic random-ranking mAP for the split after same-camera filtering.
inline double random_baseline(const EmbeddingSet& q, const EmbeddingSet& g) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    std::size_t size = 0, matches = 0;
    for (std::size_t j = 0; j < g.size(); ++j) {
      const bool same_id = g.identities[j] == q.identities[i];
      if (same_id && g.cameras[j] == q.cameras[i]) continue;
      ++size;
      matches += same_id;
    }
    if (matches == 0) continue;
    sum += random_ranking_ap(size, matches);
    ++n;
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

template <typename T>
Metrics evaluate_model(ModelParams<T>& m, const Dataset& ds, const EvalOptions& opt = {}) {
  const auto split = unseen_split(ds);
  auto q = embed(m, ds, split.query);
  auto g = embed(m, ds, split.gallery);
  const auto r = evaluate(q, g, opt);
  Metrics out;
  out.mAP = r.mAP;
  out.r1 = r.rank(1);
  out.r5 = r.rank(5);
  out.r10 = r.rank(10);
  out.queries = q.size();
  out.gallery = g.size();
  out.excluded = r.excluded_queries;
  out.random_mAP = random_baseline(q, g);
  return out;
}

// ------------------------------------------------------------------- ablation

struct GridCell {
  std::string name;
  std::function<void(RunConfig&)> apply;
};

namespace detail {

inline void set_module(RunConfig& c, Decomposition d, NormKind input, NormKind id) {
  c.model.decomposition = d;
  c.model.input_norm = input;
  c.model.id_norm = id;
}

inline void set_baseline(RunConfig& c) {
  set_module(c, Decomposition::kNone, NormKind::kNone, NormKind::kNone);
  c.model.domain_heads = DomainHeads::kAuto;
  c.domain_loss = false;
}

/// Domain loss off: no heads at all, so the cell trains exactly the same
/// network as with zero weights.
inline void domain_loss_off(RunConfig& c) {
  c.domain_loss = false;
  c.model.domain_heads = DomainHeads::kOff;
}

}  // namespace detail

inline const std::vector<std::string>& grid_names() {
  static const std::vector<std::string> names{"compo", "norm-placement", "stage", "domain-loss", "attention", "pfd-vs-cfd"};
  return names;
}

/// Cells of a named grid, applied on top of the full default model.
inline std::vector<GridCell> grid_cells(const std::string& grid) {
  using D = Decomposition;
  using N = NormKind;
  std::vector<GridCell> cells;
  if (grid == "compo") {
    for (int cdm = 0; cdm < 2; ++cdm)
      for (int cin_on = 0; cin_on < 2; ++cin_on)
        for (int csbn_on = 0; csbn_on < 2; ++csbn_on) {
          const std::string name = std::string("CDM=") + (cdm ? "on" : "off") + " CIN=" + (cin_on ? "on" : "off") +
                                   " CSBN=" + (csbn_on ? "on" : "off");
          cells.push_back({name, [=](RunConfig& c) {
                             detail::set_module(c, cdm ? D::kCFD : D::kNone, csbn_on ? N::kCSBN : N::kNone,
                                                cin_on ? N::kCIN : N::kNone);
                             c.model.domain_heads = DomainHeads::kAuto;
                             c.domain_loss = cdm != 0;
                           }});
        }
  } else if (grid == "norm-placement") {
    const std::vector<std::pair<N, N>> rows{
        {N::kNone, N::kNone}, {N::kNone, N::kIN},   {N::kBN, N::kNone},   {N::kBN, N::kIN},
        {N::kNone, N::kBN},   {N::kIN, N::kNone},   {N::kIN, N::kBN},     {N::kNone, N::kCSBN},
        {N::kCIN, N::kNone},  {N::kCIN, N::kCSBN},  {N::kCSBN, N::kNone}, {N::kCSBN, N::kCSBN},
        {N::kNone, N::kCIN},  {N::kBN, N::kCIN},    {N::kCSBN, N::kIN},   {N::kCSBN, N::kCIN}};
    for (auto [in, id] : rows)
      cells.push_back({std::string("input=") + to_string(in) + " id=" + to_string(id),
                       [=](RunConfig& c) { detail::set_module(c, D::kCFD, in, id); }});
  } else if (grid == "stage") {
    const std::vector<std::set<int>> rows{{1}, {2}, {3}, {4}, {1, 2, 3, 4}};
    for (const auto& s : rows) {
      std::string name = "stages=";
      for (int v : s) name += std::to_string(v);
      cells.push_back({name, [=](RunConfig& c) { c.model.cfd_stages = s; }});
    }
  } else if (grid == "domain-loss") {
    cells.push_back({"B", [](RunConfig& c) { detail::set_baseline(c); }});
    cells.push_back({"B+DL", [](RunConfig& c) {
                       detail::set_baseline(c);
                       c.model.domain_heads = DomainHeads::kOn;
                       c.domain_loss = true;
                     }});
    cells.push_back({"B+DL+CFD", [](RunConfig& c) {
                       detail::set_module(c, D::kCFD, N::kNone, N::kNone);
                       c.domain_loss = true;
                     }});
    cells.push_back({"B+CFD+CSBN+CIN", [](RunConfig& c) { detail::domain_loss_off(c); }});
    cells.push_back({"B+DL+CFD+CSBN+CIN", [](RunConfig&) {}});
  } else if (grid == "attention") {
    cells.push_back({"baseline", [](RunConfig& c) { detail::set_baseline(c); }});
    cells.push_back({"S", [](RunConfig& c) { c.model.attention = AttentionKind::kSpatial; }});
    cells.push_back({"C", [](RunConfig& c) { c.model.attention = AttentionKind::kChannel; }});
    cells.push_back({"SC", [](RunConfig& c) { c.model.attention = AttentionKind::kSpatialChannel; }});
  } else if (grid == "pfd-vs-cfd") {
    for (int norms = 0; norms < 2; ++norms) {
      const N in = norms ? N::kCSBN : N::kNone, id = norms ? N::kCIN : N::kNone;
      const std::string suffix = norms ? "+CIN+CSBN" : "";
      cells.push_back({"baseline" + suffix, [=](RunConfig& c) {
                         detail::set_baseline(c);
                         detail::set_module(c, D::kNone, in, id);
                       }});
      cells.push_back({"PFD" + suffix, [=](RunConfig& c) {
                         detail::set_module(c, D::kPFD, in, id);
                         c.domain_loss = true;
                       }});
      cells.push_back({"CFD" + suffix, [=](RunConfig& c) {
                         detail::set_module(c, D::kCFD, in, id);
                         c.domain_loss = true;
                       }});
    }
  } else {
    throw ConfigError("unknown ablation grid '" + grid + "'");
  }
  return cells;
}

struct SeedRun {
  std::uint64_t seed = 0;
  Metrics metrics;
  std::vector<EpochLog> log;
  double seconds = 0.0;
};

struct Spread {
  double median = 0.0, min = 0.0, max = 0.0;
};

inline Spread spread(std::vector<double> v) {
  if (v.empty()) return {};
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  const double med = n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  return {med, v.front(), v.back()};
}

struct CellResult {
  std::string name;
  RunConfig config;
  std::vector<SeedRun> runs;

  Spread mAP() const {
    std::vector<double> v;
    for (const auto& r : runs) v.push_back(r.metrics.mAP);
    return spread(v);
  }
  Spread rank1() const {
    std::vector<double> v;
    for (const auto& r : runs) v.push_back(r.metrics.r1);
    return spread(v);
  }
  double max_seconds() const {
    double m = 0.0;
    for (const auto& r : runs) m = std::max(m, r.seconds);
    return m;
  }
  double map_for(std::uint64_t seed) const {
    for (const auto& r : runs)
      if (r.seed == seed) return r.metrics.mAP;
    throw ValueError("no run for seed " + std::to_string(seed));
  }
};

struct DirectionalCheck {
  std::string description;
  bool passed = false;
  std::string detail;
};

struct AblationReport {
  std::string grid;
  std::vector<CellResult> cells;
  std::vector<DirectionalCheck> checks;

  const CellResult& cell(const std::string& name) const {
    for (const auto& c : cells)
      if (c.name == name) return c;
    throw ValueError("grid '" + grid + "' has no cell '" + name + "'");
  }
};

/// Memoizes (config, seed) -> run so cells shared between grids train once.
/// The key ignores the run name and seed list, which do not affect training.
class RunCache {
 public:
  const SeedRun& get(const RunConfig& cfg, const Dataset& ds, std::uint64_t seed) {
    nlohmann::json j = cfg;
    j.erase("name");
    j.erase("seeds");
    const std::string key = j.dump() + "#" + std::to_string(seed);
    auto it = runs_.find(key);
    if (it != runs_.end()) return it->second;
    auto t = train(cfg, ds, seed);
    SeedRun r;
    r.seed = seed;
    r.metrics = evaluate_model(t.model, ds, cfg.eval);
    r.log = std::move(t.log);
    r.seconds = t.seconds;
    ++trained_;
    return runs_.emplace(key, std::move(r)).first->second;
  }
  std::size_t trained() const { return trained_; }

 private:
  std::map<std::string, SeedRun> runs_;
  std::size_t trained_ = 0;
};

namespace detail {

inline std::string fmt_map(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
  return buf;
}

/// How many seeds satisfy `pred(seed)`.
template <typename Pred>
std::size_t count_seeds(const std::vector<std::uint64_t>& seeds, Pred pred) {
  std::size_t n = 0;
  for (auto s : seeds) n += pred(s) ? 1 : 0;
  return n;
}

inline std::size_t required_seeds(std::size_t n) { return n >= 5 ? n - 1 : n; }

inline std::vector<DirectionalCheck> grid_checks(const AblationReport& rep, const std::vector<std::uint64_t>& seeds) {
  std::vector<DirectionalCheck> out;
  const std::size_t need = required_seeds(seeds.size());
  if (rep.grid == "compo") {
    const auto& full = rep.cell("CDM=on CIN=on CSBN=on");
    const auto& base = rep.cell("CDM=off CIN=off CSBN=off");
    const std::vector<const CellResult*> singles{&rep.cell("CDM=off CIN=on CSBN=off"), &rep.cell("CDM=off CIN=off CSBN=on"),
                                                 &rep.cell("CDM=on CIN=on CSBN=off"), &rep.cell("CDM=on CIN=off CSBN=on")};
    DirectionalCheck order{"median mAP: full >= each single-norm variant >= baseline", true, ""};
    for (const auto* s : singles) {
      const bool ok = full.mAP().median >= s->mAP().median && s->mAP().median >= base.mAP().median;
      order.passed = order.passed && ok;
      order.detail += s->name + "=" + fmt_map(s->mAP().median) + (ok ? " ok; " : " VIOLATED; ");
    }
    order.detail += "full=" + fmt_map(full.mAP().median) + " baseline=" + fmt_map(base.mAP().median);
    out.push_back(order);
    const auto gap_seeds = count_seeds(seeds, [&](auto s) { return full.map_for(s) - base.map_for(s) >= 0.05; });
    out.push_back({"full - baseline >= 5 mAP points in >= " + std::to_string(need) + " seeds", gap_seeds >= need,
                   std::to_string(gap_seeds) + "/" + std::to_string(seeds.size()) + " seeds"});
    double slowest = 0.0;
    for (const auto& c : rep.cells) slowest = std::max(slowest, c.max_seconds());
    out.push_back({"every cell trains in < 600 s", slowest < 600.0, "slowest " + std::to_string(slowest) + " s"});
  } else if (rep.grid == "pfd-vs-cfd") {
    for (const std::string suffix : {"", "+CIN+CSBN"}) {
      const auto& c = rep.cell("CFD" + suffix);
      const auto& p = rep.cell("PFD" + suffix);
      const auto& b = rep.cell("baseline" + suffix);
      const auto n = count_seeds(seeds, [&](auto s) { return c.map_for(s) >= p.map_for(s) && p.map_for(s) >= b.map_for(s); });
      out.push_back({"CFD >= PFD >= baseline" + suffix + " in >= " + std::to_string(need) + " seeds", n >= need,
                     std::to_string(n) + "/" + std::to_string(seeds.size()) + " seeds; medians CFD=" + fmt_map(c.mAP().median) +
                         " PFD=" + fmt_map(p.mAP().median) + " baseline=" + fmt_map(b.mAP().median)});
    }
  } else if (rep.grid == "domain-loss") {
    const auto& with = rep.cell("B+DL+CFD+CSBN+CIN");
    const auto& without = rep.cell("B+CFD+CSBN+CIN");
    out.push_back({"median mAP: full with domain loss >= full without", with.mAP().median >= without.mAP().median,
                   "with=" + fmt_map(with.mAP().median) + " without=" + fmt_map(without.mAP().median)});
  }
  return out;
}

}  // namespace detail

using CellCallback = std::function<void(const CellResult&)>;

/// Runs every cell of `grid` over the config's seeds and evaluates the grid's
/// directional expectations.
inline AblationReport ablate(const std::string& grid, const RunConfig& base, const Dataset& ds, RunCache& cache,
                             const CellCallback& on_cell = {}) {
  AblationReport rep;
  rep.grid = grid;
  for (const auto& cell : grid_cells(grid)) {
    CellResult cr;
    cr.name = cell.name;
    cr.config = base;
    cell.apply(cr.config);
    cr.config.name = grid + "/" + cell.name;
    cr.config.finalize();
    for (auto seed : base.seeds) cr.runs.push_back(cache.get(cr.config, ds, seed));
    if (on_cell) on_cell(cr);
    rep.cells.push_back(std::move(cr));
  }
  rep.checks = detail::grid_checks(rep, base.seeds);
  return rep;
}

}  // namespace cfd
