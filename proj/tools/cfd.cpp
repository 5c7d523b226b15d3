// SPDX-License-Identifier: Apache-2.0
//
// cfd: train / eval / ablate / gradcheck / gen-data.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "cfd/checkpoint.hpp"
#include "cfd/config.hpp"
#include "cfd/gradcheck_suite.hpp"
#include "cfd/harness.hpp"

namespace fs = std::filesystem;

namespace {

struct ConfigArgs {
  std::string file;
  std::vector<std::string> overrides;
};

void add_config_options(CLI::App* cmd, ConfigArgs& a) {
  cmd->add_option("-c,--config", a.file, "JSON config file (defaults apply to missing keys)");
  cmd->add_option("-s,--set", a.overrides, "dotted-path override, e.g. optim.epochs=10")->take_all();
}

cfd::RunConfig resolve(const ConfigArgs& a) {
  auto cfg = a.file.empty() ? cfd::default_config() : cfd::load_config(a.file);
  return cfd::apply_overrides(cfg, a.overrides);
}

cfd::Dataset dataset_for(const cfd::RunConfig& cfg, const std::string& data_dir) {
  if (data_dir.empty()) return cfd::generate(cfg.data);
  auto ds = cfd::read_dataset(data_dir);
  if (ds.identities != cfg.data.identities || ds.train_domains != cfg.data.train_domains || ds.height != cfg.data.height ||
      ds.width != cfg.data.width)
    throw cfd::DataError("dataset in '" + data_dir + "' does not match the config's data section");
  return ds;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p);
  if (!f) throw cfd::IoError("cannot write '" + p.string() + "'");
  f << text;
}

std::string log_csv(const std::vector<cfd::EpochLog>& log) {
  std::string s = "epoch,lr,loss_total,loss_id,loss_triplet,loss_domain,id_accuracy\n";
  char buf[256];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.epoch, r.lr, r.total, r.id, r.triplet,
                  r.domain, r.id_accuracy);
    s += buf;
  }
  return s;
}

void print_metrics(const cfd::Metrics& m) {
  std::printf("mAP %.4f  rank1 %.4f  rank5 %.4f  rank10 %.4f  (queries %zu, gallery %zu, excluded %zu, random mAP %.4f)\n",
              m.mAP, m.r1, m.r5, m.r10, m.queries, m.gallery, m.excluded, m.random_mAP);
}

int cmd_train(const ConfigArgs& ca, const std::string& out, std::uint64_t seed, bool seed_given, const std::string& data) {
  const auto cfg = resolve(ca);
  const auto ds = dataset_for(cfg, data);
  if (!seed_given) seed = cfg.seeds.front();
  fs::create_directories(out);
  nlohmann::json snapshot = cfg;
  snapshot["seeds"] = {seed};
  write_text(fs::path(out) / "config.json", snapshot.dump(2) + "\n");
  auto r = cfd::train(cfg, ds, seed, [](const cfd::EpochLog& e) {
    std::printf("epoch %3zu  lr %.2e  loss %.4f  (id %.4f, triplet %.4f, domain %.4f)  acc %.3f\n", e.epoch, e.lr, e.total,
                e.id, e.triplet, e.domain, e.id_accuracy);
    std::fflush(stdout);
  });
  write_text(fs::path(out) / "train_log.csv", log_csv(r.log));
  cfd::save_checkpoint(r.model, (fs::path(out) / "checkpoint.ckpt").string());
  const auto m = cfd::evaluate_model(r.model, ds, cfg.eval);
  nlohmann::json mj = m;
  mj["seed"] = seed;
  mj["train_seconds"] = r.seconds;
  mj["config_digest"] = cfg.model.digest();
  write_text(fs::path(out) / "metrics.json", mj.dump(2) + "\n");
  print_metrics(m);
  std::printf("trained in %.1f s; run directory %s\n", r.seconds, out.c_str());
  return 0;
}

int cmd_eval(const std::string& run, const std::string& ckpt_arg, const ConfigArgs& ca, const std::string& data,
             const std::string& out) {
  cfd::RunConfig cfg;
  std::string ckpt = ckpt_arg;
  if (!run.empty()) {
    const fs::path dir(run);
    cfg = cfd::apply_overrides(cfd::load_config((dir / "config.json").string()), ca.overrides);
    if (ckpt.empty()) ckpt = (dir / "checkpoint.ckpt").string();
  } else {
    if (ckpt.empty()) throw cfd::ConfigError("eval needs --run or --checkpoint");
    cfg = resolve(ca);
  }
  auto model = cfd::load_checkpoint<float>(ckpt, cfg.model);
  const auto ds = dataset_for(cfg, data);
  const auto m = cfd::evaluate_model(model, ds, cfg.eval);
  print_metrics(m);
  if (!out.empty()) {
    nlohmann::json mj = m;
    mj["config_digest"] = cfg.model.digest();
    write_text(out, mj.dump(2) + "\n");
  }
  return 0;
}

int cmd_ablate(const std::string& grid, const ConfigArgs& ca, const std::vector<std::uint64_t>& seeds, const std::string& out,
               const std::string& data) {
  auto cfg = resolve(ca);
  if (!seeds.empty()) cfg.seeds = seeds;
  const auto ds = dataset_for(cfg, data);
  cfd::RunCache cache;
  const auto rep = cfd::ablate(grid, cfg, ds, cache, [](const cfd::CellResult& c) {
    const auto m = c.mAP(), r = c.rank1();
    std::printf("%-28s mAP %6.2f [%6.2f, %6.2f]  R1 %6.2f [%6.2f, %6.2f]  (%.1f s max)\n", c.name.c_str(), 100 * m.median,
                100 * m.min, 100 * m.max, 100 * r.median, 100 * r.min, 100 * r.max, c.max_seconds());
    std::fflush(stdout);
  });
  for (const auto& chk : rep.checks)
    std::printf("[%s] %s: %s\n", chk.passed ? "PASS" : "FAIL", chk.description.c_str(), chk.detail.c_str());
  if (!out.empty()) {
    fs::create_directories(out);
    std::string csv = "cell,seed,mAP,rank1,rank5,rank10,train_seconds\n";
    nlohmann::json j;
    j["grid"] = grid;
    j["seeds"] = cfg.seeds;
    for (const auto& c : rep.cells) {
      nlohmann::json cj;
      cj["name"] = c.name;
      cj["mAP"] = {{"median", c.mAP().median}, {"min", c.mAP().min}, {"max", c.mAP().max}};
      cj["rank1"] = {{"median", c.rank1().median}, {"min", c.rank1().min}, {"max", c.rank1().max}};
      for (const auto& r : c.runs) {
        cj["runs"].push_back({{"seed", r.seed}, {"metrics", r.metrics}, {"train_seconds", r.seconds}});
        char buf[256];
        std::snprintf(buf, sizeof buf, ",%llu,%.9g,%.9g,%.9g,%.9g,%.3f\n", static_cast<unsigned long long>(r.seed),
                      r.metrics.mAP, r.metrics.r1, r.metrics.r5, r.metrics.r10, r.seconds);
        csv += "\"" + c.name + "\"" + buf;
      }
      j["cells"].push_back(cj);
    }
    for (const auto& chk : rep.checks)
      j["checks"].push_back({{"description", chk.description}, {"passed", chk.passed}, {"detail", chk.detail}});
    write_text(fs::path(out) / "ablation.json", j.dump(2) + "\n");
    write_text(fs::path(out) / "ablation.csv", csv);
  }
  return 0;
}

int cmd_gradcheck(const std::string& scope, std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  const auto reports = cfd::run_gradcheck(scope, seed);
  bool ok = true;
  for (const auto& r : reports) {
    std::printf("[%s] %-34s max rel err %.3e\n", r.passed() ? "PASS" : "FAIL", r.scope.c_str(), r.max_rel_err());
    for (const auto& e : r.entries)
      if (!e.passed) std::printf("       %s: rel err %.3e at element %zu\n", e.name.c_str(), e.max_rel_err, e.worst_index);
    ok = ok && r.passed();
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::printf("%zu reports, %s, %.2f s\n", reports.size(), ok ? "all passed" : "FAILURES", secs);
  return ok ? 0 : 1;
}

int cmd_gen_data(const ConfigArgs& ca, const std::string& out) {
  const auto cfg = resolve(ca);
  const auto ds = cfd::generate(cfg.data);
  cfd::write_dataset(ds, out);
  std::printf("wrote %zu samples (%zu identities, %zu training domains + 1 unseen) to %s\n", ds.samples.size(),
              ds.identities, ds.train_domains, out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Calibrated feature decomposition toy harness"};
  app.require_subcommand(1);

  ConfigArgs train_cfg, eval_cfg, ablate_cfg, gen_cfg;
  std::string train_out = "runs/default", train_data;
  std::uint64_t train_seed = 0;
  auto* train = app.add_subcommand("train", "train one model and evaluate it on the unseen domain");
  add_config_options(train, train_cfg);
  train->add_option("-o,--out", train_out, "run directory");
  auto* seed_opt = train->add_option("--seed", train_seed, "training seed (default: first configured seed)");
  train->add_option("--data", train_data, "dataset directory written by gen-data (default: generate in memory)");

  std::string eval_run, eval_ckpt, eval_data, eval_out;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the unseen-domain split");
  add_config_options(eval, eval_cfg);
  eval->add_option("-r,--run", eval_run, "run directory from train");
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file (with --config)");
  eval->add_option("--data", eval_data, "dataset directory");
  eval->add_option("-o,--out", eval_out, "write metrics JSON here");

  std::string grid, ablate_out, ablate_data;
  std::vector<std::uint64_t> ablate_seeds;
  auto* ablate = app.add_subcommand("ablate", "run an ablation grid over all seeds");
  add_config_options(ablate, ablate_cfg);
  ablate->add_option("grid", grid, "grid name")->required()->check(CLI::IsMember(cfd::grid_names()));
  ablate->add_option("--seeds", ablate_seeds, "seed list (overrides the config)")->delimiter(',');
  ablate->add_option("-o,--out", ablate_out, "directory for ablation.json and ablation.csv");
  ablate->add_option("--data", ablate_data, "dataset directory");

  std::string scope = "all";
  std::uint64_t gc_seed = 1;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  gradcheck->add_option("scope", scope, "layer scope, full-model, or all");
  gradcheck->add_option("--seed", gc_seed, "seed for random inputs");

  std::string gen_out = "data/synthetic";
  auto* gen = app.add_subcommand("gen-data", "write the synthetic dataset to disk");
  add_config_options(gen, gen_cfg);
  gen->add_option("-o,--out", gen_out, "output directory");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train) return cmd_train(train_cfg, train_out, train_seed, seed_opt->count() > 0, train_data);
    if (*eval) return cmd_eval(eval_run, eval_ckpt, eval_cfg, eval_data, eval_out);
    if (*ablate) return cmd_ablate(grid, ablate_cfg, ablate_seeds, ablate_out, ablate_data);
    if (*gradcheck) return cmd_gradcheck(scope, gc_seed);
    if (*gen) return cmd_gen_data(gen_cfg, gen_out);
  } catch (const cfd::Error& e) {
    std::fprintf(stderr, "cfd: %s\n", e.what());
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "cfd: %s\n", e.what());
    return 1;
  }
  return 0;
}
