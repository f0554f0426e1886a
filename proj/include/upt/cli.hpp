#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "upt/archive.hpp"
#include "upt/config.hpp"
#include "upt/oracles.hpp"
#include "upt/report.hpp"
#include "upt/training.hpp"

namespace upt {

// Process exit codes of the `upt` tool.
enum ExitCode : int {
  kExitOk = 0,
  kExitOracle = 1,       // a gradient or equivalence check failed
  kExitUsage = 2,        // bad flags, unreadable or invalid config
  kExitFingerprint = 3,  // archive written for another architecture / backbone
  kExitCorrupt = 4,      // archive bytes are damaged
  kExitState = 5,        // operation invalid for the model's state
};

struct CliOptions {
  std::string config;
  std::string backbone;
  std::string delta;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string format = "csv";
};

namespace cli_detail {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

inline RunConfig resolve_config(const CliOptions& o) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : load_config(o.config);
  if (o.seed) {
    cfg.seed = *o.seed;
    cfg.seeds = {*o.seed};
  }
  return cfg;
}

inline void require_flag(const std::string& value, const char* flag, const char* verb) {
  if (value.empty()) throw ConfigError(std::string(verb) + " requires " + flag);
}

inline Corpus resolve_corpus(const RunConfig& cfg, bool pretraining, std::uint64_t seed) {
  const std::string& path = pretraining ? cfg.data.pretrain : cfg.data.downstream;
  Corpus corpus = !path.empty() ? load_jsonl(path)
                  : pretraining ? pretrain_corpus(cfg.experiment, seed)
                                : downstream_corpus(cfg.experiment, seed);
  if (!cfg.data.export_dir.empty()) {
    std::filesystem::create_directories(cfg.data.export_dir);
    save_jsonl(corpus, (std::filesystem::path(cfg.data.export_dir) /
                        (pretraining ? "pretrain.jsonl" : "downstream.jsonl"))
                           .string());
  }
  return corpus;
}

struct LoadedModel {
  DualEncoder model;
  std::uint64_t backbone_ref = 0;
};

// --backbone (backbone or full archive) plus an optional --delta.
inline LoadedModel load_model(const RunConfig& cfg, const CliOptions& o, const char* verb) {
  require_flag(o.backbone, "--backbone", verb);
  const WeightArchive base = load_archive(o.backbone);
  const ExperimentConfig& e = cfg.experiment;
  if (base.kind == ArchiveKind::full) {
    if (!o.delta.empty()) throw StateError("a full archive already contains its PETL weights");
    PETLConfig petl;
    try {
      petl = petl_from_json(nlohmann::json::parse(base.metadata));
    } catch (const nlohmann::json::exception&) {
      throw CorruptArchiveError("full archive metadata is not valid JSON");
    }
    return {model_from_full(base, e.image, e.text, petl), 0};
  }
  LoadedModel out{model_from_backbone(base, e.image, e.text), content_hash(base)};
  if (!o.delta.empty()) apply_delta(out.model, load_archive(o.delta), out.backbone_ref, e.petl);
  return out;
}

inline int cmd_gradcheck(const CliOptions& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  const OracleReport r = run_oracle_suite(cfg.gradcheck);
  char line[160];
  for (const auto& g : r.gradients) {
    std::snprintf(line, sizeof line, "grad %-20s worst_rel_error=%.3e coords=%zu %s\n", g.name.c_str(),
                  g.worst_rel_error, g.coords_checked, g.worst_rel_error <= r.tolerance ? "ok" : "FAIL");
    out << line;
  }
  for (const auto& e : r.equivalences) {
    std::snprintf(line, sizeof line, "equiv %-19s max_abs_error=%.3e tol=%.0e %s\n", e.name.c_str(),
                  e.max_abs_error, e.tolerance, e.passed() ? "ok" : "FAIL");
    out << line;
  }
  for (const auto& name : r.frozen_violations) out << "frozen tensor received gradient: " << name << '\n';
  out << (r.passed() ? "gradcheck passed\n" : "gradcheck FAILED\n");
  return r.passed() ? kExitOk : kExitOracle;
}

inline int cmd_pretrain(const CliOptions& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  require_flag(o.out, "--out", "pretrain");
  const Corpus corpus = resolve_corpus(cfg, true, cfg.seed);
  TrainLog log;
  DualEncoder m = pretrain_backbone(cfg.experiment, cfg.seed, corpus, &log);
  const RetrievalResult r = evaluate(m, corpus, Split::test);
  save_archive(backbone_archive(m), o.out);
  char line[160];
  std::snprintf(line, sizeof line, "pretrained %zu params, final loss %.4f, in-domain R@1 %.4f -> %s\n",
                partition_params(m).total(), log.epoch_loss.empty() ? 0.0 : log.epoch_loss.back(), r.r1,
                o.out.c_str());
  out << line;
  return kExitOk;
}

inline int cmd_tune(const CliOptions& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  require_flag(o.out, "--out", "tune");
  if (!o.delta.empty()) throw ConfigError("tune starts from a backbone; --delta is not accepted");
  LoadedModel lm = load_model(cfg, o, "tune");
  if (lm.model.merged() || lm.backbone_ref == 0) throw StateError("tune needs a backbone archive");
  const Corpus corpus = resolve_corpus(cfg, false, cfg.seed);
  const TrainLog log = tune_petl(lm.model, cfg.experiment, cfg.seed, corpus);
  const WeightArchive delta = delta_archive(lm.model, lm.backbone_ref);
  save_archive(delta, o.out);
  const ParamPartition part = partition_params(lm.model);
  char line[200];
  std::snprintf(line, sizeof line, "tuned %zu of %zu params (%zu tensors), final loss %.4f -> %s\n",
                part.trainable_count, part.total(), delta.tensors.size(),
                log.epoch_loss.empty() ? 0.0 : log.epoch_loss.back(), o.out.c_str());
  out << line;
  return kExitOk;
}

inline int cmd_eval(const CliOptions& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  const ReportFormat format = parse_report_format(o.format);
  const LoadedModel lm = load_model(cfg, o, "eval");
  const Corpus corpus = resolve_corpus(cfg, false, cfg.seed);
  const auto t0 = cli_detail::Clock::now();
  const RetrievalResult r = evaluate(lm.model, corpus, Split::test);
  MetricsReport report{to_json(cfg), {}};
  report.rows.push_back(make_row(cfg.report.run_id, cfg.seed, lm.model.petl, partition_params(lm.model), r));
  if (cfg.report.timing) report.rows.back().wall_time_s = seconds_since(t0);
  out << emit_report(report, format, o.out);
  return kExitOk;
}

inline int cmd_merge(const CliOptions& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  require_flag(o.out, "--out", "merge");
  LoadedModel lm = load_model(cfg, o, "merge");
  merge_model_lora(lm.model);
  save_archive(full_archive(lm.model, petl_to_json(lm.model.petl).dump()), o.out);
  out << "merged LoRA into W_k/W_v -> " << o.out << '\n';
  return kExitOk;
}

// Toggle subsets in binary order: bit 2 = S-Prefix, bit 1 = LoRA, bit 0 = L-Adapter.
inline PETLConfig ablation_subset(const PETLConfig& base, unsigned bits) {
  PETLConfig p = base;
  p.sprefix = bits & 4u;
  p.lora = bits & 2u;
  p.l_adapter = bits & 1u;
  return p;
}

inline std::string subset_label(unsigned bits) {
  return std::string("ablate-") + char('0' + ((bits >> 2) & 1)) + char('0' + ((bits >> 1) & 1)) +
         char('0' + (bits & 1));
}

inline int cmd_ablate(const CliOptions& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  const ReportFormat format = parse_report_format(o.format);
  const ExperimentConfig& e = cfg.experiment;
  std::vector<ReportRow> rows(8);
  nlohmann::json per_seed = nlohmann::json::array();
  std::vector<double> seconds(8, 0.0);
  for (std::uint64_t seed : cfg.seeds) {
    const Corpus pre = resolve_corpus(cfg, true, seed);
    const DualEncoder backbone = pretrain_backbone(e, seed, pre);
    const Corpus down = resolve_corpus(cfg, false, seed);
    for (unsigned bits = 0; bits < 8; ++bits) {
      const auto t0 = Clock::now();
      ExperimentConfig sub = e;
      sub.petl = ablation_subset(e.petl, bits);
      DualEncoder m = backbone;
      tune_petl(m, sub, seed, down);
      const RetrievalResult r = evaluate(m, down, Split::test);
      seconds[bits] += seconds_since(t0);
      const ParamPartition part = partition_params(m);
      ReportRow& row = rows[bits];
      if (row.run_id.empty()) row = make_row(subset_label(bits), cfg.seed, sub.petl, part, {});
      const double w = 1.0 / static_cast<double>(cfg.seeds.size());
      row.r1 += w * r.r1;
      row.r5 += w * r.r5;
      row.r10 += w * r.r10;
      row.map += w * r.map;
      per_seed.push_back({{"run_id", subset_label(bits)}, {"seed", seed}, {"r1", r.r1}, {"r5", r.r5},
                          {"r10", r.r10}, {"map", r.map}});
    }
  }
  if (cfg.report.timing)
    for (unsigned bits = 0; bits < 8; ++bits) rows[bits].wall_time_s = seconds[bits];
  MetricsReport report{to_json(cfg), std::move(rows)};
  report.extra = {{"per_seed", std::move(per_seed)}};
  out << emit_report(report, format, o.out);
  return kExitOk;
}

}  // namespace cli_detail

// Parses argv and runs one verb. Never throws; returns an ExitCode.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"Unified parameter-efficient tuning for two-tower retrieval"};
  app.require_subcommand(1);
  CliOptions o;
  std::string verb;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON run configuration");
    sub->add_option("--seed", o.seed, "override the run seed");
  };
  auto add_archives = [&](CLI::App* sub) {
    sub->add_option("--backbone", o.backbone, "backbone (or merged full) archive");
    sub->add_option("--delta", o.delta, "PETL delta archive");
  };
  auto add_report = [&](CLI::App* sub) {
    sub->add_option("--format", o.format, "report format")->check(CLI::IsMember({"csv", "json", "both"}));
  };
  const std::pair<const char*, const char*> verbs[] = {
      {"gradcheck", "finite-difference and equivalence oracles"},
      {"pretrain", "train a backbone on the pretraining corpus"},
      {"tune", "attach PETL modules to a frozen backbone and train them"},
      {"eval", "retrieval metrics on the downstream test split"},
      {"merge", "fold LoRA into W_k/W_v and write a full archive"},
      {"ablate", "tune every PETL subset and report each"}};
  for (const auto& [name, help] : verbs) {
    CLI::App* sub = app.add_subcommand(name, help);
    add_common(sub);
    sub->add_option("--out", o.out, "output path");
    const std::string n = name;
    if (n == "tune" || n == "eval" || n == "merge") add_archives(sub);
    if (n == "eval" || n == "ablate") add_report(sub);
    sub->callback([&verb, n] { verb = n; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (verb == "gradcheck") return cli_detail::cmd_gradcheck(o, out);
    if (verb == "pretrain") return cli_detail::cmd_pretrain(o, out);
    if (verb == "tune") return cli_detail::cmd_tune(o, out);
    if (verb == "eval") return cli_detail::cmd_eval(o, out);
    if (verb == "merge") return cli_detail::cmd_merge(o, out);
    if (verb == "ablate") return cli_detail::cmd_ablate(o, out);
    err << "error: unknown command\n";
    return kExitUsage;
  } catch (const OracleError& e) {
    err << "oracle error: " << e.what() << '\n';
    return kExitOracle;
  } catch (const FingerprintError& e) {
    err << "fingerprint mismatch: " << e.what() << '\n';
    return kExitFingerprint;
  } catch (const CorruptArchiveError& e) {
    err << "corrupt archive: " << e.what() << '\n';
    return kExitCorrupt;
  } catch (const StateError& e) {
    err << "invalid state: " << e.what() << '\n';
    return kExitState;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
}

}  // namespace upt
