// SPDX-License-Identifier: Apache-2.0
//
// tinyglass command-line front end. Kept in a header so the test suite can
// drive run() in-process.
#pragma once

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tinyglass/tinyglass.hpp"

namespace tinyglass::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kContractError = 1, kUsageError = 2 };

inline const std::vector<std::string>& commands() {
  static const std::vector<std::string> c = {"synth-data", "train",   "eval",           "quantize",
                                             "profile",    "sweep",   "export-heatmaps"};
  return c;
}

struct Options {
  std::string command;
  std::string config;
  std::string out_dir = "tinyglass-run";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::optional<std::size_t> input_size;
  bool quantized = false;
  std::vector<std::string> overrides;  // key=value
  std::string checkpoint;
  std::string qmodel;
  std::optional<std::size_t> profile_input;
  double latency = 0.0;
  double energy = 0.0;
};

/// Writes every line to run.log and echoes it to the console stream.
class RunLog {
 public:
  RunLog(const fs::path& path, std::ostream& echo) : file_(path), echo_(echo) {
    if (!file_) throw IoError("cannot write " + path.string());
  }

  template <typename... Args>
  void operator()(const Args&... args) {
    std::ostringstream o;
    o << std::setprecision(6);
    (o << ... << args);
    file_ << o.str() << "\n";
    file_.flush();
    echo_ << o.str() << "\n";
  }

 private:
  std::ofstream file_;
  std::ostream& echo_;
};

inline void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write " + p.string());
  out << text;
  if (!out) throw IoError("short write to " + p.string());
}

inline RunConfig resolve(const Options& o) {
  RunConfig rc;
  if (!o.config.empty()) rc.merge_file(o.config);
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    rc.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed) rc.set("seed", std::to_string(*o.seed));
  if (o.threads) rc.set("threads", std::to_string(*o.threads));
  if (o.input_size) rc.set("input_size", std::to_string(*o.input_size));
  return rc;
}

// ---------------------------------------------------------------------------
// Shared pipeline pieces

inline Model load_trained(const RunConfig& rc, const Options& o, RunLog& log) {
  if (o.checkpoint.empty()) throw ConfigError(o.command + " needs --checkpoint");
  Model m = build_run_model(rc);
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  detail::require(ck.head.disc.in_ch == m.config().embedding_channels(),
                  "checkpoint width " + std::to_string(ck.head.disc.in_ch) + " does not match the configured model");
  detail::require(ck.head.adaptor.has_value() == m.head.adaptor.has_value(),
                  "checkpoint adaptor presence does not match model.adaptor");
  m.head = ck.head;
  log("checkpoint ", o.checkpoint, " epoch ", ck.epoch, " val_auroc ", ck.best_auroc);
  return m;
}

inline QuantizedModel quantize_from(const Model& m, const Dataset& d, const RunConfig& rc, RunLog& log) {
  const std::vector<Tensor4> imgs = calibration_images(m, d.train, rc.size("quant.calib_images"), train_config(rc));
  QuantizedModel qm = calibrate(m, std::span<const Tensor4>(imgs), calibration_config(rc));
  for (const auto& w : qm.warnings) log("warning: ", w);
  log("calibrated on ", imgs.size() / 2, " training images plus their LAS copies");
  return qm;
}

inline std::string metrics_csv(const std::string& run_id, const Metrics& m, std::uint64_t seed) {
  return std::string(kMetricsCsvHeader) + "\n" + metrics_csv_row(run_id, 0.0, "test", m, seed) + "\n";
}

inline void log_metrics(RunLog& log, const Metrics& m) {
  log("image_auroc ", m.image_auroc, " over ", m.n_images, " images (", m.n_anomalous, " anomalous)");
  if (m.pixel_auroc) log("pixel_auroc ", *m.pixel_auroc, " over ", m.pixels_used, " pixels");
}

// ---------------------------------------------------------------------------
// Commands

inline void cmd_synth(const RunConfig& rc, const fs::path& out, RunLog& log) {
  const Dataset d = synth_dataset(synth_config(rc));
  write_dataset(out, rc.str("data.category"), d);
  log("wrote ", d.train.size(), " train, ", d.val.size() + d.test.size(), " test, ", d.pool.size(), " pool images to ",
      (out / rc.str("data.category")).string());
}

inline void cmd_train(const RunConfig& rc, const fs::path& out, RunLog& log) {
  const Dataset d = load_run_dataset(rc);
  const Model init = build_run_model(rc);
  const TrainConfig tc = train_config(rc);
  log("train ", d.train.size(), " val ", d.val.size(), " test ", d.test.size(), " epochs ", tc.max_epochs);
  const TrainResult r = train(init, d.train, d.val, tc);
  for (const auto& e : r.history) {
    log("epoch ", e.epoch, " l_bce ", e.l_bce, " l_focal ", e.l_focal, " l_total ", e.l_total, " val_auroc ",
        e.val_auroc);
  }
  save_checkpoint(out / "checkpoint.tgw", r.best);
  save_checkpoint(out / "checkpoint_last.tgw",
                  {r.last, static_cast<std::uint32_t>(r.history.size()), r.history.back().val_auroc});
  write_text(out / "history.csv", history_csv(r.history));
  Model best = init;
  best.head = r.best.head;
  const Metrics m = evaluate(best, d.test, eval_config(rc));
  write_text(out / "metrics.csv", metrics_csv("train", m, rc.u64("seed")));
  log("best epoch ", r.best.epoch, " val_auroc ", r.best.best_auroc);
  log_metrics(log, m);
}

inline void cmd_eval(const RunConfig& rc, const Options& o, const fs::path& out, RunLog& log) {
  const Dataset d = load_run_dataset(rc);
  const EvalConfig ec = eval_config(rc);
  Metrics m;
  if (!o.qmodel.empty()) {
    m = evaluate(load_quantized(o.qmodel), d.test, ec);
    log("quantized model ", o.qmodel);
  } else {
    const Model model = load_trained(rc, o, log);
    m = o.quantized ? evaluate(quantize_from(model, d, rc, log), d.test, ec) : evaluate(model, d.test, ec);
  }
  const bool q = o.quantized || !o.qmodel.empty();
  write_text(out / "metrics.csv", metrics_csv(q ? "eval-int8" : "eval", m, rc.u64("seed")));
  log_metrics(log, m);
}

inline void cmd_quantize(const RunConfig& rc, const Options& o, const fs::path& out, RunLog& log) {
  const Dataset d = load_run_dataset(rc);
  const Model model = load_trained(rc, o, log);
  const QuantizedModel qm = quantize_from(model, d, rc, log);
  save_quantized(out / "quantized.tgw", qm);
  const MemoryReport mem = memory_report(qm);
  std::ostringstream rep;
  rep << std::setprecision(17);
  rep << "weight_bytes " << mem.weight_bytes << "\nmetadata_bytes " << mem.metadata_bytes
      << "\npeak_activation_bytes " << mem.peak_activation_bytes << "\ntotal_bytes " << mem.total_bytes
      << "\nbudget_bytes " << mem.budget_bytes << "\nwithin_budget " << (mem.pass() ? "yes" : "no") << "\n";
  const EvalConfig ec = eval_config(rc);
  const auto fmaps = model_heatmaps(model, d.test, ec);
  const auto qmaps = quantized_heatmaps(qm, d.test, ec);
  const double r = heatmap_pearson(fmaps, qmaps);
  const Metrics mf = evaluate_heatmaps(fmaps, d.test, ec);
  const Metrics mq = evaluate_heatmaps(qmaps, d.test, ec);
  rep << "heatmap_pearson " << r << "\nfloat_image_auroc " << mf.image_auroc << "\nint8_image_auroc "
      << mq.image_auroc << "\n";
  write_text(out / "quantize_report.txt", rep.str());
  log("total ", mem.total_bytes, " bytes of ", mem.budget_bytes, " budget");
  log("heatmap pearson ", r, ", image auroc float ", mf.image_auroc, " int8 ", mq.image_auroc);
}

inline void cmd_profile(const RunConfig& rc, const Options& o, const fs::path& out, RunLog& log,
                        std::ostream& console) {
  const std::size_t n = o.profile_input.value_or(rc.size("input_size"));
  const ComplexityReport r = count(model_config(rc), Shape4{1, 3, n, n});
  std::string text = report_text(r);
  if (o.latency > 0.0 || o.energy > 0.0) {
    const EfficiencyReport e = efficiency(r, o.latency, o.energy);
    std::ostringstream s;
    s << std::setprecision(4) << "fps " << e.fps << "  gmac_per_s " << e.gmac_per_s << "  gmac_per_j "
      << e.gmac_per_j << "\n";
    text += s.str();
  }
  write_text(out / "profile.txt", text);
  write_text(out / "profile.csv", report_csv(r));
  console << text;
  log("profile at ", n, "x", n, ": backbone ", r.stage(Stage::backbone).macs, " MACs, total ", r.total().macs,
      " MACs, ", r.total().params, " params");
}

inline void cmd_sweep(const RunConfig& rc, const fs::path& out, RunLog& log) {
  const Dataset d = load_run_dataset(rc);
  const Model init = build_run_model(rc);
  const SweepResult s = contamination_sweep(init, d, rc.reals("sweep.rates"), train_config(rc), eval_config(rc));
  std::ostringstream csv;
  csv << kMetricsCsvHeader << ",injected,best_epoch\n";
  for (const auto& e : s.entries) {
    csv << metrics_csv_row("sweep", e.rate, "test", e.metrics, s.seed) << "," << e.injected << "," << e.best_epoch
        << "\n";
    std::ostringstream name;
    name << "history_rate_" << std::fixed << std::setprecision(2) << e.rate << ".csv";
    write_text(out / name.str(), history_csv(e.history));
    log("rate ", e.rate, " injected ", e.injected, " image_auroc ", e.metrics.image_auroc);
  }
  write_text(out / "sweep.csv", csv.str());
  const double base = s.entries.front().metrics.image_auroc;
  if (base > 0.0) log("retention ", s.entries.back().metrics.image_auroc / base);
}

inline void cmd_export(const RunConfig& rc, const Options& o, const fs::path& out, RunLog& log) {
  const Dataset d = load_run_dataset(rc);
  const EvalConfig ec = eval_config(rc);
  std::vector<Tensor4> maps;
  if (!o.qmodel.empty()) {
    maps = quantized_heatmaps(load_quantized(o.qmodel), d.test, ec);
  } else {
    const Model model = load_trained(rc, o, log);
    maps = o.quantized ? quantized_heatmaps(quantize_from(model, d, rc, log), d.test, ec)
                       : model_heatmaps(model, d.test, ec);
  }
  const fs::path dir = out / "heatmaps";
  fs::create_directories(dir);
  std::ostringstream index;
  index << std::setprecision(17) << "file,source,defect,label,score\n";
  for (std::size_t i = 0; i < maps.size(); ++i) {
    const Tensor4 up = upsample_heatmap(maps[i], ec.input_size, ec.input_size);
    char name[32];
    std::snprintf(name, sizeof name, "%04zu.pgm", i);
    export_heatmap_pgm(dir / name, up);
    index << name << "," << d.test[i].source << "," << d.test[i].defect << "," << (d.test[i].anomalous() ? 1 : 0)
          << "," << image_score(up, ec.sigma, ec.top_k) << "\n";
  }
  write_text(dir / "index.csv", index.str());
  log("wrote ", maps.size(), " heatmaps to ", dir.string());
}

// ---------------------------------------------------------------------------
// Entry point

inline void add_shared(CLI::App* sub, Options& o) {
  sub->add_option("--config", o.config, "key=value config file")->check(CLI::ExistingFile);
  sub->add_option("--out-dir", o.out_dir, "output directory")->capture_default_str();
  sub->add_option("--seed", o.seed, "master seed");
  sub->add_option("--threads", o.threads, "worker threads")->check(CLI::PositiveNumber);
  sub->add_option("--input-size", o.input_size, "model input resolution (default 256)");
  sub->add_flag("--quantized", o.quantized, "run inference through the INT8 path");
  sub->add_option("--set", o.overrides, "override one config key, key=value (repeatable)");
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  Options o;
  CLI::App app{"tinyglass: few-shot industrial anomaly detection toolkit", "tinyglass"};
  app.require_subcommand(1, 1);
  app.set_help_all_flag("--help-all", "help for every command");

  auto* synth = app.add_subcommand("synth-data", "write a seeded synthetic dataset tree");
  auto* trn = app.add_subcommand("train", "train the head; writes checkpoint.tgw, history.csv, metrics.csv");
  auto* ev = app.add_subcommand("eval", "image and pixel AUROC on the test split; writes metrics.csv");
  auto* qz = app.add_subcommand("quantize", "calibrate INT8; writes quantized.tgw and quantize_report.txt");
  auto* prof = app.add_subcommand("profile", "per-layer parameter and MAC table; writes profile.txt/.csv");
  auto* sw = app.add_subcommand("sweep", "contamination sweep; writes sweep.csv");
  auto* ex = app.add_subcommand("export-heatmaps", "write test heatmaps as PGM under heatmaps/");
  for (auto* s : {synth, trn, ev, qz, prof, sw, ex}) add_shared(s, o);
  for (auto* s : {ev, qz, ex}) s->add_option("--checkpoint", o.checkpoint, "trained head (TGW)");
  for (auto* s : {ev, ex}) s->add_option("--qmodel", o.qmodel, "quantized model written by quantize (TGW)");
  prof->add_option("--input", o.profile_input, "square input extent (default: input_size)");
  prof->add_option("--latency", o.latency, "measured seconds per frame, for efficiency figures");
  prof->add_option("--energy", o.energy, "measured joules per frame, for efficiency figures");

  auto usage = [&](const std::string& what) {
    err << "error: " << what << "\n";
    std::string valid;
    for (const auto& c : commands()) valid += (valid.empty() ? "" : ", ") + c;
    err << "commands: " << valid << "\nrun with --help for usage\n";
    return kUsageError;
  };
  if (argc > 1 && argv[1][0] != '-' &&
      std::find(commands().begin(), commands().end(), argv[1]) == commands().end()) {
    return usage(std::string("unknown command '") + argv[1] + "'");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    return usage(e.what());
  }
  o.command = app.get_subcommands().front()->get_name();

  try {
    const RunConfig rc = resolve(o);
    const fs::path dir = o.out_dir;
    fs::create_directories(dir);
    write_text(dir / "resolved_config.txt", rc.to_text());
    RunLog log(dir / "run.log", out);
    log("command ", o.command);
    const auto t0 = std::chrono::steady_clock::now();
    if (o.command == "synth-data") {
      cmd_synth(rc, dir, log);
    } else if (o.command == "train") {
      cmd_train(rc, dir, log);
    } else if (o.command == "eval") {
      cmd_eval(rc, o, dir, log);
    } else if (o.command == "quantize") {
      cmd_quantize(rc, o, dir, log);
    } else if (o.command == "profile") {
      cmd_profile(rc, o, dir, log, out);
    } else if (o.command == "sweep") {
      cmd_sweep(rc, dir, log);
    } else {
      cmd_export(rc, o, dir, log);
    }
    log("done");
    out << "elapsed " << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << " s\n";
    return kOk;
  } catch (const ConfigError& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsageError;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kContractError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kContractError;
  }
}

}  // namespace tinyglass::cli
