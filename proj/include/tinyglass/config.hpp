// SPDX-License-Identifier: Apache-2.0
//
// Flat key=value run configuration shared by every command. A fixed key
// table carries the defaults; unknown keys are rejected on both the file
// and the override path, and the resolved table is written next to outputs.
#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "tinyglass/data.hpp"
#include "tinyglass/error.hpp"
#include "tinyglass/evaluator.hpp"
#include "tinyglass/model.hpp"
#include "tinyglass/quantizer.hpp"
#include "tinyglass/trainer.hpp"

namespace tinyglass {

/// Malformed config text, unknown key or unparsable value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

struct ConfigKey {
  const char* name;
  const char* fallback;
  const char* help;
};

// clang-format off
inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
    {"seed", "0", "master seed; every subsystem seed derives from it"},
    {"threads", "1", "worker threads"},
    {"input_size", "256", "square model input resolution"},

    {"data.root", "", "MVTec-style dataset root; empty selects the synthetic set"},
    {"data.category", "synthetic", "category directory under data.root"},
    {"data.val_fraction", "0.3", "share of test carved into validation"},
    {"data.pool_from_test", "0", "defective test samples moved into an absent contamination pool"},
    {"synth.n_train", "64", ""},
    {"synth.n_val", "16", ""},
    {"synth.n_test", "48", ""},
    {"synth.n_pool", "32", ""},
    {"synth.defect_rate", "0.5", ""},
    {"synth.size", "128", ""},

    {"model.weights", "", "TGW backbone weights; empty gives a seeded random backbone"},
    {"model.backbone", "resnet18", "resnet18 or tiny"},
    {"model.backbone_scale", "1", "He-init multiplier for the random backbone"},
    {"model.patch_size", "3", ""},
    {"model.grid", "level3", "level2 or level3"},
    {"model.adaptor", "linear", "linear or none"},
    {"model.hidden", "175", ""},
    {"model.slope", "0.2", ""},

    {"train.lr_adaptor", "0.0001", ""},
    {"train.lr_disc", "0.0002", ""},
    {"train.weight_decay", "0.00001", ""},
    {"train.batch_size", "8", ""},
    {"train.max_epochs", "200", ""},
    {"train.focal_alpha", "0.25", ""},
    {"train.focal_gamma", "2", ""},
    {"train.texture_dir", "", "LAS texture images; empty uses procedural textures"},
    {"gas.sigma", "0.015", ""},
    {"gas.steps", "1", ""},
    {"gas.lr", "0.01", ""},
    {"gas.r_min", "0", "0 derives the band from the embedding width"},
    {"gas.r_max", "0", ""},
    {"las.octaves", "6", ""},
    {"las.threshold", "0.78", ""},
    {"las.beta", "0.5", ""},
    {"augment.rotate", "true", ""},
    {"augment.translate", "true", ""},
    {"augment.jitter", "true", ""},
    {"augment.hflip", "true", ""},
    {"augment.vflip", "true", ""},
    {"augment.prob", "0.5", ""},

    {"eval.sigma", "4", "score smoothing in input pixels"},
    {"eval.top_k", "1", ""},
    {"eval.pixel_auroc", "true", ""},
    {"eval.max_pixels", "4194304", ""},

    {"quant.method", "minmax", "minmax or percentile"},
    {"quant.percentile", "99.9", ""},
    {"quant.calib_images", "32", "training images used for calibration, each also LAS-corrupted"},

    {"sweep.rates", "0,0.05,0.1,0.2,0.3", ""},
  };
  return keys;
}
// clang-format on

class RunConfig {
 public:
  RunConfig() {
    for (const auto& k : config_keys()) values_[k.name] = k.fallback;
  }

  static bool known(std::string_view key) {
    for (const auto& k : config_keys())
      if (key == k.name) return true;
    return false;
  }

  void set(const std::string& key, const std::string& value) {
    if (!known(key)) throw ConfigError("unknown config key '" + key + "'");
    values_[key] = value;
  }

  /// Parses key=value lines. Blank lines and '#' comments are skipped;
  /// whitespace around keys and values is trimmed.
  void merge_text(const std::string& text, const std::string& origin = "config") {
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const std::string t = trim(line);
      if (t.empty() || t[0] == '#') continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key=value");
      }
      const std::string key = trim(t.substr(0, eq));
      if (!known(key)) throw ConfigError(origin + ":" + std::to_string(lineno) + ": unknown config key '" + key + "'");
      values_[key] = trim(t.substr(eq + 1));
    }
  }

  void merge_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    merge_text(ss.str(), path.string());
  }

  /// Every key in table order, one per line.
  std::string to_text() const {
    std::ostringstream o;
    for (const auto& k : config_keys()) o << k.name << "=" << values_.at(k.name) << "\n";
    return o.str();
  }

  const std::string& str(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  std::uint64_t u64(const std::string& key) const {
    const std::string& v = str(key);
    std::uint64_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) bad(key, "an unsigned integer");
    return out;
  }

  std::size_t size(const std::string& key) const { return static_cast<std::size_t>(u64(key)); }

  double real(const std::string& key) const {
    const std::string& v = str(key);
    try {
      std::size_t used = 0;
      const double d = std::stod(v, &used);
      if (used == v.size()) return d;
    } catch (const std::logic_error&) {
    }
    bad(key, "a number");
  }

  bool flag(const std::string& key) const {
    const std::string& v = str(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    bad(key, "true or false");
  }

  std::vector<double> reals(const std::string& key) const {
    std::vector<double> out;
    std::istringstream in(str(key));
    std::string part;
    while (std::getline(in, part, ',')) {
      RunConfig tmp;
      tmp.values_[key] = trim(part);
      out.push_back(tmp.real(key));
    }
    return out;
  }

  friend bool operator==(const RunConfig&, const RunConfig&) = default;

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  [[noreturn]] void bad(const std::string& key, const char* want) const {
    throw ConfigError("config key '" + key + "' must be " + want + ", got '" + values_.at(key) + "'");
  }

  std::map<std::string, std::string> values_;
};

// ---------------------------------------------------------------------------
// Typed views

inline ModelConfig model_config(const RunConfig& rc) {
  ModelConfig m;
  const std::string& bb = rc.str("model.backbone");
  if (bb == "tiny") {
    m.backbone = BackboneConfig::tiny();
  } else if (bb != "resnet18") {
    throw ConfigError("model.backbone must be resnet18 or tiny, got '" + bb + "'");
  }
  m.embedding.patch_size = rc.size("model.patch_size");
  const std::string& grid = rc.str("model.grid");
  if (grid != "level2" && grid != "level3") throw ConfigError("model.grid must be level2 or level3");
  m.embedding.grid = grid == "level2" ? CommonGrid::level2 : CommonGrid::level3;
  const std::string& ad = rc.str("model.adaptor");
  if (ad != "linear" && ad != "none") throw ConfigError("model.adaptor must be linear or none");
  m.embedding.adaptor = ad == "none" ? AdaptorKind::none : AdaptorKind::linear;
  m.hidden = rc.size("model.hidden");
  m.slope = rc.real("model.slope");
  return m;
}

inline TrainConfig train_config(const RunConfig& rc) {
  TrainConfig t;
  t.seed = rc.u64("seed");
  t.threads = rc.size("threads");
  t.input_size = rc.size("input_size");
  t.lr_adaptor = rc.real("train.lr_adaptor");
  t.lr_disc = rc.real("train.lr_disc");
  t.weight_decay = rc.real("train.weight_decay");
  t.batch_size = rc.size("train.batch_size");
  t.max_epochs = rc.size("train.max_epochs");
  t.focal_alpha = rc.real("train.focal_alpha");
  t.focal_gamma = rc.real("train.focal_gamma");
  t.texture_dir = rc.str("train.texture_dir");
  t.gas_sigma = rc.real("gas.sigma");
  t.gas_steps = rc.size("gas.steps");
  t.gas_lr = rc.real("gas.lr");
  t.gas_r_min = rc.real("gas.r_min");
  t.gas_r_max = rc.real("gas.r_max");
  t.las.octaves = rc.size("las.octaves");
  t.las.threshold = rc.real("las.threshold");
  t.las.beta = rc.real("las.beta");
  t.augment.rotate = rc.flag("augment.rotate");
  t.augment.translate = rc.flag("augment.translate");
  t.augment.jitter = rc.flag("augment.jitter");
  t.augment.hflip = rc.flag("augment.hflip");
  t.augment.vflip = rc.flag("augment.vflip");
  t.augment.apply_prob = rc.real("augment.prob");
  t.score_sigma = rc.real("eval.sigma");
  t.score_top_k = rc.size("eval.top_k");
  return t;
}

inline EvalConfig eval_config(const RunConfig& rc) {
  EvalConfig e;
  e.input_size = rc.size("input_size");
  e.sigma = rc.real("eval.sigma");
  e.top_k = rc.size("eval.top_k");
  e.pixel_auroc = rc.flag("eval.pixel_auroc");
  e.max_pixels = rc.size("eval.max_pixels");
  e.seed = rc.u64("seed");
  e.threads = rc.size("threads");
  return e;
}

inline SynthConfig synth_config(const RunConfig& rc) {
  SynthConfig s;
  s.seed = rc.u64("seed");
  s.n_train = rc.size("synth.n_train");
  s.n_val = rc.size("synth.n_val");
  s.n_test = rc.size("synth.n_test");
  s.n_pool = rc.size("synth.n_pool");
  s.defect_rate = rc.real("synth.defect_rate");
  s.size = rc.size("synth.size");
  return s;
}

inline CalibrationConfig calibration_config(const RunConfig& rc) {
  CalibrationConfig c;
  const std::string& m = rc.str("quant.method");
  if (m != "minmax" && m != "percentile") throw ConfigError("quant.method must be minmax or percentile");
  c.method = m == "percentile" ? CalibrationConfig::Method::percentile : CalibrationConfig::Method::minmax;
  c.percentile = rc.real("quant.percentile");
  return c;
}

/// Synthetic data when data.root is empty, otherwise the directory tree.
inline Dataset load_run_dataset(const RunConfig& rc) {
  const std::string& root = rc.str("data.root");
  if (root.empty()) return synth_dataset(synth_config(rc));
  Dataset d = load_dataset(root, rc.str("data.category"), rc.real("data.val_fraction"), rc.u64("seed"));
  if (std::filesystem::is_directory(std::filesystem::path(root) / (rc.str("data.category") + "_pool"))) {
    d.pool = load_pool(root, rc.str("data.category"));
  }
  const std::size_t k = rc.size("data.pool_from_test");
  if (k > 0 && d.pool.empty()) carve_contamination_pool(d, k);
  return d;
}

/// Backbone from model.weights, or a seeded random one; fresh head.
inline Model build_run_model(const RunConfig& rc) {
  const ModelConfig mc = model_config(rc);
  const std::uint64_t seed = rc.u64("seed");
  Model m{{}, mc.embedding, make_head(mc, seed)};
  const std::string& w = rc.str("model.weights");
  m.backbone = w.empty() ? backbone_random_init(seed, rc.real("model.backbone_scale"), mc.backbone)
                         : load_weights(w, mc.backbone);
  return m;
}

}  // namespace tinyglass
