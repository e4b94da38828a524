#pragma once

#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "spectralx/backbone.hpp"
#include "spectralx/dataio.hpp"
#include "spectralx/profiles.hpp"

namespace spectralx {

using ConfigMap = std::map<std::string, std::string>;

// Line-oriented `section.key=value` settings; '#' starts a comment.
inline ConfigMap parse_config_text(std::istream& in) {
  ConfigMap out;
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    size_t b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    size_t e = line.find_last_not_of(" \t\r");
    line = line.substr(b, e - b + 1);
    const auto eq = line.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("config: expected key=value: " + line);
    std::string key = line.substr(0, eq);
    std::string val = line.substr(eq + 1);
    const auto ke = key.find_last_not_of(" \t");
    key = key.substr(0, ke + 1);
    const auto vb = val.find_first_not_of(" \t");
    val = vb == std::string::npos ? "" : val.substr(vb);
    if (out.count(key)) throw ConfigError("config: duplicate key: " + key);
    out[key] = val;
  }
  return out;
}

inline ConfigMap parse_config_text(const std::string& text) {
  std::istringstream in(text);
  return parse_config_text(in);
}

inline ConfigMap parse_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config: cannot open: " + path);
  return parse_config_text(f);
}

// Command-line overrides in the same key=value form; they win over the file.
inline void apply_overrides(ConfigMap& cfg, const std::vector<std::string>& overrides) {
  for (const std::string& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("config: bad override: " + o);
    cfg[o.substr(0, eq)] = o.substr(eq + 1);
  }
}

namespace detail {

inline real to_real(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    const real r = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("config: " + key + " expects a number, got '" + v + "'");
  }
}

inline int64_t to_int(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    const int64_t r = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("config: " + key + " expects an integer, got '" + v + "'");
  }
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config: " + key + " expects a boolean, got '" + v + "'");
}

}  // namespace detail

// Everything one run needs: model arm, data source, schedule, and outputs.
struct RunConfig {
  std::string profile = "desk";
  uint64_t seed = 0;
  std::string data_dir = "data";
  std::string out_dir = "runs";
  std::string weights_path;  // for infer / eval
  int64_t epochs_stage1 = 30;
  int64_t epochs_stage2 = 30;
  real lr = 1e-3;
  int64_t batch = 8;
  bool stage1_enabled = true;
  bool flag_hypert = true;
  bool flag_aomoa = true;
  bool flag_are = true;
  std::string baseline = "none";  // none | freeze | full | lowrank
  int64_t lora_rank = 4;
  int64_t train_scenes = 64;
  int64_t test_scenes = 32;
  real scene_noise = 0.05;
  real scene_illum = 0.2;
  int64_t scene_sites = 5;
  std::string shift_kind = "regional";
  real shift_magnitude = 0.4;

  void validate() const {
    if (profile != "desk" && profile != "full") throw ConfigError("config: unknown profile");
    if (baseline != "none" && baseline != "freeze" && baseline != "full" &&
        baseline != "lowrank") {
      throw ConfigError("config: unknown baseline: " + baseline);
    }
    // cumulative component rows: are needs aomoa needs hypert
    if (flag_are && !flag_aomoa) throw ConfigError("config: flags.are requires flags.aomoa");
    if (flag_aomoa && !flag_hypert) throw ConfigError("config: flags.aomoa requires flags.hypert");
    if (epochs_stage1 < 1 || epochs_stage2 < 1) throw ConfigError("config: epochs must be >= 1");
    if (batch < 1) throw ConfigError("config: batch must be >= 1");
    if (lr <= 0.0) throw ConfigError("config: lr must be positive");
    if (train_scenes < 1 || test_scenes < 1) throw ConfigError("config: scene counts >= 1");
    if (lora_rank < 1) throw ConfigError("config: lora.rank must be >= 1");
    if (shift_kind != "none" && shift_kind != "regional" && shift_kind != "seasonal") {
      throw ConfigError("config: unknown shift.kind: " + shift_kind);
    }
    if (shift_magnitude < 0.0) throw ConfigError("config: shift.magnitude must be >= 0");
  }

  ModelFlags model_flags() const {
    ModelFlags f;
    if (baseline == "lowrank") {
      f.train_hypert = false;
      f.use_aomoa = false;
      f.use_are = false;
      f.lora_rank = lora_rank;
      return f;
    }
    if (baseline == "freeze" || baseline == "full") {
      f.train_hypert = false;
      f.use_aomoa = false;
      f.use_are = false;
      return f;
    }
    f.train_hypert = flag_hypert;
    f.use_aomoa = flag_aomoa;
    f.use_are = flag_are;
    return f;
  }

  DomainShift domain_shift() const {
    DomainShift s;
    s.magnitude = shift_magnitude;
    if (shift_kind == "none") s.kind = DomainShift::Kind::none;
    if (shift_kind == "regional") s.kind = DomainShift::Kind::regional;
    if (shift_kind == "seasonal") s.kind = DomainShift::Kind::seasonal;
    return s;
  }
};

inline RunConfig run_config_from(const ConfigMap& cfg) {
  RunConfig rc;
  for (const auto& [key, val] : cfg) {
    if (key == "profile") rc.profile = val;
    else if (key == "seed") rc.seed = static_cast<uint64_t>(detail::to_int(key, val));
    else if (key == "data.dir") rc.data_dir = val;
    else if (key == "out.dir") rc.out_dir = val;
    else if (key == "weights.path") rc.weights_path = val;
    else if (key == "epochs.stage1") rc.epochs_stage1 = detail::to_int(key, val);
    else if (key == "epochs.stage2") rc.epochs_stage2 = detail::to_int(key, val);
    else if (key == "train.lr") rc.lr = detail::to_real(key, val);
    else if (key == "train.batch") rc.batch = detail::to_int(key, val);
    else if (key == "flags.stage1") rc.stage1_enabled = detail::to_bool(key, val);
    else if (key == "flags.hypert") rc.flag_hypert = detail::to_bool(key, val);
    else if (key == "flags.aomoa") rc.flag_aomoa = detail::to_bool(key, val);
    else if (key == "flags.are") rc.flag_are = detail::to_bool(key, val);
    else if (key == "baseline") rc.baseline = val;
    else if (key == "lora.rank") rc.lora_rank = detail::to_int(key, val);
    else if (key == "scenes.train") rc.train_scenes = detail::to_int(key, val);
    else if (key == "scenes.test") rc.test_scenes = detail::to_int(key, val);
    else if (key == "scenes.noise") rc.scene_noise = detail::to_real(key, val);
    else if (key == "scenes.illum") rc.scene_illum = detail::to_real(key, val);
    else if (key == "scenes.sites") rc.scene_sites = detail::to_int(key, val);
    else if (key == "shift.kind") rc.shift_kind = val;
    else if (key == "shift.magnitude") rc.shift_magnitude = detail::to_real(key, val);
    else throw ConfigError("config: unknown key: " + key);
  }
  const char* env_seed = std::getenv("SPECTRALX_SEED");
  if (env_seed != nullptr) {
    rc.seed = static_cast<uint64_t>(detail::to_int("SPECTRALX_SEED", env_seed));
  }
  rc.validate();
  return rc;
}

// Canonical text of a config: sorted key=value lines. Run manifests hash this.
inline std::string canonical_config(const RunConfig& rc) {
  std::ostringstream os;
  os << "baseline=" << rc.baseline << "\n"
     << "data.dir=" << rc.data_dir << "\n"
     << "epochs.stage1=" << rc.epochs_stage1 << "\n"
     << "epochs.stage2=" << rc.epochs_stage2 << "\n"
     << "flags.aomoa=" << (rc.flag_aomoa ? "true" : "false") << "\n"
     << "flags.are=" << (rc.flag_are ? "true" : "false") << "\n"
     << "flags.hypert=" << (rc.flag_hypert ? "true" : "false") << "\n"
     << "flags.stage1=" << (rc.stage1_enabled ? "true" : "false") << "\n"
     << "lora.rank=" << rc.lora_rank << "\n"
     << "out.dir=" << rc.out_dir << "\n"
     << "profile=" << rc.profile << "\n"
     << "scenes.illum=" << rc.scene_illum << "\n"
     << "scenes.noise=" << rc.scene_noise << "\n"
     << "scenes.sites=" << rc.scene_sites << "\n"
     << "scenes.test=" << rc.test_scenes << "\n"
     << "scenes.train=" << rc.train_scenes << "\n"
     << "seed=" << rc.seed << "\n"
     << "shift.kind=" << rc.shift_kind << "\n"
     << "shift.magnitude=" << rc.shift_magnitude << "\n"
     << "train.batch=" << rc.batch << "\n"
     << "train.lr=" << rc.lr << "\n"
     << "weights.path=" << rc.weights_path << "\n";
  return os.str();
}

}  // namespace spectralx
