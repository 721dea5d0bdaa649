#pragma once

#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "kdasc/augment.hpp"
#include "kdasc/distill.hpp"
#include "kdasc/models.hpp"
#include "kdasc/pipeline.hpp"

namespace kdasc {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A scalar or array value from the config file, kept as text.
struct ConfigValue {
  std::vector<std::string> items;  // one item for scalars
  bool is_array = false;

  const std::string& scalar(const std::string& key) const {
    if (is_array || items.size() != 1) throw ConfigError("config key '" + key + "' expects a single value");
    return items.front();
  }
};

using ConfigSection = std::map<std::string, ConfigValue>;

/// Sections of `key = value` lines in the TOML subset used for experiment
/// configs: [section] headers, # comments, quoted strings, numbers, booleans
/// and flat arrays.
class ConfigDocument {
 public:
  static ConfigDocument parse(const std::string& text, const std::string& source = "<config>") {
    ConfigDocument doc;
    std::istringstream is(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      line = strip_comment(line);
      line = trim(line);
      if (line.empty()) continue;
      const std::string where = source + ":" + std::to_string(lineno);
      if (line.front() == '[') {
        if (line.back() != ']') throw ConfigError(where + ": unterminated section header");
        section = trim(line.substr(1, line.size() - 2));
        doc.sections_[section];
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
      const std::string key = trim(line.substr(0, eq));
      if (key.empty()) throw ConfigError(where + ": empty key");
      auto& sec = doc.sections_[section];
      if (sec.count(key)) throw ConfigError(where + ": duplicate key '" + key + "'");
      sec[key] = parse_value(trim(line.substr(eq + 1)), where);
    }
    return doc;
  }

  static ConfigDocument load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return parse(ss.str(), path.string());
  }

  bool has(const std::string& section, const std::string& key) const {
    auto it = sections_.find(section);
    return it != sections_.end() && it->second.count(key);
  }
  bool has_section(const std::string& section) const { return sections_.count(section) != 0; }

  const ConfigValue* find(const std::string& section, const std::string& key) const {
    auto it = sections_.find(section);
    if (it == sections_.end()) return nullptr;
    auto kt = it->second.find(key);
    return kt == it->second.end() ? nullptr : &kt->second;
  }

  std::string get_string(const std::string& section, const std::string& key, const std::string& def) const {
    const auto* v = find(section, key);
    return v ? v->scalar(section + "." + key) : def;
  }

  double get_double(const std::string& section, const std::string& key, double def) const {
    const auto* v = find(section, key);
    if (!v) return def;
    return to_double(v->scalar(section + "." + key), section + "." + key);
  }

  long get_int(const std::string& section, const std::string& key, long def) const {
    const double d = get_double(section, key, static_cast<double>(def));
    if (d != std::floor(d)) throw ConfigError("config key '" + section + "." + key + "' must be an integer");
    return static_cast<long>(d);
  }

  bool get_bool(const std::string& section, const std::string& key, bool def) const {
    const auto* v = find(section, key);
    if (!v) return def;
    const auto& s = v->scalar(section + "." + key);
    if (s == "true") return true;
    if (s == "false") return false;
    throw ConfigError("config key '" + section + "." + key + "' must be true or false");
  }

  std::vector<std::string> get_list(const std::string& section, const std::string& key) const {
    const auto* v = find(section, key);
    return v ? v->items : std::vector<std::string>{};
  }

  /// Keys present in a section, for unknown-key checks.
  std::vector<std::string> keys(const std::string& section) const {
    std::vector<std::string> out;
    auto it = sections_.find(section);
    if (it != sections_.end())
      for (const auto& [k, v] : it->second) out.push_back(k);
    return out;
  }

  std::vector<std::string> section_names() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : sections_) out.push_back(k);
    return out;
  }

  void set(const std::string& section, const std::string& key, const std::string& value) {
    sections_[section][key] = ConfigValue{{value}, false};
  }

  static double to_double(const std::string& s, const std::string& key) {
    try {
      std::size_t pos = 0;
      const double d = std::stod(s, &pos);
      if (pos != s.size()) throw std::invalid_argument(s);
      return d;
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "' is not a number: " + s);
    }
  }

 private:
  static std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
  }

  static std::string strip_comment(const std::string& s) {
    bool quoted = false;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] == '"') quoted = !quoted;
      if (s[i] == '#' && !quoted) return s.substr(0, i);
    }
    return s;
  }

  static std::string unquote(const std::string& s, const std::string& where) {
    if (s.size() >= 2 && s.front() == '"') {
      if (s.back() != '"') throw ConfigError(where + ": unterminated string");
      return s.substr(1, s.size() - 2);
    }
    if (s.empty()) throw ConfigError(where + ": empty value");
    return s;
  }

  static ConfigValue parse_value(const std::string& raw, const std::string& where) {
    ConfigValue v;
    if (!raw.empty() && raw.front() == '[') {
      if (raw.back() != ']') throw ConfigError(where + ": unterminated array");
      v.is_array = true;
      std::string body = raw.substr(1, raw.size() - 2);
      std::string cur;
      bool quoted = false;
      for (char c : body) {
        if (c == '"') quoted = !quoted;
        if (c == ',' && !quoted) {
          if (!trim(cur).empty()) v.items.push_back(unquote(trim(cur), where));
          cur.clear();
        } else {
          cur.push_back(c);
        }
      }
      if (!trim(cur).empty()) v.items.push_back(unquote(trim(cur), where));
      return v;
    }
    v.items.push_back(unquote(raw, where));
    return v;
  }

  std::map<std::string, ConfigSection> sections_;
};

// ---------------------------------------------------------------------------
// Device-generalization presets

/// Which augmentations run and with what strength.
struct AugmentSettings {
  bool use_fms = false;
  bool use_dir = false;
  FmsConfig fms{0.3, 0.4};
  double dir_p = 0.6;
};

enum class Role { Teacher, Student };

inline Role parse_role(const std::string& s) {
  if (s == "teacher") return Role::Teacher;
  if (s == "student") return Role::Student;
  throw ConfigError("unknown model role '" + s + "' (expected teacher or student)");
}

inline std::string role_name(Role r) { return r == Role::Teacher ? "teacher" : "student"; }

/// Preset strengths: students use alpha 0.3, p_fms 0.4, p_dir 0.6; CNN
/// teachers alpha 0.3, p_fms 0.8, p_dir 0.4; imported transformer teachers are
/// annotated with alpha 0.4, p_fms 0.4, p_dir 0.6.
inline AugmentSettings dg_strengths(const std::string& arch, Role role) {
  AugmentSettings s;
  if (role == Role::Student) {
    s.fms = {0.3, 0.4};
    s.dir_p = 0.6;
  } else if (arch == "passt" || arch == "passt-import" || arch == "PaSST") {
    s.fms = {0.4, 0.4};
    s.dir_p = 0.6;
  } else {
    s.fms = {0.3, 0.8};
    s.dir_p = 0.4;
  }
  return s;
}

inline const std::vector<std::string>& dg_preset_names() {
  static const std::vector<std::string> names{"DIRFMS", "DIR", "FMS", "NONE"};
  return names;
}

inline AugmentSettings dg_preset(const std::string& preset, const std::string& arch, Role role) {
  AugmentSettings s = dg_strengths(arch, role);
  if (preset == "DIRFMS") {
    s.use_fms = s.use_dir = true;
  } else if (preset == "DIR") {
    s.use_dir = true;
  } else if (preset == "FMS") {
    s.use_fms = true;
  } else if (preset != "NONE" && preset != "NO_AUG") {
    throw ConfigError("undefined DG preset '" + preset + "' (expected DIRFMS, DIR, FMS or NONE)");
  }
  return s;
}

// ---------------------------------------------------------------------------
// Experiment config

struct TrainSettings {
  int epochs = 30;
  int batch_size = 32;
  double lr = 1e-3;
  int warmup_epochs = 4;
  std::uint64_t seed = 1;
  int runs = 1;
  int keep_last = 4;
};

/// Everything one training job needs. Defaults follow the toolkit's desk-scale
/// settings with lambda 0.02 and tau 2.
struct ExperimentConfig {
  ModelSpec model;
  Role role = Role::Teacher;
  DistillConfig distill;
  std::string teacher_logits;  // empty: label-only training
  std::string dg_preset = "DIRFMS";
  AugmentSettings augment = kdasc::dg_preset("DIRFMS", "cpm", Role::Teacher);
  std::string ir_dir;  // empty: synthetic bank
  std::uint64_t ir_seed = 7;
  TrainSettings train;
  std::string manifest;
  InputPipeline pipe;

  static ExperimentConfig from_document(const ConfigDocument& doc, const std::filesystem::path& base_dir = {}) {
    static const std::map<std::string, std::vector<std::string>> known{
        {"model", {"arch", "role", "base_channels", "expansion_rate", "channels_multiplier", "n_classes"}},
        {"distill", {"lambda", "tau", "teacher_logits"}},
        {"augment", {"preset", "fms_alpha", "fms_p", "dir_p", "ir_dir", "ir_seed"}},
        {"train", {"epochs", "batch_size", "lr", "warmup_epochs", "seed", "runs", "keep_last"}},
        {"data", {"manifest", "sample_rate", "n_fft", "hop", "mel_bins", "f_min", "f_max", "crop_seconds"}},
        {"matrix", {}}};
    for (const auto& sec : doc.section_names()) {
      auto it = known.find(sec);
      if (it == known.end()) throw ConfigError("unknown config section [" + sec + "]");
      if (sec == "matrix") continue;
      for (const auto& k : doc.keys(sec)) {
        if (std::find(it->second.begin(), it->second.end(), k) == it->second.end()) {
          throw ConfigError("unknown config key '" + sec + "." + k + "'");
        }
      }
    }
    auto resolve = [&](const std::string& p) -> std::string {
      if (p.empty() || base_dir.empty() || std::filesystem::path(p).is_absolute()) return p;
      return (base_dir / p).string();
    };

    ExperimentConfig c;
    const std::string arch = doc.get_string("model", "arch", "cpm");
    c.model.arch = parse_arch(arch);
    c.role = parse_role(doc.get_string("model", "role", "teacher"));
    c.model.base_channels = static_cast<int>(doc.get_int("model", "base_channels", 32));
    c.model.expansion_rate = static_cast<int>(doc.get_int("model", "expansion_rate", 3));
    c.model.channels_multiplier = doc.get_double("model", "channels_multiplier", 2.3);
    c.model.n_classes = static_cast<int>(doc.get_int("model", "n_classes", 10));

    c.distill.lambda = doc.get_double("distill", "lambda", 0.02);
    c.distill.tau = doc.get_double("distill", "tau", 2.0);
    c.distill.validate();
    c.teacher_logits = resolve(doc.get_string("distill", "teacher_logits", ""));

    c.dg_preset = doc.get_string("augment", "preset", "DIRFMS");
    c.augment = kdasc::dg_preset(c.dg_preset, arch, c.role);
    c.augment.fms.alpha = doc.get_double("augment", "fms_alpha", c.augment.fms.alpha);
    c.augment.fms.p = doc.get_double("augment", "fms_p", c.augment.fms.p);
    c.augment.dir_p = doc.get_double("augment", "dir_p", c.augment.dir_p);
    c.augment.fms.validate();
    c.ir_dir = resolve(doc.get_string("augment", "ir_dir", ""));
    c.ir_seed = static_cast<std::uint64_t>(doc.get_int("augment", "ir_seed", 7));

    c.train.epochs = static_cast<int>(doc.get_int("train", "epochs", 30));
    c.train.batch_size = static_cast<int>(doc.get_int("train", "batch_size", 32));
    c.train.lr = doc.get_double("train", "lr", 1e-3);
    c.train.warmup_epochs = static_cast<int>(doc.get_int("train", "warmup_epochs", 4));
    c.train.seed = static_cast<std::uint64_t>(doc.get_int("train", "seed", 1));
    c.train.runs = static_cast<int>(doc.get_int("train", "runs", 1));
    c.train.keep_last = static_cast<int>(doc.get_int("train", "keep_last", 4));
    if (c.train.epochs < 1 || c.train.batch_size < 1 || c.train.runs < 1 || c.train.keep_last < 1 ||
        c.train.warmup_epochs < 0 || !(c.train.lr > 0.0)) {
      throw ConfigError("invalid [train] settings");
    }

    c.manifest = resolve(doc.get_string("data", "manifest", ""));
    auto& fe = c.pipe.frontend;
    fe.sample_rate = static_cast<std::uint32_t>(doc.get_int("data", "sample_rate", 32000));
    fe.n_fft = static_cast<std::size_t>(doc.get_int("data", "n_fft", 1024));
    fe.hop = static_cast<std::size_t>(doc.get_int("data", "hop", 320));
    fe.mel_bins = static_cast<std::size_t>(doc.get_int("data", "mel_bins", 64));
    fe.f_min = doc.get_double("data", "f_min", 0.0);
    fe.f_max = doc.get_double("data", "f_max", fe.sample_rate / 2.0);
    const double crop_seconds = doc.get_double("data", "crop_seconds", 1.0);
    c.pipe.crop_samples = static_cast<std::size_t>(std::lround(crop_seconds * fe.sample_rate));
    return c;
  }

  static ExperimentConfig load(const std::filesystem::path& path) {
    return from_document(ConfigDocument::load(path), path.parent_path());
  }

  DirConfig dir_config() const {
    DirConfig d;
    d.p = augment.use_dir ? augment.dir_p : 0.0;
    if (augment.use_dir) d.ir_bank = ir_dir.empty() ? synthetic_ir_bank(ir_seed) : load_ir_bank(ir_dir);
    return d;
  }
};

}  // namespace kdasc
