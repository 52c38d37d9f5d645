#pragma once

// Experiment configuration: a small sectioned key = value text format.
//
//   document   := line*
//   line       := blank | comment | section | assignment
//   comment    := ('#' | ';') any*
//   section    := '[' name ('.' name)* ']'
//   assignment := key '=' value [ws '#' any*]
//
// Keys before the first section header live in the root section. A key may
// appear once per section. Lists are comma separated. Every key must be known;
// see docs/config.md for the full key reference.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "m2cl/data.hpp"
#include "m2cl/loss.hpp"
#include "m2cl/model.hpp"

namespace m2cl {

/// Flat view of a parsed document: "section.key" -> raw value.
class KeyValueDocument {
 public:
  static KeyValueDocument parse(const std::string& text, const std::string& origin = "<config>") {
    KeyValueDocument doc;
    std::istringstream in(text);
    std::string line, section;
    std::size_t lineno = 0;
    auto fail = [&](const std::string& msg) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + msg);
    };
    while (std::getline(in, line)) {
      ++lineno;
      std::string s = trim(line);
      if (s.empty() || s[0] == '#' || s[0] == ';') continue;
      if (s.front() == '[') {
        if (s.back() != ']') fail("unterminated section header");
        section = trim(s.substr(1, s.size() - 2));
        if (section.empty() || !valid_name(section)) fail("bad section name '" + section + "'");
        continue;
      }
      const auto eq = s.find('=');
      if (eq == std::string::npos) fail("expected key = value");
      const std::string key = trim(s.substr(0, eq));
      std::string value = s.substr(eq + 1);
      for (std::size_t i = 1; i < value.size(); ++i)
        if (value[i] == '#' && std::isspace(static_cast<unsigned char>(value[i - 1]))) {
          value.resize(i);
          break;
        }
      value = trim(value);
      if (key.empty() || !valid_name(key) || key.find('.') != std::string::npos) fail("bad key '" + key + "'");
      const std::string full = section.empty() ? key : section + "." + key;
      if (!doc.values_.emplace(full, value).second) fail("duplicate key '" + full + "'");
      doc.lines_[full] = lineno;
    }
    return doc;
  }

  static KeyValueDocument load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot read " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path.string());
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  /// Marks the key as consumed and returns its value.
  std::optional<std::string> take(const std::string& key) {
    auto it = values_.find(key);
    if (it == values_.end()) return std::nullopt;
    used_.insert(key);
    return it->second;
  }

  /// Every key in `section.*` (one level of sub-section) that has not been taken yet.
  std::vector<std::string> sections_with_prefix(const std::string& prefix) const {
    std::set<std::string> out;
    for (const auto& [k, v] : values_)
      if (k.rfind(prefix, 0) == 0) {
        const auto rest = k.substr(prefix.size());
        const auto dot = rest.find('.');
        if (dot != std::string::npos) out.insert(rest.substr(0, dot));
      }
    return {out.begin(), out.end()};
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  void reject_unused() const {
    for (const auto& [k, v] : values_)
      if (!used_.count(k)) {
        auto it = lines_.find(k);
        throw ConfigError("config: unknown key '" + k + "'" +
                          (it != lines_.end() ? " (line " + std::to_string(it->second) + ")" : ""));
      }
  }

  const std::map<std::string, std::string>& values() const noexcept { return values_; }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

 private:
  static bool valid_name(const std::string& s) {
    return std::all_of(s.begin(), s.end(), [](char c) {
      return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
    });
  }

  std::map<std::string, std::string> values_;
  std::map<std::string, std::size_t> lines_;
  std::set<std::string> used_;
};

namespace cfg {

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(v);
  while (std::getline(in, item, ',')) {
    item = KeyValueDocument::trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline double to_double(const std::string& key, const std::string& v) {
  double out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) throw ConfigError("config: " + key + ": '" + v + "' is not a number");
  return out;
}

inline std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size())
    throw ConfigError("config: " + key + ": '" + v + "' is not a non-negative integer");
  return out;
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "on" || v == "yes" || v == "1") return true;
  if (v == "false" || v == "off" || v == "no" || v == "0") return false;
  throw ConfigError("config: " + key + ": '" + v + "' is not a boolean");
}

inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  // Shortest form that round-trips.
  for (int p = 1; p <= 17; ++p) {
    char tmp[32];
    std::snprintf(tmp, sizeof tmp, "%.*g", p, v);
    if (std::strtod(tmp, nullptr) == v) return tmp;
  }
  return buf;
}

template <typename F>
void read(KeyValueDocument& doc, const std::string& key, F&& apply) {
  if (auto v = doc.take(key)) apply(*v);
}

}  // namespace cfg

struct OptimizerConfig {
  double lr = 0.001;
  double momentum = 0.9;
  std::size_t epochs = 30;
  std::size_t batch_size = 128;
  bool balanced = true;
};

enum class DataSource { Synthetic, Directory };

struct DataConfig {
  DataSource source = DataSource::Synthetic;
  SyntheticSpec synthetic;
  std::string path;
};

struct SplitConfig {
  /// Domain names or indices; "last" picks the final domain.
  std::vector<std::string> held_out{"last"};
  double val_fraction = 0.1;
};

struct ExperimentConfig {
  ModelSpec model;
  /// "all", "none" (no extraction blocks) or explicit tap names.
  std::vector<std::string> taps{"all"};
  /// "auto" enables the final-feature head input exactly when there are no blocks.
  std::string final_features = "auto";
  LossConfig loss;
  OptimizerConfig optimizer;
  DataConfig data;
  SplitConfig split;
  std::uint64_t seed = 0;
  std::string output_dir = "runs";
  std::string precision = "float";
  std::size_t repeats = 3;
  std::vector<double> tau_list{0.01, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4, 1.6, 1.8, 2.0, 10.0, 100.0};
  std::vector<double> alpha_list{0.0, 1e-4, 1e-3, 1e-2, 1e-1, 1.0};
  bool log_steps = true;

  bool has_blocks() const { return !(taps.size() == 1 && taps[0] == "none"); }

  /// Resolves the tap list and final-feature flag into the model spec.
  ModelSpec resolved_model(std::size_t num_classes) const {
    ModelSpec spec = model;
    spec.num_classes = num_classes;
    if (!has_blocks())
      spec.backbone.tap_spec = std::vector<std::string>{};
    else if (taps.size() == 1 && taps[0] == "all")
      spec.backbone.tap_spec.reset();
    else
      spec.backbone.tap_spec = taps;
    spec.include_final_features = final_features == "auto" ? !has_blocks() : final_features == "true";
    return spec;
  }

  void validate() const {
    if (optimizer.epochs < 1) throw ConfigError("config: optimizer.epochs must be >= 1");
    if (!(optimizer.lr > 0)) throw ConfigError("config: optimizer.lr must be positive");
    if (!(optimizer.momentum >= 0 && optimizer.momentum < 1)) throw ConfigError("config: optimizer.momentum must lie in [0,1)");
    if (optimizer.batch_size < 2) throw ConfigError("config: optimizer.batch_size must be >= 2");
    if (precision != "float" && precision != "double") throw ConfigError("config: precision must be float or double");
    if (final_features != "auto" && final_features != "true" && final_features != "false")
      throw ConfigError("config: model.final_features must be auto, true or false");
    if (repeats < 1) throw ConfigError("config: lodo.repeats must be >= 1");
    if (split.held_out.empty()) throw ConfigError("config: split.held_out is empty");
    for (double t : tau_list)
      if (!(t > 0)) throw ConfigError("config: sweep.tau values must be positive");
    for (double a : alpha_list)
      if (!(a >= 0)) throw ConfigError("config: sweep.alpha values must be non-negative");
    if (tau_list.empty() || alpha_list.empty()) throw ConfigError("config: sweep lists must be nonempty");
    loss.validate();
    model.block.validate();
    for (const auto& [tap, b] : model.block_overrides) b.validate();
    if (data.source == DataSource::Synthetic) {
      if (data.synthetic.image_size != model.backbone.input_size)
        throw ConfigError("config: data.image_size must equal backbone.input_size");
      data.synthetic.validate();
    }
    if (data.source == DataSource::Directory && data.path.empty()) throw ConfigError("config: data.path is required");
  }
};

namespace detail {

inline void read_block(KeyValueDocument& doc, const std::string& sec, ExtractionBlockConfig& b) {
  cfg::read(doc, sec + ".mode", [&](const std::string& v) {
    if (v == "parallel")
      b.mode = PipelineMode::Parallel;
    else if (v == "cascading")
      b.mode = PipelineMode::Cascading;
    else
      throw ConfigError("config: " + sec + ".mode must be parallel or cascading");
  });
  cfg::read(doc, sec + ".r", [&](const std::string& v) { b.r = cfg::to_uint(sec + ".r", v); });
  cfg::read(doc, sec + ".targets", [&](const std::string& v) {
    if (v == "auto") {
      b.targets.reset();
      return;
    }
    std::vector<std::size_t> t;
    for (const auto& e : cfg::split_list(v)) t.push_back(cfg::to_uint(sec + ".targets", e));
    b.targets = t;
  });
  cfg::read(doc, sec + ".dropout", [&](const std::string& v) { b.dropout_rate = cfg::to_double(sec + ".dropout", v); });
  cfg::read(doc, sec + ".mlp_hidden", [&](const std::string& v) { b.mlp_hidden = cfg::to_uint(sec + ".mlp_hidden", v); });
  cfg::read(doc, sec + ".embed_dim", [&](const std::string& v) { b.embed_dim = cfg::to_uint(sec + ".embed_dim", v); });
}

inline void write_block(std::map<std::string, std::string>& out, const std::string& sec, const ExtractionBlockConfig& b) {
  out[sec + ".mode"] = to_string(b.mode);
  out[sec + ".r"] = std::to_string(b.r);
  std::string t = "auto";
  if (b.targets) {
    t.clear();
    for (std::size_t i = 0; i < b.targets->size(); ++i) t += (i ? ", " : "") + std::to_string((*b.targets)[i]);
  }
  out[sec + ".targets"] = t;
  out[sec + ".dropout"] = cfg::fmt_double(b.dropout_rate);
  out[sec + ".mlp_hidden"] = std::to_string(b.mlp_hidden);
  out[sec + ".embed_dim"] = std::to_string(b.embed_dim);
}

inline std::string join(const std::vector<std::string>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + v[i];
  return s;
}

inline std::string join(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + cfg::fmt_double(v[i]);
  return s;
}

}  // namespace detail

/// Applies every recognised key of `doc` on top of `base`; unknown keys throw.
inline ExperimentConfig apply_document(KeyValueDocument doc, ExperimentConfig c = {}) {
  using cfg::read;
  using cfg::to_double;
  using cfg::to_uint;
  read(doc, "seed", [&](const std::string& v) { c.seed = to_uint("seed", v); });
  read(doc, "output_dir", [&](const std::string& v) { c.output_dir = v; });
  read(doc, "precision", [&](const std::string& v) { c.precision = v; });
  read(doc, "log_steps", [&](const std::string& v) { c.log_steps = cfg::to_bool("log_steps", v); });

  auto& bb = c.model.backbone;
  read(doc, "backbone.input_size", [&](const std::string& v) { bb.input_size = to_uint("backbone.input_size", v); });
  read(doc, "backbone.stem_channels", [&](const std::string& v) { bb.stem_channels = to_uint("backbone.stem_channels", v); });
  read(doc, "backbone.stem_stride", [&](const std::string& v) { bb.stem_stride = to_uint("backbone.stem_stride", v); });
  read(doc, "backbone.stages", [&](const std::string& v) {
    bb.stages.clear();
    for (const auto& e : cfg::split_list(v)) {
      const auto x = e.find('x');
      if (x == std::string::npos) throw ConfigError("config: backbone.stages entries look like <blocks>x<channels>");
      bb.stages.push_back({to_uint("backbone.stages", e.substr(0, x)), to_uint("backbone.stages", e.substr(x + 1))});
    }
    if (bb.stages.empty()) throw ConfigError("config: backbone.stages is empty");
  });

  read(doc, "model.taps", [&](const std::string& v) {
    c.taps = cfg::split_list(v);
    if (c.taps.empty()) throw ConfigError("config: model.taps is empty");
  });
  read(doc, "model.final_features", [&](const std::string& v) { c.final_features = v; });

  detail::read_block(doc, "blocks", c.model.block);
  c.model.block_overrides.clear();
  for (const auto& tap : doc.sections_with_prefix("blocks.")) {
    ExtractionBlockConfig b = c.model.block;
    detail::read_block(doc, "blocks." + tap, b);
    c.model.block_overrides[tap] = b;
  }

  read(doc, "loss.alpha", [&](const std::string& v) { c.loss.alpha = to_double("loss.alpha", v); });
  read(doc, "loss.tau", [&](const std::string& v) { c.loss.tau = to_double("loss.tau", v); });
  read(doc, "loss.min_class_count", [&](const std::string& v) { c.loss.min_class_count = to_uint("loss.min_class_count", v); });

  auto& o = c.optimizer;
  read(doc, "optimizer.lr", [&](const std::string& v) { o.lr = to_double("optimizer.lr", v); });
  read(doc, "optimizer.momentum", [&](const std::string& v) { o.momentum = to_double("optimizer.momentum", v); });
  read(doc, "optimizer.epochs", [&](const std::string& v) { o.epochs = to_uint("optimizer.epochs", v); });
  read(doc, "optimizer.batch_size", [&](const std::string& v) { o.batch_size = to_uint("optimizer.batch_size", v); });
  read(doc, "optimizer.balanced", [&](const std::string& v) { o.balanced = cfg::to_bool("optimizer.balanced", v); });

  auto& d = c.data;
  auto& sy = d.synthetic;
  read(doc, "data.source", [&](const std::string& v) {
    if (v == "synthetic")
      d.source = DataSource::Synthetic;
    else if (v == "directory")
      d.source = DataSource::Directory;
    else
      throw ConfigError("config: data.source must be synthetic or directory");
  });
  read(doc, "data.path", [&](const std::string& v) { d.path = v; });
  read(doc, "data.num_classes", [&](const std::string& v) { sy.num_classes = to_uint("data.num_classes", v); });
  read(doc, "data.num_domains", [&](const std::string& v) { sy.num_domains = to_uint("data.num_domains", v); });
  read(doc, "data.spurious_rho", [&](const std::string& v) { sy.spurious_rho = to_double("data.spurious_rho", v); });
  read(doc, "data.image_size", [&](const std::string& v) { sy.image_size = to_uint("data.image_size", v); });
  read(doc, "data.samples_per_domain_class",
       [&](const std::string& v) { sy.samples_per_domain_class = to_uint("data.samples_per_domain_class", v); });
  read(doc, "data.jitter_pos", [&](const std::string& v) { sy.jitter_pos = to_double("data.jitter_pos", v); });
  read(doc, "data.jitter_scale", [&](const std::string& v) { sy.jitter_scale = to_double("data.jitter_scale", v); });
  read(doc, "data.jitter_rot", [&](const std::string& v) { sy.jitter_rot = to_double("data.jitter_rot", v); });
  read(doc, "data.shape_radius", [&](const std::string& v) { sy.shape_radius = to_double("data.shape_radius", v); });
  read(doc, "data.seed", [&](const std::string& v) { sy.seed = to_uint("data.seed", v); });

  read(doc, "split.held_out", [&](const std::string& v) { c.split.held_out = cfg::split_list(v); });
  read(doc, "split.val_fraction", [&](const std::string& v) { c.split.val_fraction = to_double("split.val_fraction", v); });

  read(doc, "lodo.repeats", [&](const std::string& v) { c.repeats = to_uint("lodo.repeats", v); });
  auto doubles = [](const std::string& key, const std::string& v) {
    std::vector<double> out;
    for (const auto& e : cfg::split_list(v)) out.push_back(to_double(key, e));
    return out;
  };
  read(doc, "sweep.tau", [&](const std::string& v) { c.tau_list = doubles("sweep.tau", v); });
  read(doc, "sweep.alpha", [&](const std::string& v) { c.alpha_list = doubles("sweep.alpha", v); });

  doc.reject_unused();
  return c;
}

inline ExperimentConfig parse_config(const std::string& text) { return apply_document(KeyValueDocument::parse(text)); }

inline ExperimentConfig load_config(const std::filesystem::path& path) { return apply_document(KeyValueDocument::load(path)); }

/// Canonical flat form: every field, fully qualified keys, sorted.
inline std::map<std::string, std::string> canonical_entries(const ExperimentConfig& c) {
  std::map<std::string, std::string> m;
  m["seed"] = std::to_string(c.seed);
  m["output_dir"] = c.output_dir;
  m["precision"] = c.precision;
  m["log_steps"] = c.log_steps ? "true" : "false";
  const auto& bb = c.model.backbone;
  m["backbone.input_size"] = std::to_string(bb.input_size);
  m["backbone.stem_channels"] = std::to_string(bb.stem_channels);
  m["backbone.stem_stride"] = std::to_string(bb.stem_stride);
  std::vector<std::string> st;
  for (const auto& s : bb.stages) st.push_back(std::to_string(s.blocks) + "x" + std::to_string(s.channels));
  m["backbone.stages"] = detail::join(st);
  m["model.taps"] = detail::join(c.taps);
  m["model.final_features"] = c.final_features;
  detail::write_block(m, "blocks", c.model.block);
  for (const auto& [tap, b] : c.model.block_overrides) detail::write_block(m, "blocks." + tap, b);
  m["loss.alpha"] = cfg::fmt_double(c.loss.alpha);
  m["loss.tau"] = cfg::fmt_double(c.loss.tau);
  m["loss.min_class_count"] = std::to_string(c.loss.min_class_count);
  m["optimizer.lr"] = cfg::fmt_double(c.optimizer.lr);
  m["optimizer.momentum"] = cfg::fmt_double(c.optimizer.momentum);
  m["optimizer.epochs"] = std::to_string(c.optimizer.epochs);
  m["optimizer.batch_size"] = std::to_string(c.optimizer.batch_size);
  m["optimizer.balanced"] = c.optimizer.balanced ? "true" : "false";
  const auto& sy = c.data.synthetic;
  m["data.source"] = c.data.source == DataSource::Synthetic ? "synthetic" : "directory";
  m["data.path"] = c.data.path;
  m["data.num_classes"] = std::to_string(sy.num_classes);
  m["data.num_domains"] = std::to_string(sy.num_domains);
  m["data.spurious_rho"] = cfg::fmt_double(sy.spurious_rho);
  m["data.image_size"] = std::to_string(sy.image_size);
  m["data.samples_per_domain_class"] = std::to_string(sy.samples_per_domain_class);
  m["data.jitter_pos"] = cfg::fmt_double(sy.jitter_pos);
  m["data.jitter_scale"] = cfg::fmt_double(sy.jitter_scale);
  m["data.jitter_rot"] = cfg::fmt_double(sy.jitter_rot);
  m["data.shape_radius"] = cfg::fmt_double(sy.shape_radius);
  m["data.seed"] = std::to_string(sy.seed);
  m["split.held_out"] = detail::join(c.split.held_out);
  m["split.val_fraction"] = cfg::fmt_double(c.split.val_fraction);
  m["lodo.repeats"] = std::to_string(c.repeats);
  m["sweep.tau"] = detail::join(c.tau_list);
  m["sweep.alpha"] = detail::join(c.alpha_list);
  return m;
}

/// Sectioned text that parses back to the same configuration.
inline std::string to_text(const ExperimentConfig& c) {
  std::map<std::string, std::vector<std::pair<std::string, std::string>>> sections;
  for (const auto& [k, v] : canonical_entries(c)) {
    const auto dot = k.rfind('.');
    if (dot == std::string::npos)
      sections[""].emplace_back(k, v);
    else
      sections[k.substr(0, dot)].emplace_back(k.substr(dot + 1), v);
  }
  std::string out;
  for (const auto& [sec, kvs] : sections) {
    if (!sec.empty()) out += "\n[" + sec + "]\n";
    for (const auto& [k, v] : kvs) out += k + " = " + v + "\n";
  }
  return out;
}

/// FNV-1a over the canonical entries. Independent of key order in the source file.
/// `seed` and `output_dir` are excluded so repeats of one configuration share a hash.
inline std::string config_hash(const ExperimentConfig& c) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [k, v] : canonical_entries(c)) {
    if (k == "seed" || k == "output_dir") continue;
    for (char ch : k + "=" + v + "\n") {
      h ^= static_cast<unsigned char>(ch);
      h *= 0x100000001b3ULL;
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace m2cl
