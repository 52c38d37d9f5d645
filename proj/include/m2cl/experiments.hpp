#pragma once

// Experiment drivers: single run, leave-one-domain-out, ablation grid and
// hyperparameter sweeps. Each writes results.tsv and per-run artifacts.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "m2cl/trainer.hpp"

namespace m2cl {

struct RunOptions {
  /// Directory for run.jsonl and checkpoint.m2cl; empty writes nothing.
  std::filesystem::path artifacts;
  bool verbose = false;
  TrainHooks hooks;
};

namespace detail {

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::filesystem::create_directories(p.parent_path().empty() ? "." : p.parent_path());
  std::ofstream out(p);
  if (!out) throw DataError("cannot write " + p.string());
  return out;
}

inline std::string pct(double acc) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(2) << 100.0 * acc;
  return s.str();
}

template <typename T>
RunRecord run_typed(const ExperimentConfig& c, const PreparedData& data, const RunOptions& opt) {
  const auto split = plan_splits(data.dataset, data.held_out, c.split.val_fraction, c.seed);
  std::unique_ptr<std::ofstream> log;
  if (!opt.artifacts.empty()) log = std::make_unique<std::ofstream>(open_out(opt.artifacts / "run.jsonl"));
  TrainHooks hooks = opt.hooks;
  auto user_step = hooks.on_step;
  hooks.on_step = [&](const StepLog& s) {
    if (log) *log << to_json(s).dump() << '\n';
    if (user_step) user_step(s);
  };
  auto user_epoch = hooks.on_epoch;
  hooks.on_epoch = [&](const EpochLog& e) {
    if (log) *log << to_json(e).dump() << '\n';
    if (opt.verbose)
      std::clog << "epoch " << e.epoch << "  ce " << e.cross_entropy << "  contrastive " << e.contrastive_sum
                << "  total " << e.total << "  val " << e.val_accuracy << '\n';
    if (user_epoch) user_epoch(e);
  };
  auto result = train<T>(c, data.dataset, split, hooks);
  if (log) *log << to_json(result.record).dump() << '\n';
  if (!opt.artifacts.empty())
    save_checkpoint(Checkpoint::from_model(*result.model, checkpoint_meta(c, data.dataset, result.record)),
                    opt.artifacts / "checkpoint.m2cl");
  return result.record;
}

}  // namespace detail

/// One train + evaluate on the configured split.
inline RunRecord run_experiment(const ExperimentConfig& c, const PreparedData& data, const RunOptions& opt = {}) {
  return c.precision == "double" ? detail::run_typed<double>(c, data, opt) : detail::run_typed<float>(c, data, opt);
}

inline RunRecord run_experiment(const ExperimentConfig& c, const RunOptions& opt = {}) {
  return run_experiment(c, prepare_data(c), opt);
}

struct LodoResult {
  std::vector<std::string> domains;
  /// accuracy[repeat][domain]
  std::vector<std::vector<double>> accuracy;
  std::vector<double> domain_mean() const {
    std::vector<double> m(domains.size(), 0.0);
    for (const auto& row : accuracy)
      for (std::size_t d = 0; d < row.size(); ++d) m[d] += row[d] / static_cast<double>(accuracy.size());
    return m;
  }
  double mean() const {
    const auto m = domain_mean();
    double s = 0;
    for (double v : m) s += v;
    return m.empty() ? 0.0 : s / static_cast<double>(m.size());
  }
};

inline std::vector<std::string> domain_names_of(const ExperimentConfig& c) {
  if (c.data.source == DataSource::Synthetic) {
    std::vector<std::string> names;
    for (std::size_t d = 0; d < c.data.synthetic.num_domains; ++d) names.push_back(synthetic_domain_name(d));
    return names;
  }
  std::vector<std::string> names;
  for (const auto& e : std::filesystem::directory_iterator(c.data.path))
    if (e.is_directory()) names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  return names;
}

/// Every domain held out in turn, `repeats` seeds each (seed, seed+1, ...).
inline LodoResult lodo(const ExperimentConfig& base, std::size_t repeats, const std::filesystem::path& out_dir = {},
                       bool verbose = false) {
  if (repeats < 1) throw ConfigError("lodo: repeats must be >= 1");
  LodoResult r;
  r.domains = domain_names_of(base);
  if (r.domains.size() < 2) throw ConfigError("lodo: need at least two domains");
  r.accuracy.assign(repeats, std::vector<double>(r.domains.size(), 0.0));
  std::optional<DomainDataset> directory_data;
  for (std::size_t d = 0; d < r.domains.size(); ++d) {
    ExperimentConfig c = base;
    c.split.held_out = {r.domains[d]};
    PreparedData data;
    if (c.data.source == DataSource::Directory) {
      if (!directory_data) directory_data = load_directory(c.data.path, c.model.backbone.input_size);
      data.dataset = *directory_data;
      data.held_out = resolve_domains(c.split.held_out, data.dataset.domain_names);
    } else {
      data = prepare_data(c);
    }
    for (std::size_t k = 0; k < repeats; ++k) {
      c.seed = base.seed + k;
      RunOptions opt;
      opt.verbose = verbose;
      if (!out_dir.empty()) opt.artifacts = out_dir / r.domains[d] / ("seed" + std::to_string(c.seed));
      r.accuracy[k][d] = run_experiment(c, data, opt).test.accuracy;
      if (verbose) std::clog << "lodo " << r.domains[d] << " seed " << c.seed << ": " << r.accuracy[k][d] << '\n';
    }
  }
  if (!out_dir.empty()) {
    auto out = detail::open_out(out_dir / "results.tsv");
    out << "run";
    for (const auto& d : r.domains) out << '\t' << d;
    out << "\tmean\n";
    for (std::size_t k = 0; k < repeats; ++k) {
      out << "seed" << base.seed + k;
      double s = 0;
      for (double a : r.accuracy[k]) {
        out << '\t' << detail::pct(a);
        s += a;
      }
      out << '\t' << detail::pct(s / static_cast<double>(r.domains.size())) << '\n';
    }
    out << "mean";
    for (double a : r.domain_mean()) out << '\t' << detail::pct(a);
    out << '\t' << detail::pct(r.mean()) << '\n';
  }
  return r;
}

struct AblationCell {
  PipelineMode mode;
  std::size_t r;
  bool dropout;
  bool loss;
};

/// The thirteen rows of the component ablation, in table order.
inline std::vector<AblationCell> ablation_grid() {
  std::vector<AblationCell> g;
  for (bool drop : {false, true})
    for (std::size_t r : {2, 4, 6}) g.push_back({PipelineMode::Cascading, r, drop, false});
  for (std::size_t r : {2, 4, 6}) g.push_back({PipelineMode::Parallel, r, false, false});
  g.push_back({PipelineMode::Parallel, 2, true, false});
  g.push_back({PipelineMode::Parallel, 6, true, false});
  g.push_back({PipelineMode::Parallel, 4, true, false});
  g.push_back({PipelineMode::Parallel, 4, true, true});
  return g;
}

/// Applies one ablation cell to a base config. Dropout "on" keeps the base
/// rate (0.5 if the base disables it); "loss" keeps the base alpha (0.01 if zero).
inline ExperimentConfig apply_cell(const ExperimentConfig& base, const AblationCell& cell) {
  ExperimentConfig c = base;
  auto set = [&](ExtractionBlockConfig& b) {
    b.mode = cell.mode;
    b.r = cell.r;
    b.dropout_rate = cell.dropout ? (base.model.block.dropout_rate > 0 ? base.model.block.dropout_rate : 0.5) : 0.0;
  };
  set(c.model.block);
  for (auto& [tap, b] : c.model.block_overrides) set(b);
  c.loss.alpha = cell.loss ? (base.loss.alpha > 0 ? base.loss.alpha : 0.01) : 0.0;
  return c;
}

struct AblationRow {
  AblationCell cell;
  RunRecord record;
};

inline std::vector<AblationRow> ablate(const ExperimentConfig& base, const std::filesystem::path& out_dir = {},
                                       bool verbose = false) {
  const auto data = prepare_data(base);
  std::vector<AblationRow> rows;
  std::size_t i = 0;
  for (const auto& cell : ablation_grid()) {
    const auto c = apply_cell(base, cell);
    RunOptions opt;
    opt.verbose = verbose;
    if (!out_dir.empty()) opt.artifacts = out_dir / ("row" + std::to_string(i++));
    rows.push_back({cell, run_experiment(c, data, opt)});
    if (verbose) std::clog << "ablate row " << rows.size() << ": " << rows.back().record.test.accuracy << '\n';
  }
  if (!out_dir.empty()) {
    auto out = detail::open_out(out_dir / "results.tsv");
    out << "pipe\tr\tdrop\tloss";
    for (const auto& d : rows.front().record.test_domains) out << '\t' << d;
    out << "\tavg\n";
    for (const auto& row : rows) {
      out << (row.cell.mode == PipelineMode::Parallel ? "p" : "c") << '\t' << row.cell.r << '\t'
          << (row.cell.dropout ? "yes" : "-") << '\t' << (row.cell.loss ? "yes" : "-");
      for (const auto& [d, a] : row.record.test.per_domain) out << '\t' << detail::pct(a);
      out << '\t' << detail::pct(row.record.test.accuracy) << '\n';
    }
  }
  return rows;
}

struct SweepPoint {
  std::string axis;  // "tau" or "alpha"
  double value;
  RunRecord record;
};

/// Two one-dimensional sweeps sharing the base seed: tau with alpha fixed,
/// then alpha with tau fixed.
inline std::vector<SweepPoint> sensitivity(const ExperimentConfig& base, const std::vector<double>& taus,
                                           const std::vector<double>& alphas,
                                           const std::filesystem::path& out_dir = {}, bool verbose = false) {
  if (taus.empty() && alphas.empty()) throw ConfigError("sweep: both lists are empty");
  for (double t : taus)
    if (!(t > 0)) throw ConfigError("sweep: tau values must be positive");
  for (double a : alphas)
    if (!(a >= 0)) throw ConfigError("sweep: alpha values must be non-negative");
  const auto data = prepare_data(base);
  std::vector<SweepPoint> pts;
  auto run = [&](const std::string& axis, double v, ExperimentConfig c) {
    RunOptions opt;
    opt.verbose = verbose;
    if (!out_dir.empty()) opt.artifacts = out_dir / (axis + "_" + cfg::fmt_double(v));
    pts.push_back({axis, v, run_experiment(c, data, opt)});
    if (verbose) std::clog << "sweep " << axis << "=" << v << ": " << pts.back().record.test.accuracy << '\n';
  };
  for (double t : taus) {
    auto c = base;
    c.loss.tau = t;
    run("tau", t, c);
  }
  for (double a : alphas) {
    auto c = base;
    c.loss.alpha = a;
    run("alpha", a, c);
  }
  if (!out_dir.empty()) {
    auto out = detail::open_out(out_dir / "results.tsv");
    out << "axis\tvalue\ttau\talpha\tseed\taccuracy\n";
    for (const auto& p : pts)
      out << p.axis << '\t' << cfg::fmt_double(p.value) << '\t'
          << cfg::fmt_double(p.axis == "tau" ? p.value : base.loss.tau) << '\t'
          << cfg::fmt_double(p.axis == "alpha" ? p.value : base.loss.alpha) << '\t' << p.record.seed << '\t'
          << detail::pct(p.record.test.accuracy) << '\n';
  }
  return pts;
}

}  // namespace m2cl
