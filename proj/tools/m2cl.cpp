// m2cl command-line driver.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "m2cl/experiments.hpp"
#include "m2cl/saliency.hpp"

namespace fs = std::filesystem;
using namespace m2cl;

namespace {

enum ExitCode { kOk = 0, kConfigError = 1, kDataError = 2, kNumericError = 3 };

struct GlobalOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> overrides;
  bool quiet = false;
};

ExperimentConfig load(const GlobalOptions& g) {
  KeyValueDocument doc = g.config.empty() ? KeyValueDocument::parse("") : KeyValueDocument::load(g.config);
  for (const auto& kv : g.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    doc.set(KeyValueDocument::trim(kv.substr(0, eq)), KeyValueDocument::trim(kv.substr(eq + 1)));
  }
  auto c = apply_document(doc);
  if (g.seed) c.seed = *g.seed;
  if (!g.out.empty()) c.output_dir = g.out;
  c.validate();
  return c;
}

void print_eval(const EvalResult& r, const std::vector<std::string>& classes) {
  std::printf("accuracy %.4f (%zu/%zu)\n", r.accuracy, r.correct, r.total);
  for (const auto& [d, a] : r.per_domain) std::printf("  %-12s %.4f\n", d.c_str(), a);
  std::printf("confusion (rows: true, cols: predicted)\n");
  for (std::size_t i = 0; i < r.confusion.size(); ++i) {
    std::printf("  %-10s", i < classes.size() ? classes[i].c_str() : "?");
    for (auto n : r.confusion[i]) std::printf(" %6zu", n);
    std::printf("\n");
  }
}

void write_eval_tsv(const fs::path& path, const EvalResult& r) {
  auto out = detail::open_out(path);
  out << "domain\taccuracy\n";
  for (const auto& [d, a] : r.per_domain) out << d << '\t' << detail::pct(a) << '\n';
  out << "all\t" << detail::pct(r.accuracy) << '\n';
}

int cmd_gen_data(const GlobalOptions& g) {
  auto c = load(g);
  if (c.data.source != DataSource::Synthetic) throw ConfigError("gen-data: data.source must be synthetic");
  const auto data = prepare_data(c);
  write_directory(data.dataset, c.output_dir);
  std::printf("wrote %zu images to %s\n", data.dataset.samples.size(), c.output_dir.c_str());
  return kOk;
}

int cmd_train(const GlobalOptions& g) {
  auto c = load(g);
  const auto data = prepare_data(c);
  RunOptions opt;
  opt.artifacts = c.output_dir;
  opt.verbose = !g.quiet;
  const auto rec = run_experiment(c, data, opt);
  write_eval_tsv(fs::path(c.output_dir) / "results.tsv", rec.test);
  print_eval(rec.test, data.dataset.class_names);
  std::printf("best epoch %zu, wall %.1fs, config %s\n", rec.best_epoch, rec.wall_seconds, rec.config_hash.c_str());
  return kOk;
}

template <typename T>
int eval_typed(const ExperimentConfig& c, const Checkpoint& ck, const fs::path& out_dir) {
  const auto data = prepare_data(c);
  if (std::stoul(ck.meta_at("num_classes")) != data.dataset.num_classes())
    throw DataError("eval: checkpoint has " + ck.meta_at("num_classes") + " classes, data has " +
                    std::to_string(data.dataset.num_classes()));
  M2Model<T> model(c.resolved_model(data.dataset.num_classes()), c.seed);
  ck.load_into(model);
  const auto split = plan_splits(data.dataset, data.held_out, c.split.val_fraction, c.seed);
  const auto r = evaluate(model, data.dataset, split.test);
  print_eval(r, data.dataset.class_names);
  write_eval_tsv(out_dir / "results.tsv", r);
  return kOk;
}

/// Rebuilds the run configuration from the checkpoint; --config/--set only
/// replace the data and split sections.
ExperimentConfig config_from_checkpoint(const Checkpoint& ck, const GlobalOptions& g) {
  auto c = parse_config(ck.meta_at("config"));
  if (!g.config.empty() || !g.overrides.empty()) {
    const auto user = load(g);
    c.data = user.data;
    c.split = user.split;
  }
  if (!g.out.empty()) c.output_dir = g.out;
  c.validate();
  return c;
}

int cmd_eval(const GlobalOptions& g, const std::string& checkpoint) {
  const auto ck = load_checkpoint(checkpoint);
  const auto c = config_from_checkpoint(ck, g);
  const fs::path out = g.out.empty() ? fs::path(checkpoint).parent_path() : fs::path(g.out);
  return c.precision == "double" ? eval_typed<double>(c, ck, out) : eval_typed<float>(c, ck, out);
}

int cmd_lodo(const GlobalOptions& g, std::optional<std::size_t> repeats) {
  const auto c = load(g);
  const auto r = lodo(c, repeats.value_or(c.repeats), c.output_dir, !g.quiet);
  for (std::size_t d = 0; d < r.domains.size(); ++d) std::printf("%-12s %.2f\n", r.domains[d].c_str(), 100 * r.domain_mean()[d]);
  std::printf("%-12s %.2f\n", "mean", 100 * r.mean());
  return kOk;
}

int cmd_ablate(const GlobalOptions& g) {
  const auto c = load(g);
  const auto rows = ablate(c, c.output_dir, !g.quiet);
  for (const auto& row : rows)
    std::printf("%s r=%zu drop=%s loss=%s  %.2f\n", row.cell.mode == PipelineMode::Parallel ? "p" : "c", row.cell.r,
                row.cell.dropout ? "yes" : "-", row.cell.loss ? "yes" : "-", 100 * row.record.test.accuracy);
  return kOk;
}

int cmd_sweep(const GlobalOptions& g, const std::string& axis) {
  const auto c = load(g);
  const std::vector<double> none;
  const auto pts = sensitivity(c, axis == "alpha" ? none : c.tau_list, axis == "tau" ? none : c.alpha_list,
                               c.output_dir, !g.quiet);
  for (const auto& p : pts) std::printf("%-5s %-8g %.2f\n", p.axis.c_str(), p.value, 100 * p.record.test.accuracy);
  return kOk;
}

int cmd_saliency(const GlobalOptions& g, const std::string& checkpoint, std::size_t count) {
  const auto ck = load_checkpoint(checkpoint);
  const auto c = config_from_checkpoint(ck, g);
  const auto data = prepare_data(c);
  M2Model<float> model(c.resolved_model(data.dataset.num_classes()), c.seed);
  ck.load_into(model);
  const auto split = plan_splits(data.dataset, data.held_out, c.split.val_fraction, c.seed);
  const fs::path out = g.out.empty() ? fs::path(checkpoint).parent_path() : fs::path(g.out);
  fs::create_directories(out / "saliency");
  auto tsv = detail::open_out(out / "saliency" / "results.tsv");
  tsv << "index\tsource\tclass\tmask_mass\n";
  double mass_sum = 0;
  std::size_t with_mask = 0;
  const std::size_t n = std::min(count, split.test.size());
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t i = split.test[k * split.test.size() / n];
    const auto& s = data.dataset.samples[i];
    const auto map = saliency(model, s.pixels, s.class_label, s.source);
    char name[64];
    std::snprintf(name, sizeof name, "%05zu_%s.pgm", i, data.dataset.class_names[s.class_label].c_str());
    emit_pgm(map, out / "saliency" / name);
    tsv << i << '\t' << s.source << '\t' << data.dataset.class_names[s.class_label] << '\t';
    if (!s.mask.empty()) {
      const double m = mask_mass(map, s.mask);
      mass_sum += m;
      ++with_mask;
      tsv << m << '\n';
    } else {
      tsv << "NA\n";
    }
  }
  std::printf("wrote %zu saliency maps to %s\n", n, (out / "saliency").c_str());
  if (with_mask) std::printf("mean in-mask saliency mass %.4f\n", mass_sum / static_cast<double>(with_mask));
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"m2cl: multi-scale multi-layer contrastive learning for domain generalization"};
  app.require_subcommand(1);
  GlobalOptions g;
  app.add_option("--config", g.config, "Experiment config file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Override the run seed");
  app.add_option("--out", g.out, "Output directory");
  app.add_option("--set", g.overrides, "Override one config key, e.g. --set loss.alpha=0.1")->take_all();
  app.add_flag("-q,--quiet", g.quiet, "Suppress per-epoch progress");

  auto* gen = app.add_subcommand("gen-data", "Write the synthetic dataset as <out>/<domain>/<class>/*.ppm + manifest.tsv");
  auto* train = app.add_subcommand("train", "Train one model and evaluate it on the held-out domains");
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on its held-out domains");
  std::string checkpoint;
  eval->add_option("checkpoint", checkpoint, "checkpoint.m2cl")->required()->check(CLI::ExistingFile);
  auto* lodo_cmd = app.add_subcommand("lodo", "Leave-one-domain-out over every domain");
  std::optional<std::size_t> repeats;
  lodo_cmd->add_option("--repeats", repeats, "Seeds per held-out domain (default lodo.repeats)");
  auto* abl = app.add_subcommand("ablate", "Run the 13-row component ablation grid");
  auto* sweep = app.add_subcommand("sweep", "Sensitivity sweeps over tau and alpha");
  std::string axis = "both";
  sweep->add_option("--axis", axis, "tau, alpha or both")->check(CLI::IsMember({"tau", "alpha", "both"}));
  auto* sal = app.add_subcommand("saliency", "Write vanilla-gradient saliency maps for held-out images");
  std::string sal_checkpoint;
  std::size_t count = 20;
  sal->add_option("checkpoint", sal_checkpoint, "checkpoint.m2cl")->required()->check(CLI::ExistingFile);
  sal->add_option("--count", count, "Number of held-out images");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*gen) return cmd_gen_data(g);
    if (*train) return cmd_train(g);
    if (*eval) return cmd_eval(g, checkpoint);
    if (*lodo_cmd) return cmd_lodo(g, repeats);
    if (*abl) return cmd_ablate(g);
    if (*sweep) return cmd_sweep(g, axis);
    if (*sal) return cmd_saliency(g, sal_checkpoint, count);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const ShapeError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const DomainLeakError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumericError;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kDataError;
  }
  return kOk;
}
