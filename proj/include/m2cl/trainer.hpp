#pragma once

// Training loop, evaluation and dataset preparation for one experiment run.

#include <chrono>
#include <cmath>
#include <functional>
#include <memory>
#include <ostream>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "m2cl/checkpoint.hpp"
#include "m2cl/config.hpp"
#include "m2cl/data.hpp"
#include "m2cl/loss.hpp"
#include "m2cl/model.hpp"
#include "m2cl/optim.hpp"

namespace m2cl {

struct StepLog {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double cross_entropy = 0;
  std::vector<double> levels;
  double contrastive_sum = 0;
  double alpha = 0;
  double total = 0;
};

struct EpochLog {
  std::size_t epoch = 0;
  double cross_entropy = 0;
  double contrastive_sum = 0;
  double total = 0;
  double val_accuracy = std::nan("");
};

struct EvalResult {
  double accuracy = 0;
  std::size_t correct = 0;
  std::size_t total = 0;
  std::map<std::string, double> per_domain;
  /// confusion[true][predicted]
  std::vector<std::vector<std::size_t>> confusion;
};

struct RunRecord {
  std::vector<StepLog> steps;
  std::vector<EpochLog> epochs;
  std::size_t best_epoch = 0;
  double best_val_accuracy = std::nan("");
  EvalResult test;
  std::vector<std::string> test_domains;
  double wall_seconds = 0;
  std::string config_hash;
  std::uint64_t seed = 0;
};

/// A dataset plus the resolved held-out domain set.
struct PreparedData {
  DomainDataset dataset;
  std::set<int> held_out;
};

inline std::set<int> resolve_domains(const std::vector<std::string>& names, const std::vector<std::string>& domains) {
  std::set<int> out;
  for (const auto& n : names) {
    if (n == "last") {
      out.insert(static_cast<int>(domains.size()) - 1);
      continue;
    }
    auto it = std::find(domains.begin(), domains.end(), n);
    if (it != domains.end()) {
      out.insert(static_cast<int>(it - domains.begin()));
      continue;
    }
    if (!n.empty() && std::all_of(n.begin(), n.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
      const auto d = std::stoul(n);
      if (d < domains.size()) {
        out.insert(static_cast<int>(d));
        continue;
      }
    }
    std::string known;
    for (const auto& d : domains) known += (known.empty() ? "" : ", ") + d;
    throw ConfigError("split: unknown held-out domain '" + n + "' (domains: " + known + ")");
  }
  return out;
}

/// Builds the dataset described by the config. Synthetic held-out domains are
/// generated cue-free: their background carries no class information.
inline PreparedData prepare_data(const ExperimentConfig& c) {
  PreparedData out;
  if (c.data.source == DataSource::Synthetic) {
    SyntheticSpec spec = c.data.synthetic;
    std::vector<std::string> names;
    for (std::size_t d = 0; d < spec.num_domains; ++d) names.push_back(synthetic_domain_name(d));
    out.held_out = resolve_domains(c.split.held_out, names);
    spec.cue_free_domains.assign(out.held_out.begin(), out.held_out.end());
    out.dataset = generate(spec);
  } else {
    out.dataset = load_directory(c.data.path, c.model.backbone.input_size);
    out.held_out = resolve_domains(c.split.held_out, out.dataset.domain_names);
  }
  return out;
}

/// Accuracy, per-domain accuracy and confusion matrix from predicted labels.
inline EvalResult score_predictions(const DomainDataset& ds, const std::vector<std::size_t>& indices,
                                    const std::vector<int>& predicted) {
  if (indices.size() != predicted.size()) throw ShapeError("evaluate: prediction count mismatch");
  EvalResult r;
  const std::size_t K = ds.num_classes();
  r.confusion.assign(K, std::vector<std::size_t>(K, 0));
  std::map<int, std::pair<std::size_t, std::size_t>> dom;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& s = ds.samples[indices[i]];
    const bool hit = predicted[i] == s.class_label;
    r.correct += hit;
    ++r.total;
    r.confusion.at(static_cast<std::size_t>(s.class_label)).at(static_cast<std::size_t>(predicted[i])) += 1;
    auto& [c, n] = dom[s.domain_label];
    c += hit;
    ++n;
  }
  r.accuracy = r.total ? static_cast<double>(r.correct) / static_cast<double>(r.total) : 0.0;
  for (const auto& [d, cn] : dom)
    r.per_domain[ds.domain_names.at(static_cast<std::size_t>(d))] =
        static_cast<double>(cn.first) / static_cast<double>(cn.second);
  return r;
}

template <typename T>
std::vector<int> predict(M2Model<T>& model, const DomainDataset& ds, const std::vector<std::size_t>& indices,
                         std::size_t chunk = 64) {
  NoGradGuard no_grad;
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t b = 0; b < indices.size(); b += chunk) {
    std::vector<std::size_t> part(indices.begin() + static_cast<long>(b),
                                  indices.begin() + static_cast<long>(std::min(indices.size(), b + chunk)));
    auto batch = make_batch<T>(ds, part);
    const auto logits = model.forward(Var<T>(batch.images), false).logits.value();
    const std::size_t K = logits.dim(1);
    for (std::size_t i = 0; i < part.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < K; ++k)
        if (logits.at(i, k) > logits.at(i, best)) best = k;
      out.push_back(static_cast<int>(best));
    }
  }
  return out;
}

template <typename T>
EvalResult evaluate(M2Model<T>& model, const DomainDataset& ds, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw DataError("evaluate: empty split");
  if (model.num_classes() != ds.num_classes())
    throw DataError("evaluate: model has " + std::to_string(model.num_classes()) + " classes, data has " +
                    std::to_string(ds.num_classes()));
  return score_predictions(ds, indices, predict(model, ds, indices));
}

struct TrainHooks {
  /// Receives each step record as soon as it is computed.
  std::function<void(const StepLog&)> on_step;
  std::function<void(const EpochLog&)> on_epoch;
  /// Test seam: may rewrite the sampled batch indices before the purity check.
  std::function<void(std::vector<std::size_t>&)> mutate_batch;
};

template <typename T>
struct TrainResult {
  RunRecord record;
  std::unique_ptr<M2Model<T>> model;  // holds the selected checkpoint's parameters
};

namespace detail {

inline bool finite(double v) { return std::isfinite(v); }

template <typename T>
void check_parameters_finite(const ParameterSet<T>& ps, std::size_t epoch, std::size_t step) {
  for (const auto& p : ps.items())
    for (auto v : p.var.value().storage())
      if (!std::isfinite(static_cast<double>(v)))
        throw NumericError("non-finite value in parameter '" + p.name + "' after epoch " + std::to_string(epoch) +
                           " step " + std::to_string(step));
}

}  // namespace detail

inline nlohmann::json to_json(const StepLog& s) {
  return {{"event", "step"},   {"epoch", s.epoch}, {"step", s.step},   {"cross_entropy", s.cross_entropy},
          {"levels", s.levels}, {"alpha", s.alpha}, {"contrastive_sum", s.contrastive_sum}, {"total", s.total}};
}

inline nlohmann::json to_json(const EpochLog& e) {
  nlohmann::json j{{"event", "epoch"},
                   {"epoch", e.epoch},
                   {"cross_entropy", e.cross_entropy},
                   {"contrastive_sum", e.contrastive_sum},
                   {"total", e.total}};
  j["val_accuracy"] = std::isnan(e.val_accuracy) ? nlohmann::json(nullptr) : nlohmann::json(e.val_accuracy);
  return j;
}

inline nlohmann::json to_json(const RunRecord& r) {
  return {{"event", "result"},
          {"config_hash", r.config_hash},
          {"seed", r.seed},
          {"best_epoch", r.best_epoch},
          {"best_val_accuracy", std::isnan(r.best_val_accuracy) ? nlohmann::json(nullptr) : nlohmann::json(r.best_val_accuracy)},
          {"test_domains", r.test_domains},
          {"test_accuracy", r.test.accuracy},
          {"test_per_domain", r.test.per_domain},
          {"confusion", r.test.confusion},
          {"wall_seconds", r.wall_seconds}};
}

/// Trains on `split.train`, selects the epoch with the best validation accuracy
/// (the last epoch when there is no validation data) and evaluates it on `split.test`.
template <typename T>
TrainResult<T> train(const ExperimentConfig& c, const DomainDataset& ds, const Split& split, const TrainHooks& hooks = {}) {
  c.validate();
  const auto start = std::chrono::steady_clock::now();
  TrainResult<T> out;
  auto& rec = out.record;
  rec.config_hash = config_hash(c);
  rec.seed = c.seed;
  for (int d : split.plan.test_domains) rec.test_domains.push_back(ds.domain_names.at(static_cast<std::size_t>(d)));

  if (ds.image_size != c.model.backbone.input_size)
    throw DataError("train: dataset image size " + std::to_string(ds.image_size) + " differs from backbone input " +
                    std::to_string(c.model.backbone.input_size));
  out.model = std::make_unique<M2Model<T>>(c.resolved_model(ds.num_classes()), c.seed);
  auto& model = *out.model;
  Sgd<T> opt(static_cast<T>(c.optimizer.lr), static_cast<T>(c.optimizer.momentum));
  BatchStream stream(ds, split.train, c.optimizer.batch_size, c.optimizer.balanced, detail::mix_seed(c.seed, 0xba7c4ULL));

  const std::unordered_set<std::size_t> test_index(split.test.begin(), split.test.end());
  const auto& test_domains = split.plan.test_domains;
  std::vector<std::string> tap_names;
  for (const auto& b : model.backbone().taps()) tap_names.push_back(b.name);

  std::vector<std::pair<std::string, Tensor<T>>> best;
  auto snapshot = [&] {
    best.clear();
    for (const auto& p : model.parameters().items()) best.emplace_back(p.name, p.var.value());
  };

  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= c.optimizer.epochs; ++epoch) {
    EpochLog el;
    el.epoch = epoch;
    std::size_t n_steps = 0;
    while (auto indices = stream.next()) {
      if (hooks.mutate_batch) hooks.mutate_batch(*indices);
      for (std::size_t i : *indices)
        if (test_index.count(i) || test_domains.count(ds.samples.at(i).domain_label))
          throw DomainLeakError("train: held-out sample " + std::to_string(i) + " (" + ds.samples.at(i).source +
                                ") reached a training batch");
      auto batch = make_batch<T>(ds, *indices);
      auto fwd = model.forward(Var<T>(batch.images), true);
      auto terms = total_loss(fwd.logits, batch.classes, fwd.level_embeddings, c.loss);

      StepLog sl;
      sl.epoch = epoch;
      sl.step = step;
      sl.cross_entropy = terms.ce_value;
      sl.alpha = c.loss.alpha;
      sl.contrastive_sum = terms.contrastive_sum;
      sl.total = static_cast<double>(terms.total.item());
      for (const auto& l : terms.levels) sl.levels.push_back(static_cast<double>(l.item()));
      auto where = " at epoch " + std::to_string(epoch) + " step " + std::to_string(step);
      if (!detail::finite(sl.cross_entropy)) throw NumericError("non-finite cross_entropy" + where);
      for (std::size_t l = 0; l < sl.levels.size(); ++l)
        if (!detail::finite(sl.levels[l])) throw NumericError("non-finite level_loss[" + tap_names.at(l) + "]" + where);
      if (!detail::finite(sl.total)) throw NumericError("non-finite total loss" + where);

      model.parameters().zero_grad();
      backward(terms.total);
      opt.step(model.parameters());
      detail::check_parameters_finite(model.parameters(), epoch, step);

      el.cross_entropy += sl.cross_entropy;
      el.contrastive_sum += sl.contrastive_sum;
      el.total += sl.total;
      ++n_steps;
      if (hooks.on_step) hooks.on_step(sl);
      if (c.log_steps) rec.steps.push_back(std::move(sl));
      ++step;
    }
    if (n_steps > 0) {
      el.cross_entropy /= static_cast<double>(n_steps);
      el.contrastive_sum /= static_cast<double>(n_steps);
      el.total /= static_cast<double>(n_steps);
    }
    if (!split.val.empty()) {
      el.val_accuracy = evaluate(model, ds, split.val).accuracy;
      if (std::isnan(rec.best_val_accuracy) || el.val_accuracy > rec.best_val_accuracy) {
        rec.best_val_accuracy = el.val_accuracy;
        rec.best_epoch = epoch;
        snapshot();
      }
    } else {
      rec.best_epoch = epoch;
      snapshot();
    }
    if (hooks.on_epoch) hooks.on_epoch(el);
    rec.epochs.push_back(el);
  }
  for (auto& [name, value] : best) model.parameters().find(name)->var.mutable_value() = std::move(value);
  if (!split.test.empty()) rec.test = evaluate(model, ds, split.test);
  rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

/// Metadata stored alongside the parameters so `eval` can rebuild the run.
inline std::map<std::string, std::string> checkpoint_meta(const ExperimentConfig& c, const DomainDataset& ds,
                                                          const RunRecord& r) {
  std::string classes;
  for (const auto& n : ds.class_names) classes += (classes.empty() ? "" : ",") + n;
  return {{"config", to_text(c)},
          {"config_hash", r.config_hash},
          {"classes", classes},
          {"num_classes", std::to_string(ds.num_classes())},
          {"best_epoch", std::to_string(r.best_epoch)},
          {"seed", std::to_string(r.seed)}};
}

}  // namespace m2cl
