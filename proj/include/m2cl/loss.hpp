#pragma once

// Multi-level contrastive objective.
//
// For one level with unit-norm rows u_i and labels y_i, the class probability
// is the sum of exp(u_i.u_j / tau) over unordered same-class pairs divided by
// the same sum over all unordered pairs of the batch. The level loss is
// -sum_c log p(c) over classes with at least two members, and the training
// objective is CE + alpha * sum over levels.
//
// All pairwise similarities come from one Gram matrix G = U U^T, so the
// shared denominator is accumulated once per level. Internals run in double
// and are shifted by the largest pairwise logit so small tau cannot overflow.

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "m2cl/ops.hpp"

namespace m2cl {

struct LossConfig {
  double alpha = 0.01;
  double tau = 1.0;
  std::size_t min_class_count = 2;

  void validate() const {
    if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("loss: tau must be a positive finite number");
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("loss: alpha must be >= 0");
    if (min_class_count < 2) throw ConfigError("loss: min_class_count must be >= 2");
  }
};

/// Per-class probabilities of one level. `p[c]` is nullopt for classes
/// skipped by the batch-composition policy.
struct LevelProbabilities {
  std::vector<std::optional<double>> p;
  /// log of the shared all-pairs denominator.
  double log_denominator = 0.0;
  std::size_t eligible_classes = 0;
};

namespace detail {

struct PairSums {
  std::vector<double> gram;  // N x N
  double shift = 0.0;        // max over i<j of G_ij / tau
  double denominator = 0.0;  // sum over i<j of exp(G_ij / tau - shift)
  std::vector<double> numerators;
  std::vector<std::size_t> counts;
  std::vector<bool> eligible;
};

template <typename T>
PairSums pair_sums(const Tensor<T>& U, const std::vector<int>& labels, double tau, std::size_t min_count,
                   std::size_t num_classes) {
  if (U.rank() != 2) throw ShapeError("contrastive loss: embeddings must be rank 2, got " + shape_str(U.shape()));
  const std::size_t N = U.dim(0), D = U.dim(1);
  if (labels.size() != N) throw ShapeError("contrastive loss: label count does not match batch rows");
  PairSums s;
  for (int y : labels)
    if (y < 0) throw ShapeError("contrastive loss: negative class label");
  std::size_t C = num_classes;
  for (int y : labels) C = std::max(C, static_cast<std::size_t>(y) + 1);
  s.counts.assign(C, 0);
  for (int y : labels) ++s.counts[y];
  s.eligible.resize(C);
  for (std::size_t c = 0; c < C; ++c) s.eligible[c] = s.counts[c] >= min_count;
  s.numerators.assign(C, 0.0);
  if (N < 2) return s;

  Eigen::MatrixXd Ud(N, D);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t d = 0; d < D; ++d) Ud(i, d) = static_cast<double>(U.at(i, d));
  Eigen::MatrixXd G = Ud * Ud.transpose();
  s.gram.resize(N * N);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < N; ++j) s.gram[i * N + j] = G(i, j);

  s.shift = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = i + 1; j < N; ++j) s.shift = std::max(s.shift, s.gram[i * N + j] / tau);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = i + 1; j < N; ++j) {
      const double e = std::exp(s.gram[i * N + j] / tau - s.shift);
      s.denominator += e;
      if (labels[i] == labels[j]) s.numerators[labels[i]] += e;
    }
  return s;
}

}  // namespace detail

/// All class probabilities of one level from a single pass over the Gram matrix.
template <typename T>
LevelProbabilities class_probabilities(const Tensor<T>& U, const std::vector<int>& labels, double tau,
                                       std::size_t min_class_count = 2, std::size_t num_classes = 0) {
  LossConfig{0.0, tau, min_class_count}.validate();
  const auto s = detail::pair_sums(U, labels, tau, min_class_count, num_classes);
  LevelProbabilities out;
  out.p.resize(s.counts.size());
  if (U.dim(0) < 2) return out;
  out.log_denominator = s.shift + std::log(s.denominator);
  for (std::size_t c = 0; c < s.counts.size(); ++c)
    if (s.eligible[c]) {
      out.p[c] = s.numerators[c] / s.denominator;
      ++out.eligible_classes;
    }
  return out;
}

/// p(c) for one class, or nullopt when the class has too few members in the batch.
template <typename T>
std::optional<double> class_probability(const Tensor<T>& U, const std::vector<int>& labels, int c, double tau,
                                        std::size_t min_class_count = 2) {
  if (c < 0) throw ShapeError("class_probability: negative class index");
  const auto probs = class_probabilities(U, labels, tau, min_class_count, static_cast<std::size_t>(c) + 1);
  return probs.p[c];
}

/// -sum over eligible classes of log p(c), differentiable in U. Returns 0 with
/// a warning when no class is eligible.
template <typename T>
Var<T> level_loss(const Var<T>& U, const std::vector<int>& labels, const LossConfig& cfg) {
  cfg.validate();
  auto s = detail::pair_sums(U.value(), labels, cfg.tau, cfg.min_class_count, 0);
  const std::size_t N = U.dim(0), D = U.dim(1);
  std::size_t eligible = 0;
  for (bool e : s.eligible) eligible += e;
  if (N < 2 || eligible == 0) {
    std::clog << "m2cl: warning: batch has no class with >= " << cfg.min_class_count
              << " members; contrastive term is 0\n";
    return make_result<T>(Tensor<T>::scalar(T(0)), {U}, [](Node<T>&) {});
  }
  double loss = 0.0;
  const double log_den = std::log(s.denominator);
  for (std::size_t c = 0; c < s.counts.size(); ++c)
    if (s.eligible[c]) loss -= std::log(s.numerators[c]) - log_den;

  const double tau = cfg.tau;
  return make_result<T>(Tensor<T>::scalar(static_cast<T>(loss)), {U},
                        [=, s = std::move(s), labels = labels](Node<T>& self) {
                          const double g = static_cast<double>(self.grad[0]);
                          const double k_over_den = static_cast<double>(eligible) / s.denominator;
                          // Symmetrized weight on G_ij: dL/dG_ij for i<j, mirrored.
                          Eigen::MatrixXd Wsym = Eigen::MatrixXd::Zero(N, N);
                          for (std::size_t i = 0; i < N; ++i)
                            for (std::size_t j = i + 1; j < N; ++j) {
                              const double e = std::exp(s.gram[i * N + j] / tau - s.shift);
                              double coef = k_over_den;
                              if (labels[i] == labels[j] && s.eligible[labels[i]]) coef -= 1.0 / s.numerators[labels[i]];
                              const double w = g * coef * e / tau;
                              Wsym(i, j) = w;
                              Wsym(j, i) = w;
                            }
                          auto& un = *self.parents[0];
                          Eigen::MatrixXd Ud(N, D);
                          for (std::size_t i = 0; i < N; ++i)
                            for (std::size_t d = 0; d < D; ++d) Ud(i, d) = static_cast<double>(un.value.at(i, d));
                          Eigen::MatrixXd dU = Wsym * Ud;
                          T* gu = un.grad_ref().data();
                          for (std::size_t i = 0; i < N; ++i)
                            for (std::size_t d = 0; d < D; ++d) gu[i * D + d] += static_cast<T>(dU(i, d));
                        });
}

template <typename T>
struct LossTerms {
  Var<T> total;
  Var<T> cross_entropy;
  std::vector<Var<T>> levels;
  double ce_value = 0.0;
  /// Sum of the level losses (before multiplying by alpha).
  double contrastive_sum = 0.0;
};

/// CE + alpha * sum of level losses. With alpha == 0 or no levels the total is
/// the cross-entropy node itself; level losses are still evaluated for logging.
template <typename T>
LossTerms<T> total_loss(const Var<T>& logits, const std::vector<int>& labels, const std::vector<Var<T>>& levels,
                        const LossConfig& cfg) {
  cfg.validate();
  LossTerms<T> out;
  out.cross_entropy = cross_entropy(logits, labels);
  out.ce_value = static_cast<double>(out.cross_entropy.item());
  if (levels.empty()) {
    out.total = out.cross_entropy;
    return out;
  }
  Var<T> acc;
  for (const auto& u : levels) {
    if (cfg.alpha == 0.0) {
      NoGradGuard no_grad;
      out.levels.push_back(level_loss(u, labels, cfg));
    } else {
      out.levels.push_back(level_loss(u, labels, cfg));
    }
    out.contrastive_sum += static_cast<double>(out.levels.back().item());
    acc = acc.defined() ? add(acc, out.levels.back()) : out.levels.back();
  }
  out.total = cfg.alpha == 0.0 ? out.cross_entropy : add_scaled(out.cross_entropy, acc, static_cast<T>(cfg.alpha));
  return out;
}

}  // namespace m2cl
