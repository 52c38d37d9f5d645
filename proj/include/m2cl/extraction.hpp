#pragma once

// Extraction blocks: per tap, one or more concentration pipelines
// (1x1 conv -> spatial dropout -> stride-1 max pool -> flatten -> MLP), whose
// outputs are joined and row-normalized into the level embedding of that tap.

#include <iostream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "m2cl/backbone.hpp"

namespace m2cl {

enum class PipelineMode { Parallel, Cascading };

inline const char* to_string(PipelineMode m) { return m == PipelineMode::Parallel ? "parallel" : "cascading"; }

inline const std::vector<std::size_t>& default_targets(TapStage stage) {
  static const std::vector<std::size_t> early{8, 4, 2};
  static const std::vector<std::size_t> late{7, 3};
  return stage == TapStage::Early ? early : late;
}

struct ExtractionBlockConfig {
  std::size_t r = 4;
  PipelineMode mode = PipelineMode::Parallel;
  /// Pool output sizes; nullopt picks the stage default ({8,4,2} early, {7,3} late).
  std::optional<std::vector<std::size_t>> targets;
  double dropout_rate = 0.5;
  std::size_t mlp_hidden = 128;
  std::size_t embed_dim = 64;

  void validate() const {
    if (r < 1) throw ConfigError("extraction: reduction parameter r must be >= 1");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("extraction: dropout rate must lie in [0,1)");
    if (mlp_hidden == 0 || embed_dim == 0) throw ConfigError("extraction: mlp_hidden and embed_dim must be positive");
    if (targets && targets->empty()) throw ConfigError("extraction: empty target list");
  }
};

template <typename T>
struct BlockOutput {
  std::vector<Var<T>> per_pipeline;
  Var<T> concatenated;
  Var<T> normalized;
};

template <typename T>
class ExtractionBlock {
  struct Mlp {
    Var<T> w1, b1, w2, b2;
  };

 public:
  ExtractionBlock(const TapPoint& tap, const ExtractionBlockConfig& cfg, ParameterSet<T>& params, std::mt19937_64& rng,
                  const std::string& prefix)
      : tap_(tap), cfg_(cfg) {
    cfg.validate();
    if (tap.channels < cfg.r)
      throw ConfigError("extraction: tap '" + tap.name + "' has " + std::to_string(tap.channels) +
                        " channels, fewer than r=" + std::to_string(cfg.r));
    reduced_ = tap.channels / cfg.r;
    for (std::size_t t : cfg.targets ? *cfg.targets : default_targets(tap.stage)) {
      if (t == 0 || t > tap.spatial) {
        std::clog << "m2cl: warning: dropping pool target " << t << " for tap '" << tap.name << "' (spatial "
                  << tap.spatial << ")\n";
        continue;
      }
      targets_.push_back(t);
    }
    if (targets_.empty())
      throw ConfigError("extraction: no feasible pool target for tap '" + tap.name + "' of spatial size " +
                        std::to_string(tap.spatial));

    const std::size_t n_convs = cfg.mode == PipelineMode::Parallel ? targets_.size() : 1;
    for (std::size_t i = 0; i < n_convs; ++i) {
      const std::string name = prefix + (cfg.mode == PipelineMode::Parallel ? ".pipe" + std::to_string(i) : ".shared") + ".reduce";
      conv_w_.push_back(params.add(name + ".weight", he_normal<T>(Shape{reduced_, tap.channels, 1, 1}, tap.channels, rng)));
      conv_b_.push_back(params.add(name + ".bias", Tensor<T>(Shape{reduced_})));
    }
    for (std::size_t i = 0; i < targets_.size(); ++i) {
      const std::string name = prefix + ".pipe" + std::to_string(i) + ".mlp";
      const std::size_t in = reduced_ * targets_[i] * targets_[i];
      Mlp m;
      m.w1 = params.add(name + ".fc1.weight", he_normal<T>(Shape{in, cfg.mlp_hidden}, in, rng));
      m.b1 = params.add(name + ".fc1.bias", fan_in_uniform<T>(Shape{cfg.mlp_hidden}, in, rng));
      m.w2 = params.add(name + ".fc2.weight", he_normal<T>(Shape{cfg.mlp_hidden, cfg.embed_dim}, cfg.mlp_hidden, rng, 1.0));
      m.b2 = params.add(name + ".fc2.bias", fan_in_uniform<T>(Shape{cfg.embed_dim}, cfg.mlp_hidden, rng));
      mlps_.push_back(std::move(m));
    }
  }

  const TapPoint& tap() const noexcept { return tap_; }
  const ExtractionBlockConfig& config() const noexcept { return cfg_; }
  std::size_t reduced_channels() const noexcept { return reduced_; }
  const std::vector<std::size_t>& targets() const noexcept { return targets_; }
  std::size_t pool_kernel(std::size_t i) const { return tap_.spatial - targets_.at(i) + 1; }
  std::size_t num_pipelines() const noexcept { return targets_.size(); }
  std::size_t output_width() const noexcept { return targets_.size() * cfg_.embed_dim; }
  const std::vector<Var<T>>& reduce_weights() const noexcept { return conv_w_; }

  BlockOutput<T> forward(const Var<T>& feature_map, bool training, std::mt19937_64& rng) const {
    const auto& s = feature_map.shape();
    if (s.size() != 4 || s[1] != tap_.channels || s[2] != tap_.spatial || s[3] != tap_.spatial)
      throw ShapeError("extraction: block for tap '" + tap_.name + "' expects [N," + std::to_string(tap_.channels) +
                       "," + std::to_string(tap_.spatial) + "," + std::to_string(tap_.spatial) + "], got " +
                       shape_str(s));
    BlockOutput<T> out;
    Var<T> shared;
    if (cfg_.mode == PipelineMode::Cascading)
      shared = spatial_dropout(conv2d(feature_map, conv_w_[0], conv_b_[0], 1, 0), cfg_.dropout_rate, training, rng);
    for (std::size_t i = 0; i < targets_.size(); ++i) {
      Var<T> reduced = cfg_.mode == PipelineMode::Cascading
                           ? shared
                           : spatial_dropout(conv2d(feature_map, conv_w_[i], conv_b_[i], 1, 0), cfg_.dropout_rate,
                                             training, rng);
      Var<T> pooled = flatten(maxpool_stride1(reduced, pool_kernel(i)));
      const Mlp& m = mlps_[i];
      out.per_pipeline.push_back(linear(relu(linear(pooled, m.w1, m.b1)), m.w2, m.b2));
    }
    out.concatenated = out.per_pipeline.size() == 1 ? out.per_pipeline.front() : concat_cols(out.per_pipeline);
    out.normalized = l2_normalize_rows(out.concatenated);
    return out;
  }

 private:
  TapPoint tap_;
  ExtractionBlockConfig cfg_;
  std::size_t reduced_ = 0;
  std::vector<std::size_t> targets_;
  std::vector<Var<T>> conv_w_, conv_b_;
  std::vector<Mlp> mlps_;
};

}  // namespace m2cl
