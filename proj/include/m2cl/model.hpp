#pragma once

#include <map>
#include <random>
#include <string>
#include <vector>

#include "m2cl/extraction.hpp"

namespace m2cl {

/// Everything needed to build an M2 model. One extraction block is attached
/// to every exposed backbone tap; `block_overrides` replaces the default
/// block configuration for individual taps.
struct ModelSpec {
  BackboneConfig backbone;
  ExtractionBlockConfig block;
  std::map<std::string, ExtractionBlockConfig> block_overrides;
  bool include_final_features = false;
  std::size_t num_classes = 4;

  const ExtractionBlockConfig& block_for(const std::string& tap) const {
    auto it = block_overrides.find(tap);
    return it == block_overrides.end() ? block : it->second;
  }
};

template <typename T>
struct ModelOutput {
  Var<T> logits;
  /// Unit-row embedding per extraction block, in tap order.
  std::vector<Var<T>> level_embeddings;
};

template <typename T>
class M2Model {
 public:
  M2Model(const ModelSpec& spec, std::uint64_t seed) : spec_(spec), init_rng_(seed), dropout_rng_(seed ^ 0x9e3779b97f4a7c15ULL) {
    if (spec.num_classes < 2) throw ConfigError("model: num_classes must be >= 2");
    backbone_ = std::make_unique<Backbone<T>>(spec.backbone, params_, init_rng_);
    for (const auto& [tap, cfg] : spec.block_overrides) {
      bool found = false;
      for (const auto& t : backbone_->taps()) found = found || t.name == tap;
      if (!found) throw ConfigError("model: block override for tap '" + tap + "' which is not exposed");
    }
    std::size_t head_in = 0;
    for (const auto& tap : backbone_->taps()) {
      blocks_.emplace_back(tap, spec.block_for(tap.name), params_, init_rng_, "blocks." + tap.name);
      head_in += blocks_.back().output_width();
    }
    if (spec.include_final_features) head_in += backbone_->final_channels();
    if (head_in == 0) throw ConfigError("model: no extraction blocks and final features disabled; head has no input");
    head_in_ = head_in;
    head_w_ = params_.add("head.weight", he_normal<T>(Shape{head_in, spec.num_classes}, head_in, init_rng_, 1.0));
    head_b_ = params_.add("head.bias", Tensor<T>(Shape{spec.num_classes}));
  }

  M2Model(const M2Model&) = delete;
  M2Model& operator=(const M2Model&) = delete;

  ModelOutput<T> forward(const Var<T>& batch, bool training) {
    auto feats = backbone_->forward(batch);
    ModelOutput<T> out;
    std::vector<Var<T>> head_parts;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      auto bo = blocks_[i].forward(feats.taps[i], training, dropout_rng_);
      head_parts.push_back(bo.concatenated);
      out.level_embeddings.push_back(bo.normalized);
    }
    if (spec_.include_final_features) head_parts.push_back(global_avg_pool(feats.final));
    Var<T> head_in = head_parts.size() == 1 ? head_parts.front() : concat_cols(head_parts);
    out.logits = linear(head_in, head_w_, head_b_);
    return out;
  }

  const ModelSpec& spec() const noexcept { return spec_; }
  const Backbone<T>& backbone() const noexcept { return *backbone_; }
  const std::vector<ExtractionBlock<T>>& blocks() const noexcept { return blocks_; }
  ParameterSet<T>& parameters() noexcept { return params_; }
  const ParameterSet<T>& parameters() const noexcept { return params_; }
  std::size_t head_input_width() const noexcept { return head_in_; }
  std::size_t num_classes() const noexcept { return spec_.num_classes; }
  std::mt19937_64& dropout_rng() noexcept { return dropout_rng_; }

  /// Copies parameter values by name from a model of any scalar type.
  template <typename U>
  void load_parameters_from(const M2Model<U>& other) {
    for (auto& p : params_.items()) {
      const auto* src = other.parameters().find(p.name);
      if (!src || src->var.shape() != p.var.shape())
        throw ConfigError("model: parameter '" + p.name + "' missing or mis-shaped in source model");
      p.var.mutable_value() = src->var.value().template cast<T>();
    }
  }

 private:
  ModelSpec spec_;
  std::mt19937_64 init_rng_;
  std::mt19937_64 dropout_rng_;
  ParameterSet<T> params_;
  std::unique_ptr<Backbone<T>> backbone_;
  std::vector<ExtractionBlock<T>> blocks_;
  std::size_t head_in_ = 0;
  Var<T> head_w_, head_b_;
};

}  // namespace m2cl
