#pragma once

// Desk-scale residual CNN with named tap points. Every residual block output
// and the stem output can be tapped; taps are returned in network order.

#include <algorithm>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "m2cl/ops.hpp"
#include "m2cl/optim.hpp"

namespace m2cl {

enum class TapStage { Early, Late };

inline const char* to_string(TapStage s) { return s == TapStage::Early ? "early" : "late"; }

/// Feature maps of this spatial size or larger are `early`.
inline constexpr std::size_t kEarlyStageMinSpatial = 16;

struct TapPoint {
  std::string name;
  TapStage stage = TapStage::Early;
  std::size_t channels = 0;
  std::size_t spatial = 0;
};

struct StageSpec {
  std::size_t blocks = 2;
  std::size_t channels = 16;
};

struct BackboneConfig {
  std::size_t input_size = 64;
  std::size_t stem_channels = 16;
  std::size_t stem_stride = 2;
  std::vector<StageSpec> stages{{2, 16}, {2, 32}, {2, 64}};
  /// Taps to expose; nullopt exposes all of them.
  std::optional<std::vector<std::string>> tap_spec;
};

/// Every tap the configured architecture can expose, in network order.
inline std::vector<TapPoint> available_taps(const BackboneConfig& cfg) {
  if (cfg.input_size == 0 || cfg.stem_channels == 0 || cfg.stem_stride == 0)
    throw ConfigError("backbone: input_size, stem_channels and stem_stride must be positive");
  auto stage_of = [](std::size_t s) { return s >= kEarlyStageMinSpatial ? TapStage::Early : TapStage::Late; };
  std::vector<TapPoint> taps;
  std::size_t spatial = (cfg.input_size + 2 - 3) / cfg.stem_stride + 1;
  taps.push_back({"stem", stage_of(spatial), cfg.stem_channels, spatial});
  for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
    if (cfg.stages[s].blocks == 0 || cfg.stages[s].channels == 0)
      throw ConfigError("backbone: stage " + std::to_string(s + 1) + " needs at least one block and channel");
    for (std::size_t b = 0; b < cfg.stages[s].blocks; ++b) {
      if (s > 0 && b == 0) {
        if (spatial < 2) throw ConfigError("backbone: too many stages for input size");
        spatial = (spatial - 1) / 2 + 1;
      }
      taps.push_back({"s" + std::to_string(s + 1) + "b" + std::to_string(b + 1), stage_of(spatial),
                      cfg.stages[s].channels, spatial});
    }
  }
  return taps;
}

template <typename T>
struct BackboneOutput {
  Var<T> final;
  std::vector<Var<T>> taps;
};

template <typename T>
class Backbone {
  struct ConvUnit {
    Var<T> weight, bias;
    std::size_t stride = 1, pad = 0;
  };
  struct Affine {
    Var<T> gamma, beta;
  };
  struct ResidualBlock {
    ConvUnit conv1, conv2;
    Affine aff1, aff2;
    std::optional<ConvUnit> shortcut;
    std::optional<Affine> shortcut_aff;
  };

 public:
  /// Registers parameters under `prefix` in `params`.
  Backbone(const BackboneConfig& cfg, ParameterSet<T>& params, std::mt19937_64& rng, const std::string& prefix = "backbone")
      : cfg_(cfg) {
    const auto all = available_taps(cfg);
    if (!cfg.tap_spec) {
      taps_ = all;
    } else {
      for (const auto& name : *cfg.tap_spec) {
        auto it = std::find_if(all.begin(), all.end(), [&](const TapPoint& t) { return t.name == name; });
        if (it == all.end()) {
          std::string avail;
          for (const auto& t : all) avail += (avail.empty() ? "" : ", ") + t.name;
          throw ConfigError("backbone: unknown tap '" + name + "'; available taps: " + avail);
        }
        taps_.push_back(*it);
      }
      // Network order regardless of declaration order.
      std::stable_sort(taps_.begin(), taps_.end(), [&](const TapPoint& a, const TapPoint& b) {
        return index_of(all, a.name) < index_of(all, b.name);
      });
      for (std::size_t i = 1; i < taps_.size(); ++i)
        if (taps_[i].name == taps_[i - 1].name) throw ConfigError("backbone: tap '" + taps_[i].name + "' listed twice");
    }
    for (const auto& t : taps_) tap_index_.push_back(index_of(all, t.name));

    stem_ = make_conv(params, rng, prefix + ".stem.conv", 3, cfg.stem_channels, 3, cfg.stem_stride, 1);
    stem_aff_ = make_affine(params, prefix + ".stem.affine", cfg.stem_channels);
    std::size_t in_ch = cfg.stem_channels;
    for (std::size_t s = 0; s < cfg.stages.size(); ++s)
      for (std::size_t b = 0; b < cfg.stages[s].blocks; ++b) {
        const std::size_t out_ch = cfg.stages[s].channels;
        const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
        const std::string name = prefix + ".s" + std::to_string(s + 1) + "b" + std::to_string(b + 1);
        ResidualBlock blk;
        blk.conv1 = make_conv(params, rng, name + ".conv1", in_ch, out_ch, 3, stride, 1);
        blk.aff1 = make_affine(params, name + ".affine1", out_ch);
        blk.conv2 = make_conv(params, rng, name + ".conv2", out_ch, out_ch, 3, 1, 1);
        blk.aff2 = make_affine(params, name + ".affine2", out_ch);
        if (stride != 1 || in_ch != out_ch) {
          blk.shortcut = make_conv(params, rng, name + ".shortcut", in_ch, out_ch, 1, stride, 0);
          blk.shortcut_aff = make_affine(params, name + ".shortcut_affine", out_ch);
        }
        blocks_.push_back(std::move(blk));
        in_ch = out_ch;
      }
    final_channels_ = in_ch;
    final_spatial_ = all.back().spatial;
  }

  const BackboneConfig& config() const noexcept { return cfg_; }
  const std::vector<TapPoint>& taps() const noexcept { return taps_; }
  std::size_t final_channels() const noexcept { return final_channels_; }
  std::size_t final_spatial() const noexcept { return final_spatial_; }

  /// batch [N,3,S,S]. Pure in (parameters, input): the backbone has no stochastic layers.
  BackboneOutput<T> forward(const Var<T>& batch) const {
    const auto& s = batch.shape();
    if (s.size() != 4 || s[1] != 3 || s[2] != cfg_.input_size || s[3] != cfg_.input_size)
      throw ShapeError("backbone: expected input [N,3," + std::to_string(cfg_.input_size) + "," +
                       std::to_string(cfg_.input_size) + "], got " + shape_str(s));
    BackboneOutput<T> out;
    std::vector<Var<T>> all;
    Var<T> x = relu(apply(stem_aff_, apply(stem_, batch)));
    all.push_back(x);
    for (const auto& blk : blocks_) {
      Var<T> h = relu(apply(blk.aff1, apply(blk.conv1, x)));
      h = apply(blk.aff2, apply(blk.conv2, h));
      Var<T> shortcut = blk.shortcut ? apply(*blk.shortcut_aff, apply(*blk.shortcut, x)) : x;
      x = relu(add(h, shortcut));
      all.push_back(x);
    }
    for (std::size_t i : tap_index_) out.taps.push_back(all[i]);
    out.final = x;
    return out;
  }

 private:
  static std::size_t index_of(const std::vector<TapPoint>& all, const std::string& name) {
    return static_cast<std::size_t>(
        std::find_if(all.begin(), all.end(), [&](const TapPoint& t) { return t.name == name; }) - all.begin());
  }

  static ConvUnit make_conv(ParameterSet<T>& params, std::mt19937_64& rng, const std::string& name, std::size_t in,
                            std::size_t out, std::size_t k, std::size_t stride, std::size_t pad) {
    ConvUnit u;
    u.weight = params.add(name + ".weight", he_normal<T>(Shape{out, in, k, k}, in * k * k, rng));
    u.bias = params.add(name + ".bias", Tensor<T>(Shape{out}));
    u.stride = stride;
    u.pad = pad;
    return u;
  }

  static Affine make_affine(ParameterSet<T>& params, const std::string& name, std::size_t channels) {
    return {params.add(name + ".scale", Tensor<T>(Shape{channels}, T(1))),
            params.add(name + ".shift", Tensor<T>(Shape{channels}))};
  }

  static Var<T> apply(const ConvUnit& u, const Var<T>& x) { return conv2d(x, u.weight, u.bias, u.stride, u.pad); }
  static Var<T> apply(const Affine& a, const Var<T>& x) { return channel_affine(x, a.gamma, a.beta); }

  BackboneConfig cfg_;
  std::vector<TapPoint> taps_;
  std::vector<std::size_t> tap_index_;
  ConvUnit stem_;
  Affine stem_aff_;
  std::vector<ResidualBlock> blocks_;
  std::size_t final_channels_ = 0;
  std::size_t final_spatial_ = 0;
};

}  // namespace m2cl
