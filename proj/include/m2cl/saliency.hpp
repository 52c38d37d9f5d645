#pragma once

// Vanilla-gradient saliency: |d logit / d pixel|, max over colour channels,
// min-max normalized to [0,1].

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "m2cl/model.hpp"
#include "m2cl/pnm.hpp"

namespace m2cl {

struct SaliencyMap {
  Tensor<double> values;  // [S,S]
  int class_index = 0;
  std::string source;
};

/// Raw input gradient of the pre-softmax score for `class_index`, shape [3,S,S].
template <typename T>
Tensor<T> input_gradient(M2Model<T>& model, const Tensor<T>& image, int class_index) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("saliency: image must be [3,S,S], got " + shape_str(image.shape()));
  if (class_index < 0 || static_cast<std::size_t>(class_index) >= model.num_classes())
    throw ConfigError("saliency: class index " + std::to_string(class_index) + " out of range");
  Var<T> input(image.reshaped(Shape{1, image.dim(0), image.dim(1), image.dim(2)}), true);
  auto out = model.forward(input, false);
  backward(select(out.logits, static_cast<std::size_t>(class_index)));
  return input.grad().reshaped(image.shape());
}

template <typename T>
SaliencyMap saliency(M2Model<T>& model, const Tensor<T>& image, int class_index, std::string source = {}) {
  const Tensor<T> g = input_gradient(model, image, class_index);
  const std::size_t S = image.dim(1), W = image.dim(2);
  SaliencyMap map{Tensor<double>(Shape{S, W}), class_index, std::move(source)};
  for (std::size_t y = 0; y < S; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      double m = 0;
      for (std::size_t c = 0; c < 3; ++c) m = std::max(m, std::abs(static_cast<double>(g[(c * S + y) * W + x])));
      map.values[y * W + x] = m;
    }
  auto& v = map.values.storage();
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double min = *lo, range = *hi - *lo;
  for (auto& e : v) e = range > 0 ? (e - min) / range : 0.0;
  return map;
}

/// High saliency renders dark.
inline void emit_pgm(const SaliencyMap& map, const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes(map.values.numel());
  for (std::size_t i = 0; i < bytes.size(); ++i)
    bytes[i] = static_cast<std::uint8_t>(std::lround(255.0 * (1.0 - std::clamp(map.values[i], 0.0, 1.0))));
  write_pnm(path, map.values.dim(1), map.values.dim(0), 1, bytes);
}

/// Fraction of total saliency that falls inside a binary mask.
inline double mask_mass(const SaliencyMap& map, const std::vector<std::uint8_t>& mask) {
  if (mask.size() != map.values.numel()) throw ShapeError("saliency: mask size does not match map");
  double in = 0, total = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    total += map.values[i];
    if (mask[i]) in += map.values[i];
  }
  return total > 0 ? in / total : 0.0;
}

}  // namespace m2cl
