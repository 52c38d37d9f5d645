#pragma once

#include <cmath>
#include <map>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "m2cl/autodiff.hpp"

namespace m2cl {

template <typename T>
struct Parameter {
  std::string name;
  Var<T> var;
  bool trainable = true;
};

/// Named parameter registry of a model. Names are unique.
template <typename T>
class ParameterSet {
 public:
  Var<T> add(std::string name, Tensor<T> init, bool trainable = true) {
    if (!names_.insert(name).second) throw ConfigError("duplicate parameter name: " + name);
    Var<T> v(std::move(init), trainable);
    params_.push_back({std::move(name), v, trainable});
    return v;
  }

  const std::vector<Parameter<T>>& items() const noexcept { return params_; }
  std::vector<Parameter<T>>& items() noexcept { return params_; }
  std::size_t size() const noexcept { return params_.size(); }

  std::size_t count_scalars() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.var.numel();
    return n;
  }

  const Parameter<T>* find(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }
  Parameter<T>* find(const std::string& name) {
    return const_cast<Parameter<T>*>(std::as_const(*this).find(name));
  }

  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }

 private:
  std::vector<Parameter<T>> params_;
  std::set<std::string> names_;
};

/// He (fan-in) normal initialization.
template <typename T>
Tensor<T> he_normal(Shape shape, std::size_t fan_in, std::mt19937_64& rng, double gain = 2.0) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, std::sqrt(gain / static_cast<double>(fan_in)));
  for (auto& v : t.storage()) v = static_cast<T>(dist(rng));
  return t;
}

/// Uniform in +-1/sqrt(fan_in), the usual dense-layer bias initialization.
template <typename T>
Tensor<T> fan_in_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  Tensor<T> t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.storage()) v = static_cast<T>(dist(rng));
  return t;
}

/// SGD with heavy-ball momentum: v <- momentum * v + g; p <- p - lr * v.
template <typename T>
class Sgd {
 public:
  Sgd(double lr, double momentum) : lr_(lr), momentum_(momentum) {
    if (!(lr > 0.0)) throw ConfigError("sgd: learning rate must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("sgd: momentum must lie in [0,1)");
  }

  void step(ParameterSet<T>& params) {
    for (auto& p : params.items()) {
      if (!p.trainable || !p.var.has_grad()) continue;
      Tensor<T>& value = p.var.mutable_value();
      const Tensor<T>& grad = p.var.grad();
      auto [it, inserted] = velocity_.try_emplace(p.name, value.shape());
      Tensor<T>& v = it->second;
      for (std::size_t i = 0; i < value.numel(); ++i) {
        v[i] = static_cast<T>(momentum_) * v[i] + grad[i];
        value[i] -= static_cast<T>(lr_) * v[i];
      }
    }
  }

  double lr() const noexcept { return lr_; }
  double momentum() const noexcept { return momentum_; }

 private:
  double lr_;
  double momentum_;
  std::map<std::string, Tensor<T>> velocity_;
};

}  // namespace m2cl
