#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "emdepart/rng.hpp"
#include "emdepart/tensor.hpp"

namespace emdepart {

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;  // same shape, accumulated by Tape::backward, zeroed by the optimizer

  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape) {}
};

struct Init {
  enum Kind { Zeros, Ones, Normal, XavierUniform } kind;
  double sigma = 0.0;

  static Init zeros() { return {Zeros}; }
  static Init ones() { return {Ones}; }
  static Init normal(double sigma) { return {Normal, sigma}; }
  static Init xavier() { return {XavierUniform}; }
};

// Named parameters with stable addresses and deterministic (insertion)
// iteration order. Owns the init RNG, so a store built with the same seed and
// the same creation sequence is bit-identical.
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed) : rng_(seed) {}

  Parameter& create(const std::string& name, Shape shape, Init init) {
    if (by_name_.count(name)) throw DataError("ParamStore: duplicate parameter " + name);
    Tensor v(shape);
    fill(v, init);
    params_.push_back(std::make_unique<Parameter>(name, std::move(v)));
    by_name_.emplace(name, params_.size() - 1);
    return *params_.back();
  }

  bool contains(const std::string& name) const { return by_name_.count(name) != 0; }

  Parameter& at(const std::string& name) {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw DataError("ParamStore: unknown parameter " + name);
    return *params_[it->second];
  }

  std::size_t size() const { return params_.size(); }

  std::size_t total_values() const {
    std::size_t n = 0;
    for (auto& p : params_) n += p->value.numel();
    return n;
  }

  void zero_grads() {
    for (auto& p : params_)
      for (auto& g : p->grad.data) g = 0.0;
  }

  // Insertion order.
  std::vector<Parameter*> items() {
    std::vector<Parameter*> out;
    out.reserve(params_.size());
    for (auto& p : params_) out.push_back(p.get());
    return out;
  }

  Rng& rng() { return rng_; }

 private:
  void fill(Tensor& t, Init init) {
    switch (init.kind) {
      case Init::Zeros:
        break;
      case Init::Ones:
        for (auto& x : t.data) x = 1.0;
        break;
      case Init::Normal:
        for (auto& x : t.data) x = rng_.normal(0.0, init.sigma);
        break;
      case Init::XavierUniform: {
        // fan_in/fan_out from the trailing two dims; rank-1 falls back to numel
        std::size_t fan_in = t.rank() >= 2 ? t.shape[t.rank() - 2] : t.numel();
        std::size_t fan_out = t.shape[t.rank() - 1];
        double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        for (auto& x : t.data) x = rng_.uniform(-limit, limit);
        break;
      }
    }
  }

  std::vector<std::unique_ptr<Parameter>> params_;
  std::unordered_map<std::string, std::size_t> by_name_;
  Rng rng_;
};

}  // namespace emdepart
