#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "spectralx/tensor.hpp"

namespace spectralx {

struct ParamInfo {
  Tensor tensor;
  bool frozen = false;
  bool buffer = false;  // running statistics etc.: never trained, saved with the model
};

// Name-addressed registry of every parameter and buffer in a model. Modules
// register their tensors here under dotted paths; freezing, optimization,
// counting and checkpointing all operate on this single source of truth.
class ParamStore {
 public:
  Tensor add(const std::string& name, Tensor t, bool buffer = false) {
    if (map_.count(name)) throw ValueError("parameter registered twice: " + name);
    t.set_requires_grad(!buffer);
    map_.emplace(name, ParamInfo{t, false, buffer});
    return t;
  }

  bool contains(const std::string& name) const { return map_.count(name) != 0; }

  Tensor get(const std::string& name) const {
    auto it = map_.find(name);
    if (it == map_.end()) throw ValueError("unknown parameter: " + name);
    return it->second.tensor;
  }

  const std::map<std::string, ParamInfo>& all() const { return map_; }
  std::map<std::string, ParamInfo>& all_mut() { return map_; }

  // Marks every non-buffer parameter frozen/trainable per the predicate
  // (true = trainable). Buffers are never trainable.
  void apply_freeze(const std::function<bool(const std::string&)>& trainable) {
    for (auto& [name, info] : map_) {
      if (info.buffer) continue;
      const bool t = trainable(name);
      info.frozen = !t;
      info.tensor.set_requires_grad(t);
    }
  }

  void zero_grads() {
    for (auto& [name, info] : map_) info.tensor.zero_grad();
  }

  int64_t count_total() const {
    int64_t n = 0;
    for (const auto& [name, info] : map_)
      if (!info.buffer) n += info.tensor.numel();
    return n;
  }

  int64_t count_trainable() const {
    int64_t n = 0;
    for (const auto& [name, info] : map_)
      if (!info.buffer && !info.frozen) n += info.tensor.numel();
    return n;
  }

  // Raw byte snapshot for bit-identity checks.
  std::vector<unsigned char> snapshot(const std::function<bool(const ParamInfo&)>& pick) const {
    std::vector<unsigned char> out;
    for (const auto& [name, info] : map_) {
      if (!pick(info)) continue;
      const auto& v = info.tensor.vals();
      const size_t off = out.size();
      out.resize(off + v.size() * sizeof(real));
      std::memcpy(out.data() + off, v.data(), v.size() * sizeof(real));
    }
    return out;
  }

 private:
  std::map<std::string, ParamInfo> map_;
};

// Adam with optional cosine learning-rate decay, stepping only unfrozen
// parameters that accumulated a gradient.
class Adam {
 public:
  explicit Adam(real lr = 1e-3, real beta1 = 0.9, real beta2 = 0.999, real eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void set_lr(real lr) { lr_ = lr; }
  real lr() const { return lr_; }

  void step(ParamStore& store) {
    ++t_;
    const real bc1 = 1.0 - std::pow(beta1_, static_cast<real>(t_));
    const real bc2 = 1.0 - std::pow(beta2_, static_cast<real>(t_));
    for (auto& [name, info] : store.all_mut()) {
      if (info.frozen || info.buffer || !info.tensor.has_grad()) continue;
      auto& state = state_[name];
      auto& v = info.tensor.vals_mut();
      const auto& g = info.tensor.grad();
      if (state.m.size() != v.size()) {
        state.m.assign(v.size(), 0.0);
        state.v.assign(v.size(), 0.0);
      }
      for (size_t i = 0; i < v.size(); ++i) {
        state.m[i] = beta1_ * state.m[i] + (1.0 - beta1_) * g[i];
        state.v[i] = beta2_ * state.v[i] + (1.0 - beta2_) * g[i] * g[i];
        const real mhat = state.m[i] / bc1;
        const real vhat = state.v[i] / bc2;
        v[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        if (!std::isfinite(v[i])) throw NumericError("non-finite parameter after Adam step");
      }
    }
  }

 private:
  struct State {
    std::vector<real> m, v;
  };
  real lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::map<std::string, State> state_;
};

// Cosine decay from base_lr to ~0 over total_epochs (epoch is 0-based).
inline real cosine_lr(real base_lr, int64_t epoch, int64_t total_epochs) {
  if (total_epochs <= 1) return base_lr;
  const real t = static_cast<real>(epoch) / static_cast<real>(total_epochs - 1);
  constexpr real kPi = 3.14159265358979323846;
  return base_lr * 0.5 * (1.0 + std::cos(kPi * t));
}

}  // namespace spectralx
