#pragma once

#include <cmath>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "labelreg/rng.hpp"
#include "labelreg/tensor.hpp"

namespace labelreg {

template <class S>
struct Param {
  TensorShape shape;
  VecX<S> value;
};

// Named parameters plus the frozen set. Parameters in the frozen set stay
// bitwise unchanged under any optimizer step; gradients still flow through
// them on the tape.
template <class S>
class ParamStore {
 public:
  void add(const std::string& name, TensorShape shape, VecX<S> value) {
    check_shape_positive(shape, "ParamStore::add");
    if (value.size() != shape.numel())
      throw ConfigError("ParamStore::add: " + name + ": value count mismatch");
    if (map_.count(name)) throw UsageError("ParamStore::add: duplicate parameter " + name);
    order_.push_back(name);
    map_.emplace(name, Param<S>{shape, std::move(value)});
  }

  bool has(const std::string& name) const { return map_.count(name) != 0; }

  Param<S>& at(const std::string& name) {
    auto it = map_.find(name);
    if (it == map_.end()) throw UsageError("ParamStore: unknown parameter " + name);
    return it->second;
  }
  const Param<S>& at(const std::string& name) const {
    auto it = map_.find(name);
    if (it == map_.end()) throw UsageError("ParamStore: unknown parameter " + name);
    return it->second;
  }

  // Registration order; deterministic across runs of the same build code.
  const std::vector<std::string>& names() const { return order_; }

  void freeze(const std::string& name) {
    if (!map_.count(name)) throw UsageError("ParamStore::freeze: unknown parameter " + name);
    frozen_.insert(name);
  }
  void freeze_prefix(const std::string& prefix) {
    bool any = false;
    for (const auto& n : order_)
      if (n.rfind(prefix, 0) == 0) {
        frozen_.insert(n);
        any = true;
      }
    if (!any) throw UsageError("ParamStore::freeze_prefix: no parameters match " + prefix);
  }
  void unfreeze_all() { frozen_.clear(); }
  bool is_frozen(const std::string& name) const { return frozen_.count(name) != 0; }
  const std::set<std::string>& frozen() const { return frozen_; }

  std::int64_t total_count() const {
    std::int64_t c = 0;
    for (const auto& n : order_) c += at(n).shape.numel();
    return c;
  }

  template <class T>
  ParamStore<T> cast() const {
    ParamStore<T> out;
    for (const auto& n : order_) {
      const auto& p = at(n);
      out.add(n, p.shape, p.value.template cast<T>().eval());
    }
    for (const auto& n : frozen_) out.freeze(n);
    return out;
  }

 private:
  std::vector<std::string> order_;
  std::unordered_map<std::string, Param<S>> map_;
  std::set<std::string> frozen_;
};

// Kaiming-uniform fan-in init for a conv weight (out_c, in_c, kh, kw), the
// torch conv default (leaky slope sqrt(5), so bound = 1/sqrt(fan_in)); an
// untrained classifier then emits near-uniform logits. Each parameter draws
// from its own named stream, so the values depend only on (seed, name, shape)
// and never on what else the model registers.
template <class S>
void init_conv_param(ParamStore<S>& store, std::uint64_t seed, const std::string& name,
                     int out_c, int in_c, int kh, int kw) {
  const std::int64_t fan_in = std::int64_t(in_c) * kh * kw;
  const double bound = 1.0 / std::sqrt(double(fan_in));
  RngStream rng = stream(seed, "init/" + name);
  TensorShape shape{out_c, in_c, kh, kw};
  VecX<S> v(shape.numel());
  for (std::int64_t i = 0; i < v.size(); ++i) v[i] = S(rng.uniform(-bound, bound));
  store.add(name, shape, std::move(v));
}

template <class S>
void init_bias_param(ParamStore<S>& store, const std::string& name, int out_c) {
  store.add(name, TensorShape{1, out_c, 1, 1}, VecX<S>::Zero(out_c));
}

// Adam moment estimates; m and v are all-zero until the first step touching
// the parameter, and v stays elementwise non-negative.
template <class S>
struct AdamState {
  S beta1 = S(0.9);
  S beta2 = S(0.999);
  S eps = S(1e-8);
  long t = 0;
  std::unordered_map<std::string, VecX<S>> m, v;
};

template <class S>
using GradsByName = std::map<std::string, VecX<S>>;

// One bias-corrected Adam update. Frozen parameters are untouched bitwise;
// every non-frozen parameter must have a gradient entry.
template <class S>
void adam_step(ParamStore<S>& params, const GradsByName<S>& grads, AdamState<S>& state, S lr) {
  state.t += 1;
  const S bc1 = S(1) - S(std::pow(double(state.beta1), double(state.t)));
  const S bc2 = S(1) - S(std::pow(double(state.beta2), double(state.t)));
  for (const auto& name : params.names()) {
    if (params.is_frozen(name)) continue;
    auto git = grads.find(name);
    if (git == grads.end())
      throw UsageError("adam_step: missing gradient for non-frozen parameter " + name);
    auto& p = params.at(name);
    const VecX<S>& g = git->second;
    if (g.size() != p.value.size())
      throw UsageError("adam_step: gradient size mismatch for " + name);
    auto& m = state.m.try_emplace(name, VecX<S>::Zero(p.value.size())).first->second;
    auto& v = state.v.try_emplace(name, VecX<S>::Zero(p.value.size())).first->second;
    m = state.beta1 * m + (S(1) - state.beta1) * g;
    v = state.beta2 * v + (S(1) - state.beta2) * g.square();
    p.value -= lr * (m / bc1) / ((v / bc2).sqrt() + state.eps);
  }
}

// Which parameters the tape should differentiate. Frozen parameters always
// receive gradient buffers under kAll (freezing is an optimizer concern);
// kTrainableOnly skips their weight-gradient work inside training loops,
// where those buffers are never read.
enum class GradMode { kAll, kTrainableOnly, kNone };

// Binds a ParamStore to a tape for one forward/backward pass: parameters
// become leaves on first use, and gradients come back keyed by name with
// zero buffers for parameters the loss never touched.
template <class S>
class Session {
 public:
  Session(Tape<S>& tape, const ParamStore<S>& store, GradMode mode)
      : tape_(tape), store_(store), mode_(mode) {}
  Session(Tape<S>& tape, const ParamStore<S>& store, bool trainable = true)
      : Session(tape, store, trainable ? GradMode::kAll : GradMode::kNone) {}

  Tensor<S> param(const std::string& name) {
    auto it = leaves_.find(name);
    if (it != leaves_.end()) return it->second;
    const auto& p = store_.at(name);
    const bool wants_grad = mode_ == GradMode::kAll ||
                            (mode_ == GradMode::kTrainableOnly && !store_.is_frozen(name));
    Tensor<S> t = tape_.leaf(p.shape, p.value, wants_grad);
    leaves_.emplace(name, t);
    return t;
  }

  GradsByName<S> grads(const Tensor<S>& loss) const {
    GradMap<S> g = tape_.backward(loss);
    GradsByName<S> out;
    for (const auto& name : store_.names()) {
      auto it = leaves_.find(name);
      if (it != leaves_.end() && g.has(it->second.id())) {
        out.emplace(name, g.at(it->second.id()));
      } else {
        out.emplace(name, VecX<S>::Zero(store_.at(name).shape.numel()));
      }
    }
    return out;
  }

  Tape<S>& tape() { return tape_; }
  const ParamStore<S>& store() const { return store_; }

 private:
  Tape<S>& tape_;
  const ParamStore<S>& store_;
  GradMode mode_;
  std::unordered_map<std::string, Tensor<S>> leaves_;
};

}  // namespace labelreg
