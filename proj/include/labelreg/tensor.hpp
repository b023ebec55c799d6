#pragma once

#include <Eigen/Core>

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "labelreg/common.hpp"

namespace labelreg {

namespace detail {

// Training allocates and frees multi-megabyte activation buffers every step;
// with glibc defaults those round-trip through mmap and the page faults cost
// more than the math. Keep them in the arena instead.
inline void tune_allocator_once() {
#if defined(__GLIBC__)
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 512 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
    return true;
  }();
  (void)done;
#endif
}

}  // namespace detail

template <class S>
using VecX = Eigen::Array<S, Eigen::Dynamic, 1>;

template <class S>
using MatMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class S>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// Dense rank-4 array (batch, channel, row, col), value storage shared so that
// tape closures can hold inputs without copying. Treat a tensor as immutable
// once it has been consumed by an op.
template <class S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;

  explicit Tensor(TensorShape shape)
      : shape_(shape), v_(std::make_shared<VecX<S>>(VecX<S>::Zero(shape.numel()))) {
    check_shape_positive(shape, "Tensor");
  }

  Tensor(TensorShape shape, VecX<S> values) : shape_(shape) {
    check_shape_positive(shape, "Tensor");
    if (values.size() != shape.numel())
      throw ConfigError("Tensor: value count " + std::to_string(values.size()) +
                        " does not match shape " + shape.str());
    v_ = std::make_shared<VecX<S>>(std::move(values));
  }

  const TensorShape& shape() const { return shape_; }
  std::int64_t numel() const { return shape_.numel(); }
  bool defined() const { return v_ != nullptr; }

  const VecX<S>& values() const { return *v_; }
  VecX<S>& mutable_values() { return *v_; }
  const std::shared_ptr<VecX<S>>& storage() const { return v_; }

  bool requires_grad() const { return requires_grad_; }
  long id() const { return id_; }

  S* data() { return v_->data(); }
  const S* data() const { return v_->data(); }

  // Flat offset of the start of image n / channel (n, c).
  std::int64_t image_offset(int n) const { return std::int64_t(n) * shape_.c * shape_.pixels(); }
  std::int64_t channel_offset(int n, int c) const {
    return image_offset(n) + std::int64_t(c) * shape_.pixels();
  }

  template <class T>
  Tensor<T> cast() const {
    return Tensor<T>(shape_, v_->template cast<T>().eval());
  }

 private:
  template <class>
  friend class Tape;

  TensorShape shape_{};
  std::shared_ptr<VecX<S>> v_;
  bool requires_grad_ = false;
  long id_ = -1;  // -1: constant, not tracked by any tape
};

// Gradient buffers keyed by tape-local tensor id.
template <class S>
class GradMap {
 public:
  explicit GradMap(std::size_t n) : g_(n), has_(n, 0) {}

  bool has(long id) const { return id >= 0 && has_[std::size_t(id)]; }

  const VecX<S>& at(long id) const { return g_[std::size_t(id)]; }

  template <class Expr>
  void accum(long id, const Expr& e) {
    if (id < 0) return;
    auto i = std::size_t(id);
    if (has_[i]) {
      g_[i] += e;
    } else {
      g_[i] = e;
      has_[i] = 1;
    }
  }

  void seed(long id, std::int64_t numel, S value) {
    auto i = std::size_t(id);
    g_[i] = VecX<S>::Constant(numel, value);
    has_[i] = 1;
  }

 private:
  std::vector<VecX<S>> g_;
  std::vector<char> has_;
};

// Define-by-run tape. Ops append one step per grad-relevant output; creation
// order is a topological order of the graph, so backward is a single reverse
// sweep over the recorded steps. A tape and its tensors belong to one worker
// at a time.
template <class S>
class Tape {
 public:
  Tape() { detail::tune_allocator_once(); }

  // Registers an independent variable. Values are copied so later in-place
  // updates of the source (e.g. an optimizer step) cannot alter the graph.
  Tensor<S> leaf(const TensorShape& shape, const VecX<S>& values, bool requires_grad) {
    Tensor<S> t(shape, values);
    t.requires_grad_ = requires_grad;
    t.id_ = next_id_++;
    return t;
  }

  // Marks `out` as the result of a differentiable step iff any input needs
  // gradients. Returns true when tracked; the caller then pushes the step's
  // backward closure, which reads g.at(out.id()) and accumulates into the
  // input ids.
  bool track(Tensor<S>& out, bool any_input_grad) {
    if (!any_input_grad) return false;
    out.requires_grad_ = true;
    out.id_ = next_id_++;
    return true;
  }

  void push_step(long out_id, std::function<void(GradMap<S>&)> back) {
    steps_.push_back({out_id, std::move(back)});
  }

  std::size_t num_nodes() const { return std::size_t(next_id_); }
  std::size_t num_steps() const { return steps_.size(); }

  // Reverse-mode sweep from a scalar loss. Each recorded step is visited
  // exactly once, newest first.
  GradMap<S> backward(const Tensor<S>& loss) const {
    if (loss.id() < 0 || std::size_t(loss.id()) >= num_nodes())
      throw UsageError("backward: loss is not a node on this tape");
    if (loss.numel() != 1)
      throw UsageError("backward: loss must be a scalar, got shape " + loss.shape().str());
    GradMap<S> g(num_nodes());
    g.seed(loss.id(), 1, S(1));
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) {
      if (g.has(it->out)) it->fn(g);
    }
    return g;
  }

 private:
  struct Step {
    long out;
    std::function<void(GradMap<S>&)> fn;
  };
  std::vector<Step> steps_;
  long next_id_ = 0;
};

}  // namespace labelreg
