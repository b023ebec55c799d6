#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "labelreg/common.hpp"
#include "labelreg/tensor.hpp"

namespace labelreg {

// Per-pixel class ids for a batch of images. kVoidId marks pixels excluded
// from all losses and metrics.
struct LabelMap {
  int n = 1;
  int h = 0;
  int w = 0;
  std::vector<std::uint8_t> ids;  // n*h*w, image-major then row-major

  LabelMap() = default;
  LabelMap(int n_, int h_, int w_) : n(n_), h(h_), w(w_), ids(std::size_t(n_) * h_ * w_, 0) {}

  std::int64_t pixels() const { return std::int64_t(n) * h * w; }
  std::uint8_t& at(int ni, int y, int x) { return ids[(std::size_t(ni) * h + y) * w + x]; }
  std::uint8_t at(int ni, int y, int x) const { return ids[(std::size_t(ni) * h + y) * w + x]; }
};

// Channel k is 1 where label == k. Void pixels encode as all-zero vectors.
template <class S>
Tensor<S> one_hot_labels(const LabelMap& label, int num_classes, int void_id = kVoidId) {
  TensorShape shape{label.n, num_classes, label.h, label.w};
  Tensor<S> out(shape);
  const std::int64_t px = shape.pixels();
  S* v = out.data();
  for (int ni = 0; ni < label.n; ++ni) {
    const std::uint8_t* ids = label.ids.data() + std::int64_t(ni) * px;
    S* img = v + out.image_offset(ni);
    for (std::int64_t p = 0; p < px; ++p) {
      const int id = ids[p];
      if (id == void_id) continue;
      if (id >= num_classes)
        throw DataError("one_hot_labels: id " + std::to_string(id) + " out of range at image " +
                        std::to_string(ni) + " pixel " + std::to_string(p) + " (K=" +
                        std::to_string(num_classes) + ")");
      img[std::int64_t(id) * px + p] = S(1);
    }
  }
  return out;
}

}  // namespace labelreg
