#pragma once

#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "labelreg/data.hpp"
#include "labelreg/rng.hpp"

namespace labelreg {

// Two-phase learning-rate schedule: epochs_hi at lr_hi, then epochs_lo at
// lr_lo.
struct TrainSchedule {
  int epochs_hi = 40;
  int epochs_lo = 10;
  float lr_hi = 1e-4f;
  float lr_lo = 1e-5f;
  int batch_size = 12;
  int val_every = 1;  // validation pass cadence in epochs (final epoch always)

  int total_epochs() const { return epochs_hi + epochs_lo; }
  float lr_at(int epoch) const { return epoch < epochs_hi ? lr_hi : lr_lo; }
};

struct EpochLog {
  int epoch = 0;
  std::string split;  // "train" or "val"
  double primary_loss = 0;
  double aux_loss = 0;
  double miou = 0;
};

inline double final_val_miou(const std::vector<EpochLog>& logs) {
  for (auto it = logs.rbegin(); it != logs.rend(); ++it)
    if (it->split == "val") return it->miou;
  throw UsageError("final_val_miou: no validation rows in the log");
}

inline std::vector<int> shuffle_indices(int count, std::uint64_t seed, int epoch) {
  std::vector<int> idx(count);
  std::iota(idx.begin(), idx.end(), 0);
  RngStream rng = stream(seed, "order/epoch" + std::to_string(epoch));
  for (int i = count - 1; i > 0; --i) std::swap(idx[i], idx[int(rng.below(std::uint64_t(i) + 1))]);
  return idx;
}

inline void check_finite_loss(double loss, int epoch, int step) {
  if (!std::isfinite(loss))
    throw std::runtime_error("training aborted: non-finite loss at epoch " +
                             std::to_string(epoch) + " step " + std::to_string(step));
}

inline LabelMap stack_labels(const std::vector<const LabelMap*>& maps) {
  const int h = maps.front()->h, w = maps.front()->w;
  LabelMap out(int(maps.size()), h, w);
  for (std::size_t i = 0; i < maps.size(); ++i)
    std::copy(maps[i]->ids.begin(), maps[i]->ids.end(),
              out.ids.begin() + std::int64_t(i) * h * w);
  return out;
}

inline Tensor<float> stack_images(const std::vector<const Tensor<float>*>& images) {
  const auto& s0 = images.front()->shape();
  Tensor<float> out({int(images.size()), s0.c, s0.h, s0.w});
  for (std::size_t i = 0; i < images.size(); ++i)
    std::copy_n(images[i]->data(), s0.numel(), out.data() + out.image_offset(int(i)));
  return out;
}

}  // namespace labelreg
