#pragma once

#include <cstdint>
#include <vector>

#include "labelreg/common.hpp"
#include "labelreg/labels.hpp"

namespace labelreg {

// K x K pixel counts, rows = ground truth, cols = prediction. Void pixels
// are never counted.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes);

  void accumulate(const LabelMap& truth, const LabelMap& pred, int void_id = kVoidId);

  std::int64_t at(int truth_class, int pred_class) const {
    return counts_[std::size_t(truth_class) * k_ + pred_class];
  }
  std::int64_t total() const;
  int num_classes() const { return k_; }

 private:
  int k_;
  std::vector<std::int64_t> counts_;
};

struct MiouResult {
  std::vector<double> per_class;  // NaN for classes with zero union
  double mean = 0;                // over classes with nonzero union
};

// IoU_k = TP_k / (TP_k + FP_k + FN_k); classes whose union is empty are
// excluded from the mean.
MiouResult miou(const ConfusionMatrix& conf);

}  // namespace labelreg
