#include "labelreg/metrics.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace labelreg {

ConfusionMatrix::ConfusionMatrix(int num_classes) : k_(num_classes) {
  if (num_classes <= 0) throw ConfigError("ConfusionMatrix: num_classes must be positive");
  counts_.assign(std::size_t(k_) * k_, 0);
}

void ConfusionMatrix::accumulate(const LabelMap& truth, const LabelMap& pred, int void_id) {
  if (truth.n != pred.n || truth.h != pred.h || truth.w != pred.w)
    throw ConfigError("ConfusionMatrix: prediction dims do not match ground truth");
  for (std::size_t i = 0; i < truth.ids.size(); ++i) {
    const int t = truth.ids[i];
    if (t == void_id) continue;
    const int p = pred.ids[i];
    if (t >= k_ || p >= k_)
      throw DataError("ConfusionMatrix: class id out of range (truth " + std::to_string(t) +
                      ", pred " + std::to_string(p) + ", K=" + std::to_string(k_) + ")");
    ++counts_[std::size_t(t) * k_ + p];
  }
}

std::int64_t ConfusionMatrix::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), std::int64_t(0));
}

MiouResult miou(const ConfusionMatrix& conf) {
  const int k = conf.num_classes();
  MiouResult r;
  r.per_class.assign(k, std::numeric_limits<double>::quiet_NaN());
  double sum = 0;
  int included = 0;
  for (int c = 0; c < k; ++c) {
    std::int64_t tp = conf.at(c, c);
    std::int64_t fp = 0, fn = 0;
    for (int o = 0; o < k; ++o) {
      if (o == c) continue;
      fp += conf.at(o, c);
      fn += conf.at(c, o);
    }
    const std::int64_t uni = tp + fp + fn;
    if (uni == 0) continue;
    r.per_class[c] = double(tp) / double(uni);
    sum += r.per_class[c];
    ++included;
  }
  if (included == 0) throw DataError("miou: all class unions are empty");
  r.mean = sum / included;
  return r;
}

}  // namespace labelreg
