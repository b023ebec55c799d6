#include "labelreg/introspect.hpp"

#include <algorithm>
#include <cmath>

namespace labelreg {

namespace {

void cells_from_code(std::vector<RegionFeature>& out, const Tensor<float>& code, int sample_id,
                     const char* origin) {
  const auto& s = code.shape();
  const std::int64_t px = s.pixels();
  for (int cy = 0; cy < s.h; ++cy)
    for (int cx = 0; cx < s.w; ++cx) {
      RegionFeature f;
      f.sample_id = sample_id;
      f.cy = cy;
      f.cx = cx;
      f.origin = origin;
      f.vec.resize(std::size_t(s.c));
      for (int c = 0; c < s.c; ++c)
        f.vec[std::size_t(c)] = code.values()[std::int64_t(c) * px + std::int64_t(cy) * s.w + cx];
      out.push_back(std::move(f));
    }
}

}  // namespace

std::vector<RegionFeature> extract_region_features(const AutoencoderModel<float>& ae,
                                                   const Dataset& data) {
  std::vector<RegionFeature> out;
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    const auto onehot = one_hot_labels<float>(data.samples[i].label, ae.config.num_classes);
    cells_from_code(out, encode(ae, onehot).bottleneck, int(i), "encoder_gt");
  }
  return out;
}

std::vector<RegionFeature> extract_region_features(const RegularizedModel<float>& model,
                                                   const Dataset& data) {
  if (model.scheme.variant != RegVariant::kDecoderAux)
    throw ConfigError("extract_region_features: predicted codes need a decoder_aux model");
  std::vector<RegionFeature> out;
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    Tape<float> tape;
    Session<float> session(tape, model.params, false);
    const auto fwd = segnet_forward(tape, session, model.seg_config, data.samples[i].image);
    const auto code = conv_layer(tape, session, kAuxHeadPrefix, fwd.penultimate, 1, 0);
    cells_from_code(out, code, int(i), "cnn_predicted");
  }
  return out;
}

std::vector<NnMatch> nn_query(const RegionFeature& q, const std::vector<RegionFeature>& db, int k,
                              int exclude_sample_id) {
  if (db.empty()) throw UsageError("nn_query: empty feature database");
  struct Scored {
    double dist;
    std::size_t index;
    const RegionFeature* f;
  };
  std::vector<Scored> scored;
  scored.reserve(db.size());
  for (std::size_t i = 0; i < db.size(); ++i) {
    const auto& f = db[i];
    if (f.sample_id == exclude_sample_id) continue;
    if (f.vec.size() != q.vec.size() || f.origin != q.origin)
      throw UsageError("nn_query: query and database features differ in origin/dimensionality");
    double d2 = 0;
    for (std::size_t c = 0; c < q.vec.size(); ++c) {
      const double d = double(q.vec[c]) - double(f.vec[c]);
      d2 += d * d;
    }
    scored.push_back({d2, i, &f});
  }
  if (scored.empty()) throw UsageError("nn_query: every candidate was excluded");
  const std::size_t want = std::min<std::size_t>(std::size_t(std::max(k, 0)), scored.size());
  std::partial_sort(scored.begin(), scored.begin() + std::ptrdiff_t(want), scored.end(),
                    [](const Scored& a, const Scored& b) {
                      if (a.dist != b.dist) return a.dist < b.dist;
                      if (a.f->sample_id != b.f->sample_id) return a.f->sample_id < b.f->sample_id;
                      if (a.f->cy != b.f->cy) return a.f->cy < b.f->cy;
                      return a.f->cx < b.f->cx;
                    });
  std::vector<NnMatch> out;
  out.reserve(want);
  for (std::size_t i = 0; i < want; ++i)
    out.push_back({scored[i].index, std::sqrt(scored[i].dist)});
  return out;
}

int cell_dominant_class(const LabelMap& label, int cy, int cx, int cells_y, int cells_x,
                        double min_coverage) {
  const int ch = label.h / cells_y, cw = label.w / cells_x;
  int counts[256] = {0};
  int total = 0;
  for (int y = cy * ch; y < (cy + 1) * ch; ++y)
    for (int x = cx * cw; x < (cx + 1) * cw; ++x) {
      ++counts[label.at(0, y, x)];
      ++total;
    }
  int best = -1, best_count = 0;
  for (int k = 0; k < 255; ++k)  // void (255) never dominates
    if (counts[k] > best_count) {
      best = k;
      best_count = counts[k];
    }
  if (best < 0 || double(best_count) < min_coverage * double(total)) return -1;
  return best;
}

}  // namespace labelreg
