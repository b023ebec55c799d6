#pragma once

#include <string>
#include <vector>

#include "labelreg/data.hpp"
#include "labelreg/labels.hpp"
#include "labelreg/layers.hpp"
#include "labelreg/ops.hpp"
#include "labelreg/optim.hpp"

namespace labelreg {

struct ConvSpec {
  int out_c = 0;
  int k = 3;
  int stride = 1;
  int pad = 1;
};

// One plain-CNN stage: convs (each + ReLU), optional 2x2 max-pool, optional
// hypercolumn tap taken after the last conv, before the pool.
struct PlainStage {
  std::vector<ConvSpec> convs;
  bool pool_after = false;
  bool tap = true;
};

// DenseNet unit: 1x1 conv to 4*growth, then 3x3 conv to growth channels,
// output concatenated onto the block's running feature map.
struct DenseBlockSpec {
  int num_units = 0;
  int growth_rate = 0;
};

enum class SegFamily { kPlain, kDense };

struct SegNetConfig {
  std::string preset;
  SegFamily family = SegFamily::kPlain;
  int num_classes = 6;
  int input_h = 64;
  int input_w = 64;
  bool standardize_taps = false;

  // plain family
  std::vector<PlainStage> stages;

  // dense family: stem convs, optional stem pool, blocks with 1x1-conv +
  // 2x2 avg-pool (stride 2) transitions between them. Transitions halve the
  // channel count (floor).
  std::vector<ConvSpec> stem;
  bool stem_pool = false;
  int stem_pool_k = 3, stem_pool_stride = 2, stem_pool_pad = 1;
  std::vector<DenseBlockSpec> blocks;

  void validate() const;
  int downsample_factor() const;
  std::vector<int> tap_channels() const;
  std::vector<int> tap_divisors() const;  // input_resolution / tap_resolution per tap
  int hypercolumn_channels() const;
  // Output channel count of every dense block, per the in + units*growth
  // accounting; empty for the plain family.
  std::vector<int> dense_block_out_channels() const;
  TensorShape penultimate_shape(int batch = 1) const;
};

// hyper_tiny and mini_densenet are the desk-scale trainable presets;
// vgg16_hc, densenet67_hc and densenet121_hc are the full-scale structural
// presets (built and shape-checked, not trained here).
SegNetConfig segnet_preset(const std::string& name, int num_classes, int input_h, int input_w);

template <class S>
struct SegModel {
  SegNetConfig config;
  ParamStore<S> params;

  template <class T>
  SegModel<T> cast() const {
    return {config, params.template cast<T>()};
  }
};

inline constexpr const char* kSegPrefix = "seg";
inline constexpr const char* kHyperStatsMean = "seg.hstats.mean";
inline constexpr const char* kHyperStatsStd = "seg.hstats.std";

template <class S>
SegModel<S> build_segnet(const SegNetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  SegModel<S> m;
  m.config = cfg;
  if (cfg.family == SegFamily::kPlain) {
    for (std::size_t si = 0; si < cfg.stages.size(); ++si) {
      int in_c = si == 0 ? 3 : cfg.stages[si - 1].convs.back().out_c;
      for (std::size_t ci = 0; ci < cfg.stages[si].convs.size(); ++ci) {
        const auto& cs = cfg.stages[si].convs[ci];
        const std::string base = std::string(kSegPrefix) + ".s" + std::to_string(si + 1) + ".c" +
                                 std::to_string(ci + 1);
        init_conv_param(m.params, seed, base + ".w", cs.out_c, in_c, cs.k, cs.k);
        init_bias_param(m.params, base + ".b", cs.out_c);
        in_c = cs.out_c;
      }
    }
  } else {
    int ch = 3;
    for (std::size_t ci = 0; ci < cfg.stem.size(); ++ci) {
      const auto& cs = cfg.stem[ci];
      const std::string base = std::string(kSegPrefix) + ".stem.c" + std::to_string(ci + 1);
      init_conv_param(m.params, seed, base + ".w", cs.out_c, ch, cs.k, cs.k);
      init_bias_param(m.params, base + ".b", cs.out_c);
      ch = cs.out_c;
    }
    for (std::size_t bi = 0; bi < cfg.blocks.size(); ++bi) {
      const auto& blk = cfg.blocks[bi];
      for (int u = 0; u < blk.num_units; ++u) {
        const std::string base =
            std::string(kSegPrefix) + ".b" + std::to_string(bi + 1) + ".u" + std::to_string(u + 1);
        init_conv_param(m.params, seed, base + ".squeeze.w", 4 * blk.growth_rate, ch, 1, 1);
        init_bias_param(m.params, base + ".squeeze.b", 4 * blk.growth_rate);
        init_conv_param(m.params, seed, base + ".grow.w", blk.growth_rate, 4 * blk.growth_rate, 3,
                        3);
        init_bias_param(m.params, base + ".grow.b", blk.growth_rate);
        ch += blk.growth_rate;
      }
      if (bi + 1 < cfg.blocks.size()) {
        const std::string base = std::string(kSegPrefix) + ".t" + std::to_string(bi + 1);
        init_conv_param(m.params, seed, base + ".w", ch / 2, ch, 1, 1);
        init_bias_param(m.params, base + ".b", ch / 2);
        ch /= 2;
      }
    }
  }
  init_conv_param(m.params, seed, std::string(kSegPrefix) + ".head.w", cfg.num_classes,
                  cfg.hypercolumn_channels(), 1, 1);
  init_bias_param(m.params, std::string(kSegPrefix) + ".head.b", cfg.num_classes);
  return m;
}

template <class S>
struct SegForward {
  Tensor<S> primary_logits;  // (n, K, h, w)
  Tensor<S> penultimate;     // native resolution
  Tensor<S> hypercolumn;     // (n, sum of tap channels, h, w)
};

template <class S>
SegForward<S> segnet_forward(Tape<S>& tape, Session<S>& session, const SegNetConfig& cfg,
                             const Tensor<S>& image) {
  const auto& is = image.shape();
  if (is.c != 3 || is.h != cfg.input_h || is.w != cfg.input_w)
    throw ConfigError("segnet_forward: image " + is.str() + " does not match config 3x" +
                      std::to_string(cfg.input_h) + "x" + std::to_string(cfg.input_w));

  std::vector<Tensor<S>> taps;
  Tensor<S> x = image;
  if (cfg.family == SegFamily::kPlain) {
    for (std::size_t si = 0; si < cfg.stages.size(); ++si) {
      const auto& st = cfg.stages[si];
      for (std::size_t ci = 0; ci < st.convs.size(); ++ci) {
        const auto& cs = st.convs[ci];
        x = conv_relu(tape, session,
                      std::string(kSegPrefix) + ".s" + std::to_string(si + 1) + ".c" +
                          std::to_string(ci + 1),
                      x, cs.stride, cs.pad);
      }
      if (st.tap) taps.push_back(x);
      if (st.pool_after) x = pool2d(tape, x, PoolKind::kMax, 2, 2);
    }
  } else {
    for (std::size_t ci = 0; ci < cfg.stem.size(); ++ci)
      x = conv_relu(tape, session, std::string(kSegPrefix) + ".stem.c" + std::to_string(ci + 1), x,
                    cfg.stem[ci].stride, cfg.stem[ci].pad);
    if (cfg.stem_pool)
      x = pool2d(tape, x, PoolKind::kMax, cfg.stem_pool_k, cfg.stem_pool_stride,
                 cfg.stem_pool_pad);
    for (std::size_t bi = 0; bi < cfg.blocks.size(); ++bi) {
      const auto& blk = cfg.blocks[bi];
      for (int u = 0; u < blk.num_units; ++u) {
        const std::string base =
            std::string(kSegPrefix) + ".b" + std::to_string(bi + 1) + ".u" + std::to_string(u + 1);
        auto squeezed = conv_relu(tape, session, base + ".squeeze", x, 1, 0);
        auto grown = conv_relu(tape, session, base + ".grow", squeezed, 1, 1);
        x = concat_channels(tape, {x, grown});
      }
      taps.push_back(x);
      if (bi + 1 < cfg.blocks.size()) {
        x = conv_relu(tape, session, std::string(kSegPrefix) + ".t" + std::to_string(bi + 1), x, 1,
                      0);
        x = pool2d(tape, x, PoolKind::kAvg, 2, 2);
      }
    }
  }

  SegForward<S> out;
  out.penultimate = x;

  std::vector<Tensor<S>> upsampled;
  upsampled.reserve(taps.size());
  for (auto& t : taps) {
    if (t.shape().h == cfg.input_h && t.shape().w == cfg.input_w)
      upsampled.push_back(t);
    else
      upsampled.push_back(upsample_bilinear(tape, t, cfg.input_h, cfg.input_w));
  }
  out.hypercolumn = concat_channels(tape, upsampled);

  Tensor<S> head_in = out.hypercolumn;
  if (cfg.standardize_taps) {
    const auto& store = session.store();
    if (!store.has(kHyperStatsMean))
      throw ConfigError("segnet_forward: standardize_taps is set but no calibration stats "
                        "(run calibrate_standardization first)");
    head_in = standardize_channels(tape, head_in, store.at(kHyperStatsMean).value,
                                   store.at(kHyperStatsStd).value);
  }
  out.primary_logits =
      conv_layer(tape, session, std::string(kSegPrefix) + ".head", head_in, 1, 0);
  return out;
}

// Argmax over classes per pixel; exact ties resolve to the lowest class id.
template <class S>
LabelMap argmax_labels(const Tensor<S>& logits) {
  const auto& ls = logits.shape();
  LabelMap out(ls.n, ls.h, ls.w);
  const std::int64_t px = ls.pixels();
  for (int ni = 0; ni < ls.n; ++ni) {
    const S* z = logits.data() + logits.image_offset(ni);
    for (std::int64_t p = 0; p < px; ++p) {
      int best = 0;
      for (int k = 1; k < ls.c; ++k)
        if (z[std::int64_t(k) * px + p] > z[std::int64_t(best) * px + p]) best = k;
      out.ids[std::size_t(ni) * px + p] = std::uint8_t(best);
    }
  }
  return out;
}

template <class S>
LabelMap predict(const SegModel<S>& m, const Tensor<S>& image) {
  Tape<S> tape;
  Session<S> session(tape, m.params, /*trainable=*/false);
  return argmax_labels(segnet_forward(tape, session, m.config, image).primary_logits);
}

// Fills seg.hstats.{mean,std} from a calibration pass over up to max_images
// dataset images; the stats are frozen, never trained.
template <class S>
void calibrate_standardization(SegModel<S>& m, const Dataset& data, int max_images = 64) {
  if (data.samples.empty()) throw DataError("calibrate_standardization: empty dataset");
  ChannelStatsAccum<S> accum(m.config.hypercolumn_channels());
  const int count = std::min<int>(max_images, int(data.samples.size()));
  SegNetConfig plain_cfg = m.config;
  plain_cfg.standardize_taps = false;  // stats come from the raw hypercolumn
  for (int i = 0; i < count; ++i) {
    Tape<S> tape;
    Session<S> session(tape, m.params, false);
    const auto image = data.samples[std::size_t(i)].image.template cast<S>();
    accum.add(segnet_forward(tape, session, plain_cfg, image).hypercolumn);
  }
  if (m.params.has(kHyperStatsMean)) {
    m.params.at(kHyperStatsMean).value = accum.mean();
    m.params.at(kHyperStatsStd).value = accum.stddev();
  } else {
    const int c = m.config.hypercolumn_channels();
    m.params.add(kHyperStatsMean, TensorShape{1, c, 1, 1}, accum.mean());
    m.params.add(kHyperStatsStd, TensorShape{1, c, 1, 1}, accum.stddev());
    m.params.freeze(kHyperStatsMean);
    m.params.freeze(kHyperStatsStd);
  }
}

}  // namespace labelreg
