#pragma once

#include <string>
#include <vector>

#include "labelreg/labels.hpp"
#include "labelreg/metrics.hpp"
#include "labelreg/ops.hpp"
#include "labelreg/optim.hpp"
#include "labelreg/training.hpp"

namespace labelreg {

// Mirrored conv autoencoder over label maps: each encoder stage is a 3x3
// conv + ReLU + 2x2 max-pool; each decoder stage a nearest 2x upsample + 3x3
// conv, ReLU everywhere except the final K-logit layer. No skip connections:
// the decoder sees only the bottleneck.
struct AutoencoderConfig {
  int num_classes = 6;
  int pool_stages = 5;
  std::vector<int> encoder_channels;  // one entry per stage; decoder mirrors reversed
  int input_h = 256;
  int input_w = 256;

  // The named presets expand by bottleneck width: "32" -> all 32 channels,
  // "128" -> conv1 32 / rest 128, "256" -> conv1 32 / middle 128 / last 256.
  static AutoencoderConfig preset(const std::string& name, int num_classes, int input_h,
                                  int input_w, int stages = 5);

  void validate() const;
  int bottleneck_channels() const { return encoder_channels.back(); }
  int bottleneck_h() const { return input_h >> pool_stages; }
  int bottleneck_w() const { return input_w >> pool_stages; }
  TensorShape bottleneck_shape(int batch = 1) const {
    return {batch, bottleneck_channels(), bottleneck_h(), bottleneck_w()};
  }
};

inline AutoencoderConfig AutoencoderConfig::preset(const std::string& name, int num_classes,
                                                   int input_h, int input_w, int stages) {
  AutoencoderConfig cfg;
  cfg.num_classes = num_classes;
  cfg.pool_stages = stages;
  cfg.input_h = input_h;
  cfg.input_w = input_w;
  cfg.encoder_channels.assign(stages, 128);
  cfg.encoder_channels.front() = 32;
  if (name == "32") {
    cfg.encoder_channels.assign(stages, 32);
  } else if (name == "128") {
    cfg.encoder_channels.back() = 128;
  } else if (name == "256") {
    cfg.encoder_channels.back() = 256;
  } else {
    throw ConfigError("AutoencoderConfig: unknown preset '" + name + "' (expected 32/128/256)");
  }
  cfg.validate();
  return cfg;
}

inline void AutoencoderConfig::validate() const {
  if (pool_stages < 1) throw ConfigError("AutoencoderConfig: pool_stages must be >= 1");
  if (int(encoder_channels.size()) != pool_stages)
    throw ConfigError("AutoencoderConfig: encoder_channels must have one entry per stage");
  for (int c : encoder_channels)
    if (c < 1) throw ConfigError("AutoencoderConfig: channel counts must be positive");
  if (num_classes < 2) throw ConfigError("AutoencoderConfig: need at least 2 classes");
  const int div = 1 << pool_stages;
  if (input_h % div != 0 || input_w % div != 0)
    throw ConfigError("AutoencoderConfig: input " + std::to_string(input_h) + "x" +
                      std::to_string(input_w) + " not divisible by 2^" +
                      std::to_string(pool_stages));
}

template <class S>
struct AutoencoderModel {
  AutoencoderConfig config;
  ParamStore<S> params;  // ae.enc.convN.{w,b} and ae.dec.convN.{w,b}

  template <class T>
  AutoencoderModel<T> cast() const {
    return {config, params.template cast<T>()};
  }
};

inline constexpr const char* kEncoderPrefix = "ae.enc";
inline constexpr const char* kDecoderPrefix = "ae.dec";

template <class S>
AutoencoderModel<S> build_autoencoder(const AutoencoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  AutoencoderModel<S> m;
  m.config = cfg;
  int in_c = cfg.num_classes;
  for (int i = 0; i < cfg.pool_stages; ++i) {
    const std::string base = std::string(kEncoderPrefix) + ".conv" + std::to_string(i + 1);
    init_conv_param(m.params, seed, base + ".w", cfg.encoder_channels[i], in_c, 3, 3);
    init_bias_param(m.params, base + ".b", cfg.encoder_channels[i]);
    in_c = cfg.encoder_channels[i];
  }
  for (int i = 0; i < cfg.pool_stages; ++i) {
    const int out_c =
        i + 1 < cfg.pool_stages ? cfg.encoder_channels[cfg.pool_stages - 2 - i] : cfg.num_classes;
    const std::string base = std::string(kDecoderPrefix) + ".conv" + std::to_string(i + 1);
    init_conv_param(m.params, seed, base + ".w", out_c, in_c, 3, 3);
    init_bias_param(m.params, base + ".b", out_c);
    in_c = out_c;
  }
  return m;
}

template <class S>
struct EncodeResult {
  Tensor<S> bottleneck;
  Tensor<S> conv1_tap;  // post-ReLU, pre-pool activations of stage 1
  Tensor<S> conv3_tap;  // and of stage min(3, stages)
};

// The forward passes take a Session so phase-2 training can drive the frozen
// decoder (or encoder) from its own combined parameter store.
template <class S>
EncodeResult<S> encoder_forward(Tape<S>& tape, Session<S>& session, const AutoencoderConfig& cfg,
                                const Tensor<S>& onehot) {
  const auto& is = onehot.shape();
  if (is.c != cfg.num_classes || is.h != cfg.input_h || is.w != cfg.input_w)
    throw ConfigError("encoder_forward: input " + is.str() + " does not match config " +
                      std::to_string(cfg.num_classes) + "x" + std::to_string(cfg.input_h) + "x" +
                      std::to_string(cfg.input_w));
  EncodeResult<S> r;
  Tensor<S> x = onehot;
  const int tap_late = std::min(3, cfg.pool_stages);
  for (int i = 0; i < cfg.pool_stages; ++i) {
    const std::string base = std::string(kEncoderPrefix) + ".conv" + std::to_string(i + 1);
    x = relu(tape, conv2d(tape, x, session.param(base + ".w"), session.param(base + ".b"), 1, 1));
    if (i == 0) r.conv1_tap = x;
    if (i == tap_late - 1) r.conv3_tap = x;
    x = pool2d(tape, x, PoolKind::kMax, 2, 2);
  }
  r.bottleneck = x;
  return r;
}

template <class S>
Tensor<S> decoder_forward(Tape<S>& tape, Session<S>& session, const AutoencoderConfig& cfg,
                          const Tensor<S>& bottleneck) {
  const auto& bs = bottleneck.shape();
  const auto want = cfg.bottleneck_shape(bs.n);
  if (!(bs == want))
    throw ConfigError("decoder_forward: bottleneck " + bs.str() + " does not match expected " +
                      want.str());
  Tensor<S> x = bottleneck;
  for (int i = 0; i < cfg.pool_stages; ++i) {
    const std::string base = std::string(kDecoderPrefix) + ".conv" + std::to_string(i + 1);
    x = upsample_nearest2x(tape, x);
    x = conv2d(tape, x, session.param(base + ".w"), session.param(base + ".b"), 1, 1);
    if (i + 1 < cfg.pool_stages) x = relu(tape, x);
  }
  return x;
}

// Inference conveniences over a model's own store.
template <class S>
EncodeResult<S> encode(const AutoencoderModel<S>& m, const Tensor<S>& onehot) {
  Tape<S> tape;
  Session<S> session(tape, m.params, /*trainable=*/false);
  return encoder_forward(tape, session, m.config, onehot);
}

template <class S>
Tensor<S> decode(const AutoencoderModel<S>& m, const Tensor<S>& bottleneck) {
  Tape<S> tape;
  Session<S> session(tape, m.params, /*trainable=*/false);
  return decoder_forward(tape, session, m.config, bottleneck);
}

struct ReconMetrics {
  double accuracy = 0;  // non-void pixel agreement of the reconstruction argmax
  double miou = 0;
};

// Reconstruction quality of a model on a label set.
template <class S>
ReconMetrics reconstruction_metrics(const AutoencoderModel<S>& m,
                                    const std::vector<LabelMap>& labels, int batch_size = 16) {
  std::int64_t hits = 0, total = 0;
  ConfusionMatrix conf(m.config.num_classes);
  for (std::size_t at = 0; at < labels.size(); at += std::size_t(batch_size)) {
    std::vector<const LabelMap*> chunk;
    for (std::size_t i = at; i < std::min(labels.size(), at + std::size_t(batch_size)); ++i)
      chunk.push_back(&labels[i]);
    const LabelMap batch = stack_labels(chunk);
    const auto onehot = one_hot_labels<S>(batch, m.config.num_classes);
    Tape<S> tape;
    Session<S> session(tape, m.params, false);
    const auto logits =
        decoder_forward(tape, session, m.config,
                        encoder_forward(tape, session, m.config, onehot).bottleneck);
    const auto& ls = logits.shape();
    const std::int64_t px = ls.pixels();
    LabelMap pred(ls.n, ls.h, ls.w);
    for (int ni = 0; ni < ls.n; ++ni) {
      const S* z = logits.data() + logits.image_offset(ni);
      for (std::int64_t p = 0; p < px; ++p) {
        int best = 0;
        for (int k = 1; k < ls.c; ++k)
          if (z[std::int64_t(k) * px + p] > z[std::int64_t(best) * px + p]) best = k;
        pred.ids[std::size_t(ni) * px + p] = std::uint8_t(best);
        const int t = batch.ids[std::size_t(ni) * px + p];
        if (t == kVoidId) continue;
        hits += best == t ? 1 : 0;
        ++total;
      }
    }
    conf.accumulate(batch, pred);
  }
  ReconMetrics r;
  r.accuracy = total == 0 ? 0.0 : double(hits) / double(total);
  r.miou = miou(conf).mean;
  return r;
}

template <class S>
double reconstruction_accuracy(const AutoencoderModel<S>& m, const std::vector<LabelMap>& labels,
                               int batch_size = 16) {
  return reconstruction_metrics(m, labels, batch_size).accuracy;
}

// Mean reconstruction cross-entropy over a label set (no parameter updates).
template <class S>
double autoencoder_dataset_ce(const AutoencoderModel<S>& m, const std::vector<LabelMap>& labels,
                              int batch_size = 16) {
  double total = 0;
  int batches = 0;
  for (std::size_t at = 0; at < labels.size(); at += std::size_t(batch_size)) {
    std::vector<const LabelMap*> chunk;
    for (std::size_t i = at; i < std::min(labels.size(), at + std::size_t(batch_size)); ++i)
      chunk.push_back(&labels[i]);
    const LabelMap batch = stack_labels(chunk);
    const auto onehot = one_hot_labels<S>(batch, m.config.num_classes);
    Tape<S> tape;
    Session<S> session(tape, m.params, false);
    const auto logits =
        decoder_forward(tape, session, m.config,
                        encoder_forward(tape, session, m.config, onehot).bottleneck);
    total += double(softmax_ce_loss(tape, logits, batch).values()[0]);
    ++batches;
  }
  return batches == 0 ? 0.0 : total / batches;
}

// Phase-1 training: minimizes per-pixel CE of decode(encode(onehot(x)))
// against x itself. Stops early once training-set reconstruction accuracy
// reaches stop_at_accuracy (if positive).
template <class S>
std::vector<EpochLog> train_autoencoder(AutoencoderModel<S>& model,
                                        const std::vector<LabelMap>& labels,
                                        const TrainSchedule& schedule, std::uint64_t seed,
                                        double stop_at_accuracy = -1.0) {
  if (labels.empty()) throw DataError("train_autoencoder: empty dataset");
  AdamState<S> adam;
  std::vector<EpochLog> log;
  for (int epoch = 0; epoch < schedule.total_epochs(); ++epoch) {
    const auto order = shuffle_indices(int(labels.size()), seed, epoch);
    const S lr = S(schedule.lr_at(epoch));
    double epoch_loss = 0;
    int steps = 0;
    ConfusionMatrix conf(model.config.num_classes);
    for (std::size_t at = 0; at < order.size(); at += std::size_t(schedule.batch_size)) {
      std::vector<const LabelMap*> chunk;
      for (std::size_t i = at; i < std::min(order.size(), at + std::size_t(schedule.batch_size));
           ++i)
        chunk.push_back(&labels[std::size_t(order[i])]);
      const LabelMap batch = stack_labels(chunk);
      const auto onehot = one_hot_labels<S>(batch, model.config.num_classes);
      Tape<S> tape;
      Session<S> session(tape, model.params, GradMode::kTrainableOnly);
      const auto enc = encoder_forward(tape, session, model.config, onehot);
      const auto logits = decoder_forward(tape, session, model.config, enc.bottleneck);
      const auto loss = softmax_ce_loss(tape, logits, batch);
      const double loss_v = double(loss.values()[0]);
      check_finite_loss(loss_v, epoch, steps);
      adam_step(model.params, session.grads(loss), adam, lr);
      // reconstruction quality tracked from the training batches themselves
      LabelMap pred(batch.n, batch.h, batch.w);
      const std::int64_t px = logits.shape().pixels();
      for (int ni = 0; ni < batch.n; ++ni) {
        const S* z = logits.data() + logits.image_offset(ni);
        for (std::int64_t p = 0; p < px; ++p) {
          int best = 0;
          for (int kk = 1; kk < logits.shape().c; ++kk)
            if (z[std::int64_t(kk) * px + p] > z[std::int64_t(best) * px + p]) best = kk;
          pred.ids[std::size_t(ni) * px + p] = std::uint8_t(best);
        }
      }
      conf.accumulate(batch, pred);
      epoch_loss += loss_v;
      ++steps;
    }
    EpochLog e;
    e.epoch = epoch;
    e.split = "train";
    e.primary_loss = epoch_loss / std::max(1, steps);
    e.miou = miou(conf).mean;
    log.push_back(e);
    if (stop_at_accuracy > 0 &&
        reconstruction_metrics(model, labels, schedule.batch_size).accuracy >= stop_at_accuracy)
      break;
  }
  return log;
}

}  // namespace labelreg
