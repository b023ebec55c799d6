#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "labelreg/autoencoder.hpp"
#include "labelreg/metrics.hpp"
#include "labelreg/segnet.hpp"
#include "labelreg/training.hpp"

namespace labelreg {

enum class RegVariant { kNone, kDecoderAux, kEncoderPred };
enum class AuxLossKind { kCrossEntropy, kMse };
enum class DecoderMode { kFrozen, kUnfrozen, kRandomInit };

struct RegScheme {
  RegVariant variant = RegVariant::kNone;
  AuxLossKind aux_loss = AuxLossKind::kCrossEntropy;
  double lambda = 0.5;  // ignored when variant == none
  DecoderMode decoder_mode = DecoderMode::kFrozen;
};

inline constexpr const char* kAuxHeadPrefix = "aux.head";

// A segmentation network plus (optionally) an attached auxiliary branch and
// the label-model parameters it borrows. The branch exists only during
// training; export_inference() strips it.
template <class S>
struct RegularizedModel {
  SegNetConfig seg_config;
  AutoencoderConfig ae_config;  // meaningful when variant != none
  RegScheme scheme;
  ParamStore<S> params;

  template <class T>
  RegularizedModel<T> cast() const {
    return {seg_config, ae_config, scheme, params.template cast<T>()};
  }
};

template <class S>
void copy_params_with_prefix(ParamStore<S>& dst, const ParamStore<S>& src,
                             const std::string& prefix) {
  for (const auto& name : src.names())
    if (name.rfind(prefix, 0) == 0) dst.add(name, src.at(name).shape, src.at(name).value);
}

template <class S>
RegularizedModel<S> make_baseline(const SegModel<S>& seg) {
  RegularizedModel<S> m;
  m.seg_config = seg.config;
  m.scheme.variant = RegVariant::kNone;
  m.params = seg.params;
  return m;
}

// Wires the frozen (or ablated) decoder behind a fresh 1x1 prediction head
// reading the penultimate activation.
template <class S>
RegularizedModel<S> attach_decoder_aux(const SegModel<S>& seg, const AutoencoderModel<S>& ae,
                                       const RegScheme& scheme, std::uint64_t run_seed) {
  if (scheme.variant != RegVariant::kDecoderAux)
    throw ConfigError("attach_decoder_aux: scheme variant is not decoder_aux");
  const TensorShape pen = seg.config.penultimate_shape();
  const TensorShape bot = ae.config.bottleneck_shape();
  if (pen.h != bot.h || pen.w != bot.w)
    throw ConfigError(
        "attach_decoder_aux: penultimate-resolution contract violated: penultimate " + pen.str() +
        " vs decoder input " + bot.str());
  if (seg.config.num_classes != ae.config.num_classes)
    throw ConfigError("attach_decoder_aux: class count mismatch");
  if (seg.config.input_h != ae.config.input_h || seg.config.input_w != ae.config.input_w)
    throw ConfigError("attach_decoder_aux: input resolution mismatch between CNN and label model");

  RegularizedModel<S> m;
  m.seg_config = seg.config;
  m.ae_config = ae.config;
  m.scheme = scheme;
  m.params = seg.params;
  // The head starts at zero: until it has learned to emit sensible decoder
  // codes, the auxiliary loss exerts no pull on the shared features, so a
  // short schedule is not spent fighting a randomly-driven decoder.
  m.params.add(std::string(kAuxHeadPrefix) + ".w", TensorShape{bot.c, pen.c, 1, 1},
               VecX<S>::Zero(std::int64_t(bot.c) * pen.c));
  init_bias_param(m.params, std::string(kAuxHeadPrefix) + ".b", bot.c);
  copy_params_with_prefix(m.params, ae.params, kDecoderPrefix);
  if (scheme.decoder_mode == DecoderMode::kRandomInit) {
    // Skip the learned label model entirely: fresh decoder weights from the
    // run RNG, trained like any other parameter.
    for (const auto& name : m.params.names()) {
      if (name.rfind(kDecoderPrefix, 0) != 0) continue;
      auto& p = m.params.at(name);
      if (name.size() > 2 && name.compare(name.size() - 2, 2, ".w") == 0) {
        const auto& s = p.shape;
        ParamStore<S> tmp;
        init_conv_param(tmp, run_seed, name, s.n, s.c, s.h, s.w);
        p.value = tmp.at(name).value;
      } else {
        p.value.setZero();
      }
    }
  } else if (scheme.decoder_mode == DecoderMode::kFrozen) {
    m.params.freeze_prefix(kDecoderPrefix);
  }
  return m;
}

// Alternative scheme: regress the label encoder's conv1/conv3 activations
// from the CNN hypercolumn. The encoder is always frozen.
template <class S>
RegularizedModel<S> attach_encoder_pred(const SegModel<S>& seg, const AutoencoderModel<S>& ae,
                                        const RegScheme& scheme, std::uint64_t run_seed) {
  if (scheme.variant != RegVariant::kEncoderPred)
    throw ConfigError("attach_encoder_pred: scheme variant is not encoder_pred");
  if (scheme.aux_loss != AuxLossKind::kMse)
    throw ConfigError("attach_encoder_pred: activation regression uses MSE, not cross-entropy");
  if (seg.config.num_classes != ae.config.num_classes)
    throw ConfigError("attach_encoder_pred: class count mismatch");
  if (seg.config.input_h != ae.config.input_h || seg.config.input_w != ae.config.input_w)
    throw ConfigError("attach_encoder_pred: input resolution mismatch between CNN and label model");

  RegularizedModel<S> m;
  m.seg_config = seg.config;
  m.ae_config = ae.config;
  m.scheme = scheme;
  m.params = seg.params;
  const int tap_late = std::min(3, ae.config.pool_stages);
  const int target_c = ae.config.encoder_channels[0] + ae.config.encoder_channels[tap_late - 1];
  // zero start, as for the decoder branch: the regression head warms up
  // before the shared features feel it
  m.params.add(std::string(kAuxHeadPrefix) + ".w",
               TensorShape{target_c, seg.config.hypercolumn_channels(), 1, 1},
               VecX<S>::Zero(std::int64_t(target_c) * seg.config.hypercolumn_channels()));
  init_bias_param(m.params, std::string(kAuxHeadPrefix) + ".b", target_c);
  copy_params_with_prefix(m.params, ae.params, kEncoderPrefix);
  m.params.freeze_prefix(kEncoderPrefix);
  return m;
}

template <class S>
struct RegForwardOut {
  SegForward<S> seg;
  std::optional<Tensor<S>> aux_output;  // decoder logits, or predicted encoder taps
  std::optional<Tensor<S>> aux_target;  // encoder_pred regression target (constant)
};

// Full training-time forward. The auxiliary branch is built only when the
// scheme carries weight: with lambda = 0 the graph is exactly the baseline's.
template <class S>
RegForwardOut<S> regularized_forward(Tape<S>& tape, Session<S>& session,
                                     const RegularizedModel<S>& model, const Tensor<S>& image,
                                     const LabelMap* labels, bool with_aux = true) {
  RegForwardOut<S> out;
  out.seg = segnet_forward(tape, session, model.seg_config, image);
  const bool want_aux =
      with_aux && model.scheme.variant != RegVariant::kNone && model.scheme.lambda != 0.0;
  if (!want_aux) return out;

  if (model.scheme.variant == RegVariant::kDecoderAux) {
    auto code = conv_layer(tape, session, kAuxHeadPrefix, out.seg.penultimate, 1, 0);
    out.aux_output = decoder_forward(tape, session, model.ae_config, code);
  } else {
    if (!labels)
      throw UsageError("regularized_forward: encoder_pred needs ground-truth labels for targets");
    // Targets come from the frozen encoder run on the ground-truth labels;
    // they are constants, so the target pass records nothing on the tape.
    Session<S> frozen(tape, session.store(), /*trainable=*/false);
    const auto onehot = one_hot_labels<S>(*labels, model.ae_config.num_classes);
    const auto enc = encoder_forward(tape, frozen, model.ae_config, onehot);
    auto t1 = enc.conv1_tap;
    auto t3 = enc.conv3_tap;
    const int oh = model.seg_config.input_h, ow = model.seg_config.input_w;
    if (t1.shape().h != oh || t1.shape().w != ow) t1 = upsample_bilinear(tape, t1, oh, ow);
    if (t3.shape().h != oh || t3.shape().w != ow) t3 = upsample_bilinear(tape, t3, oh, ow);
    out.aux_target = concat_channels(tape, {t1, t3});
    out.aux_output = conv_layer(tape, session, kAuxHeadPrefix, out.seg.hypercolumn, 1, 0);
  }
  return out;
}

struct CombinedLossRecord {
  double primary = 0;
  double aux = 0;
  double total = 0;
};

template <class S>
struct CombinedLoss {
  Tensor<S> total;  // scalar tape node
  CombinedLossRecord record;
};

// total = primary + lambda * aux. With lambda = 0 (or no branch) the total
// node IS the primary node, so baseline trajectories reproduce bitwise.
template <class S>
CombinedLoss<S> combined_loss(Tape<S>& tape, const Tensor<S>& primary_logits,
                              const std::optional<Tensor<S>>& aux_output,
                              const std::optional<Tensor<S>>& aux_target, const LabelMap& label,
                              const RegScheme& scheme) {
  CombinedLoss<S> out;
  Tensor<S> primary = softmax_ce_loss(tape, primary_logits, label);
  out.record.primary = double(primary.values()[0]);

  const bool active = scheme.variant != RegVariant::kNone && scheme.lambda != 0.0;
  if (!active) {
    if (aux_output && scheme.variant == RegVariant::kNone)
      throw UsageError("combined_loss: auxiliary output supplied but scheme has no branch");
    out.total = primary;
    out.record.total = out.record.primary;
    return out;
  }
  if (!aux_output) throw UsageError("combined_loss: scheme expects an auxiliary branch output");

  Tensor<S> aux;
  if (scheme.variant == RegVariant::kDecoderAux) {
    if (scheme.aux_loss == AuxLossKind::kCrossEntropy) {
      aux = softmax_ce_loss(tape, *aux_output, label);
    } else {
      // MSE between decoder logits and one-hot targets over non-void pixels.
      const auto onehot = one_hot_labels<S>(label, aux_output->shape().c);
      std::vector<std::uint8_t> mask(label.ids.size());
      for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = label.ids[i] != kVoidId;
      aux = mse_loss(tape, *aux_output, onehot, &mask);
    }
  } else {
    if (!aux_target) throw UsageError("combined_loss: encoder_pred needs the regression target");
    aux = mse_loss(tape, *aux_output, *aux_target);
  }
  out.record.aux = double(aux.values()[0]);
  out.total = add(tape, primary, scale(tape, aux, S(scheme.lambda)));
  out.record.total = double(out.total.values()[0]);
  return out;
}

// Inference-only evaluation against a dataset; needs only seg.* parameters,
// so it works on exported models with no label-model in sight.
template <class S>
EpochLog evaluate_segmenter(const SegNetConfig& cfg, const ParamStore<S>& params,
                            const Dataset& data, int batch_size) {
  ConfusionMatrix conf(cfg.num_classes);
  double loss_sum = 0;
  int batches = 0;
  for (std::size_t at = 0; at < data.samples.size(); at += std::size_t(batch_size)) {
    std::vector<const Tensor<float>*> images;
    std::vector<const LabelMap*> labels;
    for (std::size_t i = at; i < std::min(data.samples.size(), at + std::size_t(batch_size)); ++i) {
      images.push_back(&data.samples[i].image);
      labels.push_back(&data.samples[i].label);
    }
    const LabelMap truth = stack_labels(labels);
    Tensor<S> batch;
    if constexpr (std::is_same_v<S, float>) {
      batch = stack_images(images);
    } else {
      batch = stack_images(images).template cast<S>();
    }
    Tape<S> tape;
    Session<S> session(tape, params, false);
    const auto fwd = segnet_forward(tape, session, cfg, batch);
    loss_sum += double(softmax_ce_loss(tape, fwd.primary_logits, truth).values()[0]);
    conf.accumulate(truth, argmax_labels(fwd.primary_logits));
    ++batches;
  }
  EpochLog log;
  log.split = "val";
  log.primary_loss = batches ? loss_sum / batches : 0.0;
  log.miou = miou(conf).mean;
  return log;
}

// Inference parameters only: everything under seg.*, nothing of the label
// model or the auxiliary head survives.
template <class S>
ParamStore<S> export_inference(const RegularizedModel<S>& model) {
  ParamStore<S> out;
  copy_params_with_prefix(out, model.params, kSegPrefix);
  return out;
}

// Phase-2 training. Epoch logs carry a train row per epoch and a val row
// every schedule.val_every epochs (and always for the final epoch).
template <class S>
std::vector<EpochLog> train_segmenter(
    RegularizedModel<S>& model, const Dataset& train, const Dataset* val,
    const AugmentConfig* augment, const TrainSchedule& schedule, std::uint64_t seed,
    const std::function<void(int, const RegularizedModel<S>&)>& on_epoch = {}) {
  if (train.samples.empty()) throw DataError("train_segmenter: empty dataset");
  if (model.scheme.variant != RegVariant::kNone && !model.params.has("ae.dec.conv1.w") &&
      !model.params.has("ae.enc.conv1.w"))
    throw ConfigError("train_segmenter: scheme needs an attached label model (phase-1 output)");

  AdamState<S> adam;
  std::vector<EpochLog> logs;
  for (int epoch = 0; epoch < schedule.total_epochs(); ++epoch) {
    const auto order = shuffle_indices(int(train.samples.size()), seed, epoch);
    const S lr = S(schedule.lr_at(epoch));
    double primary_sum = 0, aux_sum = 0;
    int steps = 0;
    ConfusionMatrix train_conf(model.seg_config.num_classes);
    for (std::size_t at = 0; at < order.size(); at += std::size_t(schedule.batch_size)) {
      std::vector<Sample> augmented;
      augmented.reserve(std::size_t(schedule.batch_size));
      std::vector<const Tensor<float>*> images;
      std::vector<const LabelMap*> labels;
      for (std::size_t i = at; i < std::min(order.size(), at + std::size_t(schedule.batch_size));
           ++i) {
        const int idx = order[i];
        const Sample& base = train.samples[std::size_t(idx)];
        if (augment) {
          RngStream arng = stream(seed, "aug/e" + std::to_string(epoch) + "/i" +
                                            std::to_string(idx));
          augmented.push_back(random_resized_crop_flip(base, arng, *augment));
        }
        const Sample& use = augment ? augmented.back() : base;
        images.push_back(&use.image);
        labels.push_back(&use.label);
      }
      const LabelMap truth = stack_labels(labels);
      Tensor<S> batch;
      if constexpr (std::is_same_v<S, float>) {
        batch = stack_images(images);
      } else {
        batch = stack_images(images).template cast<S>();
      }

      Tape<S> tape;
      Session<S> session(tape, model.params, GradMode::kTrainableOnly);
      const auto fwd = regularized_forward(tape, session, model, batch, &truth);
      const auto loss = combined_loss(tape, fwd.seg.primary_logits, fwd.aux_output,
                                      fwd.aux_target, truth, model.scheme);
      check_finite_loss(loss.record.total, epoch, steps);
      adam_step(model.params, session.grads(loss.total), adam, lr);

      train_conf.accumulate(truth, argmax_labels(fwd.seg.primary_logits));
      primary_sum += loss.record.primary;
      aux_sum += loss.record.aux;
      ++steps;
    }
    EpochLog tr;
    tr.epoch = epoch;
    tr.split = "train";
    tr.primary_loss = primary_sum / std::max(1, steps);
    tr.aux_loss = aux_sum / std::max(1, steps);
    tr.miou = miou(train_conf).mean;
    logs.push_back(tr);

    const bool last = epoch + 1 == schedule.total_epochs();
    if (val && (last || (schedule.val_every > 0 && (epoch + 1) % schedule.val_every == 0))) {
      EpochLog va = evaluate_segmenter<S>(model.seg_config, model.params, *val,
                                          schedule.batch_size);
      va.epoch = epoch;
      logs.push_back(va);
    }
    if (on_epoch) on_epoch(epoch, model);
  }
  return logs;
}

}  // namespace labelreg
