#include "labelreg/config.hpp"

#include <fstream>
#include <json.hpp>
#include <set>
#include <sstream>

namespace labelreg {

namespace {

using nlohmann::json;

void require_keys(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key()))
      throw ConfigError(where + ": unknown key '" + it.key() + "'");
}

template <class T>
T get_or(const json& j, const std::string& key, T fallback) {
  if (!j.contains(key) || j.at(key).is_null()) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  }
}

SyntheticSpec parse_synthetic(const json& j) {
  require_keys(j,
               {"num_classes", "height", "width", "seed", "train_size", "val_size",
                "texture_confound", "confound_class", "co_occurrence"},
               "dataset.synthetic");
  SyntheticSpec s;
  s.num_classes = get_or(j, "num_classes", s.num_classes);
  s.height = get_or(j, "height", s.height);
  s.width = get_or(j, "width", s.width);
  s.seed = get_or(j, "seed", s.seed);
  s.train_size = get_or(j, "train_size", s.train_size);
  s.val_size = get_or(j, "val_size", s.val_size);
  s.texture_confound = get_or(j, "texture_confound", s.texture_confound);
  s.confound_class = get_or(j, "confound_class", s.confound_class);
  s.co_occurrence = get_or(j, "co_occurrence", s.co_occurrence);
  return s;
}

AugmentConfig parse_augment(const json& j) {
  require_keys(j,
               {"scale_min", "scale_max", "aspect_min", "aspect_max", "out_h", "out_w",
                "hflip_prob"},
               "augment");
  AugmentConfig a;
  a.scale_min = get_or(j, "scale_min", a.scale_min);
  a.scale_max = get_or(j, "scale_max", a.scale_max);
  a.aspect_min = get_or(j, "aspect_min", a.aspect_min);
  a.aspect_max = get_or(j, "aspect_max", a.aspect_max);
  a.out_h = get_or(j, "out_h", a.out_h);
  a.out_w = get_or(j, "out_w", a.out_w);
  a.hflip_prob = get_or(j, "hflip_prob", a.hflip_prob);
  return a;
}

RegScheme parse_scheme(const json& j) {
  require_keys(j, {"variant", "aux_loss", "lambda", "decoder_mode"}, "scheme");
  RegScheme s;
  const std::string variant = get_or<std::string>(j, "variant", "none");
  if (variant == "none")
    s.variant = RegVariant::kNone;
  else if (variant == "decoder_aux")
    s.variant = RegVariant::kDecoderAux;
  else if (variant == "encoder_pred")
    s.variant = RegVariant::kEncoderPred;
  else
    throw ConfigError("scheme.variant: unknown value '" + variant + "'");

  const std::string aux = get_or<std::string>(j, "aux_loss", "cross_entropy");
  if (aux == "cross_entropy")
    s.aux_loss = AuxLossKind::kCrossEntropy;
  else if (aux == "mse")
    s.aux_loss = AuxLossKind::kMse;
  else
    throw ConfigError("scheme.aux_loss: unknown value '" + aux + "'");

  s.lambda = get_or(j, "lambda", s.aux_loss == AuxLossKind::kMse ? 1.0 : 0.5);
  if (s.lambda < 0) throw ConfigError("scheme.lambda: must be non-negative");

  const std::string mode = get_or<std::string>(j, "decoder_mode", "frozen");
  if (mode == "frozen")
    s.decoder_mode = DecoderMode::kFrozen;
  else if (mode == "unfrozen")
    s.decoder_mode = DecoderMode::kUnfrozen;
  else if (mode == "random_init")
    s.decoder_mode = DecoderMode::kRandomInit;
  else
    throw ConfigError("scheme.decoder_mode: unknown value '" + mode + "'");
  return s;
}

TrainSchedule parse_schedule(const json& j) {
  require_keys(j, {"epochs_hi", "epochs_lo", "lr_hi", "lr_lo", "batch_size", "val_every"},
               "schedule");
  TrainSchedule s;
  s.epochs_hi = get_or(j, "epochs_hi", s.epochs_hi);
  s.epochs_lo = get_or(j, "epochs_lo", s.epochs_lo);
  s.lr_hi = get_or(j, "lr_hi", s.lr_hi);
  s.lr_lo = get_or(j, "lr_lo", s.lr_lo);
  s.batch_size = get_or(j, "batch_size", s.batch_size);
  s.val_every = get_or(j, "val_every", s.val_every);
  if (s.epochs_hi < 0 || s.epochs_lo < 0 || s.total_epochs() == 0)
    throw ConfigError("schedule: need a positive epoch count");
  if (s.batch_size <= 0) throw ConfigError("schedule.batch_size must be positive");
  return s;
}

}  // namespace

ExperimentConfig parse_experiment_config(const std::string& json_text) {
  json j = json::parse(json_text, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded()) throw ConfigError("config: malformed JSON");
  require_keys(j,
               {"seed", "dataset", "augment", "autoencoder", "segnet", "scheme", "schedule",
                "ae_checkpoint", "out_dir"},
               "config");
  ExperimentConfig cfg;
  cfg.seed = get_or<std::uint64_t>(j, "seed", 1);

  if (!j.contains("dataset")) throw ConfigError("config: missing 'dataset'");
  const json& d = j.at("dataset");
  require_keys(d, {"synthetic", "dir"}, "dataset");
  if (d.contains("synthetic") == d.contains("dir"))
    throw ConfigError("dataset: exactly one of 'synthetic' or 'dir' must be set");
  if (d.contains("synthetic")) {
    cfg.synthetic = true;
    cfg.dataset_spec = parse_synthetic(d.at("synthetic"));
  } else {
    cfg.synthetic = false;
    cfg.dataset_dir = d.at("dir").get<std::string>();
  }

  if (j.contains("augment") && !j.at("augment").is_null())
    cfg.augment = parse_augment(j.at("augment"));

  if (j.contains("autoencoder") && !j.at("autoencoder").is_null()) {
    const json& a = j.at("autoencoder");
    require_keys(a, {"preset", "stages"}, "autoencoder");
    cfg.ae_preset = get_or<std::string>(a, "preset", cfg.ae_preset);
    cfg.ae_stages = get_or(a, "stages", cfg.ae_stages);
  }

  if (j.contains("segnet") && !j.at("segnet").is_null()) {
    const json& s = j.at("segnet");
    require_keys(s, {"preset", "standardize_taps"}, "segnet");
    cfg.segnet_preset = get_or<std::string>(s, "preset", cfg.segnet_preset);
    cfg.standardize_taps = get_or(s, "standardize_taps", cfg.standardize_taps);
  }

  if (j.contains("scheme") && !j.at("scheme").is_null()) cfg.scheme = parse_scheme(j.at("scheme"));
  if (j.contains("schedule") && !j.at("schedule").is_null())
    cfg.schedule = parse_schedule(j.at("schedule"));
  cfg.ae_checkpoint = get_or<std::string>(j, "ae_checkpoint", "");
  cfg.out_dir = get_or<std::string>(j, "out_dir", cfg.out_dir);
  return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config: cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_experiment_config(ss.str());
}

const char* to_string(RegVariant v) {
  switch (v) {
    case RegVariant::kNone: return "none";
    case RegVariant::kDecoderAux: return "decoder_aux";
    case RegVariant::kEncoderPred: return "encoder_pred";
  }
  return "?";
}
const char* to_string(AuxLossKind k) {
  return k == AuxLossKind::kCrossEntropy ? "cross_entropy" : "mse";
}
const char* to_string(DecoderMode m) {
  switch (m) {
    case DecoderMode::kFrozen: return "frozen";
    case DecoderMode::kUnfrozen: return "unfrozen";
    case DecoderMode::kRandomInit: return "random_init";
  }
  return "?";
}

}  // namespace labelreg
