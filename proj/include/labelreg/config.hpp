#pragma once

#include <optional>
#include <string>

#include "labelreg/autoencoder.hpp"
#include "labelreg/data.hpp"
#include "labelreg/regularizer.hpp"
#include "labelreg/segnet.hpp"
#include "labelreg/training.hpp"

namespace labelreg {

// One JSON document fully determining a run. Unknown keys are rejected and
// the original file is echoed into the run's output directory.
struct ExperimentConfig {
  std::uint64_t seed = 1;

  bool synthetic = true;
  SyntheticSpec dataset_spec;   // when synthetic
  std::string dataset_dir;      // when ingesting files
  std::optional<AugmentConfig> augment;

  std::string ae_preset = "32";
  int ae_stages = 3;

  std::string segnet_preset = "hyper_tiny";
  bool standardize_taps = false;

  RegScheme scheme;
  TrainSchedule schedule;

  std::string ae_checkpoint;  // phase-1 artifact consumed by train-seg
  std::string out_dir = "runs/out";

  int dataset_classes() const { return synthetic ? dataset_spec.num_classes : loaded_classes; }
  int input_h() const { return synthetic ? dataset_spec.height : loaded_h; }
  int input_w() const { return synthetic ? dataset_spec.width : loaded_w; }

  AutoencoderConfig autoencoder_config() const {
    return AutoencoderConfig::preset(ae_preset, dataset_classes(), input_h(), input_w(),
                                     ae_stages);
  }
  SegNetConfig segnet_config() const {
    SegNetConfig cfg = segnet_preset_expanded();
    cfg.standardize_taps = standardize_taps;
    return cfg;
  }

  // filled by the harness after probing a dataset directory
  int loaded_classes = 0, loaded_h = 0, loaded_w = 0;

 private:
  SegNetConfig segnet_preset_expanded() const {
    return ::labelreg::segnet_preset(segnet_preset, dataset_classes(), input_h(), input_w());
  }
};

ExperimentConfig parse_experiment_config(const std::string& json_text);
ExperimentConfig load_experiment_config(const std::string& path);

const char* to_string(RegVariant v);
const char* to_string(AuxLossKind k);
const char* to_string(DecoderMode m);

}  // namespace labelreg
