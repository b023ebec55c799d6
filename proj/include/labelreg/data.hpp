#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "labelreg/labels.hpp"
#include "labelreg/rng.hpp"
#include "labelreg/tensor.hpp"

namespace labelreg {

// Seeded synthetic segmentation world: part-structured object classes on a
// noisy background, class co-occurrence priors, and a train-only texture
// confound (a stripe pattern that correlates with one class during training
// and never appears at validation).
struct SyntheticSpec {
  int num_classes = 6;  // background = 0, object classes 1..num_classes-1 (max 6)
  int height = 64;
  int width = 64;
  std::uint64_t seed = 1;
  int train_size = 2000;
  int val_size = 500;
  double texture_confound = 0.9;  // fraction of train images with the distractor texture
  int confound_class = 3;
  // Flattened K*K row-major: co_occurrence[a*K+b] = P(add one object of b | a present).
  // Empty = built-in default prior.
  std::vector<double> co_occurrence;

  int split_size(const std::string& split) const;
  std::vector<double> effective_co_occurrence() const;
};

struct Sample {
  Tensor<float> image;  // (1, 3, h, w), values in [0,1] on the 1/255 grid
  LabelMap label;       // (1, h, w)
};

struct AugmentConfig {
  double scale_min = 0.08;
  double scale_max = 1.0;
  double aspect_min = 3.0 / 4.0;
  double aspect_max = 4.0 / 3.0;
  int out_h = 64;
  int out_w = 64;
  double hflip_prob = 0.5;
};

// Pure function of (spec, split, index): identical arguments produce
// bitwise-identical samples.
Sample generate_synthetic(const SyntheticSpec& spec, const std::string& split, int index);

struct CropParams {
  int y = 0, x = 0, h = 0, w = 0;
  bool flip = false;
};

// Crop-parameter sampling is exposed separately so its range invariants are
// testable; retried up to 10 times, then a center-crop fallback.
CropParams sample_crop(RngStream& rng, const AugmentConfig& cfg, int in_h, int in_w);

// Image is bilinearly resampled, label nearest-resampled, both flipped
// together when the flip fires.
Sample random_resized_crop_flip(const Sample& sample, RngStream& rng, const AugmentConfig& cfg);
Sample apply_crop(const Sample& sample, const CropParams& crop, int out_h, int out_w);
Sample hflip(const Sample& sample);

struct Dataset {
  int num_classes = 0;
  std::vector<Sample> samples;
};

Dataset materialize_synthetic(const SyntheticSpec& spec, const std::string& split);

// Directory layout: NNNNNN.ppm (P6 RGB) + NNNNNN.pgm (P5, pixel = class id,
// 255 = void), plus meta.json {num_classes, resolution, split}.
void write_dataset_dir(const Dataset& ds, const std::string& dir, const std::string& split);
void write_sample(const Sample& sample, const std::string& dir, int index);
Dataset load_dataset_dir(const std::string& dir);

// FNV-1a over the 8-bit quantized image bytes and label bytes; used to pin
// generator reproducibility.
std::uint64_t sample_digest(const Sample& sample);

}  // namespace labelreg
