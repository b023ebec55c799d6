#pragma once

#include <string>
#include <vector>

#include "labelreg/autoencoder.hpp"
#include "labelreg/data.hpp"
#include "labelreg/regularizer.hpp"

namespace labelreg {

// One coarse bottleneck cell of one sample, as a label-space search key.
struct RegionFeature {
  int sample_id = 0;
  int cy = 0, cx = 0;
  std::string origin;  // "encoder_gt" or "cnn_predicted"
  std::vector<float> vec;
};

// Bottleneck features of the encoder run on ground-truth label maps.
std::vector<RegionFeature> extract_region_features(const AutoencoderModel<float>& ae,
                                                   const Dataset& data);

// Bottleneck codes predicted by a decoder_aux CNN's auxiliary head from
// images (the Fig.-style "search from images" variant).
std::vector<RegionFeature> extract_region_features(const RegularizedModel<float>& model,
                                                   const Dataset& data);

struct NnMatch {
  std::size_t index = 0;  // into the db
  double dist = 0;        // Euclidean
};

// Exact top-k search. Ties break on (sample id, cell coords); entries whose
// sample_id equals exclude_sample_id are skipped (pass -1 to keep all).
std::vector<NnMatch> nn_query(const RegionFeature& q, const std::vector<RegionFeature>& db, int k,
                              int exclude_sample_id = -1);

// Majority non-void class over the cell's pixel block (ties to the lowest
// id); -1 when the majority covers less than min_coverage of the block or
// the block is entirely void.
int cell_dominant_class(const LabelMap& label, int cy, int cx, int cells_y, int cells_x,
                        double min_coverage = 0.0);

}  // namespace labelreg
