#include "labelreg/segnet.hpp"

#include <numeric>

namespace labelreg {

void SegNetConfig::validate() const {
  if (num_classes < 2) throw ConfigError("SegNetConfig: need at least 2 classes");
  if (family == SegFamily::kPlain) {
    if (stages.empty()) throw ConfigError("SegNetConfig: no stages");
    bool any_tap = false;
    for (const auto& st : stages) {
      if (st.convs.empty()) throw ConfigError("SegNetConfig: stage without convs");
      any_tap = any_tap || st.tap;
    }
    if (!any_tap) throw ConfigError("SegNetConfig: at least one stage must tap the hypercolumn");
  } else {
    if (stem.empty() || blocks.empty()) throw ConfigError("SegNetConfig: dense preset needs a stem and blocks");
    for (const auto& b : blocks)
      if (b.num_units < 1 || b.growth_rate < 1)
        throw ConfigError("SegNetConfig: dense block units and growth must be positive");
  }
  const int div = downsample_factor();
  if (input_h % div != 0 || input_w % div != 0)
    throw ConfigError("SegNetConfig: input " + std::to_string(input_h) + "x" +
                      std::to_string(input_w) + " incompatible with stage strides (needs multiple of " +
                      std::to_string(div) + ")");
}

int SegNetConfig::downsample_factor() const {
  int div = 1;
  if (family == SegFamily::kPlain) {
    for (const auto& st : stages) {
      for (const auto& c : st.convs) div *= c.stride;
      if (st.pool_after) div *= 2;
    }
  } else {
    for (const auto& c : stem) div *= c.stride;
    if (stem_pool) div *= stem_pool_stride;
    div *= 1 << (int(blocks.size()) - 1);  // one transition pool between consecutive blocks
  }
  return div;
}

std::vector<int> SegNetConfig::dense_block_out_channels() const {
  std::vector<int> out;
  if (family != SegFamily::kDense) return out;
  int ch = stem.back().out_c;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    ch += blocks[i].num_units * blocks[i].growth_rate;
    out.push_back(ch);
    if (i + 1 < blocks.size()) ch /= 2;
  }
  return out;
}

std::vector<int> SegNetConfig::tap_channels() const {
  std::vector<int> out;
  if (family == SegFamily::kPlain) {
    for (const auto& st : stages)
      if (st.tap) out.push_back(st.convs.back().out_c);
  } else {
    out = dense_block_out_channels();
  }
  return out;
}

std::vector<int> SegNetConfig::tap_divisors() const {
  std::vector<int> out;
  int div = 1;
  if (family == SegFamily::kPlain) {
    for (const auto& st : stages) {
      for (const auto& c : st.convs) div *= c.stride;
      if (st.tap) out.push_back(div);
      if (st.pool_after) div *= 2;
    }
  } else {
    for (const auto& c : stem) div *= c.stride;
    if (stem_pool) div *= stem_pool_stride;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      out.push_back(div);
      div *= 2;
    }
  }
  return out;
}

int SegNetConfig::hypercolumn_channels() const {
  const auto ch = tap_channels();
  return std::accumulate(ch.begin(), ch.end(), 0);
}

TensorShape SegNetConfig::penultimate_shape(int batch) const {
  const int div = downsample_factor();
  int c = 0;
  if (family == SegFamily::kPlain) {
    c = stages.back().convs.back().out_c;
  } else {
    c = dense_block_out_channels().back();
  }
  return {batch, c, input_h / div, input_w / div};
}

SegNetConfig segnet_preset(const std::string& name, int num_classes, int input_h, int input_w) {
  SegNetConfig cfg;
  cfg.preset = name;
  cfg.num_classes = num_classes;
  cfg.input_h = input_h;
  cfg.input_w = input_w;
  auto plain_stage = [](std::vector<int> widths, bool pool) {
    PlainStage st;
    for (int w : widths) st.convs.push_back({w, 3, 1, 1});
    st.pool_after = pool;
    st.tap = true;
    return st;
  };
  if (name == "hyper_tiny") {
    cfg.family = SegFamily::kPlain;
    cfg.stages = {plain_stage({16}, true), plain_stage({32}, true), plain_stage({64}, true),
                  plain_stage({64}, false)};
  } else if (name == "vgg16_hc") {
    cfg.family = SegFamily::kPlain;
    cfg.stages = {plain_stage({64, 64}, true), plain_stage({128, 128}, true),
                  plain_stage({256, 256, 256}, true), plain_stage({512, 512, 512}, true),
                  plain_stage({512, 512, 512}, true)};
  } else if (name == "mini_densenet") {
    cfg.family = SegFamily::kDense;
    cfg.stem = {{16, 3, 1, 1}};
    cfg.stem_pool = false;
    cfg.blocks = {{2, 12}, {3, 12}, {3, 12}, {3, 12}};
  } else if (name == "densenet67_hc") {
    cfg.family = SegFamily::kDense;
    cfg.stem = {{96, 3, 2, 1}, {96, 3, 1, 1}, {96, 3, 1, 1}};
    cfg.stem_pool = true;
    cfg.blocks = {{6, 48}, {8, 48}, {8, 48}, {8, 48}};
  } else if (name == "densenet121_hc") {
    cfg.family = SegFamily::kDense;
    cfg.stem = {{64, 7, 2, 3}};
    cfg.stem_pool = true;
    cfg.blocks = {{6, 32}, {12, 32}, {24, 32}, {16, 32}};
  } else {
    throw ConfigError("segnet_preset: unknown preset '" + name + "'");
  }
  cfg.validate();
  return cfg;
}

}  // namespace labelreg
