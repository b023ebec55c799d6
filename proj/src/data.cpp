#include "labelreg/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>

#include "labelreg/ops.hpp"

namespace fs = std::filesystem;

namespace labelreg {

int SyntheticSpec::split_size(const std::string& split) const {
  if (split == "train") return train_size;
  if (split == "val") return val_size;
  throw ConfigError("SyntheticSpec: unknown split '" + split + "' (expected train or val)");
}

std::vector<double> SyntheticSpec::effective_co_occurrence() const {
  const int k = num_classes;
  if (!co_occurrence.empty()) {
    if (int(co_occurrence.size()) != k * k)
      throw ConfigError("SyntheticSpec: co_occurrence must have num_classes^2 entries");
    return co_occurrence;
  }
  // Default prior: the confounded class all but always appears next to class
  // 5 ("grass"), its twin class 2 next to class 4. Context then carries
  // signal that survives the missing texture at validation time.
  std::vector<double> co(std::size_t(k) * k, 0.0);
  auto set = [&](int a, int b, double p) {
    if (a < k && b < k) co[std::size_t(a) * k + b] = p;
  };
  set(3, 5, 0.95);
  set(2, 4, 0.95);
  return co;
}

namespace {

struct Vec2 {
  float x, y;
};

// Object pose: translation, scale, rotation given by a unit direction vector
// (avoids trig so rasterization stays bit-stable across platforms).
struct Pose {
  float cx, cy, scale;
  float ux, uy;  // unit rotation vector
  Vec2 to_local(float px, float py) const {
    const float dx = (px - cx) / scale;
    const float dy = (py - cy) / scale;
    return {dx * ux + dy * uy, -dx * uy + dy * ux};
  }
};

bool in_ellipse(Vec2 p, float cx, float cy, float a, float b) {
  const float dx = (p.x - cx) / a;
  const float dy = (p.y - cy) / b;
  return dx * dx + dy * dy <= 1.0f;
}

bool in_rect(Vec2 p, float cx, float cy, float hw, float hh) {
  return p.x >= cx - hw && p.x <= cx + hw && p.y >= cy - hh && p.y <= cy + hh;
}

bool in_triangle(Vec2 p, Vec2 a, Vec2 b, Vec2 c) {
  auto cross = [](Vec2 o, Vec2 u, Vec2 v) {
    return (u.x - o.x) * (v.y - o.y) - (u.y - o.y) * (v.x - o.x);
  };
  const float d1 = cross(a, b, p);
  const float d2 = cross(b, c, p);
  const float d3 = cross(c, a, p);
  const bool neg = (d1 < 0) || (d2 < 0) || (d3 < 0);
  const bool pos = (d1 > 0) || (d2 > 0) || (d3 > 0);
  return !(neg && pos);
}

// Body + appendage templates in the unit frame, one per class id. Classes 2
// and 3 share the same body on purpose: only their appendages (chimney stub
// vs ears) and scene context tell them apart once the stripes are gone.
bool shape_contains(int cls, Vec2 p) {
  switch (cls) {
    case 1:  // round body with a thin tail
      return in_ellipse(p, 0.15f, 0.0f, 0.85f, 0.62f) ||
             in_triangle(p, {-0.7f, -0.10f}, {-0.7f, 0.10f}, {-1.55f, 0.22f});
    case 2:  // ellipse body with a chimney stub
      return in_ellipse(p, 0.0f, 0.15f, 0.88f, 0.70f) || in_rect(p, 0.42f, -0.72f, 0.16f, 0.34f);
    case 3:  // same ellipse body with two ears (texture-confounded class)
      return in_ellipse(p, 0.0f, 0.15f, 0.88f, 0.70f) ||
             in_triangle(p, {-0.75f, -0.45f}, {-0.18f, -0.55f}, {-0.55f, -1.25f}) ||
             in_triangle(p, {0.18f, -0.55f}, {0.75f, -0.45f}, {0.55f, -1.25f});
    case 4:  // long bar
      return in_rect(p, 0.0f, 0.0f, 1.35f, 0.26f);
    case 5:  // fan on a stem
      return in_triangle(p, {-0.8f, -0.1f}, {0.8f, -0.1f}, {0.0f, -1.2f}) ||
             in_rect(p, 0.0f, 0.35f, 0.14f, 0.5f);
    default:
      return false;
  }
}

float shape_radius(int cls) {
  switch (cls) {
    case 1: return 1.6f;
    case 2: return 1.15f;
    case 3: return 1.3f;
    case 4: return 1.4f;
    case 5: return 1.25f;
    default: return 1.0f;
  }
}

struct ClassColor {
  float r, g, b;
};

ClassColor class_color(int cls) {
  switch (cls) {
    case 1: return {0.75f, 0.30f, 0.25f};
    case 2: return {0.25f, 0.35f, 0.75f};
    case 3: return {0.25f, 0.35f, 0.75f};  // color twin of class 2: only shape,
                                           // context or the train-only stripes
                                           // can separate them
    case 4: return {0.78f, 0.70f, 0.25f};
    case 5: return {0.28f, 0.65f, 0.30f};
    default: return {0.2f, 0.24f, 0.2f};
  }
}

struct PlacedObject {
  int cls;
  Pose pose;
  ClassColor color;
};

Vec2 random_unit(RngStream& rng) {
  for (;;) {
    const float x = float(rng.uniform(-1.0, 1.0));
    const float y = float(rng.uniform(-1.0, 1.0));
    const float n2 = x * x + y * y;
    if (n2 > 0.01f && n2 <= 1.0f) {
      const float inv = 1.0f / std::sqrt(n2);
      return {x * inv, y * inv};
    }
  }
}

constexpr int kMaxObjects = 6;  // every object class can appear at most once as a companion

}  // namespace

Sample generate_synthetic(const SyntheticSpec& spec, const std::string& split, int index) {
  if (spec.num_classes < 2 || spec.num_classes > 6)
    throw ConfigError("SyntheticSpec: num_classes must be in [2,6]");
  const int size = spec.split_size(split);
  if (index < 0 || index >= size)
    throw ConfigError("generate_synthetic: index " + std::to_string(index) +
                      " outside split of size " + std::to_string(size));
  const int H = spec.height, W = spec.width;
  const int K = spec.num_classes;
  RngStream rng = stream(spec.seed, "gen/" + split + "/" + std::to_string(index));

  // Background: base tint plus coarse value noise.
  const float bg_r = float(rng.uniform(0.14, 0.26));
  const float bg_g = float(rng.uniform(0.18, 0.30));
  const float bg_b = float(rng.uniform(0.14, 0.26));
  constexpr int kNoiseGrid = 9;
  float noise[kNoiseGrid * kNoiseGrid];
  for (auto& v : noise) v = float(rng.uniform(-0.05, 0.05));

  const bool stripes_drawn = rng.bernoulli(spec.texture_confound);
  const bool stripes_on = stripes_drawn && split == "train";

  // Object list: a few primaries, then co-occurrence companions. A companion
  // remembers which object it accompanies so it can be placed next to it —
  // context has to sit inside a receptive field to be a usable cue.
  std::vector<int> classes;
  std::vector<int> companion_of;
  const int primaries = 1 + int(rng.below(2));
  for (int i = 0; i < primaries; ++i) {
    classes.push_back(1 + int(rng.below(K - 1)));
    companion_of.push_back(-1);
  }
  const auto co = spec.effective_co_occurrence();
  for (int a = 1; a < K; ++a) {
    int a_at = -1;
    for (std::size_t i = 0; i < classes.size(); ++i)
      if (classes[i] == a) a_at = int(i);
    for (int b = 1; b < K; ++b) {
      const double p = co[std::size_t(a) * K + b];
      if (p <= 0) continue;
      const bool fire = rng.bernoulli(p);  // drawn unconditionally to keep the stream aligned
      const bool b_present = std::find(classes.begin(), classes.end(), b) != classes.end();
      if (a_at >= 0 && !b_present && fire && int(classes.size()) < kMaxObjects) {
        classes.push_back(b);
        companion_of.push_back(a_at);
      }
    }
  }

  std::vector<PlacedObject> objects;
  auto clamp_coord = [](float v, float hi) { return std::min(hi - 8.0f, std::max(8.0f, v)); };
  for (std::size_t oi = 0; oi < classes.size(); ++oi) {
    const int cls = classes[oi];
    const float scale = float(rng.uniform(7.0, 13.0));
    const Vec2 u = random_unit(rng);
    ClassColor col = class_color(cls);
    col.r += float(rng.uniform(-0.05, 0.05));
    col.g += float(rng.uniform(-0.05, 0.05));
    col.b += float(rng.uniform(-0.05, 0.05));
    // Prefer uncluttered placements but never drop an object: after the
    // retries run out the last candidate is used and z-order handles overlap.
    float place_cx = 0, place_cy = 0;
    for (int attempt = 0; attempt < 10; ++attempt) {
      if (companion_of[oi] >= 0 && std::size_t(companion_of[oi]) < objects.size()) {
        // next to the accompanied object
        const auto& host = objects[std::size_t(companion_of[oi])];
        const Vec2 dir = random_unit(rng);
        const float gap = host.pose.scale * shape_radius(host.cls) + scale * shape_radius(cls);
        const float d = gap * float(rng.uniform(0.85, 1.2));
        place_cx = clamp_coord(host.pose.cx + dir.x * d, float(W));
        place_cy = clamp_coord(host.pose.cy + dir.y * d, float(H));
      } else {
        place_cx = float(rng.uniform(10.0, double(W - 10)));
        place_cy = float(rng.uniform(10.0, double(H - 10)));
      }
      bool ok = true;
      for (const auto& o : objects) {
        const float dx = o.pose.cx - place_cx;
        const float dy = o.pose.cy - place_cy;
        const float min_d = 0.8f * (o.pose.scale * shape_radius(o.cls) + scale * shape_radius(cls));
        if (dx * dx + dy * dy < min_d * min_d) {
          ok = false;
          break;
        }
      }
      if (ok) break;
    }
    objects.push_back({cls, Pose{place_cx, place_cy, scale, u.x, u.y}, col});
  }

  // Background smudges: object-colored paint blobs that stay labeled as
  // background in both splits. Color alone is never sufficient evidence.
  struct Smudge {
    Pose pose;
    ClassColor color;
    float aspect;
  };
  std::vector<Smudge> smudges;
  const int num_smudges = 2 + int(rng.below(3));
  for (int i = 0; i < num_smudges; ++i) {
    Smudge sm;
    const int mimic = 1 + int(rng.below(K - 1));
    sm.color = class_color(mimic);
    sm.color.r += float(rng.uniform(-0.06, 0.06));
    sm.color.g += float(rng.uniform(-0.06, 0.06));
    sm.color.b += float(rng.uniform(-0.06, 0.06));
    const Vec2 u = random_unit(rng);
    sm.pose = Pose{float(rng.uniform(6.0, double(W - 6))), float(rng.uniform(6.0, double(H - 6))),
                   float(rng.uniform(3.0, 7.0)), u.x, u.y};
    sm.aspect = float(rng.uniform(0.25, 0.6));
    smudges.push_back(sm);
  }

  Sample s;
  s.label = LabelMap(1, H, W);
  s.image = Tensor<float>({1, 3, H, W});
  float* img = s.image.data();
  const std::int64_t px = std::int64_t(H) * W;

  auto value_noise = [&](int y, int x) {
    const float fy = float(y) * float(kNoiseGrid - 1) / float(H);
    const float fx = float(x) * float(kNoiseGrid - 1) / float(W);
    const int y0 = int(fy), x0 = int(fx);
    const int y1 = std::min(y0 + 1, kNoiseGrid - 1), x1 = std::min(x0 + 1, kNoiseGrid - 1);
    const float ty = fy - float(y0), tx = fx - float(x0);
    const float a = noise[y0 * kNoiseGrid + x0], b = noise[y0 * kNoiseGrid + x1];
    const float c = noise[y1 * kNoiseGrid + x0], d = noise[y1 * kNoiseGrid + x1];
    const float top = a + tx * (b - a), bot = c + tx * (d - c);
    return top + ty * (bot - top);
  };

  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const std::int64_t at = std::int64_t(y) * W + x;
      const float nz = value_noise(y, x);
      float r = bg_r + nz, g = bg_g + nz, b = bg_b + nz;
      int label = 0;
      for (const auto& sm : smudges) {
        const Vec2 local = sm.pose.to_local(float(x) + 0.5f, float(y) + 0.5f);
        if (in_ellipse(local, 0.0f, 0.0f, 1.0f, sm.aspect)) {
          r = sm.color.r;
          g = sm.color.g;
          b = sm.color.b;
        }
      }
      for (const auto& o : objects) {
        const Vec2 local = o.pose.to_local(float(x) + 0.5f, float(y) + 0.5f);
        if (shape_contains(o.cls, local)) {
          label = o.cls;
          r = o.color.r;
          g = o.color.g;
          b = o.color.b;
          if (stripes_on && o.cls == spec.confound_class) {
            const bool band = ((x + y) / 3) % 2 == 0;
            const float f = band ? 0.72f : 1.12f;
            r *= f;
            g *= f;
            b *= f;
          }
        }
      }
      s.label.ids[at] = std::uint8_t(label);
      img[at] = r;
      img[px + at] = g;
      img[2 * px + at] = b;
    }
  }

  // 1px void band on label boundaries, mirroring contour voids in real
  // annotation and exercising void handling everywhere downstream.
  std::vector<std::uint8_t> raw = s.label.ids;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const std::uint8_t v = raw[std::size_t(y) * W + x];
      const bool edge = (x > 0 && raw[std::size_t(y) * W + x - 1] != v) ||
                        (x + 1 < W && raw[std::size_t(y) * W + x + 1] != v) ||
                        (y > 0 && raw[std::size_t(y - 1) * W + x] != v) ||
                        (y + 1 < H && raw[std::size_t(y + 1) * W + x] != v);
      if (edge) s.label.ids[std::size_t(y) * W + x] = std::uint8_t(kVoidId);
    }

  // Quantize to the 1/255 grid so file round-trips reproduce samples exactly.
  for (std::int64_t i = 0; i < 3 * px; ++i) {
    float v = std::min(1.0f, std::max(0.0f, img[i]));
    img[i] = float(int(v * 255.0f + 0.5f)) / 255.0f;
  }
  return s;
}

Dataset materialize_synthetic(const SyntheticSpec& spec, const std::string& split) {
  Dataset ds;
  ds.num_classes = spec.num_classes;
  const int size = spec.split_size(split);
  ds.samples.reserve(size);
  for (int i = 0; i < size; ++i) ds.samples.push_back(generate_synthetic(spec, split, i));
  return ds;
}

CropParams sample_crop(RngStream& rng, const AugmentConfig& cfg, int in_h, int in_w) {
  const double area = double(in_h) * in_w;
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * rng.uniform(cfg.scale_min, cfg.scale_max);
    const double aspect = std::exp(rng.uniform(std::log(cfg.aspect_min), std::log(cfg.aspect_max)));
    const int cw = int(std::lround(std::sqrt(target * aspect)));
    const int ch = int(std::lround(std::sqrt(target / aspect)));
    if (cw < 1 || ch < 1 || cw > in_w || ch > in_h) continue;
    CropParams p;
    p.h = ch;
    p.w = cw;
    p.y = int(rng.below(std::uint64_t(in_h - ch + 1)));
    p.x = int(rng.below(std::uint64_t(in_w - cw + 1)));
    p.flip = rng.bernoulli(cfg.hflip_prob);
    return p;
  }
  CropParams p;  // center-crop fallback
  p.h = std::min(in_h, in_w);
  p.w = p.h;
  p.y = (in_h - p.h) / 2;
  p.x = (in_w - p.w) / 2;
  p.flip = rng.bernoulli(cfg.hflip_prob);
  return p;
}

Sample apply_crop(const Sample& sample, const CropParams& crop, int out_h, int out_w) {
  const auto& is = sample.image.shape();
  if (crop.y < 0 || crop.x < 0 || crop.y + crop.h > is.h || crop.x + crop.w > is.w)
    throw ConfigError("apply_crop: crop outside image bounds");

  Tensor<float> cropped({1, 3, crop.h, crop.w});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < crop.h; ++y)
      std::copy_n(sample.image.data() + sample.image.channel_offset(0, c) +
                      std::int64_t(crop.y + y) * is.w + crop.x,
                  crop.w, cropped.data() + cropped.channel_offset(0, c) + std::int64_t(y) * crop.w);

  Sample out;
  if (crop.h == out_h && crop.w == out_w) {
    out.image = cropped;
  } else {
    Tape<float> scratch;
    out.image = upsample_bilinear(scratch, cropped, out_h, out_w);
  }

  // Labels are categorical: nearest resampling only, no new ids.
  out.label = LabelMap(1, out_h, out_w);
  for (int y = 0; y < out_h; ++y) {
    const int sy = crop.y + std::min(crop.h - 1, int(double(y + 0.5) * crop.h / out_h));
    for (int x = 0; x < out_w; ++x) {
      const int sx = crop.x + std::min(crop.w - 1, int(double(x + 0.5) * crop.w / out_w));
      out.label.at(0, y, x) = sample.label.at(0, sy, sx);
    }
  }
  return out;
}

Sample hflip(const Sample& sample) {
  const auto& is = sample.image.shape();
  Sample out;
  out.image = Tensor<float>(is);
  out.label = LabelMap(1, is.h, is.w);
  for (int c = 0; c < 3; ++c) {
    const float* src = sample.image.data() + sample.image.channel_offset(0, c);
    float* dst = out.image.data() + out.image.channel_offset(0, c);
    for (int y = 0; y < is.h; ++y)
      for (int x = 0; x < is.w; ++x)
        dst[std::int64_t(y) * is.w + x] = src[std::int64_t(y) * is.w + (is.w - 1 - x)];
  }
  for (int y = 0; y < is.h; ++y)
    for (int x = 0; x < is.w; ++x) out.label.at(0, y, x) = sample.label.at(0, y, is.w - 1 - x);
  return out;
}

Sample random_resized_crop_flip(const Sample& sample, RngStream& rng, const AugmentConfig& cfg) {
  const auto& is = sample.image.shape();
  const CropParams crop = sample_crop(rng, cfg, is.h, is.w);
  Sample out = apply_crop(sample, crop, cfg.out_h, cfg.out_w);
  if (crop.flip) out = hflip(out);
  return out;
}

namespace {

void write_binary(const std::string& path, const std::string& header,
                  const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path);
  f << header;
  f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!f) throw DataError("short write to " + path);
}

struct PnmImage {
  int w = 0, h = 0, channels = 0;
  std::vector<std::uint8_t> bytes;
};

PnmImage read_pnm(const std::string& path, const char* want_magic) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path);
  std::string magic;
  f >> magic;
  if (magic != want_magic)
    throw DataError(path + ": malformed header (expected " + want_magic + ", got '" + magic + "')");
  int w = 0, h = 0, maxval = 0;
  f >> w >> h >> maxval;
  if (!f || w <= 0 || h <= 0 || maxval != 255)
    throw DataError(path + ": malformed header (dims/maxval)");
  f.get();  // single whitespace after maxval
  PnmImage img;
  img.w = w;
  img.h = h;
  img.channels = magic == "P6" ? 3 : 1;
  img.bytes.resize(std::size_t(w) * h * img.channels);
  f.read(reinterpret_cast<char*>(img.bytes.data()), std::streamsize(img.bytes.size()));
  if (std::size_t(f.gcount()) != img.bytes.size()) throw DataError(path + ": truncated pixel data");
  return img;
}

std::string index_name(int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06d", index);
  return buf;
}

}  // namespace

void write_sample(const Sample& sample, const std::string& dir, int index) {
  const auto& is = sample.image.shape();
  const std::int64_t px = is.pixels();
  std::vector<std::uint8_t> rgb(std::size_t(3) * px);
  const float* img = sample.image.data();
  for (std::int64_t i = 0; i < px; ++i)
    for (int c = 0; c < 3; ++c) {
      const float v = std::min(1.0f, std::max(0.0f, img[c * px + i]));
      rgb[std::size_t(i) * 3 + c] = std::uint8_t(v * 255.0f + 0.5f);
    }
  const std::string head_dims = std::to_string(is.w) + " " + std::to_string(is.h) + "\n255\n";
  write_binary(dir + "/" + index_name(index) + ".ppm", "P6\n" + head_dims, rgb);
  write_binary(dir + "/" + index_name(index) + ".pgm", "P5\n" + head_dims, sample.label.ids);
}

void write_dataset_dir(const Dataset& ds, const std::string& dir, const std::string& split) {
  fs::create_directories(dir);
  nlohmann::json meta;
  meta["num_classes"] = ds.num_classes;
  if (!ds.samples.empty()) {
    const auto& s0 = ds.samples.front().image.shape();
    meta["resolution"] = {s0.h, s0.w};
  } else {
    meta["resolution"] = {0, 0};
  }
  meta["split"] = split;
  std::ofstream mf(dir + "/meta.json");
  mf << meta.dump(2) << "\n";
  for (std::size_t i = 0; i < ds.samples.size(); ++i)
    write_sample(ds.samples[i], dir, int(i));
}

Dataset load_dataset_dir(const std::string& dir) {
  if (!fs::is_directory(dir)) throw DataError("load_dataset_dir: " + dir + " is not a directory");
  std::ifstream mf(dir + "/meta.json");
  if (!mf) throw DataError("load_dataset_dir: missing " + dir + "/meta.json");
  nlohmann::json meta = nlohmann::json::parse(mf, nullptr, /*allow_exceptions=*/false);
  if (meta.is_discarded() || !meta.contains("num_classes"))
    throw DataError("load_dataset_dir: malformed meta.json in " + dir);
  Dataset ds;
  ds.num_classes = meta["num_classes"].get<int>();

  std::vector<std::string> stems;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".ppm") stems.push_back(e.path().stem().string());
  }
  std::sort(stems.begin(), stems.end());
  if (stems.empty()) throw DataError("load_dataset_dir: no samples in " + dir);

  for (const auto& stem : stems) {
    const std::string ppm = dir + "/" + stem + ".ppm";
    const std::string pgm = dir + "/" + stem + ".pgm";
    if (!fs::exists(pgm)) throw DataError("load_dataset_dir: missing label pair " + pgm);
    PnmImage im = read_pnm(ppm, "P6");
    PnmImage lb = read_pnm(pgm, "P5");
    if (im.w != lb.w || im.h != lb.h)
      throw DataError("load_dataset_dir: image/label dims differ for " + stem);
    Sample s;
    s.image = Tensor<float>({1, 3, im.h, im.w});
    const std::int64_t px = std::int64_t(im.h) * im.w;
    float* img = s.image.data();
    for (std::int64_t i = 0; i < px; ++i)
      for (int c = 0; c < 3; ++c) img[c * px + i] = float(im.bytes[std::size_t(i) * 3 + c]) / 255.0f;
    s.label = LabelMap(1, lb.h, lb.w);
    for (std::int64_t i = 0; i < px; ++i) {
      const int id = lb.bytes[std::size_t(i)];
      if (id != kVoidId && id >= ds.num_classes)
        throw DataError(pgm + ": label id " + std::to_string(id) + " out of range (K=" +
                        std::to_string(ds.num_classes) + ")");
      s.label.ids[std::size_t(i)] = std::uint8_t(id);
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

std::uint64_t sample_digest(const Sample& sample) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&](std::uint8_t b) {
    h ^= b;
    h *= 0x100000001b3ULL;
  };
  const std::int64_t px = sample.image.shape().pixels();
  const float* img = sample.image.data();
  for (std::int64_t i = 0; i < 3 * px; ++i)
    feed(std::uint8_t(std::min(1.0f, std::max(0.0f, img[i])) * 255.0f + 0.5f));
  for (auto b : sample.label.ids) feed(b);
  return h;
}

}  // namespace labelreg
