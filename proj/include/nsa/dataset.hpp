#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "nsa/common.hpp"

namespace nsa {

/// Dense u8 image dataset, pixels in [N,C,H,W] row-major order.
struct ImageDataset {
  std::string name;
  int64_t count = 0;
  int channels = 0, height = 0, width = 0;
  int num_classes = 0;
  std::vector<uint8_t> pixels;
  std::vector<uint16_t> labels;

  int64_t image_size() const { return int64_t(channels) * height * width; }

  std::span<const uint8_t> image(int64_t i) const {
    return {pixels.data() + i * image_size(), size_t(image_size())};
  }
  std::span<uint8_t> image(int64_t i) {
    return {pixels.data() + i * image_size(), size_t(image_size())};
  }

  void validate() const {
    if (height < 8 || width < 8)
      throw ConfigError("dataset images must be at least 8x8, got " +
                        std::to_string(height) + "x" + std::to_string(width));
    if (int64_t(pixels.size()) != count * image_size())
      throw ConfigError("dataset pixel buffer size mismatch");
    if (int64_t(labels.size()) != count)
      throw ConfigError("dataset label count mismatch");
    for (uint16_t l : labels)
      if (int(l) >= num_classes)
        throw ConfigError("dataset label " + std::to_string(l) +
                          " >= class count " + std::to_string(num_classes));
  }

  std::string content_hash() const {
    uint64_t h = fnv1a64(pixels.data(), pixels.size());
    h = fnv1a64(labels.data(), labels.size() * sizeof(uint16_t), h);
    return hash_hex(h);
  }

  // NSAD: magic, version u32, N u64, C/H/W u16, class_count u16,
  // pixel block u8, labels u16; everything little-endian.
  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open " + path + " for writing");
    os.write("NSAD", 4);
    detail::write_le<uint32_t>(os, 1);
    detail::write_le<uint64_t>(os, uint64_t(count));
    detail::write_le<uint16_t>(os, uint16_t(channels));
    detail::write_le<uint16_t>(os, uint16_t(height));
    detail::write_le<uint16_t>(os, uint16_t(width));
    detail::write_le<uint16_t>(os, uint16_t(num_classes));
    os.write(reinterpret_cast<const char*>(pixels.data()),
             std::streamsize(pixels.size()));
    for (uint16_t l : labels) detail::write_le<uint16_t>(os, l);
    if (!os) throw Error("short write to " + path);
  }

  static ImageDataset load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open " + path);
    int64_t off = 0;
    char magic[4];
    detail::read_exact(is, magic, 4, off, "magic");
    if (std::string(magic, 4) != "NSAD")
      throw FormatError("bad magic, expected NSAD", 0);
    uint32_t version = detail::read_le<uint32_t>(is, off, "version");
    if (version != 1)
      throw FormatError("unsupported NSAD version " + std::to_string(version), 4);
    ImageDataset ds;
    ds.count = int64_t(detail::read_le<uint64_t>(is, off, "count"));
    ds.channels = detail::read_le<uint16_t>(is, off, "channels");
    ds.height = detail::read_le<uint16_t>(is, off, "height");
    ds.width = detail::read_le<uint16_t>(is, off, "width");
    ds.num_classes = detail::read_le<uint16_t>(is, off, "class count");
    ds.pixels.resize(size_t(ds.count * ds.image_size()));
    detail::read_exact(is, ds.pixels.data(), ds.pixels.size(), off, "pixels");
    ds.labels.resize(size_t(ds.count));
    for (auto& l : ds.labels) l = detail::read_le<uint16_t>(is, off, "labels");
    ds.validate();
    return ds;
  }
};

enum class SynthKind { Blobs, Textures, Rotmix };

inline std::string synth_kind_name(SynthKind k) {
  switch (k) {
    case SynthKind::Blobs: return "blobs";
    case SynthKind::Textures: return "textures";
    case SynthKind::Rotmix: return "rotmix";
  }
  return "?";
}

inline SynthKind parse_synth_kind(const std::string& s) {
  if (s == "blobs") return SynthKind::Blobs;
  if (s == "textures") return SynthKind::Textures;
  if (s == "rotmix") return SynthKind::Rotmix;
  throw ConfigError("unknown synthetic dataset kind: " + s);
}

namespace detail {

inline uint8_t quantize(float v) {
  float c = std::clamp(v, 0.0f, 1.0f);
  return uint8_t(std::lround(c * 255.0f));
}

// Distinct hue per class, full saturation.
inline void class_color(int k, int classes, float rgb[3]) {
  float h = 6.0f * float(k) / float(std::max(classes, 1));
  int i = int(h) % 6;
  float f = h - std::floor(h);
  switch (i) {
    case 0: rgb[0] = 1; rgb[1] = f; rgb[2] = 0; break;
    case 1: rgb[0] = 1 - f; rgb[1] = 1; rgb[2] = 0; break;
    case 2: rgb[0] = 0; rgb[1] = 1; rgb[2] = f; break;
    case 3: rgb[0] = 0; rgb[1] = 1 - f; rgb[2] = 1; break;
    case 4: rgb[0] = f; rgb[1] = 0; rgb[2] = 1; break;
    default: rgb[0] = 1; rgb[1] = 0; rgb[2] = 1 - f; break;
  }
}

// Quarter-turn rotation of a CHW float image (counter-clockwise).
inline void rot90_float(const float* src, float* dst, int c, int h, int w,
                        int quarter_turns) {
  int q = ((quarter_turns % 4) + 4) % 4;
  for (int ch = 0; ch < c; ++ch) {
    const float* s = src + int64_t(ch) * h * w;
    float* d = dst + int64_t(ch) * h * w;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        int sy = y, sx = x;
        switch (q) {
          case 0: break;
          case 1: sy = x; sx = w - 1 - y; break;          // 90 CCW
          case 2: sy = h - 1 - y; sx = w - 1 - x; break;  // 180
          default: sy = h - 1 - x; sx = y; break;         // 270
        }
        d[y * w + x] = s[sy * w + sx];
      }
  }
}

inline void blob_image(std::vector<float>& img, int size, int cls, int classes,
                       Rng& rng) {
  float rgb[3];
  class_color(cls, classes, rgb);
  double ang = 2.0 * std::numbers::pi * double(cls) / double(classes);
  float cx = 0.5f + 0.27f * float(std::cos(ang)) + rng.uniform(-0.08f, 0.08f);
  float cy = 0.5f + 0.27f * float(std::sin(ang)) + rng.uniform(-0.08f, 0.08f);
  float radius = 0.18f * (1.0f + rng.uniform(-0.35f, 0.35f));
  float gain = 0.75f + rng.uniform(-0.15f, 0.15f);
  // Per-sample background: base level plus a random linear gradient.
  float bg = 0.18f + rng.uniform(-0.08f, 0.08f);
  float gx = rng.uniform(-0.25f, 0.25f), gy = rng.uniform(-0.25f, 0.25f);
  // Gray distractor blob at a random spot.
  float dx = rng.uniform(0.15f, 0.85f), dy = rng.uniform(0.15f, 0.85f);
  float dr = 0.10f * (1.0f + rng.uniform(-0.3f, 0.3f));
  float dg = rng.uniform(0.1f, 0.45f);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      float u = (float(x) + 0.5f) / float(size);
      float v = (float(y) + 0.5f) / float(size);
      float fx = u - cx, fy = v - cy;
      float e = std::exp(-(fx * fx + fy * fy) / (2.0f * radius * radius));
      float ddx = u - dx, ddy = v - dy;
      float de = dg * std::exp(-(ddx * ddx + ddy * ddy) / (2.0f * dr * dr));
      float base = bg + gx * (u - 0.5f) + gy * (v - 0.5f) + de;
      float noise = 0.05f * float(rng.normal());
      for (int ch = 0; ch < 3; ++ch)
        img[size_t((ch * size + y) * size + x)] =
            base + gain * rgb[ch] * e + noise;
    }
}

inline void texture_image(std::vector<float>& img, int size, int cls,
                          int classes, Rng& rng) {
  float rgb[3];
  class_color(cls, classes, rgb);
  double theta = std::numbers::pi * double(cls) / double(classes);
  float freq = 3.0f + rng.uniform(0.0f, 1.0f);
  float phase = rng.uniform(0.0f, float(2.0 * std::numbers::pi));
  float cth = float(std::cos(theta)), sth = float(std::sin(theta));
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      float u = (float(x) + 0.5f) / float(size);
      float v = (float(y) + 0.5f) / float(size);
      float stripe =
          0.5f + 0.45f * std::sin(2.0f * float(std::numbers::pi) * freq *
                                      (u * cth + v * sth) +
                                  phase);
      float noise = 0.04f * float(rng.normal());
      for (int ch = 0; ch < 3; ++ch)
        img[size_t((ch * size + y) * size + x)] =
            stripe * (0.4f + 0.6f * rgb[ch]) + noise;
    }
}

// Canonical rotation-sensitive glyph: off-center blob plus a top bar. The
// class identity is a quarter-turn of this canonical form, so rotating a
// class-k image by 90 degrees lands exactly on class (k+1) mod 4.
inline void rotmix_canonical(std::vector<float>& img, int size, int variant,
                             int variants, Rng& rng) {
  float rgb[3];
  class_color(variant, std::max(variants, 1), rgb);
  float cx = 0.30f + rng.uniform(-0.04f, 0.04f);
  float cy = 0.32f + rng.uniform(-0.04f, 0.04f);
  float radius = 0.16f * (1.0f + rng.uniform(-0.2f, 0.2f));
  float bar_v = 0.85f + rng.uniform(-0.1f, 0.1f);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      float fx = (float(x) + 0.5f) / float(size) - cx;
      float fy = (float(y) + 0.5f) / float(size) - cy;
      float e = std::exp(-(fx * fx + fy * fy) / (2.0f * radius * radius));
      float bar = (y < size / 6) ? bar_v : 0.0f;
      float noise = 0.04f * float(rng.normal());
      for (int ch = 0; ch < 3; ++ch)
        img[size_t((ch * size + y) * size + x)] =
            0.12f + 0.8f * rgb[ch] * e + bar * 0.5f + noise;
    }
}

}  // namespace detail

/// Deterministic procedural datasets. `blobs`: colored Gaussian blobs on a
/// class-specific position (linearly separable). `textures`: oriented stripe
/// patterns. `rotmix`: rotation-sensitive glyphs whose classes are quarter
/// turns of one canonical form, so 90-degree rotations collide with another
/// class by construction.
inline ImageDataset synth_dataset(SynthKind kind, int classes, int n_per_class,
                                  int image_size, uint64_t seed) {
  if (classes < 2) throw ConfigError("synth_dataset requires >= 2 classes");
  if (image_size < 8) throw ConfigError("synth_dataset requires image_size >= 8");
  if (kind == SynthKind::Rotmix && classes % 4 != 0 && classes != 4)
    throw ConfigError("rotmix requires a multiple of 4 classes");
  ImageDataset ds;
  ds.name = synth_kind_name(kind);
  ds.channels = 3;
  ds.height = ds.width = image_size;
  ds.num_classes = classes;
  ds.count = int64_t(classes) * n_per_class;
  ds.pixels.resize(size_t(ds.count * ds.image_size()));
  ds.labels.resize(size_t(ds.count));

  std::vector<float> img(size_t(3 * image_size * image_size));
  std::vector<float> rotated(img.size());
  int64_t idx = 0;
  for (int cls = 0; cls < classes; ++cls) {
    for (int i = 0; i < n_per_class; ++i, ++idx) {
      switch (kind) {
        case SynthKind::Blobs: {
          Rng rng(Rng::mix(seed, uint64_t(cls), uint64_t(i)));
          detail::blob_image(img, image_size, cls, classes, rng);
          break;
        }
        case SynthKind::Textures: {
          Rng rng(Rng::mix(seed, uint64_t(cls), uint64_t(i)));
          detail::texture_image(img, image_size, cls, classes, rng);
          break;
        }
        case SynthKind::Rotmix: {
          // Same canonical draw for every rotation class of a variant, so
          // the cross-class rotation collision is exact.
          int variant = cls / 4, rot = cls % 4;
          Rng rng(Rng::mix(seed, uint64_t(variant), uint64_t(i)));
          detail::rotmix_canonical(img, image_size, variant,
                                   std::max(classes / 4, 1), rng);
          detail::rot90_float(img.data(), rotated.data(), 3, image_size,
                              image_size, rot);
          std::swap(img, rotated);
          break;
        }
      }
      uint8_t* dst = ds.pixels.data() + idx * ds.image_size();
      for (size_t p = 0; p < img.size(); ++p) dst[p] = detail::quantize(img[p]);
      ds.labels[size_t(idx)] = uint16_t(cls);
    }
  }
  return ds;
}

}  // namespace nsa
