#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "nsa/common.hpp"
#include "nsa/dataset.hpp"

namespace nsa {

/// SimCLR-style view augmentation. Two independent draws are made per image
/// per training step; rotation_shift additionally produces one quarter-turn
/// rotated view used as a negative-only sample.
struct AugmentationPolicy {
  float crop_scale_min = 0.3f;
  float crop_scale_max = 1.0f;
  float hflip_prob = 0.5f;
  float jitter = 0.4f;  // brightness/contrast amplitude
  float grayscale_prob = 0.2f;
  bool rotation_shift = false;

  void validate() const {
    if (!(crop_scale_min > 0.0f) || crop_scale_min > crop_scale_max ||
        crop_scale_max > 1.0f)
      throw ConfigError("augment: crop scale range must satisfy 0 < min <= max <= 1");
    if (hflip_prob < 0.0f || hflip_prob > 1.0f)
      throw ConfigError("augment: hflip_prob must be in [0,1]");
    if (grayscale_prob < 0.0f || grayscale_prob > 1.0f)
      throw ConfigError("augment: grayscale_prob must be in [0,1]");
    if (jitter < 0.0f || jitter >= 1.0f)
      throw ConfigError("augment: jitter must be in [0,1)");
  }
};

namespace detail {

inline void u8_to_float(std::span<const uint8_t> src, float* dst) {
  for (size_t i = 0; i < src.size(); ++i) dst[i] = float(src[i]) * (1.0f / 255.0f);
}

inline void bilinear_resize(const float* src, int c, int sh, int sw, float* dst,
                            int dh, int dw) {
  float sy = float(sh) / float(dh);
  float sx = float(sw) / float(dw);
  for (int ch = 0; ch < c; ++ch) {
    const float* s = src + int64_t(ch) * sh * sw;
    float* d = dst + int64_t(ch) * dh * dw;
    for (int y = 0; y < dh; ++y) {
      float fy = (float(y) + 0.5f) * sy - 0.5f;
      int y0 = int(std::floor(fy));
      float wy = fy - float(y0);
      int y0c = std::clamp(y0, 0, sh - 1);
      int y1c = std::clamp(y0 + 1, 0, sh - 1);
      for (int x = 0; x < dw; ++x) {
        float fx = (float(x) + 0.5f) * sx - 0.5f;
        int x0 = int(std::floor(fx));
        float wx = fx - float(x0);
        int x0c = std::clamp(x0, 0, sw - 1);
        int x1c = std::clamp(x0 + 1, 0, sw - 1);
        float v00 = s[y0c * sw + x0c], v01 = s[y0c * sw + x1c];
        float v10 = s[y1c * sw + x0c], v11 = s[y1c * sw + x1c];
        d[y * dw + x] = (1 - wy) * ((1 - wx) * v00 + wx * v01) +
                        wy * ((1 - wx) * v10 + wx * v11);
      }
    }
  }
}

}  // namespace detail

/// Applies the augmentation pipeline to one CHW float image. The number and
/// order of RNG draws is fixed regardless of which branches trigger, so the
/// stream is stable under policy changes.
inline void augment_image(const float* src, float* dst, int c, int h, int w,
                          const AugmentationPolicy& pol, Rng& rng) {
  // Random resized crop (area scale, square aspect).
  float area = rng.uniform(pol.crop_scale_min, pol.crop_scale_max);
  float side = std::sqrt(area);
  int ch_px = std::max(1, int(std::lround(side * float(h))));
  int cw_px = std::max(1, int(std::lround(side * float(w))));
  int oy = int(rng.below(int64_t(h - ch_px + 1)));
  int ox = int(rng.below(int64_t(w - cw_px + 1)));
  bool flip = rng.uniform() < double(pol.hflip_prob);
  float brightness = rng.uniform(-pol.jitter, pol.jitter);
  float contrast = rng.uniform(-pol.jitter, pol.jitter);
  bool gray = rng.uniform() < double(pol.grayscale_prob);

  std::vector<float> crop(size_t(c) * ch_px * cw_px);
  for (int cc = 0; cc < c; ++cc)
    for (int y = 0; y < ch_px; ++y)
      for (int x = 0; x < cw_px; ++x)
        crop[size_t((cc * ch_px + y) * cw_px + x)] =
            src[size_t((cc * h + (y + oy)) * w + (x + ox))];
  detail::bilinear_resize(crop.data(), c, ch_px, cw_px, dst, h, w);

  int64_t plane = int64_t(h) * w;
  if (flip) {
    for (int cc = 0; cc < c; ++cc)
      for (int y = 0; y < h; ++y) {
        float* row = dst + cc * plane + int64_t(y) * w;
        std::reverse(row, row + w);
      }
  }
  double mean = 0.0;
  for (int64_t i = 0; i < int64_t(c) * plane; ++i) mean += double(dst[i]);
  mean /= double(int64_t(c) * plane);
  float mu = float(mean);
  for (int64_t i = 0; i < int64_t(c) * plane; ++i) {
    float v = dst[i] + brightness;
    v = (v - mu) * (1.0f + contrast) + mu;
    dst[i] = std::clamp(v, 0.0f, 1.0f);
  }
  if (gray && c == 3) {
    for (int64_t i = 0; i < plane; ++i) {
      float luma = 0.299f * dst[i] + 0.587f * dst[plane + i] +
                   0.114f * dst[2 * plane + i];
      dst[i] = dst[plane + i] = dst[2 * plane + i] = luma;
    }
  }
}

/// Draws the quarter-turn for a shifted negative view: uniform over
/// {0, 90, 180, 270} degrees.
inline int draw_rotation_shift(Rng& rng) { return int(rng.below(4)); }

}  // namespace nsa
