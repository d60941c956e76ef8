#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "bsdg/common.hpp"

// Raster helpers for C-plane float images in [0,1], row-major [C,H,W].
// Everything here is plain (non-differentiable) pixel math; the surrogate
// pipelines run before tensors reach the tape.

namespace bsdg::img {

inline float clamp01(float v) { return std::min(1.0f, std::max(0.0f, v)); }

inline float bilinear_at(const float* plane, std::size_t H, std::size_t W,
                         double ys, double xs) {
  // Zero fill outside the source rectangle.
  if (xs < -1.0 || xs > static_cast<double>(W) || ys < -1.0 ||
      ys > static_cast<double>(H))
    return 0.0f;
  const double x0f = std::floor(xs), y0f = std::floor(ys);
  const long x0 = static_cast<long>(x0f), y0 = static_cast<long>(y0f);
  const double fx = xs - x0f, fy = ys - y0f;
  auto px = [&](long y, long x) -> double {
    if (x < 0 || y < 0 || x >= static_cast<long>(W) || y >= static_cast<long>(H))
      return 0.0;
    return plane[static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)];
  };
  const double top = px(y0, x0) * (1.0 - fx) + px(y0, x0 + 1) * fx;
  const double bot = px(y0 + 1, x0) * (1.0 - fx) + px(y0 + 1, x0 + 1) * fx;
  return static_cast<float>(top * (1.0 - fy) + bot * fy);
}

// Inverse-mapping affine warp about the image center:
//   source = M * (dest - center) + center + offset.
// M == I with zero offset reproduces the input bitwise (the center is a
// dyadic rational, so the coordinate arithmetic is exact).
inline void warp_affine(std::vector<float>& px, std::size_t C, std::size_t H,
                        std::size_t W, double m00, double m01, double m10,
                        double m11, double ox, double oy) {
  const double cx = 0.5 * static_cast<double>(W - 1);
  const double cy = 0.5 * static_cast<double>(H - 1);
  std::vector<float> src = px;
  for (std::size_t c = 0; c < C; ++c) {
    const float* plane = &src[c * H * W];
    float* out = &px[c * H * W];
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const double dx = static_cast<double>(x) - cx;
        const double dy = static_cast<double>(y) - cy;
        const double xs = m00 * dx + m01 * dy + cx + ox;
        const double ys = m10 * dx + m11 * dy + cy + oy;
        out[y * W + x] = bilinear_at(plane, H, W, ys, xs);
      }
  }
}

// Separable Gaussian with clamp-to-edge borders. sigma <= 0 is a no-op.
inline void gaussian_blur(std::vector<float>& px, std::size_t C, std::size_t H,
                          std::size_t W, double sigma) {
  if (!(sigma > 0.0)) return;
  const int radius = std::max(1, static_cast<int>(std::ceil(2.5 * sigma)));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double ksum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * (i / sigma) * (i / sigma));
    k[static_cast<std::size_t>(i + radius)] = v;
    ksum += v;
  }
  for (auto& v : k) v /= ksum;

  std::vector<float> tmp(H * W);
  for (std::size_t c = 0; c < C; ++c) {
    float* plane = &px[c * H * W];
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          long xx = static_cast<long>(x) + i;
          xx = std::clamp<long>(xx, 0, static_cast<long>(W) - 1);
          acc += k[static_cast<std::size_t>(i + radius)] *
                 plane[y * W + static_cast<std::size_t>(xx)];
        }
        tmp[y * W + x] = static_cast<float>(acc);
      }
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          long yy = static_cast<long>(y) + i;
          yy = std::clamp<long>(yy, 0, static_cast<long>(H) - 1);
          acc += k[static_cast<std::size_t>(i + radius)] *
                 tmp[static_cast<std::size_t>(yy) * W + x];
        }
        plane[y * W + x] = static_cast<float>(acc);
      }
  }
}

inline void rgb_to_hsv(float r, float g, float b, float& h, float& s, float& v) {
  const float mx = std::max({r, g, b});
  const float mn = std::min({r, g, b});
  v = mx;
  const float d = mx - mn;
  s = mx > 0.0f ? d / mx : 0.0f;
  if (d <= 0.0f) {
    h = 0.0f;
    return;
  }
  if (mx == r)
    h = (g - b) / d + (g < b ? 6.0f : 0.0f);
  else if (mx == g)
    h = (b - r) / d + 2.0f;
  else
    h = (r - g) / d + 4.0f;
  h /= 6.0f;
}

inline void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b) {
  h = h - std::floor(h);
  const float hh = h * 6.0f;
  const int i = std::min(5, static_cast<int>(hh));
  const float f = hh - static_cast<float>(i);
  const float p = v * (1.0f - s);
  const float q = v * (1.0f - s * f);
  const float t = v * (1.0f - s * (1.0f - f));
  switch (i) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
  }
}

// 256-bin histogram equalization of one plane, blended with the original by
// `strength` in [0,1].
inline void equalize_plane(float* plane, std::size_t n, float strength) {
  if (!(strength > 0.0f) || n == 0) return;
  constexpr int kBins = 256;
  int hist[kBins] = {0};
  for (std::size_t i = 0; i < n; ++i) {
    int b = static_cast<int>(clamp01(plane[i]) * (kBins - 1) + 0.5f);
    hist[b]++;
  }
  float cdf[kBins];
  double run = 0.0;
  for (int b = 0; b < kBins; ++b) {
    run += hist[b];
    cdf[b] = static_cast<float>(run / static_cast<double>(n));
  }
  for (std::size_t i = 0; i < n; ++i) {
    int b = static_cast<int>(clamp01(plane[i]) * (kBins - 1) + 0.5f);
    plane[i] = clamp01((1.0f - strength) * plane[i] + strength * cdf[b]);
  }
}

}  // namespace bsdg::img
