#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "vitad/tensor.hpp"

namespace vitad {

/// Bilinear resize of [h, w] to [out_h, out_w] with half-pixel centres
/// (corners not aligned), edge-clamped.
template <typename T>
Tensor<T> resize_bilinear_2d(const Tensor<T>& map, std::size_t out_h, std::size_t out_w) {
  const std::size_t h = map.dim(0), w = map.dim(1);
  if (h == out_h && w == out_w) return map;
  Tensor<T> out({out_h, out_w});
  auto axis = [](std::size_t in, std::size_t out_n, std::size_t o, std::size_t& i0, std::size_t& i1,
                 double& frac) {
    double src = (static_cast<double>(o) + 0.5) * static_cast<double>(in) / static_cast<double>(out_n) - 0.5;
    if (src < 0) src = 0;
    i0 = std::min(static_cast<std::size_t>(src), in - 1);
    i1 = std::min(i0 + 1, in - 1);
    frac = src - static_cast<double>(i0);
  };
  for (std::size_t y = 0; y < out_h; ++y) {
    std::size_t y0, y1;
    double fy;
    axis(h, out_h, y, y0, y1, fy);
    for (std::size_t x = 0; x < out_w; ++x) {
      std::size_t x0, x1;
      double fx;
      axis(w, out_w, x, x0, x1, fx);
      const double top = (1 - fx) * map[y0 * w + x0] + fx * map[y0 * w + x1];
      const double bot = (1 - fx) * map[y1 * w + x0] + fx * map[y1 * w + x1];
      out[y * out_w + x] = static_cast<T>((1 - fy) * top + fy * bot);
    }
  }
  return out;
}

// Separable Gaussian blur with reflect-free edge clamping; radius = ceil(4 sigma).
template <typename T>
Tensor<T> gaussian_smooth(const Tensor<T>& map, double sigma) {
  if (!(sigma > 0)) return map;
  const std::size_t h = map.dim(0), w = map.dim(1);
  const int r = static_cast<int>(std::ceil(4 * sigma));
  std::vector<double> k(2 * static_cast<std::size_t>(r) + 1);
  double ks = 0;
  for (int i = -r; i <= r; ++i) ks += k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= ks;
  auto clampi = [](long v, std::size_t n) { return static_cast<std::size_t>(std::clamp<long>(v, 0, static_cast<long>(n) - 1)); };
  std::vector<double> tmp(h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double s = 0;
      for (int i = -r; i <= r; ++i) s += k[static_cast<std::size_t>(i + r)] * map[y * w + clampi(static_cast<long>(x) + i, w)];
      tmp[y * w + x] = s;
    }
  Tensor<T> out({h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double s = 0;
      for (int i = -r; i <= r; ++i) s += k[static_cast<std::size_t>(i + r)] * tmp[clampi(static_cast<long>(y) + i, h) * w + x];
      out[y * w + x] = static_cast<T>(s);
    }
  return out;
}

/// Nearest-neighbour resize of [h, w] (used for masks, which must stay binary).
template <typename T>
Tensor<T> resize_nearest_2d(const Tensor<T>& map, std::size_t out_h, std::size_t out_w) {
  const std::size_t h = map.dim(0), w = map.dim(1);
  if (h == out_h && w == out_w) return map;
  Tensor<T> out({out_h, out_w});
  for (std::size_t y = 0; y < out_h; ++y) {
    const std::size_t sy = std::min(h - 1, y * h / out_h);
    for (std::size_t x = 0; x < out_w; ++x) out[y * out_w + x] = map[sy * w + std::min(w - 1, x * w / out_w)];
  }
  return out;
}

/// Per-channel bilinear resize of a [C, H, W] image.
template <typename T>
Tensor<T> resize_image_bilinear(const Tensor<T>& image, std::size_t out_h, std::size_t out_w) {
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (h == out_h && w == out_w) return image;
  Tensor<T> out({c, out_h, out_w});
  for (std::size_t ch = 0; ch < c; ++ch) {
    Tensor<T> plane({h, w}, std::vector<T>(image.raw() + ch * h * w, image.raw() + (ch + 1) * h * w));
    auto r = resize_bilinear_2d(plane, out_h, out_w);
    std::copy(r.data().begin(), r.data().end(), out.raw() + ch * out_h * out_w);
  }
  return out;
}

}  // namespace vitad
