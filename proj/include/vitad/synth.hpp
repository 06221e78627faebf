#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "vitad/dataset.hpp"
#include "vitad/rng.hpp"

namespace vitad {

enum class DefectType { patch_swap, intensity_blob, scratch_line };

inline const char* to_string(DefectType d) {
  switch (d) {
    case DefectType::patch_swap: return "patch_swap";
    case DefectType::intensity_blob: return "intensity_blob";
    case DefectType::scratch_line: return "scratch_line";
  }
  return "?";
}

inline DefectType parse_defect_type(const std::string& s) {
  for (auto d : {DefectType::patch_swap, DefectType::intensity_blob, DefectType::scratch_line})
    if (s == to_string(d)) return d;
  throw ConfigError("unknown defect type: " + s);
}

/// Procedural texture of one class: an oriented sinusoid blended with value
/// noise, mapped between two colours.
struct TextureFamily {
  double angle = 0;        // radians
  double frequency = 4;    // cycles per image side
  int noise_octaves = 1;
  double noise_amplitude = 0.15;
  std::array<double, 3> color_a{0.2, 0.2, 0.2};
  std::array<double, 3> color_b{0.8, 0.8, 0.8};
};

struct SynthConfig {
  int num_classes = 4;
  int train_per_class = 20;
  int test_normal_per_class = 5;
  int test_anomaly_per_class = 5;
  int image_size = 64;
  std::vector<DefectType> defect_types{DefectType::patch_swap, DefectType::intensity_blob,
                                       DefectType::scratch_line};
  std::uint64_t seed = 0;
  double min_defect_fraction = 0.005;
  double max_defect_fraction = 0.10;

  void validate() const {
    if (num_classes < 1 || train_per_class < 1 || test_normal_per_class < 1 || test_anomaly_per_class < 1)
      throw ConfigError("synth: all counts must be >= 1");
    if (image_size < 16) throw ConfigError("synth: image_size must be >= 16");
    if (defect_types.empty()) throw ConfigError("synth: at least one defect type is required");
    if (!(min_defect_fraction > 0 && min_defect_fraction < max_defect_fraction && max_defect_fraction <= 0.25))
      throw ConfigError("synth: invalid defect area bounds");
  }
};

inline std::string synth_class_name(int k) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "class_%c", static_cast<char>('a' + k % 26));
  return k < 26 ? std::string(buf) : buf + std::to_string(k / 26);
}

/// Texture parameters of class k. Frequencies sit in disjoint bands.
inline TextureFamily synth_texture(const SynthConfig& cfg, int k) {
  Rng rng(hash_combine(cfg.seed, 0x7e57u + static_cast<std::uint64_t>(k)));
  TextureFamily t;
  t.angle = std::numbers::pi * (static_cast<double>(k) / cfg.num_classes + rng.uniform(0.0, 0.08));
  t.frequency = 2.5 + 2.5 * k + rng.uniform(0.0, 1.0);
  t.noise_octaves = 1 + k % 3;
  t.noise_amplitude = 0.12 + 0.06 * rng.uniform();
  for (std::size_t c = 0; c < 3; ++c) {
    t.color_a[c] = rng.uniform(0.05, 0.45);
    t.color_b[c] = rng.uniform(0.55, 0.95);
  }
  return t;
}

/// Normal [3, S, S] image in [0, 1] for one class; `image_seed` draws the
/// per-image phase, orientation jitter and noise lattice.
inline Tensor<float> render_texture(const TextureFamily& tex, int size, std::uint64_t image_seed) {
  Rng rng(image_seed);
  const double phase = rng.uniform(0.0, 2 * std::numbers::pi);
  const double angle = tex.angle + rng.uniform(-0.05, 0.05);
  const double freq = tex.frequency * rng.uniform(0.97, 1.03);
  const auto s = static_cast<std::size_t>(size);
  std::vector<double> noise(s * s, 0.0);
  double amp = 1.0, norm = 0.0;
  for (int o = 0; o < tex.noise_octaves; ++o) {
    const std::size_t cells = 4u << o;
    std::vector<double> lattice((cells + 1) * (cells + 1));
    for (auto& v : lattice) v = rng.uniform(-1.0, 1.0);
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x) {
        const double fx = static_cast<double>(x) * cells / size, fy = static_cast<double>(y) * cells / size;
        const auto ix = static_cast<std::size_t>(fx), iy = static_cast<std::size_t>(fy);
        double tx = fx - ix, ty = fy - iy;
        tx = tx * tx * (3 - 2 * tx);
        ty = ty * ty * (3 - 2 * ty);
        auto at = [&](std::size_t a, std::size_t b) { return lattice[b * (cells + 1) + a]; };
        const double top = at(ix, iy) * (1 - tx) + at(ix + 1, iy) * tx;
        const double bot = at(ix, iy + 1) * (1 - tx) + at(ix + 1, iy + 1) * tx;
        noise[y * s + x] += amp * (top * (1 - ty) + bot * ty);
      }
    norm += amp;
    amp *= 0.5;
  }
  Tensor<float> img({3, s, s});
  const double ca = std::cos(angle), sa = std::sin(angle);
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x) {
      const double u = (static_cast<double>(x) * ca + static_cast<double>(y) * sa) / size;
      double v = 0.5 + 0.3 * std::sin(2 * std::numbers::pi * freq * u + phase) +
                 tex.noise_amplitude * noise[y * s + x] / norm;
      v = std::clamp(v, 0.0, 1.0);
      for (std::size_t c = 0; c < 3; ++c)
        img[(c * s + y) * s + x] = static_cast<float>(tex.color_a[c] * (1 - v) + tex.color_b[c] * v);
    }
  return img;
}

/// Applies one defect in place and returns its binary [S, S] mask. Only
/// pixels inside the mask are modified.
inline Tensor<float> inject_defect(Tensor<float>& img, DefectType type, Rng& rng,
                                   double min_fraction, double max_fraction) {
  const std::size_t s = img.dim(1);
  const double sz = static_cast<double>(s);
  const double area = sz * sz;
  for (int attempt = 0; attempt < 1000; ++attempt) {
    Tensor<float> mask({s, s});
    Tensor<float> out = img;
    switch (type) {
      case DefectType::intensity_blob: {
        const double rx = rng.uniform(sz / 20, sz / 7), ry = rng.uniform(sz / 20, sz / 7);
        const double cx = rng.uniform(rx, sz - rx), cy = rng.uniform(ry, sz - ry);
        const double delta = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.35, 0.5);
        for (std::size_t y = 0; y < s; ++y)
          for (std::size_t x = 0; x < s; ++x) {
            const double dx = (x + 0.5 - cx) / rx, dy = (y + 0.5 - cy) / ry;
            if (dx * dx + dy * dy > 1) continue;
            mask[y * s + x] = 1;
            for (std::size_t c = 0; c < 3; ++c) {
              float& p = out[(c * s + y) * s + x];
              p = static_cast<float>(std::clamp(p + delta, 0.0, 1.0));
            }
          }
        break;
      }
      case DefectType::scratch_line: {
        const double len = rng.uniform(sz / 4, sz / 2);
        const double a = rng.uniform(0.0, std::numbers::pi);
        const double x0 = rng.uniform(2, sz - 2), y0 = rng.uniform(2, sz - 2);
        const double x1 = x0 + len * std::cos(a), y1 = y0 + len * std::sin(a);
        const double half = rng.uniform(0.8, 1.5);
        const float shade = rng.uniform() < 0.5 ? 0.03f : 0.97f;
        for (std::size_t y = 0; y < s; ++y)
          for (std::size_t x = 0; x < s; ++x) {
            const double px = x + 0.5, py = y + 0.5;
            const double vx = x1 - x0, vy = y1 - y0;
            const double t = std::clamp(((px - x0) * vx + (py - y0) * vy) / (vx * vx + vy * vy), 0.0, 1.0);
            const double ddx = px - (x0 + t * vx), ddy = py - (y0 + t * vy);
            if (ddx * ddx + ddy * ddy > half * half) continue;
            mask[y * s + x] = 1;
            for (std::size_t c = 0; c < 3; ++c) out[(c * s + y) * s + x] = shade;
          }
        break;
      }
      case DefectType::patch_swap: {
        // Two squares exchange content, each transposed on the way.
        const auto side = static_cast<std::size_t>(rng.uniform(sz / 8, sz / 5));
        const std::size_t ax = rng.below(s - side), ay = rng.below(s - side);
        const std::size_t bx = rng.below(s - side), by = rng.below(s - side);
        const bool overlap = ax < bx + side && bx < ax + side && ay < by + side && by < ay + side;
        if (overlap) continue;
        for (std::size_t c = 0; c < 3; ++c)
          for (std::size_t i = 0; i < side; ++i)
            for (std::size_t j = 0; j < side; ++j) {
              out[(c * s + ay + i) * s + ax + j] = img[(c * s + by + j) * s + bx + i];
              out[(c * s + by + i) * s + bx + j] = img[(c * s + ay + j) * s + ax + i];
            }
        for (std::size_t i = 0; i < side; ++i)
          for (std::size_t j = 0; j < side; ++j) {
            mask[(ay + i) * s + ax + j] = 1;
            mask[(by + i) * s + bx + j] = 1;
          }
        break;
      }
    }
    const double frac = mask.sum() / area;
    if (frac < min_fraction || frac > max_fraction) continue;
    img = std::move(out);
    return mask;
  }
  throw ConfigError("synth: could not place a defect within the area bounds");
}

inline std::uint64_t synth_image_seed(const SynthConfig& cfg, int cls, int split, int j) {
  return hash_combine(hash_combine(cfg.seed, static_cast<std::uint64_t>(cls) * 4 + static_cast<std::uint64_t>(split)),
                      static_cast<std::uint64_t>(j));
}

struct SynthAnomaly {
  Tensor<float> normal_template;
  Tensor<float> image;
  Tensor<float> mask;
  DefectType type;
};

/// The j-th anomalous test sample of class k, with its pre-injection render.
inline SynthAnomaly synth_anomaly(const SynthConfig& cfg, int k, int j) {
  const auto tex = synth_texture(cfg, k);
  SynthAnomaly a;
  a.type = cfg.defect_types[static_cast<std::size_t>(j) % cfg.defect_types.size()];
  a.normal_template = render_texture(tex, cfg.image_size, synth_image_seed(cfg, k, 2, j));
  a.image = a.normal_template;
  Rng rng(hash_combine(synth_image_seed(cfg, k, 2, j), 0xdef));
  a.mask = inject_defect(a.image, a.type, rng, cfg.min_defect_fraction, cfg.max_defect_fraction);
  return a;
}

struct SynthSummary {
  std::size_t train_images = 0;
  std::size_t test_images = 0;
  std::size_t masks = 0;
};

/// Writes a deterministic multi-class dataset in MVTec layout under `out`:
/// <class>/train/good, <class>/test/good, <class>/test/<defect>, and
/// ground_truth/<class>/<defect>/<stem>_mask.pgm.
inline SynthSummary generate_synthetic(const SynthConfig& cfg, const fs::path& out) {
  cfg.validate();
  std::error_code ec;
  if (fs::exists(out)) {
    if (!fs::is_directory(out) || !fs::is_empty(out))
      throw IoError("synth target must be empty or absent: " + out.string());
  } else if (!out.parent_path().empty() && !fs::is_directory(out.parent_path())) {
    throw IoError("synth target parent does not exist: " + out.parent_path().string());
  }
  auto mkdirs = [&](const fs::path& p) {
    fs::create_directories(p, ec);
    if (ec) throw IoError("cannot create " + p.string() + ": " + ec.message());
  };
  auto name = [](int j, const char* ext) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%03d%s", j, ext);
    return std::string(buf);
  };
  SynthSummary sum;
  for (int k = 0; k < cfg.num_classes; ++k) {
    const auto tex = synth_texture(cfg, k);
    const fs::path cdir = out / synth_class_name(k);
    mkdirs(cdir / "train" / "good");
    mkdirs(cdir / "test" / "good");
    for (int j = 0; j < cfg.train_per_class; ++j) {
      write_file_bytes(cdir / "train" / "good" / name(j, ".ppm"),
                       encode_pnm(render_texture(tex, cfg.image_size, synth_image_seed(cfg, k, 0, j))));
      ++sum.train_images;
    }
    for (int j = 0; j < cfg.test_normal_per_class; ++j) {
      write_file_bytes(cdir / "test" / "good" / name(j, ".ppm"),
                       encode_pnm(render_texture(tex, cfg.image_size, synth_image_seed(cfg, k, 1, j))));
      ++sum.test_images;
    }
    for (int j = 0; j < cfg.test_anomaly_per_class; ++j) {
      auto a = synth_anomaly(cfg, k, j);
      const std::string defect = to_string(a.type);
      const fs::path idir = cdir / "test" / defect;
      const fs::path mdir = out / "ground_truth" / synth_class_name(k) / defect;
      mkdirs(idir);
      mkdirs(mdir);
      write_file_bytes(idir / name(j, ".ppm"), encode_pnm(a.image));
      write_file_bytes(mdir / name(j, "_mask.pgm"),
                       encode_pnm(a.mask.reshaped({1, a.mask.dim(0), a.mask.dim(1)})));
      ++sum.test_images;
      ++sum.masks;
    }
  }
  return sum;
}

}  // namespace vitad
