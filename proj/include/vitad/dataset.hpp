#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vitad/image_ops.hpp"
#include "vitad/pnm.hpp"

namespace vitad {

enum class Split { train, test };

struct Record {
  std::string cls;
  Split split = Split::train;
  bool anomaly = false;
  std::string defect_type;  // "good" for normal images
  fs::path image_path;
  std::optional<fs::path> mask_path;
};

/// Enumeration of a MUAD dataset in MVTec layout. Records are sorted by
/// (class, split, defect type, file name).
struct DatasetIndex {
  std::vector<std::string> classes;
  std::vector<Record> records;

  std::vector<const Record*> train() const {
    std::vector<const Record*> out;
    for (const auto& r : records)
      if (r.split == Split::train) out.push_back(&r);
    return out;
  }

  std::vector<const Record*> test(const std::string& cls) const {
    std::vector<const Record*> out;
    for (const auto& r : records)
      if (r.split == Split::test && r.cls == cls) out.push_back(&r);
    return out;
  }

  std::size_t count(Split s) const {
    return static_cast<std::size_t>(
        std::count_if(records.begin(), records.end(), [s](const Record& r) { return r.split == s; }));
  }
};

using WarningSink = std::function<void(const std::string&)>;

inline void default_warning(const std::string& m) { std::cerr << "warning: " << m << "\n"; }

namespace detail {

inline bool is_image_file(const fs::path& p) {
  const auto ext = p.extension().string();
  return ext == ".ppm" || ext == ".pgm" || ext == ".pnm";
}

inline std::vector<fs::path> sorted_images(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && is_image_file(e.path())) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

inline std::vector<std::string> sorted_subdirs(const fs::path& dir) {
  std::vector<std::string> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) out.push_back(e.path().filename().string());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace detail

/// Indexes an MVTec-style tree:
///   <root>/<class>/train/good/*, <root>/<class>/test/<defect>/*,
/// with masks named <stem>_mask.* under either <root>/<class>/ground_truth/<defect>/
/// or <root>/ground_truth/<class>/<defect>/.
inline DatasetIndex load_layout(const fs::path& root, const WarningSink& warn = default_warning) {
  if (!fs::is_directory(root)) throw IndexError("dataset root is not a directory: " + root.string());
  DatasetIndex index;
  for (const auto& cls : detail::sorted_subdirs(root)) {
    if (cls == "ground_truth") continue;
    const fs::path cdir = root / cls;
    std::vector<Record> recs;
    for (const auto& p : detail::sorted_images(cdir / "train" / "good"))
      recs.push_back({cls, Split::train, false, "good", p, std::nullopt});
    for (const auto& defect : detail::sorted_subdirs(cdir / "test")) {
      const auto images = detail::sorted_images(cdir / "test" / defect);
      for (const auto& p : images) {
        Record r{cls, Split::test, defect != "good", defect, p, std::nullopt};
        if (r.anomaly) {
          const std::array<fs::path, 2> gt_dirs{cdir / "ground_truth" / defect,
                                                root / "ground_truth" / cls / defect};
          for (const auto& gdir : gt_dirs) {
            for (const char* ext : {".pgm", ".pnm", ".ppm"}) {
              const fs::path m = gdir / (p.stem().string() + "_mask" + ext);
              if (fs::is_regular_file(m)) {
                r.mask_path = m;
                break;
              }
            }
            if (r.mask_path) break;
          }
          if (!r.mask_path)
            throw IndexError("missing ground-truth mask for anomaly image " + p.string());
        }
        recs.push_back(std::move(r));
      }
    }
    if (recs.empty()) {
      warn("class directory " + cdir.string() + " has no images; skipped");
      continue;
    }
    index.classes.push_back(cls);
    for (auto& r : recs) index.records.push_back(std::move(r));
  }
  return index;
}

/// Per-channel input normalization.
struct NormStats {
  std::array<double, 3> mean{0.485, 0.456, 0.406};
  std::array<double, 3> std{0.229, 0.224, 0.225};
};

inline Tensor<float> normalize(const Tensor<float>& image, const NormStats& stats) {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw DimensionError("normalize expects a [3,H,W] image, got " + shape_str(image.shape()));
  for (double s : stats.std)
    if (!(s > 0)) throw ConfigError("normalize: std must be positive");
  Tensor<float> out = image;
  const std::size_t plane = image.dim(1) * image.dim(2);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < plane; ++i)
      out[c * plane + i] = static_cast<float>((image[c * plane + i] - stats.mean[c]) / stats.std[c]);
  return out;
}

/// Loads an image as [3, size, size] in [0, 1]; grayscale is replicated and
/// other sizes are resampled bilinearly.
inline Tensor<float> load_image(const fs::path& path, std::size_t size) {
  Tensor<float> img = read_pnm(path);
  if (img.dim(0) == 1) {
    Tensor<float> rgb({3, img.dim(1), img.dim(2)});
    for (std::size_t c = 0; c < 3; ++c)
      std::copy(img.data().begin(), img.data().end(), rgb.raw() + c * img.numel());
    img = std::move(rgb);
  }
  return resize_image_bilinear(img, size, size);
}

/// Loads a ground-truth mask as binary [size, size] (byte value > 127 is
/// anomalous), resampled with nearest neighbour.
inline Tensor<float> load_mask(const fs::path& path, std::size_t size) {
  Tensor<float> m = read_pnm(path);
  const std::size_t h = m.dim(1), w = m.dim(2);
  Tensor<float> bin({h, w});
  for (std::size_t i = 0; i < h * w; ++i) bin[i] = to_byte(m[i]) > 127 ? 1.0f : 0.0f;
  return resize_nearest_2d(bin, size, size);
}

/// FNV-1a over relative paths and file bytes of every indexed file.
inline std::uint64_t dataset_fingerprint(const DatasetIndex& index, const fs::path& root) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  auto feed_file = [&](const fs::path& p) {
    const auto rel = fs::relative(p, root).generic_string();
    feed(rel.data(), rel.size());
    const auto bytes = read_file_bytes(p);
    feed(bytes.data(), bytes.size());
  };
  for (const auto& r : index.records) {
    feed_file(r.image_path);
    if (r.mask_path) feed_file(*r.mask_path);
  }
  return h;
}

}  // namespace vitad
