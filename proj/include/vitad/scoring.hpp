#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include "vitad/image_ops.hpp"
#include "vitad/meta_ad.hpp"

namespace vitad {

enum class LossKind { cosine_flat, cosine_pixel, l1, mse };

inline const char* to_string(LossKind k) {
  switch (k) {
    case LossKind::cosine_flat: return "cosine_flat";
    case LossKind::cosine_pixel: return "cosine_pixel";
    case LossKind::l1: return "l1";
    case LossKind::mse: return "mse";
  }
  return "?";
}

inline LossKind parse_loss_kind(const std::string& s) {
  for (auto k : {LossKind::cosine_flat, LossKind::cosine_pixel, LossKind::l1, LossKind::mse})
    if (s == to_string(k)) return k;
  throw ConfigError("unknown loss: " + s);
}

inline constexpr double kCosineEps = 1e-8;

/// Per-image anomaly output.
template <typename T = float>
struct AnomalyMap {
  Tensor<T> pixel_map;             // [H, W]
  T image_score{};
  std::vector<Tensor<T>> stage_maps;  // [h, w] each
};

/// 1 - cos(F(h,w), F^(h,w)) at every grid position; inputs are [C, h, w].
template <typename T>
Tensor<T> stage_anomaly_map(const Tensor<T>& f, const Tensor<T>& f_hat) {
  require_same_shape(f, f_hat, "stage_anomaly_map");
  if (f.rank() != 3) throw DimensionError("stage_anomaly_map expects [C,h,w], got " + shape_str(f.shape()));
  Tape<T> tape(false);
  auto d = cosine_distance_rows(tape.constant(chw_to_tokens(f)), tape.constant(chw_to_tokens(f_hat)),
                                static_cast<T>(kCosineEps));
  return d.value().reshaped({f.dim(1), f.dim(2)});
}

/// Loss of one stage pair given as [N, C] tokens.
template <typename T>
Var<T> stage_loss(Var<T> f, Var<T> f_hat, LossKind kind) {
  const T eps = static_cast<T>(kCosineEps);
  switch (kind) {
    case LossKind::cosine_pixel:
      return mean(cosine_distance_rows(f, f_hat, eps));
    case LossKind::cosine_flat: {
      const Shape flat{1, f.value().numel()};
      return sum(cosine_distance_rows(reshape(f, flat), reshape(f_hat, flat), eps));
    }
    case LossKind::l1:
      return mean(abs(sub(f, f_hat)));
    case LossKind::mse: {
      auto diff = sub(f, f_hat);
      return mean(mul(diff, diff));
    }
  }
  throw ConfigError("unknown loss kind");
}

/// Sum of per-stage losses over the constrained stage set. `targets[j]` is the
/// encoder stage index reconstructed by `dec[j]`; `enc_by_index(i)` returns F_i.
template <typename T, typename EncLookup>
Var<T> training_loss_tape(EncLookup&& enc_by_index, const std::vector<Var<T>>& dec,
                          const std::vector<int>& targets, const std::set<int>& constrained,
                          LossKind kind) {
  if (constrained.empty()) throw ConfigError("training loss: constrained stage set is empty");
  for (int s : constrained)
    if (std::find(targets.begin(), targets.end(), s) == targets.end())
      throw ConfigError(detail::concat("training loss: stage ", s, " has no decoder reconstruction"));
  std::vector<Var<T>> terms;
  for (std::size_t j = 0; j < dec.size(); ++j)
    if (constrained.contains(targets[j])) terms.push_back(stage_loss(enc_by_index(targets[j]), dec[j], kind));
  Var<T> total = terms.front();
  for (std::size_t k = 1; k < terms.size(); ++k) total = add(total, terms[k]);
  return total;
}

/// Plain-tensor form on [C, h, w] features.
template <typename T>
T training_loss(const StageFeatures<T>& enc, const StageFeatures<T>& dec,
                const std::set<int>& constrained, LossKind kind = LossKind::cosine_pixel) {
  Tape<T> tape(false);
  std::vector<Var<T>> dvars;
  for (const auto& s : dec.stages) dvars.push_back(tape.constant(chw_to_tokens(s)));
  for (int s : constrained)
    if (!enc.has_index(s)) throw ConfigError(detail::concat("training loss: encoder stage ", s, " missing"));
  auto lookup = [&](int i) { return tape.constant(chw_to_tokens(enc.at_index(i))); };
  return training_loss_tape<T>(lookup, dvars, dec.index, constrained, kind).value().item();
}

/// Sums same-shaped stage maps and upsamples the sum to out_size x out_size.
template <typename T>
Tensor<T> final_anomaly_map(const std::vector<Tensor<T>>& stage_maps, std::size_t out_size) {
  if (stage_maps.empty()) throw ContractError("final_anomaly_map: no stage maps");
  Tensor<T> acc = stage_maps.front();
  for (std::size_t i = 1; i < stage_maps.size(); ++i) {
    if (stage_maps[i].shape() != acc.shape())
      throw DimensionError("final_anomaly_map: stage maps differ in shape, " +
                           shape_str(acc.shape()) + " vs " + shape_str(stage_maps[i].shape()));
    acc += stage_maps[i];
  }
  return resize_bilinear_2d(acc, out_size, out_size);
}

/// Max over all valid positions of a stride-1 window x window mean pool.
template <typename T>
T image_score(const Tensor<T>& map, std::size_t window) {
  if (map.rank() != 2) throw DimensionError("image_score expects an [H,W] map");
  const std::size_t h = map.dim(0), w = map.dim(1);
  if (window < 1 || window > std::min(h, w))
    throw ConfigError(detail::concat("image_score: pool window ", window, " must lie in [1, ",
                                     std::min(h, w), "]"));
  if (window == 1) return map.max();
  // Separable window sums: per-column sums of `window` rows, then sums of
  // `window` adjacent columns. Each window's sum reads only its own pixels in
  // a fixed order, so raising one pixel can never lower any window (rounding
  // is monotone), which a summed-area table does not guarantee.
  const std::size_t oh = h - window + 1, ow = w - window + 1;
  std::vector<double> col(oh * w, 0.0);
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double s = 0;
      for (std::size_t k = 0; k < window; ++k) s += map[(y + k) * w + x];
      col[y * w + x] = s;
    }
  const double area = static_cast<double>(window * window);
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0;
      for (std::size_t k = 0; k < window; ++k) s += col[y * w + x + k];
      best = std::max(best, s / area);
    }
  // The window mean can never exceed the map max; clamp float round-off.
  return std::min(static_cast<T>(best), map.max());
}

struct ScoringConfig {
  std::set<int> stages{1, 2, 3};
  // Mean-pool window for the image score; 0 = one patch footprint at output size.
  std::size_t pool_window = 0;
  bool smoothing = false;
  double smoothing_sigma = 4.0;
};

/// Encoder/decoder features -> stage maps, final map at image resolution, image score.
template <typename T>
AnomalyMap<T> score_features(const StageFeatures<T>& enc, const StageFeatures<T>& dec,
                             const ScoringConfig& cfg, std::size_t out_size, std::size_t patch) {
  AnomalyMap<T> out;
  for (int s : cfg.stages) {
    if (!dec.has_index(s) || !enc.has_index(s))
      throw ConfigError(detail::concat("scoring: stage ", s, " is not reconstructed"));
    out.stage_maps.push_back(stage_anomaly_map(enc.at_index(s), dec.at_index(s)));
  }
  out.pixel_map = final_anomaly_map(out.stage_maps, out_size);
  if (cfg.smoothing) out.pixel_map = gaussian_smooth(out.pixel_map, cfg.smoothing_sigma);
  const std::size_t window = cfg.pool_window == 0 ? patch : cfg.pool_window;
  out.image_score = image_score(out.pixel_map, window);
  return out;
}

template <typename T>
AnomalyMap<T> infer_anomaly(const VitadModel<T>& model, const Tensor<T>& image,
                            const ScoringConfig& cfg) {
  auto [enc, dec] = vitad_forward(image, model);
  const auto& vc = model.vit_config();
  return score_features(enc, dec, cfg, static_cast<std::size_t>(vc.image_size),
                        static_cast<std::size_t>(vc.patch_size));
}

}  // namespace vitad
