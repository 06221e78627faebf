#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vitad/tensor.hpp"

namespace vitad::metrics {

/// Scores with binary labels (1 = anomalous).
struct LabeledScores {
  std::vector<double> scores;
  std::vector<int> labels;

  void add(double s, int label) {
    scores.push_back(s);
    labels.push_back(label);
  }
  std::size_t size() const { return scores.size(); }
  std::size_t positives() const {
    return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  }

  void validate() const {
    if (scores.size() != labels.size())
      throw ContractError("scores and labels differ in length");
    for (int l : labels)
      if (l != 0 && l != 1) throw ContractError("labels must be 0 or 1");
  }
};

namespace detail {

// Groups of tied scores in descending order: (positives, negatives) per group.
inline std::vector<std::pair<std::size_t, std::size_t>> descending_groups(const LabeledScores& s) {
  std::vector<std::size_t> order(s.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return s.scores[a] > s.scores[b]; });
  std::vector<std::pair<std::size_t, std::size_t>> groups;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i, pos = 0, neg = 0;
    while (j < order.size() && s.scores[order[j]] == s.scores[order[i]]) {
      (s.labels[order[j]] == 1 ? pos : neg)++;
      ++j;
    }
    groups.emplace_back(pos, neg);
    i = j;
  }
  return groups;
}

}  // namespace detail

/// Probability that a random positive outscores a random negative, ties
/// counted one half (Mann-Whitney U / (P N)).
inline double auroc(const LabeledScores& s) {
  s.validate();
  const std::size_t p = s.positives(), n = s.size() - p;
  if (p == 0 || n == 0) throw UndefinedMetricError("AU-ROC needs both positive and negative labels");
  double wins = 0;
  std::size_t neg_above = 0;
  // Walking descending: each positive beats every negative not yet seen.
  for (auto [gp, gn] : detail::descending_groups(s)) {
    wins += static_cast<double>(gp) * static_cast<double>(n - neg_above - gn) +
            0.5 * static_cast<double>(gp) * static_cast<double>(gn);
    neg_above += gn;
  }
  return wins / (static_cast<double>(p) * static_cast<double>(n));
}

/// Step-wise average precision; tied scores share the precision at the end
/// of their group.
inline double average_precision(const LabeledScores& s) {
  s.validate();
  const std::size_t p = s.positives();
  if (p == 0) throw UndefinedMetricError("average precision needs at least one positive");
  double ap = 0;
  std::size_t tp = 0, fp = 0;
  for (auto [gp, gn] : detail::descending_groups(s)) {
    tp += gp;
    fp += gn;
    if (gp) ap += static_cast<double>(gp) * static_cast<double>(tp) / static_cast<double>(tp + fp);
  }
  return ap / static_cast<double>(p);
}

/// Best F1 over thresholds at every distinct score (predict score >= tau).
inline double f1_max(const LabeledScores& s) {
  s.validate();
  const std::size_t p = s.positives();
  if (p == 0) throw UndefinedMetricError("F1-max needs at least one positive");
  double best = 0;
  std::size_t tp = 0, fp = 0;
  for (auto [gp, gn] : detail::descending_groups(s)) {
    tp += gp;
    fp += gn;
    const double prec = static_cast<double>(tp) / static_cast<double>(tp + fp);
    const double rec = static_cast<double>(tp) / static_cast<double>(p);
    if (prec + rec > 0) best = std::max(best, 2 * prec * rec / (prec + rec));
  }
  return best;
}

/// 8-connected component labels of a binary [H, W] mask (values > 0.5 are
/// foreground). Returns per-pixel labels (0 = background, 1..n) and n.
template <typename T>
std::pair<std::vector<std::uint32_t>, std::uint32_t> connected_components(const Tensor<T>& mask) {
  const std::size_t h = mask.dim(0), w = mask.dim(1);
  std::vector<std::uint32_t> label(h * w, 0);
  std::uint32_t next = 0;
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < h * w; ++start) {
    if (mask[start] <= T(0.5) || label[start]) continue;
    label[start] = ++next;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::size_t cur = stack.back();
      stack.pop_back();
      const long cy = static_cast<long>(cur / w), cx = static_cast<long>(cur % w);
      for (long dy = -1; dy <= 1; ++dy)
        for (long dx = -1; dx <= 1; ++dx) {
          const long y = cy + dy, x = cx + dx;
          if (y < 0 || x < 0 || y >= static_cast<long>(h) || x >= static_cast<long>(w)) continue;
          const std::size_t q = static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x);
          if (mask[q] > T(0.5) && !label[q]) {
            label[q] = next;
            stack.push_back(q);
          }
        }
    }
  }
  return {std::move(label), next};
}

struct AuproOptions {
  double fpr_cap = 0.3;
  // 0 = exact sweep over every distinct prediction value; otherwise that many
  // evenly spaced thresholds between the global min and max.
  std::size_t quantized_bins = 0;
};

/// Area under the per-region-overlap curve up to `fpr_cap`, normalized by the
/// cap. Regions are 8-connected components of each ground-truth mask; FPR is
/// pooled over the normal pixels of all images.
template <typename T>
double aupro(std::span<const Tensor<T>> maps, std::span<const Tensor<T>> masks,
             const AuproOptions& opt = {}) {
  if (maps.size() != masks.size()) throw ContractError("aupro: map and mask counts differ");
  if (!(opt.fpr_cap > 0 && opt.fpr_cap <= 1)) throw ContractError("aupro: fpr_cap must lie in (0, 1]");
  // Pixel kind: 0 = normal, k > 0 = region k (global numbering).
  std::vector<double> score;
  std::vector<std::uint32_t> kind;
  std::vector<double> region_size{0.0};
  for (std::size_t i = 0; i < maps.size(); ++i) {
    require_same_shape(maps[i], masks[i], "aupro");
    if (maps[i].rank() != 2) throw DimensionError("aupro expects [H,W] maps");
    auto [labels, n] = connected_components(masks[i]);
    const auto base = static_cast<std::uint32_t>(region_size.size() - 1);
    region_size.resize(region_size.size() + n, 0.0);
    for (std::size_t q = 0; q < labels.size(); ++q) {
      score.push_back(static_cast<double>(maps[i][q]));
      const std::uint32_t k = labels[q] ? labels[q] + base : 0;
      kind.push_back(k);
      if (k) region_size[k] += 1;
    }
  }
  const std::size_t regions = region_size.size() - 1;
  if (regions == 0) throw UndefinedMetricError("AU-PRO needs at least one anomalous pixel");
  const auto normals = static_cast<double>(std::count(kind.begin(), kind.end(), 0u));
  if (normals == 0) throw UndefinedMetricError("AU-PRO needs at least one normal pixel");

  std::vector<std::size_t> order(score.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });

  std::vector<double> thresholds;
  if (opt.quantized_bins > 0) {
    const double lo = score[order.back()], hi = score[order.front()];
    const std::size_t b = opt.quantized_bins;
    for (std::size_t k = 0; k < b; ++k)
      thresholds.push_back(b == 1 ? lo : hi - (hi - lo) * static_cast<double>(k) / static_cast<double>(b - 1));
  }

  // Curve points (fpr, pro), starting at the origin (threshold above everything).
  std::vector<std::pair<double, double>> curve{{0.0, 0.0}};
  double fp = 0;
  double overlap_sum = 0;  // sum over regions of covered fraction
  auto emit = [&] { curve.emplace_back(fp / normals, overlap_sum / static_cast<double>(regions)); };
  std::size_t i = 0;
  auto consume_while = [&](auto pred) {
    while (i < order.size() && pred(score[order[i]])) {
      const auto k = kind[order[i]];
      if (k) overlap_sum += 1.0 / region_size[k]; else fp += 1;
      ++i;
    }
  };
  if (thresholds.empty()) {
    while (i < order.size()) {
      const double tau = score[order[i]];
      consume_while([tau](double v) { return v >= tau; });
      emit();
    }
  } else {
    for (double tau : thresholds) {
      consume_while([tau](double v) { return v >= tau; });
      emit();
    }
  }

  // Trapezoid over [0, cap], interpolating the segment that crosses the cap.
  const double cap = opt.fpr_cap;
  double area = 0;
  for (std::size_t k = 1; k < curve.size(); ++k) {
    auto [x0, y0] = curve[k - 1];
    auto [x1, y1] = curve[k];
    if (x0 >= cap) break;
    if (x1 > cap) {
      y1 = y0 + (y1 - y0) * (cap - x0) / (x1 - x0);
      x1 = cap;
    }
    area += (x1 - x0) * (y0 + y1) / 2;
  }
  // Curve ends before the cap (cannot happen with a full sweep, since the
  // lowest threshold gives FPR 1): extend at the last PRO.
  if (curve.back().first < cap) area += (cap - curve.back().first) * curve.back().second;
  return area / cap;
}

inline constexpr std::array<const char*, 7> kMetricNames{
    "image_auroc", "image_ap", "image_f1max", "pixel_auroc", "pixel_ap", "pixel_f1max", "pixel_aupro"};

/// Seven-metric report; absent fields are metrics that were undefined.
struct MetricReport {
  std::array<std::optional<double>, 7> values{};

  std::optional<double>& image_auroc() { return values[0]; }
  std::optional<double>& image_ap() { return values[1]; }
  std::optional<double>& image_f1max() { return values[2]; }
  std::optional<double>& pixel_auroc() { return values[3]; }
  std::optional<double>& pixel_ap() { return values[4]; }
  std::optional<double>& pixel_f1max() { return values[5]; }
  std::optional<double>& pixel_aupro() { return values[6]; }
  const std::optional<double>& image_auroc() const { return values[0]; }
  const std::optional<double>& image_ap() const { return values[1]; }
  const std::optional<double>& image_f1max() const { return values[2]; }
  const std::optional<double>& pixel_auroc() const { return values[3]; }
  const std::optional<double>& pixel_ap() const { return values[4]; }
  const std::optional<double>& pixel_f1max() const { return values[5]; }
  const std::optional<double>& pixel_aupro() const { return values[6]; }

  /// Mean of the present fields; absent when none are present.
  std::optional<double> mad() const {
    double s = 0;
    int n = 0;
    for (const auto& v : values)
      if (v) {
        s += *v;
        ++n;
      }
    if (n == 0) return std::nullopt;
    return s / n;
  }

  bool complete() const {
    return std::all_of(values.begin(), values.end(), [](const auto& v) { return v.has_value(); });
  }
};

/// Arithmetic mean of all seven metrics; every one must be present.
inline double aggregate_mad(const std::array<std::optional<double>, 7>& fields) {
  double s = 0;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (!fields[i]) throw ContractError(std::string("aggregate_mad: missing ") + kMetricNames[i]);
    s += *fields[i];
  }
  return s / 7.0;
}

/// Field-wise mean over classes, each field averaged over the classes where
/// it is present.
inline MetricReport mean_report(std::span<const MetricReport> reports) {
  MetricReport out;
  for (std::size_t f = 0; f < 7; ++f) {
    double s = 0;
    int n = 0;
    for (const auto& r : reports)
      if (r.values[f]) {
        s += *r.values[f];
        ++n;
      }
    if (n) out.values[f] = s / n;
  }
  return out;
}

/// Evaluates a metric, mapping "undefined" to an absent value.
template <typename F>
std::optional<double> try_metric(F&& f) {
  try {
    return f();
  } catch (const UndefinedMetricError&) {
    return std::nullopt;
  }
}

}  // namespace vitad::metrics
