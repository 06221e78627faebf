#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "vitad/dataset.hpp"
#include "vitad/metrics.hpp"
#include "vitad/optim.hpp"
#include "vitad/scoring.hpp"

namespace vitad {

/// Training-time image augmentations. All off by default; they exist to
/// reproduce the augmentation ablation.
struct AugmentConfig {
  bool center_crop = false;
  bool color_jitter = false;
  bool hflip = false;
  bool rotation = false;
  bool random_resized_crop = false;
  double center_crop_fraction = 0.875;
  double jitter_strength = 0.2;
  double rotation_degrees = 15.0;
  double rrc_min_scale = 0.5;

  bool any() const { return center_crop || color_jitter || hflip || rotation || random_resized_crop; }
};

namespace detail {

// Bilinear sample of channel c at continuous pixel coordinates, edge-clamped.
inline float sample_bilinear(const Tensor<float>& img, std::size_t c, double y, double x) {
  const std::size_t h = img.dim(1), w = img.dim(2);
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const auto y0 = static_cast<std::size_t>(y), x0 = static_cast<std::size_t>(x);
  const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double fy = y - y0, fx = x - x0;
  auto at = [&](std::size_t yy, std::size_t xx) { return static_cast<double>(img[(c * h + yy) * w + xx]); };
  return static_cast<float>((at(y0, x0) * (1 - fx) + at(y0, x1) * fx) * (1 - fy) +
                            (at(y1, x0) * (1 - fx) + at(y1, x1) * fx) * fy);
}

// Crops the box [y0, y0+ch) x [x0, x0+cw) and resamples it to the input size.
inline Tensor<float> crop_resize(const Tensor<float>& img, double y0, double x0, double ch, double cw) {
  const std::size_t h = img.dim(1), w = img.dim(2);
  Tensor<float> out(img.shape());
  for (std::size_t c = 0; c < img.dim(0); ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        out[(c * h + y) * w + x] = sample_bilinear(img, c, y0 + (y + 0.5) * ch / h - 0.5,
                                                   x0 + (x + 0.5) * cw / w - 0.5);
  return out;
}

}  // namespace detail

/// Applies the enabled augmentations to a [3, H, W] image in [0, 1].
inline Tensor<float> augment_image(const Tensor<float>& image, const AugmentConfig& cfg, Rng& rng) {
  Tensor<float> img = image;
  const std::size_t h = img.dim(1), w = img.dim(2);
  const double hd = static_cast<double>(h), wd = static_cast<double>(w);
  if (cfg.center_crop) {
    const double f = cfg.center_crop_fraction;
    img = detail::crop_resize(img, hd * (1 - f) / 2, wd * (1 - f) / 2, hd * f, wd * f);
  }
  if (cfg.random_resized_crop) {
    const double area = rng.uniform(cfg.rrc_min_scale, 1.0);
    const double ratio = std::exp(rng.uniform(std::log(3.0 / 4.0), std::log(4.0 / 3.0)));
    const double ch = std::min(hd, hd * std::sqrt(area / ratio));
    const double cw = std::min(wd, wd * std::sqrt(area * ratio));
    img = detail::crop_resize(img, rng.uniform(0.0, hd - ch), rng.uniform(0.0, wd - cw), ch, cw);
  }
  if (cfg.rotation) {
    const double a = rng.uniform(-cfg.rotation_degrees, cfg.rotation_degrees) * std::numbers::pi / 180;
    const double ca = std::cos(a), sa = std::sin(a), cy = (hd - 1) / 2, cx = (wd - 1) / 2;
    Tensor<float> out(img.shape());
    for (std::size_t c = 0; c < img.dim(0); ++c)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const double dy = y - cy, dx = x - cx;
          out[(c * h + y) * w + x] = detail::sample_bilinear(img, c, cy + sa * dx + ca * dy, cx + ca * dx - sa * dy);
        }
    img = std::move(out);
  }
  if (cfg.hflip && rng.uniform() < 0.5) {
    Tensor<float> out(img.shape());
    for (std::size_t c = 0; c < img.dim(0); ++c)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) out[(c * h + y) * w + x] = img[(c * h + y) * w + (w - 1 - x)];
    img = std::move(out);
  }
  if (cfg.color_jitter) {
    const double s = cfg.jitter_strength;
    const double brightness = rng.uniform(1 - s, 1 + s);
    const double contrast = rng.uniform(1 - s, 1 + s);
    const double saturation = rng.uniform(1 - s, 1 + s);
    const std::size_t plane = h * w;
    const double mean = img.sum() / static_cast<double>(img.numel());
    for (std::size_t i = 0; i < plane; ++i) {
      double gray = 0;
      for (std::size_t c = 0; c < 3; ++c) gray += img[c * plane + i] / 3.0;
      for (std::size_t c = 0; c < 3; ++c) {
        double v = img[c * plane + i] * brightness;
        v = mean + (v - mean) * contrast;
        v = gray * brightness + (v - gray * brightness) * saturation;
        img[c * plane + i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return img;
}

struct TrainConfig {
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int batch_size = 8;
  int epochs = 100;
  int lr_drop_epoch = 80;
  double lr_drop_factor = 0.1;
  LrSchedule schedule = LrSchedule::step;
  int eval_points = 10;
  LossKind loss = LossKind::cosine_flat;
  std::set<int> constrained_stages{1, 2, 3};
  std::uint64_t seed = 0;
  AugmentConfig augment;
  NormStats norm;

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("train: " + m); };
    if (!(lr > 0)) fail("lr must be positive");
    if (!(weight_decay >= 0)) fail("weight_decay must be non-negative");
    if (!(lr_drop_factor > 0 && lr_drop_factor <= 1)) fail("lr_drop_factor must lie in (0, 1]");
    if (epochs < 1) fail("epochs must be >= 1");
    if (lr_drop_epoch < 0 || lr_drop_epoch > epochs) fail("lr_drop_epoch must lie in [0, epochs]");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (eval_points < 1) fail("eval_points must be >= 1");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) fail("betas must lie in [0, 1)");
    if (!(eps > 0)) fail("eps must be positive");
    if (constrained_stages.empty()) fail("constrained_stages must be nonempty");
  }

  ScheduleConfig schedule_config() const {
    ScheduleConfig s;
    s.lr = lr;
    s.epochs = epochs;
    s.lr_drop_epoch = lr_drop_epoch;
    s.lr_drop_factor = lr_drop_factor;
    s.kind = schedule;
    return s;
  }

  AdamWConfig adamw_config() const { return {lr, weight_decay, beta1, beta2, eps}; }
};

/// 1-based epochs after which evaluation runs: `points` evenly spaced epochs
/// ending at the last one.
inline std::vector<int> eval_epochs(int epochs, int points) {
  std::set<int> out;
  const int n = std::min(points, epochs);
  for (int k = 1; k <= n; ++k)
    out.insert(static_cast<int>(std::lround(static_cast<double>(k) * epochs / n)));
  return {out.begin(), out.end()};
}

/// Permutation of 0..n-1 for one epoch, a pure function of (seed, epoch).
inline std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(hash_combine(seed, 0x5eed0000ULL + static_cast<std::uint64_t>(epoch)));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

struct EvalConfig {
  ScoringConfig scoring;
  metrics::AuproOptions aupro;
  int workers = 1;
  // Replace model output with the ground-truth mask (perfect-detector harness).
  bool oracle_masks = false;
};

/// One test image prepared for evaluation.
template <typename T = float>
struct EvalItem {
  const Record* record = nullptr;
  Tensor<T> image;  // normalized [3, S, S]
  Tensor<T> mask;   // binary [S, S]
  // Cached frozen-encoder tokens (stem, F_1..F_N), filled on first use.
  std::optional<std::pair<Tensor<T>, std::vector<Tensor<T>>>> tokens;
};

template <typename T = float>
struct EvalSet {
  std::vector<std::string> classes;
  std::vector<std::vector<EvalItem<T>>> items;  // per class

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& c : items) n += c.size();
    return n;
  }
};

template <typename T = float>
EvalSet<T> load_eval_set(const DatasetIndex& index, std::size_t size, const NormStats& norm) {
  EvalSet<T> set;
  for (const auto& cls : index.classes) {
    std::vector<EvalItem<T>> items;
    for (const Record* r : index.test(cls)) {
      EvalItem<T> it;
      it.record = r;
      it.image = normalize(load_image(r->image_path, size), norm).template cast<T>();
      it.mask = r->mask_path ? load_mask(*r->mask_path, size).template cast<T>()
                             : Tensor<T>::zeros({size, size});
      items.push_back(std::move(it));
    }
    if (items.empty()) continue;
    set.classes.push_back(cls);
    set.items.push_back(std::move(items));
  }
  return set;
}

/// Anomaly output from cached encoder tokens (decoder half only).
template <typename T>
AnomalyMap<T> infer_from_tokens(const VitadModel<T>& model, const Tensor<T>& stem,
                                const std::vector<Tensor<T>>& stages, const ScoringConfig& cfg) {
  Tape<T> tape(false);
  std::vector<Var<T>> enc;
  for (const auto& s : stages) enc.push_back(tape.constant(s));
  auto out = model.forward_from_features(tape.constant(stem), std::move(enc));
  const std::size_t g = model.grid();
  StageFeatures<T> ef, df;
  for (std::size_t i = 0; i < out.encoder.size(); ++i) {
    ef.stages.push_back(tokens_to_chw(out.encoder[i].value(), g, g));
    ef.index.push_back(static_cast<int>(i) + 1);
  }
  for (std::size_t j = 0; j < out.decoder.size(); ++j) {
    df.stages.push_back(tokens_to_chw(out.decoder[j].value(), g, g));
    df.index.push_back(out.decoder_targets[j]);
  }
  const auto& vc = model.vit_config();
  return score_features(ef, df, cfg, static_cast<std::size_t>(vc.image_size),
                        static_cast<std::size_t>(vc.patch_size));
}

struct EvalResult {
  std::vector<std::string> classes;
  std::vector<metrics::MetricReport> per_class;
  metrics::MetricReport mean;
  std::vector<std::string> warnings;
};

/// Seven metrics of one class from its per-image maps and scores.
template <typename T>
metrics::MetricReport class_report(const std::vector<Tensor<T>>& maps, const std::vector<Tensor<T>>& masks,
                                   const std::vector<double>& scores, const std::vector<int>& labels,
                                   const metrics::AuproOptions& aupro_opt) {
  using namespace metrics;
  MetricReport r;
  LabeledScores img{scores, labels};
  LabeledScores pix;
  std::size_t total = 0;
  for (const auto& m : maps) total += m.numel();
  pix.scores.reserve(total);
  pix.labels.reserve(total);
  for (std::size_t i = 0; i < maps.size(); ++i)
    for (std::size_t q = 0; q < maps[i].numel(); ++q)
      pix.add(static_cast<double>(maps[i][q]), masks[i][q] > T(0.5) ? 1 : 0);
  r.image_auroc() = try_metric([&] { return auroc(img); });
  r.image_ap() = try_metric([&] { return average_precision(img); });
  r.image_f1max() = try_metric([&] { return f1_max(img); });
  r.pixel_auroc() = try_metric([&] { return auroc(pix); });
  r.pixel_ap() = try_metric([&] { return average_precision(pix); });
  r.pixel_f1max() = try_metric([&] { return f1_max(pix); });
  r.pixel_aupro() = try_metric([&] {
    return aupro(std::span<const Tensor<T>>(maps), std::span<const Tensor<T>>(masks), aupro_opt);
  });
  return r;
}

using MapSink = std::function<void(const Record&, const AnomalyMap<float>&)>;

/// Scores every test image and computes per-class and mean metrics. Images
/// fan out over `cfg.workers` threads; results are folded in dataset order.
template <typename T>
EvalResult evaluate(const VitadModel<T>& model, EvalSet<T>& set, const EvalConfig& cfg,
                    const MapSink& sink = {}) {
  EvalResult res;
  const auto& vc = model.vit_config();
  const auto size = static_cast<std::size_t>(vc.image_size);
  for (std::size_t c = 0; c < set.classes.size(); ++c) {
    auto& items = set.items[c];
    std::vector<AnomalyMap<T>> outs(items.size());
    auto work = [&](std::size_t i) {
      auto& it = items[i];
      if (cfg.oracle_masks) {
        AnomalyMap<T> a;
        a.pixel_map = it.mask;
        a.image_score = it.mask.max();
        outs[i] = std::move(a);
        return;
      }
      if (it.image.dim(1) != size) throw DimensionError("evaluation image size differs from the model input");
      if (!it.tokens) it.tokens = model.encode_tokens(it.image);
      outs[i] = infer_from_tokens(model, it.tokens->first, it.tokens->second, cfg.scoring);
    };
    const auto workers = static_cast<std::size_t>(std::max(1, cfg.workers));
    if (workers == 1 || items.size() < 2) {
      for (std::size_t i = 0; i < items.size(); ++i) work(i);
    } else {
      std::vector<std::thread> pool;
      std::vector<std::exception_ptr> errors(workers);
      for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
          try {
            for (std::size_t i = w; i < items.size(); i += workers) work(i);
          } catch (...) {
            errors[w] = std::current_exception();
          }
        });
      for (auto& t : pool) t.join();
      for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    }
    std::vector<Tensor<T>> maps, masks;
    std::vector<double> scores;
    std::vector<int> labels;
    for (std::size_t i = 0; i < items.size(); ++i) {
      maps.push_back(outs[i].pixel_map);
      masks.push_back(items[i].mask);
      scores.push_back(static_cast<double>(outs[i].image_score));
      labels.push_back(items[i].record->anomaly ? 1 : 0);
      if (sink) {
        AnomalyMap<float> f;
        f.pixel_map = outs[i].pixel_map.template cast<float>();
        f.image_score = static_cast<float>(outs[i].image_score);
        for (const auto& s : outs[i].stage_maps) f.stage_maps.push_back(s.template cast<float>());
        sink(*items[i].record, f);
      }
    }
    auto report = class_report(maps, masks, scores, labels, cfg.aupro);
    for (std::size_t f = 0; f < 7; ++f)
      if (!report.values[f])
        res.warnings.push_back(set.classes[c] + ": " + metrics::kMetricNames[f] +
                               " undefined for this test split; marked absent");
    res.classes.push_back(set.classes[c]);
    res.per_class.push_back(report);
  }
  res.mean = metrics::mean_report(std::span<const metrics::MetricReport>(res.per_class));
  return res;
}

/// Named copy of the trainable (fuser + decoder) parameters.
template <typename T = float>
using Snapshot = std::vector<std::pair<std::string, Tensor<T>>>;

template <typename T>
Snapshot<T> take_snapshot(const ParamStore<T>& store) {
  Snapshot<T> s;
  for (const auto& e : store.entries())
    if (e.group != ParamGroup::encoder) s.emplace_back(e.param->name, e.param->value);
  return s;
}

template <typename T>
void restore_snapshot(ParamStore<T>& store, const Snapshot<T>& snap) {
  for (const auto& [name, value] : snap) {
    auto& p = store.get(name);
    if (p.value.shape() != value.shape()) throw ContractError("snapshot shape mismatch for " + name);
    p.value = value;
  }
}

struct EpochRecord {
  int epoch = 0;  // 1-based
  double lr = 0;
  double mean_loss = 0;
  std::size_t steps = 0;
};

struct EvalRecord {
  int epoch = 0;
  metrics::MetricReport mean;
  std::vector<metrics::MetricReport> per_class;
};

/// Everything needed to reconstruct and audit a run.
struct RunManifest {
  std::vector<std::pair<std::string, std::string>> resolved_config;
  std::uint64_t dataset_fingerprint = 0;
  std::string version = "vitad-0.1.0";
  double wall_seconds = 0;
  std::vector<EpochRecord> epochs;
  std::vector<double> step_losses;
  std::vector<EvalRecord> evals;
  int best_epoch = 0;
  std::uint64_t encoder_hash_before = 0;
  std::uint64_t encoder_hash_after = 0;
};

template <typename T = float>
struct TrainResult {
  RunManifest manifest;
  Snapshot<T> best;
  Snapshot<T> final;
  std::optional<EvalResult> best_eval;
  std::optional<EvalResult> final_eval;
};

/// Trains fuser and decoder on the pooled normal images of every class. The
/// model ends holding the final-epoch weights.
template <typename T>
TrainResult<T> train(VitadModel<T>& model, const DatasetIndex& index, const TrainConfig& cfg,
                     const EvalConfig& eval_cfg, std::ostream* progress = nullptr) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const auto& vc = model.vit_config();
  const auto size = static_cast<std::size_t>(vc.image_size);
  const auto train_recs = index.train();
  if (train_recs.empty()) throw ConfigError("train: dataset has no training images");
  {
    // Validate the stage set against the model before any work.
    const auto targets = model.decoder().target_indices();
    for (int s : cfg.constrained_stages)
      if (std::find(targets.begin(), targets.end(), s) == targets.end())
        throw ConfigError(detail::concat("train: stage ", s, " has no decoder reconstruction"));
    for (int s : eval_cfg.scoring.stages)
      if (std::find(targets.begin(), targets.end(), s) == targets.end())
        throw ConfigError(detail::concat("eval: scoring stage ", s, " has no decoder reconstruction"));
  }

  TrainResult<T> res;
  auto& man = res.manifest;
  man.encoder_hash_before = model.params().fingerprint(ParamGroup::encoder);

  // Raw [0,1] images; encoder tokens are cached when inputs never change.
  std::vector<Tensor<float>> raw;
  raw.reserve(train_recs.size());
  for (const Record* r : train_recs) {
    if (r->anomaly) throw ContractError("train: anomalous record in the training split: " + r->image_path.string());
    raw.push_back(load_image(r->image_path, size));
  }
  const bool cache = !cfg.augment.any();
  std::vector<std::pair<Tensor<T>, std::vector<Tensor<T>>>> tokens;
  if (cache)
    for (const auto& img : raw) tokens.push_back(model.encode_tokens(normalize(img, cfg.norm).template cast<T>()));

  std::optional<EvalSet<T>> eval_set;
  if (index.count(Split::test) > 0) eval_set = load_eval_set<T>(index, size, cfg.norm);
  const auto eval_at = eval_epochs(cfg.epochs, cfg.eval_points);

  auto trainable = model.params().trainable();
  AdamWState<T> state;
  const auto adam = cfg.adamw_config();
  const auto sched = cfg.schedule_config();
  const std::size_t n = raw.size();
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  double best_pixel = -1;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(epoch, sched);
    const auto order = epoch_permutation(n, cfg.seed, epoch);
    Rng aug_rng(hash_combine(cfg.seed, 0xa06000000ULL + static_cast<std::uint64_t>(epoch)));
    EpochRecord rec{epoch + 1, lr, 0.0, 0};
    for (std::size_t start = 0; start < n; start += bs) {
      const std::size_t end = std::min(n, start + bs);
      const T inv_b = T(1) / static_cast<T>(end - start);
      for (auto* p : trainable) p->zero_grad();
      double batch_loss = 0;
      try {
        for (std::size_t k = start; k < end; ++k) {
          const std::size_t i = order[k];
          Tape<T> tape;
          typename VitadModel<T>::TapeOutput out;
          if (cache) {
            std::vector<Var<T>> enc;
            for (const auto& s : tokens[i].second) enc.push_back(tape.constant(s));
            out = model.forward_from_features(tape.constant(tokens[i].first), std::move(enc));
          } else {
            const auto img = normalize(augment_image(raw[i], cfg.augment, aug_rng), cfg.norm).template cast<T>();
            out = model.forward(tape, img);
          }
          auto lookup = [&](int s) { return out.encoder[static_cast<std::size_t>(s) - 1]; };
          Var<T> loss = training_loss_tape<T>(lookup, out.decoder, out.decoder_targets,
                                              cfg.constrained_stages, cfg.loss);
          batch_loss += static_cast<double>(loss.value().item());
          tape.backward(scale(loss, inv_b));
        }
        for (auto* p : trainable)
          if (!p->grad.all_finite()) throw NumericalError("non-finite gradient for " + p->name);
      } catch (const NumericalError& e) {
        throw NumericalError(detail::concat("epoch ", epoch + 1, " batch ", start / bs, " (images ",
                                            start, "..", end - 1, "): ", e.what()));
      }
      adamw_step(trainable, state, lr, adam);
      batch_loss /= static_cast<double>(end - start);
      man.step_losses.push_back(batch_loss);
      rec.mean_loss += batch_loss;
      ++rec.steps;
    }
    rec.mean_loss /= static_cast<double>(rec.steps);
    man.epochs.push_back(rec);
    if (progress) *progress << "epoch " << rec.epoch << " lr " << lr << " loss " << rec.mean_loss << "\n";

    const bool last = epoch + 1 == cfg.epochs;
    if (eval_set && std::binary_search(eval_at.begin(), eval_at.end(), epoch + 1)) {
      auto ev = evaluate(model, *eval_set, eval_cfg);
      man.evals.push_back({epoch + 1, ev.mean, ev.per_class});
      const double px = ev.mean.pixel_auroc().value_or(-1);
      if (progress) {
        *progress << "eval epoch " << epoch + 1;
        if (ev.mean.image_auroc()) *progress << " image_auroc " << *ev.mean.image_auroc();
        if (ev.mean.pixel_auroc()) *progress << " pixel_auroc " << *ev.mean.pixel_auroc();
        if (auto m = ev.mean.mad()) *progress << " mad " << *m;
        *progress << "\n";
      }
      if (px > best_pixel || res.best.empty()) {
        best_pixel = px;
        man.best_epoch = epoch + 1;
        res.best = take_snapshot(model.params());
        res.best_eval = ev;
      }
      if (last) res.final_eval = std::move(ev);
    }
  }
  res.final = take_snapshot(model.params());
  if (res.best.empty()) {
    res.best = res.final;
    man.best_epoch = cfg.epochs;
  }
  man.encoder_hash_after = model.params().fingerprint(ParamGroup::encoder);
  man.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

}  // namespace vitad
