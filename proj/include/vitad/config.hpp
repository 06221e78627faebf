#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "vitad/synth.hpp"
#include "vitad/train.hpp"

namespace vitad {

/// Every tunable of one invocation, addressable by dotted key.
struct RunConfig {
  ViTConfig model;
  std::uint64_t model_seed = 0;
  std::string encoder_weights;  // optional archive holding pretrained encoder tensors
  FuserConfig fuser;
  TrainConfig train;
  EvalConfig eval;
  SynthConfig synth;
};

/// Shortest round-trip decimal, switching to exponent form when that is
/// shorter (1e-4 rather than 0.0001).
inline std::string format_real(double v) {
  char fixed[64], sci[64];
  auto r1 = std::to_chars(fixed, fixed + sizeof fixed, v);
  auto r2 = std::to_chars(sci, sci + sizeof sci, v, std::chars_format::scientific);
  std::string a(fixed, r1.ptr), b(sci, r2.ptr);
  // 1e-04 -> 1e-4, 1e+02 -> 1e2
  if (auto e = b.find('e'); e != std::string::npos) {
    std::string mant = b.substr(0, e), exp = b.substr(e + 1);
    std::string sign;
    if (!exp.empty() && (exp[0] == '+' || exp[0] == '-')) {
      if (exp[0] == '-') sign = "-";
      exp.erase(0, 1);
    }
    while (exp.size() > 1 && exp[0] == '0') exp.erase(0, 1);
    b = mant + "e" + sign + exp;
  }
  return b.size() < a.size() ? b : a;
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, ',')) {
    cur = trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

template <typename N>
N parse_number(const std::string& key, const std::string& s) {
  N v{};
  const auto t = trim(s);
  auto r = std::from_chars(t.data(), t.data() + t.size(), v);
  if (r.ec != std::errc() || r.ptr != t.data() + t.size() || t.empty())
    throw ConfigError("config key " + key + ": cannot parse '" + s + "' as a number");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& s) {
  const auto t = trim(s);
  if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
  if (t == "false" || t == "0" || t == "no" || t == "off") return false;
  throw ConfigError("config key " + key + ": expected a boolean, got '" + s + "'");
}

template <typename N>
std::string join(const N& xs) {
  std::string out;
  for (const auto& x : xs) {
    if (!out.empty()) out += ",";
    if constexpr (std::is_floating_point_v<std::decay_t<decltype(x)>>)
      out += format_real(x);
    else
      out += std::to_string(x);
  }
  return out;
}

}  // namespace detail

/// Dotted-key view over a RunConfig. Keys are listed in a fixed order so the
/// resolved echo is stable.
class ConfigRegistry {
 public:
  explicit ConfigRegistry(RunConfig& cfg) : cfg_(cfg) { build(); }

  bool has(const std::string& key) const { return index_.contains(key); }

  void set(const std::string& key, const std::string& value) {
    auto it = index_.find(key);
    if (it == index_.end()) throw ConfigError("unknown config key: " + key);
    entries_[it->second].set(value);
    explicit_[key] = true;
  }

  std::string get(const std::string& key) const {
    auto it = index_.find(key);
    if (it == index_.end()) throw ConfigError("unknown config key: " + key);
    return entries_[it->second].get();
  }

  bool was_set(const std::string& key) const { return explicit_.contains(key); }

  std::vector<std::pair<std::string, std::string>> resolved() const {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& e : entries_) out.emplace_back(e.key, e.get());
    return out;
  }

  /// Applies a key=value file; blank lines and `#` comments are ignored.
  void load_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path.string());
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
      line = detail::trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError(detail::concat(path.string(), ":", lineno, ": expected key=value"));
      set(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    }
  }

  std::string echo() const {
    std::string out;
    for (const auto& [k, v] : resolved()) out += k + "=" + v + "\n";
    return out;
  }

 private:
  struct Entry {
    std::string key;
    std::function<void(const std::string&)> set;
    std::function<std::string()> get;
  };

  void add(std::string key, std::function<void(const std::string&)> set, std::function<std::string()> get) {
    index_.emplace(key, entries_.size());
    entries_.push_back({std::move(key), std::move(set), std::move(get)});
  }
  void add_int(const std::string& key, int& v) {
    add(key, [&v, key](const std::string& s) { v = detail::parse_number<int>(key, s); },
        [&v] { return std::to_string(v); });
  }
  void add_size(const std::string& key, std::size_t& v) {
    add(key, [&v, key](const std::string& s) { v = detail::parse_number<std::size_t>(key, s); },
        [&v] { return std::to_string(v); });
  }
  void add_u64(const std::string& key, std::uint64_t& v) {
    add(key, [&v, key](const std::string& s) { v = detail::parse_number<std::uint64_t>(key, s); },
        [&v] { return std::to_string(v); });
  }
  void add_real(const std::string& key, double& v) {
    add(key, [&v, key](const std::string& s) { v = detail::parse_number<double>(key, s); },
        [&v] { return format_real(v); });
  }
  void add_bool(const std::string& key, bool& v) {
    add(key, [&v, key](const std::string& s) { v = detail::parse_bool(key, s); },
        [&v] { return std::string(v ? "true" : "false"); });
  }
  void add_str(const std::string& key, std::string& v) {
    add(key, [&v](const std::string& s) { v = detail::trim(s); }, [&v] { return v; });
  }
  template <typename C>
  void add_int_list(const std::string& key, C& v) {
    add(key,
        [&v, key](const std::string& s) {
          C out;
          for (const auto& p : detail::split_list(s)) out.insert(out.end(), detail::parse_number<int>(key, p));
          v = std::move(out);
        },
        [&v] { return detail::join(v); });
  }
  void add_real3(const std::string& key, std::array<double, 3>& v) {
    add(key,
        [&v, key](const std::string& s) {
          const auto parts = detail::split_list(s);
          if (parts.size() != 3) throw ConfigError("config key " + key + ": expected three values");
          for (std::size_t i = 0; i < 3; ++i) v[i] = detail::parse_number<double>(key, parts[i]);
        },
        [&v] { return detail::join(v); });
  }

  void build() {
    auto& m = cfg_.model;
    add_int("model.image_size", m.image_size);
    add_int("model.patch_size", m.patch_size);
    add_int("model.in_channels", m.in_channels);
    add_int("model.embed_dim", m.embed_dim);
    add_int("model.num_heads", m.num_heads);
    add_int("model.encoder_layers", m.encoder_layers);
    add_int("model.encoder_divisions", m.encoder_divisions);
    add_int("model.decoder_layers", m.decoder_layers);
    add_int("model.decoder_divisions", m.decoder_divisions);
    add_int_list("model.encoder_division_list", m.encoder_division_list);
    add_int_list("model.decoder_division_list", m.decoder_division_list);
    add_real("model.mlp_ratio", m.mlp_ratio);
    add_bool("model.use_class_token", m.use_class_token);
    add_bool("model.decoder_pos_embed", m.decoder_pos_embed);
    add_bool("model.pre_norm_tap", m.pre_norm_tap);
    add_real("model.layer_norm_eps", m.layer_norm_eps);
    add_real("model.encoder_init_std", m.encoder_init_std);
    add_u64("model.seed", cfg_.model_seed);
    add_str("model.encoder_weights", cfg_.encoder_weights);

    auto& f = cfg_.fuser;
    add("fuser.variant", [&f](const std::string& s) { f.variant = parse_fuser_variant(detail::trim(s)); },
        [&f] { return std::string(to_string(f.variant)); });
    add_int_list("fuser.stage_selection", f.stage_selection);
    add_int("fuser.n_layers", f.n_layers);
    add_str("fuser.resize_policy", f.resize_policy);

    auto& t = cfg_.train;
    add_real("train.lr", t.lr);
    add_real("train.weight_decay", t.weight_decay);
    add_real("train.beta1", t.beta1);
    add_real("train.beta2", t.beta2);
    add_real("train.eps", t.eps);
    add_int("train.batch_size", t.batch_size);
    add_int("train.epochs", t.epochs);
    add_int("train.lr_drop_epoch", t.lr_drop_epoch);
    add_real("train.lr_drop_factor", t.lr_drop_factor);
    add("train.schedule",
        [&t](const std::string& s) {
          const auto v = detail::trim(s);
          if (v == "step") t.schedule = LrSchedule::step;
          else if (v == "cosine") t.schedule = LrSchedule::cosine;
          else throw ConfigError("config key train.schedule: expected step or cosine, got '" + v + "'");
        },
        [&t] { return std::string(t.schedule == LrSchedule::step ? "step" : "cosine"); });
    add_int("train.eval_points", t.eval_points);
    add("train.loss", [&t](const std::string& s) { t.loss = parse_loss_kind(detail::trim(s)); },
        [&t] { return std::string(to_string(t.loss)); });
    add_int_list("train.constrained_stages", t.constrained_stages);
    add_u64("train.seed", t.seed);
    add_bool("train.augment.center_crop", t.augment.center_crop);
    add_bool("train.augment.color_jitter", t.augment.color_jitter);
    add_bool("train.augment.hflip", t.augment.hflip);
    add_bool("train.augment.rotation", t.augment.rotation);
    add_bool("train.augment.random_resized_crop", t.augment.random_resized_crop);
    add_real3("train.norm.mean", t.norm.mean);
    add_real3("train.norm.std", t.norm.std);

    auto& e = cfg_.eval;
    add_int_list("eval.stages", e.scoring.stages);
    add_size("eval.pool_window", e.scoring.pool_window);
    add_bool("eval.smoothing", e.scoring.smoothing);
    add_real("eval.smoothing_sigma", e.scoring.smoothing_sigma);
    add_real("eval.fpr_cap", e.aupro.fpr_cap);
    add_size("eval.aupro_bins", e.aupro.quantized_bins);
    add_int("eval.workers", e.workers);
    add_bool("eval.oracle_masks", e.oracle_masks);

    auto& s = cfg_.synth;
    add_int("synth.classes", s.num_classes);
    add_int("synth.train", s.train_per_class);
    add_int("synth.test_normal", s.test_normal_per_class);
    add_int("synth.test_anomaly", s.test_anomaly_per_class);
    add_int("synth.image_size", s.image_size);
    add("synth.defect_types",
        [&s](const std::string& v) {
          std::vector<DefectType> out;
          for (const auto& p : detail::split_list(v)) out.push_back(parse_defect_type(p));
          s.defect_types = std::move(out);
        },
        [&s] {
          std::string out;
          for (auto d : s.defect_types) out += (out.empty() ? "" : ",") + std::string(to_string(d));
          return out;
        });
    add_u64("synth.seed", s.seed);
  }

  RunConfig& cfg_;
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
  std::map<std::string, bool> explicit_;
};

}  // namespace vitad
