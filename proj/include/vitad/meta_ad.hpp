#pragma once

#include <algorithm>
#include <string>
#include <utility>
#include <vector>

#include "vitad/vit.hpp"

namespace vitad {

enum class FuserVariant {
  last_stage_linear,
  concat_stages,
  add_stages,
  conv_bottleneck,
  vit_blocks,
  identity,
};

inline const char* to_string(FuserVariant v) {
  switch (v) {
    case FuserVariant::last_stage_linear: return "last_stage_linear";
    case FuserVariant::concat_stages: return "concat_stages";
    case FuserVariant::add_stages: return "add_stages";
    case FuserVariant::conv_bottleneck: return "conv_bottleneck";
    case FuserVariant::vit_blocks: return "vit_blocks";
    case FuserVariant::identity: return "identity";
  }
  return "?";
}

inline FuserVariant parse_fuser_variant(const std::string& s) {
  for (auto v : {FuserVariant::last_stage_linear, FuserVariant::concat_stages,
                 FuserVariant::add_stages, FuserVariant::conv_bottleneck,
                 FuserVariant::vit_blocks, FuserVariant::identity})
    if (s == to_string(v)) return v;
  throw ConfigError("unknown fuser variant: " + s);
}

struct FuserConfig {
  FuserVariant variant = FuserVariant::last_stage_linear;
  // Stage indices used by concat/add (0 = stem). Ignored by other variants.
  std::vector<int> stage_selection{1, 2, 3, 4};
  // Extra layers for conv_bottleneck / vit_blocks.
  int n_layers = 1;
  // Per-stage resampling before fusion. Only "identity" exists: every stage of
  // a columnar ViT already shares one grid.
  std::string resize_policy = "identity";

  void validate(int num_stages) const {
    if (resize_policy != "identity")
      throw ConfigError("fuser: only the identity resize policy is available");
    if (variant == FuserVariant::concat_stages || variant == FuserVariant::add_stages) {
      if (stage_selection.empty()) throw ConfigError("fuser: stage selection must be nonempty");
      for (int s : stage_selection)
        if (s < 0 || s > num_stages)
          throw ConfigError(detail::concat("fuser: stage ", s, " outside 0..", num_stages));
    }
    if (n_layers < 0) throw ConfigError("fuser: n_layers must be >= 0");
  }
};

/// Converts encoder stage tokens into the decoder input.
template <typename T = float>
class Fuser {
 public:
  Fuser() = default;

  Fuser(const FuserConfig& cfg, const ViTConfig& vit, ParamStore<T>& store, Rng& rng)
      : cfg_(cfg), num_heads_(vit.num_heads), eps_(static_cast<T>(vit.layer_norm_eps)),
        grid_(static_cast<std::size_t>(vit.grid())) {
    const int n = static_cast<int>(vit.encoder_stages().size());
    cfg.validate(n);
    const auto d = static_cast<std::size_t>(vit.embed_dim);
    const auto g = ParamGroup::fuser;
    if (cfg.variant == FuserVariant::identity) return;
    const std::size_t in =
        cfg.variant == FuserVariant::concat_stages ? d * cfg.stage_selection.size() : d;
    linear_w_ = &store.add("fuser.linear.weight", trunc_normal_tensor<T>({in, d}, 0.02, rng), g);
    linear_b_ = &store.add("fuser.linear.bias", Tensor<T>::zeros({d}), g);
    for (int i = 0; i < cfg.n_layers; ++i) {
      const std::string pre = "fuser.layers." + std::to_string(i);
      if (cfg.variant == FuserVariant::conv_bottleneck) {
        Bottleneck b;
        b.w1 = &store.add(pre + ".conv1.weight", trunc_normal_tensor<T>({d, d}, 0.02, rng), g);
        b.b1 = &store.add(pre + ".conv1.bias", Tensor<T>::zeros({d}), g);
        b.w2 = &store.add(pre + ".conv2.weight", trunc_normal_tensor<T>({9 * d, d}, 0.02, rng), g);
        b.b2 = &store.add(pre + ".conv2.bias", Tensor<T>::zeros({d}), g);
        b.w3 = &store.add(pre + ".conv3.weight", trunc_normal_tensor<T>({d, d}, 0.02, rng), g);
        b.b3 = &store.add(pre + ".conv3.bias", Tensor<T>::zeros({d}), g);
        bottlenecks_.push_back(b);
      } else if (cfg.variant == FuserVariant::vit_blocks) {
        blocks_.push_back(BlockParams<T>::create(store, pre, vit.embed_dim, vit.mlp_hidden(), g,
                                                 0.02, rng));
      }
    }
  }

  // `stem` is stage 0; `stages[i-1]` is F_i.
  Var<T> forward(Var<T> stem, const std::vector<Var<T>>& stages) const {
    auto pick = [&](int s) -> Var<T> {
      if (s == 0) return stem;
      if (s < 0 || static_cast<std::size_t>(s) > stages.size())
        throw ConfigError(detail::concat("fuser: stage ", s, " not available"));
      return stages[static_cast<std::size_t>(s) - 1];
    };
    const Var<T> last = stages.back();
    switch (cfg_.variant) {
      case FuserVariant::identity:
        return last;
      case FuserVariant::concat_stages: {
        std::vector<Var<T>> parts;
        for (int s : cfg_.stage_selection) parts.push_back(pick(s));
        const Var<T> cat = parts.size() == 1 ? parts.front() : concat_lastdim(parts);
        return linear(cat, *linear_w_, *linear_b_);
      }
      case FuserVariant::add_stages: {
        Var<T> acc = pick(cfg_.stage_selection.front());
        for (std::size_t k = 1; k < cfg_.stage_selection.size(); ++k)
          acc = add(acc, pick(cfg_.stage_selection[k]));
        return linear(acc, *linear_w_, *linear_b_);
      }
      case FuserVariant::last_stage_linear:
      case FuserVariant::conv_bottleneck:
      case FuserVariant::vit_blocks:
        break;
    }
    Var<T> x = linear(last, *linear_w_, *linear_b_);
    for (const auto& b : bottlenecks_) {
      // 1x1 -> 3x3 -> 1x1 residual bottleneck on the token grid
      Var<T> y = gelu(linear(x, *b.w1, *b.b1));
      y = gelu(linear(im2col3x3(y, grid_, grid_), *b.w2, *b.b2));
      y = linear(y, *b.w3, *b.b3);
      x = add(x, y);
    }
    for (const auto& b : blocks_) x = attention_block(x, b, num_heads_, eps_);
    return x;
  }

  const FuserConfig& config() const { return cfg_; }

 private:
  struct Bottleneck {
    Parameter<T>* w1;
    Parameter<T>* b1;
    Parameter<T>* w2;
    Parameter<T>* b2;
    Parameter<T>* w3;
    Parameter<T>* b3;
  };

  FuserConfig cfg_;
  int num_heads_ = 1;
  T eps_ = T(1e-6);
  std::size_t grid_ = 1;
  Parameter<T>* linear_w_ = nullptr;
  Parameter<T>* linear_b_ = nullptr;
  std::vector<Bottleneck> bottlenecks_;
  std::vector<BlockParams<T>> blocks_;
};

/// Frozen encoder, fuser and trainable decoder sharing one parameter store.
/// Encoder, fuser and decoder draw from independent seeded streams, so the
/// decoder init does not depend on the encoder or fuser shape.
template <typename T = float>
class VitadModel {
 public:
  struct TapeOutput {
    std::vector<Var<T>> encoder;       // F_1..F_N tokens
    Var<T> stem;
    Var<T> fused;
    std::vector<Var<T>> decoder;       // emission order
    std::vector<int> decoder_targets;  // encoder stage paired with each decoder output
  };

  VitadModel(ViTConfig vit, FuserConfig fuser, std::uint64_t seed)
      : vit_(std::move(vit)), fuser_cfg_(std::move(fuser)), seed_(seed) {
    vit_.validate();
    Rng enc_rng(hash_combine(seed, 1));
    Rng fuse_rng(hash_combine(seed, 2));
    Rng dec_rng(hash_combine(seed, 3));
    encoder_ = VitEncoder<T>(vit_, params_, enc_rng);
    fuser_ = Fuser<T>(fuser_cfg_, vit_, params_, fuse_rng);
    decoder_ = VitDecoder<T>(vit_, params_, dec_rng);
  }

  VitadModel(const VitadModel&) = delete;
  VitadModel& operator=(const VitadModel&) = delete;

  const ViTConfig& vit_config() const { return vit_; }
  const FuserConfig& fuser_config() const { return fuser_cfg_; }
  std::uint64_t seed() const { return seed_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  const VitEncoder<T>& encoder() const { return encoder_; }
  const VitDecoder<T>& decoder() const { return decoder_; }
  const Fuser<T>& fuser() const { return fuser_; }

  std::size_t grid() const { return static_cast<std::size_t>(vit_.grid()); }

  // Decoder half of the pipeline on already-computed encoder tokens.
  TapeOutput forward_from_features(Var<T> stem, std::vector<Var<T>> enc) const {
    TapeOutput out;
    out.stem = stem;
    out.encoder = std::move(enc);
    out.fused = fuser_.forward(out.stem, out.encoder);
    out.decoder = decoder_.forward(out.fused);
    out.decoder_targets = decoder_.target_indices();
    return out;
  }

  TapeOutput forward(Tape<T>& tape, const Tensor<T>& image) const {
    auto enc = encoder_.forward(tape, image);
    return forward_from_features(enc.stem, std::move(enc.stages));
  }

  // Encoder stem + stages as plain [N, C] token tensors (no gradient).
  std::pair<Tensor<T>, std::vector<Tensor<T>>> encode_tokens(const Tensor<T>& image) const {
    Tape<T> tape(false);
    auto enc = encoder_.forward(tape, image);
    std::vector<Tensor<T>> stages;
    for (auto v : enc.stages) stages.push_back(v.value());
    return {enc.stem.value(), std::move(stages)};
  }

 private:
  ViTConfig vit_;
  FuserConfig fuser_cfg_;
  std::uint64_t seed_;
  ParamStore<T> params_;
  VitEncoder<T> encoder_;
  Fuser<T> fuser_;
  VitDecoder<T> decoder_;
};

/// Full inference pass: encoder features F_1..F_N and decoder reconstructions
/// in emission order (F^_{N-1} first), each as [C, h, w].
template <typename T>
std::pair<StageFeatures<T>, StageFeatures<T>> vitad_forward(const Tensor<T>& image,
                                                            const VitadModel<T>& model) {
  Tape<T> tape(false);
  auto out = model.forward(tape, image);
  const std::size_t g = model.grid();
  StageFeatures<T> enc, dec;
  for (std::size_t i = 0; i < out.encoder.size(); ++i) {
    enc.stages.push_back(tokens_to_chw(out.encoder[i].value(), g, g));
    enc.index.push_back(static_cast<int>(i) + 1);
  }
  for (std::size_t j = 0; j < out.decoder.size(); ++j) {
    dec.stages.push_back(tokens_to_chw(out.decoder[j].value(), g, g));
    dec.index.push_back(out.decoder_targets[j]);
  }
  return {std::move(enc), std::move(dec)};
}

/// Encoder features including the stem as stage 0.
template <typename T>
StageFeatures<T> encoder_features_with_stem(const Tensor<T>& image, const VitadModel<T>& model) {
  auto [stem, stages] = model.encode_tokens(image);
  const std::size_t g = model.grid();
  StageFeatures<T> out;
  out.stages.push_back(tokens_to_chw(stem, g, g));
  out.index.push_back(0);
  for (std::size_t i = 0; i < stages.size(); ++i) {
    out.stages.push_back(tokens_to_chw(stages[i], g, g));
    out.index.push_back(static_cast<int>(i) + 1);
  }
  return out;
}

}  // namespace vitad
