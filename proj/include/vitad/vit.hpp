#pragma once

#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "vitad/autodiff.hpp"
#include "vitad/params.hpp"

namespace vitad {

/// Geometry and layout of the columnar ViT used for both encoder and decoder.
struct ViTConfig {
  int image_size = 256;
  int patch_size = 16;
  int in_channels = 3;
  int embed_dim = 384;
  int num_heads = 6;
  int encoder_layers = 12;
  int encoder_divisions = 4;
  int decoder_layers = 9;
  int decoder_divisions = 3;
  // Explicit per-stage block counts; when non-empty they override the uniform
  // layers/divisions pair for that side.
  std::vector<int> encoder_division_list;
  std::vector<int> decoder_division_list;
  double mlp_ratio = 4.0;
  bool use_class_token = false;
  bool decoder_pos_embed = true;
  bool pre_norm_tap = true;
  double layer_norm_eps = 1e-6;
  // Init std for a randomly initialized (not loaded) encoder.
  double encoder_init_std = 0.02;

  int grid() const { return image_size / patch_size; }
  std::size_t num_tokens() const { return static_cast<std::size_t>(grid()) * grid(); }
  int head_dim() const { return embed_dim / num_heads; }
  int mlp_hidden() const { return static_cast<int>(std::lround(embed_dim * mlp_ratio)); }

  std::vector<int> encoder_stages() const {
    return encoder_division_list.empty() ? uniform(encoder_layers, encoder_divisions)
                                         : encoder_division_list;
  }
  std::vector<int> decoder_stages() const {
    return decoder_division_list.empty() ? uniform(decoder_layers, decoder_divisions)
                                         : decoder_division_list;
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("model: " + m); };
    if (image_size <= 0 || patch_size <= 0) fail("image_size and patch_size must be positive");
    if (image_size % patch_size != 0) fail("image_size must be divisible by patch_size");
    if (embed_dim <= 0 || num_heads <= 0) fail("embed_dim and num_heads must be positive");
    if (embed_dim % num_heads != 0) fail("embed_dim must be divisible by num_heads");
    if (in_channels <= 0) fail("in_channels must be positive");
    if (!(mlp_ratio > 0)) fail("mlp_ratio must be positive");
    auto check_list = [&](const std::vector<int>& list, int layers, const char* side) {
      if (list.empty()) fail(std::string(side) + " needs at least one division");
      for (int s : list)
        if (s <= 0) fail(std::string(side) + " division sizes must be positive");
      if (std::accumulate(list.begin(), list.end(), 0) != layers)
        fail(std::string(side) + " division list must sum to the layer count");
    };
    if (encoder_division_list.empty()) {
      if (encoder_divisions <= 0 || encoder_layers % encoder_divisions != 0)
        fail("encoder_layers must be divisible by encoder_divisions");
    } else {
      check_list(encoder_division_list, encoder_layers, "encoder");
    }
    if (decoder_division_list.empty()) {
      if (decoder_divisions <= 0 || decoder_layers % decoder_divisions != 0)
        fail("decoder_layers must be divisible by decoder_divisions");
      if (encoder_division_list.empty() && decoder_divisions != encoder_divisions - 1)
        fail("decoder_divisions must equal encoder_divisions - 1 unless explicit division lists "
             "are given");
    } else {
      check_list(decoder_division_list, decoder_layers, "decoder");
    }
    if (decoder_stages().size() > encoder_stages().size())
      fail("decoder cannot have more stages than the encoder (stages N-1 down to 0 are "
           "reconstructable)");
  }

 private:
  static std::vector<int> uniform(int layers, int divisions) {
    if (divisions <= 0) return {};
    return std::vector<int>(static_cast<std::size_t>(divisions), layers / divisions);
  }
};

/// Ordered token-grid features. Each stage tensor is [C, h, w]; `index[j]` is
/// the encoder stage number (1-based, 0 = stem) that stage j corresponds to.
template <typename T = float>
struct StageFeatures {
  std::vector<Tensor<T>> stages;
  std::vector<int> index;

  std::size_t size() const { return stages.size(); }

  const Tensor<T>& at_index(int stage) const {
    for (std::size_t j = 0; j < index.size(); ++j)
      if (index[j] == stage) return stages[j];
    throw ContractError(detail::concat("no feature for stage ", stage));
  }
  bool has_index(int stage) const {
    return std::find(index.begin(), index.end(), stage) != index.end();
  }
};

// [N, C] tokens in raster order -> [C, h, w]
template <typename T>
Tensor<T> tokens_to_chw(const Tensor<T>& tokens, std::size_t h, std::size_t w) {
  const std::size_t n = tokens.dim(0), c = tokens.dim(1);
  if (n != h * w) throw DimensionError(detail::concat(n, " tokens do not form a ", h, "x", w, " grid"));
  Tensor<T> out({c, h, w});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k) out[k * n + i] = tokens[i * c + k];
  return out;
}

// [C, h, w] -> [N, C]
template <typename T>
Tensor<T> chw_to_tokens(const Tensor<T>& chw) {
  if (chw.rank() != 3) throw DimensionError("expected a [C,h,w] tensor, got " + shape_str(chw.shape()));
  const std::size_t c = chw.dim(0), n = chw.dim(1) * chw.dim(2);
  Tensor<T> out({n, c});
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t i = 0; i < n; ++i) out[i * c + k] = chw[k * n + i];
  return out;
}

/// Pre-norm transformer block: x + MHSA(LN(x)), then + MLP(LN(.)).
template <typename T = float>
struct BlockParams {
  Parameter<T>* norm1_w;
  Parameter<T>* norm1_b;
  Parameter<T>* qkv_w;
  Parameter<T>* qkv_b;
  Parameter<T>* proj_w;
  Parameter<T>* proj_b;
  Parameter<T>* norm2_w;
  Parameter<T>* norm2_b;
  Parameter<T>* fc1_w;
  Parameter<T>* fc1_b;
  Parameter<T>* fc2_w;
  Parameter<T>* fc2_b;

  static BlockParams create(ParamStore<T>& store, const std::string& prefix, int dim, int hidden,
                            ParamGroup group, double std, Rng& rng) {
    const auto d = static_cast<std::size_t>(dim);
    const auto hd = static_cast<std::size_t>(hidden);
    BlockParams b;
    b.norm1_w = &store.add(prefix + ".norm1.weight", Tensor<T>::ones({d}), group);
    b.norm1_b = &store.add(prefix + ".norm1.bias", Tensor<T>::zeros({d}), group);
    b.qkv_w = &store.add(prefix + ".attn.qkv.weight", trunc_normal_tensor<T>({d, 3 * d}, std, rng), group);
    b.qkv_b = &store.add(prefix + ".attn.qkv.bias", Tensor<T>::zeros({3 * d}), group);
    b.proj_w = &store.add(prefix + ".attn.proj.weight", trunc_normal_tensor<T>({d, d}, std, rng), group);
    b.proj_b = &store.add(prefix + ".attn.proj.bias", Tensor<T>::zeros({d}), group);
    b.norm2_w = &store.add(prefix + ".norm2.weight", Tensor<T>::ones({d}), group);
    b.norm2_b = &store.add(prefix + ".norm2.bias", Tensor<T>::zeros({d}), group);
    b.fc1_w = &store.add(prefix + ".mlp.fc1.weight", trunc_normal_tensor<T>({d, hd}, std, rng), group);
    b.fc1_b = &store.add(prefix + ".mlp.fc1.bias", Tensor<T>::zeros({hd}), group);
    b.fc2_w = &store.add(prefix + ".mlp.fc2.weight", trunc_normal_tensor<T>({hd, d}, std, rng), group);
    b.fc2_b = &store.add(prefix + ".mlp.fc2.bias", Tensor<T>::zeros({d}), group);
    return b;
  }
};

template <typename T>
Var<T> linear(Var<T> x, Parameter<T>& w, Parameter<T>& b) {
  auto& tape = *x.tape;
  return add_bias(matmul(x, tape.param(w)), tape.param(b));
}

template <typename T>
Var<T> attention_block(Var<T> x, const BlockParams<T>& p, int num_heads, T eps) {
  auto& tape = *x.tape;
  const std::size_t dim = x.value().last_dim();
  if (x.value().rank() != 2) throw DimensionError("attention_block expects [tokens, dim] input");
  if (dim != p.proj_w->value.dim(0)) {
    throw DimensionError(detail::concat("attention_block: token width ", dim,
                                        " differs from embed_dim ", p.proj_w->value.dim(0)));
  }
  if (num_heads <= 0 || dim % static_cast<std::size_t>(num_heads) != 0) {
    throw ConfigError(detail::concat("attention_block: ", dim, " channels not divisible by ",
                                     num_heads, " heads"));
  }
  const std::size_t hd = dim / static_cast<std::size_t>(num_heads);
  const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(hd));

  Var<T> h = layer_norm(x, tape.param(*p.norm1_w), tape.param(*p.norm1_b), eps);
  Var<T> qkv = linear(h, *p.qkv_w, *p.qkv_b);
  std::vector<Var<T>> heads;
  heads.reserve(static_cast<std::size_t>(num_heads));
  for (std::size_t k = 0; k < static_cast<std::size_t>(num_heads); ++k) {
    Var<T> q = slice_lastdim(qkv, k * hd, hd);
    Var<T> kk = slice_lastdim(qkv, dim + k * hd, hd);
    Var<T> v = slice_lastdim(qkv, 2 * dim + k * hd, hd);
    Var<T> att = softmax_lastdim(scale(matmul(q, transpose(kk)), inv_sqrt));
    heads.push_back(matmul(att, v));
  }
  Var<T> merged = heads.size() == 1 ? heads.front() : concat_lastdim(heads);
  x = add(x, linear(merged, *p.proj_w, *p.proj_b));

  Var<T> h2 = layer_norm(x, tape.param(*p.norm2_w), tape.param(*p.norm2_b), eps);
  Var<T> mlp = linear(gelu(linear(h2, *p.fc1_w, *p.fc1_b)), *p.fc2_w, *p.fc2_b);
  return add(x, mlp);
}

// [C, H, W] image -> [N, C*P*P] patch rows; each row is ordered (c, py, px).
template <typename T>
Tensor<T> patchify(const Tensor<T>& image, int patch) {
  const std::size_t c = image.dim(0), hh = image.dim(1), ww = image.dim(2);
  const auto p = static_cast<std::size_t>(patch);
  const std::size_t gh = hh / p, gw = ww / p;
  Tensor<T> out({gh * gw, c * p * p});
  const std::size_t row = c * p * p;
  for (std::size_t gy = 0; gy < gh; ++gy)
    for (std::size_t gx = 0; gx < gw; ++gx) {
      T* dst = out.raw() + (gy * gw + gx) * row;
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t py = 0; py < p; ++py)
          for (std::size_t px = 0; px < p; ++px)
            *dst++ = image[(ch * hh + gy * p + py) * ww + gx * p + px];
    }
  return out;
}

/// Frozen columnar ViT encoder.
template <typename T = float>
class VitEncoder {
 public:
  struct Output {
    Var<T> stem;                // patch tokens + position embedding, class token excluded
    std::vector<Var<T>> stages; // F_1..F_N as [N, C] tokens
  };

  VitEncoder() = default;

  VitEncoder(const ViTConfig& cfg, ParamStore<T>& store, Rng& rng) : cfg_(cfg) {
    const auto d = static_cast<std::size_t>(cfg.embed_dim);
    const auto patch_in = static_cast<std::size_t>(cfg.in_channels) * cfg.patch_size * cfg.patch_size;
    const double std = cfg.encoder_init_std;
    const auto g = ParamGroup::encoder;
    patch_w_ = &store.add("encoder.patch_embed.weight", trunc_normal_tensor<T>({patch_in, d}, std, rng), g);
    patch_b_ = &store.add("encoder.patch_embed.bias", Tensor<T>::zeros({d}), g);
    const std::size_t npos = cfg.num_tokens() + (cfg.use_class_token ? 1 : 0);
    pos_ = &store.add("encoder.pos_embed", trunc_normal_tensor<T>({npos, d}, 0.02, rng), g);
    if (cfg.use_class_token)
      cls_ = &store.add("encoder.cls_token", trunc_normal_tensor<T>({1, d}, 0.02, rng), g);
    int layer = 0;
    for (int s : cfg.encoder_stages())
      for (int i = 0; i < s; ++i, ++layer)
        blocks_.push_back(BlockParams<T>::create(store, "encoder.blocks." + std::to_string(layer),
                                                 cfg.embed_dim, cfg.mlp_hidden(), g, std, rng));
    norm_w_ = &store.add("encoder.norm.weight", Tensor<T>::ones({d}), g);
    norm_b_ = &store.add("encoder.norm.bias", Tensor<T>::zeros({d}), g);
  }

  Var<T> patch_embed(Tape<T>& tape, const Tensor<T>& image) const {
    const auto s = static_cast<std::size_t>(cfg_.image_size);
    if (image.rank() != 3 || image.dim(0) != static_cast<std::size_t>(cfg_.in_channels) ||
        image.dim(1) != s || image.dim(2) != s) {
      throw DimensionError(detail::concat("encoder expects a [", cfg_.in_channels, ",", s, ",", s,
                                          "] image, got ", shape_str(image.shape())));
    }
    Var<T> patches = tape.constant(patchify(image, cfg_.patch_size));
    Var<T> tokens = linear(patches, *patch_w_, *patch_b_);
    Var<T> pos = tape.param(*pos_);
    if (cfg_.use_class_token) pos = slice_rows(pos, 1, cfg_.num_tokens());
    return add(tokens, pos);
  }

  Output forward(Tape<T>& tape, const Tensor<T>& image) const {
    Output out;
    out.stem = patch_embed(tape, image);
    Var<T> x = out.stem;
    const std::size_t n = cfg_.num_tokens();
    if (cfg_.use_class_token) {
      Var<T> cls = add(tape.param(*cls_), slice_rows(tape.param(*pos_), 0, 1));
      x = concat_rows(cls, x);
    }
    auto strip = [&](Var<T> v) { return cfg_.use_class_token ? slice_rows(v, 1, n) : v; };
    const T eps = static_cast<T>(cfg_.layer_norm_eps);
    const auto stages = cfg_.encoder_stages();
    std::size_t layer = 0;
    for (std::size_t s = 0; s < stages.size(); ++s) {
      for (int i = 0; i < stages[s]; ++i) x = attention_block(x, blocks_[layer++], cfg_.num_heads, eps);
      const bool last = s + 1 == stages.size();
      if (last && !cfg_.pre_norm_tap)
        out.stages.push_back(strip(layer_norm(x, tape.param(*norm_w_), tape.param(*norm_b_), eps)));
      else
        out.stages.push_back(strip(x));
    }
    return out;
  }

  const ViTConfig& config() const { return cfg_; }

 private:
  ViTConfig cfg_;
  Parameter<T>* patch_w_ = nullptr;
  Parameter<T>* patch_b_ = nullptr;
  Parameter<T>* pos_ = nullptr;
  Parameter<T>* cls_ = nullptr;
  Parameter<T>* norm_w_ = nullptr;
  Parameter<T>* norm_b_ = nullptr;
  std::vector<BlockParams<T>> blocks_;
};

/// Randomly initialized ViT decoder of the same block type. With N encoder
/// stages and K decoder stages, the taps reconstruct encoder stages N-1 down
/// to N-K (stage 0 is the stem).
template <typename T = float>
class VitDecoder {
 public:
  VitDecoder() = default;

  VitDecoder(const ViTConfig& cfg, ParamStore<T>& store, Rng& rng) : cfg_(cfg) {
    const auto d = static_cast<std::size_t>(cfg.embed_dim);
    const auto g = ParamGroup::decoder;
    if (cfg.decoder_pos_embed)
      pos_ = &store.add("decoder.pos_embed", trunc_normal_tensor<T>({cfg.num_tokens(), d}, 0.02, rng), g);
    int layer = 0;
    for (int s : cfg.decoder_stages())
      for (int i = 0; i < s; ++i, ++layer)
        blocks_.push_back(BlockParams<T>::create(store, "decoder.blocks." + std::to_string(layer),
                                                 cfg.embed_dim, cfg.mlp_hidden(), g, 0.02, rng));
  }

  // Encoder stage numbers reconstructed by each decoder stage, in emission order.
  std::vector<int> target_indices() const {
    const int n = static_cast<int>(cfg_.encoder_stages().size());
    const int k = static_cast<int>(cfg_.decoder_stages().size());
    std::vector<int> out;
    for (int i = n - 1; i >= n - k; --i) out.push_back(i);
    return out;
  }

  std::vector<Var<T>> forward(Var<T> fused) const {
    auto& tape = *fused.tape;
    const auto& fv = fused.value();
    if (fv.rank() != 2 || fv.dim(0) != cfg_.num_tokens() ||
        fv.dim(1) != static_cast<std::size_t>(cfg_.embed_dim)) {
      throw DimensionError(detail::concat("decoder expects [", cfg_.num_tokens(), ",",
                                          cfg_.embed_dim, "] fused tokens, got ",
                                          shape_str(fv.shape())));
    }
    Var<T> x = cfg_.decoder_pos_embed ? add(fused, tape.param(*pos_)) : fused;
    const T eps = static_cast<T>(cfg_.layer_norm_eps);
    std::vector<Var<T>> out;
    std::size_t layer = 0;
    for (int s : cfg_.decoder_stages()) {
      for (int i = 0; i < s; ++i) x = attention_block(x, blocks_[layer++], cfg_.num_heads, eps);
      out.push_back(x);
    }
    return out;
  }

 private:
  ViTConfig cfg_;
  Parameter<T>* pos_ = nullptr;
  std::vector<BlockParams<T>> blocks_;
};

}  // namespace vitad
