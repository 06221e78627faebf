#include <gtest/gtest.h>

#include <chrono>

#include "test_util.hpp"

using namespace vitad;
using testutil::random_tensor;

namespace {

FuserConfig variant(FuserVariant v, int n_layers = 1) {
  FuserConfig f;
  f.variant = v;
  f.n_layers = n_layers;
  return f;
}

// Runs the fuser of `m` on random stem + stage tokens.
struct FuserRun {
  std::vector<Tensor<double>> inputs;  // stem, F_1..F_N
  Tensor<double> out;
};

FuserRun run_fuser(const VitadModel<double>& m, Rng& rng, std::vector<Tensor<double>> inputs = {}) {
  const std::size_t n = m.vit_config().num_tokens(), d = static_cast<std::size_t>(m.vit_config().embed_dim);
  if (inputs.empty())
    for (std::size_t i = 0; i <= m.vit_config().encoder_stages().size(); ++i)
      inputs.push_back(random_tensor({n, d}, rng));
  Tape<double> t(false);
  std::vector<Var<double>> stages;
  for (std::size_t i = 1; i < inputs.size(); ++i) stages.push_back(t.constant(inputs[i]));
  auto out = m.fuser().forward(t.constant(inputs[0]), stages).value();
  return {std::move(inputs), std::move(out)};
}

void set_identity(Parameter<double>& w) {
  w.value.fill(0.0);
  for (std::size_t i = 0; i < w.value.dim(1); ++i) w.value[i * w.value.dim(1) + i] = 1.0;
}

}  // namespace

TEST(Fuser, IdentityInitializedLinearPassesLastStage) {
  VitadModel<double> m(testutil::tiny_vit(), {}, 0);
  set_identity(m.params().get("fuser.linear.weight"));
  Rng rng(1);
  const auto r = run_fuser(m, rng);
  EXPECT_EQ(r.out, r.inputs.back());
}

TEST(Fuser, IdentityVariantHasNoParameters) {
  VitadModel<double> m(testutil::tiny_vit(), variant(FuserVariant::identity), 0);
  EXPECT_EQ(m.params().count(ParamGroup::fuser), 0u);
  Rng rng(2);
  const auto r = run_fuser(m, rng);
  EXPECT_EQ(r.out, r.inputs.back());
}

TEST(Fuser, ConcatOfFourStagesHasWidthFourC) {
  VitadModel<double> m(testutil::tiny_vit(), variant(FuserVariant::concat_stages), 0);
  EXPECT_EQ(m.params().get("fuser.linear.weight").value.shape(), (Shape{64, 16}));
  Rng rng(3);
  EXPECT_EQ(run_fuser(m, rng).out.shape(), (Shape{16, 16}));
}

TEST(Fuser, ConcatWithStemSelection) {
  auto f = variant(FuserVariant::concat_stages);
  f.stage_selection = {0, 1, 2, 3, 4};
  VitadModel<double> m(testutil::tiny_vit(), f, 0);
  EXPECT_EQ(m.params().get("fuser.linear.weight").value.dim(0), 80u);
  Rng rng(3);
  EXPECT_EQ(run_fuser(m, rng).out.shape(), (Shape{16, 16}));
}

TEST(Fuser, AddStagesIsLinearOfTheSum) {
  auto f = variant(FuserVariant::add_stages);
  f.stage_selection = {2, 4};
  VitadModel<double> m(testutil::tiny_vit(), f, 0);
  set_identity(m.params().get("fuser.linear.weight"));
  Rng rng(4);
  const auto r = run_fuser(m, rng);
  for (std::size_t i = 0; i < r.out.numel(); ++i)
    EXPECT_DOUBLE_EQ(r.out[i], r.inputs[2][i] + r.inputs[4][i]);
}

TEST(Fuser, OutputShapeIsTheSameForEveryVariant) {
  for (auto v : {FuserVariant::last_stage_linear, FuserVariant::concat_stages, FuserVariant::add_stages,
                 FuserVariant::conv_bottleneck, FuserVariant::vit_blocks, FuserVariant::identity}) {
    VitadModel<double> m(testutil::tiny_vit(), variant(v, 2), 0);
    Rng rng(5);
    EXPECT_EQ(run_fuser(m, rng).out.shape(), (Shape{16, 16})) << to_string(v);
  }
}

TEST(Fuser, LastStageLinearIgnoresEarlierStages) {
  VitadModel<double> m(testutil::tiny_vit(), {}, 0);
  Rng rng(6);
  const auto base = run_fuser(m, rng);
  for (int trial = 0; trial < 5; ++trial) {
    auto inputs = base.inputs;
    for (std::size_t i = 0; i + 1 < inputs.size(); ++i) inputs[i] = random_tensor(inputs[i].shape(), rng, -5, 5);
    EXPECT_EQ(run_fuser(m, rng, inputs).out, base.out);
  }
  auto inputs = base.inputs;
  inputs.back()[0] += 1.0;
  EXPECT_NE(run_fuser(m, rng, inputs).out, base.out);
}

TEST(Fuser, ZeroExtraLayersDegradeToLastStageLinear) {
  VitadModel<double> ref(testutil::tiny_vit(), {}, 9);
  Rng rng(7);
  const auto base = run_fuser(ref, rng);
  for (auto v : {FuserVariant::conv_bottleneck, FuserVariant::vit_blocks}) {
    VitadModel<double> m(testutil::tiny_vit(), variant(v, 0), 9);
    EXPECT_EQ(m.params().count(ParamGroup::fuser), ref.params().count(ParamGroup::fuser));
    EXPECT_EQ(run_fuser(m, rng, base.inputs).out, base.out) << to_string(v);
  }
}

TEST(Fuser, BottleneckUsesThreeByThreeNeighbourhood) {
  VitadModel<double> m(testutil::tiny_vit(), variant(FuserVariant::conv_bottleneck, 1), 0);
  EXPECT_EQ(m.params().get("fuser.layers.0.conv2.weight").value.shape(), (Shape{9 * 16, 16}));
  // perturbing F_4 at one token moves the output only within its 3x3 window
  set_identity(m.params().get("fuser.linear.weight"));
  Rng rng(8);
  const auto base = run_fuser(m, rng);
  auto inputs = base.inputs;
  for (std::size_t k = 0; k < 16; ++k) inputs.back()[0 * 16 + k] += 0.5;  // token (0,0)
  const auto moved = run_fuser(m, rng, inputs).out;
  for (std::size_t tok = 0; tok < 16; ++tok) {
    const std::size_t y = tok / 4, x = tok % 4;
    bool same = true;
    for (std::size_t k = 0; k < 16; ++k) same = same && moved[tok * 16 + k] == base.out[tok * 16 + k];
    EXPECT_EQ(same, y > 1 || x > 1) << "token " << tok;
  }
}

TEST(Fuser, InvalidSelectionsAreConfigErrors) {
  auto f = variant(FuserVariant::concat_stages);
  f.stage_selection = {};
  EXPECT_THROW(VitadModel<double>(testutil::tiny_vit(), f, 0), ConfigError);
  f.stage_selection = {1, 5};
  EXPECT_THROW(VitadModel<double>(testutil::tiny_vit(), f, 0), ConfigError);
  f = variant(FuserVariant::last_stage_linear);
  f.resize_policy = "bilinear";
  EXPECT_THROW(VitadModel<double>(testutil::tiny_vit(), f, 0), ConfigError);
  EXPECT_THROW(parse_fuser_variant("mlp"), ConfigError);
}

TEST(Fuser, VariantNamesRoundTrip) {
  for (auto v : {FuserVariant::last_stage_linear, FuserVariant::concat_stages, FuserVariant::add_stages,
                 FuserVariant::conv_bottleneck, FuserVariant::vit_blocks, FuserVariant::identity})
    EXPECT_EQ(parse_fuser_variant(to_string(v)), v);
}

TEST(VitadForward, ToyStagesPairAndStayFinite) {
  VitadModel<float> m(testutil::desk_vit(), {}, 0);
  Rng rng(1);
  const auto img = random_tensor<float>({3, 64, 64}, rng, -2, 2);
  const auto [enc, dec] = vitad_forward(img, m);
  ASSERT_EQ(enc.size(), 4u);
  ASSERT_EQ(dec.size(), 3u);
  EXPECT_EQ(dec.index, (std::vector<int>{3, 2, 1}));
  for (const auto& s : enc.stages) {
    EXPECT_EQ(s.shape(), (Shape{64, 8, 8}));
    EXPECT_TRUE(s.all_finite());
  }
  for (std::size_t j = 0; j < dec.size(); ++j) {
    EXPECT_EQ(dec.stages[j].shape(), enc.at_index(dec.index[j]).shape());
    EXPECT_TRUE(dec.stages[j].all_finite());
  }
}

TEST(VitadForward, DeterministicForFixedWeightsAndInput) {
  VitadModel<float> m(testutil::tiny_vit(), {}, 3);
  Rng rng(2);
  const auto img = random_tensor<float>({3, 32, 32}, rng);
  const auto a = vitad_forward(img, m), b = vitad_forward(img, m);
  for (std::size_t i = 0; i < a.first.size(); ++i) EXPECT_EQ(a.first.stages[i], b.first.stages[i]);
  for (std::size_t j = 0; j < a.second.size(); ++j) EXPECT_EQ(a.second.stages[j], b.second.stages[j]);
}

TEST(VitadForward, DefaultGeometryGivesFourPlusThreeStages) {
  ViTConfig c;  // 256 px, patch 16, 384 channels, 12 layers in 4, decoder 9 in 3
  VitadModel<float> m(c, {}, 0);
  Rng rng(3);
  const auto [enc, dec] = vitad_forward(random_tensor<float>({3, 256, 256}, rng), m);
  ASSERT_EQ(enc.size(), 4u);
  ASSERT_EQ(dec.size(), 3u);
  for (const auto& s : enc.stages) EXPECT_EQ(s.shape(), (Shape{384, 16, 16}));
  for (const auto& s : dec.stages) EXPECT_EQ(s.shape(), (Shape{384, 16, 16}));
}

TEST(VitadForward, StemFeatureIsStageZero) {
  VitadModel<float> m(testutil::tiny_vit(), {}, 0);
  Rng rng(4);
  const auto img = random_tensor<float>({3, 32, 32}, rng);
  const auto all = encoder_features_with_stem(img, m);
  EXPECT_EQ(all.index, (std::vector<int>{0, 1, 2, 3, 4}));
  Tape<float> t(false);
  EXPECT_EQ(all.at_index(0), tokens_to_chw(m.encoder().patch_embed(t, img).value(), 4, 4));
  EXPECT_THROW(all.at_index(7), ContractError);
}

TEST(VitadForward, TokenLayoutConversionsRoundTrip) {
  Rng rng(5);
  const auto tok = random_tensor({12, 5}, rng);
  const auto chw = tokens_to_chw(tok, 3, 4);
  EXPECT_EQ(chw.shape(), (Shape{5, 3, 4}));
  EXPECT_EQ(chw.at(2, 1, 3), tok.at(1 * 4 + 3, 2));
  EXPECT_EQ(chw_to_tokens(chw), tok);
  EXPECT_THROW(tokens_to_chw(tok, 3, 3), DimensionError);
}
