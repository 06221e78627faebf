#include <gtest/gtest.h>

#include <bit>
#include <fstream>

#include "test_util.hpp"

using namespace vitad;
using testutil::TempDir;

namespace {

NamedTensors random_set(Rng& rng, int max_tensors = 6) {
  NamedTensors out;
  const auto n = rng.below(static_cast<std::uint64_t>(max_tensors) + 1);
  for (std::uint64_t k = 0; k < n; ++k) {
    Shape s;
    const auto rank = 1 + rng.below(4);
    for (std::uint64_t d = 0; d < rank; ++d) s.push_back(1 + rng.below(5));
    Tensor<float> t(s);
    // raw bit patterns, including subnormals, infinities and NaN payloads
    for (auto& v : t.data()) v = std::bit_cast<float>(static_cast<std::uint32_t>(rng.below(1ULL << 32)));
    out.emplace_back("t" + std::to_string(k) + ".w", std::move(t));
  }
  return out;
}

bool bitwise_equal(const NamedTensors& a, const NamedTensors& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].first != b[i].first || a[i].second.shape() != b[i].second.shape()) return false;
    const auto& x = a[i].second.data();
    const auto& y = b[i].second.data();
    if (std::memcmp(x.data(), y.data(), x.size() * sizeof(float)) != 0) return false;
  }
  return true;
}

std::string message_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const FormatError& e) {
    return e.what();
  }
  return "";
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(Archive, EmptySetIsTenBytes) {
  const auto b = encode_archive({});
  ASSERT_EQ(b.size(), 10u);
  EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "VTAD");
  EXPECT_EQ(b[4], 1);
  EXPECT_EQ(b[5], 0);
  for (int i = 6; i < 10; ++i) EXPECT_EQ(b[i], 0);
  EXPECT_TRUE(decode_archive(b).empty());
}

TEST(Archive, ScalarByteLayout) {
  const auto b = encode_archive({{"b", Tensor<float>({1}, 1.0f)}});
  const std::vector<std::uint8_t> expect = {
      'V', 'T', 'A', 'D', 1, 0, 1, 0, 0, 0,  // header
      1, 0, 'b',                            // name
      0, 1,                                 // dtype f32, ndim 1
      1, 0, 0, 0,                           // extent
      4, 0, 0, 0,                           // payload bytes
      0x00, 0x00, 0x80, 0x3f};              // 1.0f little-endian
  EXPECT_EQ(b.size(), 10u + (2 + 1 + 1 + 1 + 4 + 4) + 4);
  EXPECT_EQ(b, expect);
}

TEST(Archive, RandomSetsRoundTripBitwiseAndIdempotently) {
  TempDir tmp;
  Rng rng(42);
  for (int trial = 0; trial < 100; ++trial) {
    const auto set = random_set(rng);
    const auto p = tmp / "w.vtad";
    save_archive(set, p);
    const auto back = load_archive(p);
    ASSERT_TRUE(bitwise_equal(set, back)) << "trial " << trial;
    EXPECT_EQ(encode_archive(back), read_file_bytes(p));
  }
}

TEST(Archive, ModelParametersRoundTrip) {
  TempDir tmp;
  VitadModel<float> a(testutil::tiny_vit(), {}, 1), b(testutil::tiny_vit(), {}, 2);
  save_archive(model_tensors(a.params()), tmp / "m.vtad");
  load_into(b.params(), load_archive(tmp / "m.vtad"));
  EXPECT_EQ(take_snapshot(a.params()), take_snapshot(b.params()));

  auto tensors = model_tensors(a.params());
  tensors.pop_back();
  EXPECT_THROW(load_into(b.params(), tensors), FormatError);
  tensors = model_tensors(a.params());
  tensors[0].second = Tensor<float>({1});
  EXPECT_THROW(load_into(b.params(), tensors), FormatError);
}

TEST(Archive, EncoderWeightsLoadIntoEncoderOnly) {
  VitadModel<float> a(testutil::tiny_vit(), {}, 1), b(testutil::tiny_vit(), {}, 2);
  const auto fuser_before = b.params().fingerprint(ParamGroup::fuser);
  const auto n = load_encoder_weights(b.params(), model_tensors(a.params()));
  EXPECT_EQ(n, b.params().group(ParamGroup::encoder).size());
  EXPECT_EQ(b.params().fingerprint(ParamGroup::encoder), a.params().fingerprint(ParamGroup::encoder));
  EXPECT_EQ(b.params().fingerprint(ParamGroup::fuser), fuser_before);
}

TEST(Archive, DuplicateNamesRejectedOnBothSides) {
  EXPECT_THROW(encode_archive({{"a", Tensor<float>({1})}, {"a", Tensor<float>({2})}}), ContractError);
  auto b = encode_archive({{"a", Tensor<float>({1})}, {"c", Tensor<float>({1})}});
  b[10 + 2 + 1 + 1 + 1 + 4 + 4 + 4 + 2] = 'a';  // rename the second tensor
  EXPECT_NE(message_of([&] { decode_archive(b); }).find("duplicate"), std::string::npos);
}

TEST(Archive, TruncationAtEveryLengthReportsAnOffset) {
  Rng rng(3);
  const auto b = encode_archive({{"x", Tensor<float>({2, 3}, 0.5f)}, {"y", Tensor<float>({4}, -1.0f)}});
  for (std::size_t len = 0; len < b.size(); ++len) {
    const std::span<const std::uint8_t> cut(b.data(), len);
    const auto msg = message_of([&] { decode_archive(cut); });
    ASSERT_FALSE(msg.empty()) << "length " << len;
    EXPECT_NE(msg.find("byte offset"), std::string::npos) << msg;
  }
  auto extra = b;
  extra.push_back(0);
  EXPECT_NE(message_of([&] { decode_archive(extra); }).find("trailing"), std::string::npos);
}

TEST(Archive, BadMagicVersionAndDtype) {
  auto b = encode_archive({{"w", Tensor<float>({2}, 1.0f)}});
  auto m = b;
  m[0] = 'X';
  EXPECT_NE(message_of([&] { decode_archive(m); }).find("bad magic at byte offset 0"), std::string::npos);
  auto v = b;
  v[4] = 9;
  EXPECT_NE(message_of([&] { decode_archive(v); }).find("unsupported version 9"), std::string::npos);
  auto d = b;
  d[10 + 2 + 1] = 7;  // dtype tag of the first tensor
  const auto msg = message_of([&] { decode_archive(d); });
  EXPECT_NE(msg.find("unknown dtype tag 7"), std::string::npos) << msg;
  EXPECT_NE(msg.find("byte offset 14"), std::string::npos) << msg;
}

TEST(Archive, LoadErrorsNameTheFile) {
  TempDir tmp;
  const auto p = tmp / "broken.vtad";
  write_file_bytes(p, std::vector<std::uint8_t>{'V', 'T'});
  EXPECT_NE(message_of([&] { load_archive(p); }).find("broken.vtad"), std::string::npos);
  EXPECT_THROW(load_archive(tmp / "missing.vtad"), IoError);
}

TEST(MapExport, ConstantMapGivesConstantImageAndEqualBounds) {
  TempDir tmp;
  AnomalyMap<float> m{Tensor<float>({6, 5}, 0.3f), 0.3f, {}};
  const auto ex = export_anomaly_map(m, tmp / "c.pgm");
  EXPECT_EQ(ex.min, ex.max);
  const auto img = read_pnm(tmp / "c.pgm");
  EXPECT_EQ(img.shape(), (Shape{1, 6, 5}));
  for (float v : img.data()) EXPECT_EQ(v, img[0]);
  const auto side = read_text(tmp / "c.pgm.txt");
  EXPECT_NE(side.find("image_score="), std::string::npos);
  EXPECT_NE(side.find("max="), std::string::npos);
}

TEST(MapExport, ThresholdRoundTripRecoversTheMask) {
  TempDir tmp;
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t h = 8 + rng.below(9), w = 8 + rng.below(9);
    Tensor<float> mask({h, w}), map({h, w});
    for (std::size_t i = 0; i < mask.numel(); ++i) {
      mask[i] = rng.uniform() < 0.3 ? 1.0f : 0.0f;
      map[i] = static_cast<float>(mask[i] > 0 ? rng.uniform(0.6, 1.0) : rng.uniform(0.0, 0.4));
    }
    const auto ex = export_anomaly_map(AnomalyMap<float>{map, map.max(), {}}, tmp / "m.pgm");
    const auto img = read_pnm(tmp / "m.pgm");
    // raw threshold 0.5 mapped through the recorded scale
    const double cut = (0.5 - ex.min) / (ex.max - ex.min);
    for (std::size_t i = 0; i < mask.numel(); ++i) ASSERT_EQ(img[i] > cut, mask[i] > 0) << "trial " << trial;
  }
}

TEST(MapExport, ArgmaxSurvivesScaling) {
  TempDir tmp;
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    auto map = testutil::random_tensor<float>({12, 9}, rng, 0, 2);
    const auto ex = export_anomaly_map(AnomalyMap<float>{map, 1.0f, {}}, tmp / "a.pgm");
    EXPECT_FLOAT_EQ(static_cast<float>(ex.max), map.max());
    const auto img = read_pnm(tmp / "a.pgm");
    const auto src = std::max_element(map.data().begin(), map.data().end()) - map.data().begin();
    EXPECT_EQ(img[static_cast<std::size_t>(src)], 1.0f);
    EXPECT_EQ(img.max(), 1.0f);
  }
}

TEST(MapExport, NonFiniteMapRejected) {
  TempDir tmp;
  Tensor<float> m({2, 2}, 0.0f);
  m[1] = std::numeric_limits<float>::infinity();
  EXPECT_THROW(export_anomaly_map(AnomalyMap<float>{m, 0.0f, {}}, tmp / "x.pgm"), NumericalError);
}

TEST(Report, PublishedMeanRowRendering) {
  metrics::MetricReport r;
  const double v[7] = {0.983, 0.994, 0.973, 0.977, 0.553, 0.587, 0.914};
  for (int i = 0; i < 7; ++i) r.values[i] = v[i];
  const auto csv = report_csv({}, {}, r);
  EXPECT_NE(csv.find("mean,98.3,99.4,97.3,97.7,55.3,58.7,91.4,85.4\n"), std::string::npos) << csv;
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "class,image_auroc,image_ap,image_f1max,pixel_auroc,pixel_ap,pixel_f1max,pixel_aupro,mad");
}

TEST(Report, SingleClassGivesTwoIdenticalRows) {
  metrics::MetricReport r;
  for (int i = 0; i < 7; ++i) r.values[i] = 0.5 + 0.05 * i;
  const auto csv = report_csv({"bottle"}, {r}, r);
  std::istringstream in(csv);
  std::string header, a, b, extra;
  std::getline(in, header);
  std::getline(in, a);
  std::getline(in, b);
  EXPECT_FALSE(std::getline(in, extra));
  EXPECT_EQ(a.substr(a.find(',')), b.substr(b.find(',')));
  EXPECT_EQ(a.substr(0, a.find(',')), "bottle");
}

TEST(Report, AbsentMetricIsEmptyCellAndLeftOutOfMad) {
  metrics::MetricReport r;
  for (int i = 0; i < 7; ++i) r.values[i] = 0.9;
  r.values[0].reset();
  r.values[6] = 0.6;
  const auto csv = report_csv({}, {}, r);
  // mAD over the six present values: (5*0.9 + 0.6)/6 = 0.85
  EXPECT_NE(csv.find("mean,,90.0,90.0,90.0,90.0,90.0,60.0,85.0\n"), std::string::npos) << csv;
}

TEST(Report, CsvReparsedMatchesJsonSidecar) {
  TempDir tmp;
  Rng rng(8);
  std::vector<std::string> classes{"a", "b", "c"};
  std::vector<metrics::MetricReport> per(3);
  for (auto& r : per)
    for (auto& v : r.values) v = rng.uniform();
  per[1].values[2].reset();
  const auto mean = metrics::mean_report(std::span<const metrics::MetricReport>(per));
  write_report(classes, per, mean, tmp / "r.csv");
  const auto j = nlohmann::json::parse(read_text(tmp / "r.csv.json"));
  std::istringstream in(read_text(tmp / "r.csv"));
  std::string line;
  std::getline(in, line);
  std::vector<std::string> names(metrics::kMetricNames.begin(), metrics::kMetricNames.end());
  names.push_back("mad");
  int rows = 0;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(c);
    if (line.back() == ',') cells.push_back("");
    ASSERT_EQ(cells.size(), 9u) << line;
    const auto& obj = cells[0] == "mean" ? j["mean"] : j["classes"][cells[0]];
    for (std::size_t f = 0; f < 8; ++f) {
      const auto& jv = obj[names[f]];
      if (jv.is_null()) {
        EXPECT_EQ(cells[f + 1], "");
      } else {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.1f", jv.get<double>() * 100.0);
        EXPECT_EQ(cells[f + 1], buf) << cells[0] << " " << names[f];
      }
    }
    ++rows;
  }
  EXPECT_EQ(rows, 4);
}

TEST(Report, ManifestJsonCarriesRunRecord) {
  RunManifest m;
  m.resolved_config = {{"train.lr", "0.0001"}};
  m.dataset_fingerprint = 0xabcULL;
  m.epochs.push_back({1, 1e-4, 0.5, 2});
  m.step_losses = {0.6, 0.4};
  m.best_epoch = 1;
  m.encoder_hash_before = m.encoder_hash_after = 7;
  const auto j = manifest_json(m);
  EXPECT_EQ(j["config"]["train.lr"], "0.0001");
  EXPECT_EQ(j["dataset_fingerprint"], "0000000000000abc");
  EXPECT_EQ(j["step_losses"].size(), 2u);
  EXPECT_EQ(j["epochs"][0]["steps"], 2);
  EXPECT_EQ(j["encoder_hash_before"], j["encoder_hash_after"]);
}
