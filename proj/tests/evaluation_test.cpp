#include <atac/evaluation.hpp>
#include <atac/model.hpp>
#include <atac/scoring.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "oracles.hpp"

using namespace atac;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "atac_eval_test" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<ScoredSample> make_samples(const std::vector<double>& scores,
                                       const std::vector<int>& labels) {
  std::vector<ScoredSample> out;
  for (std::size_t i = 0; i < scores.size(); ++i)
    out.push_back({"s" + std::to_string(i), labels[i], scores[i]});
  return out;
}

}  // namespace

TEST(Auroc, PerfectSeparationScoresOne) {
  auto s = make_samples({0.1, 0.2, 0.3, 0.8, 0.9}, {0, 0, 0, 1, 1});
  EXPECT_DOUBLE_EQ(auroc(s), 1.0);
}

TEST(Auroc, ReversedSeparationScoresZero) {
  auto s = make_samples({0.8, 0.9, 0.1, 0.2}, {0, 0, 1, 1});
  EXPECT_DOUBLE_EQ(auroc(s), 0.0);
}

TEST(Auroc, AllTiedScoresGiveHalf) {
  auto s = make_samples({0.5, 0.5, 0.5, 0.5}, {0, 1, 0, 1});
  EXPECT_DOUBLE_EQ(auroc(s), 0.5);
}

TEST(Auroc, MatchesThePairwiseDefinitionWithTies) {
  Rng rng(71);
  std::vector<double> scores;
  std::vector<int> labels;
  for (int i = 0; i < 200; ++i) {
    scores.push_back(static_cast<double>(rng.index(11)) / 10.0);  // deliberate ties
    labels.push_back(rng.bernoulli(0.4) ? 1 : 0);
  }
  labels[0] = 0;
  labels[1] = 1;
  EXPECT_DOUBLE_EQ(auroc(make_samples(scores, labels)), oracle::auroc(scores, labels));
}

TEST(Auroc, InvariantUnderMonotoneTransforms) {
  Rng rng(73);
  std::vector<double> scores;
  std::vector<int> labels;
  for (int i = 0; i < 60; ++i) {
    scores.push_back(static_cast<double>(rng.index(11)) / 10.0);
    labels.push_back(i % 3 == 0 ? 1 : 0);
  }
  const double base = auroc(make_samples(scores, labels));
  std::vector<double> affine_scores, exp_scores;
  for (double v : scores) {
    affine_scores.push_back(2.0 * v + 1.0);
    exp_scores.push_back(std::exp(v));
  }
  EXPECT_DOUBLE_EQ(auroc(make_samples(affine_scores, labels)), base);
  EXPECT_DOUBLE_EQ(auroc(make_samples(exp_scores, labels)), base);
}

TEST(Auroc, RejectsSingleClassInput) {
  EXPECT_THROW(auroc(make_samples({0.1, 0.2}, {0, 0})), std::invalid_argument);
  EXPECT_THROW(auroc(make_samples({0.1, 0.2}, {1, 1})), std::invalid_argument);
}

TEST(HistogramT, SingleBinCountsEverything) {
  auto s = make_samples({0.0, 0.3, 0.7, 1.0}, {0, 1, 0, 1});
  auto h = score_histogram(s, 1);
  ASSERT_EQ(h.edges.size(), 2u);
  EXPECT_DOUBLE_EQ(h.edges[0], 0.0);
  EXPECT_DOUBLE_EQ(h.edges[1], 1.0);
  EXPECT_EQ(h.normal[0], 2u);
  EXPECT_EQ(h.anomalous[0], 2u);
}

TEST(HistogramT, ExtremesLandInTheOuterBins) {
  auto s = make_samples({0.0, 1.0}, {0, 1});
  auto h = score_histogram(s, 10);
  EXPECT_EQ(h.normal[0], 1u);
  EXPECT_EQ(h.anomalous[9], 1u);
  for (std::size_t b = 1; b < 9; ++b) EXPECT_EQ(h.normal[b] + h.anomalous[b], 0u);
}

TEST(HistogramT, ConstantScoresCollapseToBinZero) {
  auto s = make_samples({0.4, 0.4, 0.4}, {0, 1, 0});
  auto h = score_histogram(s, 5);
  EXPECT_EQ(h.normal[0], 2u);
  EXPECT_EQ(h.anomalous[0], 1u);
}

TEST(HistogramT, CountsSumToTheSampleCounts) {
  Rng rng(79);
  std::vector<double> scores;
  std::vector<int> labels;
  std::size_t n_pos = 0;
  for (int i = 0; i < 137; ++i) {
    scores.push_back(rng.uniform(-3.0, 5.0));
    labels.push_back(rng.bernoulli(0.3) ? 1 : 0);
    n_pos += static_cast<std::size_t>(labels.back());
  }
  auto h = score_histogram(make_samples(scores, labels), 16);
  std::size_t total_n = 0, total_a = 0;
  for (std::size_t b = 0; b < 16; ++b) {
    total_n += h.normal[b];
    total_a += h.anomalous[b];
  }
  EXPECT_EQ(total_a, n_pos);
  EXPECT_EQ(total_n, 137u - n_pos);
}

TEST(HistogramT, RejectsDegenerateRequests) {
  EXPECT_THROW(score_histogram({}, 4), std::invalid_argument);
  EXPECT_THROW(score_histogram(make_samples({0.1}, {0}), 0), std::invalid_argument);
}

TEST(GradCam, WeightsAreSpatialGradientMeans) {
  auto act = Tensor<float>::from_values({1, 2, 2, 2}, {1, -2, 3, 0.5f, -1, 4, -3, 2});
  act.set_requires_grad(true);
  auto coef = Tensor<float>::from_values({1, 2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  auto target = reduce_sum(mul(act, coef));
  backward(target);
  auto r = gradcam(act, 0, 4, 4);
  ASSERT_EQ(r.weights.size(), 2u);
  EXPECT_FLOAT_EQ(r.weights[0], 2.5f);
  EXPECT_FLOAT_EQ(r.weights[1], 6.5f);
  ASSERT_EQ(r.map.size(), 4u);
  EXPECT_FLOAT_EQ(r.map[0], 0.0f);
  EXPECT_FLOAT_EQ(r.map[1], 21.0f);
  EXPECT_FLOAT_EQ(r.map[2], 0.0f);
  EXPECT_FLOAT_EQ(r.map[3], 14.25f);
  EXPECT_EQ(r.overlay.size(), 16u);
  Tape<float>::active().clear();
  act.zero_grad();
}

TEST(GradCam, UnitWeightsReduceToReluOfTheActivation) {
  auto act = Tensor<float>::from_values({1, 1, 2, 2}, {1.5f, -0.5f, 0.0f, 2.0f});
  act.set_requires_grad(true);
  auto target = reduce_sum(act);
  backward(target);
  auto r = gradcam(act, 0, 2, 2);
  EXPECT_FLOAT_EQ(r.weights[0], 1.0f);
  EXPECT_EQ(r.map, (std::vector<float>{1.5f, 0.0f, 0.0f, 2.0f}));
  Tape<float>::active().clear();
  act.zero_grad();
}

TEST(GradCam, UntouchedActivationYieldsAZeroMap) {
  auto used = Tensor<float>::from_values({1}, {2.0f});
  used.set_requires_grad(true);
  auto spectator = Tensor<float>::from_values({1, 1, 2, 2}, {1, 2, 3, 4});
  spectator.set_requires_grad(true);
  backward(reduce_sum(mul(used, used)));
  auto r = gradcam(spectator, 0, 2, 2);
  for (float v : r.map) EXPECT_EQ(v, 0.0f);
  for (float v : r.weights) EXPECT_EQ(v, 0.0f);
  Tape<float>::active().clear();
  used.zero_grad();
}

TEST(GradCam, MaskedOutChannelGetsZeroWeight) {
  auto act = Tensor<float>::from_values({1, 2, 1, 1}, {3.0f, 5.0f});
  act.set_requires_grad(true);
  auto mask = Tensor<float>::from_values({1, 2, 1, 1}, {1.0f, 0.0f});
  backward(reduce_sum(mul(act, mask)));
  auto r = gradcam(act, 0, 1, 1);
  EXPECT_FLOAT_EQ(r.weights[0], 1.0f);
  EXPECT_EQ(r.weights[1], 0.0f);
  Tape<float>::active().clear();
  act.zero_grad();
}

TEST(GradCam, DetachedActivationsAreRejected) {
  auto act = Tensor<float>::from_values({1, 1, 2, 2}, {1, 2, 3, 4});
  EXPECT_THROW(gradcam(act, 0, 2, 2), std::invalid_argument);
}

TEST(GradCam, RunsOnTheAttendedFeaturesOfAForwardPass) {
  ModelConfig cfg;
  cfg.input_resolution = 16;
  cfg.input_channels = 1;
  cfg.stage_channels = {4, 8};
  cfg.attention_channels = 8;
  Rng rng(83);
  auto model = Model<float>::init(cfg, rng);
  auto x = Tensor<float>::zeros({1, 1, 16, 16});
  for (auto& v : x.leaf_values()) v = static_cast<float>(rng.uniform());
  auto fwd = atac_forward(model, x, ScoringConfig{});
  backward(select0(fwd.scores, 0));
  auto r = gradcam(fwd.attended1, 0, 16, 16);
  ASSERT_EQ(r.map.size(), 16u);
  ASSERT_EQ(r.overlay.size(), 256u);
  for (float v : r.map) {
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_GE(v, 0.0f);
  }
  Tape<float>::active().clear();
}

TEST(NormalizeMap, StretchesToUnitRangeOrCollapses) {
  auto n = normalize_map(std::vector<float>{2.0f, 4.0f, 3.0f});
  EXPECT_FLOAT_EQ(n[0], 0.0f);
  EXPECT_FLOAT_EQ(n[1], 1.0f);
  EXPECT_FLOAT_EQ(n[2], 0.5f);
  auto flat = normalize_map(std::vector<float>{0.7f, 0.7f});
  EXPECT_EQ(flat, (std::vector<float>{0.0f, 0.0f}));
  EXPECT_TRUE(normalize_map(std::vector<float>{}).empty());
}

TEST(ExportHeatmap, MapFileHoldsTheQuantizedNormalizedMap) {
  const auto dir = scratch("heatmap_quant");
  std::vector<float> map{0.0f, 0.25f, 0.5f, 1.0f};
  ImageT<float> image;
  image.width = 8;
  image.height = 8;
  image.channels = 1;
  image.pixels.assign(64, 0.5f);
  auto files = export_heatmap(map, 2, 2, image, (dir / "h").string(), 0.4);
  auto back = read_pnm(files.map_pgm);
  EXPECT_EQ(back.width, 2u);
  EXPECT_EQ(back.height, 2u);
  EXPECT_EQ(back.pixels, (std::vector<std::uint8_t>{0, 64, 128, 255}));

  auto mask = read_pnm(files.mask_pgm);
  EXPECT_EQ(mask.pixels, (std::vector<std::uint8_t>{0, 0, 255, 255}));

  auto overlay = read_pnm(files.overlay_ppm);
  EXPECT_EQ(overlay.width, 8u);
  EXPECT_EQ(overlay.height, 8u);
  EXPECT_EQ(overlay.channels, 3u);
}

TEST(ExportHeatmap, ConstantMapWritesAllZeros) {
  const auto dir = scratch("heatmap_flat");
  std::vector<float> map(9, 0.6f);
  ImageT<float> image;
  image.width = 3;
  image.height = 3;
  image.channels = 1;
  image.pixels.assign(9, 0.2f);
  auto files = export_heatmap(map, 3, 3, image, (dir / "h").string(), 0.4);
  for (auto p : read_pnm(files.map_pgm).pixels) EXPECT_EQ(p, 0);
  for (auto p : read_pnm(files.mask_pgm).pixels) EXPECT_EQ(p, 0);
}

TEST(ExportHeatmap, SkipsTheMaskWithoutAThreshold) {
  const auto dir = scratch("heatmap_nomask");
  std::vector<float> map{0.1f, 0.9f};
  ImageT<float> image;
  image.width = 2;
  image.height = 1;
  image.channels = 1;
  image.pixels.assign(2, 0.5f);
  auto files = export_heatmap(map, 1, 2, image, (dir / "h").string());
  EXPECT_TRUE(files.mask_pgm.empty());
  EXPECT_TRUE(fs::exists(files.map_pgm));
  EXPECT_TRUE(fs::exists(files.overlay_ppm));
}

TEST(ExportHeatmap, RejectsMismatchedMapSize) {
  ImageT<float> image;
  image.width = 2;
  image.height = 2;
  image.channels = 1;
  image.pixels.assign(4, 0.5f);
  EXPECT_THROW(export_heatmap(std::vector<float>{0.1f}, 2, 2, image, "/tmp/x"),
               std::invalid_argument);
}
