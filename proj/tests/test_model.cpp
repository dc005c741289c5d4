#include "aunet/data.hpp"
#include "aunet/grad_check.hpp"
#include "aunet/model.hpp"
#include "aunet/ops.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace aunet;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.image = {20, 20};
  c.backbone = {{4, 3, true}, {4, 3, false}};
  c.roi_feature_len = 3;
  c.global_feature_len = 8;
  c.init_scheme = "he";
  return c;
}

Tensor random_map(const Shape& s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  Tensor::Array a(shape_size(s));
  for (Index i = 0; i < a.size(); ++i) a[i] = u(rng);
  return Tensor(s, std::move(a));
}

// Windows spread over a 10x10 grid, region k centered on cell (k/5*2+1, k%5*2+1).
RegionWindows spread_windows(GridSize grid) {
  RegionWindows w;
  for (int k = 0; k < kNumRegions; ++k) w[static_cast<std::size_t>(k)] = crop_window({k / 5 * 2 + 1, k % 5 * 2 + 1}, 3, grid);
  return w;
}

}  // namespace

TEST(Backbone, DeskMapShape) {
  ModelConfig c;
  c.backbone = {{8, 3, true}, {16, 3, true}, {32, 3, true}};
  const Network net = make_network(c, Architecture::fvgg, 1);
  const Tensor out = backbone_forward(c, net.params, Tensor::zeros({2, 1, 40, 40}));
  EXPECT_EQ(out.shape(), (Shape{2, 32, 5, 5}));
}

TEST(Backbone, FullScaleGridIsFourteen) {
  const ModelConfig c = full_scale_config();
  EXPECT_EQ(c.grid().height, 14);
  EXPECT_EQ(c.grid().width, 14);
  EXPECT_EQ(c.feature_channels(), 512);
}

TEST(Backbone, ZeroImageAndZeroBiasesGiveZeroMap) {
  const ModelConfig c = small_config();
  const Network net = make_network(c, Architecture::roi, 3);
  const Tensor out = backbone_forward(c, net.params, Tensor::zeros({1, 1, 20, 20}));
  EXPECT_EQ(out.value().abs().maxCoeff(), 0.0);
}

TEST(Backbone, WrongImageSizeRejected) {
  const ModelConfig c = small_config();
  const Network net = make_network(c, Architecture::roi, 3);
  EXPECT_THROW(backbone_forward(c, net.params, Tensor::zeros({1, 1, 24, 20})), ShapeError);
}

TEST(RoiForward, UpsampledCropFeedsTheSubnet) {
  ModelConfig c = small_config();
  const Network net = make_network(c, Architecture::roi, 5);
  // conv1 of each ROI net sees C x 6 x 6 inputs: C channels and a 3x3 kernel.
  EXPECT_EQ(net.params.at("roi1.conv1.weight").shape(), (Shape{4, 4, 3, 3}));
  const Index flat = net.params.at("roi1.fc.weight").dim(1);
  EXPECT_EQ(flat, 4 * 6 * 6);
}

TEST(RoiForward, OneFeaturePerRegionInInputOrder) {
  const ModelConfig c = small_config();
  const Network net = make_network(c, Architecture::roi, 5);
  const Tensor fmap = random_map({3, 4, 10, 10}, 2);
  const std::vector<RegionWindows> w(3, spread_windows(c.grid()));
  const auto feats = roi_forward(c, net.params, fmap, w);
  ASSERT_EQ(feats.size(), 20u);
  for (const auto& f : feats) EXPECT_EQ(f.shape(), (Shape{3, 3}));
  // Batch row 1 alone gives the same values as row 1 of the batch.
  const Tensor one = slice(fmap, 0, 1, 1);
  const std::vector<RegionWindows> w1(1, spread_windows(c.grid()));
  const auto single = roi_forward(c, net.params, one, w1);
  for (int k = 0; k < kNumRegions; ++k) {
    for (Index j = 0; j < 3; ++j) EXPECT_NEAR(single[static_cast<std::size_t>(k)][j], feats[static_cast<std::size_t>(k)][3 + j], 1e-12);
  }
}

TEST(RoiForward, WindowCountMustMatchBatch) {
  const ModelConfig c = small_config();
  const Network net = make_network(c, Architecture::roi, 5);
  const std::vector<RegionWindows> w(1, spread_windows(c.grid()));
  EXPECT_THROW(roi_forward(c, net.params, random_map({2, 4, 10, 10}, 1), w), ShapeError);
}

TEST(RoiForward, PerturbationOutsideWindowLeavesRegionUnchanged) {
  const ModelConfig c = small_config();
  const Network net = make_network(c, Architecture::roi, 7);
  const std::vector<RegionWindows> w(1, spread_windows(c.grid()));
  const Tensor a = random_map({1, 4, 10, 10}, 3);
  for (int k : {0, 7, 19}) {
    const GridWindow win = w[0][static_cast<std::size_t>(k)];
    Tensor::Array b = a.value();
    std::mt19937_64 rng(static_cast<std::uint64_t>(k));
    std::normal_distribution<double> n(0, 1);
    for (Index ch = 0; ch < 4; ++ch)
      for (Index r = 0; r < 10; ++r)
        for (Index col = 0; col < 10; ++col)
          if (!win.contains(r, col)) b[(ch * 10 + r) * 10 + col] += n(rng);
    const auto fa = roi_forward(c, net.params, a, w);
    const auto fb = roi_forward(c, net.params, Tensor(a.shape(), b), w);
    const auto& x = fa[static_cast<std::size_t>(k)].value();
    const auto& y = fb[static_cast<std::size_t>(k)].value();
    EXPECT_TRUE((x == y).all()) << "region " << k;
  }
}

TEST(RoiForward, OtherRegionsSendNoGradientToRegionParams) {
  const ModelConfig c = small_config();
  Network net = make_network(c, Architecture::roi, 7);
  const std::vector<RegionWindows> w(1, spread_windows(c.grid()));
  Tensor fmap = random_map({1, 4, 10, 10}, 4);
  fmap.set_requires_grad(true);
  const auto feats = roi_forward(c, net.params, fmap, w);
  std::vector<Tensor> others;
  for (int k = 1; k < kNumRegions; ++k) others.push_back(sum(feats[static_cast<std::size_t>(k)]));
  backward(sum(concat(others, 0)));
  for (const auto& [name, p] : net.params) {
    if (name.rfind("roi1.", 0) == 0) EXPECT_EQ(p.grad().abs().maxCoeff(), 0.0) << name;
  }
}

TEST(RoiForward, RegionGradientIgnoresTheRestOfTheMap) {
  const ModelConfig c = small_config();
  Network net = make_network(c, Architecture::roi, 7);
  const std::vector<RegionWindows> w(1, spread_windows(c.grid()));
  const int k = 6;
  const GridWindow win = w[0][k];
  Tensor a = random_map({1, 4, 10, 10}, 5);
  Tensor::Array bv = a.value();
  for (Index i = 0; i < bv.size(); ++i) {
    const Index r = (i / 10) % 10, col = i % 10;
    if (!win.contains(r, col)) bv[i] = -bv[i] + 0.3;
  }
  auto region_grads = [&](const Tensor& m) {
    net.params.zero_grad();
    Tensor x = m.detach();
    x.set_requires_grad(true);
    backward(sum(roi_forward(c, net.params, x, w)[k]));
    std::vector<Tensor::Array> g;
    for (const auto& [name, p] : net.params)
      if (name.rfind("roi7.", 0) == 0) g.push_back(p.grad());
    return std::pair{g, x.grad()};
  };
  const auto [ga, xa] = region_grads(a);
  const auto [gb, xb] = region_grads(Tensor(a.shape(), bv));
  ASSERT_EQ(ga.size(), gb.size());
  for (std::size_t i = 0; i < ga.size(); ++i) EXPECT_TRUE((ga[i] == gb[i]).all());
  for (Index i = 0; i < xa.size(); ++i) {
    const Index r = (i / 10) % 10, col = i % 10;
    if (!win.contains(r, col)) EXPECT_EQ(xa[i], 0.0);
  }
}

TEST(RoiForward, SubnetGradientMatchesFiniteDifferences) {
  ModelConfig c;
  c.image = {56, 56};
  c.backbone = {{4, 3, true}, {4, 3, true}};
  c.roi_feature_len = 2;
  c.global_feature_len = 4;
  c.init_scheme = "he";
  c.relu_bias = 1.0;
  ASSERT_EQ(c.grid().height, 14);
  Network net = make_network(c, Architecture::roi, 9);
  std::vector<Tensor> inputs{random_map({1, 4, 14, 14}, 6)};
  for (const char* n : {"roi3.conv1.weight", "roi3.conv2.weight", "roi3.fc.weight", "roi3.fc.bias"}) {
    inputs.push_back(net.params.at(n));
  }
  inputs[1].mutable_value() *= 0.2;
  inputs[2].mutable_value() *= 0.2;
  RegionWindows w = spread_windows(c.grid());
  const std::vector<RegionWindows> ws(1, w);
  const std::vector<int> only{2};
  auto closure = [&] {
    ParamSet p = net.params;
    return sum(roi_forward(c, p, inputs[0], ws, only)[2]);
  };
  const auto r = grad_check<double>(closure, std::span<Tensor>(inputs), 1e-3);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.branch_crossings << " crossings";
}

TEST(GlobalFeature, ConcatenatesTwentyRegions) {
  ModelConfig c = small_config();
  c.roi_feature_len = 8;
  const Network net = make_network(c, Architecture::roi, 2);
  EXPECT_EQ(net.params.at("global.weight").dim(1), 160);
  std::vector<Tensor> feats(20, Tensor::zeros({2, 8}));
  EXPECT_EQ(concat_global_feature(c, net.params, feats).shape(), (Shape{2, 8}));
  feats.pop_back();
  EXPECT_THROW(concat_global_feature(c, net.params, feats), ShapeError);
}

TEST(PairSymmetric, LengthFollowsTheRuleLinks) {
  std::vector<Tensor> feats(20, Tensor::zeros({1, 5}));
  EXPECT_EQ(pair_symmetric(feats, 12, default_rule_table()).dim(1), 10);
  EXPECT_EQ(pair_symmetric(feats, 17, default_rule_table()).dim(1), 5);
  EXPECT_THROW(pair_symmetric(feats, 9, default_rule_table()), std::invalid_argument);
}

TEST(PredictProbs, SigmoidHead) {
  ParamSet p;
  p.add("head.weight", Tensor::zeros({3, 4}));
  p.add("head.bias", Tensor::zeros({3}));
  const Tensor half = predict_probs(p, Tensor::zeros({2, 4}));
  for (Index i = 0; i < half.size(); ++i) EXPECT_EQ(half[i], 0.5);
  p.at("head.bias").mutable_value().setConstant(1.0);
  EXPECT_NEAR(predict_probs(p, Tensor::zeros({1, 4}))[0], 0.7311, 1e-4);
}

TEST(Network, FvggIsStrictlySmallerThanRoi) {
  const ModelConfig c;
  const auto fvgg = make_network(c, Architecture::fvgg, 1).params.element_count();
  const auto roi = make_network(c, Architecture::roi, 1).params.element_count();
  EXPECT_LT(fvgg, roi);
}

TEST(Network, SameSeedSameParameters) {
  const ModelConfig c = small_config();
  const auto a = make_network(c, Architecture::roi, 4);
  const auto b = make_network(c, Architecture::roi, 4);
  for (const auto& [name, t] : a.params) EXPECT_TRUE((t.value() == b.params.at(name).value()).all()) << name;
}

TEST(Network, StaticProbsBatchInInputOrder) {
  const ModelConfig c;
  const Network net = make_network(c, Architecture::roi, 2);
  const auto sd = generate_synthetic(SynthConfig{.subjects = 1, .sessions = 1, .frames = 3}, 2);
  std::vector<RegionWindows> w;
  Tensor::Array pix(3 * 40 * 40);
  for (int i = 0; i < 3; ++i) {
    w.push_back(frame_windows(c, net.rules, sd.data.frames[static_cast<std::size_t>(i)].landmarks));
    pix.segment(i * 1600, 1600) = sd.data.frames[static_cast<std::size_t>(i)].image;
  }
  const Tensor all = static_probs(net, Tensor({3, 1, 40, 40}, pix), w);
  ASSERT_EQ(all.shape(), (Shape{3, 12}));
  const Tensor last = static_probs(net, Tensor({1, 1, 40, 40}, Tensor::Array(pix.segment(3200, 1600))),
                                   std::span<const RegionWindows>(w.data() + 2, 1));
  for (Index j = 0; j < 12; ++j) EXPECT_NEAR(last[j], all[24 + j], 1e-12);
}

TEST(Freeze, ZeroStagesFreezesNothing) {
  const Network net = make_network(ModelConfig{}, Architecture::roi, 1);
  EXPECT_TRUE(freeze_prefix(net, 0).empty());
}

TEST(Freeze, FullDepthFreezesOnlyTheBackbone) {
  const Network net = make_network(ModelConfig{}, Architecture::roi, 1);
  const auto frozen = freeze_prefix(net, 3);
  EXPECT_EQ(frozen.size(), 6u);
  for (const auto& n : frozen) EXPECT_EQ(n.rfind("backbone.", 0), 0u) << n;
  EXPECT_THROW(freeze_prefix(net, 4), std::invalid_argument);
}

TEST(ModelConfig, JsonRoundTrip) {
  ModelConfig c = small_config();
  c.relu_bias = 0.25;
  c.input_mean = 0.3;
  c.input_scale = 2.0;
  const ModelConfig back = model_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
}
