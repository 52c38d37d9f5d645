#include <gtest/gtest.h>

#include "m2cl/model.hpp"
#include "oracles.hpp"

using namespace m2cl;
using oracle::random_tensor;

namespace {

Var<double> const_input(std::size_t n, std::size_t s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return Var<double>(random_tensor({n, 3, s, s}, rng, 0.0, 1.0));
}

Tensor<double> duplicate_rows(const Tensor<double>& one, std::size_t times) {
  Shape s = one.shape();
  s[0] *= times;
  Tensor<double> out(s);
  for (std::size_t t = 0; t < times; ++t) std::copy(one.data(), one.data() + one.numel(), out.data() + t * one.numel());
  return out;
}

}  // namespace

TEST(Backbone, DefaultTapLayout) {
  const auto taps = available_taps(BackboneConfig{});
  ASSERT_EQ(taps.size(), 7u);
  const std::vector<std::pair<std::size_t, std::size_t>> expected{{32, 16}, {32, 16}, {32, 16}, {16, 32},
                                                                  {16, 32}, {8, 64},  {8, 64}};
  for (std::size_t i = 0; i < taps.size(); ++i) {
    EXPECT_EQ(taps[i].spatial, expected[i].first) << taps[i].name;
    EXPECT_EQ(taps[i].channels, expected[i].second) << taps[i].name;
  }
  EXPECT_EQ(taps[0].name, "stem");
  EXPECT_EQ(taps[3].name, "s2b1");
  EXPECT_EQ(taps[4].stage, TapStage::Early);
  EXPECT_EQ(taps[5].stage, TapStage::Late);
}

TEST(Backbone, ForwardEmitsDeclaredTapShapes) {
  ParameterSet<double> ps;
  std::mt19937_64 rng(1);
  Backbone<double> bb(BackboneConfig{}, ps, rng);
  auto out = bb.forward(const_input(2, 64, 2));
  ASSERT_EQ(out.taps.size(), bb.taps().size());
  for (std::size_t i = 0; i < out.taps.size(); ++i)
    EXPECT_EQ(out.taps[i].shape(), (Shape{2, bb.taps()[i].channels, bb.taps()[i].spatial, bb.taps()[i].spatial}));
  EXPECT_EQ(out.final.shape(), (Shape{2, 64, 8, 8}));
}

TEST(Backbone, SingleBlockHasTwoTaps) {
  BackboneConfig cfg;
  cfg.stages = {{1, 8}};
  EXPECT_EQ(available_taps(cfg).size(), 2u);
}

TEST(Backbone, UnknownTapListsAvailable) {
  BackboneConfig cfg;
  cfg.tap_spec = std::vector<std::string>{"s9b9"};
  ParameterSet<double> ps;
  std::mt19937_64 rng(1);
  try {
    Backbone<double> bb(cfg, ps, rng);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("s1b1"), std::string::npos);
  }
}

TEST(Backbone, TapOrderFollowsNetworkOrder) {
  BackboneConfig cfg;
  cfg.tap_spec = std::vector<std::string>{"s3b2", "stem", "s2b1"};
  ParameterSet<double> ps;
  std::mt19937_64 rng(1);
  Backbone<double> bb(cfg, ps, rng);
  ASSERT_EQ(bb.taps().size(), 3u);
  EXPECT_EQ(bb.taps()[0].name, "stem");
  EXPECT_EQ(bb.taps()[1].name, "s2b1");
  EXPECT_EQ(bb.taps()[2].name, "s3b2");
}

TEST(Backbone, EmptyTapSpecExposesNothing) {
  BackboneConfig cfg;
  cfg.tap_spec = std::vector<std::string>{};
  ParameterSet<double> ps;
  std::mt19937_64 rng(1);
  Backbone<double> bb(cfg, ps, rng);
  EXPECT_TRUE(bb.forward(const_input(1, 64, 3)).taps.empty());
}

TEST(Backbone, RejectsWrongInputSize) {
  ParameterSet<double> ps;
  std::mt19937_64 rng(1);
  Backbone<double> bb(BackboneConfig{}, ps, rng);
  EXPECT_THROW(bb.forward(const_input(1, 32, 3)), ShapeError);
}

TEST(Backbone, ZeroInputIsFinite) {
  ParameterSet<double> ps;
  std::mt19937_64 rng(1);
  Backbone<double> bb(BackboneConfig{}, ps, rng);
  auto out = bb.forward(Var<double>(Tensor<double>(Shape{1, 3, 64, 64})));
  for (const auto& t : out.taps)
    for (double v : t.value().storage()) ASSERT_TRUE(std::isfinite(v));
}

TEST(Backbone, DuplicateInputsAndBatchScaling) {
  BackboneConfig cfg;
  cfg.input_size = 16;
  cfg.stem_stride = 1;
  cfg.stages = {{1, 4}, {1, 8}};
  ParameterSet<double> ps;
  std::mt19937_64 rng(4);
  Backbone<double> bb(cfg, ps, rng);
  auto one = const_input(3, 16, 5);
  auto single = bb.forward(one);
  auto doubled = bb.forward(Var<double>(duplicate_rows(one.value(), 2)));
  for (std::size_t i = 0; i < single.taps.size(); ++i) {
    Shape expect = single.taps[i].shape();
    expect[0] *= 2;
    ASSERT_EQ(doubled.taps[i].shape(), expect);
    const std::size_t half = single.taps[i].numel();
    for (std::size_t k = 0; k < half; ++k) {
      EXPECT_EQ(doubled.taps[i].value()[k], single.taps[i].value()[k]);
      EXPECT_EQ(doubled.taps[i].value()[half + k], single.taps[i].value()[k]);
    }
  }
}

TEST(Backbone, ZeroedResidualBranchPassesShortcut) {
  BackboneConfig cfg;
  cfg.input_size = 8;
  cfg.stem_stride = 1;
  cfg.stem_channels = 4;
  cfg.stages = {{1, 4}};
  ParameterSet<double> ps;
  std::mt19937_64 rng(6);
  Backbone<double> bb(cfg, ps, rng);
  for (auto& p : ps.items())
    if (p.name.find("s1b1.conv") != std::string::npos) p.var.mutable_value().fill(0.0);
  auto out = bb.forward(const_input(2, 8, 7));
  // Identity shortcut: relu(0 + x) with x = stem output (already non-negative).
  EXPECT_EQ(out.taps[1].value().storage(), out.taps[0].value().storage());
}

TEST(ExtractionBlock, ReductionAndPoolKernels) {
  ParameterSet<double> ps;
  std::mt19937_64 rng(1);
  ExtractionBlockConfig cfg;
  ExtractionBlock<double> blk(TapPoint{"t", TapStage::Early, 128, 16}, cfg, ps, rng, "b");
  EXPECT_EQ(blk.reduced_channels(), 32u);
  ASSERT_EQ(blk.num_pipelines(), 3u);
  EXPECT_EQ(blk.pool_kernel(0), 9u);
  EXPECT_EQ(blk.pool_kernel(1), 13u);
  EXPECT_EQ(blk.pool_kernel(2), 15u);
}

TEST(ExtractionBlock, InfeasibleTargetsDropped) {
  ParameterSet<double> ps;
  std::mt19937_64 rng(1);
  ExtractionBlockConfig cfg;
  ExtractionBlock<double> blk(TapPoint{"t", TapStage::Early, 8, 4}, cfg, ps, rng, "b");
  EXPECT_EQ(blk.targets(), (std::vector<std::size_t>{4, 2}));
  EXPECT_EQ(blk.pool_kernel(0), 1u);
  EXPECT_EQ(blk.pool_kernel(1), 3u);
  cfg.targets = std::vector<std::size_t>{9, 12};
  EXPECT_THROW(ExtractionBlock<double>(TapPoint{"t", TapStage::Early, 8, 4}, cfg, ps, rng, "c"), ConfigError);
}

TEST(ExtractionBlock, RejectsTooFewChannels) {
  ParameterSet<double> ps;
  std::mt19937_64 rng(1);
  ExtractionBlockConfig cfg;
  cfg.r = 6;
  EXPECT_THROW(ExtractionBlock<double>(TapPoint{"t", TapStage::Early, 4, 8}, cfg, ps, rng, "b"), ConfigError);
}

TEST(ExtractionBlock, ChannelReductionLaw) {
  for (std::size_t c : {1, 3, 8, 17, 64, 128})
    for (std::size_t r = 1; r <= c && r <= 9; ++r) {
      ParameterSet<double> ps;
      std::mt19937_64 rng(1);
      ExtractionBlockConfig cfg;
      cfg.r = r;
      cfg.mlp_hidden = 4;
      cfg.embed_dim = 2;
      cfg.targets = std::vector<std::size_t>{2};
      ExtractionBlock<double> blk(TapPoint{"t", TapStage::Early, c, 4}, cfg, ps, rng, "b");
      EXPECT_EQ(blk.reduce_weights()[0].dim(0), c / r);
    }
}

TEST(ExtractionBlock, ParallelAndCascadingShareShapes) {
  const TapPoint tap{"t", TapStage::Late, 16, 8};
  std::mt19937_64 data_rng(2);
  Var<double> x(random_tensor({3, 16, 8, 8}, data_rng));
  std::size_t counts[2];
  std::vector<Shape> shapes[2];
  for (int m = 0; m < 2; ++m) {
    ParameterSet<double> ps;
    std::mt19937_64 rng(1);
    ExtractionBlockConfig cfg;
    cfg.mode = m == 0 ? PipelineMode::Parallel : PipelineMode::Cascading;
    ExtractionBlock<double> blk(tap, cfg, ps, rng, "b");
    auto out = blk.forward(x, true, rng);
    for (const auto& p : out.per_pipeline) shapes[m].push_back(p.shape());
    shapes[m].push_back(out.normalized.shape());
    counts[m] = blk.reduce_weights().size();
  }
  EXPECT_EQ(shapes[0], shapes[1]);
  EXPECT_EQ(counts[0], 2u);
  EXPECT_EQ(counts[1], 1u);
}

TEST(ExtractionBlock, ConcatWidthAndUnitRows) {
  ParameterSet<double> ps;
  std::mt19937_64 rng(3);
  ExtractionBlock<double> blk(TapPoint{"t", TapStage::Early, 16, 16}, ExtractionBlockConfig{}, ps, rng, "b");
  Var<double> x(random_tensor({2, 16, 16, 16}, rng));
  auto out = blk.forward(x, false, rng);
  EXPECT_EQ(out.concatenated.shape(), (Shape{2, 192}));
  for (std::size_t n = 0; n < 2; ++n) {
    double ss = 0;
    for (std::size_t d = 0; d < 192; ++d) ss += out.normalized.value().at(n, d) * out.normalized.value().at(n, d);
    EXPECT_NEAR(ss, 1.0, 1e-12);
  }
  EXPECT_THROW(blk.forward(Var<double>(Tensor<double>(Shape{2, 16, 8, 8})), false, rng), ShapeError);
}

TEST(ExtractionBlock, DuplicateSamplesGiveIdenticalRows) {
  ParameterSet<double> ps;
  std::mt19937_64 rng(4);
  ExtractionBlock<double> blk(TapPoint{"t", TapStage::Late, 8, 8}, ExtractionBlockConfig{}, ps, rng, "b");
  auto one = random_tensor({1, 8, 8, 8}, rng);
  auto out = blk.forward(Var<double>(duplicate_rows(one, 2)), false, rng);
  const std::size_t D = out.normalized.dim(1);
  for (std::size_t d = 0; d < D; ++d) EXPECT_EQ(out.normalized.value().at(0, d), out.normalized.value().at(1, d));
}

TEST(ExtractionBlock, MatchesHandComposedChain) {
  ParameterSet<double> ps;
  std::mt19937_64 rng(5);
  ExtractionBlockConfig cfg;
  cfg.r = 1;
  cfg.dropout_rate = 0.0;
  cfg.targets = std::vector<std::size_t>{4, 2};
  cfg.mlp_hidden = 5;
  cfg.embed_dim = 3;
  ExtractionBlock<double> blk(TapPoint{"t", TapStage::Early, 2, 6}, cfg, ps, rng, "b");
  Var<double> x(random_tensor({1, 2, 6, 6}, rng));
  auto out = blk.forward(x, true, rng);
  auto P = [&](const std::string& n) { return ps.find("b." + n)->var; };
  std::vector<Var<double>> parts;
  for (std::size_t i = 0; i < 2; ++i) {
    const std::string pre = "pipe" + std::to_string(i);
    auto red = conv2d(x, P(pre + ".reduce.weight"), P(pre + ".reduce.bias"), 1, 0);
    auto pooled = flatten(maxpool_stride1(red, 6 - cfg.targets->at(i) + 1));
    auto h = relu(linear(pooled, P(pre + ".mlp.fc1.weight"), P(pre + ".mlp.fc1.bias")));
    parts.push_back(linear(h, P(pre + ".mlp.fc2.weight"), P(pre + ".mlp.fc2.bias")));
  }
  auto expected = l2_normalize_rows(concat_cols(parts));
  EXPECT_EQ(out.normalized.value().storage(), expected.value().storage());
}

TEST(M2Model, HeadWidthArithmetic) {
  ModelSpec spec;
  spec.backbone.tap_spec = std::vector<std::string>{"stem", "s1b1", "s1b2", "s2b1", "s2b2"};
  spec.num_classes = 7;
  M2Model<float> model(spec, 1);
  EXPECT_EQ(model.blocks().size(), 5u);
  EXPECT_EQ(model.head_input_width(), 5u * 3u * 64u);
}

TEST(M2Model, RejectsSingleClass) {
  ModelSpec spec;
  spec.num_classes = 1;
  EXPECT_THROW(M2Model<float>(spec, 1), ConfigError);
}

TEST(M2Model, ErmBaselineIsPlainCnn) {
  ModelSpec spec;
  spec.backbone.tap_spec = std::vector<std::string>{};
  spec.include_final_features = true;
  M2Model<double> model(spec, 1);
  EXPECT_TRUE(model.blocks().empty());
  EXPECT_EQ(model.head_input_width(), 64u);
  auto out = model.forward(const_input(2, 64, 1), false);
  EXPECT_EQ(out.logits.shape(), (Shape{2, 4}));
  EXPECT_TRUE(out.level_embeddings.empty());
  spec.include_final_features = false;
  EXPECT_THROW(M2Model<double>(spec, 1), ConfigError);
}

TEST(M2Model, EveryBlockInfluencesLogits) {
  ModelSpec spec;
  spec.backbone.input_size = 32;
  spec.backbone.stem_stride = 1;
  spec.backbone.stem_channels = 8;
  spec.backbone.stages = {{1, 8}, {1, 16}, {1, 16}};
  spec.block.mlp_hidden = 16;
  spec.block.embed_dim = 8;
  M2Model<double> model(spec, 2);
  auto out = model.forward(const_input(2, 32, 9), false);
  backward(sum(out.logits));
  for (const auto& blk : model.blocks())
    for (const auto& w : blk.reduce_weights()) {
      double mag = 0;
      for (double g : w.grad().storage()) mag += std::abs(g);
      EXPECT_GT(mag, 0.0) << blk.tap().name;
    }
}

TEST(M2Model, EvalForwardIsDeterministic) {
  ModelSpec spec;
  spec.backbone.input_size = 32;
  spec.backbone.stem_stride = 1;
  spec.backbone.stages = {{1, 8}, {1, 16}};
  spec.backbone.stem_channels = 8;
  M2Model<float> model(spec, 3);
  std::mt19937_64 rng(4);
  Var<float> x(random_tensor({2, 3, 32, 32}, rng).cast<float>());
  auto a = model.forward(x, false), b = model.forward(x, false);
  EXPECT_EQ(a.logits.value().storage(), b.logits.value().storage());
  for (std::size_t l = 0; l < a.level_embeddings.size(); ++l)
    EXPECT_EQ(a.level_embeddings[l].value().storage(), b.level_embeddings[l].value().storage());
}

TEST(M2Model, OverrideForUnexposedTapRejected) {
  ModelSpec spec;
  spec.backbone.tap_spec = std::vector<std::string>{"stem"};
  spec.block_overrides["s1b1"] = ExtractionBlockConfig{};
  EXPECT_THROW(M2Model<float>(spec, 1), ConfigError);
}
