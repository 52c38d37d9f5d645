#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "m2cl/experiments.hpp"

using namespace m2cl;
namespace fs = std::filesystem;

namespace {

const char* kTiny = R"(
seed = 5
log_steps = true

[backbone]
input_size = 16
stem_channels = 4
stem_stride = 1
stages = 1x4, 1x8

[blocks]
r = 2
mlp_hidden = 8
embed_dim = 4

[loss]
alpha = 0.01

[optimizer]
lr = 0.01
epochs = 1
batch_size = 8

[data]
image_size = 16
samples_per_domain_class = 4
shape_radius = 0.35

[split]
held_out = last
val_fraction = 0.25
)";

ExperimentConfig tiny(const std::string& extra = "") {
  auto doc = KeyValueDocument::parse(kTiny);
  auto extra_doc = KeyValueDocument::parse(extra);
  for (const auto& [k, v] : extra_doc.values()) doc.set(k, v);
  return apply_document(doc);
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("m2cl_harness_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

TEST(Config, ParsesSectionsListsAndOverrides) {
  const auto c = parse_config(R"(
# comment
seed = 7
[backbone]
stages = 2x16, 1x32   # trailing comment
[model]
taps = stem, s2b1
[blocks]
mode = cascading
targets = 4, 2
[blocks.s2b1]
r = 8
[loss]
tau = 0.5
[split]
held_out = solid, 2
)");
  EXPECT_EQ(c.seed, 7u);
  ASSERT_EQ(c.model.backbone.stages.size(), 2u);
  EXPECT_EQ(c.model.backbone.stages[0].blocks, 2u);
  EXPECT_EQ(c.model.backbone.stages[1].channels, 32u);
  EXPECT_EQ(c.taps, (std::vector<std::string>{"stem", "s2b1"}));
  EXPECT_EQ(c.model.block.mode, PipelineMode::Cascading);
  EXPECT_EQ(*c.model.block.targets, (std::vector<std::size_t>{4, 2}));
  ASSERT_EQ(c.model.block_overrides.count("s2b1"), 1u);
  EXPECT_EQ(c.model.block_overrides.at("s2b1").r, 8u);
  EXPECT_EQ(c.model.block_overrides.at("s2b1").mode, PipelineMode::Cascading);  // inherits
  EXPECT_EQ(c.loss.tau, 0.5);
  EXPECT_EQ(c.split.held_out, (std::vector<std::string>{"solid", "2"}));
}

TEST(Config, UnknownKeysAreErrors) {
  EXPECT_THROW(parse_config("sed = 1"), ConfigError);
  EXPECT_THROW(parse_config("[loss]\nbeta = 1"), ConfigError);
  EXPECT_THROW(parse_config("[blocks.stem]\nwidth = 3"), ConfigError);
  EXPECT_THROW(parse_config("[nonsense]\nx = 1"), ConfigError);
  try {
    parse_config("[loss]\nalpha = 0.1\n\ntemperature = 2\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("loss.temperature"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("line 4"), std::string::npos);
  }
}

TEST(Config, SyntaxAndValueErrors) {
  EXPECT_THROW(parse_config("[loss\nalpha = 1"), ConfigError);
  EXPECT_THROW(parse_config("alpha"), ConfigError);
  EXPECT_THROW(parse_config("[loss]\nalpha = 1\nalpha = 2"), ConfigError);
  EXPECT_THROW(parse_config("[loss]\nalpha = one"), ConfigError);
  EXPECT_THROW(parse_config("[blocks]\nr = -2"), ConfigError);
  EXPECT_THROW(parse_config("[blocks]\nmode = diagonal"), ConfigError);
  EXPECT_THROW(parse_config("[optimizer]\nbalanced = maybe"), ConfigError);
  EXPECT_THROW(parse_config("[backbone]\nstages = 16"), ConfigError);
}

TEST(Config, ValidationCatchesBadValues) {
  EXPECT_THROW(tiny("[optimizer]\nepochs = 0").validate(), ConfigError);
  EXPECT_THROW(tiny("[loss]\ntau = 0").validate(), ConfigError);
  EXPECT_THROW(tiny("[loss]\nalpha = -1").validate(), ConfigError);
  EXPECT_THROW(tiny("[data]\nimage_size = 32").validate(), ConfigError);
  EXPECT_THROW(tiny("[sweep]\ntau = 1, -1").validate(), ConfigError);
  EXPECT_THROW(tiny("precision = half").validate(), ConfigError);
  EXPECT_NO_THROW(tiny().validate());
}

TEST(Config, TextRoundTripAndHashStability) {
  const auto c = tiny("[blocks.stem]\nr = 4\ntargets = 8, 2");
  const auto back = parse_config(to_text(c));
  EXPECT_EQ(canonical_entries(back), canonical_entries(c));
  EXPECT_EQ(config_hash(back), config_hash(c));

  const auto a = parse_config("[loss]\nalpha = 0.1\ntau = 2\n[optimizer]\nlr = 0.5\n");
  const auto b = parse_config("[optimizer]\nlr = 0.5\n[loss]\ntau = 2.0\nalpha = 1e-1\n");
  EXPECT_EQ(config_hash(a), config_hash(b));
  EXPECT_NE(config_hash(a), config_hash(parse_config("[loss]\nalpha = 0.2\n")));
  // Seed is a run property, not a configuration property.
  EXPECT_EQ(config_hash(parse_config("seed = 1")), config_hash(parse_config("seed = 2")));
}

TEST(Config, DefaultsMatchFullScaleProtocol) {
  const ExperimentConfig c;
  EXPECT_EQ(c.optimizer.lr, 0.001);
  EXPECT_EQ(c.optimizer.epochs, 30u);
  EXPECT_EQ(c.optimizer.batch_size, 128u);
  EXPECT_EQ(c.loss.alpha, 0.01);
  EXPECT_EQ(c.loss.tau, 1.0);
  EXPECT_EQ(c.tau_list.size(), 14u);
  EXPECT_EQ(c.alpha_list.size(), 6u);
}

TEST(Config, ResolvedModelForBaseline) {
  const auto c = tiny("[model]\ntaps = none");
  const auto spec = c.resolved_model(4);
  EXPECT_TRUE(spec.include_final_features);
  ASSERT_TRUE(spec.backbone.tap_spec);
  EXPECT_TRUE(spec.backbone.tap_spec->empty());
  M2Model<float> m(spec, 0);
  EXPECT_TRUE(m.blocks().empty());
  EXPECT_FALSE(tiny().resolved_model(4).include_final_features);
}

// ---------------------------------------------------------------------------
// Evaluation

TEST(Evaluate, PerfectOracleScoresOne) {
  auto c = tiny();
  const auto data = prepare_data(c);
  std::vector<std::size_t> idx(10);
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<int> pred;
  for (auto i : idx) pred.push_back(data.dataset.samples[i].class_label);
  EXPECT_EQ(score_predictions(data.dataset, idx, pred).accuracy, 1.0);
}

TEST(Evaluate, RandomGuessesNearChance) {
  auto c = tiny("[data]\nsamples_per_domain_class = 80");
  const auto data = prepare_data(c);
  std::vector<std::size_t> idx(data.dataset.samples.size());
  std::iota(idx.begin(), idx.end(), 0);
  ASSERT_GE(idx.size(), 1000u);
  std::mt19937_64 rng(4);
  std::vector<int> pred;
  for (std::size_t i = 0; i < idx.size(); ++i) pred.push_back(static_cast<int>(rng() % 4));
  const auto r = score_predictions(data.dataset, idx, pred);
  EXPECT_NEAR(r.accuracy, 0.25, 0.03);
  std::vector<std::size_t> per_class(4, 0);
  for (auto i : idx) ++per_class[static_cast<std::size_t>(data.dataset.samples[i].class_label)];
  for (std::size_t k = 0; k < 4; ++k)
    EXPECT_EQ(std::accumulate(r.confusion[k].begin(), r.confusion[k].end(), std::size_t{0}), per_class[k]);
  EXPECT_EQ(r.per_domain.size(), 4u);
}

TEST(Evaluate, RejectsClassCountMismatch) {
  auto c = tiny();
  const auto data = prepare_data(c);
  M2Model<float> m(c.resolved_model(3), 0);
  EXPECT_THROW(evaluate(m, data.dataset, {0, 1}), DataError);
}

// ---------------------------------------------------------------------------
// Training

TEST(Train, OneEpochReducesCrossEntropy) {
  auto c = tiny("[loss]\nalpha = 0\n[data]\nspurious_rho = 1\n[split]\nval_fraction = 0");
  const auto data = prepare_data(c);
  ASSERT_EQ(data.dataset.samples.size(), 64u);
  const auto split = plan_splits(data.dataset, data.held_out, 0.0, c.seed);
  auto train_ce = [&](M2Model<float>& m) {
    NoGradGuard no_grad;
    auto b = make_batch<float>(data.dataset, split.train);
    return static_cast<double>(cross_entropy(m.forward(Var<float>(b.images), false).logits, b.classes).item());
  };
  M2Model<float> initial(c.resolved_model(4), c.seed);
  auto result = train<float>(c, data.dataset, split);
  EXPECT_EQ(result.record.epochs.size(), 1u);
  EXPECT_LT(train_ce(*result.model), train_ce(initial));
}

TEST(Train, AlphaZeroSharesFirstStepCrossEntropy) {
  const auto with = run_experiment(tiny());
  const auto without = run_experiment(tiny("[loss]\nalpha = 0"));
  EXPECT_EQ(with.steps.front().cross_entropy, without.steps.front().cross_entropy);
  EXPECT_GT(with.steps.front().contrastive_sum, 0.0);
  EXPECT_EQ(without.steps.front().total, without.steps.front().cross_entropy);
}

TEST(Train, DeterministicPerSeed) {
  const auto dir_a = scratch("det_a"), dir_b = scratch("det_b");
  const auto c = tiny("[optimizer]\nepochs = 2");
  RunOptions a, b;
  a.artifacts = dir_a;
  b.artifacts = dir_b;
  const auto ra = run_experiment(c, a), rb = run_experiment(c, b);
  ASSERT_EQ(ra.steps.size(), rb.steps.size());
  for (std::size_t i = 0; i < ra.steps.size(); ++i) {
    EXPECT_NEAR(ra.steps[i].total, rb.steps[i].total, 1e-7);
    EXPECT_NEAR(ra.steps[i].cross_entropy, rb.steps[i].cross_entropy, 1e-7);
  }
  EXPECT_EQ(slurp(dir_a / "checkpoint.m2cl"), slurp(dir_b / "checkpoint.m2cl"));
  auto c2 = c;
  c2.seed = 6;
  EXPECT_NE(run_experiment(c2).steps.front().total, ra.steps.front().total);
}

TEST(Train, LoggedTotalDecomposes) {
  for (double alpha : {0.0, 0.01, 0.5}) {
    auto c = tiny("precision = double\n[optimizer]\nepochs = 2");
    c.loss.alpha = alpha;
    const auto rec = run_experiment(c);
    ASSERT_FALSE(rec.steps.empty());
    for (const auto& s : rec.steps) {
      EXPECT_NEAR(s.total, s.cross_entropy + alpha * s.contrastive_sum, 1e-9);
      double sum = 0;
      for (double l : s.levels) sum += l;
      EXPECT_NEAR(sum, s.contrastive_sum, 1e-12);
    }
  }
}

TEST(Train, NonFiniteLossAbortsWithDiagnostic) {
  auto c = tiny();
  auto data = prepare_data(c);
  for (auto& s : data.dataset.samples) s.pixels.fill(std::numeric_limits<float>::quiet_NaN());
  try {
    run_experiment(c, data);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("cross_entropy"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos);
  }
}

TEST(Train, InjectedHeldOutSampleTripsPurityCheck) {
  auto c = tiny();
  const auto data = prepare_data(c);
  const auto split = plan_splits(data.dataset, data.held_out, c.split.val_fraction, c.seed);
  TrainHooks hooks;
  hooks.mutate_batch = [&](std::vector<std::size_t>& b) { b.back() = split.test.front(); };
  EXPECT_THROW(train<float>(c, data.dataset, split, hooks), DomainLeakError);
}

TEST(Train, BatchesNeverContainHeldOutDomains) {
  auto c = tiny("[optimizer]\nepochs = 2");
  const auto data = prepare_data(c);
  const auto split = plan_splits(data.dataset, data.held_out, c.split.val_fraction, c.seed);
  TrainHooks hooks;
  std::size_t seen = 0;
  hooks.mutate_batch = [&](std::vector<std::size_t>& b) {
    for (auto i : b) ASSERT_FALSE(data.held_out.count(data.dataset.samples[i].domain_label));
    seen += b.size();
  };
  train<float>(c, data.dataset, split, hooks);
  EXPECT_GT(seen, 0u);
}

TEST(Train, RunArtifactsWritten) {
  const auto dir = scratch("artifacts");
  RunOptions o;
  o.artifacts = dir;
  const auto rec = run_experiment(tiny(), o);
  ASSERT_TRUE(fs::exists(dir / "run.jsonl"));
  std::ifstream in(dir / "run.jsonl");
  std::string line;
  std::size_t steps = 0, epochs = 0, results = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    const auto ev = j.at("event").get<std::string>();
    steps += ev == "step";
    epochs += ev == "epoch";
    results += ev == "result";
    if (ev == "step") {
      EXPECT_TRUE(j.contains("cross_entropy"));
      EXPECT_TRUE(j.contains("contrastive_sum"));
    }
  }
  EXPECT_EQ(steps, rec.steps.size());
  EXPECT_EQ(epochs, 1u);
  EXPECT_EQ(results, 1u);
}

// ---------------------------------------------------------------------------
// Checkpoints

TEST(Checkpoint, RoundTripReproducesAccuracyExactly) {
  auto c = tiny("[optimizer]\nepochs = 2");
  const auto data = prepare_data(c);
  const auto split = plan_splits(data.dataset, data.held_out, c.split.val_fraction, c.seed);
  auto result = train<float>(c, data.dataset, split);
  const auto path = scratch("ck") / "checkpoint.m2cl";
  save_checkpoint(Checkpoint::from_model(*result.model, checkpoint_meta(c, data.dataset, result.record)), path);
  const auto ck = load_checkpoint(path);
  EXPECT_EQ(parse_config(ck.meta_at("config")).seed, c.seed);
  M2Model<float> fresh(c.resolved_model(data.dataset.num_classes()), 999);
  ck.load_into(fresh);
  for (const auto& p : result.model->parameters().items())
    EXPECT_EQ(fresh.parameters().find(p.name)->var.value().storage(), p.var.value().storage()) << p.name;
  const auto again = evaluate(fresh, data.dataset, split.test);
  EXPECT_EQ(again.accuracy, result.record.test.accuracy);
  EXPECT_EQ(predict(fresh, data.dataset, split.test), predict(*result.model, data.dataset, split.test));
}

TEST(Checkpoint, LayoutIsLittleEndianWithMagic) {
  Checkpoint ck;
  ck.meta["k"] = "v";
  Tensor<double> t(Shape{2});
  t[0] = 1.0;
  t[1] = -2.5;
  ck.params.emplace_back("w", t);
  const auto path = scratch("layout") / "x.m2cl";
  save_checkpoint(ck, path);
  const auto bytes = slurp(path);
  ASSERT_GE(bytes.size(), 8u);
  EXPECT_EQ(bytes.substr(0, 4), "M2CL");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5], 0);
  // Last eight bytes: -2.5 as IEEE-754 little-endian.
  const unsigned char tail[8] = {0, 0, 0, 0, 0, 0, 0x04, 0xc0};
  for (int i = 0; i < 8; ++i) EXPECT_EQ(static_cast<unsigned char>(bytes[bytes.size() - 8 + i]), tail[i]);
  const auto back = load_checkpoint(path);
  EXPECT_EQ(back.params.at(0).second.shape(), (Shape{2}));
  EXPECT_EQ(back.params.at(0).second[1], -2.5);
}

TEST(Checkpoint, CorruptFilesRejected) {
  const auto dir = scratch("corrupt");
  std::ofstream(dir / "bad.m2cl") << "NOPE0000";
  EXPECT_THROW(load_checkpoint(dir / "bad.m2cl"), DataError);
  EXPECT_THROW(load_checkpoint(dir / "missing.m2cl"), DataError);
  Checkpoint ck;
  ck.params.emplace_back("w", Tensor<double>(Shape{3, 3}));
  save_checkpoint(ck, dir / "ok.m2cl");
  auto bytes = slurp(dir / "ok.m2cl");
  std::ofstream(dir / "short.m2cl", std::ios::binary) << bytes.substr(0, bytes.size() - 5);
  EXPECT_THROW(load_checkpoint(dir / "short.m2cl"), DataError);
  M2Model<float> m(tiny().resolved_model(4), 0);
  EXPECT_THROW(ck.load_into(m), DataError);
}

// ---------------------------------------------------------------------------
// Experiment drivers

TEST(Lodo, OneRunPerDomainAndSeed) {
  const auto dir = scratch("lodo");
  auto r = lodo(tiny(), 1, dir);
  EXPECT_EQ(r.domains.size(), 4u);
  ASSERT_EQ(r.accuracy.size(), 1u);
  EXPECT_EQ(r.accuracy[0].size(), 4u);
  std::ifstream in(dir / "results.tsv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "run\tsolid\tstripes\tchecker\tnoise\tmean");
  std::size_t rows = 0;
  for (std::string l; std::getline(in, l);) ++rows;
  EXPECT_EQ(rows, 2u);
  EXPECT_TRUE(fs::exists(dir / "noise" / "seed5" / "checkpoint.m2cl"));
}

TEST(Lodo, RepeatsAverageAndTwoDomainCase) {
  auto c = tiny("[data]\nnum_domains = 2");
  const auto r = lodo(c, 3);
  ASSERT_EQ(r.accuracy.size(), 3u);
  EXPECT_EQ(r.accuracy[0].size(), 2u);
  const auto m = r.domain_mean();
  EXPECT_NEAR(m[1], (r.accuracy[0][1] + r.accuracy[1][1] + r.accuracy[2][1]) / 3, 1e-15);
}

TEST(Ablate, GridMatchesTableLayout) {
  const auto g = ablation_grid();
  ASSERT_EQ(g.size(), 13u);
  std::size_t cascading = 0, with_loss = 0;
  for (const auto& cell : g) {
    cascading += cell.mode == PipelineMode::Cascading;
    with_loss += cell.loss;
  }
  EXPECT_EQ(cascading, 6u);
  EXPECT_EQ(with_loss, 1u);
  const auto& flagship = g.back();
  EXPECT_EQ(flagship.mode, PipelineMode::Parallel);
  EXPECT_EQ(flagship.r, 4u);
  EXPECT_TRUE(flagship.dropout && flagship.loss);
  const auto& m2 = g[g.size() - 2];
  EXPECT_EQ(m2.r, 4u);
  EXPECT_TRUE(m2.dropout && !m2.loss);
  EXPECT_EQ(g[0].r, 2u);
  EXPECT_FALSE(g[0].dropout);

  const auto base = tiny();
  EXPECT_EQ(apply_cell(base, g[0]).loss.alpha, 0.0);
  EXPECT_EQ(apply_cell(base, g[0]).model.block.dropout_rate, 0.0);
  EXPECT_EQ(apply_cell(base, flagship).loss.alpha, 0.01);
  EXPECT_EQ(apply_cell(base, flagship).model.block.dropout_rate, 0.5);
}

TEST(Ablate, RunsEveryRow) {
  const auto dir = scratch("ablate");
  const auto rows = ablate(tiny("[blocks]\nr = 1\n[backbone]\nstem_channels = 6\nstages = 1x6, 1x12"), dir);
  EXPECT_EQ(rows.size(), 13u);
  std::ifstream in(dir / "results.tsv");
  std::size_t lines = 0;
  for (std::string l; std::getline(in, l);) ++lines;
  EXPECT_EQ(lines, 14u);
}

TEST(Sweep, TwoAxesShareSeed) {
  const auto pts = sensitivity(tiny(), {0.5, 2.0}, {0.0, 0.1, 1.0});
  ASSERT_EQ(pts.size(), 5u);
  for (const auto& p : pts) EXPECT_EQ(p.record.seed, 5u);
  EXPECT_EQ(pts[0].axis, "tau");
  EXPECT_EQ(pts[4].axis, "alpha");
  EXPECT_THROW(sensitivity(tiny(), {0.0}, {0.1}), ConfigError);
  EXPECT_THROW(sensitivity(tiny(), {1.0}, {-0.1}), ConfigError);
}

TEST(PrepareData, HeldOutSyntheticDomainIsCueFree) {
  auto c = tiny("[data]\nspurious_rho = 1\nsamples_per_domain_class = 40\n[split]\nheld_out = checker");
  const auto data = prepare_data(c);
  EXPECT_EQ(data.held_out, (std::set<int>{2}));
  std::size_t train_match = 0, train_n = 0, test_match = 0, test_n = 0;
  for (const auto& s : data.dataset.samples) {
    const bool held = s.domain_label == 2;
    (held ? test_match : train_match) += s.cue_id == s.class_label;
    ++(held ? test_n : train_n);
  }
  EXPECT_EQ(train_match, train_n);
  EXPECT_LT(static_cast<double>(test_match) / static_cast<double>(test_n), 0.5);
  EXPECT_THROW(prepare_data(tiny("[split]\nheld_out = lava")), ConfigError);
}
