#include "metamap/eval.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "metamap/report_io.hpp"
#include "testutil.hpp"

using metamap::EpisodeConfig;
using metamap::EvalReport;
using metamap::GenerationConfig;
using metamap::MetaConfig;
using metamap::MetaTestOptions;
using metamap::Strategy;
using metamap::TokenSequence;

namespace {

struct EvalFixture {
  metamap::DataConfig dc;
  metamap::DatasetD ds;
  metamap::ModelT<double> model;
  metamap::ParameterSetT<double> params;

  EvalFixture() : dc(), ds(metamap::generate_dataset(dc, 1)) {
    metamap::BackboneConfig bb;
    bb.d_v = 8;
    bb.d_e = 8;
    bb.n_visual = 2;
    bb.layers = 1;
    bb.heads = 2;
    bb.ff_mult = 2;
    bb.context = 48;
    model = metamap::build_model<double>(bb, {}, dc.image_h, dc.image_w, dc.image_c,
                                         ds.vocab.size(), 1);
    params = metamap::init_params(model, 2);
  }
};

}  // namespace

TEST(Generate, GreedyIsDeterministic) {
  EvalFixture fx;
  GenerationConfig gen;
  auto rng1 = metamap::make_engine(1);
  auto rng2 = metamap::make_engine(999);  // greedy must not consume randomness
  auto a = metamap::generate(fx.model, fx.params, fx.ds.samples[0][0].image, {}, gen, rng1);
  auto b = metamap::generate(fx.model, fx.params, fx.ds.samples[0][0].image, {}, gen, rng2);
  EXPECT_EQ(a, b);
}

TEST(Generate, TopKOneEqualsGreedy) {
  EvalFixture fx;
  GenerationConfig greedy;
  GenerationConfig topk;
  topk.strategy = Strategy::kTopK;
  topk.top_k = 1;
  auto rng1 = metamap::make_engine(1);
  auto rng2 = metamap::make_engine(2);
  auto a = metamap::generate(fx.model, fx.params, fx.ds.samples[2][1].image, {}, greedy, rng1);
  auto b = metamap::generate(fx.model, fx.params, fx.ds.samples[2][1].image, {}, topk, rng2);
  EXPECT_EQ(a, b);
}

TEST(Generate, TopPOneColdTemperatureEqualsGreedy) {
  EvalFixture fx;
  GenerationConfig greedy;
  GenerationConfig topp;
  topp.strategy = Strategy::kTopP;
  topp.top_p = 1.0;
  topp.temperature = 1e-6;
  auto rng1 = metamap::make_engine(1);
  auto rng2 = metamap::make_engine(2);
  auto a = metamap::generate(fx.model, fx.params, fx.ds.samples[3][0].image, {}, greedy, rng1);
  auto b = metamap::generate(fx.model, fx.params, fx.ds.samples[3][0].image, {}, topp, rng2);
  EXPECT_EQ(a, b);
}

TEST(Generate, GreedyInvariantToTemperatureScaling) {
  EvalFixture fx;
  GenerationConfig hot;
  hot.temperature = 0.25;  // argmax unchanged under positive scaling
  GenerationConfig unit;
  auto rng1 = metamap::make_engine(1);
  auto rng2 = metamap::make_engine(2);
  auto a = metamap::generate(fx.model, fx.params, fx.ds.samples[1][0].image, {}, unit, rng1);
  auto b = metamap::generate(fx.model, fx.params, fx.ds.samples[1][0].image, {}, hot, rng2);
  EXPECT_EQ(a, b);
}

// Brute-force oracle for the nucleus filter on the hand-set distribution
// [0.4, 0.3, 0.2, 0.07, 0.03] with p = 0.9: keep exactly the first three,
// renormalized.
TEST(Generate, NucleusFilterMatchesBruteForce) {
  const std::vector<double> probs{0.4, 0.3, 0.2, 0.07, 0.03};
  auto kept = metamap::detail::nucleus_filter(probs, 0.9);
  ASSERT_EQ(kept.size(), 3u);
  std::set<int64_t> ids;
  double total = 0;
  for (auto& [id, p] : kept) {
    ids.insert(id);
    total += p;
  }
  EXPECT_EQ(ids, (std::set<int64_t>{0, 1, 2}));
  EXPECT_NEAR(total, 1.0, 1e-12);
  EXPECT_NEAR(kept[0].second, 0.4 / 0.9, 1e-12);
  EXPECT_NEAR(kept[2].second, 0.2 / 0.9, 1e-12);
}

TEST(Generate, AlwaysTerminatesByMaxNewTokens) {
  EvalFixture fx;
  GenerationConfig gen;
  gen.max_new_tokens = 3;
  auto rng = metamap::make_engine(1);
  auto out = metamap::generate(fx.model, fx.params, fx.ds.samples[0][0].image, {}, gen, rng);
  EXPECT_LE(out.size(), 3u);
}

TEST(MetaTest, EmptyReportForZeroEpisodes) {
  EvalFixture fx;
  MetaTestOptions<double> opt;
  opt.episodes = 0;
  auto report = metamap::meta_test(fx.model, fx.params, fx.ds, metamap::Partition::kMetaTest, {},
                                   {}, {}, opt);
  EXPECT_TRUE(report.per_episode_accuracy.empty());
  EXPECT_DOUBLE_EQ(report.mean_accuracy(), 0.0);
}

TEST(MetaTest, OracleGeneratorScoresHundredPercent) {
  EvalFixture fx;
  MetaTestOptions<double> opt;
  opt.episodes = 5;
  opt.adaptation_steps = 0;
  opt.generate_override = [](const metamap::ParameterSetT<double>&,
                             const metamap::QueryItem& q) {
    return TokenSequence{q.answer_token};
  };
  auto report = metamap::meta_test(fx.model, fx.params, fx.ds, metamap::Partition::kMetaTest, {},
                                   {}, {}, opt);
  EXPECT_DOUBLE_EQ(report.mean_accuracy(), 1.0);
  EXPECT_DOUBLE_EQ(report.stderr_accuracy(), 0.0);
}

// Chance-level reference: the raw line is 1/vocab per emitted token, but
// exact-match containment over max_new_tokens generated tokens multiplies the
// exposure, so an untrained model sits somewhat above 1/64 and far below any
// trained signal. Adaptation from a random init stays within the erasure
// bound (chance + 5 points) used by the meta-knowledge ablation. Measured at
// the default desk-scale configuration, matching the acceptance benchmark.
TEST(MetaTest, UntrainedThetaScoresNearChance) {
  metamap::DataConfig dc;
  auto ds = metamap::generate_dataset(dc, 1);
  auto model = metamap::build_model<double>(metamap::BackboneConfig{}, metamap::MapperConfig{},
                                            dc.image_h, dc.image_w, dc.image_c, ds.vocab.size(),
                                            1);
  auto params = metamap::init_params(model, 2);
  metamap::GenerationConfig gen;
  gen.max_new_tokens = 6;
  MetaTestOptions<double> opt;
  opt.episodes = 40;
  opt.adaptation_steps = 0;
  MetaConfig mc;
  auto report =
      metamap::meta_test(model, params, ds, metamap::Partition::kMetaTest, {}, mc, gen, opt);
  EXPECT_LE(report.mean_accuracy(), gen.max_new_tokens * report.chance_open_ended + 0.05);

  opt.adaptation_steps = 5;
  auto adapted =
      metamap::meta_test(model, params, ds, metamap::Partition::kMetaTest, {}, mc, gen, opt);
  EXPECT_LE(adapted.mean_accuracy(), report.chance_open_ended + 0.05);
}

TEST(MetaTest, AdaptationOnlySeesSupportSamples) {
  EvalFixture fx;
  EpisodeConfig ec;
  MetaTestOptions<double> opt;
  opt.episodes = 4;
  opt.adaptation_steps = 1;
  std::vector<std::vector<int64_t>> probed;
  opt.adapt_probe = [&](const std::vector<int64_t>& ids) { probed.push_back(ids); };
  MetaConfig mc;
  auto report = metamap::meta_test(fx.model, fx.params, fx.ds, metamap::Partition::kMetaTest, ec,
                                   mc, {}, opt);
  metamap::EpisodeStream stream{&fx.ds, metamap::Partition::kMetaTest, ec, opt.eval_seed};
  ASSERT_EQ(probed.size(), 4u);
  for (int64_t e = 0; e < 4; ++e) {
    auto ep = stream.at(e);
    std::set<int64_t> support_ids, query_ids;
    for (const auto& s : ep.support) support_ids.insert(s.sample_id);
    for (const auto& q : ep.query) query_ids.insert(q.sample_id);
    for (int64_t id : probed[static_cast<size_t>(e)]) {
      EXPECT_TRUE(support_ids.count(id));
      EXPECT_FALSE(query_ids.count(id));
    }
  }
}

TEST(MetaTest, BitReproducibleForFixedSeeds) {
  EvalFixture fx;
  MetaTestOptions<double> opt;
  opt.episodes = 6;
  opt.adaptation_steps = 1;
  GenerationConfig gen;
  gen.strategy = Strategy::kTopP;  // exercise the stochastic path too
  MetaConfig mc;
  auto a = metamap::meta_test(fx.model, fx.params, fx.ds, metamap::Partition::kMetaTest, {}, mc,
                              gen, opt);
  auto b = metamap::meta_test(fx.model, fx.params, fx.ds, metamap::Partition::kMetaTest, {}, mc,
                              gen, opt);
  EXPECT_EQ(a.per_episode_accuracy, b.per_episode_accuracy);
  ASSERT_EQ(a.generations.size(), b.generations.size());
  for (size_t i = 0; i < a.generations.size(); ++i)
    EXPECT_EQ(a.generations[i].generated, b.generations[i].generated);
}

TEST(MetaTest, ScoringInvariantToQueryOrder) {
  // accuracy is a mean over queries; permuting them inside an episode cannot
  // change the per-episode value. Exercise via two eval seeds that shuffle
  // query order differently but share the derived episode content.
  EvalFixture fx;
  MetaTestOptions<double> opt;
  opt.episodes = 3;
  opt.adaptation_steps = 0;
  opt.generate_override = [](const metamap::ParameterSetT<double>&,
                             const metamap::QueryItem& q) {
    // deterministic per-query answer: correct iff answer category is even
    return q.answer_category % 2 == 0 ? TokenSequence{q.answer_token} : TokenSequence{};
  };
  auto report = metamap::meta_test(fx.model, fx.params, fx.ds, metamap::Partition::kMetaTest, {},
                                   {}, {}, opt);
  metamap::EpisodeStream stream{&fx.ds, metamap::Partition::kMetaTest, {}, opt.eval_seed};
  for (int64_t e = 0; e < 3; ++e) {
    auto ep = stream.at(e);
    double expect = 0;
    for (const auto& q : ep.query) expect += q.answer_category % 2 == 0;
    expect /= static_cast<double>(ep.query.size());
    EXPECT_DOUBLE_EQ(report.per_episode_accuracy[static_cast<size_t>(e)], expect);
  }
}

TEST(MetaTest, FixedInductionPrependsCandidateNames) {
  EvalFixture fx;
  MetaTestOptions<double> opt;
  opt.episodes = 1;
  opt.adaptation_steps = 0;
  opt.fixed_induction = true;
  std::vector<TokenSequence> seen_inputs;
  opt.generate_override = [&](const metamap::ParameterSetT<double>&,
                              const metamap::QueryItem& q) {
    seen_inputs.push_back(q.input_text);
    return TokenSequence{};
  };
  metamap::meta_test(fx.model, fx.params, fx.ds, metamap::Partition::kMetaTest, {}, {}, {}, opt);
  ASSERT_FALSE(seen_inputs.empty());
  const auto& v = fx.ds.vocab;
  for (const auto& in : seen_inputs) {
    ASSERT_GE(in.size(), 5u);
    EXPECT_EQ(v.word(in[0]), "answer");
    EXPECT_EQ(v.word(in[1]), "with");
    EXPECT_EQ(v.word(in[3]), "or");
  }
}

TEST(Ablation, StepSweepEmitsFourMonotoneLabeledCells) {
  EvalFixture fx;
  metamap::AblationContext<double> ctx;
  ctx.dataset = &fx.ds;
  ctx.backbone = fx.model.backbone;
  ctx.mapper = fx.model.mapper;
  ctx.eval_episodes = 2;
  ctx.trained = &fx.params;  // skip training: structure test only
  auto cells = metamap::run_ablation(metamap::AblationKind::kStepSweep, ctx);
  ASSERT_EQ(cells.size(), 4u);
  EXPECT_EQ(cells[0].label, "steps_0");
  EXPECT_EQ(cells[3].label, "steps_5");
}

TEST(Ablation, RepeatsVsShotsCrossesCells) {
  EvalFixture fx;
  metamap::AblationContext<double> ctx;
  ctx.dataset = &fx.ds;
  ctx.backbone = fx.model.backbone;
  ctx.mapper = fx.model.mapper;
  ctx.eval_episodes = 2;
  ctx.adaptation_steps = 1;
  ctx.trained = &fx.params;
  auto cells = metamap::run_ablation(metamap::AblationKind::kRepeatsVsShots, ctx);
  ASSERT_EQ(cells.size(), 4u);
  std::set<std::string> labels;
  for (const auto& c : cells) labels.insert(c.label);
  EXPECT_EQ(labels, (std::set<std::string>{"k1_r1", "k1_r5", "k5_r1", "k5_r5"}));
}

TEST(ReportIo, JsonlAndCsvRoundTrip) {
  namespace fs = std::filesystem;
  EvalFixture fx;
  MetaTestOptions<double> opt;
  opt.episodes = 3;
  opt.adaptation_steps = 0;
  MetaConfig mc;
  auto report = metamap::meta_test(fx.model, fx.params, fx.ds, metamap::Partition::kMetaTest, {},
                                   mc, {}, opt);
  const auto dir = fs::temp_directory_path() / "metamap_report_test";
  fs::create_directories(dir);
  metamap::write_report_jsonl(report, fx.ds.vocab, (dir / "r.jsonl").string());
  metamap::write_flat_table({report}, (dir / "r.csv").string());

  std::ifstream in((dir / "r.jsonl").string());
  std::string line, last;
  int64_t lines = 0;
  while (std::getline(in, line)) {
    ++lines;
    last = line;
  }
  EXPECT_EQ(lines, 4);  // 3 episodes + summary
  auto j = nlohmann::json::parse(last);
  EXPECT_TRUE(j["summary"].get<bool>());
  // aggregate equals recomputation from the per-episode values
  EXPECT_NEAR(j["mean_accuracy"].get<double>(), report.mean_accuracy(), 1e-12);
  fs::remove_all(dir);
}
