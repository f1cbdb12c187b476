#include <gtest/gtest.h>

#include <set>

#include "d2d/bench.hpp"

using namespace d2d;

namespace {

const World& default_world() {
  static const World w = World::make(WorldSpec{});
  return w;
}

// A short alignment keeps the suite tests quick; calibration does the rest.
const LmnParams& quick_aligned() {
  static const LmnParams p = [] {
    std::mt19937_64 rng(1);
    LmnParams q = init_params(default_world().dim(), rng);
    AlignConfig cfg;
    cfg.n_latents = 10;
    cfg.epochs = 20;
    pre_align(q, cfg, MixConfig{});
    return q;
  }();
  return p;
}

RunContext context() { return RunContext{&default_world(), &quick_aligned(), PipelineConfig{}}; }

RunRecord record(std::vector<std::size_t> targets, std::vector<std::size_t> initial, std::vector<std::size_t> final) {
  RunRecord r;
  r.prompt.counts = std::move(targets);
  r.prompt.classes.resize(r.prompt.counts.size());
  r.initial = std::move(initial);
  r.final_counts = std::move(final);
  return r;
}

}  // namespace

TEST(BuildSuite, SmallCountsInRange) {
  const auto suite = build_suite(SuiteTag::small, 100, 0, 3, 16);
  ASSERT_EQ(suite.size(), 100u);
  std::set<std::size_t> counts;
  for (const auto& p : suite) {
    ASSERT_EQ(p.classes.size(), 1u);
    EXPECT_LT(p.classes[0], 3u);
    EXPECT_GE(p.counts[0], 1u);
    EXPECT_LE(p.counts[0], 10u);
    counts.insert(p.counts[0]);
  }
  EXPECT_EQ(counts.size(), 10u);
}

TEST(BuildSuite, MultiHasTwoDistinctClasses) {
  for (const auto& p : build_suite(SuiteTag::multi, 200, 1, 3, 16)) {
    ASSERT_EQ(p.classes.size(), 2u);
    EXPECT_NE(p.classes[0], p.classes[1]);
    for (std::size_t n : p.counts) {
      EXPECT_GE(n, 1u);
      EXPECT_LT(n, 10u);
    }
  }
  EXPECT_THROW(build_suite(SuiteTag::multi, 5, 1, 1, 16), ConfigError);
}

TEST(BuildSuite, LargeNeedsEnoughSlots) {
  EXPECT_THROW(build_suite(SuiteTag::large, 10, 0, 3, 16), ConfigError);
  for (const auto& p : build_suite(SuiteTag::large, 50, 0, 3, 24)) {
    EXPECT_GE(p.counts[0], 11u);
    EXPECT_LE(p.counts[0], 20u);
  }
}

TEST(BuildSuite, SeedDeterminism) {
  EXPECT_EQ(build_suite(SuiteTag::multi, 40, 9, 3, 16), build_suite(SuiteTag::multi, 40, 9, 3, 16));
  EXPECT_NE(build_suite(SuiteTag::small, 40, 9, 3, 16), build_suite(SuiteTag::small, 40, 10, 3, 16));
}

TEST(Breakdown, ClassifiesAndPartitions) {
  EXPECT_EQ(classify_initial(record({3}, {5}, {3})), InitialState::over);
  EXPECT_EQ(classify_initial(record({3}, {1}, {3})), InitialState::under);
  EXPECT_EQ(classify_initial(record({3}, {3}, {4})), InitialState::correct);
  EXPECT_EQ(classify_initial(record({3, 2}, {4, 1}, {3, 2})), InitialState::mixed);
  EXPECT_EQ(classify_initial(record({3, 2}, {4, 2}, {3, 2})), InitialState::over);

  Breakdown b;
  b.add(record({3}, {5}, {3}));
  b.add(record({3}, {5}, {4}));
  b.add(record({3}, {1}, {3}));
  b.add(record({3}, {3}, {3}));
  b.add(record({3}, {3}, {2}));
  EXPECT_EQ(b.total(), 5u);
  EXPECT_EQ(b.over.runs, 2u);
  EXPECT_DOUBLE_EQ(b.over.percent(), 50.0);
  EXPECT_DOUBLE_EQ(b.under.percent(), 100.0);
  EXPECT_DOUBLE_EQ(b.correct.percent(), 50.0);
  EXPECT_EQ(b.mixed.percent(), 0.0);
}

TEST(Aggregate, MeanAndStddevOverSeeds) {
  SuiteResult r;
  r.seeds = {0, 1, 2};
  // seed 0: 2/2, seed 1: 1/2, seed 2: 0/2
  r.records = {record({1}, {0}, {1}), record({2}, {0}, {2}), record({1}, {0}, {1}),
               record({2}, {0}, {0}), record({1}, {0}, {0}), record({2}, {0}, {0})};
  aggregate(r, 2);
  EXPECT_EQ(r.per_seed_accuracy, (std::vector<double>{100.0, 50.0, 0.0}));
  EXPECT_DOUBLE_EQ(r.mean, 50.0);
  EXPECT_DOUBLE_EQ(r.stddev, 50.0);
  EXPECT_DOUBLE_EQ(r.pooled_accuracy(), 50.0);
  EXPECT_EQ(r.breakdown.total(), 6u);
  EXPECT_EQ(sample_stddev({4.0}), 0.0);
}

TEST(Aggregate, DensityFacetOnMultiOnly) {
  SuiteResult r;
  r.seeds = {0};
  r.records = {record({3, 4}, {3, 4}, {3, 4}), record({6, 7}, {1, 1}, {6, 7}), record({6, 7}, {1, 1}, {6, 6})};
  for (auto& rec : r.records) rec.prompt.tag = SuiteTag::multi;
  aggregate(r, 3);
  EXPECT_EQ(r.low_density.runs, 1u);
  EXPECT_EQ(r.high_density.runs, 2u);
  EXPECT_DOUBLE_EQ(r.high_density.percent(), 50.0);
}

TEST(RunSuite, NoOpNeverCorrects) {
  const auto suite = build_suite(SuiteTag::small, 60, 3, 3, 16);
  const auto res = run_suite(suite, {Mode::no_op}, {0, 1}, context(), 1);
  ASSERT_EQ(res.size(), 1u);
  const SuiteResult& r = res[0];
  EXPECT_EQ(r.records.size(), 120u);
  EXPECT_EQ(r.breakdown.total(), r.records.size());
  EXPECT_GT(r.breakdown.over.runs + r.breakdown.under.runs, 0u);
  EXPECT_EQ(r.breakdown.over.percent(), 0.0);
  EXPECT_EQ(r.breakdown.under.percent(), 0.0);
  EXPECT_EQ(r.breakdown.correct.percent(), r.breakdown.correct.runs ? 100.0 : 0.0);
  // Accuracy is the share of latents whose initial count already matches.
  EXPECT_DOUBLE_EQ(r.pooled_accuracy(), 100.0 * r.breakdown.correct.runs / 120.0);
}

TEST(RunSuite, AccuracyBoundsAndAggregation) {
  const auto suite = build_suite(SuiteTag::small, 8, 4, 3, 16);
  const std::vector<std::uint64_t> seeds{0, 1, 2};
  const auto res = run_suite(suite, {Mode::d2d, Mode::direct_latent, Mode::no_op}, seeds, context(), 2);
  ASSERT_EQ(res.size(), 3u);
  for (const auto& r : res) {
    EXPECT_EQ(r.records.size(), suite.size() * seeds.size());
    EXPECT_EQ(r.breakdown.total(), r.records.size());
    for (double a : r.per_seed_accuracy) {
      EXPECT_GE(a, 0.0);
      EXPECT_LE(a, 100.0);
    }
    double s = 0.0;
    for (double a : r.per_seed_accuracy) s += a;
    EXPECT_NEAR(r.mean, s / static_cast<double>(seeds.size()), 1e-12);
    for (std::size_t k = 0; k < r.records.size(); ++k) {
      EXPECT_EQ(r.records[k].prompt, suite[k % suite.size()]);
      EXPECT_EQ(r.records[k].seed, seeds[k / suite.size()]);
      EXPECT_EQ(r.records[k].latent_seed, mix_seed(seeds[k / suite.size()], k % suite.size()));
    }
  }
}

TEST(RunSuite, JobCountDoesNotChangeResults) {
  const auto suite = build_suite(SuiteTag::small, 6, 5, 3, 16);
  const auto a = run_suite(suite, {Mode::d2d}, {7}, context(), 1);
  const auto b = run_suite(suite, {Mode::d2d}, {7}, context(), 3);
  for (std::size_t k = 0; k < a[0].records.size(); ++k) {
    EXPECT_EQ(a[0].records[k].final_counts, b[0].records[k].final_counts);
    EXPECT_EQ(a[0].records[k].loss_trace, b[0].records[k].loss_trace);
  }
}

TEST(Sweep, DefaultGrids) {
  EXPECT_EQ(default_grid(SweepParam::tau).size(), 4u);
  EXPECT_EQ(default_grid(SweepParam::beta).size(), 5u);
  EXPECT_EQ(default_grid(SweepParam::w).size(), 4u);
  EXPECT_EQ(default_grid(SweepParam::beta), (std::vector<double>{1, 10, 100, 300, 400}));
  EXPECT_EQ(parse_sweep_param("beta"), SweepParam::beta);
  EXPECT_THROW(parse_sweep_param("eta"), ConfigError);
}

TEST(Sweep, SingleValueEqualsRunSuite) {
  const auto suite = build_suite(SuiteTag::small, 5, 6, 3, 16);
  const RunContext ctx = context();
  const auto rows = sweep(SweepParam::beta, {300.0}, suite, {Mode::d2d}, {0}, ctx, 1);
  const auto direct = run_suite(suite, {Mode::d2d}, {0}, ctx, 1);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].result.per_seed_accuracy, direct[0].per_seed_accuracy);
  for (std::size_t k = 0; k < direct[0].records.size(); ++k)
    EXPECT_EQ(rows[0].result.records[k].loss_trace, direct[0].records[k].loss_trace);
}

TEST(Sweep, RejectsInvalidValues) {
  const auto suite = build_suite(SuiteTag::small, 2, 0, 3, 16);
  const RunContext ctx = context();
  EXPECT_THROW(sweep(SweepParam::tau, {1.5}, suite, {Mode::no_op}, {0}, ctx, 1), Error);
  EXPECT_THROW(sweep(SweepParam::tau, {0.0}, suite, {Mode::no_op}, {0}, ctx, 1), Error);
  EXPECT_THROW(sweep(SweepParam::w, {-0.1}, suite, {Mode::no_op}, {0}, ctx, 1), ConfigError);
  EXPECT_THROW(sweep(SweepParam::beta, {}, suite, {Mode::no_op}, {0}, ctx, 1), ConfigError);
  const PipelineConfig tau = with_param(PipelineConfig{}, SweepParam::tau, 0.5);
  EXPECT_EQ(tau.critic.tau, 0.5);
  EXPECT_EQ(tau.eval_tau, 0.2);
}

TEST(ParallelFor, PropagatesErrors) {
  std::vector<int> hit(20, 0);
  parallel_for(20, 4, [&](std::size_t i) { hit[i] = 1; });
  EXPECT_EQ(std::count(hit.begin(), hit.end(), 1), 20);
  EXPECT_THROW(parallel_for(10, 3, [](std::size_t i) {
                 if (i == 7) throw Error("boom");
               }),
               Error);
}
