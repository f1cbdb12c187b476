#include <gtest/gtest.h>

#include <filesystem>

#include "d2d/io.hpp"

using namespace d2d;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("d2d_io_" + name)).string();
}

RunRecord sample_record(Mode m, std::uint64_t seed, std::size_t target, std::size_t final) {
  RunRecord r;
  r.prompt = PromptSpec{SuiteTag::small, {1}, {target}};
  r.mode = m;
  r.seed = seed;
  r.initial = {target + 1};
  r.final_counts = {final};
  r.calib_iterations = 70;
  r.iterations = 4;
  r.generator_calls = 5;
  r.stop = final == target ? StopReason::early_stop : StopReason::budget_exhausted;
  r.loss_trace = {1.5, 0.25, 1e-17, 0.1 + 0.2};
  r.wall_seconds = 0.125;
  return r;
}

}  // namespace

TEST(Config, FileSetsKeysAndRejectsUnknown) {
  const std::string path = temp_path("cfg.ini");
  write_file(path, "[critic]\nbeta = 10\n[bench]\nseeds = 3, 5\nmodes = d2d,no-op\n[optim]\nK = 50\n");
  Settings s;
  const auto seen = apply_config_file(s, path);
  EXPECT_EQ(seen.size(), 4u);
  EXPECT_EQ(s.pipeline.critic.beta, 10.0);
  EXPECT_NEAR(s.pipeline.critic.tau_z, -1.3862944, 1e-6);
  EXPECT_EQ(s.seeds, (std::vector<std::uint64_t>{3, 5}));
  EXPECT_EQ(s.modes, (std::vector<Mode>{Mode::d2d, Mode::no_op}));
  EXPECT_EQ(s.pipeline.optim.budget(1), 50u);

  write_file(path, "[critic]\ngamma = 1\n");
  EXPECT_THROW(apply_config_file(s, path), ConfigError);
  write_file(path, "beta = 1\n");
  EXPECT_THROW(apply_config_file(s, path), ConfigError);
  write_file(path, "[critic]\nbeta = fast\n");
  EXPECT_THROW(apply_config_file(s, path), ConfigError);
  EXPECT_THROW(apply_config_file(s, temp_path("absent.ini")), ConfigError);
  std::filesystem::remove(path);
}

TEST(Config, DumpRoundTrips) {
  Settings s;
  s.pipeline.critic = CriticConfig::make(0.35, 120.0);
  s.pipeline.mix.w = 0.5;
  s.pipeline.calib.eta = 0.1 + 0.2;
  s.seeds = {9};
  s.suite = SuiteTag::multi;
  const std::string path = temp_path("dump.ini");
  write_file(path, dump_config(s));
  Settings t;
  apply_config_file(t, path);
  EXPECT_EQ(dump_config(t), dump_config(s));
  EXPECT_EQ(t.pipeline.calib.eta, 0.1 + 0.2);
  EXPECT_EQ(t.suite, SuiteTag::multi);
  std::filesystem::remove(path);
  for (const auto& k : setting_keys()) EXPECT_FALSE(k.help.empty()) << k.name();
}

TEST(Config, LargeSuiteWidensTheWorld) {
  Settings s;
  EXPECT_EQ(s.world_for_suite().slots, 16u);
  s.suite = SuiteTag::large;
  EXPECT_EQ(s.world_for_suite().slots, 24u);
}

TEST(Manifest, RoundTrip) {
  RunManifest m;
  m.command = "sweep";
  m.settings.world.seed = 11;
  m.settings.pipeline.optim.eta = 2e-4;
  m.world_gain = 1.2345678901234567;
  m.lmn_source = "aligned";
  m.records_path = "records.jsonl";
  m.table_path = "sweep.csv";
  m.sweep_param = "beta";
  m.sweep_values = {1, 300};
  const std::string path = temp_path("manifest.json");
  save_manifest(m, path);
  const RunManifest back = load_manifest(path);
  EXPECT_EQ(back.command, "sweep");
  EXPECT_EQ(back.world_gain, m.world_gain);
  EXPECT_EQ(back.sweep_values, m.sweep_values);
  EXPECT_EQ(back.settings.world.seed, 11u);
  EXPECT_EQ(back.settings.pipeline.optim.eta, 2e-4);
  EXPECT_EQ(dump_config(back.settings), dump_config(m.settings));
  write_file(path, "{\"format_version\": 1}");
  EXPECT_THROW(load_manifest(path), ConfigError);
  std::filesystem::remove(path);
}

TEST(Records, JsonRoundTrip) {
  const RunRecord r = sample_record(Mode::f_only, 42, 3, 3);
  const json j = record_to_json(r, RecordOptions("m.json"), 7);
  EXPECT_FALSE(j.contains("wall_seconds"));
  EXPECT_FALSE(j.contains("failure"));
  const LoadedRecord back = record_from_json(json::parse(j.dump()));
  EXPECT_EQ(back.prompt_index, 7u);
  EXPECT_EQ(back.manifest, "m.json");
  EXPECT_TRUE(back.stored_correct);
  EXPECT_EQ(back.record.loss_trace, r.loss_trace);
  EXPECT_EQ(back.record.prompt, r.prompt);
  EXPECT_EQ(back.record.mode, Mode::f_only);
  EXPECT_EQ(back.record.stop, StopReason::early_stop);
  EXPECT_TRUE(record_to_json(r, RecordOptions("m.json", true), 0).contains("wall_seconds"));
  EXPECT_THROW(record_from_json(json::parse("{\"format_version\": 1}")), ConfigError);
}

TEST(Records, RegroupMatchesOriginalAggregation) {
  SuiteResult a;
  a.mode = Mode::d2d;
  a.seeds = {3, 1};
  a.records = {sample_record(Mode::d2d, 3, 2, 2), sample_record(Mode::d2d, 3, 4, 5),
               sample_record(Mode::d2d, 1, 2, 2), sample_record(Mode::d2d, 1, 4, 4)};
  aggregate(a, 2);
  SuiteResult b = a;
  b.mode = Mode::no_op;
  for (auto& r : b.records) r.mode = Mode::no_op;
  aggregate(b, 2);

  const std::string path = temp_path("records.jsonl");
  write_file(path, records_jsonl({a, b}, 2, RecordOptions("m.json")));
  const auto loaded = read_jsonl(path);
  ASSERT_EQ(loaded.size(), 8u);
  EXPECT_EQ(loaded[1].prompt_index, 1u);
  const auto groups = regroup(loaded);
  ASSERT_EQ(groups.size(), 2u);
  EXPECT_EQ(groups[0].seeds, a.seeds);
  EXPECT_EQ(groups[0].per_seed_accuracy, a.per_seed_accuracy);
  EXPECT_EQ(accuracy_csv(groups), accuracy_csv({a, b}));

  auto uneven = loaded;
  uneven.pop_back();
  EXPECT_THROW(regroup(uneven), ConfigError);
  std::filesystem::remove(path);
}

TEST(Tables, ColumnsAndRows) {
  SuiteResult r;
  r.mode = Mode::d2d;
  r.seeds = {0, 1};
  r.records = {sample_record(Mode::d2d, 0, 2, 2), sample_record(Mode::d2d, 1, 2, 1)};
  aggregate(r, 1);
  const std::string csv = accuracy_csv({r});
  EXPECT_EQ(csv.substr(0, csv.find('\n')), kAccuracyColumns);
  EXPECT_NE(csv.find("d2d,2,2,50.0000,70.7107,50.0000,100.0000;0.0000,2,50.0000,"), std::string::npos);

  const std::string sweep = sweep_csv({SweepRow{SweepParam::beta, 300, r}});
  EXPECT_EQ(sweep.rfind("param,value,mode,", 0), 0u);
  EXPECT_NE(sweep.find("\nbeta,300,d2d,"), std::string::npos);
}
