// d2d: alignment, single runs, benchmark suites, sweeps, gradient checks and
// report aggregation over the toy world.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>

#include "d2d/gradcheck.hpp"
#include "d2d/io.hpp"

namespace fs = std::filesystem;
using namespace d2d;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;
constexpr int kExitGate = 4;

constexpr std::uint64_t kShellProbeSeed = 1000003;

struct GateFailure : Error {
  using Error::Error;
};

/// Flags that map onto config keys. A config file given with --config is
/// applied afterwards and wins over them.
struct SettingFlags {
  std::string config;
  std::string manifest;
  std::map<std::string, std::string> values;  // key -> raw value
  std::map<std::string, std::string> flag_of;  // key -> flag, for messages
};

void setting_flag(CLI::App* cmd, SettingFlags& f, const std::string& flag, const std::string& key,
                  const std::string& help) {
  f.flag_of[key] = flag;
  cmd->add_option_function<std::string>(
      flag, [&f, key](const std::string& v) { f.values[key] = v; }, help + " (" + key + ")");
}

void config_flags(CLI::App* cmd, SettingFlags& f) {
  cmd->add_option("--config", f.config, "INI config file; its keys override flags");
  setting_flag(cmd, f, "--world-seed", "world.seed", "seed of the toy world");
  setting_flag(cmd, f, "--lmn", "lmn.path", "pre-aligned network file");
  setting_flag(cmd, f, "--w", "mix.w", "mixing weight of the original latent");
}

void run_flags(CLI::App* cmd, SettingFlags& f) {
  config_flags(cmd, f);
  setting_flag(cmd, f, "--tau", "critic.tau", "detection threshold");
  setting_flag(cmd, f, "--beta", "critic.beta", "sigmoid steepness");
  setting_flag(cmd, f, "--k", "optim.K", "iteration budget");
}

void suite_flags(CLI::App* cmd, SettingFlags& f) {
  run_flags(cmd, f);
  setting_flag(cmd, f, "--suite", "bench.suite", "small | multi | large");
  setting_flag(cmd, f, "--mode", "bench.modes", "comma-separated modes");
  setting_flag(cmd, f, "--seeds", "bench.seeds", "comma-separated seeds");
  setting_flag(cmd, f, "--prompts", "bench.n_prompts", "prompts per suite");
  setting_flag(cmd, f, "--jobs", "bench.jobs", "worker threads");
  auto* from = cmd->add_option("--from-manifest", f.manifest, "rerun with the settings of a manifest");
  from->excludes(cmd->get_option("--config"));
}

Settings resolve(const SettingFlags& f) {
  Settings s;
  if (!f.manifest.empty()) {
    if (!f.values.empty()) throw ConfigError("--from-manifest cannot be combined with setting flags");
    return load_manifest(f.manifest).settings;
  }
  for (const auto& [key, value] : f.values) set_value(s, key, value);
  if (!f.config.empty()) {
    if (!fs::exists(f.config)) throw ConfigError("config file '" + f.config + "' not found");
    for (const auto& key : apply_config_file(s, f.config))
      if (f.values.count(key))
        std::cerr << "note: " << key << " from " << f.config << " overrides " << f.flag_of.at(key) << "\n";
  }
  return s;
}

struct Network {
  LmnParams params;
  std::string source;
};

Network obtain_network(const Settings& s, const World& world) {
  if (!s.lmn_path.empty()) {
    LmnParams p = load_params(s.lmn_path);
    if (p.d != world.dim())
      throw ConfigError("network '" + s.lmn_path + "' has d = " + std::to_string(p.d) + ", world has d = " +
                        std::to_string(world.dim()));
    return {std::move(p), s.lmn_path};
  }
  std::mt19937_64 rng(s.lmn_init_seed);
  LmnParams p = init_params(world.dim(), rng, s.activation);
  pre_align(p, s.pipeline.align, s.pipeline.mix);
  return {std::move(p), "aligned"};
}

bool needs_network(const std::vector<Mode>& modes) {
  return std::any_of(modes.begin(), modes.end(), [](Mode m) { return m == Mode::d2d || m == Mode::f_only; });
}

RunContext context_for(const Settings& s, const World& world, const LmnParams& p) {
  return RunContext{&world, &p, s.pipeline};
}

std::size_t jobs_for(const Settings& s) { return s.jobs ? s.jobs : default_jobs(); }

fs::path prepare_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error("cannot create output directory '" + dir + "': " + ec.message());
  return fs::path(dir);
}

RunManifest manifest_for(const std::string& command, const Settings& s, const World& world,
                         const std::string& lmn_source) {
  RunManifest m;
  m.command = command;
  m.settings = s;
  m.world_gain = world.gain();
  m.lmn_source = lmn_source;
  return m;
}

/// Reads the records back and checks that every stored verdict and
/// per-seed accuracy can be recomputed from the raw counts.
void verify_records(const std::string& path, const std::vector<SuiteResult>& expected) {
  const auto loaded = read_jsonl(path);
  for (const auto& lr : loaded)
    if (lr.stored_correct != lr.record.correct()) throw Error(path + ": stored verdict disagrees with counts");
  const auto again = regroup(loaded);
  if (again.size() != expected.size()) throw Error(path + ": mode count changed on reload");
  for (std::size_t i = 0; i < again.size(); ++i)
    if (again[i].per_seed_accuracy != expected[i].per_seed_accuracy || again[i].mean != expected[i].mean)
      throw Error(path + ": accuracy recomputed from records differs from the reported value");
}

// ---- commands ------------------------------------------------------------

int cmd_align(const SettingFlags& f, const std::string& out) {
  const Settings s = resolve(f);
  const World world = World::make(s.world);
  std::mt19937_64 rng(s.lmn_init_seed);
  LmnParams p = s.lmn_path.empty() ? init_params(world.dim(), rng, s.activation) : load_params(s.lmn_path);
  if (p.d != world.dim()) throw ConfigError("network dimension does not match the world");
  const AlignReport rep = pre_align(p, s.pipeline.align, s.pipeline.mix);

  const fs::path dir = prepare_dir(out);
  save_params(p, (dir / "lmn.bin").string());
  RunManifest m = manifest_for("align", s, world, s.lmn_path.empty() ? "init" : s.lmn_path);
  m.records_path = "lmn.bin";
  save_manifest(m, (dir / "manifest.json").string());

  const ShellReport shell = shell_report(p, s.pipeline.mix.w, 50, kShellProbeSeed);
  std::cout << "aligned d = " << p.d << ": " << rep.steps << " steps, final loss " << rep.final_loss << "\n"
            << "mean shell deviation over " << shell.total << " fresh latents: " << fmt_fixed(shell.mean_deviation, 6)
            << " (" << shell.within << "/" << shell.total << " within 5%)\n"
            << "wrote " << (dir / "lmn.bin").string() << "\n";
  return 0;
}

int cmd_run(const SettingFlags& f, const std::vector<std::size_t>& classes, const std::vector<std::size_t>& counts,
            std::uint64_t seed, const std::string& mode, const std::string& out) {
  Settings s = resolve(f);
  if (classes.size() != counts.size()) throw ConfigError("--class and --count need the same number of entries");
  const World world = World::make(s.world);
  for (std::size_t c : classes)
    if (c >= world.spec().classes) throw ConfigError("class " + std::to_string(c) + " is not in the world");
  const Mode m = parse_mode(mode);
  s.modes = {m};
  PromptSpec prompt{classes.size() > 1 ? SuiteTag::multi : SuiteTag::small, classes, counts};
  const Network net = needs_network(s.modes) ? obtain_network(s, world) : Network{{}, "none"};
  const RunRecord r = run_prompt(prompt, seed, m, context_for(s, world, net.params));

  const std::string line = record_to_json(r, RecordOptions(out.empty() ? "" : "manifest.json"), 0).dump();
  std::cout << line << "\n";
  if (!out.empty()) {
    const fs::path dir = prepare_dir(out);
    RunManifest man = manifest_for("run", s, world, net.source);
    man.records_path = "records.jsonl";
    save_manifest(man, (dir / "manifest.json").string());
    write_file((dir / "records.jsonl").string(), line + "\n");
  }
  return 0;
}

int cmd_bench(const SettingFlags& f, const std::string& out, bool timing, double min_accuracy) {
  const Settings s = resolve(f);
  const auto t0 = std::chrono::steady_clock::now();
  const World world = World::make(s.world_for_suite());
  const auto suite = build_suite(s.suite, s.n_prompts, s.suite_seed, world.spec().classes, world.spec().slots);
  const Network net = needs_network(s.modes) ? obtain_network(s, world) : Network{{}, "none"};
  const auto results = run_suite(suite, s.modes, s.seeds, context_for(s, world, net.params), jobs_for(s));

  const fs::path dir = prepare_dir(out);
  RunManifest m = manifest_for("bench", s, world, net.source);
  m.records_path = "records.jsonl";
  m.table_path = "accuracy.csv";
  save_manifest(m, (dir / "manifest.json").string());
  const std::string records = (dir / m.records_path).string();
  write_file(records, records_jsonl(results, suite.size(), RecordOptions("manifest.json", timing)));
  const std::string table = accuracy_csv(results);
  write_file((dir / m.table_path).string(), table);
  verify_records(records, results);

  std::cout << table;
  std::cerr << "bench: " << suite.size() << " prompts x " << s.seeds.size() << " seeds x " << s.modes.size()
            << " modes in "
            << fmt_fixed(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 1)
            << " s\n";
  for (const auto& r : results)
    if (r.mean < min_accuracy)
      throw GateFailure(std::string(mode_name(r.mode)) + " accuracy " + fmt_fixed(r.mean, 2) + " below " +
                        fmt_fixed(min_accuracy, 2));
  return 0;
}

int cmd_sweep(const SettingFlags& f, const std::string& param_name, std::vector<double> values,
              const std::string& out) {
  const Settings s = resolve(f);
  const SweepParam param = parse_sweep_param(param_name);
  if (values.empty()) values = default_grid(param);
  const World world = World::make(s.world_for_suite());
  const auto suite = build_suite(s.suite, s.n_prompts, s.suite_seed, world.spec().classes, world.spec().slots);
  const Network net = needs_network(s.modes) ? obtain_network(s, world) : Network{{}, "none"};
  const auto rows = sweep(param, values, suite, s.modes, s.seeds, context_for(s, world, net.params), jobs_for(s));

  const fs::path dir = prepare_dir(out);
  RunManifest m = manifest_for("sweep", s, world, net.source);
  m.records_path = "records.jsonl";
  m.table_path = "sweep.csv";
  m.sweep_param = sweep_name(param);
  m.sweep_values = values;
  save_manifest(m, (dir / "manifest.json").string());
  std::string records;
  RecordOptions opt("manifest.json");
  opt.sweep_param = sweep_name(param);
  for (const auto& row : rows) {
    opt.sweep_value = row.value;
    records += records_jsonl({row.result}, suite.size(), opt);
  }
  write_file((dir / m.records_path).string(), records);
  const std::string table = sweep_csv(rows);
  write_file((dir / m.table_path).string(), table);
  std::cout << table;
  return 0;
}

int cmd_gradcheck(const SettingFlags& f, const GradcheckConfig& gc) {
  const Settings s = resolve(f);
  const World world = World::make(s.world);
  std::mt19937_64 rng(s.lmn_init_seed);
  const LmnParams p = s.lmn_path.empty() ? init_params(world.dim(), rng, s.activation) : load_params(s.lmn_path);
  const GradcheckReport rep = gradcheck_pipeline(world, p, s.pipeline, gc);
  std::cout << "max relative error: " << rep.max_rel_error << " over " << rep.points << " points (" << rep.skipped
            << " near a kink, skipped); tolerance " << gc.tolerance << "\n";
  if (!rep.passed(gc.tolerance)) throw GateFailure("gradient check failed");
  std::cout << "PASS\n";
  return 0;
}

int cmd_report(const std::vector<std::string>& manifests, const std::string& out) {
  std::vector<LoadedRecord> records;
  std::set<int> versions;
  for (const auto& path : manifests) {
    const RunManifest m = load_manifest(path);
    versions.insert(m.format_version);
    if (m.records_path.empty() || m.command == "align") throw ConfigError(path + ": no run records to report");
    const auto loaded = read_jsonl((fs::path(path).parent_path() / m.records_path).string());
    for (const auto& lr : loaded) versions.insert(lr.format_version);
    records.insert(records.end(), loaded.begin(), loaded.end());
  }
  if (versions.size() > 1) throw ConfigError("refusing to mix result format versions");
  if (*versions.begin() != kResultFormatVersion)
    throw ConfigError("unsupported result format version " + std::to_string(*versions.begin()));

  // Sweep records are reported per grid point; plain runs form a single group.
  std::map<std::pair<std::string, double>, std::vector<LoadedRecord>> groups;
  for (auto& lr : records) groups[{lr.sweep_param, lr.sweep_value}].push_back(std::move(lr));
  std::string table;
  if (groups.size() == 1 && groups.begin()->first.first.empty()) {
    table = accuracy_csv(regroup(groups.begin()->second));
  } else {
    std::vector<SweepRow> rows;
    for (const auto& [key, group] : groups) {
      if (key.first.empty()) throw ConfigError("cannot report sweep and plain runs together");
      for (auto& r : regroup(group)) rows.push_back({parse_sweep_param(key.first), key.second, std::move(r)});
    }
    table = sweep_csv(rows);
  }
  if (!out.empty()) write_file(out, table);
  std::cout << table;
  return 0;
}

std::string config_markdown() {
  std::string md =
      "# Configuration reference\n\n"
      "Generated by `d2d config --markdown`. Config files are INI: `[section]` headers, `key = value` lines, "
      "`;` comments. Keys given in a file passed with `--config` override the matching command-line flags.\n";
  std::string section;
  for (const auto& k : setting_keys()) {
    if (k.section != section) {
      section = k.section;
      md += "\n## [" + section + "]\n\n| key | default | meaning |\n|---|---|---|\n";
    }
    const std::string v = k.get(Settings{});
    md += "| `" + k.key + "` | " + (v.empty() ? "(empty)" : "`" + v + "`") + " | " + k.help + " |\n";
  }
  return md;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Count correction against a toy generator/detector world"};
  app.require_subcommand(1);

  SettingFlags align_f, run_f, bench_f, sweep_f, grad_f;
  std::string align_out, run_out, bench_out, sweep_out, report_out;

  auto* align = app.add_subcommand("align", "pre-align a modifier network to the Gaussian shell");
  config_flags(align, align_f);
  align->add_option("--out", align_out, "output directory")->default_val("lmn");

  auto* run = app.add_subcommand("run", "optimize one prompt");
  run_flags(run, run_f);
  std::vector<std::size_t> classes{0}, counts;
  std::uint64_t seed = 0;
  std::string mode = "d2d";
  run->add_option("--class", classes, "class index per requested object type")->delimiter(',');
  run->add_option("--count", counts, "requested count per class")->delimiter(',')->required();
  run->add_option("--seed", seed, "latent seed");
  run->add_option("--mode", mode, "d2d | f-only | direct-latent | no-op");
  run->add_option("--out", run_out, "also write manifest and record here");

  auto* bench = app.add_subcommand("bench", "run a prompt suite under one or more modes");
  suite_flags(bench, bench_f);
  bool timing = false;
  double min_accuracy = 0.0;
  bench->add_option("--out", bench_out, "output directory")->default_val("bench");
  bench->add_flag("--timing", timing, "store wall time per run (breaks byte-identical reruns)");
  bench->add_option("--min-accuracy", min_accuracy, "exit 4 when any mode's mean accuracy is lower");

  auto* sw = app.add_subcommand("sweep", "run a suite across a grid of tau, beta or w");
  suite_flags(sw, sweep_f);
  std::string param;
  std::vector<double> values;
  bool default_grid_flag = false;
  sw->add_option("--param", param, "tau | beta | w")->required();
  auto* vals = sw->add_option("--values", values, "grid values")->delimiter(',');
  sw->add_flag("--default-grid", default_grid_flag, "use the reference grid")->excludes(vals);
  sw->add_option("--out", sweep_out, "output directory")->default_val("sweep");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of the composed objective");
  run_flags(grad, grad_f);
  GradcheckConfig gc;
  grad->add_option("--points", gc.points, "random points")->default_val(gc.points);
  grad->add_option("--coords", gc.coords, "coordinates per tensor")->default_val(gc.coords);
  grad->add_option("--seed", gc.seed, "sampling seed")->default_val(gc.seed);
  grad->add_option("--tolerance", gc.tolerance, "max relative error")->default_val(gc.tolerance);

  auto* report = app.add_subcommand("report", "aggregate results across manifests");
  std::vector<std::string> manifests;
  report->add_option("manifests", manifests, "manifest.json files")->required()->check(CLI::ExistingFile);
  report->add_option("--out", report_out, "write the table here too");

  auto* config = app.add_subcommand("config", "print the default configuration");
  bool markdown = false;
  config->add_flag("--markdown", markdown, "reference page instead of INI");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (align->parsed()) return cmd_align(align_f, align_out);
    if (run->parsed()) return cmd_run(run_f, classes, counts, seed, mode, run_out);
    if (bench->parsed()) return cmd_bench(bench_f, bench_out, timing, min_accuracy);
    if (sw->parsed()) return cmd_sweep(sweep_f, param, default_grid_flag ? std::vector<double>{} : values, sweep_out);
    if (grad->parsed()) return cmd_gradcheck(grad_f, gc);
    if (report->parsed()) return cmd_report(manifests, report_out);
    if (config->parsed()) {
      std::cout << (markdown ? config_markdown() : dump_config(Settings{}));
      return 0;
    }
  } catch (const GateFailure& e) {
    std::cerr << "gate failed: " << e.what() << "\n";
    return kExitGate;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitConfig;
}
