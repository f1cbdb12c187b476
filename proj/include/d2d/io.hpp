#pragma once

// Result files: JSON-lines run records, a JSON manifest per invocation, and
// CSV accuracy / sweep tables.

#include <nlohmann/json.hpp>

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "d2d/bench.hpp"
#include "d2d/config.hpp"

namespace d2d {

inline constexpr int kResultFormatVersion = 1;

using nlohmann::json;

/// Everything needed to regenerate a result file on the same build.
struct RunManifest {
  int format_version = kResultFormatVersion;
  std::string command;
  Settings settings;
  double world_gain = 0.0;
  std::string lmn_source;  // params file, or "aligned" for in-process alignment
  std::string records_path;
  std::string table_path;
  std::string sweep_param;  // sweep only
  std::vector<double> sweep_values;
};

inline json settings_to_json(const Settings& s) {
  json j = json::object();
  for (const auto& k : setting_keys()) j[k.section][k.key] = k.get(s);
  return j;
}

inline Settings settings_from_json(const json& j) {
  Settings s;
  for (const auto& [section, body] : j.items())
    for (const auto& [key, value] : body.items()) set_value(s, section + "." + key, value.get<std::string>());
  return s;
}

inline json manifest_to_json(const RunManifest& m) {
  const WorldSpec w = m.settings.world_for_suite();
  json j;
  j["format_version"] = m.format_version;
  j["command"] = m.command;
  j["config"] = settings_to_json(m.settings);
  j["world"] = {{"seed", w.seed},         {"slots", w.slots}, {"slot_dim", w.slot_dim},
                {"classes", w.classes},   {"dim", w.dim()},   {"calib_tau", w.calib_tau},
                {"gain", m.world_gain}};
  j["lmn"] = m.lmn_source;
  j["outputs"] = {{"records", m.records_path}, {"table", m.table_path}};
  if (!m.sweep_param.empty()) j["sweep"] = {{"param", m.sweep_param}, {"values", m.sweep_values}};
  return j;
}

inline RunManifest manifest_from_json(const json& j) {
  RunManifest m;
  try {
    m.format_version = j.at("format_version").get<int>();
    m.command = j.at("command").get<std::string>();
    m.settings = settings_from_json(j.at("config"));
    m.world_gain = j.at("world").at("gain").get<double>();
    m.lmn_source = j.at("lmn").get<std::string>();
    m.records_path = j.at("outputs").at("records").get<std::string>();
    m.table_path = j.at("outputs").at("table").get<std::string>();
    if (j.contains("sweep")) {
      m.sweep_param = j["sweep"].at("param").get<std::string>();
      m.sweep_values = j["sweep"].at("values").get<std::vector<double>>();
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed manifest: ") + e.what());
  }
  return m;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw Error("write to '" + path + "' failed");
}

inline void save_manifest(const RunManifest& m, const std::string& path) {
  write_file(path, manifest_to_json(m).dump(2) + "\n");
}

inline RunManifest load_manifest(const std::string& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError("'" + path + "': " + e.what());
  }
  return manifest_from_json(j);
}

// ---- run records ---------------------------------------------------------

struct RecordOptions {
  RecordOptions() = default;
  explicit RecordOptions(std::string manifest_name, bool with_timing = false)
      : manifest(std::move(manifest_name)), timing(with_timing) {}

  std::string manifest;      // file name written into every line
  bool timing = false;       // wall time breaks byte-identical reruns, so it is opt-in
  std::string sweep_param;   // sweep only: the grid point each line belongs to
  double sweep_value = 0.0;
};

inline json record_to_json(const RunRecord& r, const RecordOptions& opt, std::size_t prompt_index) {
  json j;
  j["format_version"] = kResultFormatVersion;
  j["manifest"] = opt.manifest;
  j["prompt"] = prompt_index;
  j["suite"] = suite_name(r.prompt.tag);
  j["mode"] = mode_name(r.mode);
  j["seed"] = r.seed;
  j["latent_seed"] = r.latent_seed;
  j["classes"] = r.prompt.classes;
  j["targets"] = r.prompt.counts;
  j["initial"] = r.initial;
  j["final"] = r.final_counts;
  j["correct"] = r.correct();
  j["calib_iterations"] = r.calib_iterations;
  j["resamples"] = r.resamples;
  j["iterations"] = r.iterations;
  j["generator_calls"] = r.generator_calls;
  j["stop"] = stop_name(r.stop);
  if (!r.failure.empty()) j["failure"] = r.failure;
  j["loss_trace"] = r.loss_trace;
  if (opt.timing) j["wall_seconds"] = r.wall_seconds;
  if (!opt.sweep_param.empty()) j["sweep"] = {{"param", opt.sweep_param}, {"value", opt.sweep_value}};
  return j;
}

inline StopReason parse_stop(const std::string& s) {
  if (s == "early-stop") return StopReason::early_stop;
  if (s == "budget-exhausted") return StopReason::budget_exhausted;
  if (s == "failed") return StopReason::failed;
  throw ConfigError("unknown stop reason '" + s + "'");
}

struct LoadedRecord {
  int format_version = 0;
  std::string manifest;
  std::size_t prompt_index = 0;
  bool stored_correct = false;
  std::string sweep_param;
  double sweep_value = 0.0;
  RunRecord record;
};

inline LoadedRecord record_from_json(const json& j) {
  LoadedRecord out;
  try {
    out.format_version = j.at("format_version").get<int>();
    out.manifest = j.at("manifest").get<std::string>();
    out.prompt_index = j.at("prompt").get<std::size_t>();
    out.stored_correct = j.at("correct").get<bool>();
    RunRecord& r = out.record;
    r.prompt.tag = parse_suite(j.at("suite").get<std::string>());
    r.prompt.classes = j.at("classes").get<std::vector<std::size_t>>();
    r.prompt.counts = j.at("targets").get<std::vector<std::size_t>>();
    r.mode = parse_mode(j.at("mode").get<std::string>());
    r.seed = j.at("seed").get<std::uint64_t>();
    r.latent_seed = j.at("latent_seed").get<std::uint64_t>();
    r.initial = j.at("initial").get<std::vector<std::size_t>>();
    r.final_counts = j.at("final").get<std::vector<std::size_t>>();
    r.calib_iterations = j.at("calib_iterations").get<std::size_t>();
    r.resamples = j.at("resamples").get<std::size_t>();
    r.iterations = j.at("iterations").get<std::size_t>();
    r.generator_calls = j.at("generator_calls").get<std::size_t>();
    r.stop = parse_stop(j.at("stop").get<std::string>());
    r.failure = j.value("failure", std::string());
    r.loss_trace = j.at("loss_trace").get<std::vector<double>>();
    r.wall_seconds = j.value("wall_seconds", 0.0);
    if (j.contains("sweep")) {
      out.sweep_param = j["sweep"].at("param").get<std::string>();
      out.sweep_value = j["sweep"].at("value").get<double>();
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed run record: ") + e.what());
  }
  return out;
}

/// One line per run; results are mode-major, then seed, then prompt.
inline std::string records_jsonl(const std::vector<SuiteResult>& results, std::size_t prompts_per_seed,
                                 const RecordOptions& opt) {
  std::string out;
  for (const auto& res : results)
    for (std::size_t k = 0; k < res.records.size(); ++k)
      out += record_to_json(res.records[k], opt, prompts_per_seed ? k % prompts_per_seed : k).dump() + "\n";
  return out;
}

inline std::vector<LoadedRecord> read_jsonl(const std::string& path) {
  std::istringstream in(read_file(path));
  std::vector<LoadedRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(record_from_json(json::parse(line)));
    } catch (const json::parse_error& e) {
      throw ConfigError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

// ---- tables --------------------------------------------------------------

inline std::string fmt_fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

inline const char* kAccuracyColumns =
    "mode,seeds,runs,mean,stddev,pooled,per_seed,"
    "over_runs,over_corrected,under_runs,under_corrected,correct_runs,correct_maintained,"
    "mixed_runs,mixed_corrected,low_density_runs,low_density_accuracy,high_density_runs,high_density_accuracy";

inline std::string accuracy_row(const SuiteResult& r) {
  std::string per_seed;
  for (std::size_t i = 0; i < r.per_seed_accuracy.size(); ++i)
    per_seed += (i ? ";" : "") + fmt_fixed(r.per_seed_accuracy[i]);
  const Breakdown& b = r.breakdown;
  std::ostringstream os;
  os << mode_name(r.mode) << ',' << r.seeds.size() << ',' << r.records.size() << ',' << fmt_fixed(r.mean) << ','
     << fmt_fixed(r.stddev) << ',' << fmt_fixed(r.pooled_accuracy()) << ',' << per_seed << ',' << b.over.runs << ','
     << fmt_fixed(b.over.percent()) << ',' << b.under.runs << ',' << fmt_fixed(b.under.percent()) << ','
     << b.correct.runs << ',' << fmt_fixed(b.correct.percent()) << ',' << b.mixed.runs << ','
     << fmt_fixed(b.mixed.percent()) << ',' << r.low_density.runs << ',' << fmt_fixed(r.low_density.percent()) << ','
     << r.high_density.runs << ',' << fmt_fixed(r.high_density.percent());
  return os.str();
}

inline std::string accuracy_csv(const std::vector<SuiteResult>& results) {
  std::string out = std::string(kAccuracyColumns) + "\n";
  for (const auto& r : results) out += accuracy_row(r) + "\n";
  return out;
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = std::string("param,value,") + kAccuracyColumns + "\n";
  for (const auto& row : rows) {
    std::ostringstream os;
    os.precision(10);
    os << sweep_name(row.param) << ',' << row.value << ',' << accuracy_row(row.result) << "\n";
    out += os.str();
  }
  return out;
}

/// Regroups loaded records into per-mode suite results, seeds in first-seen order.
inline std::vector<SuiteResult> regroup(const std::vector<LoadedRecord>& records) {
  std::vector<SuiteResult> out;
  std::map<Mode, std::size_t> slot;
  std::vector<std::map<std::uint64_t, std::vector<RunRecord>>> by_seed;
  for (const auto& lr : records) {
    const Mode m = lr.record.mode;
    if (!slot.count(m)) {
      slot[m] = out.size();
      out.push_back({});
      out.back().mode = m;
      by_seed.emplace_back();
    }
    const std::size_t i = slot[m];
    auto& seeds = out[i].seeds;
    if (std::find(seeds.begin(), seeds.end(), lr.record.seed) == seeds.end()) seeds.push_back(lr.record.seed);
    by_seed[i][lr.record.seed].push_back(lr.record);
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::size_t per_seed = 0;
    for (std::uint64_t s : out[i].seeds) {
      const auto& runs = by_seed[i][s];
      if (per_seed && runs.size() != per_seed)
        throw ConfigError(std::string("mode ") + mode_name(out[i].mode) + ": seeds have different prompt counts");
      per_seed = runs.size();
      out[i].records.insert(out[i].records.end(), runs.begin(), runs.end());
    }
    aggregate(out[i], per_seed);
  }
  return out;
}

}  // namespace d2d
