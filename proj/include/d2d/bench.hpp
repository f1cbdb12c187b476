#pragma once

// Benchmark suites, correction-rate breakdowns and hyperparameter sweeps.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <mutex>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "d2d/pipeline.hpp"

namespace d2d {

/// Count ranges per suite: small 1..10, multi 1..9 per class, large 11..20.
struct CountRange {
  std::size_t lo, hi;
};

inline CountRange count_range(SuiteTag tag) {
  switch (tag) {
    case SuiteTag::small: return {1, 10};
    case SuiteTag::multi: return {1, 9};
    case SuiteTag::large: return {11, 20};
  }
  return {1, 10};
}

inline std::vector<PromptSpec> build_suite(SuiteTag tag, std::size_t n_prompts, std::uint64_t seed,
                                           std::size_t n_classes, std::size_t slots) {
  const CountRange range = count_range(tag);
  if (slots < range.hi)
    throw ConfigError(std::string(suite_name(tag)) + " suite needs at least " + std::to_string(range.hi) +
                      " slots, world has " + std::to_string(slots));
  if (n_classes < 1) throw ConfigError("suite needs at least one class");
  if (tag == SuiteTag::multi && n_classes < 2) throw ConfigError("multi suite needs at least two classes");

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> cls(0, n_classes - 1);
  std::uniform_int_distribution<std::size_t> cnt(range.lo, range.hi);
  std::vector<PromptSpec> suite;
  suite.reserve(n_prompts);
  for (std::size_t i = 0; i < n_prompts; ++i) {
    PromptSpec p;
    p.tag = tag;
    if (tag == SuiteTag::multi) {
      const std::size_t a = cls(rng);
      std::size_t b = cls(rng);
      while (b == a) b = cls(rng);
      p.classes = {a, b};
      const std::size_t na = cnt(rng);
      p.counts = {na, cnt(rng)};
    } else {
      p.classes = {cls(rng)};
      p.counts = {cnt(rng)};
    }
    suite.push_back(std::move(p));
  }
  return suite;
}

/// splitmix64 finalizer; turns (seed, prompt index) into a latent seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed * 0x9E3779B97F4A7C15ULL + index + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

enum class InitialState { over, under, correct, mixed };

inline const char* initial_state_name(InitialState s) {
  switch (s) {
    case InitialState::over: return "over";
    case InitialState::under: return "under";
    case InitialState::correct: return "correct";
    case InitialState::mixed: return "mixed";
  }
  return "?";
}

/// Mixed only arises for multi-class prompts with one class over and another under.
inline InitialState classify_initial(const RunRecord& r) {
  bool any_over = false, any_under = false;
  for (std::size_t j = 0; j < r.initial.size(); ++j) {
    any_over |= r.initial[j] > r.prompt.counts[j];
    any_under |= r.initial[j] < r.prompt.counts[j];
  }
  if (any_over && any_under) return InitialState::mixed;
  if (any_over) return InitialState::over;
  if (any_under) return InitialState::under;
  return InitialState::correct;
}

struct Bucket {
  std::size_t runs = 0;
  std::size_t ended_correct = 0;

  [[nodiscard]] double percent() const {
    return runs ? 100.0 * static_cast<double>(ended_correct) / static_cast<double>(runs) : 0.0;
  }
};

struct Breakdown {
  Bucket over, under, correct, mixed;

  [[nodiscard]] std::size_t total() const { return over.runs + under.runs + correct.runs + mixed.runs; }

  void add(const RunRecord& r) {
    Bucket* b = &correct;
    switch (classify_initial(r)) {
      case InitialState::over: b = &over; break;
      case InitialState::under: b = &under; break;
      case InitialState::correct: b = &correct; break;
      case InitialState::mixed: b = &mixed; break;
    }
    ++b->runs;
    if (r.correct()) ++b->ended_correct;
  }
};

struct SuiteResult {
  Mode mode = Mode::d2d;
  std::vector<std::uint64_t> seeds;
  std::vector<RunRecord> records;  // seed-major, then prompt order
  std::vector<double> per_seed_accuracy;
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation across seeds
  Breakdown breakdown;
  // Multi suite only: total requested count <= 10 vs > 10.
  Bucket low_density, high_density;

  /// Accuracy pooled over every run, in percent.
  [[nodiscard]] double pooled_accuracy() const {
    if (records.empty()) return 0.0;
    const auto ok = std::count_if(records.begin(), records.end(), [](const RunRecord& r) { return r.correct(); });
    return 100.0 * static_cast<double>(ok) / static_cast<double>(records.size());
  }
};

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double sample_stddev(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

/// Recomputes every aggregate from the raw records.
inline void aggregate(SuiteResult& res, std::size_t prompts_per_seed) {
  res.per_seed_accuracy.clear();
  res.breakdown = {};
  res.low_density = {};
  res.high_density = {};
  for (std::size_t s = 0; s < res.seeds.size(); ++s) {
    std::size_t ok = 0;
    for (std::size_t i = 0; i < prompts_per_seed; ++i) ok += res.records[s * prompts_per_seed + i].correct();
    res.per_seed_accuracy.push_back(prompts_per_seed ? 100.0 * static_cast<double>(ok) /
                                                           static_cast<double>(prompts_per_seed)
                                                     : 0.0);
  }
  for (const RunRecord& r : res.records) {
    res.breakdown.add(r);
    if (r.prompt.tag == SuiteTag::multi) {
      std::size_t total = 0;
      for (std::size_t c : r.prompt.counts) total += c;
      Bucket& b = total <= 10 ? res.low_density : res.high_density;
      ++b.runs;
      b.ended_correct += r.correct();
    }
  }
  res.mean = mean_of(res.per_seed_accuracy);
  res.stddev = sample_stddev(res.per_seed_accuracy);
}

/// Runs fn(i) for i in [0, n) on `jobs` threads. Results must be written to
/// pre-sized slots so the output order does not depend on scheduling.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t jobs, Fn&& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex err_mu;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < jobs; ++t)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(err_mu);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

inline std::size_t default_jobs() { return std::max(1u, std::thread::hardware_concurrency()); }

inline std::vector<SuiteResult> run_suite(const std::vector<PromptSpec>& suite, const std::vector<Mode>& modes,
                                          const std::vector<std::uint64_t>& seeds, const RunContext& ctx,
                                          std::size_t jobs = default_jobs()) {
  const std::size_t P = suite.size(), S = seeds.size();
  std::vector<SuiteResult> out;
  for (Mode m : modes) {
    SuiteResult r;
    r.mode = m;
    r.seeds = seeds;
    r.records.resize(P * S);
    out.push_back(std::move(r));
  }
  parallel_for(modes.size() * S * P, jobs, [&](std::size_t k) {
    const std::size_t mi = k / (S * P), rest = k % (S * P);
    const std::size_t si = rest / P, pi = rest % P;
    RunRecord r = run_prompt(suite[pi], mix_seed(seeds[si], pi), modes[mi], ctx);
    r.seed = seeds[si];
    out[mi].records[rest] = std::move(r);
  });
  for (auto& r : out) aggregate(r, P);
  return out;
}

enum class SweepParam { tau, beta, w };

inline const char* sweep_name(SweepParam p) {
  switch (p) {
    case SweepParam::tau: return "tau";
    case SweepParam::beta: return "beta";
    case SweepParam::w: return "w";
  }
  return "?";
}

inline SweepParam parse_sweep_param(const std::string& s) {
  if (s == "tau") return SweepParam::tau;
  if (s == "beta") return SweepParam::beta;
  if (s == "w") return SweepParam::w;
  throw ConfigError("unknown sweep parameter '" + s + "'");
}

/// Grids of the reference ablations.
inline std::vector<double> default_grid(SweepParam p) {
  switch (p) {
    case SweepParam::tau: return {0.1, 0.2, 0.5, 0.8};
    case SweepParam::beta: return {1, 10, 100, 300, 400};
    case SweepParam::w: return {0.0, 0.2, 0.5, 0.8};
  }
  return {};
}

/// Copy of cfg with one knob changed. The evaluation threshold stays put.
inline PipelineConfig with_param(PipelineConfig cfg, SweepParam p, double v) {
  switch (p) {
    case SweepParam::tau: cfg.critic = CriticConfig::make(v, cfg.critic.beta); break;
    case SweepParam::beta: cfg.critic = CriticConfig::make(cfg.critic.tau, v); break;
    case SweepParam::w:
      if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("mixing weight must lie in [0,1]");
      cfg.mix.w = v;
      break;
  }
  return cfg;
}

struct SweepRow {
  SweepParam param;
  double value;
  SuiteResult result;
};

inline std::vector<SweepRow> sweep(SweepParam param, const std::vector<double>& values,
                                   const std::vector<PromptSpec>& suite, const std::vector<Mode>& modes,
                                   const std::vector<std::uint64_t>& seeds, const RunContext& base,
                                   std::size_t jobs = default_jobs()) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  std::vector<SweepRow> rows;
  for (double v : values) {
    RunContext ctx = base;
    ctx.config = with_param(base.config, param, v);
    for (auto& r : run_suite(suite, modes, seeds, ctx, jobs)) rows.push_back({param, v, std::move(r)});
  }
  return rows;
}

}  // namespace d2d
