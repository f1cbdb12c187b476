#pragma once

// Optimization procedures around the modifier network:
//   pre_align          one-off fit of the mixed latent to the Gaussian shell
//   calibrate          per-latent adaptation with the shell prior only
//   optimize_numeracy  count-critic descent with early stopping
// plus run_prompt, which chains them according to a Mode.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "d2d/critic.hpp"
#include "d2d/lmn.hpp"
#include "d2d/regularizer.hpp"
#include "d2d/tape.hpp"
#include "d2d/world.hpp"

namespace d2d {

struct AlignConfig {
  std::size_t n_latents = 100;
  std::size_t epochs = 200;
  double eta = 1e-4;
  double lambda = 0.01;
  std::uint64_t seed = 1;
};

struct CalibConfig {
  std::size_t t_min = 70;
  double eta = 1e-2;
  double lambda = 0.01;
  double tau_reg_factor = 0.99975;
  std::optional<double> tau_reg;  // overrides the dimension-derived value
  std::size_t max_resamples = 10;

  /// "Good enough" threshold on lambda * reg_prime at dimension d.
  [[nodiscard]] double tau_reg_for(std::size_t d) const {
    return tau_reg ? *tau_reg : tau_reg_factor * lambda * reg_prime_min(d);
  }
};

struct OptimConfig {
  double eta = 5e-4;
  double alpha = 5.0;
  double lambda = 1e-4;
  std::optional<std::size_t> K;  // unset: 200 for one class, 400 for several

  bool rescale_loss = true;
  double grad_cap = 10.0;

  bool adaptive_lr = true;
  double lr_factor = 0.25;

  bool adaptive_lambda = true;
  double lambda_growth = 2.0;
  int lambda_max_doublings = 20;

  [[nodiscard]] std::size_t budget(std::size_t n_classes) const {
    return K ? *K : (n_classes > 1 ? 400 : 200);
  }
};

struct PipelineConfig {
  CriticConfig critic;
  MixConfig mix;
  AlignConfig align;
  CalibConfig calib;
  OptimConfig optim;
  double reg_a = 0.03;
  std::optional<double> reg_c;  // unset: derived from reg_a and d
  double eval_tau = 0.2;        // threshold of the evaluation oracle, independent of the critic's

  [[nodiscard]] RegConfig reg_for(std::size_t d) const {
    RegConfig r = RegConfig::for_dim(d, reg_a);
    if (reg_c) r.c = *reg_c;
    return r;
  }
};

enum class Mode { d2d, f_only, direct_latent, no_op };

inline const char* mode_name(Mode m) {
  switch (m) {
    case Mode::d2d: return "d2d";
    case Mode::f_only: return "f-only";
    case Mode::direct_latent: return "direct-latent";
    case Mode::no_op: return "no-op";
  }
  return "?";
}

inline Mode parse_mode(const std::string& s) {
  if (s == "d2d") return Mode::d2d;
  if (s == "f-only") return Mode::f_only;
  if (s == "direct-latent") return Mode::direct_latent;
  if (s == "no-op") return Mode::no_op;
  throw ConfigError("unknown mode '" + s + "'");
}

enum class StopReason { early_stop, budget_exhausted, failed };

inline const char* stop_name(StopReason r) {
  switch (r) {
    case StopReason::early_stop: return "early-stop";
    case StopReason::budget_exhausted: return "budget-exhausted";
    case StopReason::failed: return "failed";
  }
  return "?";
}

enum class SuiteTag { small, multi, large };

inline const char* suite_name(SuiteTag t) {
  switch (t) {
    case SuiteTag::small: return "small";
    case SuiteTag::multi: return "multi";
    case SuiteTag::large: return "large";
  }
  return "?";
}

inline SuiteTag parse_suite(const std::string& s) {
  if (s == "small") return SuiteTag::small;
  if (s == "multi") return SuiteTag::multi;
  if (s == "large") return SuiteTag::large;
  throw ConfigError("unknown suite '" + s + "'");
}

/// One prompt: which classes, how many of each.
struct PromptSpec {
  SuiteTag tag = SuiteTag::small;
  std::vector<std::size_t> classes;
  std::vector<std::size_t> counts;

  bool operator==(const PromptSpec&) const = default;
};

struct RunRecord {
  PromptSpec prompt;
  Mode mode = Mode::d2d;
  std::uint64_t seed = 0;         // run seed (suite level)
  std::uint64_t latent_seed = 0;  // stream the initial latent was drawn from
  std::vector<std::size_t> initial;
  std::vector<std::size_t> final_counts;
  std::size_t calib_iterations = 0;
  std::size_t resamples = 0;
  std::size_t iterations = 0;  // numeracy updates applied
  std::size_t generator_calls = 0;
  StopReason stop = StopReason::budget_exhausted;
  std::string failure;
  std::vector<double> loss_trace;
  double wall_seconds = 0.0;

  [[nodiscard]] bool correct() const { return final_counts == prompt.counts; }
  [[nodiscard]] bool initially_correct() const { return initial == prompt.counts; }
};

inline std::vector<double> sample_latent(std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> x(d);
  for (double& v : x) v = normal(rng);
  return x;
}

// ---- alignment -----------------------------------------------------------

struct AlignReport {
  std::size_t steps = 0;
  double final_loss = 0.0;
};

/// lambda * reg_prime of the mixed latent, recorded on g.
inline Var shell_loss(Graph& g, const LmnParams& p, const LmnNodes& n, Var x, double w, double lambda,
                      Var* mixed = nullptr) {
  Var xm = mix_latent(g, x, lmn_forward(g, p, n, x), w);
  if (mixed) *mixed = xm;
  return g.scale(reg_prime(g, xm), lambda);
}

/// Fit the mixed-latent norm to the Gaussian shell: for each of n_latents
/// latents drawn from the seeded stream, run `epochs` descent steps on
/// lambda * reg_prime. Updates p in place.
inline AlignReport pre_align(LmnParams& p, const AlignConfig& cfg, const MixConfig& mix) {
  std::mt19937_64 rng(cfg.seed);
  AlignReport rep;
  for (std::size_t k = 0; k < cfg.n_latents; ++k) {
    const auto x = sample_latent(p.d, rng);
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
      Graph g;
      const LmnNodes n = bind(g, p);
      Var loss;
      try {
        loss = shell_loss(g, p, n, g.constant(Tensor::vector(x)), mix.w, cfg.lambda);
        rep.final_loss = g.value(loss).item();
        apply_gradient(p, g.backward(loss), n, cfg.eta);
      } catch (const NumericError& err) {
        throw NumericError("alignment diverged at latent " + std::to_string(k) + ", epoch " +
                               std::to_string(e) + ": " + err.what(),
                           err.node_id);
      }
      ++rep.steps;
    }
  }
  return rep;
}

/// | |x'| - sqrt(d-1) | / sqrt(d-1) for the mixed latent of x.
inline double shell_deviation(std::span<const double> x, const LmnParams& p, double w) {
  const double r0 = shell_radius(p.d);
  return std::abs(norm(modified_latent(x, p, w)) - r0) / r0;
}

struct ShellReport {
  double mean_deviation = 0.0;
  std::size_t within = 0;  // latents with deviation <= tolerance
  std::size_t total = 0;
};

/// Shell deviation of the mixed latent over n fresh latents from a seeded stream.
inline ShellReport shell_report(const LmnParams& p, double w, std::size_t n, std::uint64_t seed,
                                double tolerance = 0.05) {
  std::mt19937_64 rng(seed);
  ShellReport rep;
  rep.total = n;
  for (std::size_t k = 0; k < n; ++k) {
    const double dev = shell_deviation(sample_latent(p.d, rng), p, w);
    rep.mean_deviation += dev / static_cast<double>(n);
    rep.within += dev <= tolerance;
  }
  return rep;
}

// ---- calibration ---------------------------------------------------------

struct CalibResult {
  std::vector<double> latent;  // the accepted latent (after any resampling)
  std::size_t iterations = 0;  // t at acceptance
  std::size_t resamples = 0;
  std::size_t total_steps = 0;  // generator-free evaluations, all attempts
};

/// Adapt p to x with the shell prior alone. Accepts at iteration t once
/// t >= t_min and lambda * reg_prime <= tau_reg; otherwise after K iterations
/// draws a new latent from rng and starts over, up to max_resamples times.
inline CalibResult calibrate(LmnParams& p, std::vector<double> x, std::mt19937_64& rng,
                             const CalibConfig& cfg, std::size_t K, const MixConfig& mix) {
  const double threshold = cfg.tau_reg_for(p.d);
  CalibResult res;
  for (;;) {
    for (std::size_t t = 1; t <= K; ++t) {
      Graph g;
      const LmnNodes n = bind(g, p);
      Var loss = shell_loss(g, p, n, g.constant(Tensor::vector(x)), mix.w, cfg.lambda);
      ++res.total_steps;
      if (t >= cfg.t_min && g.value(loss).item() <= threshold) {
        res.latent = std::move(x);
        res.iterations = t;
        return res;
      }
      apply_gradient(p, g.backward(loss), n, cfg.eta);
    }
    if (res.resamples >= cfg.max_resamples)
      throw Error("calibration did not reach tau_reg after " + std::to_string(res.resamples) +
                  " resamples");
    ++res.resamples;
    x = sample_latent(p.d, rng);
  }
}

// ---- numeracy optimization ----------------------------------------------

/// Counts for the prompt's classes, with the detector queried on exactly those classes.
inline std::vector<std::size_t> prompt_counts(const World& world, std::span<const double> latent,
                                              const PromptSpec& prompt, double tau) {
  const DetectionSet det = world.generate(latent).select_classes(prompt.classes);
  std::vector<std::size_t> out(prompt.classes.size());
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = oracle_count(det, tau, j);
  return out;
}

/// Constant matrix picking the prompt's class columns out of a flattened S*m logit vector.
inline Tensor class_selector(std::size_t S, std::size_t m, std::span<const std::size_t> classes) {
  const std::size_t k = classes.size();
  Tensor P = Tensor::zeros({S * k, S * m});
  for (std::size_t i = 0; i < S; ++i)
    for (std::size_t j = 0; j < k; ++j) P.at(i * k + j, i * m + classes[j]) = 1.0;
  return P;
}

struct StepObjective {
  Var loss;
  std::vector<double> logits;  // prompt view, S*k
  bool met = false;            // hard counts equal targets
  double max_gap = 0.0;        // max over classes of |soft - N|
  double reg_inner = 0.0;      // a * reg_prime + c
};

/// Builds alpha * critic + lambda * reg_pow on top of a mixed-latent node.
/// d2d and direct-latent modes share this; f-only swaps the critic for the
/// signed soft count.
inline StepObjective numeracy_objective(Graph& g, Var latent, const World& world,
                                        const PromptSpec& prompt, const PipelineConfig& cfg,
                                        const RegConfig& reg, double lambda, bool count_only) {
  const std::size_t S = world.spec().slots, k = prompt.classes.size();
  Var all = world.generate(g, latent);
  Var z = g.matvec(g.constant(class_selector(S, world.spec().classes, prompt.classes)), all);

  StepObjective out;
  out.logits = g.value(z).data;
  const LogitMatrix Z(S, k, out.logits);
  const std::vector<double> targets(prompt.counts.begin(), prompt.counts.end());
  out.met = counts_match(Z, targets, cfg.critic);
  const auto counts = per_class_counts(Z, cfg.critic);
  for (std::size_t j = 0; j < k; ++j) out.max_gap = std::max(out.max_gap, std::abs(counts[j].soft - targets[j]));

  TapeCritic critic;
  if (k == 1)
    critic = count_only ? soft_count_loss(g, z, targets[0], cfg.critic) : critic_loss(g, z, targets[0], cfg.critic);
  else
    critic = count_only ? multi_soft_count_loss(g, z, k, targets, cfg.critic)
                        : multi_critic_loss(g, z, k, targets, cfg.critic);

  Var r = reg_pow(g, latent, reg);
  out.reg_inner = reg.a * reg_prime(g.value(latent).data) + reg.c;
  out.loss = g.add(g.scale(critic.loss, cfg.optim.alpha), g.scale(r, lambda));
  return out;
}

/// Adaptive step-size and regularizer-weight schedule for one run.
class NumeracySchedule {
 public:
  explicit NumeracySchedule(const OptimConfig& c) : cfg_(c), lambda_(c.lambda) {}

  [[nodiscard]] double lambda() const { return lambda_; }

  /// Learning rate for a step given the current count gap.
  [[nodiscard]] double eta(double max_gap) const {
    return cfg_.adaptive_lr && max_gap < 1.0 ? cfg_.eta * cfg_.lr_factor : cfg_.eta;
  }

  /// Positive multiplier applied to the whole loss for this step.
  [[nodiscard]] double loss_scale(double grad_norm) const {
    return cfg_.rescale_loss && grad_norm > cfg_.grad_cap ? cfg_.grad_cap / grad_norm : 1.0;
  }

  /// Doubles lambda while the prior leaves its flat basin, resets once back.
  void observe_reg(double inner) {
    if (!cfg_.adaptive_lambda) return;
    if (inner > 1.0) {
      if (doublings_ < cfg_.lambda_max_doublings) {
        lambda_ *= cfg_.lambda_growth;
        ++doublings_;
      }
    } else {
      lambda_ = cfg_.lambda;
      doublings_ = 0;
    }
  }

 private:
  OptimConfig cfg_;
  double lambda_;
  int doublings_ = 0;
};

/// Stage two on the modifier network. Runs epochs start..K (inclusive) of
/// check-then-update; calibration iterations therefore share the budget.
inline RunRecord optimize_numeracy(LmnParams& p, std::span<const double> latent, std::size_t start,
                                   const PromptSpec& prompt, const World& world,
                                   const PipelineConfig& cfg, bool count_only = false) {
  RunRecord rec;
  rec.prompt = prompt;
  const std::size_t K = cfg.optim.budget(prompt.classes.size());
  const RegConfig reg = cfg.reg_for(p.d);
  NumeracySchedule sched(cfg.optim);
  const Tensor x = Tensor::vector({latent.begin(), latent.end()});

  try {
    for (std::size_t epoch = start; epoch <= K; ++epoch) {
      Graph g;
      const LmnNodes n = bind(g, p);
      Var xm = mix_latent(g, g.constant(x), lmn_forward(g, p, n, g.constant(x)), cfg.mix.w);
      StepObjective obj = numeracy_objective(g, xm, world, prompt, cfg, reg, sched.lambda(), count_only);
      ++rec.generator_calls;
      if (obj.met) {
        rec.stop = StopReason::early_stop;
        break;
      }
      rec.loss_trace.push_back(g.value(obj.loss).item());
      const Gradients grads = g.backward(obj.loss);
      const double step = sched.eta(obj.max_gap) * sched.loss_scale(grad_norm(grads, n));
      apply_gradient(p, grads, n, step);
      sched.observe_reg(obj.reg_inner);
      ++rec.iterations;
    }
  } catch (const Error& err) {
    rec.stop = StopReason::failed;
    rec.failure = err.what();
  }
  ++rec.generator_calls;
  rec.final_counts = prompt_counts(world, modified_latent(latent, p, cfg.mix.w), prompt, cfg.eval_tau);
  return rec;
}

/// The same update rule applied to the latent itself, no modifier network.
/// Epoch K only checks: with no calibration phase to share the budget, its
/// generation doubles as the final output, keeping generator calls <= K.
inline RunRecord optimize_latent_directly(std::vector<double> latent, const PromptSpec& prompt,
                                          const World& world, const PipelineConfig& cfg) {
  RunRecord rec;
  rec.prompt = prompt;
  const std::size_t K = cfg.optim.budget(prompt.classes.size());
  const RegConfig reg = cfg.reg_for(latent.size());
  NumeracySchedule sched(cfg.optim);

  try {
    for (std::size_t epoch = 1; epoch <= K; ++epoch) {
      Graph g;
      Var x = g.param(Tensor::vector(latent));
      StepObjective obj = numeracy_objective(g, x, world, prompt, cfg, reg, sched.lambda(), false);
      ++rec.generator_calls;
      if (obj.met) {
        rec.stop = StopReason::early_stop;
        break;
      }
      if (epoch == K) break;
      rec.loss_trace.push_back(g.value(obj.loss).item());
      const Gradients grads = g.backward(obj.loss);
      const Tensor& gx = grads.wrt(x);
      const double step = sched.eta(obj.max_gap) * sched.loss_scale(norm(gx.data));
      for (std::size_t i = 0; i < latent.size(); ++i) latent[i] -= step * gx.data[i];
      sched.observe_reg(obj.reg_inner);
      ++rec.iterations;
    }
  } catch (const Error& err) {
    rec.stop = StopReason::failed;
    rec.failure = err.what();
    ++rec.generator_calls;
  }
  rec.final_counts = prompt_counts(world, latent, prompt, cfg.eval_tau);
  return rec;
}

/// Everything a run needs besides the prompt and seed. The aligned params are
/// copied per run; world and config are shared read-only.
struct RunContext {
  const World* world = nullptr;
  const LmnParams* aligned = nullptr;
  PipelineConfig config;
};

/// Initial latent for (prompt, seed); every mode sees the same one.
inline std::mt19937_64 latent_stream(std::uint64_t seed) { return std::mt19937_64(seed); }

inline RunRecord run_prompt(const PromptSpec& prompt, std::uint64_t seed, Mode mode, const RunContext& ctx) {
  if (!ctx.world) throw Error("run_prompt: no world");
  if (prompt.classes.size() != prompt.counts.size() || prompt.classes.empty())
    throw Error("run_prompt: malformed prompt");
  const auto t0 = std::chrono::steady_clock::now();
  const World& world = *ctx.world;
  const PipelineConfig& cfg = ctx.config;

  std::mt19937_64 rng = latent_stream(seed);
  std::vector<double> x = sample_latent(world.dim(), rng);
  const auto initial = prompt_counts(world, x, prompt, cfg.eval_tau);

  RunRecord rec;
  switch (mode) {
    case Mode::no_op:
      rec.prompt = prompt;
      rec.final_counts = initial;
      rec.generator_calls = 1;
      rec.stop = initial == prompt.counts ? StopReason::early_stop : StopReason::budget_exhausted;
      break;
    case Mode::direct_latent:
      rec = optimize_latent_directly(x, prompt, world, cfg);
      break;
    case Mode::d2d:
    case Mode::f_only: {
      if (!ctx.aligned) throw Error("run_prompt: no aligned modifier network");
      LmnParams p = *ctx.aligned;
      if (p.d != world.dim()) throw ShapeError("modifier network dimension does not match the world");
      const std::size_t K = cfg.optim.budget(prompt.classes.size());
      try {
        CalibResult cal = calibrate(p, std::move(x), rng, cfg.calib, K, cfg.mix);
        rec = optimize_numeracy(p, cal.latent, cal.iterations, prompt, world, cfg, mode == Mode::f_only);
        rec.calib_iterations = cal.iterations;
        rec.resamples = cal.resamples;
      } catch (const Error& err) {
        rec = RunRecord{};
        rec.prompt = prompt;
        rec.stop = StopReason::failed;
        rec.failure = err.what();
        rec.final_counts = initial;
      }
      break;
    }
  }
  rec.mode = mode;
  rec.seed = seed;
  rec.latent_seed = seed;
  rec.initial = initial;
  rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

}  // namespace d2d
