// Acceptance run: one [PASS]/[FAIL] line per criterion, exit status 1 if any
// criterion fails. Usage: acceptance <path to d2d cli> <scratch dir>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>

#include "d2d/gradcheck.hpp"
#include "d2d/io.hpp"

namespace fs = std::filesystem;
using namespace d2d;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string num(double v, int digits = 4) { return fmt_fixed(v, digits); }

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

const World& toy_world() {
  static const World w = World::make(WorldSpec{});
  return w;
}

// Default alignment on the d = 128 toy world; shared by criteria 6 to 8.
const LmnParams& aligned_network() {
  static const LmnParams p = [] {
    std::mt19937_64 rng(Settings{}.lmn_init_seed);
    LmnParams q = init_params(toy_world().dim(), rng);
    pre_align(q, AlignConfig{}, MixConfig{});
    return q;
  }();
  return p;
}

std::vector<double> uniform(std::size_t n, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

Outcome constants() {
  const std::size_t pc = param_count(16384);
  const double tz = logit_threshold(0.2);
  const double amin = 0.03 * reg_prime_min(16384);
  const double tau_reg = CalibConfig{}.tau_reg_for(16384);
  const bool ok = pc == 3303384 && std::abs(tz + 1.3862944) <= 1e-6 && std::abs(amin + 2139.0) <= 0.5 &&
                  std::abs(tau_reg + 712.8) <= 0.2;
  return {ok, "param_count " + std::to_string(pc) + ", tau_z " + num(tz, 7) + ", a*min " + num(amin, 3) +
                  ", tau_reg " + num(tau_reg, 3)};
}

Outcome gradient_oracle() {
  const CriticConfig cfg;
  std::mt19937_64 rng(2);
  double critic_err = 0.0, reg_err = 0.0, lmn_err = 0.0;

  // (i) critic, 50 points per branch, away from the branch switch.
  int over = 0, under = 0;
  while (over < 50 || under < 50) {
    const std::size_t n = 4 + rng() % 13;
    const auto z = uniform(n, cfg.tau_z - 0.6, cfg.tau_z + 0.6, rng);
    const double f = soft_count(z, cfg);
    const bool want_over = over < 50;
    const double N = want_over ? std::floor(f) - 1.0 : std::ceil(f) + 1.0;
    if (N < 0.0 || std::abs(f - N) < 1e-3) continue;
    ScalarFn fn = [&](Graph& g, Var zv) { return critic_loss(g, zv, N, cfg).loss; };
    critic_err = std::max(critic_err, check_gradients(fn, Tensor::vector(z), 1e-6));
    (want_over ? over : under) += 1;
  }

  // (ii) reg_prime at d = 128.
  for (int k = 0; k < 100; ++k) {
    auto x = sample_latent(128, rng);
    for (double& v : x) v *= 0.5 + 0.01 * k;
    ScalarFn fn = [](Graph& g, Var xv) { return reg_prime(g, xv); };
    reg_err = std::max(reg_err, check_gradients(fn, Tensor::vector(x), 1e-6));
  }

  // (iii) modifier network at d = 128, w.r.t. input and every tensor.
  std::mt19937_64 init(3);
  LmnParams p = init_params(128, init);
  for (Tensor* t : {&p.b1, &p.b2, &p.b3})
    for (double& v : t->data) v = 0.1 * sample_latent(1, init)[0];
  const Tensor c = Tensor::vector(sample_latent(128, init));
  for (int points = 0; points < 100;) {
    const auto x = sample_latent(128, rng);
    if (preactivation_margin(x, p) < 1e-3) continue;
    auto out = [&](Graph& g, const LmnNodes& n, Var xv) {
      return g.sum(g.mul(lmn_forward(g, p, n, xv), g.constant(c)));
    };
    ScalarFn wrt_x = [&](Graph& g, Var xv) { return out(g, bind(g, p), xv); };
    lmn_err = std::max(lmn_err, check_gradients(wrt_x, Tensor::vector(x), 1e-6, sample_coordinates(128, 10, rng)));
    const std::size_t k = static_cast<std::size_t>(points) % 6;
    ScalarFn wrt_p = [&](Graph& g, Var leaf) {
      LmnNodes n = bind(g, p);
      std::array<Var*, 6> slots{&n.W1, &n.b1, &n.W2, &n.b2, &n.W3, &n.b3};
      *slots[k] = leaf;
      return out(g, n, g.constant(Tensor::vector(x)));
    };
    const Tensor& t = *p.tensors()[k];
    lmn_err = std::max(lmn_err, check_gradients(wrt_p, t, 1e-6, sample_coordinates(t.size(), 10, rng)));
    ++points;
  }

  // (iv) composed objective at d = 128.
  GradcheckConfig gc;
  gc.points = 100;
  gc.coords = 10;
  std::mt19937_64 prng(Settings{}.lmn_init_seed);
  const GradcheckReport full = gradcheck_pipeline(toy_world(), init_params(128, prng), PipelineConfig{}, gc);

  const double worst = std::max({critic_err, reg_err, lmn_err, full.max_rel_error});
  return {worst <= 1e-4, "max rel error critic " + sci(critic_err) + ", reg_prime " + sci(reg_err) + ", lmn " +
                             sci(lmn_err) + ", pipeline " + sci(full.max_rel_error) + " (" +
                             std::to_string(full.skipped) + " kink samples skipped)"};
}

Outcome anti_plateau() {
  const CriticConfig cfg;  // beta = 300
  const std::vector<double> z{cfg.tau_z + 0.1};
  Graph g;
  Var zv = g.input(Tensor::vector(z));
  const TapeCritic c = critic_loss(g, zv, 0.0, cfg);
  const double dl = std::abs(g.backward(c.loss).wrt(zv).data[0]);
  const double df = std::abs(soft_count_grad(z, cfg)[0]);
  return {dl >= 0.9 && df <= 1e-8, "|dL/dz| " + num(dl, 6) + ", |df/dz| " + sci(df)};
}

// Equality holds on the active branch; at f == N the single-class loss is
// zero while the multi-class rule keeps maximizing a correctly counted class.
Outcome multi_reduction() {
  const CriticConfig cfg;
  std::mt19937_64 rng(4);
  double worst = 0.0;
  int satisfied = 0;
  for (int k = 0; k < 1000;) {
    const std::size_t n = 1 + rng() % 20;
    const auto z = uniform(n, cfg.tau_z - 3.0, cfg.tau_z + 3.0, rng);
    const double N = static_cast<double>(rng() % (n + 1));
    const CriticValue single = critic_loss(z, N, cfg);
    if (single.branch == Branch::satisfied) {
      ++satisfied;
      continue;
    }
    const double multi = multi_critic_loss(LogitMatrix(n, 1, z), std::vector<double>{N}, cfg);
    worst = std::max(worst, std::abs(single.loss - multi));
    ++k;
  }
  return {worst <= 1e-12, "max |difference| " + sci(worst) + " over 1000 active-branch vectors (" +
                              std::to_string(satisfied) + " draws with f == N skipped)"};
}

Outcome oracle_equivalence() {
  const CriticConfig cfg;
  std::mt19937_64 rng(5);
  int mismatches = 0;
  for (int k = 0; k < 1000; ++k) {
    const std::size_t n = 1 + rng() % 24, m = 1 + rng() % 4;
    auto z = uniform(n * m, cfg.tau_z - 4.0, cfg.tau_z + 3.0, rng);
    if (k % 7 == 0) z[rng() % z.size()] = cfg.tau_z;
    const DetectionSet det{LogitMatrix(n, m, z), {}};
    const auto counts = per_class_counts(det.logits, cfg);
    for (std::size_t j = 0; j < m; ++j) mismatches += oracle_count(det, cfg.tau, j) != counts[j].hard;
  }
  return {mismatches == 0, std::to_string(mismatches) + " mismatches over 1000 matrices"};
}

Outcome alignment_gate() {
  const ShellReport rep = shell_report(aligned_network(), MixConfig{}.w, 50, 1000003);
  return {rep.within * 10 >= rep.total * 9, std::to_string(rep.within) + "/" + std::to_string(rep.total) +
                                                " latents within 5% of sqrt(d-1), mean deviation " +
                                                num(rep.mean_deviation, 4) + ", need >= 90%"};
}

std::vector<PromptSpec> small_suite() {
  const World& w = toy_world();
  return build_suite(SuiteTag::small, 100, 0, w.spec().classes, w.spec().slots);
}

Outcome correction_ordering() {
  const RunContext ctx{&toy_world(), &aligned_network(), PipelineConfig{}};
  const auto res = run_suite(small_suite(), {Mode::d2d, Mode::f_only, Mode::direct_latent}, {0, 1, 2, 3}, ctx);
  const SuiteResult &d2d = res[0], &f = res[1], &direct = res[2];
  const Breakdown& b = d2d.breakdown;
  const bool ok = d2d.mean - f.mean >= 10.0 && d2d.mean >= direct.mean && b.over.percent() > 0.0 &&
                  b.under.percent() > 0.0 && b.correct.percent() >= 70.0;
  return {ok, "d2d " + num(d2d.mean, 2) + "%, f-only " + num(f.mean, 2) + "%, direct-latent " + num(direct.mean, 2) +
                  "%; d2d over-corrected " + num(b.over.percent(), 1) + "%, under-corrected " +
                  num(b.under.percent(), 1) + "%, correct-maintained " + num(b.correct.percent(), 1) + "%"};
}

Outcome sweep_direction() {
  const RunContext ctx{&toy_world(), &aligned_network(), PipelineConfig{}};
  const auto rows = sweep(SweepParam::beta, {1.0, 300.0}, small_suite(), {Mode::d2d}, {0}, ctx);
  const double lo = rows[0].result.mean, hi = rows[1].result.mean;
  return {hi > lo, "beta=1 " + num(lo, 2) + "%, beta=300 " + num(hi, 2) + "%"};
}

Outcome determinism(const std::string& cli, const fs::path& work, double criterion7_seconds) {
  const auto t0 = std::chrono::steady_clock::now();
  fs::remove_all(work / "bench_a");
  fs::remove_all(work / "bench_b");
  const std::string a = (work / "bench_a").string(), b = (work / "bench_b").string();
  const int ra = std::system((cli + " bench --out " + a + " > /dev/null 2>&1").c_str());
  const int rb = std::system((cli + " bench --from-manifest " + a + "/manifest.json --out " + b + " > /dev/null 2>&1").c_str());
  if (ra != 0 || rb != 0) return {false, "bench exited with " + std::to_string(ra) + " / " + std::to_string(rb)};
  const double elapsed = seconds_since(t0);
  const std::string ja = read_file(a + "/records.jsonl"), jb = read_file(b + "/records.jsonl");
  const bool same_manifest = read_file(a + "/manifest.json") == read_file(b + "/manifest.json");
  const bool ok = same_manifest && ja == jb && !ja.empty() && elapsed < 2.0 * criterion7_seconds;
  return {ok, std::string(ja == jb ? "records byte-identical" : "records differ") + " (" +
                  std::to_string(ja.size()) + " bytes), manifests " + (same_manifest ? "identical" : "differ") +
                  ", two runs " + num(elapsed, 1) + " s vs limit " + num(2.0 * criterion7_seconds, 1) + " s"};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 3) {
    std::cerr << "usage: acceptance <d2d cli> <scratch dir>\n";
    return 2;
  }
  const std::string cli = argv[1];
  const fs::path work = argv[2];
  fs::create_directories(work);

  int failed = 0;
  double criterion7_seconds = 0.0;
  auto report = [&](int id, const std::string& name, double limit_s, const std::function<Outcome()>& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double s = seconds_since(t0);
    if (id == 7) criterion7_seconds = s;
    const bool in_time = limit_s <= 0.0 || s < limit_s;
    const bool pass = o.pass && in_time;
    failed += !pass;
    std::cout << (pass ? "[PASS] " : "[FAIL] ") << id << ". " << name << ": " << o.detail << " [" << num(s, 2)
              << " s" << (limit_s > 0.0 ? " of " + num(limit_s, 0) + " s" : std::string()) << "]"
              << (in_time ? "" : " (over time budget)") << std::endl;
  };

  report(1, "constants reproduction", 1, constants);
  report(2, "gradient oracle", 30, gradient_oracle);
  report(3, "anti-plateau", 1, anti_plateau);
  report(4, "multi-class reduction", 5, multi_reduction);
  report(5, "oracle equivalence", 5, oracle_equivalence);
  report(6, "alignment gate", 120, alignment_gate);
  report(7, "correction ordering", 900, correction_ordering);
  report(8, "sweep direction", 600, sweep_direction);
  report(9, "determinism", 0, [&] { return determinism(cli, work, criterion7_seconds); });

  std::cout << (failed ? std::to_string(failed) + " of 9 criteria failed" : std::string("all 9 criteria passed"))
            << std::endl;
  return failed ? 1 : 0;
}
