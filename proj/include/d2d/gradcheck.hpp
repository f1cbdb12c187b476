#pragma once

// Finite-difference check of the composed objective
//   latent -> modifier network -> mix -> world -> critic + shell prior
// w.r.t. the latent and every network tensor.

#include <algorithm>
#include <cstdint>
#include <random>

#include "d2d/pipeline.hpp"

namespace d2d {

struct GradcheckConfig {
  std::size_t points = 10;
  std::size_t coords = 20;  // sampled coordinates per checked tensor
  double step = 1e-6;
  double margin = 1e-3;  // minimum distance to a leaky-ReLU kink or a critic branch switch
  double tolerance = 1e-4;
  std::uint64_t seed = 0;
};

struct GradcheckReport {
  std::size_t points = 0;
  std::size_t skipped = 0;  // samples rejected for sitting near a kink
  double max_rel_error = 0.0;

  [[nodiscard]] bool passed(double tolerance) const { return points > 0 && max_rel_error <= tolerance; }
};

/// The loss optimized at every stage-two step, for a single-class prompt.
inline Var composed_loss(Graph& g, const LmnParams& p, const LmnNodes& n, Var x, const World& world,
                         const PromptSpec& prompt, const PipelineConfig& cfg) {
  Var xm = mix_latent(g, x, lmn_forward(g, p, n, x), cfg.mix.w);
  return numeracy_objective(g, xm, world, prompt, cfg, cfg.reg_for(p.d), cfg.optim.lambda, false).loss;
}

inline GradcheckReport gradcheck_pipeline(const World& world, const LmnParams& p, const PipelineConfig& cfg,
                                          const GradcheckConfig& gc) {
  if (p.d != world.dim()) throw ShapeError("gradcheck: network and world dimensions differ");
  std::mt19937_64 rng(gc.seed);
  std::uniform_int_distribution<std::size_t> cls(0, world.spec().classes - 1);
  std::uniform_int_distribution<std::size_t> cnt(1, std::min<std::size_t>(10, world.spec().slots));
  GradcheckReport rep;
  while (rep.points < gc.points) {
    if (rep.skipped > 100 * gc.points + 1000) throw Error("gradcheck: no kink-free sample found");
    const auto x = sample_latent(p.d, rng);
    const PromptSpec prompt{SuiteTag::small, {cls(rng)}, {cnt(rng)}};
    const auto z = world.logits(modified_latent(x, p, cfg.mix.w)).select_classes(prompt.classes).z;
    const double gap = std::abs(soft_count(z, cfg.critic) - static_cast<double>(prompt.counts[0]));
    if (preactivation_margin(x, p) < gc.margin || gap < gc.margin) {
      ++rep.skipped;
      continue;
    }

    ScalarFn wrt_latent = [&](Graph& g, Var xv) { return composed_loss(g, p, bind(g, p), xv, world, prompt, cfg); };
    const auto lc = sample_coordinates(p.d, gc.coords, rng);
    rep.max_rel_error = std::max(rep.max_rel_error, check_gradients(wrt_latent, Tensor::vector(x), gc.step, lc));

    const auto tensors = p.tensors();
    for (std::size_t k = 0; k < tensors.size(); ++k) {
      ScalarFn wrt_param = [&](Graph& g, Var leaf) {
        LmnNodes n = bind(g, p);
        std::array<Var*, 6> slots{&n.W1, &n.b1, &n.W2, &n.b2, &n.W3, &n.b3};
        *slots[k] = leaf;
        return composed_loss(g, p, n, g.constant(Tensor::vector(x)), world, prompt, cfg);
      };
      const Tensor& point = *tensors[k];
      const auto pc = sample_coordinates(point.size(), gc.coords, rng);
      rep.max_rel_error = std::max(rep.max_rel_error, check_gradients(wrt_param, point, gc.step, pc));
    }
    ++rep.points;
  }
  return rep;
}

}  // namespace d2d
