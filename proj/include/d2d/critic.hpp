#pragma once

// Count critic over detector logits.
//
// A slot is counted when z >= tau_z, tau_z = logit(tau). The soft count
// replaces each indicator with sigma(beta * (z - tau_z)). The critic loss
// multiplies every sigmoid by its own signed distance to the threshold, which
// keeps the gradient near 1 on the side that must move instead of decaying to
// zero the way the bare soft count does.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "d2d/tape.hpp"
#include "d2d/tensor.hpp"

namespace d2d {

inline double logit_threshold(double tau) {
  if (!(tau > 0.0 && tau < 1.0))
    throw DomainError("detection threshold tau must lie in (0,1), got " + std::to_string(tau));
  return std::log(tau / (1.0 - tau));
}

struct CriticConfig {
  double tau = 0.2;
  double beta = 300.0;
  double tau_z = logit_threshold(0.2);

  static CriticConfig make(double tau, double beta) {
    if (!(beta > 0.0)) throw DomainError("steepness beta must be positive");
    return CriticConfig{tau, beta, logit_threshold(tau)};
  }
};

/// n slots x m classes, row-major (slot i, class j) at z[i*m + j].
struct LogitMatrix {
  std::size_t n = 0;
  std::size_t m = 1;
  std::vector<double> z;

  LogitMatrix() = default;
  LogitMatrix(std::size_t slots, std::size_t classes, std::vector<double> values)
      : n(slots), m(classes), z(std::move(values)) {
    if (m < 1) throw ShapeError("logit matrix needs at least one class");
    if (z.size() != n * m) throw ShapeError("logit matrix data does not match n*m");
  }
  static LogitMatrix single(std::vector<double> values) {
    const auto n = values.size();
    return {n, 1, std::move(values)};
  }

  [[nodiscard]] double at(std::size_t i, std::size_t j) const { return z[i * m + j]; }

  /// Lowest index wins ties.
  [[nodiscard]] std::size_t argmax(std::size_t i) const {
    std::size_t best = 0;
    for (std::size_t j = 1; j < m; ++j)
      if (at(i, j) > at(i, best)) best = j;
    return best;
  }

  /// Columns picked out in the given order (a detector queried only with these classes).
  [[nodiscard]] LogitMatrix select_classes(std::span<const std::size_t> classes) const {
    std::vector<double> out;
    out.reserve(n * classes.size());
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c : classes) {
        if (c >= m) throw ShapeError("class index out of range");
        out.push_back(at(i, c));
      }
    return {n, classes.size(), std::move(out)};
  }
};

enum class Branch { over, under, satisfied };

inline const char* branch_name(Branch b) {
  switch (b) {
    case Branch::over: return "over";
    case Branch::under: return "under";
    case Branch::satisfied: return "satisfied";
  }
  return "?";
}

struct CriticValue {
  double loss = 0.0;
  Branch branch = Branch::satisfied;
};

inline double soft_count(std::span<const double> z, const CriticConfig& cfg) {
  double f = 0.0;
  for (double zi : z) f += sigmoid(cfg.beta * (zi - cfg.tau_z));
  return f;
}

inline std::size_t hard_count(std::span<const double> z, const CriticConfig& cfg) {
  return static_cast<std::size_t>(
      std::count_if(z.begin(), z.end(), [&](double zi) { return zi >= cfg.tau_z; }));
}

inline Branch critic_branch(double f, double target) {
  if (f > target) return Branch::over;
  if (f < target) return Branch::under;
  return Branch::satisfied;
}

/// sigma(beta*u)*u summed, with u the signed distance pushed toward zero.
inline double logit_scaled_sum(std::span<const double> z, double sign, const CriticConfig& cfg) {
  double s = 0.0;
  for (double zi : z) {
    const double u = sign * (zi - cfg.tau_z);
    s += sigmoid(cfg.beta * u) * u;
  }
  return s;
}

inline CriticValue critic_loss(std::span<const double> z, double target, const CriticConfig& cfg) {
  const Branch b = critic_branch(soft_count(z, cfg), target);
  switch (b) {
    case Branch::over: return {logit_scaled_sum(z, +1.0, cfg), b};
    case Branch::under: return {logit_scaled_sum(z, -1.0, cfg), b};
    case Branch::satisfied: break;
  }
  return {0.0, Branch::satisfied};
}

inline std::vector<double> critic_grad(std::span<const double> z, double target,
                                       const CriticConfig& cfg) {
  const Branch b = critic_branch(soft_count(z, cfg), target);
  std::vector<double> g(z.size(), 0.0);
  if (b == Branch::satisfied) return g;
  const double sign = b == Branch::over ? 1.0 : -1.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double u = sign * (z[i] - cfg.tau_z);
    g[i] = sign * (sigmoid(cfg.beta * u) + cfg.beta * sigmoid_prime(cfg.beta * u) * u);
  }
  return g;
}

/// Derivative of the soft count; what the count-only ablation descends on.
inline std::vector<double> soft_count_grad(std::span<const double> z, const CriticConfig& cfg) {
  std::vector<double> g(z.size());
  for (std::size_t i = 0; i < z.size(); ++i)
    g[i] = cfg.beta * sigmoid_prime(cfg.beta * (z[i] - cfg.tau_z));
  return g;
}

struct ClassCount {
  double soft = 0.0;
  std::size_t hard = 0;
};

/// Each slot votes for its argmax class; only slots whose max logit clears
/// tau_z enter the hard count.
inline std::vector<ClassCount> per_class_counts(const LogitMatrix& Z, const CriticConfig& cfg) {
  std::vector<ClassCount> out(Z.m);
  for (std::size_t i = 0; i < Z.n; ++i) {
    const std::size_t j = Z.argmax(i);
    const double zmax = Z.at(i, j);
    out[j].soft += sigmoid(cfg.beta * (zmax - cfg.tau_z));
    if (zmax >= cfg.tau_z) ++out[j].hard;
  }
  return out;
}

/// +1 where the logit should go down, -1 where it should go up.
/// Slots whose argmax class is under- or correctly generated keep pushing
/// that max logit up; everything else is pushed down.
inline std::vector<double> multi_critic_signs(const LogitMatrix& Z, std::span<const double> targets,
                                              const CriticConfig& cfg) {
  if (targets.size() != Z.m) throw ShapeError("multi critic: one target per class required");
  const auto counts = per_class_counts(Z, cfg);
  std::vector<char> at_or_under(Z.m);
  for (std::size_t j = 0; j < Z.m; ++j) at_or_under[j] = counts[j].soft <= targets[j];

  std::vector<double> sign(Z.n * Z.m, 1.0);
  for (std::size_t i = 0; i < Z.n; ++i) {
    const std::size_t j = Z.argmax(i);
    if (at_or_under[j]) sign[i * Z.m + j] = -1.0;
  }
  return sign;
}

inline double multi_critic_loss(const LogitMatrix& Z, std::span<const double> targets,
                                const CriticConfig& cfg) {
  const auto sign = multi_critic_signs(Z, targets, cfg);
  double s = 0.0;
  for (std::size_t k = 0; k < Z.z.size(); ++k) {
    const double u = sign[k] * (Z.z[k] - cfg.tau_z);
    s += sigmoid(cfg.beta * u) * u;
  }
  return s;
}

/// Target met under the hard-threshold rule, per class.
inline bool counts_match(const LogitMatrix& Z, std::span<const double> targets,
                         const CriticConfig& cfg) {
  const auto counts = per_class_counts(Z, cfg);
  for (std::size_t j = 0; j < Z.m; ++j)
    if (static_cast<double>(counts[j].hard) != targets[j]) return false;
  return true;
}

// ---- tape builders -------------------------------------------------------

struct TapeCritic {
  Var loss;
  Branch branch = Branch::satisfied;  // single-class only
  bool active = true;                 // false when the loss is identically zero
};

/// Sum of sigma(beta*u)*u with u = sign * (z - tau_z), recorded on g.
inline Var signed_logit_critic(Graph& g, Var z, std::vector<double> sign, const CriticConfig& cfg) {
  Var centered = g.shift(z, -cfg.tau_z);
  Var s = g.constant(Tensor(g.value(z).shape, std::move(sign)));
  Var u = g.mul(centered, s);
  return g.sum(g.activation(u, Activation::logit_scaled_sigmoid, cfg.beta));
}

/// Single-class critic on a vector node of n logits. The branch is decided
/// from the current values (the graph is rebuilt every step).
inline TapeCritic critic_loss(Graph& g, Var z, double target, const CriticConfig& cfg) {
  const auto& zv = g.value(z).data;
  const Branch b = critic_branch(soft_count(zv, cfg), target);
  if (b == Branch::satisfied) return {g.constant(Tensor::scalar(0.0)), b, false};
  const double sign = b == Branch::over ? 1.0 : -1.0;
  return {signed_logit_critic(g, z, std::vector<double>(zv.size(), sign), cfg), b, true};
}

/// Multi-class critic on a flattened n*m logit node.
inline TapeCritic multi_critic_loss(Graph& g, Var z, std::size_t m, std::span<const double> targets,
                                    const CriticConfig& cfg) {
  const auto& zv = g.value(z).data;
  if (m == 0 || zv.size() % m) throw ShapeError("multi critic: logit node is not n*m");
  const LogitMatrix Z(zv.size() / m, m, zv);
  return {signed_logit_critic(g, z, multi_critic_signs(Z, targets, cfg), cfg), Branch::satisfied,
          true};
}

/// Soft count as a loss: descend on f when over, on -f when under.
inline TapeCritic soft_count_loss(Graph& g, Var z, double target, const CriticConfig& cfg) {
  const auto& zv = g.value(z).data;
  const Branch b = critic_branch(soft_count(zv, cfg), target);
  if (b == Branch::satisfied) return {g.constant(Tensor::scalar(0.0)), b, false};
  Var f = g.sum(g.sigmoid(g.shift(z, -cfg.tau_z), cfg.beta));
  return {b == Branch::over ? f : g.scale(f, -1.0), b, true};
}

/// Multi-class variant of the count-only loss: each class's soft count is
/// pushed down when over its target and up otherwise.
inline TapeCritic multi_soft_count_loss(Graph& g, Var z, std::size_t m,
                                        std::span<const double> targets, const CriticConfig& cfg) {
  const auto& zv = g.value(z).data;
  if (m == 0 || zv.size() % m) throw ShapeError("multi soft count: logit node is not n*m");
  const LogitMatrix Z(zv.size() / m, m, zv);
  const auto counts = per_class_counts(Z, cfg);
  std::vector<double> mask(zv.size(), 0.0);
  for (std::size_t i = 0; i < Z.n; ++i) {
    const std::size_t j = Z.argmax(i);
    mask[i * m + j] = counts[j].soft > targets[j] ? 1.0 : -1.0;
  }
  Var s = g.sigmoid(g.shift(z, -cfg.tau_z), cfg.beta);
  return {g.sum(g.mul(s, g.constant(Tensor(g.value(z).shape, std::move(mask))))),
          Branch::satisfied, true};
}

}  // namespace d2d
