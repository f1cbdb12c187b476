#pragma once

// Gaussian-shell prior on the latent norm.
//
//   reg_prime(x) = |x|^2 / 2 - (d - 1) * ln|x|
//
// is the negative log-density of |x| for x ~ N(0, I_d) up to a constant; it is
// minimized on the sphere of radius sqrt(d - 1). The powered variant
// (a * reg_prime + c)^10 is nearly flat close to that sphere and rises steeply
// away from it.

#include <cmath>
#include <span>
#include <string>

#include "d2d/tape.hpp"
#include "d2d/tensor.hpp"

namespace d2d {

inline double shell_radius(std::size_t d) {
  if (d < 2) throw DomainError("shell radius needs d >= 2");
  return std::sqrt(static_cast<double>(d - 1));
}

/// Closed-form minimum of reg_prime, attained at |x| = sqrt(d - 1).
inline double reg_prime_min(std::size_t d) {
  const double k = static_cast<double>(d) - 1.0;
  return 0.5 * k - 0.5 * k * std::log(k);
}

/// Rounds to the given number of significant digits.
inline double round_significant(double v, int digits) {
  if (v == 0.0) return 0.0;
  const double mag = std::floor(std::log10(std::abs(v)));
  const double f = std::pow(10.0, digits - 1 - mag);
  return std::round(v * f) / f;
}

struct RegConfig {
  double a = 0.03;
  double c = 2139.0;
  int exponent = 10;

  /// Shift that puts the optimum of a*reg_prime + c just around zero at
  /// dimension d. Reproduces c = 2139 at d = 16384.
  static RegConfig for_dim(std::size_t d, double a = 0.03) {
    return RegConfig{a, round_significant(-a * reg_prime_min(d), 4), 10};
  }
};

inline double reg_prime(std::span<const double> x) {
  const double r2 = squared_norm(x);
  if (!(r2 > 0.0)) throw DomainError("reg_prime: zero-norm latent");
  const double d = static_cast<double>(x.size());
  return 0.5 * r2 - (d - 1.0) * 0.5 * std::log(r2);
}

/// The regularizer as a function of the radius alone.
inline double reg_prime_radius(double r, std::size_t d) {
  if (!(r > 0.0)) throw DomainError("reg_prime: zero-norm latent");
  return 0.5 * r * r - (static_cast<double>(d) - 1.0) * std::log(r);
}

/// Inner term a*reg_prime + c of the powered regularizer.
inline double reg_inner(std::span<const double> x, const RegConfig& cfg) {
  return cfg.a * reg_prime(x) + cfg.c;
}

inline double reg_pow(std::span<const double> x, const RegConfig& cfg) {
  return std::pow(reg_inner(x, cfg), cfg.exponent);
}

/// d reg_prime / dx = x * (1 - (d-1)/|x|^2)
inline std::vector<double> reg_prime_grad(std::span<const double> x) {
  const double r2 = squared_norm(x);
  if (!(r2 > 0.0)) throw DomainError("reg_prime: zero-norm latent");
  const double k = 1.0 - (static_cast<double>(x.size()) - 1.0) / r2;
  std::vector<double> g(x.begin(), x.end());
  for (double& v : g) v *= k;
  return g;
}

// ---- tape builders -------------------------------------------------------

inline Var reg_prime(Graph& g, Var x) {
  const double d = static_cast<double>(g.value(x).size());
  Var r2 = g.squared_norm(x);
  if (!(g.value(r2).item() > 0.0)) throw DomainError("reg_prime: zero-norm latent");
  return g.add(g.scale(r2, 0.5), g.scale(g.log(r2), -0.5 * (d - 1.0)));
}

inline Var reg_pow(Graph& g, Var x, const RegConfig& cfg) {
  Var inner = g.shift(g.scale(reg_prime(g, x), cfg.a), cfg.c);
  return g.power(inner, static_cast<double>(cfg.exponent));
}

}  // namespace d2d
