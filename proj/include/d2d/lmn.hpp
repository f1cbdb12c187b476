#pragma once

// Latent modifier network: a perceptron d -> 100 -> 100 -> d whose output is
// blended with the original latent, x' = w * x + (1 - w) * M(x).

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "d2d/tape.hpp"
#include "d2d/tensor.hpp"

namespace d2d {

inline constexpr std::size_t kLmnHidden = 100;

enum class HiddenActivation : std::uint32_t { leaky_relu = 0, tanh = 1 };

inline const char* activation_name(HiddenActivation a) {
  return a == HiddenActivation::tanh ? "tanh" : "leaky_relu";
}

inline HiddenActivation parse_activation(const std::string& s) {
  if (s == "leaky_relu") return HiddenActivation::leaky_relu;
  if (s == "tanh") return HiddenActivation::tanh;
  throw ConfigError("unknown hidden activation '" + s + "'");
}

struct MixConfig {
  double w = 0.2;
};

struct LmnParams {
  std::size_t d = 0;
  std::size_t hidden = kLmnHidden;
  HiddenActivation activation = HiddenActivation::leaky_relu;
  double leaky_slope = 0.01;
  Tensor W1, b1, W2, b2, W3, b3;

  [[nodiscard]] std::array<const Tensor*, 6> tensors() const { return {&W1, &b1, &W2, &b2, &W3, &b3}; }
  [[nodiscard]] std::array<Tensor*, 6> tensors() { return {&W1, &b1, &W2, &b2, &W3, &b3}; }

  /// Number of stored scalars.
  [[nodiscard]] std::size_t size() const {
    std::size_t n = 0;
    for (const Tensor* t : tensors()) n += t->size();
    return n;
  }

  bool operator==(const LmnParams&) const = default;
};

/// Scalars in a d -> h -> h -> d perceptron with biases; 201*d + 10200 for h = 100.
inline std::size_t param_count(std::size_t d, std::size_t hidden = kLmnHidden) {
  if (d < 1) throw DomainError("param_count: d must be >= 1");
  return hidden * d + hidden + hidden * hidden + hidden + d * hidden + d;
}

inline LmnParams zero_params(std::size_t d, std::size_t hidden = kLmnHidden,
                             HiddenActivation act = HiddenActivation::leaky_relu) {
  LmnParams p;
  p.d = d;
  p.hidden = hidden;
  p.activation = act;
  p.W1 = Tensor::zeros({hidden, d});
  p.b1 = Tensor::zeros({hidden});
  p.W2 = Tensor::zeros({hidden, hidden});
  p.b2 = Tensor::zeros({hidden});
  p.W3 = Tensor::zeros({d, hidden});
  p.b3 = Tensor::zeros({d});
  return p;
}

/// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.
inline LmnParams init_params(std::size_t d, std::mt19937_64& rng,
                             HiddenActivation act = HiddenActivation::leaky_relu,
                             std::size_t hidden = kLmnHidden) {
  if (d < 1) throw DomainError("init_params: d must be >= 1");
  LmnParams p = zero_params(d, hidden, act);
  auto fill = [&](Tensor& W) {
    const double s = 1.0 / std::sqrt(static_cast<double>(W.cols()));
    std::uniform_real_distribution<double> u(-s, s);
    for (double& v : W.data) v = u(rng);
  };
  fill(p.W1);
  fill(p.W2);
  fill(p.W3);
  return p;
}

struct LmnNodes {
  Var W1, b1, W2, b2, W3, b3;

  [[nodiscard]] std::array<Var, 6> vars() const { return {W1, b1, W2, b2, W3, b3}; }
};

inline LmnNodes bind(Graph& g, const LmnParams& p) {
  return {g.param(p.W1), g.param(p.b1), g.param(p.W2), g.param(p.b2), g.param(p.W3), g.param(p.b3)};
}

inline Var hidden_act(Graph& g, Var a, const LmnParams& p) {
  return p.activation == HiddenActivation::tanh ? g.activation(a, Activation::tanh)
                                                : g.activation(a, Activation::leaky_relu, p.leaky_slope);
}

inline Var lmn_forward(Graph& g, const LmnParams& p, const LmnNodes& n, Var x) {
  if (g.value(x).size() != p.d)
    throw ShapeError("lmn_forward: input has " + std::to_string(g.value(x).size()) +
                     " entries, network expects " + std::to_string(p.d));
  Var h1 = hidden_act(g, g.affine(n.W1, x, n.b1), p);
  Var h2 = hidden_act(g, g.affine(n.W2, h1, n.b2), p);
  return g.affine(n.W3, h2, n.b3);
}

/// Forward pass without recording anything.
inline std::vector<double> lmn_forward(std::span<const double> x, const LmnParams& p) {
  if (x.size() != p.d) throw ShapeError("lmn_forward: dimension mismatch");
  auto layer = [](const Tensor& W, const Tensor& b, std::span<const double> in) {
    std::vector<double> out = b.data;
    const std::size_t c = W.cols();
    for (std::size_t i = 0; i < out.size(); ++i) {
      double s = 0.0;
      for (std::size_t k = 0; k < c; ++k) s += W.data[i * c + k] * in[k];
      out[i] += s;
    }
    return out;
  };
  auto act = [&](std::vector<double> v) {
    for (double& e : v)
      e = p.activation == HiddenActivation::tanh ? std::tanh(e) : (e > 0.0 ? e : p.leaky_slope * e);
    return v;
  };
  const auto h1 = act(layer(p.W1, p.b1, x));
  const auto h2 = act(layer(p.W2, p.b2, h1));
  return layer(p.W3, p.b3, h2);
}

/// Smallest |pre-activation| over both hidden layers: the distance to a
/// leaky-ReLU kink. Infinite for tanh, which has none.
inline double preactivation_margin(std::span<const double> x, const LmnParams& p) {
  if (p.activation == HiddenActivation::tanh) return std::numeric_limits<double>::infinity();
  auto layer = [](const Tensor& W, const Tensor& b, std::span<const double> in) {
    std::vector<double> out = b.data;
    const std::size_t c = W.cols();
    for (std::size_t i = 0; i < out.size(); ++i)
      for (std::size_t k = 0; k < c; ++k) out[i] += W.data[i * c + k] * in[k];
    return out;
  };
  double m = std::numeric_limits<double>::infinity();
  auto h1 = layer(p.W1, p.b1, x);
  for (double& v : h1) {
    m = std::min(m, std::abs(v));
    v = v > 0.0 ? v : p.leaky_slope * v;
  }
  for (double v : layer(p.W2, p.b2, h1)) m = std::min(m, std::abs(v));
  return m;
}

inline std::vector<double> mix_latent(std::span<const double> x, std::span<const double> y, double w) {
  if (x.size() != y.size()) throw ShapeError("mix_latent: dimension mismatch");
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = w * x[i] + (1.0 - w) * y[i];
  return out;
}

inline Var mix_latent(Graph& g, Var x, Var y, double w) {
  if (g.value(x).shape != g.value(y).shape) throw ShapeError("mix_latent: dimension mismatch");
  return g.add(g.scale(x, w), g.scale(y, 1.0 - w));
}

/// Mixed latent for given params, no tape.
inline std::vector<double> modified_latent(std::span<const double> x, const LmnParams& p, double w) {
  return mix_latent(x, lmn_forward(x, p), w);
}

inline double grad_norm(const Gradients& grads, const LmnNodes& n) {
  double s = 0.0;
  for (Var v : n.vars()) s += squared_norm(grads.wrt(v).data);
  return std::sqrt(s);
}

/// p <- p - step * grad
inline void apply_gradient(LmnParams& p, const Gradients& grads, const LmnNodes& n, double step) {
  const auto vars = n.vars();
  const auto ts = p.tensors();
  for (std::size_t k = 0; k < vars.size(); ++k) {
    const Tensor& g = grads.wrt(vars[k]);
    Tensor& t = *ts[k];
    for (std::size_t i = 0; i < t.size(); ++i) t.data[i] -= step * g.data[i];
  }
}

// ---- persistence ---------------------------------------------------------
//
// Layout (little-endian):
//   char[8]  magic "D2DLMN\0\0"
//   u32      format version
//   u32      hidden activation (0 leaky_relu, 1 tanh)
//   u64      d
//   u64      hidden width
//   f64      leaky slope
//   f64[]    W1, b1, W2, b2, W3, b3 in row-major order

inline constexpr std::uint32_t kLmnFormatVersion = 1;
inline constexpr char kLmnMagic[8] = {'D', '2', 'D', 'L', 'M', 'N', '\0', '\0'};

static_assert(std::endian::native == std::endian::little, "params file assumes a little-endian host");

inline void save_params(const LmnParams& p, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  auto put = [&](const auto& v) { out.write(reinterpret_cast<const char*>(&v), sizeof(v)); };
  out.write(kLmnMagic, sizeof(kLmnMagic));
  put(kLmnFormatVersion);
  put(static_cast<std::uint32_t>(p.activation));
  put(static_cast<std::uint64_t>(p.d));
  put(static_cast<std::uint64_t>(p.hidden));
  put(p.leaky_slope);
  for (const Tensor* t : p.tensors())
    out.write(reinterpret_cast<const char*>(t->data.data()),
              static_cast<std::streamsize>(t->size() * sizeof(double)));
  if (!out) throw Error("write to '" + path + "' failed");
}

inline LmnParams load_params(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "'");
  auto get = [&](auto& v) {
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!in) throw Error("'" + path + "': truncated header");
  };
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kLmnMagic, sizeof(magic)) != 0)
    throw Error("'" + path + "' is not a modifier-network params file");
  std::uint32_t version = 0, act = 0;
  std::uint64_t d = 0, hidden = 0;
  double slope = 0.0;
  get(version);
  if (version != kLmnFormatVersion)
    throw Error("'" + path + "': unsupported format version " + std::to_string(version));
  get(act);
  get(d);
  get(hidden);
  get(slope);
  if (act > 1) throw Error("'" + path + "': unknown activation code");
  LmnParams p = zero_params(d, hidden, static_cast<HiddenActivation>(act));
  p.leaky_slope = slope;
  for (Tensor* t : p.tensors()) {
    in.read(reinterpret_cast<char*>(t->data.data()), static_cast<std::streamsize>(t->size() * sizeof(double)));
    if (!in) throw Error("'" + path + "': truncated parameter data");
  }
  if (in.peek() != std::char_traits<char>::eof()) throw Error("'" + path + "': trailing bytes");
  return p;
}

}  // namespace d2d
