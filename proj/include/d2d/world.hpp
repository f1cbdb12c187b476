#pragma once

// Frozen toy generator + detector.
//
// The latent x' (d = S*q) is split into S slots of q entries. Slot i becomes
// an "object embedding" e_i = tanh(A_i x'_i), and the detector reads one logit
// per class, z_i^j = g * <u_j, e_i> + v_j. Everything is differentiable in x',
// so the count critic can be backpropagated to the latent exactly as it would
// be through a real generator.

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "d2d/critic.hpp"
#include "d2d/tape.hpp"
#include "d2d/tensor.hpp"

namespace d2d {

struct WorldSpec {
  std::uint64_t seed = 0;
  std::size_t slots = 16;
  std::size_t slot_dim = 8;
  std::size_t classes = 3;
  double calib_tau = 0.2;

  [[nodiscard]] std::size_t dim() const { return slots * slot_dim; }
};

struct DetectionSet {
  LogitMatrix logits;
  std::vector<std::array<double, 4>> boxes;  // (cx, cy, w, h), one per slot

  /// The detections as seen by a detector queried with only these classes.
  [[nodiscard]] DetectionSet select_classes(std::span<const std::size_t> classes) const {
    return {logits.select_classes(classes), boxes};
  }
};

class World {
 public:
  // Bias sits this far below the threshold so an empty slot (e = 0) is not counted.
  static constexpr double kBiasOffset = 0.5;

  /// Draws the frozen weights and calibrates the logit gain so the expected
  /// per-class count over Gaussian latents is 3S/8 (inside [S/4, S/2]).
  static World make(const WorldSpec& spec) {
    if (spec.slots < 1 || spec.slot_dim < 2 || spec.classes < 1)
      throw DomainError("world needs S >= 1, q >= 2, m >= 1");
    World w;
    w.spec_ = spec;
    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const std::size_t S = spec.slots, q = spec.slot_dim, m = spec.classes;

    w.slot_maps_.assign(S, Tensor::zeros({q, q}));
    const double a_scale = 1.0 / std::sqrt(static_cast<double>(q));
    for (auto& A : w.slot_maps_)
      for (double& v : A.data) v = a_scale * normal(rng);

    w.readouts_ = Tensor::zeros({m, q});
    for (std::size_t j = 0; j < m; ++j) {
      double n2 = 0.0;
      for (std::size_t k = 0; k < q; ++k) {
        const double v = normal(rng);
        w.readouts_.at(j, k) = v;
        n2 += v * v;
      }
      for (std::size_t k = 0; k < q; ++k) w.readouts_.at(j, k) /= std::sqrt(n2);
    }

    const double tz = logit_threshold(spec.calib_tau);
    w.biases_.assign(m, tz - kBiasOffset);

    w.box_center_ = Tensor::zeros({2, q});
    w.box_size_ = Tensor::zeros({2, q});
    for (double& v : w.box_center_.data) v = a_scale * normal(rng);
    for (double& v : w.box_size_.data) v = a_scale * normal(rng);

    w.calibrate_gain(rng);
    w.build_dense();
    return w;
  }

  [[nodiscard]] const WorldSpec& spec() const { return spec_; }
  [[nodiscard]] std::size_t dim() const { return spec_.dim(); }
  [[nodiscard]] double gain() const { return gain_; }
  [[nodiscard]] std::span<const double> biases() const { return biases_; }

  /// Slot embeddings e_i, concatenated.
  [[nodiscard]] std::vector<double> embed(std::span<const double> x) const {
    check_dim(x.size());
    const std::size_t q = spec_.slot_dim;
    std::vector<double> e(x.size());
    for (std::size_t i = 0; i < spec_.slots; ++i) {
      const Tensor& A = slot_maps_[i];
      for (std::size_t r = 0; r < q; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < q; ++c) s += A.at(r, c) * x[i * q + c];
        e[i * q + r] = std::tanh(s);
      }
    }
    return e;
  }

  [[nodiscard]] LogitMatrix logits(std::span<const double> x) const {
    const auto e = embed(x);
    const std::size_t S = spec_.slots, q = spec_.slot_dim, m = spec_.classes;
    std::vector<double> z(S * m);
    for (std::size_t i = 0; i < S; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < q; ++k) s += readouts_.at(j, k) * e[i * q + k];
        z[i * m + j] = gain_ * s + biases_[j];
      }
    return {S, m, std::move(z)};
  }

  [[nodiscard]] DetectionSet generate(std::span<const double> x) const {
    const auto e = embed(x);
    DetectionSet out{logits(x), {}};
    const std::size_t q = spec_.slot_dim;
    out.boxes.reserve(spec_.slots);
    for (std::size_t i = 0; i < spec_.slots; ++i) {
      std::array<double, 2> c{}, s{};
      for (std::size_t r = 0; r < 2; ++r) {
        double a = 0.0, b = 0.0;
        for (std::size_t k = 0; k < q; ++k) {
          a += box_center_.at(r, k) * e[i * q + k];
          b += box_size_.at(r, k) * e[i * q + k];
        }
        c[r] = sigmoid(a);
        s[r] = 0.05 + 0.25 * sigmoid(b);
      }
      out.boxes.push_back({c[0], c[1], s[0], s[1]});
    }
    return out;
  }

  /// Flattened S*m logit node, recorded on the tape.
  Var generate(Graph& g, Var x) const {
    check_dim(g.value(x).size());
    Var e = g.activation(g.matvec(g.constant(dense_slot_map_), x), Activation::tanh);
    return g.affine(g.constant(dense_readout_), e, g.constant(dense_bias_));
  }

 private:
  WorldSpec spec_;
  std::vector<Tensor> slot_maps_;
  Tensor readouts_;
  std::vector<double> biases_;
  Tensor box_center_, box_size_;
  double gain_ = 1.0;

  Tensor dense_slot_map_;  // block-diagonal d x d
  Tensor dense_readout_;   // (S*m) x d, gain folded in
  Tensor dense_bias_;

  void check_dim(std::size_t n) const {
    if (n != dim())
      throw ShapeError("world expects a latent of " + std::to_string(dim()) + " entries, got " +
                       std::to_string(n));
  }

  void build_dense() {
    const std::size_t S = spec_.slots, q = spec_.slot_dim, m = spec_.classes, d = dim();
    dense_slot_map_ = Tensor::zeros({d, d});
    for (std::size_t i = 0; i < S; ++i)
      for (std::size_t r = 0; r < q; ++r)
        for (std::size_t c = 0; c < q; ++c) dense_slot_map_.at(i * q + r, i * q + c) = slot_maps_[i].at(r, c);
    dense_readout_ = Tensor::zeros({S * m, d});
    dense_bias_ = Tensor::zeros({S * m});
    for (std::size_t i = 0; i < S; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        for (std::size_t k = 0; k < q; ++k) dense_readout_.at(i * m + j, i * q + k) = gain_ * readouts_.at(j, k);
        dense_bias_[i * m + j] = biases_[j];
      }
  }

  // Mean single-class count (class queried alone) over a fixed latent sample.
  double mean_count(const std::vector<std::vector<double>>& sample, double gain) {
    gain_ = gain;
    const double tz = logit_threshold(spec_.calib_tau);
    double total = 0.0;
    for (const auto& x : sample) {
      const LogitMatrix Z = logits(x);
      for (double z : Z.z) total += z >= tz ? 1.0 : 0.0;
    }
    return total / static_cast<double>(sample.size() * spec_.classes);
  }

  void calibrate_gain(std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<std::vector<double>> sample(256, std::vector<double>(dim()));
    for (auto& x : sample)
      for (double& v : x) v = normal(rng);

    const double S = static_cast<double>(spec_.slots);
    const double goal = 0.375 * S;
    double lo = 1e-3, hi = 1e3;
    if (mean_count(sample, hi) < goal)
      throw Error("world calibration failed: counts saturate below 3S/8");
    for (int it = 0; it < 80; ++it) {
      const double mid = std::sqrt(lo * hi);
      (mean_count(sample, mid) < goal ? lo : hi) = mid;
    }
    const double c = mean_count(sample, hi);
    if (c < 0.25 * S || c > 0.5 * S) throw Error("world calibration failed: mean count out of range");
  }
};

/// Hard count for class j: slots whose argmax is j and whose max logit clears
/// logit(tau). Evaluation only, never differentiated.
inline std::size_t oracle_count(const DetectionSet& det, double tau, std::size_t j) {
  const double tz = logit_threshold(tau);
  const LogitMatrix& Z = det.logits;
  if (j >= Z.m) throw ShapeError("oracle_count: class index out of range");
  std::size_t n = 0;
  for (std::size_t i = 0; i < Z.n; ++i) {
    const std::size_t a = Z.argmax(i);
    if (a == j && Z.at(i, a) >= tz) ++n;
  }
  return n;
}

}  // namespace d2d
