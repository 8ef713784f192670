#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <random>
#include <vector>

#include "dacnet/error.hpp"
#include "dacnet/tensor.hpp"

namespace dacnet::equiv {

enum class Flavor { standard, preactivated_shared, dac };

/// One layer of a chain; the meaning of `bias` depends on the chain flavor:
///  - standard: bias [n], out = relu(bias + W in)
///  - preactivated_shared: bias [m] filters the inputs, out = W relu(bias + in);
///    an empty bias feeds the raw inputs
///  - dac: bias [n, m], out_i = sum_j W_ij relu(bias_ij + in_j)
struct ChainLayer {
  Tensor weights;  // [n, m]
  Tensor bias;
};

struct ChainSpec {
  Flavor flavor = Flavor::standard;
  std::vector<ChainLayer> layers;
  /// Applied as relu(final_filter + out) after the last layer of a
  /// preactivated chain.
  std::optional<Tensor> final_filter;

  std::size_t inputs() const { return layers.front().weights.dim(1); }
  std::size_t outputs() const { return layers.back().weights.dim(0); }

  void validate() const {
    require(!layers.empty(), "chain has no layers");
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& L = layers[l];
      require(L.weights.rank() == 2, "chain weights must be matrices");
      if (l > 0 && L.weights.dim(1) != layers[l - 1].weights.dim(0))
        throw_dims("chain layer input", L.weights.shape(), layers[l - 1].weights.shape());
      const std::size_t n = L.weights.dim(0), m = L.weights.dim(1);
      switch (flavor) {
        case Flavor::standard:
          if (L.bias.shape() != Shape{n}) throw_dims("standard chain bias", L.bias.shape(), Shape{n});
          break;
        case Flavor::preactivated_shared:
          if (!L.bias.empty() && L.bias.shape() != Shape{m})
            throw_dims("shared filter bias", L.bias.shape(), Shape{m});
          break;
        case Flavor::dac:
          if (!L.bias.empty() && L.bias.shape() != Shape{n, m})
            throw_dims("dac chain bias", L.bias.shape(), Shape{n, m});
          break;
      }
    }
    if (final_filter && final_filter->shape() != Shape{outputs()})
      throw_dims("final filter", final_filter->shape(), Shape{outputs()});
  }
};

inline double relu(double v) { return v > 0 ? v : 0.0; }

/// Evaluates a chain on one input vector.
inline std::vector<double> evaluate(const ChainSpec& c, std::vector<double> z) {
  for (const auto& L : c.layers) {
    const std::size_t n = L.weights.dim(0), m = L.weights.dim(1);
    if (z.size() != m) throw_dims("chain input", Shape{z.size()}, Shape{m});
    std::vector<double> out(n);
    if (c.flavor == Flavor::preactivated_shared && !L.bias.empty())
      for (std::size_t j = 0; j < m; ++j) z[j] = relu(L.bias[j] + z[j]);
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < m; ++j) {
        double in = z[j];
        if (c.flavor == Flavor::dac && !L.bias.empty()) in = relu(L.bias[i * m + j] + in);
        s += L.weights[i * m + j] * in;
      }
      out[i] = c.flavor == Flavor::standard ? relu(L.bias[i] + s) : s;
    }
    z = std::move(out);
  }
  if (c.final_filter)
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = relu((*c.final_filter)[i] + z[i]);
  return z;
}

/// Batch form: x [B, m] -> [B, n].
inline Tensor evaluate(const ChainSpec& c, const Tensor& x) {
  require(x.rank() == 2, "chain batch must be [batch, features]");
  const std::size_t B = x.dim(0), m = x.dim(1);
  Tensor out({B, c.outputs()});
  for (std::size_t r = 0; r < B; ++r) {
    std::vector<double> z(x.data().begin() + r * m, x.data().begin() + (r + 1) * m);
    auto y = evaluate(c, std::move(z));
    std::copy(y.begin(), y.end(), out.storage().begin() + r * c.outputs());
  }
  return out;
}

/// Moves every bias to the consumer side: layer l filters its inputs with the
/// bias of layer l-1, the first layer reads raw inputs, and the last bias
/// becomes the final filter.
inline ChainSpec standard_to_preactivated_shared(const ChainSpec& c) {
  require(c.flavor == Flavor::standard, "expected a standard chain");
  c.validate();
  ChainSpec out;
  out.flavor = Flavor::preactivated_shared;
  for (std::size_t l = 0; l < c.layers.size(); ++l)
    out.layers.push_back({c.layers[l].weights, l == 0 ? Tensor() : c.layers[l - 1].bias});
  out.final_filter = c.layers.back().bias;
  return out;
}

/// A shared-bias chain written with one bias per edge (every consumer of a
/// node repeats its producer's bias).
inline ChainSpec shared_as_dac(const ChainSpec& c) {
  require(c.flavor == Flavor::preactivated_shared, "expected a preactivated shared-bias chain");
  ChainSpec out;
  out.flavor = Flavor::dac;
  out.final_filter = c.final_filter;
  for (const auto& L : c.layers) {
    if (L.bias.empty()) {
      out.layers.push_back({L.weights, Tensor()});
      continue;
    }
    const std::size_t n = L.weights.dim(0), m = L.weights.dim(1);
    Tensor b({n, m});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) b[i * m + j] = L.bias[j];
    out.layers.push_back({L.weights, std::move(b)});
  }
  return out;
}

/// Random standard chain with the given widths (widths.size() - 1 layers).
inline ChainSpec random_standard_chain(const std::vector<std::size_t>& widths, std::mt19937_64& rng) {
  require(widths.size() >= 2, "chain needs at least one layer");
  std::normal_distribution<double> nd(0.0, 1.0);
  ChainSpec c;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const std::size_t m = widths[l], n = widths[l + 1];
    Tensor w({n, m}), b({n});
    const double s = std::sqrt(2.0 / m);
    for (auto& v : w.storage()) v = s * nd(rng);
    for (auto& v : b.storage()) v = 0.5 * nd(rng);
    c.layers.push_back({std::move(w), std::move(b)});
  }
  return c;
}

inline Tensor replicate_input(const Tensor& x, std::size_t r) {
  require(r >= 1, "replication factor must be at least 1");
  require(x.rank() == 1, "replicate_input expects a vector");
  std::vector<double> v;
  v.reserve(x.size() * r);
  for (std::size_t k = 0; k < r; ++k) v.insert(v.end(), x.data().begin(), x.data().end());
  const std::size_t len = v.size();
  return Tensor({len}, std::move(v));
}

/// Sums the weights of a dense layer over the r replicas of its m inputs.
/// weights [n, r*m] -> [n, m]; bias and activation unchanged.
inline Tensor collapse_replicated_weights(const Tensor& w, std::size_t m) {
  require(w.rank() == 2 && m > 0 && w.dim(1) % m == 0, "weights do not cover whole replicas");
  const std::size_t n = w.dim(0), r = w.dim(1) / m;
  Tensor out({n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < r; ++k)
      for (std::size_t j = 0; j < m; ++j) out[i * m + j] += w[i * r * m + k * m + j];
  return out;
}

/// Two-layer standard network on a scalar input:
/// f(x) = out_bias + sum_j out_w[j] relu(hidden_b[j] + hidden_w[j] x).
struct TwoLayerStd {
  std::vector<double> hidden_w, hidden_b, out_w;
  double out_bias = 0;

  double operator()(double x) const {
    double s = out_bias;
    for (std::size_t j = 0; j < out_w.size(); ++j) s += out_w[j] * relu(hidden_b[j] + hidden_w[j] * x);
    return s;
  }
};

/// Single-unit preactivated layer over a replicated scalar: sum_j w_j relu(b_j + x).
inline double dac1d(const std::vector<double>& w, const std::vector<double>& b, double x) {
  double s = 0;
  for (std::size_t j = 0; j < w.size(); ++j) s += w[j] * relu(b[j] + x);
  return s;
}

/// The same function as a two-layer standard network: hidden unit j has weight
/// +1 and bias b_j, the outer layer carries w_j.
inline TwoLayerStd dac1d_to_two_layer_standard(const std::vector<double>& w, const std::vector<double>& b) {
  require(w.size() == b.size(), "weights and biases must have equal length");
  TwoLayerStd t;
  t.hidden_w.assign(w.size(), 1.0);
  t.hidden_b = b;
  t.out_w = w;
  return t;
}

/// Rescales hidden units to weights of magnitude one, moving |w~_j| into the
/// outer weight and dividing the bias by it. A unit with zero hidden weight is
/// constant, so its value is folded into the outer bias and the unit dropped.
inline TwoLayerStd normalize_hidden(const TwoLayerStd& f) {
  TwoLayerStd t;
  t.out_bias = f.out_bias;
  for (std::size_t j = 0; j < f.out_w.size(); ++j) {
    const double a = std::abs(f.hidden_w[j]);
    if (a == 0) {
      t.out_bias += f.out_w[j] * relu(f.hidden_b[j]);
      continue;
    }
    t.hidden_w.push_back(f.hidden_w[j] > 0 ? 1.0 : -1.0);
    t.hidden_b.push_back(f.hidden_b[j] / a);
    t.out_w.push_back(f.out_w[j] * a);
  }
  return t;
}

/// A fixed two-layer preactivated chain on a scalar input in which the two
/// consumers of x filter it with different biases. Its output has four kinks;
/// any shared-bias assignment of the same weights has at most three.
inline ChainSpec nonshared_witness() {
  ChainSpec c;
  c.flavor = Flavor::dac;
  c.layers.push_back({Tensor::matrix({{-1}, {-1}}), Tensor::matrix({{1}, {0}})});
  c.layers.push_back({Tensor::matrix({{1, 1}}), Tensor::matrix({{0.5, 0.5}})});
  return c;
}

struct WitnessSearch {
  double best_deviation;  // smallest max-abs deviation found over the grid
  std::size_t candidates;
};

/// Grid search over shared-bias reassignments of nonshared_witness(): layer 1
/// uses one bias for both edges from x, layer 2 keeps one bias per producer.
inline WitnessSearch search_shared_reassignment(std::size_t steps = 41, double range = 2.0) {
  const ChainSpec target = nonshared_witness();
  std::vector<double> xs;
  for (int i = 0; i <= 200; ++i) xs.push_back(-2.0 + 4.0 * i / 200);
  std::vector<double> ref;
  for (double x : xs) ref.push_back(evaluate(target, std::vector<double>{x})[0]);

  WitnessSearch res{INFINITY, 0};
  auto at = [&](std::size_t i) { return -range + 2 * range * double(i) / double(steps - 1); };
  for (std::size_t a = 0; a < steps; ++a)
    for (std::size_t p = 0; p < steps; ++p)
      for (std::size_t q = 0; q < steps; ++q) {
        ChainSpec c = target;
        c.layers[0].bias = Tensor::matrix({{at(a)}, {at(a)}});
        c.layers[1].bias = Tensor::matrix({{at(p), at(q)}});
        double dev = 0;
        for (std::size_t k = 0; k < xs.size() && dev < res.best_deviation; ++k)
          dev = std::max(dev, std::abs(evaluate(c, std::vector<double>{xs[k]})[0] - ref[k]));
        res.best_deviation = std::min(res.best_deviation, dev);
        ++res.candidates;
      }
  return res;
}

}  // namespace dacnet::equiv
