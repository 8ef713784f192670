#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <random>
#include <vector>

#include "dacnet/error.hpp"
#include "dacnet/graph.hpp"
#include "dacnet/ops.hpp"
#include "dacnet/tensor.hpp"

namespace dacnet::layers {

using ops::Padding;

enum class Activation { none, relu };

/// Standard dense unit: act(b + W y). weights [n, m], bias [n].
struct DenseStdParams {
  Tensor weights;
  Tensor bias;
  Activation out_activation = Activation::none;
  bool operator==(const DenseStdParams&) const = default;
  std::size_t inputs() const { return weights.dim(1); }
  std::size_t outputs() const { return weights.dim(0); }
};

/// Preactivated dense layer with one bias per edge:
/// out_i = psi(b_i + sum_j w_ij relu(b_ij + y_j)).
struct DenseDacParams {
  Tensor weights;
  Tensor dac_biases;
  std::optional<Tensor> out_bias;
  Activation out_activation = Activation::none;
  bool operator==(const DenseDacParams&) const = default;
  std::size_t inputs() const { return weights.dim(1); }
  std::size_t outputs() const { return weights.dim(0); }
};

/// Preactivated layer given as explicit edge lists; a unit may read the same
/// input column several times with different biases.
struct SparseDacParams {
  ops::SparseIndex index;
  Tensor weights;
  Tensor dac_biases;
  std::optional<Tensor> out_bias;
  Activation out_activation = Activation::none;
  bool operator==(const SparseDacParams& o) const {
    return index.unit_ptr == o.index.unit_ptr && index.src == o.index.src && index.inputs == o.index.inputs &&
           weights == o.weights && dac_biases == o.dac_biases && out_bias == o.out_bias &&
           out_activation == o.out_activation;
  }
  std::size_t inputs() const { return index.inputs; }
  std::size_t outputs() const { return index.units(); }
};

/// Standard convolution. kernel [L, L, n, m].
struct Conv2dStdParams {
  Tensor kernel;
  std::optional<Tensor> bias;
  std::size_t stride = 1;
  Padding padding = Padding::same;
  Activation out_activation = Activation::none;
  bool operator==(const Conv2dStdParams&) const = default;
  std::size_t size() const { return kernel.dim(0); }
  std::size_t inputs() const { return kernel.dim(3); }
  std::size_t outputs() const { return kernel.dim(2); }
};

/// Preactivated convolution. kernel [L, L, n, m]; dac_biases [n, m], shared by
/// every spatial position.
struct Conv2dDacParams {
  Tensor kernel;
  Tensor dac_biases;
  std::optional<Tensor> out_bias;
  std::size_t stride = 1;
  Padding padding = Padding::same;
  Activation out_activation = Activation::none;
  bool operator==(const Conv2dDacParams&) const = default;
  std::size_t size() const { return kernel.dim(0); }
  std::size_t inputs() const { return kernel.dim(3); }
  std::size_t outputs() const { return kernel.dim(2); }
};

struct BatchNormParams {
  Tensor gamma;
  std::optional<Tensor> beta;
  Tensor running_mean;
  Tensor running_var;
  double epsilon = 1e-3;
  double momentum = 0.9;
  bool operator==(const BatchNormParams&) const = default;
  std::size_t channels() const { return gamma.dim(0); }
};

// ---- initialization ----

inline Tensor he_normal(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  Tensor t(std::move(shape));
  for (auto& v : t.storage()) v = nd(rng);
  return t;
}

inline DenseStdParams make_dense_std(std::size_t m, std::size_t n, std::mt19937_64& rng,
                                     Activation act = Activation::none) {
  require(m >= 1 && n >= 1, "dense layer needs positive sizes");
  return {he_normal({n, m}, m, rng), Tensor({n}), act};
}

inline DenseDacParams make_dense_dac(std::size_t m, std::size_t n, std::mt19937_64& rng, bool out_bias = false,
                                     Activation act = Activation::none) {
  require(m >= 1 && n >= 1, "dense layer needs positive sizes");
  DenseDacParams p{he_normal({n, m}, m, rng), Tensor({n, m}), std::nullopt, act};
  if (out_bias) p.out_bias = Tensor({n});
  return p;
}

inline Conv2dStdParams make_conv_std(std::size_t L, std::size_t m, std::size_t n, std::mt19937_64& rng,
                                     std::size_t stride = 1, bool bias = false) {
  require(L % 2 == 1, "conv kernel size must be odd");
  Conv2dStdParams p{he_normal({L, L, n, m}, L * L * m, rng), std::nullopt, stride, Padding::same, Activation::none};
  if (bias) p.bias = Tensor({n});
  return p;
}

inline Conv2dDacParams make_conv_dac(std::size_t L, std::size_t m, std::size_t n, std::mt19937_64& rng,
                                     std::size_t stride = 1) {
  require(L % 2 == 1, "conv kernel size must be odd");
  return {he_normal({L, L, n, m}, L * L * m, rng), Tensor({n, m}), std::nullopt, stride, Padding::same,
          Activation::none};
}

inline BatchNormParams make_batchnorm(std::size_t c, bool with_beta = true) {
  BatchNormParams p{Tensor({c}, 1.0), std::nullopt, Tensor({c}), Tensor({c}, 1.0)};
  if (with_beta) p.beta = Tensor({c});
  return p;
}

// ---- graph-level application; parameters are already graph nodes ----

template <class T>
NodeId activate(Graph<T>& g, NodeId x, Activation a) {
  return a == Activation::relu ? ops::relu(g, x) : x;
}

template <class T>
NodeId dense_std(Graph<T>& g, NodeId y, NodeId w, NodeId b, Activation act) {
  return activate(g, ops::linear(g, y, w, std::optional<NodeId>(b)), act);
}

template <class T>
NodeId dense_dac(Graph<T>& g, NodeId y, NodeId w, NodeId bd, std::optional<NodeId> out_bias, Activation act) {
  NodeId z = ops::dense_dac(g, y, w, bd);
  if (out_bias) z = ops::add_channel_bias(g, z, *out_bias);
  return activate(g, z, act);
}

// ---- tensor-level forward passes ----

namespace detail {

inline void check_matrix_input(const Tensor& y, std::size_t m, const char* what) {
  if (y.rank() != 2 || y.dim(1) != m) throw_dims(what, y.shape(), {0, m});
}

}  // namespace detail

inline Tensor dense_std_forward(const DenseStdParams& p, const Tensor& y) {
  if (p.weights.rank() != 2 || p.bias.shape() != Shape{p.weights.dim(0)})
    throw_dims("dense_std params", p.weights.shape(), p.bias.shape());
  detail::check_matrix_input(y, p.inputs(), "dense_std input");
  Graph<double> g;
  NodeId out = dense_std(g, g.constant(y), g.constant(p.weights), g.constant(p.bias), p.out_activation);
  return g.value(out);
}

inline Tensor dense_dac_forward(const DenseDacParams& p, const Tensor& y) {
  if (p.weights.rank() != 2 || p.dac_biases.shape() != p.weights.shape())
    throw_dims("dense_dac params", p.weights.shape(), p.dac_biases.shape());
  detail::check_matrix_input(y, p.inputs(), "dense_dac input");
  Graph<double> g;
  std::optional<NodeId> ob;
  if (p.out_bias) ob = g.constant(*p.out_bias);
  NodeId out = dense_dac(g, g.constant(y), g.constant(p.weights), g.constant(p.dac_biases), ob, p.out_activation);
  return g.value(out);
}

/// Result of evaluating the bare preactivated map as embedding then projection.
struct Factorized {
  Tensor embedding;  // [n, m], row i = relu(b_i + z)
  Tensor output;     // [n], output_i = <w_i, embedding row i>
};

inline Factorized dense_dac_factorized(const DenseDacParams& p, const Tensor& z) {
  require(!p.out_bias && p.out_activation == Activation::none,
          "factorized evaluation applies to the bare map (no output bias or activation)");
  const std::size_t n = p.outputs(), m = p.inputs();
  if (z.shape() != Shape{m}) throw_dims("dense_dac_factorized input", z.shape(), {m});
  Factorized f{Tensor({n, m}), Tensor({n})};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      const double pre = p.dac_biases[i * m + j] + z[j];
      f.embedding[i * m + j] = pre > 0.0 ? pre : 0.0;
    }
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0;
    for (std::size_t j = 0; j < m; ++j) acc += p.weights[i * m + j] * f.embedding[i * m + j];
    f.output[i] = acc;
  }
  return f;
}

inline Tensor conv2d_std_forward(const Conv2dStdParams& p, const Tensor& y) {
  Graph<double> g;
  NodeId z = ops::conv2d(g, g.constant(y), g.constant(p.kernel), p.stride, p.padding);
  if (p.bias) z = ops::add_channel_bias(g, z, g.constant(*p.bias));
  return g.value(activate(g, z, p.out_activation));
}

inline Tensor conv2d_dac_forward(const Conv2dDacParams& p, const Tensor& y) {
  Graph<double> g;
  NodeId z = ops::conv2d_dac(g, g.constant(y), g.constant(p.kernel), g.constant(p.dac_biases), p.stride, p.padding);
  if (p.out_bias) z = ops::add_channel_bias(g, z, g.constant(*p.out_bias));
  return g.value(activate(g, z, p.out_activation));
}

/// Preactivated convolution evaluated without the activation cache: relu is
/// recomputed for every kernel tap. Reference path for checking the cached kernel.
inline Tensor conv2d_dac_forward_uncached(const Conv2dDacParams& p, const Tensor& y) {
  const ops::ConvGeometry geo = ops::conv_geometry(y.shape(), p.kernel.shape(), p.stride, p.padding);
  if (p.dac_biases.shape() != Shape{geo.n, geo.m}) throw_dims("conv_dac biases", p.dac_biases.shape(), {geo.n, geo.m});
  Tensor out({geo.batch, geo.ho, geo.wo, geo.n});
  const auto H = static_cast<std::ptrdiff_t>(geo.h), W = static_cast<std::ptrdiff_t>(geo.w);
  for (std::size_t b = 0; b < geo.batch; ++b)
    for (std::size_t oh = 0; oh < geo.ho; ++oh)
      for (std::size_t ow = 0; ow < geo.wo; ++ow)
        for (std::size_t i = 0; i < geo.n; ++i) {
          double acc = 0;
          for (std::size_t a = 0; a < geo.L; ++a)
            for (std::size_t c = 0; c < geo.L; ++c)
              for (std::size_t j = 0; j < geo.m; ++j) {
                const auto ih = static_cast<std::ptrdiff_t>(oh * geo.stride + a) - static_cast<std::ptrdiff_t>(geo.pad);
                const auto iw = static_cast<std::ptrdiff_t>(ow * geo.stride + c) - static_cast<std::ptrdiff_t>(geo.pad);
                const double yv = (ih >= 0 && iw >= 0 && ih < H && iw < W)
                                      ? y[((b * geo.h + static_cast<std::size_t>(ih)) * geo.w + static_cast<std::size_t>(iw)) * geo.m + j]
                                      : 0.0;
                const double pre = p.dac_biases[i * geo.m + j] + yv;
                acc += p.kernel[((a * geo.L + c) * geo.n + i) * geo.m + j] * (pre > 0.0 ? pre : 0.0);
              }
          if (p.out_bias) acc += (*p.out_bias)[i];
          if (p.out_activation == Activation::relu && acc < 0.0) acc = 0.0;
          out[((b * geo.ho + oh) * geo.wo + ow) * geo.n + i] = acc;
        }
  return out;
}

inline Tensor batchnorm_forward(BatchNormParams& p, const Tensor& y, bool training) {
  Graph<double> g;
  std::optional<NodeId> beta;
  if (p.beta) beta = g.constant(*p.beta);
  NodeId out;
  if (training) {
    std::vector<double> mu, var;
    out = ops::batchnorm_train(g, g.constant(y), g.constant(p.gamma), beta, p.epsilon, &mu, &var);
    for (std::size_t c = 0; c < mu.size(); ++c) {
      p.running_mean[c] = p.momentum * p.running_mean[c] + (1.0 - p.momentum) * mu[c];
      p.running_var[c] = p.momentum * p.running_var[c] + (1.0 - p.momentum) * var[c];
    }
  } else {
    out = ops::batchnorm_infer(g, g.constant(y), g.constant(p.gamma), beta, p.running_mean.storage(),
                               p.running_var.storage(), p.epsilon);
  }
  return g.value(out);
}

}  // namespace dacnet::layers
