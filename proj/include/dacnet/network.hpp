#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

#include "dacnet/error.hpp"
#include "dacnet/graph.hpp"
#include "dacnet/layers.hpp"
#include "dacnet/ops.hpp"
#include "dacnet/tensor.hpp"

namespace dacnet {

struct ReluLayer {
  bool operator==(const ReluLayer&) const = default;
};
/// Per-channel additive bias on the last axis.
struct BiasLayer {
  Tensor bias;
  bool operator==(const BiasLayer&) const = default;
};
struct GapLayer {
  bool operator==(const GapLayer&) const = default;
};
/// Marks the tensor that the matching ResidualEnd adds back.
struct ResidualBegin {
  bool operator==(const ResidualBegin&) const = default;
};
struct ResidualEnd {
  bool operator==(const ResidualEnd&) const = default;
};

using Layer = std::variant<layers::DenseStdParams, layers::DenseDacParams, layers::SparseDacParams,
                           layers::Conv2dStdParams, layers::Conv2dDacParams, layers::BatchNormParams, ReluLayer,
                           BiasLayer, GapLayer, ResidualBegin, ResidualEnd>;

inline std::string layer_kind(const Layer& l) {
  static const char* names[] = {"dense_std", "dense_dac", "dense_dac_sparse", "conv_std", "conv_dac", "batchnorm",
                                "relu",      "bias",      "gap",              "residual_begin", "residual_end"};
  return names[l.index()];
}

struct LayerSpec {
  std::string name;
  Layer layer;
  bool operator==(const LayerSpec&) const = default;
};

/// Serializable network description: an ordered list of layers applied to a
/// per-sample input shape (batch axis excluded).
struct NetworkSpec {
  int version = 1;
  Shape input_shape;
  std::vector<LayerSpec> layers;
  bool operator==(const NetworkSpec&) const = default;

  template <class L>
  NetworkSpec& add(std::string name, L layer) {
    layers.push_back({std::move(name), Layer(std::move(layer))});
    return *this;
  }
};

// ---- shape tracing ----

namespace detail {

inline Shape conv_out_shape(const Shape& in, const Tensor& kernel, std::size_t stride, ops::Padding pad) {
  if (in.size() != 3) throw DimensionError("conv layer expects [H,W,C] input, got " + shape_str(in));
  const auto geo = ops::conv_geometry({1, in[0], in[1], in[2]}, kernel.shape(), stride, pad);
  return {geo.ho, geo.wo, geo.n};
}

inline void expect_vector(const Shape& in, std::size_t m, const char* what) {
  if (in.size() != 1 || in[0] != m) throw_dims(what, in, {m});
}

}  // namespace detail

/// Output shape of every layer (per sample) for the given input shape.
inline std::vector<Shape> trace_shapes(const NetworkSpec& net, Shape input) {
  std::vector<Shape> out;
  std::vector<Shape> stack;
  Shape cur = std::move(input);
  for (const auto& ls : net.layers) {
    std::visit(
        [&](const auto& p) {
          using P = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<P, layers::DenseStdParams> || std::is_same_v<P, layers::DenseDacParams> ||
                        std::is_same_v<P, layers::SparseDacParams>) {
            detail::expect_vector(cur, p.inputs(), "dense layer input");
            cur = {p.outputs()};
          } else if constexpr (std::is_same_v<P, layers::Conv2dStdParams> ||
                               std::is_same_v<P, layers::Conv2dDacParams>) {
            cur = detail::conv_out_shape(cur, p.kernel, p.stride, p.padding);
          } else if constexpr (std::is_same_v<P, layers::BatchNormParams>) {
            if (cur.empty() || cur.back() != p.channels()) throw_dims("batchnorm input", cur, {p.channels()});
          } else if constexpr (std::is_same_v<P, BiasLayer>) {
            if (cur.empty() || cur.back() != p.bias.size()) throw_dims("bias input", cur, p.bias.shape());
          } else if constexpr (std::is_same_v<P, GapLayer>) {
            if (cur.size() != 3) throw DimensionError("gap expects [H,W,C] input, got " + shape_str(cur));
            cur = {cur[2]};
          } else if constexpr (std::is_same_v<P, ResidualBegin>) {
            stack.push_back(cur);
          } else if constexpr (std::is_same_v<P, ResidualEnd>) {
            if (stack.empty()) throw ContractError("residual_end without residual_begin");
            const Shape s = stack.back();
            stack.pop_back();
            bool ok = s == cur;
            if (!ok && s.size() == 3 && cur.size() == 3 && cur[0] > 0) {
              const std::size_t step = (s[0] + cur[0] - 1) / cur[0];
              ok = (s[0] + step - 1) / step == cur[0] && (s[1] + step - 1) / step == cur[1] && s[2] <= cur[2];
            }
            if (!ok) throw_dims("residual join", cur, s);
          }
        },
        ls.layer);
    out.push_back(cur);
  }
  if (!stack.empty()) throw ContractError("unclosed residual_begin");
  return out;
}

// ---- parameterized interpreter ----

enum class ParamKind { kernel, dac_bias, bias, gamma, beta };

inline const char* param_kind_name(ParamKind k) {
  switch (k) {
    case ParamKind::kernel: return "kernel";
    case ParamKind::dac_bias: return "dac_bias";
    case ParamKind::bias: return "bias";
    case ParamKind::gamma: return "gamma";
    case ParamKind::beta: return "beta";
  }
  return "?";
}

/// Evaluates a NetworkSpec on Graph<T>. Owns a working copy of the parameters
/// (cast to T) and batch-norm running statistics.
template <class T>
class Model {
 public:
  struct Param {
    std::size_t layer;
    std::string name;
    ParamKind kind;
    BasicTensor<T> value;
  };

  /// Per-layer instrumented FLOP counts from the last forward that requested them.
  struct LayerFlops {
    std::string name;
    std::string kind;
    std::uint64_t flops;
  };

  explicit Model(NetworkSpec spec) : spec_(std::move(spec)) {
    for (std::size_t li = 0; li < spec_.layers.size(); ++li) {
      auto& ls = spec_.layers[li];
      std::vector<std::size_t> slots;
      auto addp = [&](const Tensor& t, const char* nm, ParamKind k) {
        slots.push_back(params_.size());
        params_.push_back({li, ls.name + "." + nm, k, t.template cast<T>()});
      };
      std::visit(
          [&](const auto& p) {
            using P = std::decay_t<decltype(p)>;
            if constexpr (std::is_same_v<P, layers::DenseStdParams>) {
              addp(p.weights, "weights", ParamKind::kernel);
              addp(p.bias, "bias", ParamKind::bias);
            } else if constexpr (std::is_same_v<P, layers::DenseDacParams> ||
                                 std::is_same_v<P, layers::SparseDacParams>) {
              addp(p.weights, "weights", ParamKind::kernel);
              addp(p.dac_biases, "dac_biases", ParamKind::dac_bias);
              if (p.out_bias) addp(*p.out_bias, "out_bias", ParamKind::bias);
            } else if constexpr (std::is_same_v<P, layers::Conv2dStdParams>) {
              addp(p.kernel, "kernel", ParamKind::kernel);
              if (p.bias) addp(*p.bias, "bias", ParamKind::bias);
            } else if constexpr (std::is_same_v<P, layers::Conv2dDacParams>) {
              addp(p.kernel, "kernel", ParamKind::kernel);
              addp(p.dac_biases, "dac_biases", ParamKind::dac_bias);
              if (p.out_bias) addp(*p.out_bias, "out_bias", ParamKind::bias);
            } else if constexpr (std::is_same_v<P, layers::BatchNormParams>) {
              addp(p.gamma, "gamma", ParamKind::gamma);
              if (p.beta) addp(*p.beta, "beta", ParamKind::beta);
              bn_.push_back({li, to_vec(p.running_mean), to_vec(p.running_var)});
            } else if constexpr (std::is_same_v<P, BiasLayer>) {
              addp(p.bias, "bias", ParamKind::bias);
            }
          },
          ls.layer);
      slots_.push_back(std::move(slots));
    }
  }

  const NetworkSpec& spec() const { return spec_; }
  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  /// Records the forward pass of a batch. x has shape [batch, input_shape...].
  /// param_nodes receives the graph node of each parameter, in params() order.
  NodeId forward(Graph<T>& g, NodeId x, bool training, std::vector<NodeId>* param_nodes = nullptr,
                 std::vector<LayerFlops>* flops = nullptr) {
    std::vector<NodeId> pn(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) pn[i] = g.parameter(params_[i].value, params_[i].name);
    if (param_nodes) *param_nodes = pn;
    return forward_with(g, x, training, pn, flops);
  }

  /// Forward pass reading parameter i from node pn[i] instead of recording new leaves.
  NodeId forward_with(Graph<T>& g, NodeId x, bool training, const std::vector<NodeId>& pn,
                      std::vector<LayerFlops>* flops = nullptr) {
    if (pn.size() != params_.size()) throw ContractError("parameter node count mismatch");
    FlopCounter* saved = g.flops;
    std::vector<NodeId> stack;
    std::size_t bn_index = 0;
    NodeId cur = x;
    for (std::size_t li = 0; li < spec_.layers.size(); ++li) {
      const auto& ls = spec_.layers[li];
      const auto& sl = slots_[li];
      FlopCounter fc;
      if (flops) g.flops = &fc;
      std::visit(
          [&](const auto& p) {
            using P = std::decay_t<decltype(p)>;
            if constexpr (std::is_same_v<P, layers::DenseStdParams>) {
              cur = layers::dense_std(g, cur, pn[sl[0]], pn[sl[1]], p.out_activation);
            } else if constexpr (std::is_same_v<P, layers::DenseDacParams>) {
              std::optional<NodeId> ob;
              if (p.out_bias) ob = pn[sl[2]];
              cur = layers::dense_dac(g, cur, pn[sl[0]], pn[sl[1]], ob, p.out_activation);
            } else if constexpr (std::is_same_v<P, layers::SparseDacParams>) {
              NodeId z = ops::sparse_dac(g, cur, pn[sl[0]], pn[sl[1]], p.index);
              if (p.out_bias) z = ops::add_channel_bias(g, z, pn[sl[2]]);
              cur = layers::activate(g, z, p.out_activation);
            } else if constexpr (std::is_same_v<P, layers::Conv2dStdParams>) {
              NodeId z = ops::conv2d(g, cur, pn[sl[0]], p.stride, p.padding);
              if (p.bias) z = ops::add_channel_bias(g, z, pn[sl[1]]);
              cur = layers::activate(g, z, p.out_activation);
            } else if constexpr (std::is_same_v<P, layers::Conv2dDacParams>) {
              NodeId z = ops::conv2d_dac(g, cur, pn[sl[0]], pn[sl[1]], p.stride, p.padding);
              if (p.out_bias) z = ops::add_channel_bias(g, z, pn[sl[2]]);
              cur = layers::activate(g, z, p.out_activation);
            } else if constexpr (std::is_same_v<P, layers::BatchNormParams>) {
              auto& st = bn_[bn_index++];
              std::optional<NodeId> beta;
              if (p.beta) beta = pn[sl[1]];
              const T eps = static_cast<T>(p.epsilon);
              if (training) {
                std::vector<T> mu, var;
                cur = ops::batchnorm_train(g, cur, pn[sl[0]], beta, eps, &mu, &var);
                const T mom = static_cast<T>(p.momentum);
                for (std::size_t c = 0; c < mu.size(); ++c) {
                  st.mean[c] = mom * st.mean[c] + (T(1) - mom) * mu[c];
                  st.var[c] = mom * st.var[c] + (T(1) - mom) * var[c];
                }
              } else {
                cur = ops::batchnorm_infer(g, cur, pn[sl[0]], beta, st.mean, st.var, eps);
              }
            } else if constexpr (std::is_same_v<P, ReluLayer>) {
              cur = ops::relu(g, cur);
            } else if constexpr (std::is_same_v<P, BiasLayer>) {
              cur = ops::add_channel_bias(g, cur, pn[sl[0]]);
            } else if constexpr (std::is_same_v<P, GapLayer>) {
              cur = ops::global_avg_pool(g, cur);
            } else if constexpr (std::is_same_v<P, ResidualBegin>) {
              stack.push_back(cur);
            } else if constexpr (std::is_same_v<P, ResidualEnd>) {
              if (stack.empty()) throw ContractError("residual_end without residual_begin");
              NodeId s = stack.back();
              stack.pop_back();
              cur = ops::shortcut_add(g, cur, s);
            }
          },
          ls.layer);
      if (flops) flops->push_back({ls.name, layer_kind(ls.layer), fc.count});
    }
    g.flops = saved;
    if (!stack.empty()) throw ContractError("unclosed residual_begin");
    return cur;
  }

  /// Forward pass outside of training, returning the output tensor.
  BasicTensor<T> predict(const BasicTensor<T>& x) {
    Graph<T> g;
    return g.value(forward(g, g.constant(x), false));
  }

  /// Spec carrying the current parameter values and running statistics.
  NetworkSpec to_spec() const {
    NetworkSpec out = spec_;
    std::size_t bn_index = 0;
    for (std::size_t li = 0; li < out.layers.size(); ++li) {
      const auto& sl = slots_[li];
      auto get = [&](std::size_t k) { return params_[sl[k]].value.template cast<double>(); };
      std::visit(
          [&](auto& p) {
            using P = std::decay_t<decltype(p)>;
            if constexpr (std::is_same_v<P, layers::DenseStdParams>) {
              p.weights = get(0);
              p.bias = get(1);
            } else if constexpr (std::is_same_v<P, layers::DenseDacParams> ||
                                 std::is_same_v<P, layers::SparseDacParams> ||
                                 std::is_same_v<P, layers::Conv2dDacParams>) {
              if constexpr (std::is_same_v<P, layers::Conv2dDacParams>)
                p.kernel = get(0);
              else
                p.weights = get(0);
              p.dac_biases = get(1);
              if (p.out_bias) p.out_bias = get(2);
            } else if constexpr (std::is_same_v<P, layers::Conv2dStdParams>) {
              p.kernel = get(0);
              if (p.bias) p.bias = get(1);
            } else if constexpr (std::is_same_v<P, layers::BatchNormParams>) {
              p.gamma = get(0);
              if (p.beta) p.beta = get(1);
              const auto& st = bn_[bn_index++];
              p.running_mean = from_vec(st.mean);
              p.running_var = from_vec(st.var);
            } else if constexpr (std::is_same_v<P, BiasLayer>) {
              p.bias = get(0);
            }
          },
          out.layers[li].layer);
    }
    return out;
  }

 private:
  struct BnState {
    std::size_t layer;
    std::vector<T> mean;
    std::vector<T> var;
  };

  static std::vector<T> to_vec(const Tensor& t) {
    std::vector<T> v(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) v[i] = static_cast<T>(t[i]);
    return v;
  }
  static Tensor from_vec(const std::vector<T>& v) {
    Tensor t({v.size()});
    for (std::size_t i = 0; i < v.size(); ++i) t[i] = static_cast<double>(v[i]);
    return t;
  }

  NetworkSpec spec_;
  std::vector<Param> params_;
  std::vector<std::vector<std::size_t>> slots_;
  std::vector<BnState> bn_;
};

/// Evaluates a spec in 64-bit arithmetic on a batch.
inline Tensor evaluate(const NetworkSpec& net, const Tensor& x) {
  Model<double> m(net);
  return m.predict(x);
}

}  // namespace dacnet
