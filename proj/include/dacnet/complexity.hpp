#pragma once

#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "dacnet/error.hpp"
#include "dacnet/network.hpp"

namespace dacnet::complexity {

enum class Kind { std, dac };

namespace detail {
inline void positive(std::uint64_t v, const char* what) {
  if (v == 0) throw ContractError(std::string(what) + " must be positive");
}
inline void odd(std::uint64_t L) {
  positive(L, "kernel size");
  if (L % 2 == 0) throw ContractError("kernel size must be odd, got " + std::to_string(L));
}
}  // namespace detail

/// Dense layer m -> n. The +n term is the output bias; drop it with with_bias=false.
inline std::uint64_t flops_dense(Kind k, std::uint64_t m, std::uint64_t n, bool with_bias = true) {
  detail::positive(m, "m");
  detail::positive(n, "n");
  return ((k == Kind::std ? 2 : 3) * m + (with_bias ? 1 : 0)) * n;
}

inline std::uint64_t weights_dense(Kind k, std::uint64_t m, std::uint64_t n, bool with_bias = true) {
  detail::positive(m, "m");
  detail::positive(n, "n");
  return ((k == Kind::std ? 1 : 2) * m + (with_bias ? 1 : 0)) * n;
}

/// L x L convolution m -> n channels producing an s x t map. The preactivated
/// form adds the m n s t cached filter evaluations.
inline std::uint64_t flops_conv(Kind k, std::uint64_t L, std::uint64_t m, std::uint64_t n, std::uint64_t s,
                                std::uint64_t t, bool with_bias = true) {
  detail::odd(L);
  const std::uint64_t base = (2 * L * L * m + (with_bias ? 1 : 0)) * n * s * t;
  return k == Kind::std ? base : m * n * s * t + base;
}

inline std::uint64_t weights_conv(Kind k, std::uint64_t L, std::uint64_t m, std::uint64_t n, bool with_bias = true) {
  detail::odd(L);
  const std::uint64_t b = with_bias ? 1 : 0;
  return k == Kind::std ? (L * L * m + b) * n : (m * (1 + L * L) + b) * n;
}

struct Entry {
  std::string name;
  std::string kind;
  bool covered = false;  // dense or conv layer with a closed-form count
  std::uint64_t flops_formula = 0;
  std::uint64_t flops_instrumented = 0;
  std::uint64_t weights = 0;
  std::uint64_t std_flops = 0;    // formula count of the standard counterpart
  std::uint64_t std_weights = 0;  // weights of the standard counterpart
};

struct Report {
  std::vector<Entry> entries;
  std::uint64_t flops_formula = 0;       // covered layers
  std::uint64_t flops_instrumented = 0;  // covered layers
  std::uint64_t flops_uncovered = 0;     // batch norm, pooling, residual adds, bias layers
  std::uint64_t weights = 0;             // all layers
  double dac_flops_ratio = 1;            // covered flops over the all-standard counterpart
  double dac_weights_ratio = 1;

  std::uint64_t flops_total() const { return flops_instrumented + flops_uncovered; }

  std::string text() const {
    std::ostringstream o;
    o << std::left << std::setw(24) << "layer" << std::setw(18) << "kind" << std::right << std::setw(16)
      << "flops_formula" << std::setw(16) << "flops_instr" << std::setw(12) << "weights" << "\n";
    for (const auto& e : entries) {
      o << std::left << std::setw(24) << e.name << std::setw(18) << e.kind << std::right << std::setw(16)
        << (e.covered ? std::to_string(e.flops_formula) : std::string("-")) << std::setw(16) << e.flops_instrumented
        << std::setw(12) << e.weights << "\n";
    }
    o << "covered flops (formula):      " << flops_formula << "\n"
      << "covered flops (instrumented): " << flops_instrumented << "\n"
      << "uncovered flops:              " << flops_uncovered << "\n"
      << "total flops:                  " << flops_total() << "\n"
      << "weights:                      " << weights << "\n"
      << std::setprecision(6) << "dac overhead flops:           " << dac_flops_ratio << "\n"
      << "dac overhead weights:         " << dac_weights_ratio << "\n";
    return o.str();
  }

  nlohmann::json json() const {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& e : entries) {
      nlohmann::json j{{"name", e.name},
                       {"kind", e.kind},
                       {"flops_instrumented", e.flops_instrumented},
                       {"weights", e.weights}};
      if (e.covered) j["flops_formula"] = e.flops_formula;
      layers.push_back(std::move(j));
    }
    return {{"layers", layers},
            {"totals",
             {{"flops_formula", flops_formula},
              {"flops_instrumented", flops_instrumented},
              {"flops_uncovered", flops_uncovered},
              {"flops_total", flops_total()},
              {"weights", weights}}},
            {"dac_overhead_ratios", {{"flops", dac_flops_ratio}, {"weights", dac_weights_ratio}}}};
  }
};

/// Per-sample counts for the network on inputs of shape `input` (no batch axis).
inline Report model_report(const NetworkSpec& net, const Shape& input) {
  const auto shapes = trace_shapes(net, input);
  Model<double> model(net);
  Shape xs{1};
  xs.insert(xs.end(), input.begin(), input.end());
  Graph<double> g;
  std::vector<Model<double>::LayerFlops> counted;
  model.forward(g, g.constant(Tensor(xs)), false, nullptr, &counted);

  Report r;
  std::uint64_t stdf = 0, stdw = 0;
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    const auto& ls = net.layers[li];
    const Shape& in = li == 0 ? input : shapes[li - 1];
    const Shape& out = shapes[li];
    Entry e;
    e.name = ls.name;
    e.kind = layer_kind(ls.layer);
    e.flops_instrumented = counted[li].flops;
    std::visit(
        [&](const auto& p) {
          using P = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<P, layers::DenseStdParams>) {
            e.covered = true;
            e.flops_formula = e.std_flops = flops_dense(Kind::std, p.inputs(), p.outputs());
            e.weights = e.std_weights = weights_dense(Kind::std, p.inputs(), p.outputs());
          } else if constexpr (std::is_same_v<P, layers::DenseDacParams>) {
            const bool b = p.out_bias.has_value();
            e.covered = true;
            e.flops_formula = flops_dense(Kind::dac, p.inputs(), p.outputs(), b);
            e.weights = weights_dense(Kind::dac, p.inputs(), p.outputs(), b);
            e.std_flops = flops_dense(Kind::std, p.inputs(), p.outputs(), b);
            e.std_weights = weights_dense(Kind::std, p.inputs(), p.outputs(), b);
          } else if constexpr (std::is_same_v<P, layers::SparseDacParams>) {
            const std::uint64_t E = p.index.edges(), n = p.outputs(), b = p.out_bias ? n : 0;
            e.covered = true;
            e.flops_formula = 3 * E + b;
            e.weights = 2 * E + b;
            e.std_flops = 2 * E + b;
            e.std_weights = E + b;
          } else if constexpr (std::is_same_v<P, layers::Conv2dStdParams>) {
            const bool b = p.bias.has_value();
            e.covered = true;
            e.flops_formula = e.std_flops = flops_conv(Kind::std, p.size(), p.inputs(), p.outputs(), out[0], out[1], b);
            e.weights = e.std_weights = weights_conv(Kind::std, p.size(), p.inputs(), p.outputs(), b);
          } else if constexpr (std::is_same_v<P, layers::Conv2dDacParams>) {
            const bool b = p.out_bias.has_value();
            const std::uint64_t L = p.size(), m = p.inputs(), n = p.outputs();
            e.covered = true;
            e.std_flops = flops_conv(Kind::std, L, m, n, out[0], out[1], b);
            // Filter outputs are cached once per input cell; for stride 1 with
            // same padding this is the m n s t term of flops_conv.
            e.flops_formula = m * n * in[0] * in[1] + e.std_flops;
            e.weights = weights_conv(Kind::dac, L, m, n, b);
            e.std_weights = weights_conv(Kind::std, L, m, n, b);
          } else if constexpr (std::is_same_v<P, layers::BatchNormParams>) {
            e.weights = p.gamma.size() + (p.beta ? p.beta->size() : 0);
          } else if constexpr (std::is_same_v<P, BiasLayer>) {
            e.weights = p.bias.size();
          }
        },
        ls.layer);
    if (e.covered) {
      r.flops_formula += e.flops_formula;
      r.flops_instrumented += e.flops_instrumented;
      stdf += e.std_flops;
      stdw += e.std_weights;
    } else {
      r.flops_uncovered += e.flops_instrumented;
    }
    r.weights += e.weights;
    r.entries.push_back(std::move(e));
  }
  std::uint64_t covered_w = 0;
  for (const auto& e : r.entries)
    if (e.covered) covered_w += e.weights;
  if (stdf) r.dac_flops_ratio = double(r.flops_formula) / double(stdf);
  if (stdw) r.dac_weights_ratio = double(covered_w) / double(stdw);
  return r;
}

}  // namespace dacnet::complexity
