#pragma once

#include <cctype>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dacnet/error.hpp"
#include "dacnet/layers.hpp"
#include "dacnet/network.hpp"

namespace dacnet::resnet {

enum class Version { v1, v2 };

struct ResNetConfig {
  Version version = Version::v1;
  int n_blocks_per_stage = 3;
  std::size_t num_classes = 10;
  bool dac = false;
  Shape input_shape{32, 32, 3};
  std::uint64_t seed = 1;
  std::size_t base_filters = 16;

  int depth() const { return 6 * n_blocks_per_stage + 2; }

  void validate() const {
    require(n_blocks_per_stage >= 1, "n_blocks_per_stage must be at least 1");
    require(num_classes >= 1, "num_classes must be at least 1");
    require(base_filters >= 1, "base_filters must be at least 1");
    if (input_shape.size() != 3 || input_shape[0] == 0 || input_shape[1] == 0 || input_shape[2] == 0)
      throw DimensionError("resnet input must be [H,W,C], got " + shape_str(input_shape));
  }
};

namespace detail {

struct Builder {
  NetworkSpec net;
  std::mt19937_64 rng;
  bool dac;

  Builder(const ResNetConfig& cfg) : rng(cfg.seed), dac(cfg.dac) { net.input_shape = cfg.input_shape; }

  // 3x3 convs become preactivated; both forms draw the kernel identically.
  void conv(const std::string& name, std::size_t m, std::size_t n, std::size_t stride) {
    if (dac)
      net.add(name, layers::make_conv_dac(3, m, n, rng, stride));
    else
      net.add(name, layers::make_conv_std(3, m, n, rng, stride));
  }
  void bn(const std::string& name, std::size_t c, bool beta) { net.add(name, layers::make_batchnorm(c, beta)); }
  void relu(const std::string& name) { net.add(name, ReluLayer{}); }
};

inline std::string block_name(int stage, int block) {
  return "s" + std::to_string(stage) + "b" + std::to_string(block);
}

}  // namespace detail

/// CIFAR-style ResNet with identity shortcuts; channel-doubling shortcuts
/// subsample and zero-pad. With cfg.dac the network is built already rewritten
/// (see dacify).
inline NetworkSpec build_resnet(const ResNetConfig& cfg) {
  cfg.validate();
  detail::Builder b(cfg);
  const bool dac = cfg.dac;
  const std::size_t f0 = cfg.base_filters;
  const int n = cfg.n_blocks_per_stage;

  b.conv("stem.conv", cfg.input_shape[2], f0, 1);
  if (cfg.version == Version::v1) {
    b.bn("stem.bn", f0, !dac);
    if (!dac) b.relu("stem.relu");
  }
  std::size_t ch = f0;
  for (int s = 0; s < 3; ++s) {
    const std::size_t out = f0 << s;
    for (int k = 0; k < n; ++k) {
      const std::string nm = detail::block_name(s, k);
      const std::size_t stride = (s > 0 && k == 0) ? 2 : 1;
      b.net.add(nm + ".begin", ResidualBegin{});
      if (cfg.version == Version::v1) {
        b.conv(nm + ".conv1", ch, out, stride);
        b.bn(nm + ".bn1", out, !dac);
        if (!dac) b.relu(nm + ".relu1");
        b.conv(nm + ".conv2", out, out, 1);
        b.bn(nm + ".bn2", out, true);
        b.net.add(nm + ".end", ResidualEnd{});
        if (!dac) b.relu(nm + ".relu2");
      } else {
        b.bn(nm + ".bn1", ch, !dac);
        if (!dac) b.relu(nm + ".relu1");
        b.conv(nm + ".conv1", ch, out, stride);
        b.bn(nm + ".bn2", out, !dac);
        if (!dac) b.relu(nm + ".relu2");
        b.conv(nm + ".conv2", out, out, 1);
        b.net.add(nm + ".end", ResidualEnd{});
      }
      ch = out;
    }
  }
  if (cfg.version == Version::v1) {
    if (dac) {
      b.net.add("final.bias", BiasLayer{Tensor({ch})});
      b.relu("final.relu");
    }
  } else {
    b.bn("final.bn", ch, true);
    b.relu("final.relu");
  }
  b.net.add("gap", GapLayer{});
  b.net.add("head", layers::make_dense_std(ch, cfg.num_classes, b.rng));
  return b.net;
}

namespace detail {

inline bool is_dac_conv(const Layer& l) { return std::holds_alternative<layers::Conv2dDacParams>(l); }

/// Index of the first layer after i that is not one of the skipped kinds.
template <class... Skip>
std::size_t next_non(const NetworkSpec& net, std::size_t i) {
  std::size_t j = i + 1;
  while (j < net.layers.size() && (std::holds_alternative<Skip>(net.layers[j].layer) || ...)) ++j;
  return j;
}

inline void check_recognized(const NetworkSpec& net) {
  auto fail = [](const std::string& why) { throw ContractError("dacify: not a recognized ResNet spec: " + why); };
  const auto& L = net.layers;
  if (L.size() < 4) fail("too few layers");
  if (!std::holds_alternative<layers::Conv2dStdParams>(L.front().layer) &&
      !std::holds_alternative<layers::Conv2dDacParams>(L.front().layer))
    fail("first layer is " + layer_kind(L.front().layer) + ", expected a convolution");
  if (!std::holds_alternative<layers::DenseStdParams>(L.back().layer)) fail("last layer is not a dense head");
  if (!std::holds_alternative<GapLayer>(L[L.size() - 2].layer)) fail("head is not preceded by global pooling");
  std::size_t begins = 0, ends = 0;
  for (const auto& ls : L) {
    begins += std::holds_alternative<ResidualBegin>(ls.layer);
    ends += std::holds_alternative<ResidualEnd>(ls.layer);
    if (const auto* c = std::get_if<layers::Conv2dStdParams>(&ls.layer)) {
      if (c->size() != 3) fail("layer " + ls.name + " is a " + std::to_string(c->size()) + "x" +
                               std::to_string(c->size()) + " convolution");
      if (c->out_activation != layers::Activation::none) fail("layer " + ls.name + " has a fused activation");
    }
  }
  if (begins == 0) fail("no residual blocks");
  if (begins != ends) fail("unbalanced residual blocks");
}

}  // namespace detail

/// Rewrites a standard ResNet spec into its preactivated form:
///  - every 3x3 convolution becomes a preactivated one without output bias or
///    activation (kernel kept, per-edge biases zero);
///  - a relu whose next layer, looking through residual_begin, is such a
///    convolution is removed;
///  - a batch norm feeding such a convolution (through relu or residual_begin)
///    loses its shift;
///  - a post-activated network (residual_end, relu, gap) gets a bias layer
///    before that final relu, standing in for the removed block-output bias.
/// Applying it twice equals applying it once.
inline NetworkSpec dacify(const NetworkSpec& in) {
  detail::check_recognized(in);
  NetworkSpec net = in;
  for (auto& ls : net.layers)
    if (auto* c = std::get_if<layers::Conv2dStdParams>(&ls.layer)) {
      const std::size_t n = c->outputs(), m = c->inputs();
      ls.layer = layers::Conv2dDacParams{c->kernel, Tensor({n, m}), std::nullopt, c->stride, c->padding,
                                         layers::Activation::none};
    }

  // Post-activated tail: residual_end followed directly by relu then gap.
  for (std::size_t i = 0; i + 2 < net.layers.size(); ++i)
    if (std::holds_alternative<ResidualEnd>(net.layers[i].layer) &&
        std::holds_alternative<ReluLayer>(net.layers[i + 1].layer) &&
        std::holds_alternative<GapLayer>(net.layers[i + 2].layer)) {
      const std::size_t ch = std::visit(
          [](const auto& p) -> std::size_t {
            using P = std::decay_t<decltype(p)>;
            if constexpr (std::is_same_v<P, layers::Conv2dDacParams> || std::is_same_v<P, layers::Conv2dStdParams>)
              return p.outputs();
            else if constexpr (std::is_same_v<P, layers::BatchNormParams>)
              return p.channels();
            else
              return 0;
          },
          net.layers[i - 1].layer);
      if (ch == 0) throw ContractError("dacify: cannot infer channel count before " + net.layers[i + 1].name);
      net.layers[i + 1].name = "final.relu";
      net.layers.insert(net.layers.begin() + static_cast<std::ptrdiff_t>(i + 1),
                        LayerSpec{"final.bias", BiasLayer{Tensor({ch})}});
      break;
    }

  std::vector<LayerSpec> kept;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    if (std::holds_alternative<ReluLayer>(net.layers[i].layer)) {
      const std::size_t j = detail::next_non<ResidualBegin>(net, i);
      if (j < net.layers.size() && detail::is_dac_conv(net.layers[j].layer)) continue;
    }
    kept.push_back(net.layers[i]);
  }
  net.layers = std::move(kept);

  for (std::size_t i = 0; i < net.layers.size(); ++i)
    if (auto* bn = std::get_if<layers::BatchNormParams>(&net.layers[i].layer)) {
      const std::size_t j = detail::next_non<ReluLayer, ResidualBegin>(net, i);
      if (j < net.layers.size() && detail::is_dac_conv(net.layers[j].layer)) bn->beta.reset();
    }
  return net;
}

/// Parses preset names resnet<depth>[-v2][-dac], e.g. resnet20, resnet32-v2-dac.
inline std::optional<ResNetConfig> parse_preset(const std::string& name) {
  if (name.rfind("resnet", 0) != 0) return std::nullopt;
  std::string rest = name.substr(6);
  ResNetConfig cfg;
  std::size_t pos = 0;
  while (pos < rest.size() && std::isdigit(static_cast<unsigned char>(rest[pos]))) ++pos;
  if (pos == 0) return std::nullopt;
  const int depth = std::stoi(rest.substr(0, pos));
  if (depth < 8 || (depth - 2) % 6 != 0) return std::nullopt;
  cfg.n_blocks_per_stage = (depth - 2) / 6;
  rest = rest.substr(pos);
  if (rest.rfind("-v2", 0) == 0) {
    cfg.version = Version::v2;
    rest = rest.substr(3);
  } else if (rest.rfind("-v1", 0) == 0) {
    rest = rest.substr(3);
  }
  if (rest == "-dac") {
    cfg.dac = true;
    rest.clear();
  }
  if (!rest.empty()) return std::nullopt;
  return cfg;
}

}  // namespace dacnet::resnet
