#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include "json.hpp"

#include "dacnet/error.hpp"
#include "dacnet/network.hpp"

namespace dacnet::io {

using nlohmann::json;

inline constexpr int schema_version = 1;
/// Tensors with more payload bytes than this go to a sidecar blob when saving to disk.
inline constexpr std::size_t inline_limit_bytes = 1 << 20;
inline constexpr char blob_magic[8] = {'D', 'A', 'C', 'B', 'L', 'O', 'B', '1'};

namespace detail {

static_assert(std::endian::native == std::endian::little, "blob format assumes a little-endian host");

inline json nest(const Tensor& t, std::size_t axis, std::size_t& pos) {
  if (axis == t.rank()) return t.storage()[pos++];
  json a = json::array();
  for (std::size_t i = 0; i < t.dim(axis); ++i) a.push_back(nest(t, axis + 1, pos));
  return a;
}

inline void flatten(const json& j, const Shape& shape, std::size_t axis, std::vector<double>& out) {
  if (axis == shape.size()) {
    if (!j.is_number()) throw FormatError("tensor data: expected a number");
    out.push_back(j.get<double>());
    return;
  }
  if (!j.is_array() || j.size() != shape[axis])
    throw FormatError("tensor data does not match shape " + shape_str(shape));
  for (const auto& e : j) flatten(e, shape, axis + 1, out);
}

/// Writes tensors either inline or, above the size limit, into files next to
/// the JSON document.
struct Sink {
  std::filesystem::path dir;
  std::string stem;
  bool allow_blobs = false;
  std::size_t counter = 0;
};

inline void write_blob(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write blob " + path.string());
  f.write(blob_magic, 8);
  const std::uint64_t rank = t.rank();
  f.write(reinterpret_cast<const char*>(&rank), 8);
  for (std::size_t d : t.shape()) {
    const std::uint64_t v = d;
    f.write(reinterpret_cast<const char*>(&v), 8);
  }
  f.write(reinterpret_cast<const char*>(t.storage().data()), static_cast<std::streamsize>(t.size() * 8));
  if (!f) throw IoError("failed writing blob " + path.string());
}

inline Tensor read_blob(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open blob " + path.string());
  char magic[8];
  std::uint64_t rank = 0;
  if (!f.read(magic, 8) || std::memcmp(magic, blob_magic, 8) != 0) throw FormatError("bad blob header in " + path.string());
  if (!f.read(reinterpret_cast<char*>(&rank), 8) || rank > 16) throw FormatError("bad blob rank in " + path.string());
  Shape shape(rank);
  for (auto& d : shape) {
    std::uint64_t v = 0;
    if (!f.read(reinterpret_cast<char*>(&v), 8)) throw FormatError("truncated blob header in " + path.string());
    d = v;
  }
  Tensor t(shape);
  if (!f.read(reinterpret_cast<char*>(t.storage().data()), static_cast<std::streamsize>(t.size() * 8)))
    throw FormatError("truncated blob data in " + path.string());
  return t;
}

inline json tensor_json(const Tensor& t, Sink* sink) {
  if (sink && sink->allow_blobs && t.size() * sizeof(double) > inline_limit_bytes) {
    const std::string name = sink->stem + ".blob" + std::to_string(sink->counter++) + ".bin";
    write_blob(sink->dir / name, t);
    return {{"shape", t.shape()}, {"blob", name}};
  }
  std::size_t pos = 0;
  return {{"shape", t.shape()}, {"data", nest(t, 0, pos)}};
}

inline Tensor tensor_from(const json& j, const std::filesystem::path& dir) {
  if (!j.is_object() || !j.contains("shape")) throw FormatError("tensor entry needs a shape");
  const Shape shape = j.at("shape").get<Shape>();
  if (j.contains("blob")) {
    Tensor t = read_blob(dir / j.at("blob").get<std::string>());
    if (t.shape() != shape) throw FormatError("blob shape " + shape_str(t.shape()) + " differs from " + shape_str(shape));
    return t;
  }
  if (!j.contains("data")) throw FormatError("tensor entry needs data or blob");
  std::vector<double> v;
  flatten(j.at("data"), shape, 0, v);
  return Tensor(shape, std::move(v));
}

inline std::string act_name(layers::Activation a) { return a == layers::Activation::relu ? "relu" : "none"; }
inline layers::Activation act_from(const json& j) {
  const auto s = j.value("activation", std::string("none"));
  if (s == "none") return layers::Activation::none;
  if (s == "relu") return layers::Activation::relu;
  throw FormatError("unknown activation '" + s + "'");
}
inline std::string pad_name(layers::Padding p) { return p == layers::Padding::same ? "same" : "valid"; }
inline layers::Padding pad_from(const json& j) {
  const auto s = j.value("padding", std::string("same"));
  if (s == "same") return layers::Padding::same;
  if (s == "valid") return layers::Padding::valid;
  throw FormatError("unknown padding '" + s + "'");
}

}  // namespace detail

/// Serializes a spec. With a sink that allows blobs, large tensors are written
/// as sidecar files and referenced by name.
inline json to_json(const NetworkSpec& net, detail::Sink* sink = nullptr) {
  json layers_j = json::array();
  for (const auto& ls : net.layers) {
    json j{{"name", ls.name}, {"kind", layer_kind(ls.layer)}};
    json t = json::object();
    auto put = [&](const char* k, const Tensor& v) { t[k] = detail::tensor_json(v, sink); };
    std::visit(
        [&](const auto& p) {
          using P = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<P, layers::DenseStdParams>) {
            put("weights", p.weights);
            put("bias", p.bias);
            j["activation"] = detail::act_name(p.out_activation);
          } else if constexpr (std::is_same_v<P, layers::DenseDacParams>) {
            put("weights", p.weights);
            put("dac_biases", p.dac_biases);
            if (p.out_bias) put("out_bias", *p.out_bias);
            j["activation"] = detail::act_name(p.out_activation);
          } else if constexpr (std::is_same_v<P, layers::SparseDacParams>) {
            j["inputs"] = p.index.inputs;
            j["unit_ptr"] = p.index.unit_ptr;
            j["src"] = p.index.src;
            put("weights", p.weights);
            put("dac_biases", p.dac_biases);
            if (p.out_bias) put("out_bias", *p.out_bias);
            j["activation"] = detail::act_name(p.out_activation);
          } else if constexpr (std::is_same_v<P, layers::Conv2dStdParams>) {
            put("kernel", p.kernel);
            if (p.bias) put("bias", *p.bias);
            j["stride"] = p.stride;
            j["padding"] = detail::pad_name(p.padding);
            j["activation"] = detail::act_name(p.out_activation);
          } else if constexpr (std::is_same_v<P, layers::Conv2dDacParams>) {
            put("kernel", p.kernel);
            put("dac_biases", p.dac_biases);
            if (p.out_bias) put("out_bias", *p.out_bias);
            j["stride"] = p.stride;
            j["padding"] = detail::pad_name(p.padding);
            j["activation"] = detail::act_name(p.out_activation);
          } else if constexpr (std::is_same_v<P, layers::BatchNormParams>) {
            put("gamma", p.gamma);
            if (p.beta) put("beta", *p.beta);
            put("running_mean", p.running_mean);
            put("running_var", p.running_var);
            j["epsilon"] = p.epsilon;
            j["momentum"] = p.momentum;
          } else if constexpr (std::is_same_v<P, BiasLayer>) {
            put("bias", p.bias);
          }
        },
        ls.layer);
    if (!t.empty()) j["tensors"] = std::move(t);
    layers_j.push_back(std::move(j));
  }
  return {{"version", net.version}, {"input_shape", net.input_shape}, {"layers", std::move(layers_j)}};
}

/// Parses a spec; blob references resolve relative to dir.
inline NetworkSpec from_json(const json& doc, const std::filesystem::path& dir = ".") {
  try {
    NetworkSpec net;
    net.version = doc.at("version").get<int>();
    if (net.version != schema_version) throw FormatError("unsupported spec version " + std::to_string(net.version));
    net.input_shape = doc.value("input_shape", Shape{});
    for (const auto& j : doc.at("layers")) {
      const std::string kind = j.at("kind").get<std::string>();
      const std::string name = j.value("name", kind);
      const json& t = j.contains("tensors") ? j.at("tensors") : json::object();
      auto req = [&](const char* k) {
        if (!t.contains(k)) throw FormatError("layer '" + name + "' is missing tensor '" + k + "'");
        return detail::tensor_from(t.at(k), dir);
      };
      auto opt = [&](const char* k) -> std::optional<Tensor> {
        if (!t.contains(k)) return std::nullopt;
        return detail::tensor_from(t.at(k), dir);
      };
      Layer layer;
      if (kind == "dense_std") {
        layer = layers::DenseStdParams{req("weights"), req("bias"), detail::act_from(j)};
      } else if (kind == "dense_dac") {
        layer = layers::DenseDacParams{req("weights"), req("dac_biases"), opt("out_bias"), detail::act_from(j)};
      } else if (kind == "dense_dac_sparse") {
        ops::SparseIndex idx{j.at("unit_ptr").get<std::vector<std::size_t>>(),
                             j.at("src").get<std::vector<std::size_t>>(), j.at("inputs").get<std::size_t>()};
        idx.validate();
        layer = layers::SparseDacParams{std::move(idx), req("weights"), req("dac_biases"), opt("out_bias"),
                                        detail::act_from(j)};
      } else if (kind == "conv_std") {
        layer = layers::Conv2dStdParams{req("kernel"), opt("bias"), j.value("stride", std::size_t{1}),
                                        detail::pad_from(j), detail::act_from(j)};
      } else if (kind == "conv_dac") {
        layer = layers::Conv2dDacParams{req("kernel"),       req("dac_biases"), opt("out_bias"),
                                        j.value("stride", std::size_t{1}), detail::pad_from(j), detail::act_from(j)};
      } else if (kind == "batchnorm") {
        layer = layers::BatchNormParams{req("gamma"), opt("beta"), req("running_mean"), req("running_var"),
                                        j.value("epsilon", 1e-3), j.value("momentum", 0.9)};
      } else if (kind == "relu") {
        layer = ReluLayer{};
      } else if (kind == "bias") {
        layer = BiasLayer{req("bias")};
      } else if (kind == "gap") {
        layer = GapLayer{};
      } else if (kind == "residual_begin") {
        layer = ResidualBegin{};
      } else if (kind == "residual_end") {
        layer = ResidualEnd{};
      } else {
        throw FormatError("unknown layer kind '" + kind + "'");
      }
      net.add(name, std::move(layer));
    }
    return net;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed network spec: ") + e.what());
  }
}

inline std::string dump(const NetworkSpec& net) { return to_json(net).dump(); }
inline NetworkSpec parse(const std::string& text) {
  try {
    return from_json(json::parse(text));
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("invalid JSON: ") + e.what());
  }
}

/// Writes path (JSON) plus sidecar blobs path.blobN.bin for large tensors.
inline void save(const NetworkSpec& net, const std::filesystem::path& path) {
  detail::Sink sink{path.parent_path().empty() ? std::filesystem::path(".") : path.parent_path(),
                    path.filename().string(), true};
  const json doc = to_json(net, &sink);
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << doc.dump(1) << "\n";
  if (!f) throw IoError("failed writing " + path.string());
}

inline NetworkSpec load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path.string());
  json doc;
  try {
    doc = json::parse(f);
  } catch (const json::parse_error& e) {
    throw FormatError("invalid JSON in " + path.string() + ": " + e.what());
  }
  return from_json(doc, path.parent_path().empty() ? std::filesystem::path(".") : path.parent_path());
}

}  // namespace dacnet::io
