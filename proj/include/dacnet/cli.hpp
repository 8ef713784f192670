#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dacnet/approximator.hpp"
#include "dacnet/complexity.hpp"
#include "dacnet/datasets.hpp"
#include "dacnet/equivalence.hpp"
#include "dacnet/parallel.hpp"
#include "dacnet/resnet.hpp"
#include "dacnet/serialize.hpp"
#include "dacnet/stats.hpp"
#include "dacnet/training.hpp"

namespace dacnet::cli {

using nlohmann::json;

// Stable exit-code contract.
inline constexpr int exit_ok = 0;
inline constexpr int exit_usage = 2;
inline constexpr int exit_unmet = 3;
inline constexpr int exit_failure = 4;

/// Bad flag value found after parsing; maps to exit_usage.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Common {
  bool json = false;
  std::size_t threads = 0;
  std::optional<std::uint64_t> seed;
};

/// --seed, else DACNET_SEED, else nothing.
inline std::optional<std::uint64_t> seed_override(const Common& c) {
  if (c.seed) return c.seed;
  if (const char* env = std::getenv("DACNET_SEED"); env && *env) {
    std::size_t used = 0;
    std::uint64_t v = 0;
    try {
      v = std::stoull(env, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || env[used] != '\0') throw UsageError(std::string("DACNET_SEED is not an integer: ") + env);
    return v;
  }
  return std::nullopt;
}

inline std::uint64_t resolve_seed(const Common& c) { return seed_override(c).value_or(1); }

/// "80x80x3" -> {80, 80, 3}; "16" -> {16}.
inline Shape parse_shape(const std::string& s) {
  Shape out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, 'x')) {
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(part, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != part.size() || v == 0) throw UsageError("bad shape '" + s + "', expected e.g. 32x32x3");
    out.push_back(v);
  }
  if (out.empty()) throw UsageError("empty shape");
  return out;
}

// ---- hand constructions ----

/// The square separator: DAC layer with unit weights, biases 1 (first unit)
/// and 0 (second unit), followed by g(y) = y1 - 2 y2 - 1.
inline NetworkSpec square_construction() {
  NetworkSpec net;
  net.input_shape = {2};
  net.add("f", layers::DenseDacParams{Tensor({2, 2}, 1.0), Tensor({2, 2}, std::vector<double>{1, 1, 0, 0}),
                                      std::nullopt, layers::Activation::none});
  net.add("g", layers::DenseStdParams{Tensor({1, 2}, std::vector<double>{1, -2}), Tensor({1}, -1.0)});
  return net;
}

/// One DAC unit that separates the middle point of the three-point set: the
/// first coordinate is shifted so only the right two points pass the filter.
inline NetworkSpec three_point_construction() {
  NetworkSpec net;
  net.input_shape = {2};
  net.add("f", layers::DenseDacParams{Tensor({1, 2}, std::vector<double>{-20, 10}),
                                      Tensor({1, 2}, std::vector<double>{-1.0 / 3, 0}), Tensor({1}, -5.5),
                                      layers::Activation::none});
  return net;
}

// ---- model presets ----

namespace detail {

inline std::optional<std::pair<std::size_t, std::size_t>> parse_mxn(const std::string& s) {
  const auto x = s.find('x');
  if (x == std::string::npos) return std::nullopt;
  try {
    std::size_t a = 0, b = 0;
    const auto m = std::stoull(s.substr(0, x), &a);
    const auto n = std::stoull(s.substr(x + 1), &b);
    if (a != x || b != s.size() - x - 1 || m == 0 || n == 0) return std::nullopt;
    return std::pair<std::size_t, std::size_t>{m, n};
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

inline std::optional<std::size_t> parse_count(const std::string& s) {
  try {
    std::size_t used = 0;
    const auto v = std::stoull(s, &used);
    if (used != s.size() || v == 0) return std::nullopt;
    return v;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

}  // namespace detail

inline const char* preset_help =
    "resnet<depth>[-v1|-v2][-dac], dense-std-MxN, dense-dac-MxN, mlp-std-H, mlp-dac-H, square-dac, three-point-dac";

/// What a preset needs to know about its data.
struct PresetContext {
  std::optional<Shape> input;  // per-sample shape
  std::size_t classes = 10;
  std::uint64_t seed = 1;
};

/// Builds a named preset, or nullopt when the name is not a preset.
inline std::optional<NetworkSpec> make_preset(const std::string& name, const PresetContext& ctx) {
  std::mt19937_64 rng(ctx.seed);
  if (auto rc = resnet::parse_preset(name)) {
    rc->input_shape = ctx.input.value_or(Shape{32, 32, 3});
    rc->num_classes = ctx.classes;
    rc->seed = ctx.seed;
    return resnet::build_resnet(*rc);
  }
  if (name == "square-dac") return square_construction();
  if (name == "three-point-dac") return three_point_construction();
  for (const bool dac : {false, true}) {
    const std::string dense = dac ? "dense-dac-" : "dense-std-";
    const std::string mlp = dac ? "mlp-dac-" : "mlp-std-";
    if (name.rfind(dense, 0) == 0) {
      const auto mn = detail::parse_mxn(name.substr(dense.size()));
      if (!mn) throw UsageError("bad dense preset '" + name + "', expected e.g. " + dense + "64x10");
      if (ctx.input && *ctx.input != Shape{mn->first})
        throw DimensionError("preset " + name + " takes inputs [" + std::to_string(mn->first) + "], got " +
                             shape_str(*ctx.input));
      NetworkSpec net;
      net.input_shape = {mn->first};
      if (dac)
        net.add("dense", layers::make_dense_dac(mn->first, mn->second, rng, true));
      else
        net.add("dense", layers::make_dense_std(mn->first, mn->second, rng));
      return net;
    }
    if (name.rfind(mlp, 0) == 0) {
      const auto h = detail::parse_count(name.substr(mlp.size()));
      if (!h) throw UsageError("bad mlp preset '" + name + "', expected e.g. " + mlp + "8");
      if (!ctx.input || ctx.input->size() != 1)
        throw DimensionError("preset " + name + " needs vector inputs, e.g. --input-shape 2");
      NetworkSpec net;
      net.input_shape = *ctx.input;
      const std::size_t d = (*ctx.input)[0];
      if (dac)
        net.add("hidden", layers::make_dense_dac(d, *h, rng, true));
      else
        net.add("hidden", layers::make_dense_std(d, *h, rng, layers::Activation::relu));
      net.add("head", layers::make_dense_std(*h, ctx.classes, rng));
      return net;
    }
  }
  return std::nullopt;
}

inline bool is_image_preset(const std::string& name) { return resnet::parse_preset(name).has_value(); }

inline bool is_preset_name(const std::string& name) {
  if (is_image_preset(name) || name == "square-dac" || name == "three-point-dac") return true;
  for (const char* p : {"dense-std-", "dense-dac-", "mlp-std-", "mlp-dac-"})
    if (name.rfind(p, 0) == 0) return true;
  return false;
}

/// A preset name or a path to a saved NetworkSpec.
inline NetworkSpec resolve_model(const std::string& name, const PresetContext& ctx) {
  if (auto p = make_preset(name, ctx)) return *p;
  if (std::filesystem::is_regular_file(name)) return io::load(name);
  throw UsageError("unknown model '" + name + "': not a file and not a preset (" + preset_help + ")");
}

// ---- datasets ----

/// Side of the constant-plane images used when a 2-D toy set feeds an image model.
inline constexpr std::size_t vector_embed_side = 4;

namespace detail {

/// Positional train/val/test split for i.i.d. generated samples.
inline void split_positional(data::Dataset& ds, std::size_t val, std::size_t test) {
  const std::size_t n = ds.size();
  ds.split = {};
  for (std::size_t i = 0; i < n; ++i) {
    auto& part = i < n - val - test ? ds.split.train : i < n - test ? ds.split.val : ds.split.test;
    part.push_back(i);
  }
}

}  // namespace detail

inline const char* data_help =
    "synthetic:square, synthetic:three-point, synthetic:blobs, synthetic:patterns, a CIFAR batch .bin file or a "
    "CIFAR directory";

/// Loads --data. Synthetic sets split 80/10/10 except the three-point set,
/// which is training-only.
inline data::Dataset resolve_data(const std::string& spec, std::uint64_t seed) {
  const std::string pre = "synthetic:";
  if (spec.rfind(pre, 0) == 0) {
    const std::string name = spec.substr(pre.size());
    data::Dataset ds;
    if (name == "square")
      ds = data::gen_square_dataset(1250, seed);
    else if (name == "three-point")
      return data::gen_three_point_dataset();
    else if (name == "blobs")
      ds = data::gen_blobs(750, 3, 2, seed);
    else if (name == "patterns")
      ds = data::gen_pattern_images(2500, 10, 32, 32, 3, seed);
    else
      throw UsageError("unknown synthetic dataset '" + name + "' (" + data_help + ")");
    detail::split_positional(ds, ds.size() / 10, ds.size() / 10);
    return ds;
  }
  const std::filesystem::path p(spec);
  if (std::filesystem::is_directory(p)) {
    const bool c100 = std::filesystem::exists(p / "train.bin");
    return data::load_cifar_dir(p, c100 ? data::CifarVariant::cifar100 : data::CifarVariant::cifar10, 5, 0, seed);
  }
  if (std::filesystem::is_regular_file(p)) return data::load_cifar10_bin(p);
  throw UsageError("cannot find data '" + spec + "' (" + data_help + ")");
}

/// Training defaults before --config overrides. Full CIFAR runs use the
/// standard 80k-iteration recipe; synthetic sets get short schedules.
inline training::TrainConfig default_config(const std::string& data_spec, bool image_model) {
  training::TrainConfig c;
  if (data_spec.rfind("synthetic:", 0) != 0) {
    c.augmentation = training::Augmentation::pad_crop_flip;
    return c;
  }
  if (data_spec == "synthetic:patterns") {
    c.total_iters = 2000;
    c.batch_size = 8;
    c.base_lr = 0.02;
    c.lr_boundaries = {1200, 1700};
    return c;
  }
  if (image_model) {
    c.total_iters = 600;
    c.batch_size = 32;
    c.base_lr = 0.05;
    c.lr_boundaries = {360, 480};
    c.l2_kernel = 1e-4;
    return c;
  }
  c.total_iters = 2000;
  c.batch_size = 16;
  c.base_lr = 0.02;
  c.lr_boundaries = {1200, 1700};
  c.l2_kernel = 0;
  return c;
}

/// --config is a JSON file or an inline JSON object.
inline training::TrainConfig read_config(const std::string& arg, const training::TrainConfig& base) {
  if (arg.empty()) return base;
  std::string text;
  if (std::filesystem::is_regular_file(arg)) {
    std::ifstream in(arg);
    if (!in) throw IoError("cannot read " + arg);
    std::ostringstream ss;
    ss << in.rdbuf();
    text = ss.str();
  } else if (arg.find('{') != std::string::npos) {
    text = arg;
  } else {
    throw UsageError("--config '" + arg + "' is neither a file nor a JSON object");
  }
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("config is not valid JSON: ") + e.what());
  }
  // A new length without explicit boundaries keeps the schedule's proportions.
  training::TrainConfig start = base;
  if (j.is_object() && j.contains("total_iters") && !j.contains("lr_boundaries") &&
      j["total_iters"].is_number_unsigned() && j["total_iters"].get<std::size_t>() > 0)
    start = base.scaled_to(j["total_iters"].get<std::size_t>());
  return training::config_from_json(j, start);
}

namespace detail {

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p);
  if (!out) throw IoError("cannot write " + p.string());
  out << s;
  if (!out) throw IoError("write failed for " + p.string());
}

inline std::string fmt(double v, const char* f = "%.6g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

}  // namespace detail

// ---- train ----

struct TrainArgs {
  std::string model;
  std::string data;
  std::string config;
  std::string out;
  std::size_t replicates = 1;
  bool verbose = false;
};

inline int cmd_train(const TrainArgs& a, const Common& common, std::ostream& out, std::ostream& err) {
  if (a.replicates == 0) throw UsageError("--replicates must be at least 1");
  // Image models read 2-D toy sets as constant-plane images.
  Shape file_input;
  const bool preset_image = is_image_preset(a.model);
  if (!is_preset_name(a.model) && std::filesystem::is_regular_file(a.model))
    file_input = io::load(a.model).input_shape;
  const bool wants_image = preset_image || file_input.size() == 3;
  const auto cfg0 = read_config(a.config, default_config(a.data, wants_image));
  cfg0.validate();
  const std::uint64_t seed = seed_override(common).value_or(cfg0.seed);

  data::Dataset ds = resolve_data(a.data, seed);
  if (wants_image && ds.x.rank() == 2) {
    const bool sized = file_input.size() == 3;
    ds = data::embed_as_images(ds, sized ? file_input[0] : vector_embed_side, sized ? file_input[1] : vector_embed_side);
  }
  if (a.replicates >= 2) {
    if (ds.split.val.empty() || ds.split.test.empty())
      throw UsageError("--replicates needs a dataset with validation and test splits");
    const std::size_t per_epoch = (ds.split.train.size() + cfg0.batch_size - 1) / cfg0.batch_size;
    const std::size_t epochs = (cfg0.total_iters + per_epoch - 1) / per_epoch;
    if (epochs < 2 * stats::window_half + 1)
      throw UsageError("--replicates needs at least 5 epochs, the config gives " + std::to_string(epochs));
  }
  if (a.out.empty()) throw UsageError("--out is required");
  const std::filesystem::path dir(a.out);
  std::filesystem::create_directories(dir);

  json reps = json::array();
  stats::Matrix val, test;
  std::ostringstream text;
  text << "model: " << a.model << "\ndata: " << a.data << " (" << ds.split.train.size() << " train, "
       << ds.split.val.size() << " val, " << ds.split.test.size() << " test)\n";
  for (std::size_t k = 0; k < a.replicates; ++k) {
    auto cfg = cfg0;
    cfg.seed = seed + k;
    const NetworkSpec net = resolve_model(a.model, {ds.sample_shape(), ds.num_classes, cfg.seed});
    const std::string suffix = a.replicates == 1 ? "" : "_" + std::to_string(k + 1);
    training::EpochCallback cb;
    if (a.verbose)
      cb = [&](const training::EpochRecord& r) {
        err << "replicate " << k + 1 << " epoch " << r.epoch << ": loss " << detail::fmt(r.train_loss) << ", train err "
            << detail::fmt(r.train_err) << ", val err " << detail::fmt(r.val_err) << "\n";
      };
    const auto res = training::train(net, ds, cfg, cb);
    detail::write_text(dir / ("history" + suffix + ".csv"), training::history_csv(res.history));
    io::save(res.final_spec, dir / ("model" + suffix + ".json"));

    const double tr = training::spec_error(res.final_spec, ds, ds.split.train);
    const double va = training::spec_error(res.final_spec, ds, ds.split.val);
    const double te = training::spec_error(res.final_spec, ds, ds.split.test);
    std::vector<double> v, t;
    for (const auto& r : res.history) {
      v.push_back(r.val_err);
      t.push_back(r.test_err);
    }
    val.push_back(std::move(v));
    test.push_back(std::move(t));
    reps.push_back({{"seed", cfg.seed},
                    {"epochs", res.history.size()},
                    {"iterations", res.iterations},
                    {"seconds", res.seconds},
                    {"final_train_err", tr},
                    {"final_val_err", va},
                    {"final_test_err", te}});
    text << "replicate " << k + 1 << ": train err " << detail::fmt(tr) << ", val err " << detail::fmt(va)
         << ", test err " << detail::fmt(te) << " after " << res.history.size() << " epochs ("
         << detail::fmt(res.seconds, "%.1f") << " s)\n";
  }

  json summary{{"model", a.model},
               {"data", a.data},
               {"config", training::config_to_json(cfg0)},
               {"replicates", reps},
               {"final_train_err", reps[0]["final_train_err"]}};
  if (a.replicates >= 2) {
    const auto est = stats::early_stop_estimate(val, test);
    const double se = std::sqrt(est.var_bound);
    summary["early_stop"] = {{"m", est.m},
                             {"t_bar", est.t_bar},
                             {"var_bound", est.var_bound},
                             {"stderr", se},
                             {"sigma_sq_est", est.sigma_sq_est},
                             {"tau_term_est", est.tau_term_est}};
    text << "early stopping: m = " << est.m << ", T_bar = " << detail::fmt(est.t_bar)
         << ", stderr = " << detail::fmt(se) << "\n";
  }
  detail::write_text(dir / "summary.json", summary.dump(2) + "\n");
  detail::write_text(dir / "summary.txt", text.str());
  out << (common.json ? summary.dump() + "\n" : text.str());
  return exit_ok;
}

// ---- approx ----

struct ApproxArgs {
  int dim = 1;
  std::string fn;
  double epsilon = 0;
  std::string emit;
  std::string certificate;
  std::size_t mesh_cap = 0;
};

/// Reads rows x_1..x_d,value; a non-numeric first line is taken as a header.
inline approx::Fn read_function_csv(const std::filesystem::path& p, int d) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot read " + p.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    bool numeric = true;
    while (std::getline(ss, cell, ',')) {
      std::size_t used = 0;
      try {
        row.push_back(std::stod(cell, &used));
      } catch (const std::exception&) {
        used = 0;
      }
      while (used < cell.size() && std::isspace(static_cast<unsigned char>(cell[used]))) ++used;
      if (used == 0 || used != cell.size()) numeric = false;
    }
    if (!numeric) {
      if (rows.empty() && no == 1) continue;
      throw FormatError(p.string() + ":" + std::to_string(no) + ": non-numeric cell");
    }
    rows.push_back(std::move(row));
  }
  return approx::tabulated_function(std::move(rows), d);
}

inline int cmd_approx(const ApproxArgs& a, const Common& common, std::ostream& out, std::ostream& err) {
  if (!(a.epsilon > 0)) throw UsageError("--epsilon must be > 0");
  if (a.dim < 1) throw UsageError("--dim must be at least 1");
  approx::Fn f;
  if (auto named = approx::named_function(a.fn))
    f = *named;
  else if (std::filesystem::is_regular_file(a.fn))
    f = read_function_csv(a.fn, a.dim);
  else
    throw UsageError("unknown function '" + a.fn +
                     "' (sin_pi, product, const, identity, abs_sum, gaussian, or a CSV of x_1..x_d,value rows)");

  approx::SelectOptions opt;
  opt.mesh_cap = a.mesh_cap;
  const auto sel = approx::select_params(f, a.dim, a.epsilon, opt);
  if (!sel.ok) {
    err << "epsilon " << a.epsilon << " not reachable within caps\n" << sel.diagnostic << "\n";
    if (common.json)
      out << json{{"ok", false}, {"best_sup_error", sel.measured}, {"diagnostic", sel.diagnostic}}.dump() << "\n";
    return exit_unmet;
  }
  const NetworkSpec net = approx::approx_nd(f, a.dim, sel.delta, sel.mesh);
  approx::Certificate c;
  c.d = a.dim;
  c.delta = sel.delta;
  c.mesh = sel.mesh;
  c.k = 1;
  for (int i = 0; i < a.dim; ++i) c.k *= sel.mesh;
  c.widths = approx::layer_widths(net);
  c.grid = approx::default_grid(a.dim);
  c.sup_error = approx::sup_error(net, f, a.dim, c.grid);
  c.epsilon = a.epsilon;
  const bool ok = c.sup_error < a.epsilon;
  const auto fan = approx::max_fan_in(net);
  std::ostringstream cert;
  cert << "function: " << a.fn << "\n" << c.text() << "max_fan_in: [";
  for (std::size_t i = 0; i < fan.size(); ++i) cert << (i ? ", " : "") << fan[i];
  cert << "]\nstatus: " << (ok ? "certified" : "not certified") << "\n";

  if (!a.emit.empty()) {
    io::save(net, a.emit);
    std::filesystem::path cp = a.certificate;
    if (cp.empty()) cp = std::filesystem::path(a.emit).replace_extension(".cert.txt");
    detail::write_text(cp, cert.str());
  } else if (!a.certificate.empty()) {
    detail::write_text(a.certificate, cert.str());
  }
  if (common.json)
    out << json{{"ok", ok},      {"function", a.fn},    {"d", c.d},         {"delta", c.delta},
                {"k", c.k},      {"mesh", c.mesh},      {"widths", c.widths}, {"max_fan_in", fan},
                {"sup_error", c.sup_error}, {"grid", c.grid}, {"epsilon", c.epsilon}}
               .dump()
        << "\n";
  else
    out << cert.str();
  return ok ? exit_ok : exit_unmet;
}

// ---- flops ----

struct FlopsArgs {
  std::string model;
  std::string input_shape;
  std::size_t classes = 10;
};

inline int cmd_flops(const FlopsArgs& a, const Common& common, std::ostream& out, std::ostream&) {
  std::optional<Shape> input;
  if (!a.input_shape.empty()) input = parse_shape(a.input_shape);
  const NetworkSpec net = resolve_model(a.model, {input, a.classes, resolve_seed(common)});
  const auto rep = complexity::model_report(net, input.value_or(net.input_shape));
  json j = rep.json();
  j["model"] = a.model;
  j["input_shape"] = input.value_or(net.input_shape);
  if (common.json)
    out << j.dump() << "\n";
  else
    out << "model: " << a.model << "\ninput: " << shape_str(input.value_or(net.input_shape)) << "\n"
        << rep.text() << j.dump() << "\n";
  return exit_ok;
}

// ---- equiv ----

struct EquivArgs {
  std::size_t layers = 3;
  std::size_t width = 8;
  std::size_t samples = 100;
};

inline constexpr double equiv_tolerance = 1e-12;

inline int cmd_equiv(const EquivArgs& a, const Common& common, std::ostream& out, std::ostream&) {
  if (a.layers < 1 || a.width < 1 || a.samples < 1) throw UsageError("--layers, --width and --samples must be >= 1");
  std::mt19937_64 rng(resolve_seed(common));
  const auto chain = equiv::random_standard_chain(std::vector<std::size_t>(a.layers + 1, a.width), rng);
  const auto shared = equiv::standard_to_preactivated_shared(chain);
  const auto dac = equiv::shared_as_dac(shared);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  Tensor x({a.samples, a.width});
  for (auto& v : x.storage()) v = u(rng);
  const Tensor ys = equiv::evaluate(chain, x), yp = equiv::evaluate(shared, x), yd = equiv::evaluate(dac, x);
  double dev_shared = 0, dev_dac = 0;
  for (std::size_t i = 0; i < ys.size(); ++i) {
    dev_shared = std::max(dev_shared, std::abs(ys.storage()[i] - yp.storage()[i]));
    dev_dac = std::max(dev_dac, std::abs(ys.storage()[i] - yd.storage()[i]));
  }
  const double dev = std::max(dev_shared, dev_dac);
  const bool ok = dev <= equiv_tolerance;
  if (common.json)
    out << json{{"ok", ok},
                {"layers", a.layers},
                {"width", a.width},
                {"samples", a.samples},
                {"max_abs_deviation", dev},
                {"shared_deviation", dev_shared},
                {"dac_deviation", dev_dac}}
               .dump()
        << "\n";
  else
    out << "chain: " << a.layers << " layers of width " << a.width << ", " << a.samples << " inputs\n"
        << "preactivated shared-bias deviation: " << detail::fmt(dev_shared, "%.3e") << "\n"
        << "per-edge form deviation: " << detail::fmt(dev_dac, "%.3e") << "\n"
        << "max_abs_deviation: " << detail::fmt(dev, "%.3e") << "\n";
  return ok ? exit_ok : exit_unmet;
}

// ---- demos ----

struct DemoArgs {
  std::string which;
  bool train = false;
  std::size_t samples = 1000;
};

/// Why no line separates the three-point set: the middle point is a convex
/// combination of the outer two, so every affine score at it lies between
/// theirs.
struct LinearCertificate {
  double t = 0;         // middle = t * first + (1 - t) * last
  double residual = 0;  // distance of the middle point from that combination
  bool inseparable = false;
  double best_grid_accuracy = 0;  // best affine classifier found by sweeping directions and offsets
};

inline LinearCertificate three_point_certificate(const data::Dataset& ds) {
  const auto& s = ds.x.storage();
  const double ax = s[0], ay = s[1], bx = s[2], by = s[3], cx = s[4], cy = s[5];
  LinearCertificate c;
  const double dx = ax - cx, dy = ay - cy;
  c.t = ((bx - cx) * dx + (by - cy) * dy) / (dx * dx + dy * dy);
  c.residual = std::hypot(bx - (c.t * ax + (1 - c.t) * cx), by - (c.t * ay + (1 - c.t) * cy));
  c.inseparable = c.residual < 1e-12 && c.t > 0 && c.t < 1 && ds.labels[0] == ds.labels[2] &&
                  ds.labels[1] != ds.labels[0];
  const double pi = std::acos(-1.0);
  for (int k = 0; k < 360; ++k) {
    const double wx = std::cos(pi * k / 180), wy = std::sin(pi * k / 180);
    for (int o = -200; o <= 200; ++o) {
      std::size_t hit = 0;
      for (std::size_t i = 0; i < 3; ++i) hit += (wx * s[2 * i] + wy * s[2 * i + 1] + o / 100.0 > 0) == (ds.labels[i] == 1);
      c.best_grid_accuracy = std::max(c.best_grid_accuracy, hit / 3.0);
    }
  }
  return c;
}

namespace detail {

inline training::TrainConfig demo_config(std::size_t iters, std::size_t batch, double lr,
                                         std::vector<std::size_t> boundaries, std::uint64_t seed) {
  training::TrainConfig c;
  c.total_iters = iters;
  c.batch_size = batch;
  c.base_lr = lr;
  c.lr_boundaries = std::move(boundaries);
  c.l2_kernel = 0;
  c.seed = seed;
  return c;
}

/// `per` noisy copies of every sample, for training tiny point sets.
inline data::Dataset jittered_copies(const data::Dataset& ds, std::size_t per, double sd, std::uint64_t seed) {
  const std::size_t n = ds.size(), d = ds.sample_size();
  data::Dataset out = ds;
  out.x = Tensor({n * per, d});
  out.labels.clear();
  out.split = {};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, sd);
  for (std::size_t i = 0; i < n * per; ++i) {
    for (std::size_t k = 0; k < d; ++k) out.x.storage()[i * d + k] = ds.x.storage()[(i % n) * d + k] + nd(rng);
    out.labels.push_back(ds.labels[i % n]);
    out.split.train.push_back(i);
  }
  return out;
}

inline NetworkSpec demo_dac_head(std::size_t hidden, std::uint64_t seed) {
  return *make_preset("mlp-dac-" + std::to_string(hidden), {Shape{2}, 2, seed});
}

}  // namespace detail

inline int demo_square(const DemoArgs& a, const Common& common, std::ostream& out) {
  const std::uint64_t seed = resolve_seed(common);
  json j{{"demo", "square"}};
  std::ostringstream o;
  bool ok = true;
  if (!a.train) {
    const NetworkSpec net = square_construction();
    const Tensor probe = evaluate(net, Tensor({2, 2}, std::vector<double>{0, 0, 1, 1}));
    const double g00 = probe.storage()[0], g11 = probe.storage()[1];
    const auto ds = data::gen_square_dataset(a.samples, seed);
    const Tensor g = evaluate(net, ds.x);
    std::size_t good = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const double v = g.storage()[i];
      const double a0 = ds.x.storage()[2 * i], a1 = ds.x.storage()[2 * i + 1];
      const double closed = 1 - std::abs(a0) - std::abs(a1);
      // positive inside, negative outside, and the closed form inside
      good += ds.labels[i] == 1 ? v > 0 && std::abs(v - closed) < 1e-12 : v < 0;
    }
    ok = std::abs(g00 - 1) < 1e-12 && std::abs(g11 + 1) < 1e-12 && good == ds.size();
    j.update({{"g_f_origin", g00}, {"g_f_one_one", g11}, {"samples", ds.size()}, {"correct", good}});
    o << "g(f(0,0)) = " << detail::fmt(g00) << "\n"
      << "g(f(1,1)) = " << detail::fmt(g11) << "\n"
      << "samples correctly signed: " << good << " / " << ds.size() << "\n";
  } else {
    const auto ds = data::gen_square_dataset(a.samples, seed);
    const auto held = data::gen_square_dataset(a.samples, seed + 1000003);
    const auto r = training::train(detail::demo_dac_head(8, seed), ds,
                                   detail::demo_config(2000, 16, 0.02, {1200, 1700}, seed));
    const double tr = 1 - training::spec_error(r.final_spec, ds, ds.split.train);
    const double ho = 1 - training::spec_error(r.final_spec, held, held.split.train);
    ok = tr == 1.0 && ho == 1.0;
    j.update({{"model", "mlp-dac-8"}, {"train_accuracy", tr}, {"held_out_accuracy", ho}});
    o << "trained mlp-dac-8 for " << r.iterations << " iterations\n"
      << "train accuracy: " << detail::fmt(100 * tr) << "%\n"
      << "held-out accuracy: " << detail::fmt(100 * ho) << "%\n";
  }
  j["ok"] = ok;
  out << (common.json ? j.dump() + "\n" : o.str());
  return ok ? exit_ok : exit_unmet;
}

inline int demo_three_point(const DemoArgs& a, const Common& common, std::ostream& out) {
  const auto ds = data::gen_three_point_dataset();
  const auto cert = three_point_certificate(ds);
  json j{{"demo", "three-point"},
         {"linear",
          {{"inseparable", cert.inseparable},
           {"t", cert.t},
           {"residual", cert.residual},
           {"best_grid_accuracy", cert.best_grid_accuracy}}}};
  std::ostringstream o;
  o << "linear probe: middle point = " << detail::fmt(cert.t) << " * first + " << detail::fmt(1 - cert.t)
    << " * last (residual " << detail::fmt(cert.residual, "%.1e") << ")\n"
    << "linear probe: " << (cert.inseparable ? "inseparable" : "not certified")
    << " (best swept affine classifier " << detail::fmt(100 * cert.best_grid_accuracy, "%.1f") << "%)\n";
  bool ok = cert.inseparable;
  if (!a.train) {
    const Tensor s = evaluate(three_point_construction(), ds.x);
    std::size_t good = 0;
    json scores = json::array();
    for (std::size_t i = 0; i < 3; ++i) {
      const double v = s.storage()[i];
      good += (v > 0) == (ds.labels[i] == 1);
      scores.push_back(v);
      o << "point " << i + 1 << " label " << ds.labels[i] << ": dac score " << detail::fmt(v) << "\n";
    }
    ok = ok && good == 3;
    j["dac"] = {{"scores", scores}, {"separates", good == 3}};
    o << "dac single layer: " << (good == 3 ? "separates" : "fails") << "\n";
  } else {
    // From zero DAC biases every filter passes all three (positive) points, so
    // the layer starts linear and SGD sits at the linear optimum. Training on
    // centered, jittered copies gives the kinks something to cross.
    const std::uint64_t seed = resolve_seed(common);
    data::Dataset cloud = detail::jittered_copies(ds, 50, 0.02, seed);
    data::normalize_by_train(cloud);
    data::Dataset eval = ds;
    for (std::size_t i = 0; i < eval.x.size(); ++i) eval.x.storage()[i] -= cloud.channel_mean[i % 2];
    const auto r = training::train(detail::demo_dac_head(32, seed), cloud,
                                   detail::demo_config(1000, 16, 0.02, {}, seed));
    const double acc = 1 - training::spec_error(r.final_spec, eval, eval.split.train);
    ok = ok && acc == 1.0;
    j["dac"] = {{"model", "mlp-dac-32"}, {"accuracy", acc}};
    o << "trained mlp-dac-32 for " << r.iterations << " iterations: accuracy on the three points "
      << detail::fmt(100 * acc) << "%\n";
  }
  j["ok"] = ok;
  out << (common.json ? j.dump() + "\n" : o.str());
  return ok ? exit_ok : exit_unmet;
}

inline int cmd_demo(const DemoArgs& a, const Common& common, std::ostream& out, std::ostream&) {
  if (a.samples == 0) throw UsageError("--samples must be at least 1");
  if (a.which == "square") return demo_square(a, common, out);
  if (a.which == "three-point") return demo_three_point(a, common, out);
  throw UsageError("unknown demo '" + a.which + "' (three-point, square)");
}

// ---- entry point ----

inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"DAC network toolkit", "dacnet"};
  app.require_subcommand(1, 1);
  app.fallthrough();
  Common common;
  app.add_flag("--json", common.json, "Machine-readable output");
  app.add_option("--threads", common.threads, "Worker thread cap for batch evaluation (0 = all cores)");
  app.add_option("--seed", common.seed, "Random seed (falls back to DACNET_SEED, then 1)");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a model and write history, model spec and summary");
  train->add_option("--model", ta.model, std::string("Preset or NetworkSpec file: ") + preset_help)->required();
  train->add_option("--data", ta.data, std::string("Dataset: ") + data_help)->required();
  train->add_option("--config", ta.config, "TrainConfig JSON file or inline object");
  train->add_option("--out", ta.out, "Output directory")->required();
  train->add_option("--replicates", ta.replicates, "Independent runs; 5 enables the early-stopping summary");
  train->add_flag("--verbose", ta.verbose, "Per-epoch progress on stderr");

  ApproxArgs aa;
  auto* apx = app.add_subcommand("approx", "Build a certified spike-sum approximation of a function");
  apx->add_option("--dim", aa.dim, "Input dimension")->required();
  apx->add_option("--fn", aa.fn, "Named function or CSV table")->required();
  apx->add_option("--epsilon", aa.epsilon, "Target sup error on [-1,1]^d")->required();
  apx->add_option("--emit", aa.emit, "Write the network spec here");
  apx->add_option("--certificate", aa.certificate, "Certificate path (default: next to --emit)");
  apx->add_option("--mesh-cap", aa.mesh_cap, "Largest mesh per axis (0 = default)");

  FlopsArgs fa;
  auto* flops = app.add_subcommand("flops", "FLOPs and weights per layer");
  flops->add_option("--model", fa.model, std::string("Preset or NetworkSpec file: ") + preset_help)->required();
  flops->add_option("--input-shape", fa.input_shape, "Per-sample input, e.g. 80x80x3");
  flops->add_option("--classes", fa.classes, "Output classes for presets");

  EquivArgs ea;
  auto* eq = app.add_subcommand("equiv", "Check the standard to preactivated shared-bias rewrite");
  eq->add_option("--layers", ea.layers, "Chain depth");
  eq->add_option("--width", ea.width, "Units per layer");
  eq->add_option("--samples", ea.samples, "Random inputs");

  DemoArgs da;
  auto* demo = app.add_subcommand("demo", "Toy separability demonstrations");
  demo->add_option("which", da.which, "three-point or square")->required();
  demo->add_flag("--train", da.train, "Train from scratch instead of evaluating the hand construction");
  demo->add_option("--samples", da.samples, "Generated samples for the square demo");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return exit_usage;
  }
  if (common.threads) set_max_threads(common.threads);

  try {
    if (*train) return cmd_train(ta, common, out, err);
    if (*apx) return cmd_approx(aa, common, out, err);
    if (*flops) return cmd_flops(fa, common, out, err);
    if (*eq) return cmd_equiv(ea, common, out, err);
    if (*demo) return cmd_demo(da, common, out, err);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return exit_usage;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
    return exit_usage;
  } catch (const DimensionError& e) {
    err << "error: " << e.what() << "\n";
    return exit_usage;
  } catch (const ContractError& e) {
    err << "error: " << e.what() << "\n";
    return exit_usage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_failure;
  }
  return exit_usage;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return run(std::vector<std::string>(argv + 1, argv + argc), out, err);
}

}  // namespace dacnet::cli
