#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "dacnet/datasets.hpp"
#include "dacnet/error.hpp"
#include "dacnet/network.hpp"

namespace dacnet::training {

enum class Precision { f32, f64 };
enum class Augmentation { none, pad_crop_flip };

struct TrainConfig {
  double base_lr = 0.1;
  std::vector<std::size_t> lr_boundaries{32000, 48000, 64000};
  double lr_decay = 0.1;
  double momentum = 0.9;
  double l2_kernel = 2e-4;
  std::size_t batch_size = 128;
  std::size_t total_iters = 80000;
  std::uint64_t seed = 1;
  Precision precision = Precision::f64;
  Augmentation augmentation = Augmentation::none;
  /// Evaluate the train split in inference mode after every epoch; otherwise
  /// train_err is the running error of the training-mode forward passes.
  bool eval_train = false;
  std::size_t eval_batch = 256;

  void validate() const {
    require(batch_size >= 1, "batch_size must be at least 1");
    require(total_iters >= 1, "total_iters must be at least 1");
    require(base_lr >= 0 && std::isfinite(base_lr), "base_lr must be finite and non-negative");
    require(momentum >= 0 && momentum < 1, "momentum must be in [0, 1)");
    require(l2_kernel >= 0, "l2_kernel must be non-negative");
    require(lr_decay > 0, "lr_decay must be positive");
    require(eval_batch >= 1, "eval_batch must be at least 1");
    for (std::size_t i = 0; i < lr_boundaries.size(); ++i) {
      require(lr_boundaries[i] < total_iters, "lr boundaries must be below total_iters");
      require(i == 0 || lr_boundaries[i] > lr_boundaries[i - 1], "lr boundaries must be strictly increasing");
    }
  }

  /// The default schedule with every boundary scaled to a shorter run.
  TrainConfig scaled_to(std::size_t iters) const {
    TrainConfig c = *this;
    c.lr_boundaries.clear();
    for (auto b : lr_boundaries) {
      const auto s = static_cast<std::size_t>(double(b) * double(iters) / double(total_iters));
      if (s > 0 && s < iters && (c.lr_boundaries.empty() || s > c.lr_boundaries.back())) c.lr_boundaries.push_back(s);
    }
    c.total_iters = iters;
    return c;
  }
};

inline TrainConfig config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const auto& k = it.key();
      if (k == "base_lr") c.base_lr = it->get<double>();
      else if (k == "lr_boundaries") c.lr_boundaries = it->get<std::vector<std::size_t>>();
      else if (k == "lr_decay") c.lr_decay = it->get<double>();
      else if (k == "momentum") c.momentum = it->get<double>();
      else if (k == "l2_kernel") c.l2_kernel = it->get<double>();
      else if (k == "batch_size") c.batch_size = it->get<std::size_t>();
      else if (k == "total_iters") c.total_iters = it->get<std::size_t>();
      else if (k == "seed") c.seed = it->get<std::uint64_t>();
      else if (k == "eval_train") c.eval_train = it->get<bool>();
      else if (k == "eval_batch") c.eval_batch = it->get<std::size_t>();
      else if (k == "precision") {
        const auto s = it->get<std::string>();
        if (s != "f32" && s != "f64") throw FormatError("precision must be f32 or f64");
        c.precision = s == "f32" ? Precision::f32 : Precision::f64;
      } else if (k == "augmentation") {
        const auto s = it->get<std::string>();
        if (s != "none" && s != "pad_crop_flip") throw FormatError("augmentation must be none or pad_crop_flip");
        c.augmentation = s == "none" ? Augmentation::none : Augmentation::pad_crop_flip;
      } else {
        throw FormatError("unknown training config key '" + k + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad training config: ") + e.what());
  }
  c.validate();
  return c;
}

inline nlohmann::json config_to_json(const TrainConfig& c) {
  return {{"base_lr", c.base_lr},
          {"lr_boundaries", c.lr_boundaries},
          {"lr_decay", c.lr_decay},
          {"momentum", c.momentum},
          {"l2_kernel", c.l2_kernel},
          {"batch_size", c.batch_size},
          {"total_iters", c.total_iters},
          {"seed", c.seed},
          {"precision", c.precision == Precision::f32 ? "f32" : "f64"},
          {"augmentation", c.augmentation == Augmentation::none ? "none" : "pad_crop_flip"},
          {"eval_train", c.eval_train},
          {"eval_batch", c.eval_batch}};
}

/// Step schedule: base_lr times lr_decay per boundary already reached.
inline double lr_at(const TrainConfig& c, std::size_t iter) {
  double lr = c.base_lr;
  for (auto b : c.lr_boundaries)
    if (iter >= b) lr *= c.lr_decay;
  return lr;
}

template <class T>
struct SgdState {
  std::vector<BasicTensor<T>> velocity;
};

/// Momentum SGD, v <- mu v - lr (g + 2 l2 w), w <- w + v, with the L2 term on
/// kernel parameters only.
template <class P, class T>
void sgd_step(std::vector<P>& params, const std::vector<BasicTensor<T>>& grads, SgdState<T>& st, const TrainConfig& c,
              std::size_t iter) {
  if (grads.size() != params.size()) throw DimensionError("gradient count does not match parameter count");
  if (st.velocity.empty())
    for (const auto& p : params) st.velocity.emplace_back(p.value.shape());
  const T lr = static_cast<T>(lr_at(c, iter)), mu = static_cast<T>(c.momentum), l2 = static_cast<T>(2 * c.l2_kernel);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& w = params[i].value.storage();
    const auto& g = grads[i].storage();
    auto& v = st.velocity[i].storage();
    if (g.size() != w.size()) throw_dims("gradient for " + params[i].name, grads[i].shape(), params[i].value.shape());
    const bool decay = params[i].kind == ParamKind::kernel && l2 != T(0);
    for (std::size_t k = 0; k < w.size(); ++k) {
      const T grad = decay ? g[k] + l2 * w[k] : g[k];
      v[k] = mu * v[k] - lr * grad;
      w[k] += v[k];
    }
  }
}

// ---- augmentation ----

inline constexpr std::size_t augment_pad = 4;
inline constexpr double augment_flip_p = 0.5;

inline Tensor flip_horizontal(const Tensor& x) {
  if (x.rank() != 4) throw DimensionError("flip expects [B,H,W,C], got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  Tensor out(x.shape());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx)
        for (std::size_t c = 0; c < C; ++c)
          out.storage()[((b * H + y) * W + xx) * C + c] = x.storage()[((b * H + y) * W + (W - 1 - xx)) * C + c];
  return out;
}

/// Zero-pads by 4, crops a random window of the original size and flips with
/// probability 1/2, independently per sample.
inline Tensor augment(const Tensor& x, std::mt19937_64& rng, Augmentation mode) {
  if (mode == Augmentation::none) return x;
  if (x.rank() != 4) throw DimensionError("augmentation expects [B,H,W,C], got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  std::uniform_int_distribution<int> off(0, 2 * int(augment_pad));
  std::bernoulli_distribution flip(augment_flip_p);
  Tensor out(x.shape());
  for (std::size_t b = 0; b < B; ++b) {
    const int oy = off(rng) - int(augment_pad), ox = off(rng) - int(augment_pad);
    const bool f = flip(rng);
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx) {
        const int sy = int(y) + oy, sx0 = int(f ? W - 1 - xx : xx) + ox;
        if (sy < 0 || sy >= int(H) || sx0 < 0 || sx0 >= int(W)) continue;
        for (std::size_t c = 0; c < C; ++c)
          out.storage()[((b * H + y) * W + xx) * C + c] =
              x.storage()[((b * H + std::size_t(sy)) * W + std::size_t(sx0)) * C + c];
      }
  }
  return out;
}

// ---- training loop ----

struct EpochRecord {
  std::size_t epoch = 0;
  double train_err = 0;
  double val_err = std::numeric_limits<double>::quiet_NaN();
  double test_err = std::numeric_limits<double>::quiet_NaN();
  double train_loss = 0;
  double lr = 0;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  NetworkSpec final_spec;
  std::size_t iterations = 0;
  double seconds = 0;
};

inline std::string history_csv(const std::vector<EpochRecord>& h) {
  std::ostringstream o;
  o << "epoch,train_err,val_err,test_err,train_loss,lr\n";
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return std::string(buf);
  };
  for (const auto& r : h)
    o << r.epoch << "," << num(r.train_err) << "," << num(r.val_err) << "," << num(r.test_err) << ","
      << num(r.train_loss) << "," << num(r.lr) << "\n";
  return o.str();
}

namespace detail {

inline bool regression(const data::Dataset& ds) { return ds.targets.has_value(); }

template <class T>
NodeId loss_node(Graph<T>& g, NodeId out, const data::Dataset& ds, std::span<const std::size_t> idx) {
  if (regression(ds)) return ops::mse(g, out, data::gather(*ds.targets, idx).template cast<T>());
  std::vector<int> labels(idx.size());
  for (std::size_t r = 0; r < idx.size(); ++r) labels[r] = int(ds.labels[idx[r]]);
  return ops::softmax_cross_entropy(g, out, labels);
}

/// Classification error (wrong argmax) or summed squared error for regression.
template <class T>
double batch_errors(const BasicTensor<T>& out, const data::Dataset& ds, std::span<const std::size_t> idx) {
  const std::size_t K = out.dim(1);
  double e = 0;
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (regression(ds)) {
      const double d = double(out.storage()[r]) - ds.targets->storage()[idx[r]];
      e += d * d;
      continue;
    }
    const auto* row = out.storage().data() + r * K;
    e += std::size_t(std::max_element(row, row + K) - row) != ds.labels[idx[r]];
  }
  return e;
}

}  // namespace detail

/// Inference-mode error rate (or mean squared error) of the model on idx.
template <class T>
double evaluate_error(Model<T>& model, const data::Dataset& ds, std::span<const std::size_t> idx,
                      std::size_t batch = 256) {
  if (idx.empty()) return std::numeric_limits<double>::quiet_NaN();
  double e = 0;
  for (std::size_t lo = 0; lo < idx.size(); lo += batch) {
    const auto part = idx.subspan(lo, std::min(batch, idx.size() - lo));
    e += detail::batch_errors(model.predict(data::gather(ds.x, part).template cast<T>()), ds, part);
  }
  return e / double(idx.size());
}

using EpochCallback = std::function<void(const EpochRecord&)>;

template <class T>
TrainResult train_impl(const NetworkSpec& net, const data::Dataset& ds, const TrainConfig& cfg,
                       const EpochCallback& on_epoch) {
  cfg.validate();
  ds.validate();
  if (ds.split.train.empty()) throw ContractError("training split is empty");
  if (net.input_shape != ds.sample_shape())
    throw DimensionError("model input " + shape_str(net.input_shape) + " does not match samples " +
                         shape_str(ds.sample_shape()));
  const auto t0 = std::chrono::steady_clock::now();
  Model<T> model(net);
  SgdState<T> state;
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order = ds.split.train;
  TrainResult res;
  std::size_t it = 0;
  for (std::size_t epoch = 1; it < cfg.total_iters; ++epoch) {
    for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng() % (i + 1)]);
    double loss_sum = 0, err_sum = 0;
    std::size_t batches = 0, seen = 0;
    double lr = 0;
    for (std::size_t lo = 0; lo < order.size() && it < cfg.total_iters; lo += cfg.batch_size, ++it) {
      const std::span<const std::size_t> idx(order.data() + lo, std::min(cfg.batch_size, order.size() - lo));
      Tensor xb = augment(data::gather(ds.x, idx), rng, ds.x.rank() == 4 ? cfg.augmentation : Augmentation::none);
      Graph<T> g;
      std::vector<NodeId> pn;
      const NodeId out = model.forward(g, g.constant(xb.template cast<T>()), true, &pn);
      const NodeId loss = detail::loss_node(g, out, ds, idx);
      const double lv = double(g.value(loss).item());
      if (!std::isfinite(lv)) {
        std::ostringstream m;
        m << "non-finite loss " << lv << " at iteration " << it << " (epoch " << epoch << ", lr " << lr_at(cfg, it)
          << ")";
        throw DivergenceError(m.str());
      }
      g.backward(loss);
      std::vector<BasicTensor<T>> grads;
      grads.reserve(pn.size());
      for (NodeId p : pn) grads.push_back(g.grad(p));
      lr = lr_at(cfg, it);
      sgd_step(model.params(), grads, state, cfg, it);
      loss_sum += lv * double(idx.size());
      err_sum += detail::batch_errors(g.value(out), ds, idx);
      seen += idx.size();
      ++batches;
    }
    EpochRecord r;
    r.epoch = epoch;
    r.train_loss = loss_sum / double(seen);
    r.train_err = cfg.eval_train ? evaluate_error(model, ds, ds.split.train, cfg.eval_batch) : err_sum / double(seen);
    r.val_err = evaluate_error(model, ds, ds.split.val, cfg.eval_batch);
    r.test_err = evaluate_error(model, ds, ds.split.test, cfg.eval_batch);
    r.lr = lr;
    res.history.push_back(r);
    if (on_epoch) on_epoch(r);
  }
  res.iterations = it;
  res.final_spec = model.to_spec();
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

/// Trains a copy of net on ds.split.train; val/test errors are evaluated each epoch.
inline TrainResult train(const NetworkSpec& net, const data::Dataset& ds, const TrainConfig& cfg,
                         const EpochCallback& on_epoch = {}) {
  return cfg.precision == Precision::f32 ? train_impl<float>(net, ds, cfg, on_epoch)
                                         : train_impl<double>(net, ds, cfg, on_epoch);
}

/// Inference-mode error of an untrained or trained spec.
inline double spec_error(const NetworkSpec& net, const data::Dataset& ds, std::span<const std::size_t> idx,
                         std::size_t batch = 256) {
  Model<double> m(net);
  return evaluate_error(m, ds, idx, batch);
}

}  // namespace dacnet::training
