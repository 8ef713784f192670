#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "dacnet/error.hpp"
#include "dacnet/layers.hpp"
#include "dacnet/network.hpp"
#include "dacnet/parallel.hpp"
#include "dacnet/tensor.hpp"

namespace dacnet::approx {

using Fn = std::function<double(std::span<const double>)>;

inline double relu(double v) { return v > 0 ? v : 0.0; }

inline double spike_1d(double x) { return relu(1 - std::abs(x)); }

inline double spike_nd(std::span<const double> x) {
  double s = 0;
  for (double v : x) s += std::abs(v);
  return relu(1 - s);
}

/// Makes the spike integrate to one: 2^-d (d+1)!.
inline double normalization_const(int d) {
  require(d >= 1, "dimension must be at least 1");
  double c = 1;
  for (int i = 2; i <= d + 1; ++i) c *= i;
  return std::ldexp(c, -d);
}

struct SpikeConfig {
  int d = 1;
  double delta = 1;
  std::vector<double> c;

  void validate() const {
    require(d >= 1, "dimension must be at least 1");
    require(delta > 0, "delta must be positive");
    require(c.size() == static_cast<std::size_t>(d), "shift must have one entry per dimension");
  }
};

/// Grid of cell centers and the sampled values used to build an approximant.
struct ApproxPlan {
  int d = 1;
  std::size_t mesh = 1;  // cells per axis
  std::size_t k = 1;     // mesh^d
  double delta = 1;
  double radius = 1;  // half-width of the partitioned cube
  double f0 = 0;      // carried as the output bias
  std::vector<std::vector<double>> centers;
  std::vector<double> values;
};

// ---- sparse layer assembly ----

namespace detail {

struct Edge {
  std::size_t src;
  double bias;
  double weight;
};

inline layers::SparseDacParams make_sparse(std::size_t inputs, const std::vector<std::vector<Edge>>& units,
                                           std::optional<double> out_bias = std::nullopt) {
  layers::SparseDacParams p;
  p.index.inputs = inputs;
  p.index.unit_ptr.push_back(0);
  std::vector<double> w, b;
  for (const auto& u : units) {
    for (const auto& e : u) {
      p.index.src.push_back(e.src);
      b.push_back(e.bias);
      w.push_back(e.weight);
    }
    p.index.unit_ptr.push_back(p.index.src.size());
  }
  const std::size_t E = w.size();
  p.weights = Tensor({E}, std::move(w));
  p.dac_biases = Tensor({E}, std::move(b));
  if (out_bias) p.out_bias = Tensor::vector({*out_bias});
  p.index.validate();
  return p;
}

}  // namespace detail

/// psi_{1,delta}(x) = delta^-2 [relu(x - delta) - 2 relu(x) + relu(x + delta)]
/// as one unit over x read three times.
inline layers::SparseDacParams spike_1d_as_dac(double delta) {
  require(delta > 0, "delta must be positive");
  const double s = 1.0 / (delta * delta);
  return detail::make_sparse(1, {{{0, -delta, s}, {0, 0.0, -2 * s}, {0, delta, s}}});
}

/// One-unit approximant g(x) = sum_j (2/k) f(t_j) psi_{1,delta}(x - t_j) on the
/// midpoints t_j = (2j-1)/k - 1 of [-1, 1].
inline NetworkSpec approx_1d(const std::function<double(double)>& f, double delta, std::size_t k) {
  require(delta > 0, "delta must be positive");
  require(k >= 1, "k must be at least 1");
  std::vector<detail::Edge> u;
  for (std::size_t j = 1; j <= k; ++j) {
    const double t = double(2 * j - 1) / double(k) - 1;
    const double w = 2.0 / double(k) * f(t) / (delta * delta);
    u.push_back({0, -t - delta, w});
    u.push_back({0, -t, -2 * w});
    u.push_back({0, -t + delta, w});
  }
  NetworkSpec net;
  net.input_shape = {1};
  net.add("approx", detail::make_sparse(1, {u}));
  return net;
}

/// Returns a network computing h(lambda x) given one computing h(x), by
/// rescaling only the first layer: w relu(b + lambda x) = lambda w relu(b/lambda + x).
inline NetworkSpec rescale_first_layer(NetworkSpec net, double lambda) {
  require(lambda > 0, "rescaling factor must be positive");
  require(!net.layers.empty(), "empty network");
  std::visit(
      [&](auto& p) {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, layers::SparseDacParams> || std::is_same_v<P, layers::DenseDacParams>) {
          for (auto& v : p.weights.storage()) v *= lambda;
          for (auto& v : p.dac_biases.storage()) v /= lambda;
        } else {
          throw ContractError("first layer must be a preactivated dense layer");
        }
      },
      net.layers.front().layer);
  return net;
}

enum class SpikeScale {
  normalized,  // C_d delta^-d psi_d((x - c)/delta), unit integral
  unit,        // psi_d((x - c)/delta), unit peak
};

/// Sum over centers q of coeff[q] * psi_{d,delta}(x - c_q), plus out_bias, as a
/// d-layer network valid on [-1, 1]^d.
///
/// Built in the scaled variable u = x/delta, then the first layer is rescaled.
/// Coordinates are carried forward as u_j + M with M = max(1, 1/delta), which
/// keeps them non-negative so relu(u_j + M) passes them unchanged. Layer i < d
/// holds two units per center (x_{i+1}+M +/- tau_i) followed by the shared
/// pass-through units for x_{i+1}..x_d.
inline NetworkSpec spike_sum_network(int d, double delta, const std::vector<std::vector<double>>& centers,
                                     const std::vector<double>& coeff, double out_bias = 0,
                                     SpikeScale scaling = SpikeScale::normalized) {
  require(d >= 1, "dimension must be at least 1");
  require(delta > 0, "delta must be positive");
  require(!centers.empty() && centers.size() == coeff.size(), "need one coefficient per center");
  for (const auto& c : centers) require(c.size() == static_cast<std::size_t>(d), "center dimension mismatch");
  using detail::Edge;
  const std::size_t K = centers.size();
  const double M = std::max(1.0, 1.0 / delta);
  const double scale = scaling == SpikeScale::unit ? 1.0 : normalization_const(d) * std::pow(delta, -d);
  auto cs = [&](std::size_t q, int i) { return centers[q][i - 1] / delta; };  // shift in u, 1-based axis

  NetworkSpec net;
  net.input_shape = {static_cast<std::size_t>(d)};

  if (d == 1) {
    std::vector<Edge> u;
    for (std::size_t q = 0; q < K; ++q) {
      const double s = coeff[q] * scale, c = cs(q, 1);
      u.push_back({0, -c - 1, s});
      u.push_back({0, -c, -2 * s});
      u.push_back({0, -c + 1, s});
    }
    net.add("spike_1", detail::make_sparse(1, {u}, out_bias));
    return rescale_first_layer(std::move(net), 1.0 / delta);
  }

  // Output positions of layer i: A_q = 2q, B_q = 2q+1, then pass-through of
  // axis j (j = i+1..d) at 2K + (j - i - 1).
  auto pass_pos = [&](int i, int j) { return 2 * K + static_cast<std::size_t>(j - i - 1); };

  {
    std::vector<std::vector<Edge>> units;
    for (std::size_t q = 0; q < K; ++q) {
      const double c = cs(q, 1);
      for (double sg : {1.0, -1.0})
        units.push_back({{1, M, 1.0}, {0, -c - 1, sg}, {0, -c, -2 * sg}, {0, -c + 1, sg}});
    }
    for (int j = 2; j <= d; ++j) units.push_back({{static_cast<std::size_t>(j - 1), M, 1.0}});
    net.add("spike_1", detail::make_sparse(static_cast<std::size_t>(d), units));
  }
  for (int i = 2; i < d; ++i) {
    std::vector<std::vector<Edge>> units;
    const std::size_t in = 2 * K + static_cast<std::size_t>(d - i + 1);
    for (std::size_t q = 0; q < K; ++q) {
      const double b = -M - cs(q, i);
      for (double sg : {1.0, -1.0})
        units.push_back({{pass_pos(i - 1, i + 1), 0.0, 1.0},
                         {2 * q, b, sg},
                         {pass_pos(i - 1, i), b, -2 * sg},
                         {2 * q + 1, b, sg}});
    }
    for (int j = i + 1; j <= d; ++j) units.push_back({{pass_pos(i - 1, j), 0.0, 1.0}});
    net.add("spike_" + std::to_string(i), detail::make_sparse(in, units));
  }
  {
    std::vector<Edge> u;
    for (std::size_t q = 0; q < K; ++q) {
      const double b = -M - cs(q, d), s = coeff[q] * scale;
      u.push_back({2 * q, b, s});
      u.push_back({pass_pos(d - 1, d), b, -2 * s});
      u.push_back({2 * q + 1, b, s});
    }
    net.add("spike_" + std::to_string(d), detail::make_sparse(2 * K + 1, {u}, out_bias));
  }
  return rescale_first_layer(std::move(net), 1.0 / delta);
}

/// psi_{d,delta}(x - c) on [-1, 1]^d.
inline NetworkSpec spike_nd_deep_network(int d, const std::vector<double>& c, double delta,
                                         SpikeScale scaling = SpikeScale::normalized) {
  SpikeConfig{d, delta, c}.validate();
  return spike_sum_network(d, delta, {c}, {1.0}, 0.0, scaling);
}

/// psi_d(x) = relu(1 - d + sum_j [relu(x_j + 1) - 2 relu(x_j)]) for x in [-1, 1]^d.
inline NetworkSpec spike_nd_shallow_network(int d) {
  require(d >= 1, "dimension must be at least 1");
  using detail::Edge;
  std::vector<Edge> u;
  for (int j = 0; j < d; ++j) {
    u.push_back({static_cast<std::size_t>(j), 1.0, 1.0});
    u.push_back({static_cast<std::size_t>(j), 0.0, -2.0});
  }
  NetworkSpec net;
  net.input_shape = {static_cast<std::size_t>(d)};
  net.add("sum", detail::make_sparse(static_cast<std::size_t>(d), {u}));
  net.add("spike", detail::make_sparse(1, {{{0, 1.0 - d, 1.0}}}));
  return net;
}

/// Units per layer of a network made of sparse layers.
inline std::vector<std::size_t> layer_widths(const NetworkSpec& net) {
  std::vector<std::size_t> w;
  for (const auto& ls : net.layers) {
    const auto* p = std::get_if<layers::SparseDacParams>(&ls.layer);
    require(p != nullptr, "layer_widths expects sparse preactivated layers");
    w.push_back(p->outputs());
  }
  return w;
}

/// Largest number of edges into any unit of each layer.
inline std::vector<std::size_t> max_fan_in(const NetworkSpec& net) {
  std::vector<std::size_t> out;
  for (const auto& ls : net.layers) {
    const auto& p = std::get<layers::SparseDacParams>(ls.layer);
    std::size_t mx = 0;
    for (std::size_t u = 0; u < p.outputs(); ++u)
      mx = std::max(mx, p.index.unit_ptr[u + 1] - p.index.unit_ptr[u]);
    out.push_back(mx);
  }
  return out;
}

/// Builds the plan for approx_nd. The cube [-R, R]^d with R = 1 + delta is cut
/// into mesh^d cells, so every point of [-1, 1]^d sees the full support of its
/// spikes; f is sampled at the nearest point of [-1, 1]^d to each center.
inline ApproxPlan make_plan(const Fn& f, int d, double delta, std::size_t mesh) {
  require(d >= 1, "dimension must be at least 1");
  require(delta > 0, "delta must be positive");
  require(mesh >= 1, "mesh must be at least 1");
  ApproxPlan p;
  p.d = d;
  p.mesh = mesh;
  p.delta = delta;
  p.radius = 1 + delta;
  p.k = 1;
  for (int i = 0; i < d; ++i) p.k *= mesh;
  const double h = 2 * p.radius / double(mesh);
  const std::vector<double> origin(d, 0.0);
  p.f0 = f(origin);
  std::vector<std::size_t> idx(d, 0);
  std::vector<double> c(d), cl(d);
  for (std::size_t q = 0; q < p.k; ++q) {
    for (int a = 0; a < d; ++a) {
      c[a] = -p.radius + (double(idx[a]) + 0.5) * h;
      cl[a] = std::clamp(c[a], -1.0, 1.0);
    }
    p.centers.push_back(c);
    p.values.push_back(f(cl));
    for (int a = d - 1; a >= 0; --a) {
      if (++idx[a] < mesh) break;
      idx[a] = 0;
    }
  }
  return p;
}

/// g(x) = f0 + sum_c h^d (f(c) - f0) psi_{d,delta}(x - c): a Riemann sum of the
/// convolution of f with the spike, with the constant part moved to the output
/// bias so constants are reproduced exactly.
inline NetworkSpec approx_nd(const ApproxPlan& p) {
  const double vol = std::pow(2 * p.radius / double(p.mesh), p.d);
  std::vector<double> coeff(p.k);
  for (std::size_t q = 0; q < p.k; ++q) coeff[q] = vol * (p.values[q] - p.f0);
  return spike_sum_network(p.d, p.delta, p.centers, coeff, p.f0);
}

inline NetworkSpec approx_nd(const Fn& f, int d, double delta, std::size_t mesh) {
  return approx_nd(make_plan(f, d, delta, mesh));
}

// ---- evaluation ----

namespace detail {

/// Direct per-point evaluator for chains of sparse preactivated layers.
class SparseChain {
 public:
  explicit SparseChain(const NetworkSpec& net) {
    for (const auto& ls : net.layers) {
      const auto* p = std::get_if<layers::SparseDacParams>(&ls.layer);
      if (!p) {
        ok_ = false;
        return;
      }
      layers_.push_back(p);
    }
  }
  bool ok() const { return ok_ && !layers_.empty(); }

  double operator()(std::span<const double> x, std::vector<double>& a, std::vector<double>& b) const {
    a.assign(x.begin(), x.end());
    for (const auto* p : layers_) {
      if (a.size() != p->inputs()) throw_dims("sparse chain input", Shape{a.size()}, Shape{p->inputs()});
      b.assign(p->outputs(), 0.0);
      const auto& ix = p->index;
      for (std::size_t u = 0; u < b.size(); ++u) {
        double s = 0;
        for (std::size_t e = ix.unit_ptr[u]; e < ix.unit_ptr[u + 1]; ++e)
          s += p->weights[e] * relu(p->dac_biases[e] + a[ix.src[e]]);
        if (p->out_bias) s += (*p->out_bias)[u];
        if (p->out_activation == layers::Activation::relu) s = relu(s);
        b[u] = s;
      }
      std::swap(a, b);
    }
    require(a.size() == 1, "approximant must have a single output");
    return a[0];
  }

 private:
  std::vector<const layers::SparseDacParams*> layers_;
  bool ok_ = true;
};

}  // namespace detail

/// Evaluates a scalar-output network on rows of points [N, d].
inline std::vector<double> evaluate_points(const NetworkSpec& net, const std::vector<std::vector<double>>& pts) {
  std::vector<double> out(pts.size());
  detail::SparseChain chain(net);
  if (chain.ok()) {
    parallel_chunks(pts.size(), 256, [&](std::size_t lo, std::size_t hi) {
      std::vector<double> a, b;
      for (std::size_t i = lo; i < hi; ++i) out[i] = chain(pts[i], a, b);
    });
    return out;
  }
  if (pts.empty()) return out;
  const std::size_t d = pts[0].size();
  Tensor x({pts.size(), d});
  for (std::size_t i = 0; i < pts.size(); ++i) std::copy(pts[i].begin(), pts[i].end(), x.storage().begin() + i * d);
  const Tensor y = evaluate(net, x);
  require(y.size() == pts.size(), "approximant must have a single output");
  return std::vector<double>(y.data().begin(), y.data().end());
}

/// Uniform grid over [-1, 1]^d with `per_axis` points per axis, endpoints included.
inline std::vector<std::vector<double>> grid_points(int d, std::size_t per_axis) {
  require(per_axis >= 2, "grid needs at least two points per axis");
  std::size_t total = 1;
  for (int i = 0; i < d; ++i) total *= per_axis;
  std::vector<std::vector<double>> pts;
  pts.reserve(total);
  std::vector<std::size_t> idx(d, 0);
  for (std::size_t q = 0; q < total; ++q) {
    std::vector<double> x(d);
    for (int a = 0; a < d; ++a) x[a] = -1.0 + 2.0 * double(idx[a]) / double(per_axis - 1);
    pts.push_back(std::move(x));
    for (int a = d - 1; a >= 0; --a) {
      if (++idx[a] < per_axis) break;
      idx[a] = 0;
    }
  }
  return pts;
}

/// Default certificate grid: 1001 points for d=1, 201^2 for d=2, 41^3 for d=3.
inline std::size_t default_grid(int d) {
  switch (d) {
    case 1: return 1001;
    case 2: return 201;
    case 3: return 41;
    default: return 11;
  }
}

inline double sup_error(const NetworkSpec& net, const Fn& f, int d, std::size_t grid) {
  const auto pts = grid_points(d, grid);
  const auto g = evaluate_points(net, pts);
  double e = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) e = std::max(e, std::abs(f(pts[i]) - g[i]));
  return e;
}

/// Probe estimate of the modulus of continuity: largest change of f when a
/// probe-grid point moves by t along any of the 3^d - 1 sign directions.
inline double modulus_estimate(const Fn& f, int d, double t, std::size_t probe) {
  const auto pts = grid_points(d, probe);
  std::size_t dirs = 1;
  for (int i = 0; i < d; ++i) dirs *= 3;
  double w = 0;
  std::vector<double> y(d);
  for (const auto& p : pts) {
    const double fp = f(p);
    for (std::size_t code = 0; code < dirs; ++code) {
      std::size_t c = code;
      bool zero = true;
      for (int a = 0; a < d; ++a) {
        const int s = int(c % 3) - 1;
        c /= 3;
        zero = zero && s == 0;
        y[a] = std::clamp(p[a] + s * t, -1.0, 1.0);
      }
      if (!zero) w = std::max(w, std::abs(f(y) - fp));
    }
  }
  return w;
}

struct SelectOptions {
  std::size_t mesh_cap = 0;      // 0 picks the per-dimension default
  std::size_t grid = 0;          // validation grid per axis; 0 picks default_grid(d)
  std::size_t probe = 0;         // modulus probe grid per axis; 0 picks a default
  int max_halvings = 20;
};

inline std::size_t default_mesh_cap(int d) {
  switch (d) {
    case 1: return 512;
    case 2: return 64;
    case 3: return 16;
    default: return 4;
  }
}

struct Selection {
  bool ok = false;
  double delta = 0;
  std::size_t mesh = 0;
  double measured = INFINITY;  // sup error of the returned pair on the validation grid
  double modulus_delta = 0;    // delta implied by the modulus rule
  std::string diagnostic;
};

/// Chooses (delta, mesh) for approx_nd. delta starts at the largest power of
/// two with omega(delta d) < eps/2; mesh doubles from 1 until the measured sup
/// error is below eps. When the mesh cap is hit first, delta is doubled (up to
/// 1) and the mesh search repeated, since a wider spike needs a coarser mesh.
inline Selection select_params(const Fn& f, int d, double eps, SelectOptions opt = {}) {
  require(d >= 1, "dimension must be at least 1");
  require(eps > 0, "epsilon must be positive");
  const std::size_t cap = opt.mesh_cap ? opt.mesh_cap : default_mesh_cap(d);
  const std::size_t grid = opt.grid ? opt.grid : default_grid(d);
  const std::size_t probe = opt.probe ? opt.probe : (d == 1 ? 201 : d == 2 ? 41 : 13);

  Selection s;
  double delta = 1;
  for (int h = 0; h <= opt.max_halvings; ++h, delta *= 0.5)
    if (modulus_estimate(f, d, delta * d, probe) < eps / 2) break;
  s.modulus_delta = delta;

  const auto pts = grid_points(d, grid);
  std::vector<double> fv(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) fv[i] = f(pts[i]);
  std::ostringstream diag;
  for (; delta <= 1.0; delta *= 2) {
    for (std::size_t mesh = 1; mesh <= cap; mesh *= 2) {
      const auto g = evaluate_points(approx_nd(f, d, delta, mesh), pts);
      double e = 0;
      for (std::size_t i = 0; i < pts.size(); ++i) e = std::max(e, std::abs(fv[i] - g[i]));
      if (e < s.measured) {
        s.measured = e;
        s.delta = delta;
        s.mesh = mesh;
      }
      if (e < eps) {
        s.ok = true;
        s.delta = delta;
        s.mesh = mesh;
        s.measured = e;
        return s;
      }
    }
    diag << "delta " << delta << ": mesh cap " << cap << " reached\n";
  }
  diag << "best sup error " << s.measured << " at delta " << s.delta << ", mesh " << s.mesh << " is not below " << eps;
  s.diagnostic = diag.str();
  return s;
}

struct Certificate {
  int d = 1;
  double delta = 0;
  std::size_t k = 0;
  std::size_t mesh = 0;
  std::vector<std::size_t> widths;
  double sup_error = 0;
  std::size_t grid = 0;
  double epsilon = 0;

  std::string text() const {
    std::ostringstream o;
    o.precision(6);
    o << "d: " << d << "\n"
      << "delta: " << delta << "\n"
      << "k: " << k << "\n"
      << "mesh: " << mesh << "\n"
      << "widths: [";
    for (std::size_t i = 0; i < widths.size(); ++i) o << (i ? ", " : "") << widths[i];
    o << "]\n"
      << "sup_error: " << std::scientific << sup_error << std::defaultfloat << "\n"
      << "epsilon: " << epsilon << "\n"
      << "grid: " << grid << " points per axis on [-1, 1]^" << d << "\n";
    return o.str();
  }
};

/// Named targets for the CLI. Products run over all coordinates.
inline std::optional<Fn> named_function(const std::string& name) {
  const double pi = std::acos(-1.0);
  if (name == "sin_pi")
    return Fn([pi](std::span<const double> x) {
      double p = 1;
      for (double v : x) p *= std::sin(pi * v);
      return p;
    });
  if (name == "product")
    return Fn([](std::span<const double> x) {
      double p = 1;
      for (double v : x) p *= v;
      return p;
    });
  if (name == "const") return Fn([](std::span<const double>) { return 1.0; });
  if (name == "identity") return Fn([](std::span<const double> x) { return x[0]; });
  if (name == "abs_sum")
    return Fn([](std::span<const double> x) {
      double s = 0;
      for (double v : x) s += std::abs(v);
      return s;
    });
  if (name == "gaussian")
    return Fn([](std::span<const double> x) {
      double s = 0;
      for (double v : x) s += v * v;
      return std::exp(-2 * s);
    });
  return std::nullopt;
}

/// Table-backed target: rows of (x_1..x_d, value). d=1 interpolates linearly
/// between sorted samples; higher d uses the nearest sample.
inline Fn tabulated_function(std::vector<std::vector<double>> rows, int d) {
  require(!rows.empty(), "empty function table");
  for (const auto& r : rows)
    if (r.size() != static_cast<std::size_t>(d) + 1)
      throw FormatError("function table row has " + std::to_string(r.size()) + " columns, expected " +
                        std::to_string(d + 1));
  if (d == 1) {
    std::sort(rows.begin(), rows.end());
    return [rows](std::span<const double> x) {
      const double v = x[0];
      if (v <= rows.front()[0]) return rows.front()[1];
      if (v >= rows.back()[0]) return rows.back()[1];
      auto it = std::upper_bound(rows.begin(), rows.end(), v,
                                 [](double a, const std::vector<double>& r) { return a < r[0]; });
      const auto& hi = *it;
      const auto& lo = *(it - 1);
      const double t = (v - lo[0]) / (hi[0] - lo[0]);
      return lo[1] + t * (hi[1] - lo[1]);
    };
  }
  return [rows, d](std::span<const double> x) {
    double best = std::numeric_limits<double>::infinity(), val = 0;
    for (const auto& r : rows) {
      double s = 0;
      for (int a = 0; a < d; ++a) s += (r[a] - x[a]) * (r[a] - x[a]);
      if (s < best) {
        best = s;
        val = r[d];
      }
    }
    return val;
  };
}

}  // namespace dacnet::approx
