#pragma once

#include <cstddef>
#include <limits>
#include <vector>

#include "dacnet/error.hpp"

namespace dacnet::stats {

/// Rows are replicates, columns epochs.
using Matrix = std::vector<std::vector<double>>;

struct ErrorRateEstimate {
  std::size_t m = 0;  // 1-based epoch at the window center
  double t_bar = 0;
  double var_bound = 0;
  double sigma_sq_est = 0;
  double tau_term_est = 0;
};

inline constexpr std::size_t window_half = 2;

/// Simulated early stopping: picks the epoch whose 5-epoch window of
/// replicate-averaged validation error is lowest, then averages the test error
/// over the same window and replicates. Windows must lie fully inside the run,
/// so m ranges over 3..E-2; ties go to the earliest epoch.
inline ErrorRateEstimate early_stop_estimate(const Matrix& val, const Matrix& test) {
  const std::size_t K = val.size();
  if (K < 2) throw ContractError("early_stop_estimate needs at least 2 replicates");
  if (test.size() != K) throw DimensionError("val and test must have the same number of replicates");
  const std::size_t E = val[0].size();
  if (E < 2 * window_half + 1) throw ContractError("early_stop_estimate needs at least 5 epochs, got " + std::to_string(E));
  for (std::size_t k = 0; k < K; ++k)
    if (val[k].size() != E || test[k].size() != E) throw DimensionError("ragged error matrix");

  const std::size_t W = 2 * window_half + 1;
  const double denom = double(K * W);
  auto window_mean = [&](const Matrix& a, std::size_t c) {
    double s = 0;
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t j = c - window_half; j <= c + window_half; ++j) s += a[k][j];
    return s / denom;
  };

  std::size_t best = window_half;
  double best_v = std::numeric_limits<double>::infinity();
  for (std::size_t c = window_half; c + window_half < E; ++c) {
    const double v = window_mean(val, c);
    if (v < best_v) {
      best_v = v;
      best = c;
    }
  }

  ErrorRateEstimate r;
  r.m = best + 1;
  r.t_bar = window_mean(test, best);
  double s = 0;
  for (std::size_t k = 0; k < K; ++k) s += (test[k][best] - r.t_bar) * (test[k][best] - r.t_bar);
  r.sigma_sq_est = s / double(K - 1);
  double t = 0;
  for (std::size_t j = best - window_half; j <= best + window_half; ++j) {
    double col = 0;
    for (std::size_t k = 0; k < K; ++k) col += test[k][j];
    col /= double(K);
    t += (col - r.t_bar) * (col - r.t_bar);
  }
  r.tau_term_est = t / double(W - 1);
  // Var(T) = sigma^2/K + tau^2/(K W); the second estimate already carries the 1/K.
  r.var_bound = r.sigma_sq_est / double(K) + r.tau_term_est / double(W);
  return r;
}

}  // namespace dacnet::stats
