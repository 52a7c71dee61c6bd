#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "pidm/tensor.hpp"

namespace pidm {

/// Value substituted for NaN/Inf entries before aggregation.
inline constexpr double kSanitizedValue = 999.0;
/// Finite estimates are clipped to +-kSanitizeClip.
inline constexpr double kSanitizeClip = 1e6;

/// NaN/Inf -> 999, otherwise clipped to [-1e6, 1e6].
double sanitize(double v) noexcept;

/// sqrt(mean((sanitize(x_hat) - x_true)^2)); shapes must match.
double rmse(const Tensor& x_hat, const Tensor& x_true);

/// Per-parameter 100 |p_hat - p| / |p|.
std::vector<double> mape(std::span<const double> p_hat, std::span<const double> p_true);

/// Median of each parameter row of `params` [D_p, L] over its first min(window, L) entries.
std::vector<double> windowed_median(const Tensor& params, std::size_t window = 300);

double median(std::vector<double> v);
double mean(std::span<const double> v);
/// Sample standard deviation (n - 1); 0 for fewer than two values.
double stddev(std::span<const double> v);

struct WilcoxonResult {
  double w_plus = 0.0;
  double w_minus = 0.0;
  double statistic = 0.0;  // min(W+, W-)
  double p_value = 1.0;    // two-tailed
  std::size_t n = 0;       // pairs after dropping zero differences
  bool exact = true;
};

/// Two-tailed signed-rank test on differences a_i - b_i. Zero differences are
/// dropped and tied magnitudes get average ranks. Exact null distribution for
/// n <= 25, normal approximation with tie and continuity correction above.
/// Throws std::invalid_argument if the inputs differ in length or every difference is zero.
WilcoxonResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b);

}  // namespace pidm
