#include "pidm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace pidm {

double sanitize(double v) noexcept {
  if (!std::isfinite(v)) return kSanitizedValue;
  return std::clamp(v, -kSanitizeClip, kSanitizeClip);
}

double rmse(const Tensor& x_hat, const Tensor& x_true) {
  if (x_hat.shape() != x_true.shape()) throw ShapeError("rmse", x_hat.shape(), x_true.shape());
  if (x_hat.size() == 0) throw ShapeError("rmse", "empty input");
  double sq = 0.0;
  for (std::size_t i = 0; i < x_hat.size(); ++i) {
    const double d = sanitize(x_hat[i]) - x_true[i];
    sq += d * d;
  }
  return std::sqrt(sq / static_cast<double>(x_hat.size()));
}

std::vector<double> mape(std::span<const double> p_hat, std::span<const double> p_true) {
  if (p_hat.size() != p_true.size()) throw ShapeError("mape", Shape{p_hat.size()}, Shape{p_true.size()});
  std::vector<double> out;
  for (std::size_t i = 0; i < p_hat.size(); ++i) {
    if (p_true[i] == 0.0) {
      throw std::invalid_argument("mape: true parameter " + std::to_string(i) + " is zero");
    }
    out.push_back(100.0 * std::abs(sanitize(p_hat[i]) - p_true[i]) / std::abs(p_true[i]));
  }
  return out;
}

double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median: empty input");
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<long>(mid), v.end());
  const double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<long>(mid));
  return 0.5 * (lo + hi);
}

std::vector<double> windowed_median(const Tensor& params, std::size_t window) {
  if (params.rank() != 2 || params.dim(1) == 0) {
    throw ShapeError("windowed_median", "expected [D_p, L], got " + shape_str(params.shape()));
  }
  const std::size_t n = std::min(window, params.dim(1));
  std::vector<double> out;
  for (std::size_t p = 0; p < params.dim(0); ++p) {
    std::vector<double> row(n);
    for (std::size_t l = 0; l < n; ++l) row[l] = params(p, l);
    out.push_back(median(std::move(row)));
  }
  return out;
}

double mean(std::span<const double> v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double stddev(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

WilcoxonResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("wilcoxon: samples differ in length");
  std::vector<double> d;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double v = a[i] - b[i];
    if (v != 0.0) d.push_back(v);
  }
  if (d.empty()) throw std::invalid_argument("wilcoxon: all differences are zero");
  const std::size_t n = d.size();

  // Average ranks of |d|, kept doubled so they stay integral under ties.
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
    return std::abs(d[i]) < std::abs(d[j]);
  });
  std::vector<std::size_t> rank2(n);
  double tie_term = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && std::abs(d[order[j + 1]]) == std::abs(d[order[i]])) ++j;
    const std::size_t r2 = (i + 1) + (j + 1);  // twice the average of ranks i+1..j+1
    for (std::size_t k = i; k <= j; ++k) rank2[order[k]] = r2;
    const double t = static_cast<double>(j - i + 1);
    tie_term += t * t * t - t;
    i = j + 1;
  }

  WilcoxonResult res;
  res.n = n;
  std::size_t w2_plus = 0, w2_minus = 0;
  for (std::size_t i = 0; i < n; ++i) (d[i] > 0.0 ? w2_plus : w2_minus) += rank2[i];
  res.w_plus = 0.5 * static_cast<double>(w2_plus);
  res.w_minus = 0.5 * static_cast<double>(w2_minus);
  res.statistic = std::min(res.w_plus, res.w_minus);

  if (n <= 25) {
    // Null distribution of the doubled positive-rank sum: each rank enters with probability 1/2.
    const std::size_t total = w2_plus + w2_minus;
    std::vector<double> ways(total + 1, 0.0);
    ways[0] = 1.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t s = total + 1; s-- > rank2[i];) ways[s] += ways[s - rank2[i]];
    }
    const std::size_t w2 = std::min(w2_plus, w2_minus);
    double tail = 0.0;
    for (std::size_t s = 0; s <= w2; ++s) tail += ways[s];
    res.p_value = std::min(1.0, 2.0 * tail / std::ldexp(1.0, static_cast<int>(n)));
    res.exact = true;
  } else {
    const double nn = static_cast<double>(n);
    const double mu = nn * (nn + 1.0) / 4.0;
    const double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0 - tie_term / 48.0;
    const double z = std::max(0.0, std::abs(res.statistic - mu) - 0.5) / std::sqrt(var);
    res.p_value = std::min(1.0, std::erfc(z / std::sqrt(2.0)));
    res.exact = false;
  }
  return res;
}

}  // namespace pidm
