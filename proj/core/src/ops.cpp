#include "pidm/ops.hpp"

#include <algorithm>
#include <cmath>

namespace pidm {
namespace {

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.begin(), small.end(), big.end() - static_cast<long>(small.size()));
}

struct Broadcast {
  Shape out;
  std::size_t na;
  std::size_t nb;
};

Broadcast resolve(std::string_view op, const Shape& a, const Shape& b) {
  const std::size_t na = numel(a);
  const std::size_t nb = numel(b);
  if (a == b) return {a, na, nb};
  if (nb == 1 && (na != 1 || a.size() >= b.size())) return {a, na, nb};
  if (na == 1) return {b, na, nb};
  if (is_suffix(b, a)) return {a, na, nb};
  if (is_suffix(a, b)) return {b, na, nb};
  throw ShapeError(op, a, b);
}

void check_axis(std::string_view op, const Shape& s, std::size_t axis) {
  if (axis >= s.size()) {
    throw ShapeError(op, "axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  }
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t n = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

// Elementwise unary op; `deriv(x, y)` is dy/dx given input x and output y.
template <class F, class D>
Var unary(std::string_view op, const Var& a, F f, D deriv) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  const std::size_t ia = a.id();
  return a.tape()->record(op, std::move(y), {a}, [ia, deriv](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    const Tensor& xin = t.value(ia);
    const Tensor& yout = t.value(self);
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * deriv(xin[i], yout[i]);
  });
}

}  // namespace

Var add(const Var& a, const Var& b) {
  const auto bc = resolve("add", a.shape(), b.shape());
  const Tensor& x = a.value();
  const Tensor& z = b.value();
  Tensor y(bc.out);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i % bc.na] + z[i % bc.nb];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record("add", std::move(y), {a, b}, [ia, ib, bc](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    if (t.requires_grad(ia)) {
      Tensor& ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i % bc.na] += g[i];
    }
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % bc.nb] += g[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  const auto bc = resolve("sub", a.shape(), b.shape());
  const Tensor& x = a.value();
  const Tensor& z = b.value();
  Tensor y(bc.out);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i % bc.na] - z[i % bc.nb];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record("sub", std::move(y), {a, b}, [ia, ib, bc](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    if (t.requires_grad(ia)) {
      Tensor& ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i % bc.na] += g[i];
    }
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % bc.nb] -= g[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  const auto bc = resolve("mul", a.shape(), b.shape());
  const Tensor& x = a.value();
  const Tensor& z = b.value();
  Tensor y(bc.out);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i % bc.na] * z[i % bc.nb];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record("mul", std::move(y), {a, b}, [ia, ib, bc](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    const Tensor& x = t.value(ia);
    const Tensor& z = t.value(ib);
    if (t.requires_grad(ia)) {
      Tensor& ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i % bc.na] += g[i] * z[i % bc.nb];
    }
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % bc.nb] += g[i] * x[i % bc.na];
    }
  });
}

Var div(const Var& a, const Var& b) {
  const auto bc = resolve("div", a.shape(), b.shape());
  const Tensor& x = a.value();
  const Tensor& z = b.value();
  Tensor y(bc.out);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i % bc.na] / z[i % bc.nb];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record("div", std::move(y), {a, b}, [ia, ib, bc](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    const Tensor& z = t.value(ib);
    const Tensor& y = t.value(self);
    if (t.requires_grad(ia)) {
      Tensor& ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i % bc.na] += g[i] / z[i % bc.nb];
    }
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % bc.nb] -= g[i] * y[i] / z[i % bc.nb];
    }
  });
}

Var add_scalar(const Var& a, double s) {
  return unary("add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var mul_scalar(const Var& a, double s) {
  return unary("mul_scalar", a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Var rsub_scalar(double s, const Var& a) {
  return unary("rsub_scalar", a, [s](double x) { return s - x; }, [](double, double) { return -1.0; });
}

Var rdiv_scalar(double s, const Var& a) {
  return unary("rdiv_scalar", a, [s](double x) { return s / x; },
               [](double x, double y) { return -y / x; });
}

Var neg(const Var& a) {
  return unary("neg", a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Var exp(const Var& a) {
  return unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(const Var& a) {
  return unary("log", a, [](double x) { return std::log(x); },
               [](double x, double) { return 1.0 / x; });
}

Var log1p(const Var& a) {
  return unary("log1p", a, [](double x) { return std::log1p(x); },
               [](double x, double) { return 1.0 / (1.0 + x); });
}

Var sqrt(const Var& a) {
  return unary("sqrt", a, [](double x) { return std::sqrt(x); },
               [](double, double y) { return 0.5 / y; });
}

Var square(const Var& a) {
  return unary("square", a, [](double x) { return x * x; },
               [](double x, double) { return 2.0 * x; });
}

Var sigmoid(const Var& a) {
  return unary("sigmoid", a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
               [](double, double y) { return y * (1.0 - y); });
}

Var silu(const Var& a) {
  return unary("silu", a, [](double x) { return x / (1.0 + std::exp(-x)); },
               [](double x, double) {
                 const double s = 1.0 / (1.0 + std::exp(-x));
                 return s * (1.0 + x * (1.0 - s));
               });
}

Var clamp(const Var& a, double lo, double hi) {
  if (!(lo <= hi)) throw ShapeError("clamp", "lower bound exceeds upper bound");
  return unary("clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
               [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const std::size_t ia = a.id();
  return a.tape()->record("sum", Tensor::scalar(s), {a}, [ia](Tape& t, std::size_t self) {
    const double g = t.grad_of(self)[0];
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
  });
}

Var mean(const Var& a) {
  const std::size_t n = a.size();
  if (n == 0) throw ShapeError("mean", "empty tensor");
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const std::size_t ia = a.id();
  return a.tape()->record("mean", Tensor::scalar(s / static_cast<double>(n)), {a},
                          [ia, n](Tape& t, std::size_t self) {
                            const double g = t.grad_of(self)[0] / static_cast<double>(n);
                            Tensor& ga = t.grad_buffer(ia);
                            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
                          });
}

namespace {

Var reduce_axis(std::string_view op, const Var& a, std::size_t axis, bool average) {
  check_axis(op, a.shape(), axis);
  const auto sp = split_axis(a.shape(), axis);
  if (average && sp.n == 0) throw ShapeError(op, "empty axis");
  Shape out = a.shape();
  out.erase(out.begin() + static_cast<long>(axis));
  const double scale = average ? 1.0 / static_cast<double>(sp.n) : 1.0;
  const Tensor& x = a.value();
  Tensor y(out);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t k = 0; k < sp.n; ++k) {
      const double* src = &x.data()[(o * sp.n + k) * sp.inner];
      double* dst = &y.data()[o * sp.inner];
      for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
    }
  }
  if (average) {
    for (double& v : y.data()) v *= scale;
  }
  const std::size_t ia = a.id();
  return a.tape()->record(op, std::move(y), {a}, [ia, sp, scale](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t k = 0; k < sp.n; ++k) {
        double* dst = &ga.data()[(o * sp.n + k) * sp.inner];
        const double* src = &g.data()[o * sp.inner];
        for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += scale * src[i];
      }
    }
  });
}

}  // namespace

Var sum(const Var& a, std::size_t axis) { return reduce_axis("sum_axis", a, axis, false); }

Var mean(const Var& a, std::size_t axis) { return reduce_axis("mean_axis", a, axis, true); }

Var mse(const Var& a, const Var& b) {
  if (a.shape() != b.shape()) throw ShapeError("mse", a.shape(), b.shape());
  const Tensor& x = a.value();
  const Tensor& z = b.value();
  const std::size_t n = x.size();
  if (n == 0) throw ShapeError("mse", "empty tensor");
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = x[i] - z[i];
    s += d * d;
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record("mse", Tensor::scalar(s / static_cast<double>(n)), {a, b},
                          [ia, ib, n](Tape& t, std::size_t self) {
                            const double g = t.grad_of(self)[0] * 2.0 / static_cast<double>(n);
                            const Tensor& x = t.value(ia);
                            const Tensor& z = t.value(ib);
                            if (t.requires_grad(ia)) {
                              Tensor& ga = t.grad_buffer(ia);
                              for (std::size_t i = 0; i < n; ++i) ga[i] += g * (x[i] - z[i]);
                            }
                            if (t.requires_grad(ib)) {
                              Tensor& gb = t.grad_buffer(ib);
                              for (std::size_t i = 0; i < n; ++i) gb[i] -= g * (x[i] - z[i]);
                            }
                          });
}

Var matmul(const Var& a, const Var& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) throw ShapeError("matmul", sa, sb);
  const std::size_t m = sa[0], k = sa[1], n = sb[1];
  const Tensor& x = a.value();
  const Tensor& z = b.value();
  Tensor y(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double xv = x[i * k + p];
      const double* zr = &z.data()[p * n];
      double* yr = &y.data()[i * n];
      for (std::size_t j = 0; j < n; ++j) yr[j] += xv * zr[j];
    }
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record("matmul", std::move(y), {a, b},
                          [ia, ib, m, k, n](Tape& t, std::size_t self) {
                            const Tensor& g = t.grad_of(self);
                            const Tensor& x = t.value(ia);
                            const Tensor& z = t.value(ib);
                            if (t.requires_grad(ia)) {
                              Tensor& ga = t.grad_buffer(ia);
                              for (std::size_t i = 0; i < m; ++i) {
                                for (std::size_t p = 0; p < k; ++p) {
                                  double s = 0.0;
                                  for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * z[p * n + j];
                                  ga[i * k + p] += s;
                                }
                              }
                            }
                            if (t.requires_grad(ib)) {
                              Tensor& gb = t.grad_buffer(ib);
                              for (std::size_t i = 0; i < m; ++i) {
                                for (std::size_t p = 0; p < k; ++p) {
                                  const double xv = x[i * k + p];
                                  for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += xv * g[i * n + j];
                                }
                              }
                            }
                          });
}

Var transpose(const Var& a) {
  const Shape& s = a.shape();
  if (s.size() != 2) throw ShapeError("transpose", "expected rank 2, got " + shape_str(s));
  const std::size_t m = s[0], n = s[1];
  const Tensor& x = a.value();
  Tensor y(Shape{n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[j * m + i] = x[i * n + j];
  const std::size_t ia = a.id();
  return a.tape()->record("transpose", std::move(y), {a}, [ia, m, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
  });
}

Var reshape(const Var& a, Shape shape) {
  Tensor y = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id();
  return a.tape()->record("reshape", std::move(y), {a}, [ia](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var slice(const Var& a, std::size_t axis, std::size_t begin, std::size_t end) {
  check_axis("slice", a.shape(), axis);
  const auto sp = split_axis(a.shape(), axis);
  if (begin > end || end > sp.n) {
    throw ShapeError("slice", "range [" + std::to_string(begin) + ", " + std::to_string(end) +
                                  ") invalid for " + shape_str(a.shape()));
  }
  const std::size_t w = end - begin;
  Shape out = a.shape();
  out[axis] = w;
  const Tensor& x = a.value();
  Tensor y(out);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(&x.data()[(o * sp.n + begin) * sp.inner], w * sp.inner,
                &y.data()[o * w * sp.inner]);
  }
  const std::size_t ia = a.id();
  return a.tape()->record("slice", std::move(y), {a}, [ia, sp, begin, w](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      double* dst = &ga.data()[(o * sp.n + begin) * sp.inner];
      const double* src = &g.data()[o * w * sp.inner];
      for (std::size_t i = 0; i < w * sp.inner; ++i) dst[i] += src[i];
    }
  });
}

Var select(const Var& a, std::size_t axis, std::size_t index) {
  Var s = slice(a, axis, index, index + 1);
  Shape out = a.shape();
  out.erase(out.begin() + static_cast<long>(axis));
  return reshape(s, std::move(out));
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat", "no inputs");
  const Shape& s0 = parts.front().shape();
  check_axis("concat", s0, axis);
  Shape out = s0;
  out[axis] = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size()) throw ShapeError("concat", s0, s);
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis && s[d] != s0[d]) throw ShapeError("concat", s0, s);
    }
    widths.push_back(s[axis]);
    out[axis] += s[axis];
  }
  const auto sp = split_axis(out, axis);
  Tensor y(out);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& x = parts[p].value();
    const std::size_t w = widths[p];
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy_n(&x.data()[o * w * sp.inner], w * sp.inner,
                  &y.data()[(o * sp.n + offset) * sp.inner]);
    }
    offset += w;
  }
  std::vector<std::size_t> ids;
  for (const auto& p : parts) ids.push_back(p.id());
  return parts.front().tape()->record(
      "concat", std::move(y), parts, [ids, widths, sp](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_of(self);
        std::size_t offset = 0;
        for (std::size_t p = 0; p < ids.size(); ++p) {
          const std::size_t w = widths[p];
          if (t.requires_grad(ids[p])) {
            Tensor& gp = t.grad_buffer(ids[p]);
            for (std::size_t o = 0; o < sp.outer; ++o) {
              const double* src = &g.data()[(o * sp.n + offset) * sp.inner];
              double* dst = &gp.data()[o * w * sp.inner];
              for (std::size_t i = 0; i < w * sp.inner; ++i) dst[i] += src[i];
            }
          }
          offset += w;
        }
      });
}

Var stack(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("stack", "no inputs");
  std::vector<Var> expanded;
  expanded.reserve(parts.size());
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (axis > s.size()) throw ShapeError("stack", "axis out of range for " + shape_str(s));
    s.insert(s.begin() + static_cast<long>(axis), 1);
    expanded.push_back(reshape(p, std::move(s)));
  }
  return concat(expanded, axis);
}

Var broadcast_to(const Var& a, const Shape& shape) {
  const Shape& in = a.shape();
  if (in.size() > shape.size()) throw ShapeError("broadcast_to", in, shape);
  const std::size_t pad = shape.size() - in.size();
  Shape padded(pad, 1);
  padded.insert(padded.end(), in.begin(), in.end());
  // Input strides in the padded index space; broadcast axes get stride 0.
  std::vector<std::size_t> stride(shape.size(), 0);
  std::size_t acc = 1;
  for (std::size_t d = shape.size(); d-- > 0;) {
    if (padded[d] != shape[d] && padded[d] != 1) throw ShapeError("broadcast_to", in, shape);
    stride[d] = padded[d] == 1 ? 0 : acc;
    acc *= padded[d];
  }
  const std::size_t n = numel(shape);
  std::vector<std::size_t> src_index(n);
  std::vector<std::size_t> idx(shape.size(), 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t off = 0;
    for (std::size_t d = 0; d < shape.size(); ++d) off += idx[d] * stride[d];
    src_index[i] = off;
    for (std::size_t d = shape.size(); d-- > 0;) {
      if (++idx[d] < shape[d]) break;
      idx[d] = 0;
    }
  }
  const Tensor& x = a.value();
  Tensor y(shape);
  for (std::size_t i = 0; i < n; ++i) y[i] = x[src_index[i]];
  const std::size_t ia = a.id();
  return a.tape()->record("broadcast_to", std::move(y), {a},
                          [ia, src_index = std::move(src_index)](Tape& t, std::size_t self) {
                            const Tensor& g = t.grad_of(self);
                            Tensor& ga = t.grad_buffer(ia);
                            for (std::size_t i = 0; i < g.size(); ++i) ga[src_index[i]] += g[i];
                          });
}

Var conv1d(const Var& x, const Var& weight, const Var& bias) {
  const Shape& sx = x.shape();
  const Shape& sw = weight.shape();
  if (sx.size() != 3 || sw.size() != 3 || sx[1] != sw[1] || sw[2] % 2 == 0) {
    throw ShapeError("conv1d", sx, sw);
  }
  const bool has_bias = bias.valid();
  if (has_bias && bias.shape() != Shape{sw[0]}) throw ShapeError("conv1d", sw, bias.shape());
  const std::size_t nb = sx[0], cin = sx[1], len = sx[2], cout = sw[0], ks = sw[2];
  const long pad = static_cast<long>(ks / 2);
  const std::size_t ukpad = ks / 2;
  const Tensor& in = x.value();
  const Tensor& w = weight.value();
  Tensor y(Shape{nb, cout, len});
  for (std::size_t b = 0; b < nb; ++b) {
    for (std::size_t o = 0; o < cout; ++o) {
      double* yr = &y.data()[(b * cout + o) * len];
      if (has_bias) std::fill_n(yr, len, bias.value()[o]);
      for (std::size_t c = 0; c < cin; ++c) {
        const double* xr = &in.data()[(b * cin + c) * len];
        for (std::size_t k = 0; k < ks; ++k) {
          const double wv = w[(o * cin + c) * ks + k];
          const long shift = static_cast<long>(k) - pad;
          const std::size_t lo = shift < 0 ? static_cast<std::size_t>(-shift) : 0;
          const std::size_t hi = shift > 0 ? len - static_cast<std::size_t>(shift) : len;
          for (std::size_t l = lo; l < hi; ++l) yr[l] += wv * xr[l + k - ukpad];
        }
      }
    }
  }
  const std::size_t ix = x.id(), iw = weight.id(), ibias = has_bias ? bias.id() : 0;
  std::vector<Var> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return x.tape()->record(
      "conv1d", std::move(y), inputs,
      [=](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_of(self);
        const Tensor& in = t.value(ix);
        const Tensor& w = t.value(iw);
        const bool gx_on = t.requires_grad(ix);
        const bool gw_on = t.requires_grad(iw);
        Tensor* gx = gx_on ? &t.grad_buffer(ix) : nullptr;
        Tensor* gw = gw_on ? &t.grad_buffer(iw) : nullptr;
        for (std::size_t b = 0; b < nb; ++b) {
          for (std::size_t o = 0; o < cout; ++o) {
            const double* gr = &g.data()[(b * cout + o) * len];
            for (std::size_t c = 0; c < cin; ++c) {
              const double* xr = &in.data()[(b * cin + c) * len];
              double* gxr = gx_on ? &gx->data()[(b * cin + c) * len] : nullptr;
              for (std::size_t k = 0; k < ks; ++k) {
                const std::size_t wi = (o * cin + c) * ks + k;
                const long shift = static_cast<long>(k) - pad;
                const std::size_t lo = shift < 0 ? static_cast<std::size_t>(-shift) : 0;
                const std::size_t hi = shift > 0 ? len - static_cast<std::size_t>(shift) : len;
                if (gw_on) {
                  double s = 0.0;
                  for (std::size_t l = lo; l < hi; ++l) s += gr[l] * xr[l + k - ukpad];
                  (*gw)[wi] += s;
                }
                if (gx_on) {
                  const double wv = w[wi];
                  for (std::size_t l = lo; l < hi; ++l) gxr[l + k - ukpad] += wv * gr[l];
                }
              }
            }
          }
        }
        if (has_bias && t.requires_grad(ibias)) {
          Tensor& gb = t.grad_buffer(ibias);
          for (std::size_t b = 0; b < nb; ++b)
            for (std::size_t o = 0; o < cout; ++o) {
              const double* gr = &g.data()[(b * cout + o) * len];
              double s = 0.0;
              for (std::size_t l = 0; l < len; ++l) s += gr[l];
              gb[o] += s;
            }
        }
      });
}

Var upsample2(const Var& x) {
  const Shape& s = x.shape();
  if (s.empty()) throw ShapeError("upsample2", "rank-0 input");
  const std::size_t len = s.back();
  const std::size_t rows = x.size() / std::max<std::size_t>(len, 1);
  Shape out = s;
  out.back() = 2 * len;
  const Tensor& in = x.value();
  Tensor y(out);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t l = 0; l < len; ++l) {
      y[r * 2 * len + 2 * l] = in[r * len + l];
      y[r * 2 * len + 2 * l + 1] = in[r * len + l];
    }
  const std::size_t ix = x.id();
  return x.tape()->record("upsample2", std::move(y), {x}, [ix, rows, len](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    Tensor& gx = t.grad_buffer(ix);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t l = 0; l < len; ++l)
        gx[r * len + l] += g[r * 2 * len + 2 * l] + g[r * 2 * len + 2 * l + 1];
  });
}

Var avg_pool2(const Var& x) {
  const Shape& s = x.shape();
  if (s.empty() || s.back() % 2 != 0) {
    throw ShapeError("avg_pool2", "last axis must be even, got " + shape_str(s));
  }
  const std::size_t len = s.back() / 2;
  const std::size_t rows = len ? x.size() / (2 * len) : 0;
  Shape out = s;
  out.back() = len;
  const Tensor& in = x.value();
  Tensor y(out);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t l = 0; l < len; ++l)
      y[r * len + l] = 0.5 * (in[r * 2 * len + 2 * l] + in[r * 2 * len + 2 * l + 1]);
  const std::size_t ix = x.id();
  return x.tape()->record("avg_pool2", std::move(y), {x}, [ix, rows, len](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    Tensor& gx = t.grad_buffer(ix);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t l = 0; l < len; ++l) {
        gx[r * 2 * len + 2 * l] += 0.5 * g[r * len + l];
        gx[r * 2 * len + 2 * l + 1] += 0.5 * g[r * len + l];
      }
  });
}

Var group_norm(const Var& x, const Var& gamma, const Var& beta, std::size_t groups, double eps) {
  const Shape& s = x.shape();
  if (s.size() != 3) throw ShapeError("group_norm", "expected [B, C, L], got " + shape_str(s));
  const std::size_t nb = s[0], nc = s[1], len = s[2];
  if (groups == 0 || nc % groups != 0) {
    throw ShapeError("group_norm", std::to_string(nc) + " channels not divisible into " +
                                       std::to_string(groups) + " groups");
  }
  if (gamma.shape() != Shape{nc}) throw ShapeError("group_norm", s, gamma.shape());
  if (beta.shape() != Shape{nc}) throw ShapeError("group_norm", s, beta.shape());
  const std::size_t cpg = nc / groups;
  const std::size_t count = cpg * len;
  const Tensor& in = x.value();
  const Tensor& ga = gamma.value();
  const Tensor& be = beta.value();
  Tensor y(s);
  Tensor xhat(s);
  std::vector<double> inv_std(nb * groups);
  for (std::size_t b = 0; b < nb; ++b) {
    for (std::size_t gi = 0; gi < groups; ++gi) {
      const std::size_t base = (b * nc + gi * cpg) * len;
      double m = 0.0;
      for (std::size_t i = 0; i < count; ++i) m += in[base + i];
      m /= static_cast<double>(count);
      double v = 0.0;
      for (std::size_t i = 0; i < count; ++i) {
        const double d = in[base + i] - m;
        v += d * d;
      }
      v /= static_cast<double>(count);
      const double is = 1.0 / std::sqrt(v + eps);
      inv_std[b * groups + gi] = is;
      for (std::size_t i = 0; i < count; ++i) {
        const std::size_t c = gi * cpg + i / len;
        const double xh = (in[base + i] - m) * is;
        xhat[base + i] = xh;
        y[base + i] = ga[c] * xh + be[c];
      }
    }
  }
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape()->record(
      "group_norm", std::move(y), {x, gamma, beta},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_of(self);
        const Tensor& gam = t.value(ig);
        if (t.requires_grad(ig) || t.requires_grad(ib)) {
          Tensor* dg = t.requires_grad(ig) ? &t.grad_buffer(ig) : nullptr;
          Tensor* db = t.requires_grad(ib) ? &t.grad_buffer(ib) : nullptr;
          for (std::size_t b = 0; b < nb; ++b)
            for (std::size_t c = 0; c < nc; ++c) {
              const std::size_t base = (b * nc + c) * len;
              double sg = 0.0, sgx = 0.0;
              for (std::size_t l = 0; l < len; ++l) {
                sg += g[base + l];
                sgx += g[base + l] * xhat[base + l];
              }
              if (dg) (*dg)[c] += sgx;
              if (db) (*db)[c] += sg;
            }
        }
        if (!t.requires_grad(ix)) return;
        Tensor& dx = t.grad_buffer(ix);
        const double n = static_cast<double>(count);
        std::vector<double> dxh(count);
        for (std::size_t b = 0; b < nb; ++b) {
          for (std::size_t gi = 0; gi < groups; ++gi) {
            const std::size_t base = (b * nc + gi * cpg) * len;
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t i = 0; i < count; ++i) {
              const std::size_t c = gi * cpg + i / len;
              dxh[i] = g[base + i] * gam[c];
              s1 += dxh[i];
              s2 += dxh[i] * xhat[base + i];
            }
            const double is = inv_std[b * groups + gi];
            for (std::size_t i = 0; i < count; ++i) {
              dx[base + i] += is / n * (n * dxh[i] - s1 - xhat[base + i] * s2);
            }
          }
        }
      });
}

Var softmax_last(const Var& x) {
  const Shape& s = x.shape();
  if (s.empty()) throw ShapeError("softmax_last", "rank-0 input");
  const std::size_t n = s.back();
  const std::size_t rows = n ? x.size() / n : 0;
  const Tensor& in = x.value();
  Tensor y(s);
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = in[r * n];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in[r * n + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      y[r * n + j] = std::exp(in[r * n + j] - mx);
      z += y[r * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) y[r * n + j] /= z;
  }
  const std::size_t ix = x.id();
  return x.tape()->record("softmax_last", std::move(y), {x}, [ix, rows, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad_buffer(ix);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
    }
  });
}

}  // namespace pidm
