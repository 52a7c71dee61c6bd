#pragma once

#include <cstddef>
#include <vector>

#include "pidm/autodiff.hpp"

/// Differentiable tensor operations recorded on a Tape.
///
/// Binary arithmetic accepts equal shapes, a single-element operand (scalar
/// broadcast), or an operand whose shape is a suffix of the other's (broadcast
/// over leading axes). Everything else is a ShapeError; use broadcast_to for
/// explicit size-1 expansion.
namespace pidm {

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);

Var add_scalar(const Var& a, double s);
Var mul_scalar(const Var& a, double s);
Var rsub_scalar(double s, const Var& a);  // s - a
Var rdiv_scalar(double s, const Var& a);  // s / a
Var neg(const Var& a);

Var exp(const Var& a);
Var log(const Var& a);
Var log1p(const Var& a);
Var sqrt(const Var& a);
Var square(const Var& a);
Var sigmoid(const Var& a);
Var silu(const Var& a);
/// Gradient passes where lo < a < hi and is zero at or beyond the bounds.
Var clamp(const Var& a, double lo, double hi);

Var sum(const Var& a);
Var mean(const Var& a);
Var sum(const Var& a, std::size_t axis);
Var mean(const Var& a, std::size_t axis);
/// mean((a - b)^2) over all elements; shapes must match exactly.
Var mse(const Var& a, const Var& b);

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var reshape(const Var& a, Shape shape);
Var slice(const Var& a, std::size_t axis, std::size_t begin, std::size_t end);
/// slice of width one with `axis` removed.
Var select(const Var& a, std::size_t axis, std::size_t index);
Var concat(const std::vector<Var>& parts, std::size_t axis);
Var stack(const std::vector<Var>& parts, std::size_t axis);
/// Numpy-style expansion of size-1 axes (missing leading axes count as size 1).
Var broadcast_to(const Var& a, const Shape& shape);

/// x [B, Cin, L], weight [Cout, Cin, K] with odd K, zero padding K/2.
/// `bias` [Cout] may be an unbound Var.
Var conv1d(const Var& x, const Var& weight, const Var& bias);
/// Nearest-neighbour upsampling by 2 along the last axis.
Var upsample2(const Var& x);
/// Average pooling by 2 along the last axis (length must be even).
Var avg_pool2(const Var& x);
/// x [B, C, L]; statistics over (C / groups) channels x L per sample.
Var group_norm(const Var& x, const Var& gamma, const Var& beta, std::size_t groups,
               double eps = 1e-5);
Var softmax_last(const Var& x);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator+(const Var& a, double s) { return add_scalar(a, s); }
inline Var operator+(double s, const Var& a) { return add_scalar(a, s); }
inline Var operator-(const Var& a, double s) { return add_scalar(a, -s); }
inline Var operator-(double s, const Var& a) { return rsub_scalar(s, a); }
inline Var operator*(const Var& a, double s) { return mul_scalar(a, s); }
inline Var operator*(double s, const Var& a) { return mul_scalar(a, s); }
inline Var operator/(const Var& a, double s) { return mul_scalar(a, 1.0 / s); }
inline Var operator/(double s, const Var& a) { return rdiv_scalar(s, a); }
inline Var operator-(const Var& a) { return neg(a); }

}  // namespace pidm
