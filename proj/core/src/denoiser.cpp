#include "pidm/denoiser.hpp"

#include <cmath>
#include <stdexcept>

#include "pidm/rng.hpp"

namespace pidm {

DenoiserConfig DenoiserConfig::desk(std::size_t channels, std::size_t length) {
  DenoiserConfig c;
  c.channels = channels;
  c.length = length;
  return c;
}

DenoiserConfig DenoiserConfig::full(std::size_t channels, std::size_t length) {
  DenoiserConfig c;
  c.channels = channels;
  c.base_channels = 64;
  c.time_embed_dim = 128;
  c.use_attention = true;
  c.length = length;
  return c;
}

Tensor timestep_embedding(const std::vector<std::size_t>& t, std::size_t dim) {
  if (dim < 2 || dim % 2 != 0) throw std::invalid_argument("timestep_embedding: dim must be even");
  const std::size_t half = dim / 2;
  Tensor out(Shape{t.size(), dim});
  for (std::size_t b = 0; b < t.size(); ++b) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(1e4) * static_cast<double>(i) / static_cast<double>(half));
      const double arg = static_cast<double>(t[b]) * freq;
      out(b, i) = std::sin(arg);
      out(b, half + i) = std::cos(arg);
    }
  }
  return out;
}

Denoiser::Denoiser(const DenoiserConfig& cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed) {
  if (cfg.channels == 0) throw std::invalid_argument("Denoiser: channels must be positive");
  if (cfg.length != 0 && cfg.length % 4 != 0) {
    throw std::invalid_argument("Denoiser: sequence length " + std::to_string(cfg.length) +
                                " is not divisible by 4");
  }
  std::array<std::size_t, 3> ch{};
  for (std::size_t s = 0; s < 3; ++s) {
    ch[s] = cfg.base_channels * cfg.mults[s];
    if (ch[s] % cfg.groups != 0) {
      throw std::invalid_argument("Denoiser: width " + std::to_string(ch[s]) +
                                  " not divisible by " + std::to_string(cfg.groups) + " groups");
    }
  }
  const std::size_t te = cfg.time_embed_dim;
  conv_in_ = make_conv("conv_in", cfg.channels, ch[0], 3);
  temb1_ = make_linear("temb.0", te, te);
  temb2_ = make_linear("temb.1", te, te);
  std::size_t prev = ch[0];
  for (std::size_t s = 0; s < 3; ++s) {
    for (std::size_t r = 0; r < 2; ++r) {
      down_.push_back(make_block("down." + std::to_string(s) + "." + std::to_string(r), prev, ch[s]));
      prev = ch[s];
    }
  }
  mid_.push_back(make_block("mid.0", ch[2], ch[2]));
  if (cfg.use_attention) {
    attn_ = make_attention("mid.attn", ch[2]);
    has_attn_ = true;
  }
  mid_.push_back(make_block("mid.1", ch[2], ch[2]));
  for (std::size_t s = 2; s-- > 0;) {
    up_.push_back(make_block("up." + std::to_string(s) + ".0", ch[s + 1], ch[s]));
    up_.push_back(make_block("up." + std::to_string(s) + ".1", ch[s], ch[s]));
  }
  out_norm_ = make_norm("out.norm", ch[0]);
  out_conv_ = make_conv("out.conv", ch[0], cfg.channels, 1);
}

std::size_t Denoiser::add_param(const std::string& name, Shape shape, double bound) {
  Tensor t(std::move(shape));
  Rng rng = make_rng(seed_, params_.size());
  for (double& v : t.data()) v = uniform(rng, -bound, bound);
  params_.push_back({name, std::move(t)});
  return params_.size() - 1;
}

std::size_t Denoiser::add_const(const std::string& name, Shape shape, double value) {
  params_.push_back({name, Tensor(std::move(shape), value)});
  return params_.size() - 1;
}

Denoiser::Conv Denoiser::make_conv(const std::string& name, std::size_t cin, std::size_t cout,
                                   std::size_t k) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(cin * k));
  const std::size_t w = add_param(name + ".w", Shape{cout, cin, k}, bound);
  return Conv{w, add_param(name + ".b", Shape{cout}, bound)};
}

Denoiser::Norm Denoiser::make_norm(const std::string& name, std::size_t c) {
  const std::size_t g = add_const(name + ".gamma", Shape{c}, 1.0);
  return Norm{g, add_const(name + ".beta", Shape{c}, 0.0)};
}

Denoiser::Linear Denoiser::make_linear(const std::string& name, std::size_t in, std::size_t out) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  const std::size_t w = add_param(name + ".w", Shape{in, out}, bound);
  return Linear{w, add_param(name + ".b", Shape{out}, bound)};
}

Denoiser::ResBlock Denoiser::make_block(const std::string& name, std::size_t cin, std::size_t cout) {
  ResBlock rb;
  rb.n1 = make_norm(name + ".norm1", cin);
  rb.c1 = make_conv(name + ".conv1", cin, cout, 3);
  rb.temb = make_linear(name + ".temb", cfg_.time_embed_dim, cout);
  rb.n2 = make_norm(name + ".norm2", cout);
  rb.c2 = make_conv(name + ".conv2", cout, cout, 3);
  if (cin != cout) {
    rb.has_skip = true;
    rb.skip = make_conv(name + ".skip", cin, cout, 1);
  }
  return rb;
}

Denoiser::Attention Denoiser::make_attention(const std::string& name, std::size_t c) {
  Attention a;
  a.n = make_norm(name + ".norm", c);
  a.q = make_conv(name + ".q", c, c, 1);
  a.k = make_conv(name + ".k", c, c, 1);
  a.v = make_conv(name + ".v", c, c, 1);
  a.proj = make_conv(name + ".proj", c, c, 1);
  return a;
}

std::size_t Denoiser::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

std::vector<Var> Denoiser::bind(Tape& tape, bool trainable) const {
  std::vector<Var> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(trainable ? tape.leaf(p.value) : tape.constant(p.value));
  return out;
}

Var Denoiser::run(const std::vector<Var>& w, const Conv& c, const Var& x) const {
  return conv1d(x, w[c.w], w[c.b]);
}

Var Denoiser::run(const std::vector<Var>& w, const Norm& n, const Var& x) const {
  return group_norm(x, w[n.gamma], w[n.beta], cfg_.groups);
}

Var Denoiser::run(const std::vector<Var>& w, const Linear& l, const Var& x) const {
  return matmul(x, w[l.w]) + w[l.b];
}

Var Denoiser::run(const std::vector<Var>& w, const ResBlock& rb, const Var& x, const Var& emb) const {
  Var h = run(w, rb.c1, silu(run(w, rb.n1, x)));
  const Shape& hs = h.shape();
  Var shift = reshape(run(w, rb.temb, emb), Shape{hs[0], hs[1], 1});
  h = h + broadcast_to(shift, hs);
  h = run(w, rb.c2, silu(run(w, rb.n2, h)));
  return h + (rb.has_skip ? run(w, rb.skip, x) : x);
}

Var Denoiser::run(const std::vector<Var>& w, const Attention& a, const Var& x) const {
  const Var h = run(w, a.n, x);
  const Var q = run(w, a.q, h);
  const Var k = run(w, a.k, h);
  const Var v = run(w, a.v, h);
  const double scale = 1.0 / std::sqrt(static_cast<double>(x.shape()[1]));
  std::vector<Var> rows;
  for (std::size_t b = 0; b < x.shape()[0]; ++b) {
    const Var qb = select(q, 0, b), kb = select(k, 0, b), vb = select(v, 0, b);
    const Var attn = softmax_last(matmul(transpose(qb), kb) * scale);  // [L, L]
    rows.push_back(matmul(vb, transpose(attn)));
  }
  return x + run(w, a.proj, stack(rows, 0));
}

Var Denoiser::forward(Tape& tape, const std::vector<Var>& w, const Var& x,
                      const std::vector<std::size_t>& t) const {
  const Shape& s = x.shape();
  if (s.size() != 3 || s[1] != cfg_.channels) {
    throw ShapeError("denoiser_forward", s, Shape{0, cfg_.channels, cfg_.length});
  }
  if (s[2] % 4 != 0 || (cfg_.length != 0 && s[2] != cfg_.length)) {
    throw ShapeError("denoiser_forward", "sequence length " + std::to_string(s[2]) +
                                             " incompatible with the model (needs a multiple of 4" +
                                             (cfg_.length ? ", exactly " + std::to_string(cfg_.length) : "") + ")");
  }
  if (t.size() != s[0]) throw ShapeError("denoiser_forward", Shape{t.size()}, Shape{s[0]});
  if (w.size() != params_.size()) {
    throw std::invalid_argument("denoiser_forward: weight count mismatch");
  }

  Var emb = tape.constant(timestep_embedding(t, cfg_.time_embed_dim));
  emb = silu(run(w, temb2_, silu(run(w, temb1_, emb))));

  Var h = run(w, conv_in_, x);
  std::vector<Var> skips;
  for (std::size_t s = 0; s < 3; ++s) {
    h = run(w, down_[2 * s], h, emb);
    h = run(w, down_[2 * s + 1], h, emb);
    if (s < 2) {
      skips.push_back(h);
      h = avg_pool2(h);
    }
  }
  h = run(w, mid_[0], h, emb);
  if (has_attn_) h = run(w, attn_, h);
  h = run(w, mid_[1], h, emb);
  for (std::size_t u = 0; u < 2; ++u) {
    h = run(w, up_[2 * u], upsample2(h), emb);
    h = h + skips[1 - u];
    h = run(w, up_[2 * u + 1], h, emb);
  }
  return run(w, out_conv_, silu(run(w, out_norm_, h)));
}

Tensor Denoiser::predict(const Tensor& x, std::size_t t) const {
  const bool single = x.rank() == 2;
  Tape tape;
  const auto w = bind(tape, false);
  const Var in = tape.constant(single ? x.reshaped(Shape{1, x.dim(0), x.dim(1)}) : x);
  const std::vector<std::size_t> ts(in.shape()[0], t);
  Tensor out = forward(tape, w, in, ts).value();
  return single ? out.reshaped(x.shape()) : out;
}

Var Denoiser::predict_on(Tape& tape, const Var& x, std::size_t t) const {
  const Shape shape = x.shape();
  if (shape.size() != 2) throw ShapeError("Denoiser::predict_on", "expected [C, L], got " + shape_str(shape));
  const auto w = bind(tape, false);
  const Var out = forward(tape, w, reshape(x, Shape{1, shape[0], shape[1]}), {t});
  return reshape(out, shape);
}

}  // namespace pidm
