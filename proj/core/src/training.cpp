#include "pidm/training.hpp"

#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace pidm {

AdamW::AdamW(std::vector<Tensor*> params, Options opts) : params_(std::move(params)), opts_(opts) {
  for (const Tensor* p : params_) {
    m_.emplace_back(p->shape());
    v_.emplace_back(p->shape());
  }
}

void AdamW::step(const std::vector<Tensor>& grads, double lr) {
  if (grads.size() != params_.size()) throw std::invalid_argument("AdamW: gradient count mismatch");
  ++t_;
  const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = *params_[i];
    const Tensor& g = grads[i];
    if (g.shape() != p.shape()) throw ShapeError("AdamW", p.shape(), g.shape());
    for (std::size_t j = 0; j < p.size(); ++j) {
      m_[i][j] = opts_.beta1 * m_[i][j] + (1.0 - opts_.beta1) * g[j];
      v_[i][j] = opts_.beta2 * v_[i][j] + (1.0 - opts_.beta2) * g[j] * g[j];
      const double mh = m_[i][j] / bc1;
      const double vh = v_[i][j] / bc2;
      p[j] -= lr * (mh / (std::sqrt(vh) + opts_.eps) + opts_.weight_decay * p[j]);
    }
  }
}

double cosine_lr(std::size_t step, std::size_t total, double lr_max, double lr_min) {
  if (total <= 1) return lr_max;
  const double frac = static_cast<double>(step) / static_cast<double>(total - 1);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * frac));
}

double clip_grad_norm(std::vector<Tensor>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (double v : g.data()) sq += v * v;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double k = max_norm / norm;
    for (auto& g : grads)
      for (double& v : g.data()) v *= k;
  }
  return norm;
}

Var ddpm_loss(Tape& tape, const Denoiser& net, const std::vector<Var>& weights, const Tensor& x0,
              const std::vector<std::size_t>& t, const Tensor& eps, const NoiseSchedule& s) {
  if (x0.rank() != 3 || x0.shape() != eps.shape()) throw ShapeError("ddpm_loss", x0.shape(), eps.shape());
  const std::size_t row = x0.size() / x0.dim(0);
  Tensor xt(x0.shape());
  for (std::size_t b = 0; b < x0.dim(0); ++b) {
    const double a = std::sqrt(s.alpha_bar(t[b]));
    const double c = std::sqrt(1.0 - s.alpha_bar(t[b]));
    for (std::size_t i = b * row; i < (b + 1) * row; ++i) xt[i] = a * x0[i] + c * eps[i];
  }
  const Var pred = net.forward(tape, weights, tape.constant(std::move(xt)), t);
  return mse(pred, tape.constant(eps));
}

TrainResult train(Model& model, const TrajectorySet& corpus, const TrainConfig& cfg,
                  const TrainLog& log) {
  Denoiser& net = model.net;
  if (corpus.channels() != net.config().channels) {
    throw ShapeError("train", Shape{corpus.channels()}, Shape{net.config().channels});
  }
  if (cfg.batch == 0 || cfg.steps == 0) throw std::invalid_argument("train: batch and steps must be positive");
  std::vector<Tensor*> ptrs;
  for (auto& p : net.parameters()) ptrs.push_back(&p.value);
  AdamW opt(ptrs, cfg.adam);
  Rng rng = make_rng(cfg.seed, 0);
  const std::size_t n = corpus.size(), nc = corpus.channels(), len = corpus.length();
  const std::size_t T = model.schedule.steps();
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::uniform_int_distribution<std::size_t> pick_t(1, T);

  TrainResult result;
  result.loss.reserve(cfg.steps);
  Tape tape;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    Tensor x0(Shape{cfg.batch, nc, len});
    std::vector<std::size_t> ts(cfg.batch);
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const std::size_t i = pick(rng);
      std::copy_n(&corpus.Z.data()[i * nc * len], nc * len, &x0.data()[b * nc * len]);
      ts[b] = pick_t(rng);
    }
    const Tensor eps = randn(x0.shape(), rng);

    tape.clear();
    const auto w = net.bind(tape, true);
    const Var loss = ddpm_loss(tape, net, w, x0, ts, eps, model.schedule);
    const double lv = loss.item();
    if (!std::isfinite(lv)) {
      std::ostringstream os;
      os << "training loss became non-finite at step " << step;
      if (!result.loss.empty()) os << " (last finite loss " << result.loss.back() << ")";
      throw std::runtime_error(os.str());
    }
    tape.backward(loss);
    std::vector<Tensor> grads;
    grads.reserve(w.size());
    for (const Var& v : w) grads.push_back(tape.grad(v));
    clip_grad_norm(grads, cfg.grad_clip);
    const double lr = cosine_lr(step, cfg.steps, cfg.adam.lr, cfg.lr_min);
    opt.step(grads, lr);
    result.loss.push_back(lv);
    if (log && cfg.log_every && (step % cfg.log_every == 0 || step + 1 == cfg.steps)) log(step, lv, lr);
  }
  return result;
}

Archive to_archive(const Model& model) {
  Archive a("model");
  const auto& c = model.net.config();
  a.set("system", model.system);
  a.set("dt", model.dt);
  a.set("schedule.T", static_cast<std::int64_t>(model.schedule.steps()));
  a.set("schedule.beta_1", model.schedule.beta_1());
  a.set("schedule.beta_T", model.schedule.beta_T());
  put_stats(a, model.stats);
  a.set("cfg.channels", static_cast<std::int64_t>(c.channels));
  a.set("cfg.base_channels", static_cast<std::int64_t>(c.base_channels));
  a.set("cfg.mults", Tensor::vector({static_cast<double>(c.mults[0]), static_cast<double>(c.mults[1]),
                                     static_cast<double>(c.mults[2])}));
  a.set("cfg.time_embed_dim", static_cast<std::int64_t>(c.time_embed_dim));
  a.set("cfg.groups", static_cast<std::int64_t>(c.groups));
  a.set("cfg.use_attention", static_cast<std::int64_t>(c.use_attention));
  a.set("cfg.length", static_cast<std::int64_t>(c.length));
  for (const auto& p : model.net.parameters()) a.set("w." + p.name, p.value);
  return a;
}

Model model_from_archive(const Archive& a) {
  DenoiserConfig c;
  c.channels = static_cast<std::size_t>(a.get_int("cfg.channels"));
  c.base_channels = static_cast<std::size_t>(a.get_int("cfg.base_channels"));
  const Tensor& mults = a.get_tensor("cfg.mults");
  for (std::size_t i = 0; i < 3; ++i) c.mults[i] = static_cast<std::size_t>(mults[i]);
  c.time_embed_dim = static_cast<std::size_t>(a.get_int("cfg.time_embed_dim"));
  c.groups = static_cast<std::size_t>(a.get_int("cfg.groups"));
  c.use_attention = a.get_int("cfg.use_attention") != 0;
  c.length = static_cast<std::size_t>(a.get_int("cfg.length"));
  Model m{a.get_string("system"), a.get_real("dt"),
          NoiseSchedule::linear(static_cast<std::size_t>(a.get_int("schedule.T")),
                                a.get_real("schedule.beta_1"), a.get_real("schedule.beta_T")),
          get_stats(a), Denoiser(c, 0)};
  for (auto& p : m.net.parameters()) {
    const Tensor& t = a.get_tensor("w." + p.name);
    if (t.shape() != p.value.shape()) {
      throw StoreError(StoreError::Code::WrongType, "weight '" + p.name + "' has shape " +
                                                        shape_str(t.shape()) + ", expected " +
                                                        shape_str(p.value.shape()));
    }
    p.value = t;
  }
  return m;
}

void save_model(const std::filesystem::path& path, const Model& model) { to_archive(model).save(path); }

Model load_model(const std::filesystem::path& path) {
  return model_from_archive(Archive::load(path, "model"));
}

}  // namespace pidm
