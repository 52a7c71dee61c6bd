#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "pidm/dataset.hpp"
#include "pidm/denoiser.hpp"
#include "pidm/diffusion.hpp"

namespace pidm {

/// Decoupled weight decay Adam.
class AdamW {
 public:
  struct Options {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-5;
  };

  AdamW(std::vector<Tensor*> params, Options opts);

  /// One update with the given gradients at learning rate `lr`.
  void step(const std::vector<Tensor>& grads, double lr);
  std::size_t steps_taken() const noexcept { return t_; }

 private:
  std::vector<Tensor*> params_;
  std::vector<Tensor> m_, v_;
  Options opts_;
  std::size_t t_ = 0;
};

/// Cosine decay from lr_max at step 0 to lr_min at the last step.
double cosine_lr(std::size_t step, std::size_t total, double lr_max, double lr_min);

/// Rescales all gradients so their joint L2 norm is at most max_norm. Returns the norm before clipping.
double clip_grad_norm(std::vector<Tensor>& grads, double max_norm);

struct TrainConfig {
  std::size_t steps = 1500;
  std::size_t batch = 16;
  AdamW::Options adam{};
  double lr_min = 1e-6;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
  std::size_t log_every = 100;
};

/// A trained denoiser together with everything needed to sample from it.
struct Model {
  std::string system;
  double dt = 0.05;
  NoiseSchedule schedule;
  NormStats stats;
  Denoiser net;
};

struct TrainResult {
  std::vector<double> loss;  // per optimizer step
};

/// Epsilon-prediction loss mean ||eps - eps_theta(x_t, t)||^2 on a batch [B, C, L].
Var ddpm_loss(Tape& tape, const Denoiser& net, const std::vector<Var>& weights, const Tensor& x0,
              const std::vector<std::size_t>& t, const Tensor& eps, const NoiseSchedule& s);

using TrainLog = std::function<void(std::size_t step, double loss, double lr)>;

/// Trains `model.net` in place on the normalized corpus. Deterministic in cfg.seed.
/// Throws std::runtime_error naming the step if the loss stops being finite.
TrainResult train(Model& model, const TrajectorySet& corpus, const TrainConfig& cfg,
                  const TrainLog& log = {});

Archive to_archive(const Model& model);
Model model_from_archive(const Archive& a);
void save_model(const std::filesystem::path& path, const Model& model);
Model load_model(const std::filesystem::path& path);

}  // namespace pidm
