#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "pidm/ops.hpp"

namespace pidm {

struct DenoiserConfig {
  std::size_t channels = 0;  // D_s + D_p, both in and out
  std::size_t base_channels = 16;
  std::array<std::size_t, 3> mults{1, 2, 4};
  std::size_t time_embed_dim = 32;
  std::size_t groups = 8;
  bool use_attention = false;
  /// Sequence length the model is built for; 0 accepts any multiple of 4.
  std::size_t length = 0;

  static DenoiserConfig desk(std::size_t channels, std::size_t length = 0);
  static DenoiserConfig full(std::size_t channels, std::size_t length = 0);
};

/// Sinusoidal embedding [B, dim] of integer timesteps; periods span 1..1e4.
Tensor timestep_embedding(const std::vector<std::size_t>& t, std::size_t dim);

struct NamedTensor {
  std::string name;
  Tensor value;
};

/// Three-stage 1D U-Net predicting eps for a [B, C, L] joint sequence.
///
/// Encoder stages hold two residual blocks each, with 2x average pooling after
/// the first two stages. The decoder mirrors it with nearest upsampling and
/// additive skips; a GroupNorm, SiLU and 1x1 convolution map back to C channels.
class Denoiser {
 public:
  /// Random U(+-1/sqrt(fan_in)) initialisation from `seed`.
  Denoiser(const DenoiserConfig& cfg, std::uint64_t seed);

  const DenoiserConfig& config() const noexcept { return cfg_; }
  std::vector<NamedTensor>& parameters() noexcept { return params_; }
  const std::vector<NamedTensor>& parameters() const noexcept { return params_; }
  std::size_t parameter_count() const;

  /// Puts every weight on `tape`, as leaves when `trainable`, else constants.
  std::vector<Var> bind(Tape& tape, bool trainable) const;

  /// x [B, C, L], one timestep per batch row.
  Var forward(Tape& tape, const std::vector<Var>& weights, const Var& x,
              const std::vector<std::size_t>& t) const;

  /// Inference on [C, L] or [B, C, L] with one shared timestep.
  Tensor predict(const Tensor& x, std::size_t t) const;

  /// eps for a single [C, L] sample already on `tape`, weights frozen.
  Var predict_on(Tape& tape, const Var& x, std::size_t t) const;

 private:
  struct Conv {
    std::size_t w, b;
  };
  struct Norm {
    std::size_t gamma, beta;
  };
  struct Linear {
    std::size_t w, b;
  };
  struct ResBlock {
    Norm n1;
    Conv c1;
    Linear temb;
    Norm n2;
    Conv c2;
    bool has_skip = false;
    Conv skip{};
  };
  struct Attention {
    Norm n;
    Conv q, k, v, proj;
  };

  std::size_t add_param(const std::string& name, Shape shape, double bound);
  std::size_t add_const(const std::string& name, Shape shape, double value);
  Conv make_conv(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k);
  Norm make_norm(const std::string& name, std::size_t c);
  Linear make_linear(const std::string& name, std::size_t in, std::size_t out);
  ResBlock make_block(const std::string& name, std::size_t cin, std::size_t cout);
  Attention make_attention(const std::string& name, std::size_t c);

  Var run(const std::vector<Var>& w, const Conv& c, const Var& x) const;
  Var run(const std::vector<Var>& w, const Norm& n, const Var& x) const;
  Var run(const std::vector<Var>& w, const Linear& l, const Var& x) const;
  Var run(const std::vector<Var>& w, const ResBlock& rb, const Var& x, const Var& emb) const;
  Var run(const std::vector<Var>& w, const Attention& a, const Var& x) const;

  DenoiserConfig cfg_;
  std::vector<NamedTensor> params_;
  std::uint64_t seed_;

  Conv conv_in_{};
  Linear temb1_{}, temb2_{};
  std::vector<ResBlock> down_;  // 2 per stage
  std::vector<ResBlock> mid_;
  bool has_attn_ = false;
  Attention attn_{};
  std::vector<ResBlock> up_;  // 2 per decoder stage
  Norm out_norm_{};
  Conv out_conv_{};
};

}  // namespace pidm
