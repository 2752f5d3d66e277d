#pragma once

#include "facecycle/core_types.hpp"

namespace facecycle {

/// Persistent power-iteration state of one spectrally normalised layer.
struct SpectralState {
  torch::Tensor u;  // [rows]
  torch::Tensor v;  // [cols]
  double sigma = 0.0;
  int n_power_iters = 1;
};

struct PowerStep {
  torch::Tensor v_next;
  double sigma = 0.0;
};

/// One step v <- W^T W v / |W^T W v|, sigma = |W v_next|.
/// Throws NumericError when W^T W v vanishes (v in the null space).
PowerStep power_iteration_step(const torch::Tensor& w, const torch::Tensor& v);

/// Largest singular value of `w` by `iters` power-iteration steps from a
/// seeded Gaussian start. A null-space start is retried once with a fresh
/// seed before the error propagates.
double estimate_sigma(const torch::Tensor& w, int iters, uint64_t seed);

/// Returns w / sigma. Throws for sigma <= 0.
torch::Tensor normalize_weight(const torch::Tensor& w, double sigma);

/// Reshapes a conv weight [out, in, kh, kw] (or a linear weight) to [out, rest].
torch::Tensor weight_as_matrix(const torch::Tensor& weight);

struct SpectralNormOptions {
  bool enabled = true;
  int n_power_iters = 1;
  /// Treat sigma as a constant in backward (no gradient through it).
  bool detach_sigma = false;
};

/// Buffers and update rule shared by every SN-wrapped layer.
///
/// Training-mode calls run `n_power_iters` updates of (u, v) in FP32 without
/// gradient; the returned weight is W / |W v| with v detached, so sigma stays
/// differentiable in W unless `detach_sigma` is set. Evaluation-mode calls
/// leave the state untouched.
class SpectralNormalizer {
 public:
  SpectralNormalizer() = default;
  SpectralNormalizer(torch::nn::Module& owner, const torch::Tensor& weight, SpectralNormOptions opts);

  torch::Tensor apply(const torch::Tensor& weight, bool training);
  SpectralState state() const;
  bool enabled() const { return opts_.enabled; }

 private:
  SpectralNormOptions opts_{};
  torch::Tensor u_;
  torch::Tensor v_;
  torch::Tensor sigma_;
};

struct SNConv2dOptions {
  int64_t in_channels;
  int64_t out_channels;
  int64_t kernel_size;
  int64_t stride = 1;
  int64_t padding = 0;
  bool bias = true;
  bool reflect_padding = false;
  SpectralNormOptions sn{};
};

/// Conv2d whose forward uses the spectrally normalised weight.
class SNConv2dImpl : public torch::nn::Module {
 public:
  explicit SNConv2dImpl(SNConv2dOptions opts);

  torch::Tensor forward(const torch::Tensor& x);
  /// Weight actually used by forward (W / sigma when SN is enabled).
  torch::Tensor effective_weight();
  SpectralState state() const { return sn_.state(); }
  const SNConv2dOptions& options() const { return opts_; }

  torch::Tensor weight;
  torch::Tensor bias;

 private:
  SNConv2dOptions opts_;
  SpectralNormalizer sn_;
};
TORCH_MODULE(SNConv2d);

class SNLinearImpl : public torch::nn::Module {
 public:
  SNLinearImpl(int64_t in_features, int64_t out_features, SpectralNormOptions sn = {}, bool bias = true);

  torch::Tensor forward(const torch::Tensor& x);
  torch::Tensor effective_weight();
  SpectralState state() const { return sn_.state(); }

  torch::Tensor weight;
  torch::Tensor bias;

 private:
  SpectralNormalizer sn_;
};
TORCH_MODULE(SNLinear);

}  // namespace facecycle
