#pragma once

#include "facecycle/core_types.hpp"
#include "facecycle/spectral_norm.hpp"

#include <vector>

namespace facecycle {

// Scales are written as denominators: 16 means a 1/16-resolution feature map.
struct GeneratorConfig {
  int n_res_blocks = 9;
  int base_channels = 64;
  int max_channels = 512;
  int n_downsample = 4;
  std::vector<int> attention_scales{16, 8};
  std::vector<int> skip_scales{4, 2};
  bool adain_in_late_blocks = true;
  int n_adain_blocks = 3;
  int style_dim = 64;
  bool use_sn_on_g = false;

  void validate() const;
  int min_resolution() const { return std::max(64, 1 << n_downsample); }
  int64_t channels_at(int level) const;
};

struct DiscriminatorConfig {
  /// Hidden conv layers; all but the last are stride 2. The default gives the
  /// 70x70 receptive field, 30x30 logits at 256 and 14x14 at 128.
  int n_layers = 4;
  std::vector<int> scales{1, 2};
  int base_channels = 64;
  int max_channels = 512;
  int in_channels = 3;
  bool use_sn = true;
  /// Instance norm on hidden layers (used by the unnormalised pix2pix critic).
  bool use_norm = false;

  void validate() const;
  /// Logit map side for a given input side at scale 1.
  int64_t logit_size(int64_t input_side) const;
};

/// Self-attention with a residual gate gamma initialised to zero.
class SelfAttentionImpl : public torch::nn::Module {
 public:
  explicit SelfAttentionImpl(int64_t channels, SpectralNormOptions sn = {.enabled = false});

  torch::Tensor forward(const torch::Tensor& x);

  static constexpr int64_t kMaxPositions = 4096;

  SNConv2d query{nullptr};
  SNConv2d key{nullptr};
  SNConv2d value{nullptr};
  torch::Tensor gamma;
};
TORCH_MODULE(SelfAttention);

/// Adaptive instance normalisation. `scale`/`shift` are [C] or [N, C].
torch::Tensor adain(const torch::Tensor& x, const torch::Tensor& scale, const torch::Tensor& shift,
                    double eps = 1e-5);

/// Parameter-free instance normalisation (same statistics as adain).
torch::Tensor instance_norm(const torch::Tensor& x, double eps = 1e-5);

class ResidualBlockImpl : public torch::nn::Module {
 public:
  ResidualBlockImpl(int64_t channels, SpectralNormOptions sn);

  torch::Tensor forward(const torch::Tensor& x);
  /// `mod` is [N, 4C]: (scale1, shift1, scale2, shift2).
  torch::Tensor forward_modulated(const torch::Tensor& x, const torch::Tensor& mod);

  SNConv2d conv1{nullptr};
  SNConv2d conv2{nullptr};
  int64_t channels;
};
TORCH_MODULE(ResidualBlock);

/// Image-to-image generator: four stride-2 encoder stages, residual
/// bottleneck with AdaIN in the last blocks, mirrored decoder with additive
/// skips, tanh output. Fully convolutional across 64/128/256.
class GeneratorImpl : public torch::nn::Module {
 public:
  explicit GeneratorImpl(GeneratorConfig cfg);

  torch::Tensor forward(const torch::Tensor& x);

  /// Encoder activations at the requested scales (denominators), e.g. {4, 8}.
  std::vector<torch::Tensor> encode(const torch::Tensor& x, const std::vector<int>& scales);

  /// Channel counts of `encode` outputs.
  std::vector<int64_t> encoder_channels(const std::vector<int>& scales) const;

  /// Zeroes the output convolution so the generator emits tanh(0) = 0.
  void zero_init_output();

  /// Spatial side of each attention input seen by the last forward.
  const std::vector<int64_t>& attention_input_sizes() const { return attention_sizes_; }

  /// Bypasses every attention block (identity in their place).
  void set_attention_enabled(bool enabled) { attention_enabled_ = enabled; }

  const GeneratorConfig& config() const { return cfg_; }

  /// Learned style code of the target domain.
  torch::Tensor style_code;

 private:
  std::vector<torch::Tensor> run_encoder(const torch::Tensor& x);
  torch::Tensor style_modulation(int64_t batch);

  GeneratorConfig cfg_;
  SNConv2d stem{nullptr};
  std::vector<SNConv2d> down_;
  std::vector<SelfAttention> enc_attention_;  // indexed by level, may be null
  std::vector<ResidualBlock> blocks_;
  std::vector<SNConv2d> up_;
  SNConv2d out_{nullptr};
  torch::nn::Linear map1_{nullptr};
  torch::nn::Linear map2_{nullptr};
  bool attention_enabled_ = true;
  std::vector<int64_t> attention_sizes_;
};
TORCH_MODULE(Generator);

/// Single-scale PatchGAN critic.
class PatchDiscriminatorImpl : public torch::nn::Module {
 public:
  explicit PatchDiscriminatorImpl(const DiscriminatorConfig& cfg);

  torch::Tensor forward(const torch::Tensor& x);
  void zero_init_output();
  std::vector<SNConv2d> layers() const { return layers_; }

 private:
  std::vector<SNConv2d> layers_;
  bool use_norm_;
};
TORCH_MODULE(PatchDiscriminator);

/// One PatchGAN per scale; the 1/s input is produced by repeated 2x2 average pooling.
class MultiScaleDiscriminatorImpl : public torch::nn::Module {
 public:
  explicit MultiScaleDiscriminatorImpl(DiscriminatorConfig cfg);

  std::vector<torch::Tensor> forward(const torch::Tensor& x);
  void zero_init_output();
  /// Every SN-wrapped convolution of every scale.
  std::vector<SNConv2d> sn_layers() const;
  const DiscriminatorConfig& config() const { return cfg_; }

 private:
  DiscriminatorConfig cfg_;
  std::vector<PatchDiscriminator> critics_;
};
TORCH_MODULE(MultiScaleDiscriminator);

/// Copies parameters and buffers from `src` into `dst` (same architecture).
void copy_module_state(torch::nn::Module& dst, const torch::nn::Module& src);

}  // namespace facecycle
