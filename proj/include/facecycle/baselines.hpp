#pragma once

#include "facecycle/train_engine.hpp"

namespace facecycle {

struct VaeConfig {
  int latent_dim = 128;
  double lr = 1e-4;
  double beta = 1.0;
  int base_channels = 32;
  int max_channels = 256;
  int n_downsample = 4;
  int resolution = 256;
  uint64_t seed = 0;

  void validate() const;
};

/// z = mu + sigma * eps. Throws when any sigma <= 0.
torch::Tensor reparameterize(const torch::Tensor& mu, const torch::Tensor& sigma, const torch::Tensor& eps);

/// KL(N(mu, sigma^2) || N(0, I)) summed over latent dims, averaged over the batch.
torch::Tensor kl_divergence(const torch::Tensor& mu, const torch::Tensor& sigma);

/// Mean squared reconstruction error plus beta * KL.
torch::Tensor vae_loss(const torch::Tensor& x, const torch::Tensor& x_recon, const torch::Tensor& mu,
                       const torch::Tensor& sigma, double beta);

/// Spherical interpolation between two latent codes [D].
torch::Tensor slerp(const torch::Tensor& a, const torch::Tensor& b, double t);

/// Shared convolutional encoder, one mirrored decoder per domain. Translation
/// decodes a source posterior mean with the target-domain decoder; its
/// reconstruction scores use the source decoder.
class VaeModel final : public TranslationModel {
 public:
  VaeModel(VaeConfig cfg, TrainSchedule schedule);

  std::string kind() const override { return "vae"; }
  bool supports(Direction) const override { return true; }
  torch::Tensor translate(const torch::Tensor& x, Direction direction) override;
  torch::Tensor reconstruct(const torch::Tensor& x, Direction direction) override;
  LossReport step(const StepInputs& inputs, int64_t iter) override;
  void save(torch::serialize::OutputArchive& archive) override;
  void load(torch::serialize::InputArchive& archive) override;
  void to(torch::Device device) override;

  /// (mu, sigma) of the posterior.
  std::pair<torch::Tensor, torch::Tensor> encode(const torch::Tensor& x);
  torch::Tensor decode(const torch::Tensor& z, Domain domain);
  /// Decodes `steps` points on the slerp path between the posterior means of a and b.
  torch::Tensor interpolate(const torch::Tensor& a, const torch::Tensor& b, int steps, Domain domain);

 private:
  torch::nn::Sequential make_decoder();

  VaeConfig cfg_;
  TrainSchedule schedule_;
  int64_t bottleneck_side_;
  int64_t bottleneck_channels_;
  torch::nn::Sequential encoder_{nullptr};
  torch::nn::Linear to_mu_{nullptr}, to_logvar_{nullptr};
  torch::nn::Linear from_z_x_{nullptr}, from_z_y_{nullptr};
  torch::nn::Sequential decoder_x_{nullptr}, decoder_y_{nullptr};
  std::unique_ptr<torch::optim::Adam> opt_;
};

struct Pix2pixConfig {
  int base_channels = 64;
  int max_channels = 512;
  /// U-Net depth; capped so the innermost map is at least 2x2.
  int depth = 8;
  DiscriminatorConfig discriminator{.n_layers = 3, .scales = {1}, .in_channels = 6, .use_sn = false,
                                    .use_norm = true};
  double lr = 2e-4;
  double lambda_l1 = 100.0;
  bool diff_augment = false;
  AugmentPolicy augment;
  uint64_t seed = 0;

  void validate() const;
};

/// U-Net with symmetric skips: conv-IN-LeakyReLU down, transposed conv-IN-ReLU up.
class UNetImpl : public torch::nn::Module {
 public:
  UNetImpl(int64_t base_channels, int64_t max_channels, int depth);
  torch::Tensor forward(const torch::Tensor& x);
  int depth() const { return static_cast<int>(down_.size()); }

 private:
  std::vector<torch::nn::Conv2d> down_;
  std::vector<torch::nn::ConvTranspose2d> up_;
};
TORCH_MODULE(UNet);

class Pix2pixModel final : public TranslationModel {
 public:
  Pix2pixModel(Pix2pixConfig cfg, TrainSchedule schedule, int resolution);

  std::string kind() const override { return "pix2pix"; }
  bool supports(Direction d) const override { return d == Direction::XtoY; }
  bool needs_pairs() const override { return true; }
  torch::Tensor translate(const torch::Tensor& x, Direction direction) override;
  torch::Tensor reconstruct(const torch::Tensor& x, Direction direction) override;
  LossReport step(const StepInputs& inputs, int64_t iter) override;
  void save(torch::serialize::OutputArchive& archive) override;
  void load(torch::serialize::InputArchive& archive) override;
  void to(torch::Device device) override;

  /// Alternating discriminator/generator updates on aligned pairs.
  LossReport pix2pix_step(const torch::Tensor& x, const torch::Tensor& y_truth, int64_t iter);

  UNet generator() const { return g_; }
  MultiScaleDiscriminator discriminator() const { return d_; }

 private:
  Pix2pixConfig cfg_;
  TrainSchedule schedule_;
  UNet g_{nullptr};
  MultiScaleDiscriminator d_{nullptr};
  std::unique_ptr<torch::optim::Adam> opt_g_, opt_d_;
};

}  // namespace facecycle
