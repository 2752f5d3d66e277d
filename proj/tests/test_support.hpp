#pragma once

#include "facecycle/runner.hpp"
#include "facecycle/toy_faces.hpp"

#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace facecycle::testing {

/// Relative error ||analytic - numeric|| / max(||analytic||, ||numeric||) of the
/// gradient of a scalar function, central differences with step `h`. Inputs
/// are cloned to double; only those flagged in `wrt` are perturbed.
inline double gradient_error(const std::function<torch::Tensor(const std::vector<torch::Tensor>&)>& f,
                             std::vector<torch::Tensor> inputs, const std::vector<bool>& wrt, double h = 1e-4) {
  for (size_t i = 0; i < inputs.size(); ++i) {
    inputs[i] = inputs[i].detach().to(torch::kDouble).clone().requires_grad_(wrt[i]);
  }
  auto out = f(inputs);
  std::vector<torch::Tensor> targets;
  for (size_t i = 0; i < inputs.size(); ++i) {
    if (wrt[i]) targets.push_back(inputs[i]);
  }
  auto grads = torch::autograd::grad({out}, targets, {}, false, false, true);

  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  size_t g = 0;
  torch::NoGradGuard no_grad;
  for (size_t i = 0; i < inputs.size(); ++i) {
    if (!wrt[i]) continue;
    auto analytic = grads[g++];
    if (!analytic.defined()) analytic = torch::zeros_like(inputs[i]);
    auto flat = inputs[i].view(-1);
    auto an = analytic.reshape(-1);
    for (int64_t k = 0; k < flat.numel(); ++k) {
      const double orig = flat[k].item<double>();
      flat[k] = orig + h;
      const double up = f(inputs).item<double>();
      flat[k] = orig - h;
      const double down = f(inputs).item<double>();
      flat[k] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = an[k].item<double>();
      diff2 += (a - numeric) * (a - numeric);
      a2 += a * a;
      n2 += numeric * numeric;
    }
  }
  const double scale = std::max(std::sqrt(a2), std::sqrt(n2));
  return scale == 0.0 ? 0.0 : std::sqrt(diff2) / scale;
}

/// Fresh directory under the system temp root, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("facecycle_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// Small CycleGAN at 64 px that trains in well under a second per step.
inline RunConfig tiny_cyclegan_config(const std::filesystem::path& x_dir, const std::filesystem::path& y_dir,
                                      const std::filesystem::path& out_dir, int64_t iters) {
  RunConfig cfg;
  cfg.model = ModelKind::CycleGanGuided;
  cfg.output_dir = out_dir;
  cfg.data.x_dir = x_dir;
  cfg.data.y_dir = y_dir;
  cfg.schedule.resolutions = {64};
  cfg.schedule.total_iters = iters;
  cfg.schedule.batch_size = 2;
  cfg.generator.base_channels = 8;
  cfg.generator.max_channels = 32;
  cfg.generator.n_downsample = 2;
  cfg.generator.n_res_blocks = 2;
  cfg.generator.n_adain_blocks = 1;
  cfg.generator.attention_scales = {4};
  cfg.generator.skip_scales = {2};
  cfg.generator.style_dim = 8;
  cfg.discriminator.base_channels = 8;
  cfg.discriminator.max_channels = 32;
  cfg.discriminator.n_layers = 3;
  cfg.nce.tap_scales = {2, 4};
  cfg.nce.n_patches = 16;
  cfg.nce.projection_dim = 16;
  cfg.metrics.fid_splits = 2;
  cfg.metrics.timing_images = 2;
  cfg.metrics.timing_warmup = 1;
  cfg.metrics.probe_size = 8;
  cfg.output.log_every = 1000;
  return cfg;
}

/// Rendered toy faces as a training batch (images in [-1, 1]).
inline TrainBatch toy_batch(int64_t n, int resolution, uint64_t seed, Domain domain) {
  std::mt19937_64 rng(seed);
  std::vector<torch::Tensor> images, masks, landmarks;
  TrainBatch b;
  for (int64_t i = 0; i < n; ++i) {
    auto r = toy::render(toy::jitter(toy::sample_identity(rng), rng), domain, resolution);
    images.push_back(r.image * 2 - 1);
    masks.push_back(r.mask);
    landmarks.push_back(r.landmarks.to(torch::kFloat));
    b.ids.push_back("id" + std::to_string(i) + "_000");
  }
  b.images = torch::stack(images);
  b.masks = torch::stack(masks);
  b.landmarks = torch::stack(landmarks);
  b.landmarks_valid = torch::ones({n}, torch::kBool);
  return b;
}

inline std::unique_ptr<CycleGanModel> tiny_cyclegan(int64_t iters, uint64_t seed = 0) {
  auto cfg = tiny_cyclegan_config("x", "y", "out", iters);
  cfg.seed = seed;
  auto cg = cfg.cyclegan_config();
  return std::make_unique<CycleGanModel>(cg, cfg.schedule, GuidanceSet::toy(0));
}

}  // namespace facecycle::testing
