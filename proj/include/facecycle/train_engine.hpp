#pragma once

#include "facecycle/data_pipeline.hpp"
#include "facecycle/guidance.hpp"
#include "facecycle/losses.hpp"
#include "facecycle/networks.hpp"

#include <deque>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace facecycle {

struct TrainSchedule {
  int64_t total_iters = 2000;
  double ttur_phase_frac = 0.25;
  int ttur_ratio = 2;
  bool ttur = true;
  double lr0 = 2e-4;
  double adam_beta1 = 0.5;
  double adam_beta2 = 0.999;
  double ema_decay = 0.999;
  bool ema = true;
  double clip_max_norm = 10.0;
  double resize_switch_frac = 0.5;
  std::vector<int> resolutions{128, 256};
  int batch_size = 4;
  /// Micro-batches per optimiser step; losses are divided by this factor.
  int accumulation = 1;

  void validate() const;
};

struct AugmentPolicy {
  double translate_frac = 0.125;
  double brightness = 0.2;
  double saturation_lo = 0.5, saturation_hi = 1.5;
  double contrast_lo = 0.75, contrast_hi = 1.25;
  double cutout_frac = 0.5;
  double apply_prob = 0.8;

  void validate() const;
  /// Policy under which diff_augment is the identity.
  static AugmentPolicy none();
};

/// (discriminator steps, generator steps) at `iter`.
std::pair<int, int> ttur_steps(int64_t iter, const TrainSchedule& schedule);

/// lr0 for the first half, then linear to zero at total_iters.
double learning_rate(int64_t iter, const TrainSchedule& schedule);

int current_resolution(int64_t iter, const TrainSchedule& schedule);

/// shadow <- decay * shadow + (1 - decay) * live, in place.
void ema_update(const std::vector<torch::Tensor>& shadow, const std::vector<torch::Tensor>& live, double decay);

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping. `group` names the parameter set in
/// errors about non-finite entries.
double clip_global_norm(const std::vector<torch::Tensor>& grads, double max_norm, const std::string& group = "params");

/// Gradients of every parameter that has one.
std::vector<torch::Tensor> gradients_of(const std::vector<torch::Tensor>& params);

/// Integer shift per image with zero fill: out[.., r, c] = in[.., r - dy, c - dx].
torch::Tensor translate_images(const torch::Tensor& x, const std::vector<std::pair<int64_t, int64_t>>& shifts);

/// Applies one seeded draw of translation, colour jitter and cutout to both
/// tensors. Every transform is linear in the pixels given the draw.
std::pair<torch::Tensor, torch::Tensor> diff_augment(const torch::Tensor& real, const torch::Tensor& fake,
                                                     const AugmentPolicy& policy, uint64_t seed);

/// Single-tensor variant with the same draw semantics.
torch::Tensor diff_augment_one(const torch::Tensor& x, const AugmentPolicy& policy, uint64_t seed);

enum class Precision { FP32, Mixed };

struct StepInputs {
  TrainBatch x;
  TrainBatch y;
  std::optional<PairedBatch> paired;
};

/// What every trainable model exposes to the runner and the metrics.
class TranslationModel {
 public:
  virtual ~TranslationModel() = default;

  virtual std::string kind() const = 0;
  virtual bool supports(Direction direction) const = 0;
  virtual bool needs_pairs() const { return false; }
  /// Evaluation-mode translation of [N, 3, R, R] images in [-1, 1].
  virtual torch::Tensor translate(const torch::Tensor& x, Direction direction) = 0;
  /// Round trip used for cycle/reconstruction scores.
  virtual torch::Tensor reconstruct(const torch::Tensor& x, Direction direction);
  virtual LossReport step(const StepInputs& inputs, int64_t iter) = 0;
  virtual void save(torch::serialize::OutputArchive& archive) = 0;
  virtual void load(torch::serialize::InputArchive& archive) = 0;
  virtual void to(torch::Device device) = 0;

  int64_t d_updates() const { return d_updates_; }
  int64_t g_updates() const { return g_updates_; }

 protected:
  int64_t d_updates_ = 0;
  int64_t g_updates_ = 0;
};

/// Returns its input; used to check the evaluation and translation plumbing.
class IdentityModel final : public TranslationModel {
 public:
  std::string kind() const override { return "identity"; }
  bool supports(Direction) const override { return true; }
  torch::Tensor translate(const torch::Tensor& x, Direction) override { return x; }
  LossReport step(const StepInputs&, int64_t) override;
  void save(torch::serialize::OutputArchive&) override {}
  void load(torch::serialize::InputArchive&) override {}
  void to(torch::Device) override {}
};

/// Frozen providers used by the guidance losses.
struct GuidanceSet {
  std::optional<FrozenEncoder> identity;
  std::optional<FrozenEncoder> perceptual;
  std::shared_ptr<LandmarkEstimator> landmarks;

  /// Toy stand-ins seeded from `seed`.
  static GuidanceSet toy(uint64_t seed);
};

struct CycleGanConfig {
  GeneratorConfig generator;
  DiscriminatorConfig discriminator;
  LossWeights weights;
  PatchSampleSpec nce;
  AugmentPolicy augment;
  bool diff_augment = true;
  bool saturating_gan = false;
  RetrievalMetric retrieval = RetrievalMetric::Cosine;
  /// Past fakes replayed to the discriminator; 0 disables the buffer.
  int history_size = 0;
  Precision precision = Precision::FP32;
  /// Translate with EMA weights (live weights otherwise).
  bool eval_ema = true;
  uint64_t seed = 0;

  void validate() const;
};

class CycleGanModel final : public TranslationModel {
 public:
  CycleGanModel(CycleGanConfig cfg, TrainSchedule schedule, GuidanceSet guidance);

  std::string kind() const override { return "cyclegan_guided"; }
  bool supports(Direction) const override { return true; }
  torch::Tensor translate(const torch::Tensor& x, Direction direction) override;
  LossReport step(const StepInputs& inputs, int64_t iter) override;
  void save(torch::serialize::OutputArchive& archive) override;
  void load(torch::serialize::InputArchive& archive) override;
  void to(torch::Device device) override;

  /// TTUR discriminator updates followed by generator updates on one batch.
  LossReport train_step(const TrainBatch& batch_x, const TrainBatch& batch_y, int64_t iter);
  /// train_step with an added conditional adversarial term and
  /// lambda_paired * L1(G_xy(x), y_truth) on a curated pair batch.
  LossReport hybrid_paired_step(const PairedBatch& paired, const TrainBatch& batch_x, const TrainBatch& batch_y,
                                int64_t iter);

  Generator g_xy() const { return g_xy_; }
  Generator g_yx() const { return g_yx_; }
  Generator ema_xy() const { return ema_xy_; }
  Generator ema_yx() const { return ema_yx_; }
  MultiScaleDiscriminator d_x() const { return d_x_; }
  MultiScaleDiscriminator d_y() const { return d_y_; }
  const CycleGanConfig& config() const { return cfg_; }
  const GuidanceSet& guidance() const { return guidance_; }
  std::vector<torch::Tensor> generator_parameters() const;
  std::vector<torch::Tensor> discriminator_parameters() const;

 private:
  double discriminator_update(const TrainBatch& bx, const TrainBatch& by, const PairedBatch* paired, int64_t iter,
                              int substep, double& loss_dx, double& loss_dy);
  LossReport generator_update(const TrainBatch& bx, const TrainBatch& by, const PairedBatch* paired, int64_t iter,
                              int substep, const LossReport& d_report);
  LossTerms generator_terms(const TrainBatch& bx, const TrainBatch& by, const PairedBatch* paired, int64_t iter,
                            int substep);
  torch::Tensor replay(std::deque<torch::Tensor>& pool, const torch::Tensor& fakes, uint64_t seed);
  void set_learning_rate(double lr);
  LossReport run_step(const TrainBatch& bx, const TrainBatch& by, const PairedBatch* paired, int64_t iter);

  CycleGanConfig cfg_;
  TrainSchedule schedule_;
  GuidanceSet guidance_;
  Generator g_xy_{nullptr}, g_yx_{nullptr}, ema_xy_{nullptr}, ema_yx_{nullptr};
  MultiScaleDiscriminator d_x_{nullptr}, d_y_{nullptr}, d_pair_{nullptr};
  PatchProjection nce_xy_{nullptr}, nce_yx_{nullptr};
  std::unique_ptr<torch::optim::Adam> opt_g_, opt_d_;
  std::deque<torch::Tensor> pool_x_, pool_y_;
};

/// Elementwise copy between two matching tensor lists.
void copy_parameters(const std::vector<torch::Tensor>& dst, const std::vector<torch::Tensor>& src);

}  // namespace facecycle
