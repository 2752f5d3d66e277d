#pragma once

#include "facecycle/core_types.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace facecycle {

struct LossWeights {
  double cyc = 10.0;
  double id = 1.0;
  double perc = 0.5;
  double sem = 2.0;
  double lmk = 1.0;
  double con = 0.5;
  double paired = 10.0;

  void validate() const;
};

struct PatchSampleSpec {
  int n_patches = 256;
  std::vector<int> tap_scales{4, 8};  // denominators of the generator encoder taps
  double temperature = 0.07;
  int projection_dim = 256;
  /// Negatives from every image of the batch instead of the anchor's own map.
  bool batch_negatives = false;

  void validate() const;
};

/// Discriminator loss, mean over scales of softplus(-real) + softplus(fake).
torch::Tensor adv_d_loss(const std::vector<torch::Tensor>& real_logits,
                         const std::vector<torch::Tensor>& fake_logits);

/// Generator loss. Non-saturating softplus(-fake) by default; the saturating
/// variant minimises -softplus(fake) = log(1 - D(G(x))).
torch::Tensor adv_g_loss(const std::vector<torch::Tensor>& fake_logits, bool saturating = false);

torch::Tensor cycle_loss(const torch::Tensor& x, const torch::Tensor& x_rec, const torch::Tensor& y,
                         const torch::Tensor& y_rec);

/// Embeddings are [N, D]. Range [0, 4].
torch::Tensor identity_loss(const torch::Tensor& e_x, const torch::Tensor& e_gx, const torch::Tensor& e_y,
                            const torch::Tensor& e_gy);

/// Pseudo-pair targets (`feat_ystar`, `feat_xstar`) are detached.
torch::Tensor perceptual_loss(const std::vector<torch::Tensor>& feat_gx, const std::vector<torch::Tensor>& feat_ystar,
                              const std::vector<torch::Tensor>& feat_gy, const std::vector<torch::Tensor>& feat_xstar);

/// Masks are [N, H, W] or [H, W], broadcast over channels and detached.
torch::Tensor semantic_cycle_loss(const torch::Tensor& x, const torch::Tensor& x_rec, const torch::Tensor& mask_x,
                                  const torch::Tensor& y, const torch::Tensor& y_rec, const torch::Tensor& mask_y);

/// Landmarks [N, K, 2]. Frobenius norm per image, averaged over the batch.
/// Source landmarks are detached. `valid_*` ([N] bool) drops samples without
/// ground truth; an all-invalid batch contributes zero.
torch::Tensor landmark_loss(const torch::Tensor& l_x, const torch::Tensor& l_gx, const torch::Tensor& l_y,
                            const torch::Tensor& l_gy, const torch::Tensor& valid_x = {},
                            const torch::Tensor& valid_y = {});

/// Mean-per-element L1 between a paired prediction and its ground truth.
torch::Tensor paired_l1_loss(const torch::Tensor& prediction, const torch::Tensor& truth);

/// Mean per-landmark distance; reporting only.
torch::Tensor mean_landmark_distance(const torch::Tensor& a, const torch::Tensor& b);

/// Two-layer MLP per tap, trained jointly with the generator.
class PatchProjectionImpl : public torch::nn::Module {
 public:
  PatchProjectionImpl(const std::vector<int64_t>& in_channels, int64_t projection_dim);

  /// [M, C] -> unit-norm [M, P] for tap `tap`.
  torch::Tensor project(size_t tap, const torch::Tensor& x);
  size_t tap_count() const { return heads_.size(); }

 private:
  std::vector<torch::nn::Sequential> heads_;
};
TORCH_MODULE(PatchProjection);

/// InfoNCE over sampled locations: each source patch is the anchor, the
/// output patch at the same location the positive, other sampled locations
/// the negatives. Averaged over taps.
torch::Tensor patch_nce_loss(const std::vector<torch::Tensor>& feat_src, const std::vector<torch::Tensor>& feat_out,
                             PatchProjection& head, const PatchSampleSpec& spec, uint64_t sampler_seed);

/// Generator-side components by name. Absent components count as zero and
/// may only be absent when their weight is zero.
struct LossTerms {
  std::map<std::string, torch::Tensor> components;
  /// Discriminator losses of the same step, reported but not summed.
  std::map<std::string, double> extra;
};

struct WeightedTotal {
  torch::Tensor total;
  LossReport report;
};

/// Component names in reporting order.
const std::vector<std::string>& generator_component_names();

WeightedTotal total_generator_loss(const LossTerms& terms, const LossWeights& weights, bool hybrid = false);

}  // namespace facecycle
