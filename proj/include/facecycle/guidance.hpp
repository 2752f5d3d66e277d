#pragma once

#include "facecycle/core_types.hpp"

#include <atomic>
#include <filesystem>
#include <functional>
#include <memory>
#include <vector>

namespace facecycle {

enum class EncoderKind { Identity, Perceptual };

/// A frozen convolutional feature provider.
///
/// Weights never receive gradients, but the computation stays differentiable
/// with respect to the input image so identity and perceptual losses can
/// backpropagate into a generator. Instances are cheap handles sharing one
/// immutable network; `calls()` counts forwards across all copies.
class FrozenEncoder {
 public:
  struct Stage {
    torch::nn::Sequential layers;
    int stride;  // cumulative stride after this stage
  };

  FrozenEncoder(EncoderKind kind, std::vector<Stage> stages, std::vector<int> taps, torch::nn::Linear head,
                bool grayscale_input);

  /// Seeded toy face embedder: greyscale, instance-standardised input, three
  /// stride-2 conv stages, global pooling, linear head, L2 normalisation.
  static FrozenEncoder toy_identity(uint64_t seed, int64_t embed_dim = 128);
  /// Seeded toy perceptual backbone with stages at strides 2, 4 and 8.
  static FrozenEncoder toy_perceptual(uint64_t seed, std::vector<int> taps = {0, 1});

  EncoderKind kind() const { return state_->kind; }
  const std::vector<int>& taps() const { return state_->taps; }
  std::vector<int> tap_strides() const;
  int64_t calls() const { return state_->calls.load(); }
  std::vector<torch::Tensor> weights() const;

  /// Unit-norm embeddings [N, D] of images in [-1, 1]. Identity kind only.
  torch::Tensor embed(const torch::Tensor& x) const;
  /// One feature map per tap, decreasing resolution. Perceptual kind only.
  std::vector<torch::Tensor> features(const torch::Tensor& x) const;

  void to(torch::Device device) const;

 private:
  struct State {
    EncoderKind kind;
    std::vector<Stage> stages;
    std::vector<int> taps;
    torch::nn::Linear head{nullptr};
    bool grayscale_input = false;
    mutable std::atomic<int64_t> calls{0};
  };
  std::shared_ptr<State> state_;
};

torch::Tensor embed_identity(const torch::Tensor& x, const FrozenEncoder& encoder);
std::vector<torch::Tensor> extract_features(const torch::Tensor& x, const FrozenEncoder& encoder);

/// Differentiable landmark predictor L(.) applied to generated images.
class LandmarkEstimator {
 public:
  virtual ~LandmarkEstimator() = default;
  /// [N, 3, H, W] in [-1, 1] to [N, K, 2] pixel coordinates.
  virtual torch::Tensor estimate(const torch::Tensor& images) const = 0;
  virtual int64_t landmark_count() const = 0;
  int64_t calls() const { return calls_.load(); }

 protected:
  void count_call() const { calls_.fetch_add(1); }

 private:
  mutable std::atomic<int64_t> calls_{0};
};

/// Analytic estimator for the synthetic toy faces: darkness-weighted
/// centroids inside fixed search windows for eyes and nose, soft extremes of
/// the mouth stroke for its corners.
class ToyLandmarkEstimator final : public LandmarkEstimator {
 public:
  explicit ToyLandmarkEstimator(double corner_temperature_px = 1.1) : temperature_(corner_temperature_px) {}
  torch::Tensor estimate(const torch::Tensor& images) const override;
  int64_t landmark_count() const override { return 5; }

 private:
  double temperature_;
};

enum class RetrievalMetric { Cosine, L2 };

/// Spatially averaged taps concatenated to [N, sum C].
torch::Tensor pooled_descriptor(const std::vector<torch::Tensor>& features);

/// For each query row the index of the closest gallery row (cosine: highest
/// similarity; L2: smallest distance). Ties go to the lowest index.
std::vector<int64_t> nearest_neighbors(const torch::Tensor& queries, const torch::Tensor& gallery,
                                       RetrievalMetric metric = RetrievalMetric::Cosine);

struct PseudoPairs {
  std::vector<int64_t> idx_for_x;  // indices into batch_y
  std::vector<int64_t> idx_for_y;  // indices into batch_x
};

/// Cross-domain nearest neighbours in pooled perceptual space. No gradient.
PseudoPairs retrieve_pseudo_pairs(const torch::Tensor& batch_x, const torch::Tensor& batch_y,
                                  const FrozenEncoder& encoder, RetrievalMetric metric = RetrievalMetric::Cosine);

// ---------------------------------------------------------------------------
// Sidecars: <id>.mask.png, <id>.landmarks.csv and sidecar_manifest.json.

struct SidecarManifest {
  int resolution = 256;
  int landmark_count = 5;
  std::array<int, 2> eye_indices{0, 1};

  static SidecarManifest load(const std::filesystem::path& dir);
  void save(const std::filesystem::path& dir) const;
};

enum class MissingSidecarPolicy { Strict, NeutralDefault };

struct Sidecars {
  torch::Tensor mask;       // [R, R] in [0, 1]
  torch::Tensor landmarks;  // [K, 2] at R
  bool landmarks_valid = true;
};

class SidecarStore {
 public:
  SidecarStore(std::filesystem::path dir, MissingSidecarPolicy policy);

  /// Mask resized (bilinear) to `resolution` and clamped; landmarks scaled by
  /// resolution / authored resolution.
  Sidecars load(const std::string& image_id, int resolution) const;
  bool has(const std::string& image_id) const;
  const SidecarManifest& manifest() const { return manifest_; }

 private:
  std::filesystem::path dir_;
  MissingSidecarPolicy policy_;
  SidecarManifest manifest_;
};

Sidecars load_sidecars(const std::string& image_id, const SidecarStore& store, int resolution);

void write_landmarks_csv(const std::filesystem::path& path, const torch::Tensor& landmarks);
torch::Tensor read_landmarks_csv(const std::filesystem::path& path);

/// Bilinear resize with half-pixel centres (no antialiasing): [.., H, W] -> [.., R, R].
torch::Tensor resize_bilinear(const torch::Tensor& t, int64_t out_h, int64_t out_w);

}  // namespace facecycle
