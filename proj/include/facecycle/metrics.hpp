#pragma once

#include "facecycle/guidance.hpp"
#include "facecycle/train_engine.hpp"

#include <array>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace facecycle {

/// Which comparison a number comes from. PSNR/SSIM under unpaired_cycle are
/// x vs its round trip; under reconstruction, x vs the model's own decode.
enum class ProtocolTag { Paired, UnpairedCycle, Reconstruction };
std::string_view to_string(ProtocolTag tag);
ProtocolTag parse_protocol_tag(std::string_view text);

/// Requested evaluation protocol on the command line.
enum class EvalProtocol { Paired, Unpaired };
EvalProtocol parse_eval_protocol(std::string_view text);

/// Pluggable image feature extractor for FID and the generation probe.
struct FeatureExtractor {
  std::string name;
  int64_t dim = 0;
  std::function<torch::Tensor(const torch::Tensor&)> forward;

  /// Features [N, dim] in double, computed in chunks without gradient.
  torch::Tensor operator()(const torch::Tensor& images, int64_t chunk = 64) const;

  /// Seeded random conv stack, globally pooled to `dim` channels.
  static FeatureExtractor toy(uint64_t seed = 0x7f1d, int64_t dim = 16);
};

double frechet_distance(const torch::Tensor& mu1, const torch::Tensor& cov1, const torch::Tensor& mu2,
                        const torch::Tensor& cov2);

struct GaussianMoments {
  torch::Tensor mean;  // [D] double
  torch::Tensor cov;   // [D, D] double, N - 1 denominator
};
GaussianMoments fit_moments(const torch::Tensor& features);

struct SplitStat {
  double mean = 0.0;
  double std = 0.0;
  std::vector<double> per_split;
};

/// Equal-count FID over seeded splits. The larger set is truncated to a
/// seeded subsample of the smaller one's size.
SplitStat fid_protocol(const torch::Tensor& set_a, const torch::Tensor& set_b, const FeatureExtractor& extractor,
                       int n_splits = 10, uint64_t seed = 0);

/// Images in [0, 1]. Zero error returns the 99 dB cap.
double psnr(const torch::Tensor& a, const torch::Tensor& b);
/// Gaussian-window SSIM over [.., C, H, W] images in [0, 1].
double ssim(const torch::Tensor& a, const torch::Tensor& b);

inline constexpr double kPsnrCap = 99.0;

struct FidelityScores {
  double psnr = 0.0;
  double ssim = 0.0;
};

/// x against model.reconstruct(x), both mapped from [-1, 1] to [0, 1].
FidelityScores cycle_psnr_ssim(const torch::Tensor& x_test, TranslationModel& model,
                               Direction direction = Direction::XtoY);

/// Prediction against aligned ground truth, both in [-1, 1].
FidelityScores paired_psnr_ssim(const torch::Tensor& prediction, const torch::Tensor& truth);

/// Per-image perceptual distance [N]: mean over taps of the mean squared
/// difference of channel-normalised feature maps.
torch::Tensor perceptual_distance(const torch::Tensor& a, const torch::Tensor& b, const FrozenEncoder& encoder);

struct RetrievalDistance {
  double mean = 0.0;
  std::vector<int64_t> indices;  // retrieved row of set_y per translated image
};

/// Distance from each translated image to its nearest set_y neighbour in
/// pooled feature space. Retrieval sees no gradient.
RetrievalDistance pseudo_pair_lpips(const torch::Tensor& translated, const torch::Tensor& set_y,
                                    const FrozenEncoder& encoder, RetrievalMetric metric = RetrievalMetric::Cosine);

/// Mean cosine of embeddings of index-aligned images.
double id_sim(const torch::Tensor& set_a, const torch::Tensor& set_b, const FrozenEncoder& encoder);

struct NmeResult {
  double nme = 0.0;
  int64_t counted = 0;
  int64_t skipped = 0;
};

/// Mean landmark error over interocular distance of the truth. Images with a
/// zero interocular distance, or false in `valid`, are skipped.
NmeResult landmark_nme(const torch::Tensor& pred, const torch::Tensor& truth, std::array<int, 2> eye_indices = {0, 1},
                       const torch::Tensor& valid = {});

/// Mean milliseconds per single-image forward over pre-generated inputs,
/// after `warmup` untimed forwards.
double timed_inference(const std::function<torch::Tensor(const torch::Tensor&)>& forward, int n_images = 1000,
                       int resolution = 256, int warmup = 50, torch::Device device = torch::kCPU, uint64_t seed = 0);

/// Columns of a losses.csv relevant to stability.
struct LossLog {
  std::vector<int64_t> steps;
  std::vector<int64_t> epochs;
  std::vector<double> d_loss;     // empty when the model has no discriminator
  std::vector<double> total;
  std::vector<double> probe_std;  // NaN on rows without a probe

  static LossLog read_csv(const std::filesystem::path& path);
};

struct StabilityIndicators {
  double d_loss_variance = 0.0;  // NaN without a discriminator
  int64_t epochs_to_stabilization = -1;
  int64_t collapse_events = 0;
};

inline constexpr double kStabilizationTolerance = 0.02;
inline constexpr int kStabilizationWindows = 5;
inline constexpr double kCollapseFraction = 0.1;

/// Variance of d_loss over the last `tail_steps` rows (default: final 25%);
/// first epoch after which the per-epoch mean total changes by < 2% for five
/// consecutive epochs; epochs whose probe std fell below 10% of the first.
StabilityIndicators stability_indicators(const LossLog& log, std::optional<int64_t> tail_steps = std::nullopt);
StabilityIndicators stability_indicators(const std::filesystem::path& losses_csv);

struct MetricReport {
  std::string label;
  std::string model_kind;
  ProtocolTag protocol = ProtocolTag::UnpairedCycle;
  double fid_mean = 0.0;
  double fid_std = 0.0;
  std::vector<double> fid_splits;
  double lpips_like_mean = 0.0;
  double psnr_mean = 0.0;
  double ssim_mean = 0.0;
  double id_sim_mean = 0.0;
  double nme_mean = 0.0;
  int64_t nme_skipped = 0;
  double ms_per_image = 0.0;
  double d_loss_variance = std::numeric_limits<double>::quiet_NaN();
  int64_t epochs_to_stabilization = -1;
  int64_t collapse_events = 0;
  int64_t n_test = 0;

  std::string to_json() const;
  static MetricReport from_json(const std::string& text);
};

std::string reports_to_json(const std::vector<MetricReport>& reports);

/// Comparison table with FID, LPIPS-like, PSNR, SSIM, ID-Sim and ms/img
/// columns plus a stability table. With `footnotes` off, refuses to place
/// PSNR/SSIM of different protocols in one column.
std::string render_markdown(const std::vector<MetricReport>& reports, bool footnotes = true);

struct EvalOptions {
  int fid_splits = 10;
  uint64_t seed = 0;
  int timing_images = 1000;
  int timing_warmup = 50;
  int64_t batch = 32;
  FeatureExtractor extractor = FeatureExtractor::toy();
  std::optional<FrozenEncoder> perceptual;
  std::optional<FrozenEncoder> identity;
  std::shared_ptr<LandmarkEstimator> landmarks;
};

/// Throws ConfigError quoting the rule when the model cannot be scored under
/// `protocol`.
ProtocolTag resolve_protocol(const TranslationModel& model, EvalProtocol protocol);

/// Translates in chunks of `batch` without gradient.
torch::Tensor translate_all(TranslationModel& model, const torch::Tensor& x, Direction direction, int64_t batch = 32);

/// Full X to Y report. `pairs` selects the curated paired subset and is
/// required for the paired protocol.
MetricReport evaluate_model(TranslationModel& model, const ImageDataset& test_x, const ImageDataset& test_y,
                            EvalProtocol protocol, const PairIndex* pairs, const EvalOptions& options);

}  // namespace facecycle
