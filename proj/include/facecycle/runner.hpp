#pragma once

#include "facecycle/baselines.hpp"
#include "facecycle/metrics.hpp"

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace facecycle {

enum class ModelKind { CycleGanGuided, Vae, Pix2pix, Identity };
std::string_view to_string(ModelKind kind);
ModelKind parse_model_kind(std::string_view text);

struct DataConfig {
  std::filesystem::path x_dir;
  std::filesystem::path y_dir;
  double train_frac = 0.8;
  MissingSidecarPolicy missing_sidecars = MissingSidecarPolicy::Strict;
};

struct MetricOptions {
  int fid_splits = 10;
  int timing_images = 1000;
  int timing_warmup = 50;
  int eval_batch = 32;
  /// Images in the fixed generation probe behind collapse_events.
  int probe_size = 64;
  /// Rows used for d_loss_variance; 0 means the final 25% of the run.
  int stability_tail_steps = 0;
};

struct OutputOptions {
  /// Checkpoint cadence in iterations; the final iteration is always saved.
  int checkpoint_every = 0;
  int sample_every = 0;
  int log_every = 50;
};

/// Everything a run needs. Sections of the JSON file mirror the members;
/// keys outside the known set are rejected.
struct RunConfig {
  ModelKind model = ModelKind::CycleGanGuided;
  uint64_t seed = 0;
  std::filesystem::path output_dir = "runs/default";
  Precision precision = Precision::FP32;
  DataConfig data;
  TrainSchedule schedule;
  LossWeights weights;
  GeneratorConfig generator;
  DiscriminatorConfig discriminator;
  AugmentPolicy augment;
  bool diff_augment = true;
  PatchSampleSpec nce;
  bool saturating_gan = false;
  int history_size = 0;
  bool eval_ema = true;
  RetrievalMetric retrieval = RetrievalMetric::Cosine;
  VaeConfig vae;
  Pix2pixConfig pix2pix;
  MetricOptions metrics;
  OutputOptions output;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  std::string to_json() const;
  /// Parses JSON text onto the defaults; unknown keys and type errors throw.
  static RunConfig from_json(const std::string& text);
  /// Applies "section.key=value" (or "key=value" for top-level fields).
  void apply_override(const std::string& assignment);

  /// Largest training resolution.
  int resolution() const { return schedule.resolutions.back(); }
  CycleGanConfig cyclegan_config() const;
  VaeConfig vae_config() const;
  Pix2pixConfig pix2pix_config() const;
};

RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

/// Compute device from RUN_DEVICE (cpu, cuda, cuda:N); defaults to cpu.
torch::Device run_device();

std::unique_ptr<TranslationModel> make_model(const RunConfig& cfg);

inline constexpr int kCheckpointFormatVersion = 1;

void save_checkpoint(const std::filesystem::path& path, TranslationModel& model, const RunConfig& cfg);

struct LoadedModel {
  RunConfig config;
  std::unique_ptr<TranslationModel> model;
};
LoadedModel load_checkpoint(const std::filesystem::path& path);

/// Identity-disjoint split of both domains, as recorded in splits.json.
struct RunSplits {
  DatasetManifest x_train, x_test, y_train, y_test;
};
RunSplits make_splits(const RunConfig& cfg);
void save_splits(const std::filesystem::path& run_dir, const RunSplits& splits);
RunSplits load_splits(const std::filesystem::path& run_dir);

struct TrainResult {
  std::filesystem::path run_dir;
  std::filesystem::path final_checkpoint;
  int64_t rows = 0;
};

/// Writes config.snapshot.json, splits.json, losses.csv, events.log,
/// checkpoints/iter_N.ckpt and samples/ under cfg.output_dir.
TrainResult cmd_train(const RunConfig& cfg);

/// Translates every image of `input_dir`; outputs keep the source ids.
/// Returns the number of images written.
int64_t cmd_translate(const std::filesystem::path& checkpoint, const std::filesystem::path& input_dir,
                      Direction direction, const std::filesystem::path& out_dir);

struct EvaluateRequest {
  std::vector<std::filesystem::path> checkpoints;
  EvalProtocol protocol = EvalProtocol::Unpaired;
  /// Test directories; default to the held-out split of each checkpoint's run.
  std::optional<std::filesystem::path> x_test_dir;
  std::optional<std::filesystem::path> y_test_dir;
  std::filesystem::path out_dir = ".";
  /// Overrides the stored timing image count when set.
  std::optional<int> timing_images;
};

/// Writes report.json and report.md; returns the per-checkpoint reports.
std::vector<MetricReport> cmd_evaluate(const EvaluateRequest& request);

const std::vector<std::string>& ablation_axes();
/// cfg with one component disabled.
RunConfig ablate_variant(const RunConfig& cfg, const std::string& axis);

struct AblateRequest {
  std::vector<std::string> axes;
  std::vector<uint64_t> seeds;  // empty: the config seed only
  bool evaluate = true;
};

struct AblateEntry {
  std::string variant;
  uint64_t seed = 0;
  StabilityIndicators stability;
  std::optional<MetricReport> report;
};

struct AblateResult {
  std::vector<AblateEntry> entries;
  /// Median d_loss_variance per variant over seeds.
  std::map<std::string, double> median_d_loss_variance;
};

/// Trains the base config and one variant per axis for every seed under
/// cfg.output_dir/ablate, then writes ablate_report.json and ablate_report.md.
AblateResult cmd_ablate(const RunConfig& cfg, const AblateRequest& request);

/// Overlaid smoothed total-loss curves (loss_curves.svg) and a convergence
/// table (convergence.md). Returns the table text.
std::string cmd_plot(const std::vector<std::filesystem::path>& run_dirs, const std::filesystem::path& out_dir,
                     int smoothing_window = 50);

/// Trailing moving average; early entries average what is available.
std::vector<double> moving_average(const std::vector<double>& values, int window);

}  // namespace facecycle
