#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>

namespace facecycle {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration or user input. Mapped to exit code 2 by the CLI.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Non-finite values or failed numerical preconditions. Exit code 3.
class NumericError : public Error {
 public:
  using Error::Error;
};

enum class Domain { X, Y };

enum class Direction { XtoY, YtoX };

std::string_view to_string(Domain d);
std::string_view to_string(Direction d);
Direction parse_direction(std::string_view text);

Domain source_domain(Direction d);
Domain target_domain(Direction d);

/// A batch of RGB images in [-1, 1] with layout [N, 3, H, W].
///
/// Construction validates the layout, the value range and the resolution
/// (square, one of 64/128/256). Everything downstream of the data pipeline
/// can rely on these invariants without re-checking.
class ImageBatch {
 public:
  ImageBatch(torch::Tensor data, Domain domain);

  const torch::Tensor& data() const { return data_; }
  Domain domain() const { return domain_; }
  int64_t size() const { return data_.size(0); }
  int64_t resolution() const { return data_.size(3); }

  static bool is_supported_resolution(int64_t r) { return r == 64 || r == 128 || r == 256; }

 private:
  torch::Tensor data_;
  Domain domain_;
};

/// Landmarks in pixel coordinates, [K, 2] (x, y) or batched [N, K, 2].
struct LandmarkSet {
  torch::Tensor points;

  int64_t count() const { return points.size(-2); }
  /// Throws unless every coordinate lies in [0, width) x [0, height).
  void validate(int64_t width, int64_t height) const;
};

/// Per-pixel weights in [0, 1], [H, W] or batched [N, H, W].
struct ParsingMask {
  torch::Tensor weights;
  void validate() const;
};

struct IdentityEmbedding {
  torch::Tensor vector;
};

/// Scalar summary of one optimisation step.
struct LossReport {
  std::map<std::string, double> components;
  std::map<std::string, double> weights;
  double total = 0.0;

  double at(const std::string& name) const;
  bool all_finite() const;
};

/// Maps [-1, 1] to [0, 1].
torch::Tensor to_unit_range(const torch::Tensor& x);
/// Maps [0, 1] to [-1, 1].
torch::Tensor from_unit_range(const torch::Tensor& x);

/// Cosine similarity of two vectors; throws on a zero-norm input.
double cosine_similarity(const torch::Tensor& u, const torch::Tensor& v);

/// splitmix64 finaliser, used to derive independent sub-seeds.
uint64_t mix_seed(uint64_t a, uint64_t b);

torch::Generator make_generator(uint64_t seed);

/// Sets reduced-precision autocast on the CPU for the lifetime of the scope
/// and restores the previous state afterwards.
class AutocastScope {
 public:
  explicit AutocastScope(bool enabled);
  ~AutocastScope();
  AutocastScope(const AutocastScope&) = delete;
  AutocastScope& operator=(const AutocastScope&) = delete;

 private:
  bool previous_;
};

}  // namespace facecycle
