#pragma once

#include "facecycle/core_types.hpp"
#include "facecycle/guidance.hpp"
#include "facecycle/image_io.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace facecycle {

/// Image ids of one domain directory. Cached as `manifest.json` in the root.
struct DatasetManifest {
  std::filesystem::path root;
  Domain domain = Domain::X;
  std::vector<std::string> ids;
  std::map<std::string, std::string> files;  // id -> file name
  bool has_sidecars = false;
  std::map<std::string, std::string> paired_with;  // id -> id in the other domain
  int64_t skipped = 0;                             // undecodable files seen at ingestion

  void validate() const;
  void save() const;
  static DatasetManifest load(const std::filesystem::path& root);
  /// Subset with the given ids, same root and pairing restricted to them.
  DatasetManifest subset(const std::vector<std::string>& keep) const;
};

/// Identity key of an image id: prefix before the first underscore.
std::string identity_of(const std::string& image_id);

/// Scans `root` for PNG/JPEG images (sidecar masks excluded).
DatasetManifest ingest_directory(const std::filesystem::path& root, Domain domain);

enum class InputRange { Unit, Signed };

/// Center square crop, bilinear resize to `resolution`, map to [-1, 1].
/// `image` is [3, H, W] in [0, 1] (Unit) or already in [-1, 1] (Signed).
torch::Tensor preprocess(const torch::Tensor& image, int resolution, InputRange range = InputRange::Unit);
torch::Tensor preprocess(const Image& image, int resolution);

struct SplitSpec {
  double train_frac = 0.8;
  uint64_t seed = 0;
};

/// Identity-disjoint train/test partition (identities shuffled with the seed).
std::pair<DatasetManifest, DatasetManifest> split(const DatasetManifest& manifest, const SplitSpec& spec);

struct ToyDomains {
  std::filesystem::path dir_x;
  std::filesystem::path dir_y;
};

/// Renders paired synthetic faces into `<out>/X` and `<out>/Y` with exact
/// sidecars. Image `idNNN_MMM` has identity `idNNN` and the same geometry in
/// both domains.
ToyDomains make_toy_domains(const std::filesystem::path& out, int n_per_domain, int resolution, uint64_t seed,
                            int images_per_identity = 10);

/// One sampled minibatch with its constant guidance.
struct TrainBatch {
  torch::Tensor images;           // [N, 3, R, R] in [-1, 1]
  torch::Tensor masks;            // [N, R, R]
  torch::Tensor landmarks;        // [N, K, 2]
  torch::Tensor landmarks_valid;  // [N] bool
  std::vector<std::string> ids;

  int64_t size() const { return images.size(0); }
  TrainBatch slice(int64_t begin, int64_t end) const;
  TrainBatch to(torch::Device device) const;
};

struct PairedBatch {
  torch::Tensor x;  // [N, 3, R, R]
  torch::Tensor y;  // aligned targets
};

/// Decoded, preprocessed images of one manifest held in memory.
class ImageDataset {
 public:
  static ImageDataset load(const DatasetManifest& manifest, int resolution, MissingSidecarPolicy policy);
  static ImageDataset from_tensors(torch::Tensor images, torch::Tensor masks, torch::Tensor landmarks,
                                   std::vector<std::string> ids);

  int64_t size() const { return images_.size(0); }
  int resolution() const { return static_cast<int>(images_.size(3)); }
  const std::vector<std::string>& ids() const { return ids_; }
  const torch::Tensor& images() const { return images_; }
  const torch::Tensor& landmarks() const { return landmarks_; }
  const torch::Tensor& landmarks_valid() const { return valid_; }
  const torch::Tensor& masks() const { return masks_; }
  const SidecarManifest& sidecar_manifest() const { return sidecar_manifest_; }

  /// Batch of the given rows, resized to `resolution` when it differs.
  TrainBatch gather(const std::vector<int64_t>& rows, int resolution) const;
  int64_t index_of(const std::string& id) const;

 private:
  torch::Tensor images_, masks_, landmarks_, valid_;
  std::vector<std::string> ids_;
  SidecarManifest sidecar_manifest_;
};

/// Independent seeded shuffles per domain, reshuffled when exhausted.
class UnpairedSampler {
 public:
  UnpairedSampler(int64_t n_x, int64_t n_y, int64_t batch, uint64_t seed);

  std::pair<std::vector<int64_t>, std::vector<int64_t>> next();
  /// Completed passes over domain X.
  int64_t epoch() const { return epoch_x_; }
  int64_t batches_per_epoch() const { return n_x_ / batch_; }

 private:
  std::vector<int64_t> draw(std::vector<int64_t>& perm, size_t& cursor, int64_t n, int64_t& epoch, uint64_t stream);

  int64_t n_x_, n_y_, batch_;
  uint64_t seed_;
  std::vector<int64_t> perm_x_, perm_y_;
  size_t cursor_x_ = 0, cursor_y_ = 0;
  int64_t epoch_x_ = 0, epoch_y_ = 0;
};

/// Rows of the two domains that form curated pairs, aligned by position.
struct PairIndex {
  std::vector<int64_t> rows_x;
  std::vector<int64_t> rows_y;
};
PairIndex paired_rows(const ImageDataset& x, const ImageDataset& y, const DatasetManifest& manifest_x);

PairedBatch gather_pairs(const ImageDataset& x, const ImageDataset& y, const PairIndex& pairs,
                         const std::vector<int64_t>& positions, int resolution);

}  // namespace facecycle
