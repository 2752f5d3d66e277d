#include "facecycle/data_pipeline.hpp"
#include "facecycle/toy_faces.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <random>
#include <set>

namespace facecycle {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string frame_name(int identity, int frame) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "id%03d_%03d", identity, frame);
  return buf;
}

void write_toy_image(const fs::path& dir, const std::string& id, const toy::Render& r) {
  write_png(dir / (id + ".png"), tensor_to_image(r.image));
  write_png(dir / (id + ".mask.png"), tensor_to_image(r.mask.unsqueeze(0)));
  write_landmarks_csv(dir / (id + ".landmarks.csv"), r.landmarks);
}

}  // namespace

void DatasetManifest::validate() const {
  std::set<std::string> seen;
  for (const auto& id : ids) {
    if (!seen.insert(id).second) throw Error("duplicate image id '" + id + "' in " + root.string());
  }
  std::set<std::string> targets;
  for (const auto& [from, to] : paired_with) {
    if (!targets.insert(to).second) throw Error("paired map is not injective: '" + to + "' used twice");
  }
}

void DatasetManifest::save() const {
  json j{{"domain", std::string(to_string(domain))},
         {"ids", ids},
         {"files", files},
         {"has_sidecars", has_sidecars},
         {"paired_with", paired_with},
         {"skipped", skipped}};
  std::ofstream(root / "manifest.json") << j.dump(2) << "\n";
}

DatasetManifest DatasetManifest::load(const fs::path& root) {
  std::ifstream in(root / "manifest.json");
  if (!in) throw Error("missing manifest.json in " + root.string());
  auto j = json::parse(in);
  DatasetManifest m;
  m.root = root;
  m.domain = j.at("domain").get<std::string>() == "X" ? Domain::X : Domain::Y;
  m.ids = j.at("ids").get<std::vector<std::string>>();
  m.files = j.at("files").get<std::map<std::string, std::string>>();
  m.has_sidecars = j.value("has_sidecars", false);
  m.paired_with = j.value("paired_with", std::map<std::string, std::string>{});
  m.skipped = j.value("skipped", int64_t{0});
  m.validate();
  return m;
}

DatasetManifest DatasetManifest::subset(const std::vector<std::string>& keep) const {
  DatasetManifest out = *this;
  out.ids = keep;
  out.files.clear();
  out.paired_with.clear();
  for (const auto& id : keep) {
    out.files[id] = files.at(id);
    if (auto it = paired_with.find(id); it != paired_with.end()) out.paired_with[id] = it->second;
  }
  return out;
}

std::string identity_of(const std::string& image_id) { return image_id.substr(0, image_id.find('_')); }

DatasetManifest ingest_directory(const fs::path& root, Domain domain) {
  if (!fs::is_directory(root)) throw Error("not a directory: " + root.string());
  std::vector<fs::path> candidates;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_regular_file() && is_image_file(entry.path())) candidates.push_back(entry.path());
  }
  std::sort(candidates.begin(), candidates.end());

  DatasetManifest m;
  m.root = root;
  m.domain = domain;
  for (const auto& path : candidates) {
    try {
      read_image(path);
    } catch (const Error& e) {
      log_event(LogLevel::Warning, std::string("skipping undecodable image: ") + e.what());
      ++m.skipped;
      continue;
    }
    const auto id = path.stem().string();
    m.ids.push_back(id);
    m.files[id] = path.filename().string();
  }
  if (m.ids.empty()) throw Error("no images in " + root.string());
  if (m.skipped > 0) log_event(LogLevel::Warning, std::to_string(m.skipped) + " undecodable file(s) skipped");
  m.validate();

  m.has_sidecars = fs::exists(root / "sidecar_manifest.json") &&
                   std::all_of(m.ids.begin(), m.ids.end(), [&](const std::string& id) {
                     return fs::exists(root / (id + ".mask.png")) && fs::exists(root / (id + ".landmarks.csv"));
                   });

  // Curated pairs are not discoverable from files; keep any recorded ones.
  if (fs::exists(root / "manifest.json")) {
    auto cached = DatasetManifest::load(root);
    std::set<std::string> present(m.ids.begin(), m.ids.end());
    for (const auto& [from, to] : cached.paired_with) {
      if (present.count(from)) m.paired_with[from] = to;
    }
  }
  return m;
}

torch::Tensor preprocess(const torch::Tensor& image, int resolution, InputRange range) {
  if (image.dim() != 3) throw Error("preprocess expects [C, H, W]");
  const auto h = image.size(1), w = image.size(2);
  const auto side = std::min(h, w);
  if (side < 64) throw Error("image too small: min side " + std::to_string(side) + " < 64");
  auto crop = image.slice(1, (h - side) / 2, (h - side) / 2 + side).slice(2, (w - side) / 2, (w - side) / 2 + side);
  auto resized = resize_bilinear(crop.to(torch::kFloat), resolution, resolution);
  if (range == InputRange::Signed) return resized.clamp(-1.0, 1.0).contiguous();
  return (resized.clamp(0.0, 1.0) * 2.0 - 1.0).contiguous();
}

torch::Tensor preprocess(const Image& image, int resolution) {
  if (image.channels != 3) throw Error("preprocess expects an RGB image");
  return preprocess(image_to_tensor(image), resolution);
}

std::pair<DatasetManifest, DatasetManifest> split(const DatasetManifest& manifest, const SplitSpec& spec) {
  std::vector<std::string> identities;
  for (const auto& id : manifest.ids) identities.push_back(identity_of(id));
  std::sort(identities.begin(), identities.end());
  identities.erase(std::unique(identities.begin(), identities.end()), identities.end());
  if (identities.size() < 2) {
    throw Error("cannot hold out identities: only one identity ('" + (identities.empty() ? "" : identities[0]) +
                "') present; name files <identity>_<frame>.png");
  }
  std::mt19937_64 rng(spec.seed);
  std::shuffle(identities.begin(), identities.end(), rng);
  auto n_train = static_cast<size_t>(std::llround(spec.train_frac * static_cast<double>(identities.size())));
  n_train = std::clamp<size_t>(n_train, 1, identities.size() - 1);
  std::set<std::string> train_ids(identities.begin(), identities.begin() + static_cast<std::ptrdiff_t>(n_train));

  std::vector<std::string> train, test;
  for (const auto& id : manifest.ids) (train_ids.count(identity_of(id)) ? train : test).push_back(id);
  return {manifest.subset(train), manifest.subset(test)};
}

ToyDomains make_toy_domains(const fs::path& out, int n_per_domain, int resolution, uint64_t seed,
                            int images_per_identity) {
  if (n_per_domain < 8) throw ConfigError("make_toy_domains needs n_per_domain >= 8");
  if (!ImageBatch::is_supported_resolution(resolution)) throw ConfigError("toy resolution must be 64, 128 or 256");
  if (images_per_identity < 1) throw ConfigError("images_per_identity must be >= 1");
  ToyDomains dirs{out / "X", out / "Y"};
  for (const auto& d : {dirs.dir_x, dirs.dir_y}) {
    fs::remove_all(d);
    fs::create_directories(d);
  }
  std::mt19937_64 rng(seed);
  DatasetManifest mx, my;
  mx.root = dirs.dir_x;
  mx.domain = Domain::X;
  my.root = dirs.dir_y;
  my.domain = Domain::Y;
  toy::FaceParams base;
  for (int i = 0; i < n_per_domain; ++i) {
    const int identity = i / images_per_identity, frame = i % images_per_identity;
    if (frame == 0) base = toy::sample_identity(rng);
    const auto params = toy::jitter(base, rng);
    const auto id = frame_name(identity, frame);
    write_toy_image(dirs.dir_x, id, toy::render(params, Domain::X, resolution));
    write_toy_image(dirs.dir_y, id, toy::render(params, Domain::Y, resolution));
    for (auto* m : {&mx, &my}) {
      m->ids.push_back(id);
      m->files[id] = id + ".png";
      m->paired_with[id] = id;
    }
  }
  SidecarManifest sidecars{resolution, toy::kLandmarkCount, toy::kEyeIndices};
  for (auto* m : {&mx, &my}) {
    m->has_sidecars = true;
    sidecars.save(m->root);
    m->save();
  }
  return dirs;
}

TrainBatch TrainBatch::slice(int64_t begin, int64_t end) const {
  TrainBatch b{images.slice(0, begin, end), masks.slice(0, begin, end), landmarks.slice(0, begin, end),
               landmarks_valid.slice(0, begin, end), {}};
  b.ids.assign(ids.begin() + begin, ids.begin() + end);
  return b;
}

TrainBatch TrainBatch::to(torch::Device device) const {
  return {images.to(device), masks.to(device), landmarks.to(device), landmarks_valid.to(device), ids};
}

ImageDataset ImageDataset::load(const DatasetManifest& manifest, int resolution, MissingSidecarPolicy policy) {
  if (manifest.ids.empty()) throw Error("dataset " + manifest.root.string() + " is empty");
  ImageDataset ds;
  std::optional<SidecarStore> store;
  if (manifest.has_sidecars || policy == MissingSidecarPolicy::Strict) {
    store.emplace(manifest.root, policy);
    ds.sidecar_manifest_ = store->manifest();
  }
  std::vector<torch::Tensor> images, masks, landmarks;
  std::vector<uint8_t> valid;
  for (const auto& id : manifest.ids) {
    auto img = read_image(manifest.root / manifest.files.at(id), 3);
    if (store && img.width != img.height) throw Error("sidecars require square images: " + id);
    images.push_back(preprocess(img, resolution));
    if (store) {
      auto sc = store->load(id, resolution);
      masks.push_back(sc.mask);
      landmarks.push_back(sc.landmarks);
      valid.push_back(sc.landmarks_valid ? 1 : 0);
    } else {
      masks.push_back(torch::ones({resolution, resolution}));
      landmarks.push_back(torch::zeros({ds.sidecar_manifest_.landmark_count, 2}));
      valid.push_back(0);
    }
  }
  ds.images_ = torch::stack(images);
  ds.masks_ = torch::stack(masks);
  ds.landmarks_ = torch::stack(landmarks);
  ds.valid_ = torch::tensor(std::vector<int64_t>(valid.begin(), valid.end())).to(torch::kBool);
  ds.ids_ = manifest.ids;
  return ds;
}

ImageDataset ImageDataset::from_tensors(torch::Tensor images, torch::Tensor masks, torch::Tensor landmarks,
                                        std::vector<std::string> ids) {
  ImageDataset ds;
  ds.images_ = std::move(images);
  ds.masks_ = std::move(masks);
  ds.landmarks_ = std::move(landmarks);
  ds.valid_ = torch::ones({ds.images_.size(0)}, torch::kBool);
  ds.ids_ = std::move(ids);
  if (ds.ids_.empty()) {
    for (int64_t i = 0; i < ds.images_.size(0); ++i) ds.ids_.push_back("img" + std::to_string(i));
  }
  return ds;
}

TrainBatch ImageDataset::gather(const std::vector<int64_t>& rows, int resolution) const {
  auto idx = torch::tensor(rows, torch::kLong);
  TrainBatch b{images_.index_select(0, idx), masks_.index_select(0, idx), landmarks_.index_select(0, idx),
               valid_.index_select(0, idx), {}};
  for (auto r : rows) b.ids.push_back(ids_.at(static_cast<size_t>(r)));
  if (resolution != this->resolution()) {
    b.images = resize_bilinear(b.images, resolution, resolution).clamp(-1.0, 1.0);
    b.masks = resize_bilinear(b.masks, resolution, resolution).clamp(0.0, 1.0);
    b.landmarks = b.landmarks * (static_cast<double>(resolution) / this->resolution());
  }
  return b;
}

int64_t ImageDataset::index_of(const std::string& id) const {
  auto it = std::find(ids_.begin(), ids_.end(), id);
  return it == ids_.end() ? -1 : static_cast<int64_t>(it - ids_.begin());
}

UnpairedSampler::UnpairedSampler(int64_t n_x, int64_t n_y, int64_t batch, uint64_t seed)
    : n_x_(n_x), n_y_(n_y), batch_(batch), seed_(seed) {
  if (n_x < 1 || n_y < 1) throw Error("unpaired sampler needs non-empty domains");
  if (batch < 1 || batch > n_x || batch > n_y) {
    throw Error("batch size " + std::to_string(batch) + " exceeds dataset size (X: " + std::to_string(n_x) +
                ", Y: " + std::to_string(n_y) + ")");
  }
}

std::vector<int64_t> UnpairedSampler::draw(std::vector<int64_t>& perm, size_t& cursor, int64_t n, int64_t& epoch,
                                           uint64_t stream) {
  if (perm.empty() || cursor + static_cast<size_t>(batch_) > perm.size()) {
    if (!perm.empty()) ++epoch;
    auto gen = make_generator(mix_seed(mix_seed(seed_, stream), static_cast<uint64_t>(epoch)));
    auto p = torch::randperm(n, gen, torch::kLong);
    perm.assign(p.data_ptr<int64_t>(), p.data_ptr<int64_t>() + n);
    cursor = 0;
  }
  std::vector<int64_t> out(perm.begin() + static_cast<std::ptrdiff_t>(cursor),
                           perm.begin() + static_cast<std::ptrdiff_t>(cursor + batch_));
  cursor += static_cast<size_t>(batch_);
  return out;
}

std::pair<std::vector<int64_t>, std::vector<int64_t>> UnpairedSampler::next() {
  auto bx = draw(perm_x_, cursor_x_, n_x_, epoch_x_, 1);
  auto by = draw(perm_y_, cursor_y_, n_y_, epoch_y_, 2);
  return {bx, by};
}

PairIndex paired_rows(const ImageDataset& x, const ImageDataset& y, const DatasetManifest& manifest_x) {
  PairIndex out;
  for (int64_t i = 0; i < x.size(); ++i) {
    auto it = manifest_x.paired_with.find(x.ids()[static_cast<size_t>(i)]);
    if (it == manifest_x.paired_with.end()) continue;
    const auto j = y.index_of(it->second);
    if (j < 0) continue;
    out.rows_x.push_back(i);
    out.rows_y.push_back(j);
  }
  return out;
}

PairedBatch gather_pairs(const ImageDataset& x, const ImageDataset& y, const PairIndex& pairs,
                         const std::vector<int64_t>& positions, int resolution) {
  std::vector<int64_t> rx, ry;
  for (auto p : positions) {
    rx.push_back(pairs.rows_x.at(static_cast<size_t>(p)));
    ry.push_back(pairs.rows_y.at(static_cast<size_t>(p)));
  }
  return {x.gather(rx, resolution).images, y.gather(ry, resolution).images};
}

}  // namespace facecycle
