#include "facecycle/guidance.hpp"
#include "facecycle/image_io.hpp"
#include "facecycle/toy_faces.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

namespace facecycle {
namespace {

namespace F = torch::nn::functional;
namespace fs = std::filesystem;

torch::nn::Sequential conv_stage(int64_t in, int64_t out) {
  return torch::nn::Sequential(
      torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 4).stride(2).padding(1)),
      torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)));
}

// He-normal weights from a private generator so the toy encoders do not
// depend on (or perturb) the global RNG.
void seeded_init(torch::nn::Module& module, uint64_t seed) {
  torch::NoGradGuard guard;
  auto gen = make_generator(seed);
  for (auto& p : module.parameters()) {
    if (p.dim() >= 2) {
      double fan_in = static_cast<double>(p.numel() / p.size(0));
      p.copy_(torch::randn(p.sizes(), gen) * std::sqrt(2.0 / fan_in));
    } else {
      p.zero_();
    }
  }
}

void freeze(torch::nn::Module& module) {
  for (auto& p : module.parameters()) p.requires_grad_(false);
  module.eval();
}

torch::Tensor luminance(const torch::Tensor& x) {
  return 0.299 * x.select(1, 0) + 0.587 * x.select(1, 1) + 0.114 * x.select(1, 2);
}

}  // namespace

FrozenEncoder::FrozenEncoder(EncoderKind kind, std::vector<Stage> stages, std::vector<int> taps,
                             torch::nn::Linear head, bool grayscale_input)
    : state_(std::make_shared<State>()) {
  state_->kind = kind;
  state_->stages = std::move(stages);
  state_->taps = std::move(taps);
  state_->head = std::move(head);
  state_->grayscale_input = grayscale_input;
  for (int t : state_->taps) {
    if (t < 0 || t >= static_cast<int>(state_->stages.size())) {
      throw Error("perceptual tap index " + std::to_string(t) + " out of range [0, " +
                  std::to_string(state_->stages.size()) + ")");
    }
  }
  for (size_t i = 1; i < state_->taps.size(); ++i) {
    if (state_->taps[i] <= state_->taps[i - 1]) throw Error("perceptual taps must be strictly increasing");
  }
  if (kind == EncoderKind::Identity && !state_->head) throw Error("identity encoder needs a projection head");
}

FrozenEncoder FrozenEncoder::toy_identity(uint64_t seed, int64_t embed_dim) {
  std::vector<Stage> stages{{conv_stage(1, 16), 2}, {conv_stage(16, 32), 4}, {conv_stage(32, 64), 8}};
  torch::nn::Linear head(64, embed_dim);
  for (size_t i = 0; i < stages.size(); ++i) {
    seeded_init(*stages[i].layers, mix_seed(seed, i));
    freeze(*stages[i].layers);
  }
  seeded_init(*head, mix_seed(seed, 100));
  freeze(*head);
  return FrozenEncoder(EncoderKind::Identity, std::move(stages), {}, head, true);
}

FrozenEncoder FrozenEncoder::toy_perceptual(uint64_t seed, std::vector<int> taps) {
  std::vector<Stage> stages{{conv_stage(3, 16), 2}, {conv_stage(16, 32), 4}, {conv_stage(32, 64), 8}};
  for (size_t i = 0; i < stages.size(); ++i) {
    seeded_init(*stages[i].layers, mix_seed(seed, 200 + i));
    freeze(*stages[i].layers);
  }
  return FrozenEncoder(EncoderKind::Perceptual, std::move(stages), std::move(taps), nullptr, false);
}

std::vector<int> FrozenEncoder::tap_strides() const {
  std::vector<int> out;
  for (int t : state_->taps) out.push_back(state_->stages[t].stride);
  return out;
}

std::vector<torch::Tensor> FrozenEncoder::weights() const {
  std::vector<torch::Tensor> out;
  for (const auto& s : state_->stages) {
    for (const auto& p : s.layers->parameters()) out.push_back(p);
  }
  if (state_->head) {
    for (const auto& p : state_->head->parameters()) out.push_back(p);
  }
  return out;
}

torch::Tensor FrozenEncoder::embed(const torch::Tensor& x) const {
  if (state_->kind != EncoderKind::Identity) throw Error("embed requires an identity encoder");
  state_->calls.fetch_add(1);
  auto h = x;
  if (state_->grayscale_input) {
    h = luminance(x).unsqueeze(1);
    auto [var, mean] = torch::var_mean(h, {1, 2, 3}, 0, true);
    h = (h - mean) / (torch::sqrt(var + 1e-12) + 1e-5);
  }
  for (auto& s : state_->stages) h = s.layers->forward(h);
  h = state_->head->forward(h.mean({2, 3}));
  return F::normalize(h, F::NormalizeFuncOptions().dim(1).eps(1e-12));
}

std::vector<torch::Tensor> FrozenEncoder::features(const torch::Tensor& x) const {
  if (state_->kind != EncoderKind::Perceptual) throw Error("features requires a perceptual encoder");
  state_->calls.fetch_add(1);
  std::vector<torch::Tensor> out;
  auto h = x;
  const int last = state_->taps.empty() ? -1 : state_->taps.back();
  for (int i = 0; i <= last; ++i) {
    h = state_->stages[i].layers->forward(h);
    if (std::find(state_->taps.begin(), state_->taps.end(), i) != state_->taps.end()) out.push_back(h);
  }
  return out;
}

void FrozenEncoder::to(torch::Device device) const {
  for (auto& s : state_->stages) s.layers->to(device);
  if (state_->head) state_->head->to(device);
}

torch::Tensor embed_identity(const torch::Tensor& x, const FrozenEncoder& encoder) { return encoder.embed(x); }

std::vector<torch::Tensor> extract_features(const torch::Tensor& x, const FrozenEncoder& encoder) {
  return encoder.features(x);
}

torch::Tensor ToyLandmarkEstimator::estimate(const torch::Tensor& images) const {
  count_call();
  const auto h = images.size(2), w = images.size(3);
  const auto opts = images.options();
  auto darkness = torch::relu(0.5 - luminance((images + 1.0) / 2.0));  // [N, H, W]
  auto xs = (torch::arange(w, opts) + 0.5).view({1, 1, w}).expand({1, h, w});
  auto ys = (torch::arange(h, opts) + 0.5).view({1, h, 1}).expand({1, h, w});

  auto window = [&](const toy::Window& win) {
    auto inx = (xs >= win.x0 * w) & (xs < win.x1 * w);
    auto iny = (ys >= win.y0 * h) & (ys < win.y1 * h);
    return (inx & iny).to(opts.dtype());
  };
  auto weighted_mean = [&](const torch::Tensor& weight, const toy::Window& win) {
    // Falls back to the window centre when the window holds no dark pixels.
    auto den = weight.sum({1, 2}) + 1e-12;
    auto cx = ((weight * xs).sum({1, 2}) + 1e-12 * 0.5 * (win.x0 + win.x1) * w) / den;
    auto cy = ((weight * ys).sum({1, 2}) + 1e-12 * 0.5 * (win.y0 + win.y1) * h) / den;
    return torch::stack({cx, cy}, 1);
  };

  std::vector<torch::Tensor> points;
  for (const auto* win : {&toy::kLeftEyeWindow, &toy::kRightEyeWindow, &toy::kNoseWindow}) {
    points.push_back(weighted_mean(darkness * window(*win), *win));
  }
  const auto& mw = toy::kMouthWindow;
  auto mouth = darkness * window(mw);
  const double t = temperature_ * static_cast<double>(w) / 64.0;
  auto left = torch::exp(-(xs - mw.x0 * w) / t);
  auto right = torch::exp((xs - mw.x1 * w) / t);
  points.push_back(weighted_mean(mouth * left, {mw.x0, mw.x0, mw.y0, mw.y1}));
  points.push_back(weighted_mean(mouth * right, {mw.x1, mw.x1, mw.y0, mw.y1}));
  return torch::stack(points, 1);
}

torch::Tensor pooled_descriptor(const std::vector<torch::Tensor>& features) {
  std::vector<torch::Tensor> pooled;
  for (const auto& f : features) pooled.push_back(f.mean({2, 3}));
  return torch::cat(pooled, 1);
}

std::vector<int64_t> nearest_neighbors(const torch::Tensor& queries, const torch::Tensor& gallery,
                                       RetrievalMetric metric) {
  if (queries.size(0) == 0 || gallery.size(0) == 0) throw Error("nearest_neighbors: empty set");
  auto q = queries.detach().to(torch::kCPU).to(torch::kDouble).contiguous();
  auto g = gallery.detach().to(torch::kCPU).to(torch::kDouble).contiguous();
  torch::Tensor score;
  if (metric == RetrievalMetric::Cosine) {
    auto qn = q / q.norm(2, 1, true).clamp_min(1e-300);
    auto gn = g / g.norm(2, 1, true).clamp_min(1e-300);
    score = qn.mm(gn.t());
  } else {
    score = -torch::cdist(q, g);
  }
  auto acc = score.accessor<double, 2>();
  std::vector<int64_t> out(static_cast<size_t>(q.size(0)));
  for (int64_t i = 0; i < q.size(0); ++i) {
    int64_t best = 0;
    for (int64_t j = 1; j < g.size(0); ++j) {
      if (acc[i][j] > acc[i][best]) best = j;
    }
    out[static_cast<size_t>(i)] = best;
  }
  return out;
}

PseudoPairs retrieve_pseudo_pairs(const torch::Tensor& batch_x, const torch::Tensor& batch_y,
                                  const FrozenEncoder& encoder, RetrievalMetric metric) {
  if (batch_x.size(0) == 0 || batch_y.size(0) == 0) throw Error("retrieve_pseudo_pairs: empty batch");
  torch::NoGradGuard guard;
  auto dx = pooled_descriptor(encoder.features(batch_x));
  auto dy = pooled_descriptor(encoder.features(batch_y));
  return {nearest_neighbors(dx, dy, metric), nearest_neighbors(dy, dx, metric)};
}

SidecarManifest SidecarManifest::load(const fs::path& dir) {
  std::ifstream in(dir / "sidecar_manifest.json");
  if (!in) throw Error("missing sidecar_manifest.json in " + dir.string());
  auto j = nlohmann::json::parse(in);
  SidecarManifest m;
  m.resolution = j.at("resolution").get<int>();
  m.landmark_count = j.at("landmark_count").get<int>();
  if (j.contains("eye_indices")) m.eye_indices = j.at("eye_indices").get<std::array<int, 2>>();
  return m;
}

void SidecarManifest::save(const fs::path& dir) const {
  nlohmann::json j{{"resolution", resolution}, {"landmark_count", landmark_count}, {"eye_indices", eye_indices}};
  std::ofstream(dir / "sidecar_manifest.json") << j.dump(2) << "\n";
}

SidecarStore::SidecarStore(fs::path dir, MissingSidecarPolicy policy) : dir_(std::move(dir)), policy_(policy) {
  if (fs::exists(dir_ / "sidecar_manifest.json")) {
    manifest_ = SidecarManifest::load(dir_);
  } else if (policy_ == MissingSidecarPolicy::Strict) {
    throw Error("missing sidecar_manifest.json in " + dir_.string());
  }
}

bool SidecarStore::has(const std::string& id) const {
  return fs::exists(dir_ / (id + ".mask.png")) && fs::exists(dir_ / (id + ".landmarks.csv"));
}

Sidecars SidecarStore::load(const std::string& id, int resolution) const {
  Sidecars out;
  if (!has(id)) {
    if (policy_ == MissingSidecarPolicy::Strict) throw Error("missing sidecar for image '" + id + "'");
    log_event(LogLevel::Warning, "missing sidecar for '" + id + "': neutral mask, landmark loss disabled");
    out.mask = torch::ones({resolution, resolution});
    out.landmarks = torch::zeros({manifest_.landmark_count, 2});
    out.landmarks_valid = false;
    return out;
  }
  auto mask = image_to_tensor(read_image(dir_ / (id + ".mask.png"), 1));  // [1, H, W]
  out.mask = resize_bilinear(mask, resolution, resolution).clamp(0.0, 1.0).squeeze(0);
  auto lm = read_landmarks_csv(dir_ / (id + ".landmarks.csv"));
  const double scale = static_cast<double>(resolution) / manifest_.resolution;
  out.landmarks = scale == 1.0 ? lm : lm * scale;
  return out;
}

Sidecars load_sidecars(const std::string& image_id, const SidecarStore& store, int resolution) {
  return store.load(image_id, resolution);
}

void write_landmarks_csv(const fs::path& path, const torch::Tensor& landmarks) {
  auto lm = landmarks.to(torch::kFloat).contiguous();
  auto a = lm.accessor<float, 2>();
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "k,x,y\n" << std::setprecision(std::numeric_limits<float>::max_digits10);
  for (int64_t k = 0; k < lm.size(0); ++k) out << k << "," << a[k][0] << "," << a[k][1] << "\n";
}

torch::Tensor read_landmarks_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  if (line.rfind("k,x,y", 0) != 0) throw Error("landmark CSV " + path.string() + " lacks the 'k,x,y' header");
  std::vector<float> values;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string k, x, y;
    if (!std::getline(ss, k, ',') || !std::getline(ss, x, ',') || !std::getline(ss, y, ',')) {
      throw Error("malformed landmark row in " + path.string());
    }
    values.push_back(std::stof(x));
    values.push_back(std::stof(y));
  }
  return torch::tensor(values).view({-1, 2});
}

torch::Tensor resize_bilinear(const torch::Tensor& t, int64_t out_h, int64_t out_w) {
  if (t.size(-2) == out_h && t.size(-1) == out_w) return t;
  auto shape = t.sizes().vec();
  auto flat = t.reshape({-1, 1, shape[shape.size() - 2], shape.back()});
  auto r = F::interpolate(flat, F::InterpolateFuncOptions()
                                    .size(std::vector<int64_t>{out_h, out_w})
                                    .mode(torch::kBilinear)
                                    .align_corners(false));
  shape[shape.size() - 2] = out_h;
  shape.back() = out_w;
  return r.reshape(shape);
}

}  // namespace facecycle
