#include "facecycle/metrics.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>
#include <thread>

namespace facecycle {
namespace F = torch::nn::functional;
using json = nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

/// V diag(sqrt(max(lambda, 0))) V^T of a symmetric matrix.
torch::Tensor sym_sqrt(const torch::Tensor& m) {
  auto [evals, evecs] = torch::linalg_eigh(m);
  return evecs.matmul(torch::diag(evals.clamp_min(0.0).sqrt())).matmul(evecs.transpose(0, 1));
}

double trace_sqrt_product(const torch::Tensor& c1, const torch::Tensor& c2) {
  auto s1 = sym_sqrt(c1);
  auto m = s1.matmul(c2).matmul(s1);
  m = 0.5 * (m + m.transpose(0, 1));
  auto evals = torch::linalg_eigvalsh(m);
  return evals.clamp_min(0.0).sqrt().sum().item<double>();
}

torch::Tensor to_unit_double(const torch::Tensor& x) { return to_unit_range(x.to(torch::kDouble)).clamp(0.0, 1.0); }

torch::Tensor as_batch(const torch::Tensor& x) { return x.dim() == 3 ? x.unsqueeze(0) : x; }

std::vector<torch::Tensor> features_chunked(const torch::Tensor& x, const FrozenEncoder& enc, int64_t chunk = 64) {
  torch::NoGradGuard guard;
  std::vector<std::vector<torch::Tensor>> parts;
  for (int64_t i = 0; i < x.size(0); i += chunk) {
    auto f = enc.features(x.slice(0, i, std::min(x.size(0), i + chunk)));
    if (parts.empty()) parts.resize(f.size());
    for (size_t t = 0; t < f.size(); ++t) parts[t].push_back(f[t]);
  }
  std::vector<torch::Tensor> out;
  for (auto& p : parts) out.push_back(torch::cat(p));
  return out;
}

torch::Tensor embed_chunked(const torch::Tensor& x, const FrozenEncoder& enc, int64_t chunk = 64) {
  torch::NoGradGuard guard;
  std::vector<torch::Tensor> parts;
  for (int64_t i = 0; i < x.size(0); i += chunk) parts.push_back(enc.embed(x.slice(0, i, std::min(x.size(0), i + chunk))));
  return torch::cat(parts);
}

double finite_or_nan(const json& j) { return j.is_null() ? kNaN : j.get<double>(); }

std::string fmt(double v, int precision) {
  if (!std::isfinite(v)) return "n/a";
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

std::string default_label(const std::string& kind, ProtocolTag tag) {
  if (kind == "vae") return "VAE (reconstruction)";
  if (kind == "pix2pix") return "pix2pix (paired subset)";
  if (kind == "cyclegan_guided") return tag == ProtocolTag::Paired ? "CycleGAN (paired subset)" : "CycleGAN (unpaired)";
  return kind;
}

}  // namespace

std::string_view to_string(ProtocolTag tag) {
  switch (tag) {
    case ProtocolTag::Paired: return "paired";
    case ProtocolTag::UnpairedCycle: return "unpaired_cycle";
    case ProtocolTag::Reconstruction: return "reconstruction";
  }
  return "unknown";
}

ProtocolTag parse_protocol_tag(std::string_view text) {
  if (text == "paired") return ProtocolTag::Paired;
  if (text == "unpaired_cycle") return ProtocolTag::UnpairedCycle;
  if (text == "reconstruction") return ProtocolTag::Reconstruction;
  throw ConfigError("unknown protocol tag '" + std::string(text) + "'");
}

EvalProtocol parse_eval_protocol(std::string_view text) {
  if (text == "paired") return EvalProtocol::Paired;
  if (text == "unpaired") return EvalProtocol::Unpaired;
  throw ConfigError("protocol must be 'paired' or 'unpaired', got '" + std::string(text) + "'");
}

torch::Tensor FeatureExtractor::operator()(const torch::Tensor& images, int64_t chunk) const {
  torch::NoGradGuard guard;
  std::vector<torch::Tensor> parts;
  for (int64_t i = 0; i < images.size(0); i += chunk) {
    parts.push_back(forward(images.slice(0, i, std::min(images.size(0), i + chunk))).to(torch::kDouble));
  }
  auto out = torch::cat(parts);
  if (out.dim() != 2 || out.size(1) != dim) throw Error("extractor '" + name + "' returned wrong feature shape");
  return out;
}

FeatureExtractor FeatureExtractor::toy(uint64_t seed, int64_t dim) {
  if (dim < 1) throw ConfigError("extractor dim must be >= 1");
  const std::vector<int64_t> widths{3, 16, 32, dim};
  std::vector<torch::Tensor> weights, biases;
  auto gen = make_generator(seed);
  for (size_t i = 0; i + 1 < widths.size(); ++i) {
    const double fan_in = static_cast<double>(widths[i] * 16);
    weights.push_back(torch::randn({widths[i + 1], widths[i], 4, 4}, gen) * std::sqrt(2.0 / fan_in));
    biases.push_back(torch::zeros({widths[i + 1]}));
  }
  FeatureExtractor fx;
  fx.name = "toy";
  fx.dim = dim;
  fx.forward = [weights, biases](const torch::Tensor& x) {
    auto h = x.to(torch::kFloat);
    for (size_t i = 0; i < weights.size(); ++i) {
      h = F::conv2d(h, weights[i].to(h.device()),
                    F::Conv2dFuncOptions().bias(biases[i].to(h.device())).stride(2).padding(1));
      if (i + 1 < weights.size()) h = F::leaky_relu(h, F::LeakyReLUFuncOptions().negative_slope(0.2));
    }
    return h.mean({2, 3});
  };
  return fx;
}

double frechet_distance(const torch::Tensor& mu1, const torch::Tensor& cov1, const torch::Tensor& mu2,
                        const torch::Tensor& cov2) {
  const auto d = mu1.numel();
  if (mu2.numel() != d || cov1.sizes() != torch::IntArrayRef{d, d} || cov2.sizes() != torch::IntArrayRef{d, d}) {
    throw Error("frechet_distance: dimension mismatch");
  }
  auto m1 = mu1.to(torch::kDouble).flatten(), m2 = mu2.to(torch::kDouble).flatten();
  auto c1 = cov1.to(torch::kDouble), c2 = cov2.to(torch::kDouble);
  c1 = 0.5 * (c1 + c1.transpose(0, 1));
  c2 = 0.5 * (c2 + c2.transpose(0, 1));
  const double mean_term = (m1 - m2).square().sum().item<double>();
  double cross = kNaN;
  try {
    cross = trace_sqrt_product(c1, c2);
  } catch (const c10::Error&) {
  }
  if (!std::isfinite(cross)) {
    auto eye = 1e-6 * torch::eye(d, torch::kDouble);
    cross = trace_sqrt_product(c1 + eye, c2 + eye);
  }
  return mean_term + (c1.trace() + c2.trace()).item<double>() - 2.0 * cross;
}

GaussianMoments fit_moments(const torch::Tensor& features) {
  if (features.dim() != 2 || features.size(0) < 2) throw Error("fit_moments needs [N >= 2, D] features");
  auto f = features.to(torch::kDouble);
  auto mean = f.mean(0);
  auto centred = f - mean;
  return {mean, centred.transpose(0, 1).matmul(centred) / static_cast<double>(f.size(0) - 1)};
}

SplitStat fid_protocol(const torch::Tensor& set_a, const torch::Tensor& set_b, const FeatureExtractor& extractor,
                       int n_splits, uint64_t seed) {
  if (n_splits < 1) throw ConfigError("fid splits must be >= 1");
  const auto n = std::min(set_a.size(0), set_b.size(0));
  const auto chunk = n / n_splits;
  if (chunk < extractor.dim + 1) {
    throw Error("rank-deficient covariance; reduce splits or use toy extractor (" + std::to_string(chunk) +
                " samples per split, need " + std::to_string(extractor.dim + 1) + ")");
  }
  auto truncate = [&](const torch::Tensor& s, uint64_t stream) {
    if (s.size(0) == n) return s;
    auto gen = make_generator(mix_seed(seed, stream));
    auto keep = std::get<0>(torch::randperm(s.size(0), gen, torch::kLong).slice(0, 0, n).sort());
    return s.index_select(0, keep.to(s.device()));
  };
  auto fa = extractor(truncate(set_a, 1));
  auto fb = extractor(truncate(set_b, 2));
  auto gen = make_generator(mix_seed(seed, 3));
  auto order = torch::randperm(n, gen, torch::kLong);
  SplitStat out;
  for (int s = 0; s < n_splits; ++s) {
    auto rows = order.slice(0, s * chunk, (s + 1) * chunk);
    auto ma = fit_moments(fa.index_select(0, rows));
    auto mb = fit_moments(fb.index_select(0, rows));
    out.per_split.push_back(frechet_distance(ma.mean, ma.cov, mb.mean, mb.cov));
  }
  auto t = torch::tensor(out.per_split, torch::kDouble);
  out.mean = t.mean().item<double>();
  out.std = n_splits > 1 ? t.std(/*unbiased=*/false).item<double>() : 0.0;
  return out;
}

double psnr(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.sizes() != b.sizes()) throw Error("psnr: shape mismatch");
  const double mse = (a.to(torch::kDouble) - b.to(torch::kDouble)).square().mean().item<double>();
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double ssim(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.sizes() != b.sizes()) throw Error("ssim: shape mismatch");
  if (a.dim() < 2) throw Error("ssim expects images");
  constexpr int64_t kWin = 11;
  constexpr double kSigma = 1.5, kC1 = 0.01 * 0.01, kC2 = 0.03 * 0.03;
  const auto h = a.size(-2), w = a.size(-1);
  if (h < kWin || w < kWin) throw Error("ssim: image smaller than the 11x11 window");
  auto x = a.to(torch::kDouble).reshape({-1, 1, h, w});
  auto y = b.to(torch::kDouble).reshape({-1, 1, h, w});
  auto coords = torch::arange(kWin, torch::kDouble) - (kWin - 1) / 2.0;
  auto g = torch::exp(-coords.square() / (2.0 * kSigma * kSigma));
  g = g / g.sum();
  auto window = torch::outer(g, g).view({1, 1, kWin, kWin}).to(x.device());
  auto filt = [&](const torch::Tensor& t) { return F::conv2d(t, window); };
  auto mu_x = filt(x), mu_y = filt(y);
  auto sxx = filt(x * x) - mu_x.square();
  auto syy = filt(y * y) - mu_y.square();
  auto sxy = filt(x * y) - mu_x * mu_y;
  auto map = ((2.0 * mu_x * mu_y + kC1) * (2.0 * sxy + kC2)) /
             ((mu_x.square() + mu_y.square() + kC1) * (sxx + syy + kC2));
  return map.mean().item<double>();
}

torch::Tensor translate_all(TranslationModel& model, const torch::Tensor& x, Direction direction, int64_t batch) {
  torch::NoGradGuard guard;
  std::vector<torch::Tensor> parts;
  for (int64_t i = 0; i < x.size(0); i += batch) {
    parts.push_back(model.translate(x.slice(0, i, std::min(x.size(0), i + batch)), direction));
  }
  return torch::cat(parts);
}

namespace {

FidelityScores mean_fidelity(const torch::Tensor& a, const torch::Tensor& b) {
  auto ua = to_unit_double(as_batch(a)), ub = to_unit_double(as_batch(b));
  FidelityScores s;
  for (int64_t i = 0; i < ua.size(0); ++i) {
    s.psnr += psnr(ua[i], ub[i]);
    s.ssim += ssim(ua[i], ub[i]);
  }
  s.psnr /= static_cast<double>(ua.size(0));
  s.ssim /= static_cast<double>(ua.size(0));
  return s;
}

}  // namespace

FidelityScores cycle_psnr_ssim(const torch::Tensor& x_test, TranslationModel& model, Direction direction) {
  torch::NoGradGuard guard;
  std::vector<torch::Tensor> parts;
  for (int64_t i = 0; i < x_test.size(0); i += 32) {
    parts.push_back(model.reconstruct(x_test.slice(0, i, std::min(x_test.size(0), i + 32)), direction));
  }
  return mean_fidelity(x_test, torch::cat(parts));
}

FidelityScores paired_psnr_ssim(const torch::Tensor& prediction, const torch::Tensor& truth) {
  if (prediction.sizes() != truth.sizes()) throw Error("paired_psnr_ssim: shape mismatch");
  return mean_fidelity(prediction, truth);
}

torch::Tensor perceptual_distance(const torch::Tensor& a, const torch::Tensor& b, const FrozenEncoder& encoder) {
  if (a.sizes() != b.sizes()) throw Error("perceptual_distance: shape mismatch");
  auto fa = features_chunked(as_batch(a), encoder);
  auto fb = features_chunked(as_batch(b), encoder);
  auto total = torch::zeros({fa[0].size(0)}, torch::kDouble);
  for (size_t t = 0; t < fa.size(); ++t) {
    auto na = fa[t].to(torch::kDouble), nb = fb[t].to(torch::kDouble);
    na = na / (na.norm(2, 1, true) + 1e-10);
    nb = nb / (nb.norm(2, 1, true) + 1e-10);
    total = total + (na - nb).square().mean({1, 2, 3}).cpu();
  }
  return total / static_cast<double>(fa.size());
}

RetrievalDistance pseudo_pair_lpips(const torch::Tensor& translated, const torch::Tensor& set_y,
                                    const FrozenEncoder& encoder, RetrievalMetric metric) {
  if (translated.size(0) == 0 || set_y.size(0) == 0) throw Error("pseudo_pair_lpips: empty set");
  RetrievalDistance out;
  {
    torch::NoGradGuard guard;
    auto q = pooled_descriptor(features_chunked(translated, encoder));
    auto g = pooled_descriptor(features_chunked(set_y, encoder));
    out.indices = nearest_neighbors(q, g, metric);
  }
  auto targets = set_y.index_select(0, torch::tensor(out.indices, torch::kLong).to(set_y.device()));
  out.mean = perceptual_distance(translated, targets, encoder).mean().item<double>();
  return out;
}

double id_sim(const torch::Tensor& set_a, const torch::Tensor& set_b, const FrozenEncoder& encoder) {
  if (set_a.size(0) != set_b.size(0)) throw Error("id_sim: set sizes differ");
  if (set_a.size(0) == 0) throw Error("id_sim: empty sets");
  auto ea = embed_chunked(set_a, encoder).to(torch::kDouble);
  auto eb = embed_chunked(set_b, encoder).to(torch::kDouble);
  ea = ea / ea.norm(2, 1, true).clamp_min(1e-300);
  eb = eb / eb.norm(2, 1, true).clamp_min(1e-300);
  return (ea * eb).sum(1).mean().item<double>();
}

NmeResult landmark_nme(const torch::Tensor& pred, const torch::Tensor& truth, std::array<int, 2> eye_indices,
                       const torch::Tensor& valid) {
  if (pred.sizes() != truth.sizes() || pred.dim() != 3 || pred.size(2) != 2) {
    throw Error("landmark_nme: pred and truth must both be [N, K, 2]");
  }
  const auto k = truth.size(1);
  for (int e : eye_indices) {
    if (e < 0 || e >= k) throw Error("landmark_nme: eye index out of range");
  }
  auto p = pred.to(torch::kDouble).cpu(), t = truth.to(torch::kDouble).cpu();
  auto ok = valid.defined() ? valid.to(torch::kBool).cpu() : torch::ones({t.size(0)}, torch::kBool);
  NmeResult r;
  double sum = 0.0;
  for (int64_t i = 0; i < t.size(0); ++i) {
    if (!ok[i].item<bool>()) {
      ++r.skipped;
      continue;
    }
    const double iod = (t[i][eye_indices[0]] - t[i][eye_indices[1]]).norm().item<double>();
    if (!(iod > 0.0)) {
      std::cerr << "warning: zero interocular distance for sample " << i << ", skipped\n";
      ++r.skipped;
      continue;
    }
    sum += (p[i] - t[i]).norm(2, 1).mean().item<double>() / iod;
    ++r.counted;
  }
  r.nme = r.counted > 0 ? sum / static_cast<double>(r.counted) : kNaN;
  return r;
}

double timed_inference(const std::function<torch::Tensor(const torch::Tensor&)>& forward, int n_images,
                       int resolution, int warmup, torch::Device device, uint64_t seed) {
  if (n_images < 1) throw ConfigError("timing needs at least one image");
  torch::NoGradGuard guard;
  auto gen = make_generator(seed);
  auto inputs = (torch::rand({n_images, 1, 3, resolution, resolution}, gen) * 2.0 - 1.0).to(device);
  auto sync = [&] {
    if (device.is_cuda()) torch::cuda::synchronize();
  };
  for (int i = 0; i < warmup; ++i) forward(inputs[i % n_images]);
  sync();
  const auto start = std::chrono::steady_clock::now();
  for (int i = 0; i < n_images; ++i) forward(inputs[i]);
  sync();
  const std::chrono::duration<double, std::milli> elapsed = std::chrono::steady_clock::now() - start;
  return elapsed.count() / static_cast<double>(n_images);
}

LossLog LossLog::read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read loss log " + path.string());
  auto split = [](const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
  };
  std::string line;
  if (!std::getline(in, line)) throw Error("malformed loss log: missing header in " + path.string());
  const auto header = split(line);
  auto col = [&](const std::string& name) -> int {
    for (size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return static_cast<int>(i);
    }
    return -1;
  };
  const int c_step = col("step"), c_epoch = col("epoch"), c_total = col("total");
  const int c_d = col("d_loss"), c_probe = col("probe_std");
  if (c_step < 0 || c_epoch < 0 || c_total < 0) {
    throw Error("malformed loss log: needs step, epoch and total columns");
  }
  auto number = [&](const std::string& cell, int64_t row) {
    if (cell.empty() || cell == "nan") return kNaN;
    try {
      size_t used = 0;
      const double v = std::stod(cell, &used);
      if (used != cell.size()) throw std::invalid_argument(cell);
      return v;
    } catch (const std::exception&) {
      throw Error("malformed loss log: bad value '" + cell + "' on row " + std::to_string(row));
    }
  };
  LossLog log;
  int64_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() != header.size()) throw Error("malformed loss log: row " + std::to_string(row) + " has wrong arity");
    log.steps.push_back(static_cast<int64_t>(number(cells[c_step], row)));
    log.epochs.push_back(static_cast<int64_t>(number(cells[c_epoch], row)));
    log.total.push_back(number(cells[c_total], row));
    if (c_d >= 0) log.d_loss.push_back(number(cells[c_d], row));
    log.probe_std.push_back(c_probe >= 0 ? number(cells[c_probe], row) : kNaN);
  }
  return log;
}

StabilityIndicators stability_indicators(const LossLog& log, std::optional<int64_t> tail_steps) {
  const auto n = static_cast<int64_t>(log.total.size());
  if (n == 0 || static_cast<int64_t>(log.epochs.size()) != n) throw Error("malformed loss log: no rows");
  std::vector<double> means;
  std::vector<int64_t> counts;
  for (int64_t i = 0; i < n; ++i) {
    if (i == 0 || log.epochs[i] != log.epochs[i - 1]) {
      if (i > 0 && log.epochs[i] < log.epochs[i - 1]) throw Error("malformed loss log: epochs go backwards");
      means.push_back(0.0);
      counts.push_back(0);
    }
    means.back() += log.total[i];
    counts.back() += 1;
  }
  for (size_t w = 0; w < means.size(); ++w) means[w] /= static_cast<double>(counts[w]);

  StabilityIndicators s;
  if (log.d_loss.empty()) {
    s.d_loss_variance = kNaN;
  } else {
    int64_t tail = tail_steps.value_or(static_cast<int64_t>(std::ceil(0.25 * static_cast<double>(n))));
    tail = std::clamp<int64_t>(tail, 1, n);
    double mean = 0.0;
    for (int64_t i = n - tail; i < n; ++i) mean += log.d_loss[i];
    mean /= static_cast<double>(tail);
    double var = 0.0;
    for (int64_t i = n - tail; i < n; ++i) var += (log.d_loss[i] - mean) * (log.d_loss[i] - mean);
    s.d_loss_variance = var / static_cast<double>(tail);
  }

  // Window e (1-based) is stable when the next five windows each move < 2%.
  const auto windows = static_cast<int64_t>(means.size());
  auto change = [&](int64_t w) {  // 0-based w >= 1
    return std::abs(means[w] - means[w - 1]) / std::max(std::abs(means[w - 1]), 1e-12);
  };
  for (int64_t e = 1; e + kStabilizationWindows <= windows; ++e) {
    bool stable = true;
    for (int64_t w = e; w < e + kStabilizationWindows && stable; ++w) stable = change(w) < kStabilizationTolerance;
    if (stable) {
      s.epochs_to_stabilization = e;
      break;
    }
  }

  double first = kNaN;
  for (double p : log.probe_std) {
    if (!std::isfinite(p)) continue;
    if (!std::isfinite(first)) {
      first = p;
      continue;
    }
    if (p < kCollapseFraction * first) ++s.collapse_events;
  }
  return s;
}

StabilityIndicators stability_indicators(const std::filesystem::path& losses_csv) {
  return stability_indicators(LossLog::read_csv(losses_csv));
}

std::string MetricReport::to_json() const {
  auto tagged = [&](double v) { return json{{"value", std::isfinite(v) ? json(v) : json(nullptr)}, {"protocol", to_string(protocol)}}; };
  json j;
  j["label"] = label;
  j["model_kind"] = model_kind;
  j["protocol"] = to_string(protocol);
  j["n_test"] = n_test;
  json m;
  m["fid"] = {{"mean", fid_mean}, {"std", fid_std}, {"splits", fid_splits}, {"protocol", to_string(protocol)}};
  m["lpips_like"] = tagged(lpips_like_mean);
  m["psnr"] = tagged(psnr_mean);
  m["ssim"] = tagged(ssim_mean);
  m["id_sim"] = tagged(id_sim_mean);
  m["nme"] = tagged(nme_mean);
  m["nme"]["skipped"] = nme_skipped;
  m["ms_per_image"] = tagged(ms_per_image);
  m["d_loss_variance"] = tagged(d_loss_variance);
  m["epochs_to_stabilization"] = {{"value", epochs_to_stabilization}, {"protocol", to_string(protocol)}};
  m["collapse_events"] = {{"value", collapse_events}, {"protocol", to_string(protocol)}};
  j["metrics"] = m;
  return j.dump(2);
}

MetricReport MetricReport::from_json(const std::string& text) {
  MetricReport r;
  try {
    auto j = json::parse(text);
    r.label = j.at("label").get<std::string>();
    r.model_kind = j.at("model_kind").get<std::string>();
    r.protocol = parse_protocol_tag(j.at("protocol").get<std::string>());
    r.n_test = j.value("n_test", int64_t{0});
    const auto& m = j.at("metrics");
    r.fid_mean = finite_or_nan(m.at("fid").at("mean"));
    r.fid_std = finite_or_nan(m.at("fid").at("std"));
    r.fid_splits = m.at("fid").at("splits").get<std::vector<double>>();
    r.lpips_like_mean = finite_or_nan(m.at("lpips_like").at("value"));
    r.psnr_mean = finite_or_nan(m.at("psnr").at("value"));
    r.ssim_mean = finite_or_nan(m.at("ssim").at("value"));
    r.id_sim_mean = finite_or_nan(m.at("id_sim").at("value"));
    r.nme_mean = finite_or_nan(m.at("nme").at("value"));
    r.nme_skipped = m.at("nme").value("skipped", int64_t{0});
    r.ms_per_image = finite_or_nan(m.at("ms_per_image").at("value"));
    r.d_loss_variance = finite_or_nan(m.at("d_loss_variance").at("value"));
    r.epochs_to_stabilization = m.at("epochs_to_stabilization").at("value").get<int64_t>();
    r.collapse_events = m.at("collapse_events").at("value").get<int64_t>();
  } catch (const json::exception& e) {
    throw Error(std::string("malformed report json: ") + e.what());
  }
  return r;
}

std::string reports_to_json(const std::vector<MetricReport>& reports) {
  json arr = json::array();
  for (const auto& r : reports) arr.push_back(json::parse(r.to_json()));
  return json{{"reports", arr}}.dump(2);
}

std::string render_markdown(const std::vector<MetricReport>& reports, bool footnotes) {
  std::set<ProtocolTag> tags;
  for (const auto& r : reports) tags.insert(r.protocol);
  if (!footnotes && tags.size() > 1) {
    throw Error("refusing to tabulate PSNR/SSIM from different protocols in one column without footnote markers");
  }
  const bool mark = footnotes;
  bool used_cycle = false, used_paired = false, used_recon = false;
  std::ostringstream os;
  os << "| Model | FID ↓ | LPIPS-like ↓ | PSNR ↑ | SSIM ↑ | ID-Sim ↑ | Time (ms/img) |\n";
  os << "|---|---|---|---|---|---|---|\n";
  for (const auto& r : reports) {
    std::string label = r.label, fidelity_mark;
    if (mark) {
      switch (r.protocol) {
        case ProtocolTag::UnpairedCycle:
          fidelity_mark = "†";
          used_cycle = true;
          break;
        case ProtocolTag::Paired:
          label += "‡";
          used_paired = true;
          break;
        case ProtocolTag::Reconstruction:
          fidelity_mark = "§";
          used_recon = true;
          break;
      }
    }
    os << "| " << label << " | " << fmt(r.fid_mean, 2) << " ± " << fmt(r.fid_std, 2) << " | "
       << fmt(r.lpips_like_mean, 3) << " | " << fmt(r.psnr_mean, 2) << fidelity_mark << " | " << fmt(r.ssim_mean, 3)
       << fidelity_mark << " | " << fmt(r.id_sim_mean, 3) << " | " << fmt(r.ms_per_image, 2) << " |\n";
  }
  if (used_cycle || used_paired || used_recon) {
    os << "\n*Notes.*\n";
    if (used_cycle) os << "†PSNR/SSIM are cycle-reconstruction scores (x vs G_YX(G_XY(x))); no paired ground truth.\n";
    if (used_paired) os << "‡Evaluated on the curated paired test subset (pose/alignment controlled).\n";
    if (used_recon) os << "§PSNR/SSIM are self-reconstruction scores of the autoencoder.\n";
  }
  os << "\nLPIPS-like uses a frozen perceptual extractor; unpaired rows compare against nearest-neighbour "
        "pseudo-targets.\n";
  os << "\n| Model | Protocol | NME ↓ | D-loss variance | Epochs to stabilization | Collapse events |\n";
  os << "|---|---|---|---|---|---|\n";
  for (const auto& r : reports) {
    os << "| " << r.label << " | " << to_string(r.protocol) << " | " << fmt(r.nme_mean, 4) << " | "
       << fmt(r.d_loss_variance, 5) << " | " << r.epochs_to_stabilization << " | " << r.collapse_events << " |\n";
  }
  return os.str();
}

ProtocolTag resolve_protocol(const TranslationModel& model, EvalProtocol protocol) {
  const auto kind = model.kind();
  if (kind == "pix2pix") {
    if (protocol != EvalProtocol::Paired) {
      throw ConfigError("protocol rule: pix2pix is evaluated on the curated paired test subset only (use paired)");
    }
    return ProtocolTag::Paired;
  }
  if (kind == "vae") {
    if (protocol != EvalProtocol::Unpaired) {
      throw ConfigError("protocol rule: the VAE reports self-reconstruction scores under the unpaired protocol only");
    }
    return ProtocolTag::Reconstruction;
  }
  return protocol == EvalProtocol::Paired ? ProtocolTag::Paired : ProtocolTag::UnpairedCycle;
}

MetricReport evaluate_model(TranslationModel& model, const ImageDataset& test_x, const ImageDataset& test_y,
                            EvalProtocol protocol, const PairIndex* pairs, const EvalOptions& options) {
  const auto tag = resolve_protocol(model, protocol);
  if (!model.supports(Direction::XtoY)) throw ConfigError("model cannot translate X to Y");
  if (!options.perceptual || !options.identity) throw ConfigError("evaluation needs perceptual and identity encoders");

  MetricReport r;
  r.model_kind = model.kind();
  r.protocol = tag;
  r.label = default_label(r.model_kind, tag);

  torch::Tensor x, y, truth_landmarks, truth_valid;
  if (tag == ProtocolTag::Paired) {
    if (!pairs || pairs->rows_x.empty()) {
      throw ConfigError("protocol rule: the paired protocol needs a curated paired subset (paired_with) in the test set");
    }
    auto rx = torch::tensor(pairs->rows_x, torch::kLong), ry = torch::tensor(pairs->rows_y, torch::kLong);
    x = test_x.images().index_select(0, rx);
    y = test_y.images().index_select(0, ry);
    truth_landmarks = test_y.landmarks().index_select(0, ry);
    truth_valid = test_y.landmarks_valid().index_select(0, ry);
  } else {
    x = test_x.images();
    y = test_y.images();
    truth_landmarks = test_x.landmarks();
    truth_valid = test_x.landmarks_valid();
  }
  r.n_test = x.size(0);

  auto fake = translate_all(model, x, Direction::XtoY, options.batch);
  auto fid = fid_protocol(fake, y, options.extractor, options.fid_splits, options.seed);
  r.fid_mean = fid.mean;
  r.fid_std = fid.std;
  r.fid_splits = fid.per_split;

  FidelityScores fidelity;
  if (tag == ProtocolTag::Paired) {
    r.lpips_like_mean = perceptual_distance(fake, y, *options.perceptual).mean().item<double>();
    fidelity = paired_psnr_ssim(fake, y);
  } else {
    r.lpips_like_mean = pseudo_pair_lpips(fake, y, *options.perceptual).mean;
    fidelity = cycle_psnr_ssim(x, model, Direction::XtoY);
  }
  r.psnr_mean = fidelity.psnr;
  r.ssim_mean = fidelity.ssim;
  r.id_sim_mean = id_sim(x, fake, *options.identity);

  if (options.landmarks && truth_landmarks.defined() && truth_landmarks.numel() > 0) {
    torch::Tensor pred;
    {
      torch::NoGradGuard guard;
      pred = options.landmarks->estimate(fake);
    }
    const auto& eyes = test_x.sidecar_manifest().eye_indices;
    auto nme = landmark_nme(pred, truth_landmarks, eyes, truth_valid);
    r.nme_mean = nme.nme;
    r.nme_skipped = nme.skipped;
  } else {
    r.nme_mean = kNaN;
  }

  if (options.timing_images > 0) {
    r.ms_per_image = timed_inference([&](const torch::Tensor& in) { return model.translate(in, Direction::XtoY); },
                                     options.timing_images, test_x.resolution(), options.timing_warmup,
                                     x.device(), options.seed);
  } else {
    r.ms_per_image = kNaN;
  }
  return r;
}

}  // namespace facecycle
