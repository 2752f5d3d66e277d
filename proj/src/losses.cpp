#include "facecycle/losses.hpp"

#include <cmath>

namespace facecycle {
namespace {

namespace F = torch::nn::functional;

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) {
    throw Error(std::string(what) + ": shape mismatch " + c10::str(a.sizes()) + " vs " + c10::str(b.sizes()));
  }
}

void require_finite(const std::vector<torch::Tensor>& logits, const char* side) {
  for (size_t s = 0; s < logits.size(); ++s) {
    if (!torch::isfinite(logits[s].detach()).all().item<bool>()) {
      throw NumericError(std::string("non-finite ") + side + " logits at scale " + std::to_string(s));
    }
  }
}

torch::Tensor mean_over_scales(const std::vector<torch::Tensor>& terms) {
  auto acc = terms.front();
  for (size_t i = 1; i < terms.size(); ++i) acc = acc + terms[i];
  return acc / static_cast<double>(terms.size());
}

torch::Tensor as_channel_mask(const torch::Tensor& mask, const torch::Tensor& like) {
  auto m = mask.detach().to(like.dtype());
  if (m.dim() == 2) m = m.unsqueeze(0);
  if (m.dim() != 3 || m.size(-1) != like.size(-1) || m.size(-2) != like.size(-2) ||
      (m.size(0) != 1 && m.size(0) != like.size(0))) {
    throw Error("semantic_cycle_loss: mask shape " + c10::str(mask.sizes()) + " does not match image " +
                c10::str(like.sizes()));
  }
  return m.unsqueeze(1);
}

// Euclidean norm with a zero gradient (rather than NaN) at the origin.
torch::Tensor safe_norm(const torch::Tensor& sq) {
  auto positive = sq > 0;
  auto sqrt = torch::sqrt(torch::where(positive, sq, torch::ones_like(sq)));
  return torch::where(positive, sqrt, torch::zeros_like(sq));
}

torch::Tensor one_minus_cos(const torch::Tensor& a, const torch::Tensor& b) {
  require_same_shape(a, b, "identity_loss");
  auto na = a.norm(2, 1), nb = b.norm(2, 1);
  if ((na == 0).any().item<bool>() || (nb == 0).any().item<bool>()) {
    throw NumericError("degenerate embedding: zero-norm vector");
  }
  // 1 - cos as half the squared distance of the unit vectors: no cancellation,
  // and exactly zero for equal embeddings.
  auto diff = a / na.unsqueeze(1) - b / nb.unsqueeze(1);
  return (0.5 * diff.square().sum(1)).mean();
}

torch::Tensor frobenius_term(const torch::Tensor& truth, const torch::Tensor& pred, const torch::Tensor& valid) {
  if (truth.size(-2) != pred.size(-2)) {
    throw Error("landmark_loss: landmark count mismatch " + std::to_string(truth.size(-2)) + " vs " +
                std::to_string(pred.size(-2)));
  }
  require_same_shape(truth, pred, "landmark_loss");
  auto per_image = safe_norm((pred - truth.detach()).pow(2).sum({-2, -1}));
  if (!valid.defined()) return per_image.mean();
  auto w = valid.to(per_image.dtype());
  return (per_image * w).sum() / w.sum().clamp_min(1.0);
}

}  // namespace

void LossWeights::validate() const {
  const std::pair<const char*, double> fields[] = {{"lambda_cyc", cyc}, {"lambda_id", id},   {"lambda_perc", perc},
                                                   {"lambda_sem", sem}, {"lambda_lmk", lmk}, {"lambda_con", con},
                                                   {"lambda_paired", paired}};
  for (const auto& [name, v] : fields) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError(std::string(name) + " must be finite and >= 0");
  }
}

void PatchSampleSpec::validate() const {
  if (n_patches < 1) throw ConfigError("n_patches must be >= 1");
  if (!(temperature > 0.0)) throw ConfigError("nce_temperature must be > 0");
  if (projection_dim < 1) throw ConfigError("projection_dim must be >= 1");
  if (tap_scales.empty()) throw ConfigError("nce_tap_scales must not be empty");
}

torch::Tensor adv_d_loss(const std::vector<torch::Tensor>& real_logits,
                         const std::vector<torch::Tensor>& fake_logits) {
  if (real_logits.empty() || real_logits.size() != fake_logits.size()) {
    throw Error("adv_d_loss: real and fake logits need the same non-zero number of scales");
  }
  require_finite(real_logits, "real");
  require_finite(fake_logits, "fake");
  std::vector<torch::Tensor> terms;
  for (size_t s = 0; s < real_logits.size(); ++s) {
    terms.push_back(F::softplus(-real_logits[s]).mean() + F::softplus(fake_logits[s]).mean());
  }
  return mean_over_scales(terms);
}

torch::Tensor adv_g_loss(const std::vector<torch::Tensor>& fake_logits, bool saturating) {
  if (fake_logits.empty()) throw Error("adv_g_loss: no logits");
  require_finite(fake_logits, "fake");
  std::vector<torch::Tensor> terms;
  for (const auto& f : fake_logits) terms.push_back(saturating ? -F::softplus(f).mean() : F::softplus(-f).mean());
  return mean_over_scales(terms);
}

torch::Tensor cycle_loss(const torch::Tensor& x, const torch::Tensor& x_rec, const torch::Tensor& y,
                         const torch::Tensor& y_rec) {
  require_same_shape(x, x_rec, "cycle_loss");
  require_same_shape(y, y_rec, "cycle_loss");
  return (x_rec - x).abs().mean() + (y_rec - y).abs().mean();
}

torch::Tensor identity_loss(const torch::Tensor& e_x, const torch::Tensor& e_gx, const torch::Tensor& e_y,
                            const torch::Tensor& e_gy) {
  return one_minus_cos(e_gx, e_x) + one_minus_cos(e_gy, e_y);
}

torch::Tensor perceptual_loss(const std::vector<torch::Tensor>& feat_gx, const std::vector<torch::Tensor>& feat_ystar,
                              const std::vector<torch::Tensor>& feat_gy,
                              const std::vector<torch::Tensor>& feat_xstar) {
  if (feat_gx.size() != feat_ystar.size() || feat_gy.size() != feat_xstar.size() ||
      feat_gx.size() != feat_gy.size() || feat_gx.empty()) {
    throw Error("perceptual_loss: tap count mismatch");
  }
  torch::Tensor acc;
  for (size_t t = 0; t < feat_gx.size(); ++t) {
    require_same_shape(feat_gx[t], feat_ystar[t], "perceptual_loss");
    require_same_shape(feat_gy[t], feat_xstar[t], "perceptual_loss");
    auto term = (feat_gx[t] - feat_ystar[t].detach()).abs().mean() + (feat_gy[t] - feat_xstar[t].detach()).abs().mean();
    acc = acc.defined() ? acc + term : term;
  }
  return acc;
}

torch::Tensor semantic_cycle_loss(const torch::Tensor& x, const torch::Tensor& x_rec, const torch::Tensor& mask_x,
                                  const torch::Tensor& y, const torch::Tensor& y_rec, const torch::Tensor& mask_y) {
  require_same_shape(x, x_rec, "semantic_cycle_loss");
  require_same_shape(y, y_rec, "semantic_cycle_loss");
  auto mx = as_channel_mask(mask_x, x);
  auto my = as_channel_mask(mask_y, y);
  return (mx * (x_rec - x)).abs().mean() + (my * (y_rec - y)).abs().mean();
}

torch::Tensor landmark_loss(const torch::Tensor& l_x, const torch::Tensor& l_gx, const torch::Tensor& l_y,
                            const torch::Tensor& l_gy, const torch::Tensor& valid_x, const torch::Tensor& valid_y) {
  return frobenius_term(l_x, l_gx, valid_x) + frobenius_term(l_y, l_gy, valid_y);
}

torch::Tensor paired_l1_loss(const torch::Tensor& prediction, const torch::Tensor& truth) {
  require_same_shape(prediction, truth, "paired_l1_loss");
  return (prediction - truth.detach()).abs().mean();
}

torch::Tensor mean_landmark_distance(const torch::Tensor& a, const torch::Tensor& b) {
  require_same_shape(a, b, "mean_landmark_distance");
  return (a - b).pow(2).sum(-1).sqrt().mean();
}

PatchProjectionImpl::PatchProjectionImpl(const std::vector<int64_t>& in_channels, int64_t projection_dim) {
  for (size_t t = 0; t < in_channels.size(); ++t) {
    torch::nn::Sequential mlp(torch::nn::Linear(in_channels[t], projection_dim), torch::nn::ReLU(),
                              torch::nn::Linear(projection_dim, projection_dim));
    heads_.push_back(register_module("head" + std::to_string(t), mlp));
  }
}

torch::Tensor PatchProjectionImpl::project(size_t tap, const torch::Tensor& x) {
  if (tap >= heads_.size()) throw Error("patch projection: tap " + std::to_string(tap) + " has no head");
  return F::normalize(heads_[tap]->forward(x), F::NormalizeFuncOptions().dim(-1).eps(1e-12));
}

torch::Tensor patch_nce_loss(const std::vector<torch::Tensor>& feat_src, const std::vector<torch::Tensor>& feat_out,
                             PatchProjection& head, const PatchSampleSpec& spec, uint64_t sampler_seed) {
  spec.validate();
  if (feat_src.size() != feat_out.size() || feat_src.empty()) throw Error("patch_nce_loss: tap count mismatch");
  torch::Tensor acc;
  for (size_t t = 0; t < feat_src.size(); ++t) {
    require_same_shape(feat_src[t], feat_out[t], "patch_nce_loss");
    const auto n = feat_src[t].size(0), c = feat_src[t].size(1);
    const auto locations = feat_src[t].size(2) * feat_src[t].size(3);
    if (spec.n_patches > locations) {
      throw ConfigError("n_patches " + std::to_string(spec.n_patches) + " exceeds available locations (max " +
                        std::to_string(locations) + ") at tap " + std::to_string(t));
    }
    auto gen = make_generator(mix_seed(sampler_seed, t));
    auto idx = torch::randperm(locations, gen, torch::kLong).slice(0, 0, spec.n_patches).to(feat_src[t].device());
    auto sample = [&](const torch::Tensor& f) {
      return f.flatten(2).index_select(2, idx).permute({0, 2, 1}).reshape({n * spec.n_patches, c});
    };
    auto anchors = head->project(t, sample(feat_src[t])).view({n, spec.n_patches, -1});
    auto candidates = head->project(t, sample(feat_out[t])).view({n, spec.n_patches, -1});
    if (spec.batch_negatives) {
      anchors = anchors.reshape({1, n * spec.n_patches, -1});
      candidates = candidates.reshape({1, n * spec.n_patches, -1});
    }
    auto logits = torch::bmm(anchors, candidates.transpose(1, 2)) / spec.temperature;
    auto term = -torch::log_softmax(logits, -1).diagonal(0, 1, 2).mean();
    acc = acc.defined() ? acc + term : term;
  }
  return acc / static_cast<double>(feat_src.size());
}

const std::vector<std::string>& generator_component_names() {
  static const std::vector<std::string> names{"gan_G_xy", "gan_G_yx", "cyc",    "id",        "perc",
                                              "sem_cyc",  "lmk",      "con",    "gan_G_pair", "paired"};
  return names;
}

WeightedTotal total_generator_loss(const LossTerms& terms, const LossWeights& weights, bool hybrid) {
  const std::map<std::string, double> w{{"gan_G_xy", 1.0},     {"gan_G_yx", 1.0}, {"cyc", weights.cyc},
                                        {"id", weights.id},     {"perc", weights.perc},
                                        {"sem_cyc", weights.sem}, {"lmk", weights.lmk},
                                        {"con", weights.con},   {"gan_G_pair", hybrid ? 1.0 : 0.0},
                                        {"paired", hybrid ? weights.paired : 0.0}};
  for (const auto& [name, _] : terms.components) {
    if (!w.count(name)) throw Error("total_generator_loss: unknown component '" + name + "'");
  }
  WeightedTotal out;
  for (const auto& name : generator_component_names()) {
    const double weight = w.at(name);
    auto it = terms.components.find(name);
    if (it == terms.components.end() || !it->second.defined()) {
      if (weight != 0.0) throw Error("total_generator_loss: missing component '" + name + "' with nonzero weight");
      out.report.components[name] = 0.0;
      out.report.weights[name] = weight;
      continue;
    }
    out.report.components[name] = it->second.detach().item<double>();
    out.report.weights[name] = weight;
    if (weight == 0.0) continue;
    auto term = weight == 1.0 ? it->second : weight * it->second;
    out.total = out.total.defined() ? out.total + term : term;
  }
  if (!out.total.defined()) throw Error("total_generator_loss: no weighted component");
  for (const auto& [name, v] : terms.extra) out.report.components[name] = v;
  out.report.total = out.total.detach().item<double>();
  return out;
}

}  // namespace facecycle
