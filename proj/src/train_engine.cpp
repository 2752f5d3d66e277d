#include "facecycle/train_engine.hpp"
#include "facecycle/image_io.hpp"

#include <cmath>
#include <sstream>

namespace facecycle {
namespace {

namespace F = torch::nn::functional;

struct AugmentDraw {
  std::vector<double> brightness, saturation, contrast;
  std::vector<std::pair<int64_t, int64_t>> shifts;
  std::vector<std::array<int64_t, 4>> cutout;  // row0, row1, col0, col1; empty when row0 == row1
  bool do_brightness = false, do_saturation = false, do_contrast = false, do_translate = false, do_cutout = false;
};

AugmentDraw draw_augment(int64_t n, int64_t h, int64_t w, const AugmentPolicy& p, uint64_t seed) {
  AugmentDraw d;
  if (p.apply_prob <= 0.0) return d;
  d.do_brightness = p.brightness > 0.0;
  d.do_saturation = p.saturation_lo != 1.0 || p.saturation_hi != 1.0;
  d.do_contrast = p.contrast_lo != 1.0 || p.contrast_hi != 1.0;
  d.do_translate = p.translate_frac > 0.0;
  d.do_cutout = p.cutout_frac > 0.0;
  // Fixed draw layout per image: (apply, value) per colour op, then
  // (apply, dx, dy) for translation and (apply, cy, cx) for cutout.
  auto gen = make_generator(seed);
  auto u = torch::rand({n, 12}, gen, torch::kDouble);
  auto a = u.accessor<double, 2>();
  auto lerp = [](double lo, double hi, double t) { return lo + (hi - lo) * t; };
  const auto max_dx = static_cast<int64_t>(std::llround(p.translate_frac * static_cast<double>(w)));
  const auto max_dy = static_cast<int64_t>(std::llround(p.translate_frac * static_cast<double>(h)));
  const auto cut_h = static_cast<int64_t>(std::llround(p.cutout_frac * static_cast<double>(h)));
  const auto cut_w = static_cast<int64_t>(std::llround(p.cutout_frac * static_cast<double>(w)));
  for (int64_t i = 0; i < n; ++i) {
    const bool on[5] = {a[i][0] < p.apply_prob, a[i][2] < p.apply_prob, a[i][4] < p.apply_prob,
                        a[i][6] < p.apply_prob, a[i][9] < p.apply_prob};
    d.brightness.push_back(on[0] ? p.brightness * (2.0 * a[i][1] - 1.0) : 0.0);
    d.saturation.push_back(on[1] ? lerp(p.saturation_lo, p.saturation_hi, a[i][3]) : 1.0);
    d.contrast.push_back(on[2] ? lerp(p.contrast_lo, p.contrast_hi, a[i][5]) : 1.0);
    if (on[3]) {
      auto dx = static_cast<int64_t>(std::llround((2.0 * a[i][7] - 1.0) * static_cast<double>(max_dx)));
      auto dy = static_cast<int64_t>(std::llround((2.0 * a[i][8] - 1.0) * static_cast<double>(max_dy)));
      d.shifts.emplace_back(dx, dy);
    } else {
      d.shifts.emplace_back(0, 0);
    }
    if (on[4] && cut_h > 0 && cut_w > 0) {
      auto cy = static_cast<int64_t>(a[i][10] * static_cast<double>(h));
      auto cx = static_cast<int64_t>(a[i][11] * static_cast<double>(w));
      d.cutout.push_back({std::max<int64_t>(0, cy - cut_h / 2), std::min(h, cy - cut_h / 2 + cut_h),
                          std::max<int64_t>(0, cx - cut_w / 2), std::min(w, cx - cut_w / 2 + cut_w)});
    } else {
      d.cutout.push_back({0, 0, 0, 0});
    }
  }
  return d;
}

torch::Tensor per_image(const std::vector<double>& v, const torch::Tensor& like) {
  return torch::tensor(v, torch::kDouble).to(like.dtype()).to(like.device()).view({-1, 1, 1, 1});
}

torch::Tensor apply_augment(const torch::Tensor& x, const AugmentDraw& d) {
  auto out = x;
  if (d.do_brightness) out = out + per_image(d.brightness, out);
  if (d.do_saturation) {
    auto m = out.mean(1, true);
    out = (out - m) * per_image(d.saturation, out) + m;
  }
  if (d.do_contrast) {
    auto m = out.mean({1, 2, 3}, true);
    out = (out - m) * per_image(d.contrast, out) + m;
  }
  if (d.do_translate) out = translate_images(out, d.shifts);
  if (d.do_cutout) {
    auto mask = torch::ones({out.size(0), 1, out.size(2), out.size(3)}, out.options());
    for (size_t i = 0; i < d.cutout.size(); ++i) {
      const auto& c = d.cutout[i];
      if (c[0] < c[1] && c[2] < c[3]) {
        mask[static_cast<int64_t>(i)].slice(1, c[0], c[1]).slice(2, c[2], c[3]).zero_();
      }
    }
    out = out * mask;
  }
  return out;
}

std::vector<torch::Tensor> params_of(const std::vector<const torch::nn::Module*>& modules) {
  std::vector<torch::Tensor> out;
  for (auto* m : modules) {
    for (auto& p : m->parameters()) out.push_back(p);
  }
  return out;
}

void set_requires_grad(const std::vector<torch::Tensor>& params, bool flag) {
  for (auto p : params) p.requires_grad_(flag);
}

void save_module(torch::serialize::OutputArchive& archive, const std::string& key, const torch::nn::Module& m) {
  torch::serialize::OutputArchive sub;
  m.save(sub);
  archive.write(key, sub);
}

void load_module(torch::serialize::InputArchive& archive, const std::string& key, torch::nn::Module& m) {
  torch::serialize::InputArchive sub;
  if (!archive.try_read(key, sub)) throw Error("checkpoint lacks '" + key + "'");
  m.load(sub);
}

uint64_t step_seed(uint64_t seed, int64_t iter, int substep, uint64_t tag) {
  return mix_seed(mix_seed(mix_seed(seed, static_cast<uint64_t>(iter)), static_cast<uint64_t>(substep)), tag);
}

}  // namespace

void TrainSchedule::validate() const {
  if (total_iters < 1) throw ConfigError("total_iters must be >= 1");
  if (!(ttur_phase_frac > 0.0 && ttur_phase_frac < 1.0)) throw ConfigError("ttur_phase_frac must be in (0, 1)");
  if (ttur_ratio < 1) throw ConfigError("ttur_ratio must be >= 1");
  if (!(lr0 > 0.0)) throw ConfigError("lr0 must be > 0");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw ConfigError("adam betas must be in [0, 1)");
  }
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ConfigError("ema_decay must be in [0, 1)");
  if (!(clip_max_norm > 0.0)) throw ConfigError("clip_max_norm must be > 0");
  if (!(resize_switch_frac >= 0.0 && resize_switch_frac <= 1.0)) throw ConfigError("resize_switch_frac must be in [0, 1]");
  if (resolutions.empty() || resolutions.size() > 2) throw ConfigError("resolutions must list one or two sizes");
  for (int r : resolutions) {
    if (!ImageBatch::is_supported_resolution(r)) throw ConfigError("resolutions: " + std::to_string(r) + " not in {64, 128, 256}");
  }
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (accumulation < 1 || batch_size % accumulation != 0) {
    throw ConfigError("accumulation must be >= 1 and divide batch_size");
  }
}

void AugmentPolicy::validate() const {
  if (translate_frac < 0.0 || translate_frac > 1.0) throw ConfigError("aug_translate_frac must be in [0, 1]");
  if (brightness < 0.0) throw ConfigError("aug_brightness must be >= 0");
  if (saturation_lo < 0.0 || saturation_hi < saturation_lo) throw ConfigError("aug_saturation range invalid");
  if (contrast_lo < 0.0 || contrast_hi < contrast_lo) throw ConfigError("aug_contrast range invalid");
  if (cutout_frac < 0.0 || cutout_frac > 1.0) throw ConfigError("aug_cutout_frac must be in [0, 1]");
  if (apply_prob < 0.0 || apply_prob > 1.0) throw ConfigError("aug_apply_prob must be in [0, 1]");
}

AugmentPolicy AugmentPolicy::none() { return {0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0}; }

std::pair<int, int> ttur_steps(int64_t iter, const TrainSchedule& s) {
  if (!s.ttur) return {1, 1};
  const auto boundary = static_cast<int64_t>(std::floor(s.ttur_phase_frac * static_cast<double>(s.total_iters)));
  return iter < boundary ? std::pair{s.ttur_ratio, 1} : std::pair{1, 1};
}

double learning_rate(int64_t iter, const TrainSchedule& s) {
  const double half = static_cast<double>(s.total_iters) / 2.0;
  const double t = static_cast<double>(iter);
  if (t < half) return s.lr0;
  return std::max(0.0, s.lr0 * (1.0 - (t - half) / half));
}

int current_resolution(int64_t iter, const TrainSchedule& s) {
  if (s.resolutions.size() == 1) return s.resolutions[0];
  const auto boundary = static_cast<int64_t>(std::floor(s.resize_switch_frac * static_cast<double>(s.total_iters)));
  return iter < boundary ? s.resolutions[0] : s.resolutions[1];
}

void ema_update(const std::vector<torch::Tensor>& shadow, const std::vector<torch::Tensor>& live, double decay) {
  if (!(decay >= 0.0 && decay < 1.0)) throw Error("ema decay must be in [0, 1)");
  if (shadow.size() != live.size()) throw Error("ema_update: parameter count mismatch");
  torch::NoGradGuard guard;
  for (size_t i = 0; i < shadow.size(); ++i) {
    if (shadow[i].sizes() != live[i].sizes()) throw Error("ema_update: shape mismatch at parameter " + std::to_string(i));
    auto s = shadow[i];
    s.mul_(decay).add_(live[i].detach(), 1.0 - decay);
  }
}

double clip_global_norm(const std::vector<torch::Tensor>& grads, double max_norm, const std::string& group) {
  if (!(max_norm > 0.0)) throw Error("clip_global_norm: max_norm must be > 0");
  torch::NoGradGuard guard;
  double sq = 0.0;
  for (const auto& g : grads) {
    if (!g.defined()) continue;
    const double s = g.to(torch::kDouble).pow(2).sum().item<double>();
    if (!std::isfinite(s)) throw NumericError("non-finite gradient in parameter group '" + group + "'");
    sq += s;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto g : grads) {
      if (g.defined()) g.mul_(scale);
    }
  }
  return norm;
}

std::vector<torch::Tensor> gradients_of(const std::vector<torch::Tensor>& params) {
  std::vector<torch::Tensor> out;
  for (const auto& p : params) {
    if (p.grad().defined()) out.push_back(p.grad());
  }
  return out;
}

torch::Tensor translate_images(const torch::Tensor& x, const std::vector<std::pair<int64_t, int64_t>>& shifts) {
  if (static_cast<int64_t>(shifts.size()) != x.size(0)) throw Error("translate_images: one shift per image required");
  const auto h = x.size(2), w = x.size(3);
  std::vector<torch::Tensor> out;
  for (int64_t i = 0; i < x.size(0); ++i) {
    auto [dx, dy] = shifts[static_cast<size_t>(i)];
    dx = std::clamp(dx, -w, w);
    dy = std::clamp(dy, -h, h);
    auto xi = x[i];
    if (dx == 0 && dy == 0) {
      out.push_back(xi);
      continue;
    }
    auto padded = F::pad(xi.unsqueeze(0), F::PadFuncOptions({std::max<int64_t>(dx, 0), std::max<int64_t>(-dx, 0),
                                                             std::max<int64_t>(dy, 0), std::max<int64_t>(-dy, 0)}));
    const auto r0 = std::max<int64_t>(-dy, 0), c0 = std::max<int64_t>(-dx, 0);
    out.push_back(padded.squeeze(0).slice(1, r0, r0 + h).slice(2, c0, c0 + w));
  }
  return torch::stack(out);
}

std::pair<torch::Tensor, torch::Tensor> diff_augment(const torch::Tensor& real, const torch::Tensor& fake,
                                                     const AugmentPolicy& policy, uint64_t seed) {
  if (real.sizes() != fake.sizes()) throw Error("diff_augment: real and fake shapes differ");
  auto d = draw_augment(real.size(0), real.size(2), real.size(3), policy, seed);
  return {apply_augment(real, d), apply_augment(fake, d)};
}

torch::Tensor diff_augment_one(const torch::Tensor& x, const AugmentPolicy& policy, uint64_t seed) {
  return apply_augment(x, draw_augment(x.size(0), x.size(2), x.size(3), policy, seed));
}

torch::Tensor TranslationModel::reconstruct(const torch::Tensor& x, Direction direction) {
  auto back = direction == Direction::XtoY ? Direction::YtoX : Direction::XtoY;
  return translate(translate(x, direction), back);
}

LossReport IdentityModel::step(const StepInputs&, int64_t) {
  ++g_updates_;
  LossReport r;
  for (const auto& name : generator_component_names()) r.components[name] = 0.0;
  return r;
}

GuidanceSet GuidanceSet::toy(uint64_t seed) {
  GuidanceSet g;
  g.identity = FrozenEncoder::toy_identity(mix_seed(seed, 0x1d));
  g.perceptual = FrozenEncoder::toy_perceptual(mix_seed(seed, 0x9e));
  g.landmarks = std::make_shared<ToyLandmarkEstimator>();
  return g;
}

void CycleGanConfig::validate() const {
  generator.validate();
  discriminator.validate();
  weights.validate();
  augment.validate();
  if (weights.con > 0.0) nce.validate();
  if (history_size < 0) throw ConfigError("history_size must be >= 0");
}

void copy_parameters(const std::vector<torch::Tensor>& dst, const std::vector<torch::Tensor>& src) {
  if (dst.size() != src.size()) throw Error("copy_parameters: count mismatch");
  torch::NoGradGuard guard;
  for (size_t i = 0; i < dst.size(); ++i) {
    auto d = dst[i];
    d.copy_(src[i]);
  }
}

CycleGanModel::CycleGanModel(CycleGanConfig cfg, TrainSchedule schedule, GuidanceSet guidance)
    : cfg_(std::move(cfg)), schedule_(std::move(schedule)), guidance_(std::move(guidance)) {
  cfg_.validate();
  schedule_.validate();
  torch::manual_seed(cfg_.seed);
  g_xy_ = Generator(cfg_.generator);
  g_yx_ = Generator(cfg_.generator);
  d_x_ = MultiScaleDiscriminator(cfg_.discriminator);
  d_y_ = MultiScaleDiscriminator(cfg_.discriminator);
  const auto tap_channels = g_xy_->encoder_channels(cfg_.nce.tap_scales);
  nce_xy_ = PatchProjection(tap_channels, cfg_.nce.projection_dim);
  nce_yx_ = PatchProjection(tap_channels, cfg_.nce.projection_dim);
  if (cfg_.weights.paired > 0.0) {
    auto dc = cfg_.discriminator;
    dc.in_channels = 6;
    d_pair_ = MultiScaleDiscriminator(dc);
  }
  ema_xy_ = Generator(cfg_.generator);
  ema_yx_ = Generator(cfg_.generator);
  copy_module_state(*ema_xy_, *g_xy_);
  copy_module_state(*ema_yx_, *g_yx_);
  for (auto* g : {&ema_xy_, &ema_yx_}) {
    for (auto& p : (*g)->parameters()) p.requires_grad_(false);
    (*g)->eval();
  }
  auto adam = [&](const std::vector<torch::Tensor>& params) {
    return std::make_unique<torch::optim::Adam>(
        params, torch::optim::AdamOptions(schedule_.lr0).betas({schedule_.adam_beta1, schedule_.adam_beta2}));
  };
  opt_g_ = adam(generator_parameters());
  opt_d_ = adam(discriminator_parameters());
}

std::vector<torch::Tensor> CycleGanModel::generator_parameters() const {
  return params_of({g_xy_.get(), g_yx_.get(), nce_xy_.get(), nce_yx_.get()});
}

std::vector<torch::Tensor> CycleGanModel::discriminator_parameters() const {
  std::vector<const torch::nn::Module*> ms{d_x_.get(), d_y_.get()};
  if (d_pair_) ms.push_back(d_pair_.get());
  return params_of(ms);
}

void CycleGanModel::set_learning_rate(double lr) {
  for (auto* opt : {opt_g_.get(), opt_d_.get()}) {
    for (auto& group : opt->param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
  }
}

torch::Tensor CycleGanModel::replay(std::deque<torch::Tensor>& pool, const torch::Tensor& fakes, uint64_t seed) {
  if (cfg_.history_size == 0) return fakes;
  auto gen = make_generator(seed);
  auto u = torch::rand({fakes.size(0), 2}, gen, torch::kDouble);
  auto a = u.accessor<double, 2>();
  std::vector<torch::Tensor> out;
  for (int64_t i = 0; i < fakes.size(0); ++i) {
    auto f = fakes[i].detach().clone();
    if (static_cast<int>(pool.size()) < cfg_.history_size) {
      pool.push_back(f);
      out.push_back(f);
    } else if (a[i][0] < 0.5) {
      auto k = std::min(pool.size() - 1, static_cast<size_t>(a[i][1] * static_cast<double>(pool.size())));
      out.push_back(pool[k]);
      pool[k] = f;
    } else {
      out.push_back(f);
    }
  }
  return torch::stack(out);
}

double CycleGanModel::discriminator_update(const TrainBatch& bx, const TrainBatch& by, const PairedBatch* paired,
                                           int64_t iter, int substep, double& loss_dx, double& loss_dy) {
  const bool mixed = cfg_.precision == Precision::Mixed;
  const int acc = schedule_.accumulation;
  const int64_t micro = bx.size() / acc;
  const auto seed = step_seed(cfg_.seed, iter, substep, 0xd);
  opt_d_->zero_grad();
  loss_dx = loss_dy = 0.0;
  double total = 0.0;
  for (int k = 0; k < acc; ++k) {
    auto x = bx.images.slice(0, k * micro, (k + 1) * micro);
    auto y = by.images.slice(0, k * micro, (k + 1) * micro);
    torch::Tensor fake_y, fake_x;
    {
      torch::NoGradGuard no_grad;
      AutocastScope ac(mixed);
      fake_y = g_xy_->forward(x).to(torch::kFloat);
      fake_x = g_yx_->forward(y).to(torch::kFloat);
    }
    fake_y = replay(pool_y_, fake_y, mix_seed(seed, 10 + k));
    fake_x = replay(pool_x_, fake_x, mix_seed(seed, 20 + k));
    auto policy = cfg_.diff_augment ? cfg_.augment : AugmentPolicy::none();
    auto [ry, fy] = diff_augment(y, fake_y, policy, mix_seed(seed, 30 + k));
    auto [rx, fx] = diff_augment(x, fake_x, policy, mix_seed(seed, 40 + k));
    auto logits = [&](MultiScaleDiscriminator& d, const torch::Tensor& in) {
      AutocastScope ac(mixed);
      auto out = d->forward(in);
      for (auto& t : out) t = t.to(torch::kFloat);
      return out;
    };
    auto ldy = adv_d_loss(logits(d_y_, ry), logits(d_y_, fy));
    auto ldx = adv_d_loss(logits(d_x_, rx), logits(d_x_, fx));
    auto loss = ldx + ldy;
    if (paired && d_pair_) {
      torch::Tensor yhat;
      {
        torch::NoGradGuard no_grad;
        AutocastScope ac(mixed);
        yhat = g_xy_->forward(paired->x).to(torch::kFloat);
      }
      auto real_pair = torch::cat({paired->x, paired->y}, 1);
      auto fake_pair = torch::cat({paired->x, yhat}, 1);
      auto [rp, fp] = diff_augment(real_pair, fake_pair, policy, mix_seed(seed, 50 + k));
      loss = loss + adv_d_loss(logits(d_pair_, rp), logits(d_pair_, fp));
    }
    if (!torch::isfinite(loss).item<bool>()) {
      throw NumericError("non-finite discriminator loss at iter " + std::to_string(iter));
    }
    (loss / static_cast<double>(acc)).backward();
    loss_dx += ldx.item<double>() / acc;
    loss_dy += ldy.item<double>() / acc;
    total += loss.item<double>() / acc;
  }
  clip_global_norm(gradients_of(discriminator_parameters()), schedule_.clip_max_norm, "discriminator");
  opt_d_->step();
  ++d_updates_;
  return total;
}

LossTerms CycleGanModel::generator_terms(const TrainBatch& bx, const TrainBatch& by, const PairedBatch* paired,
                                         int64_t iter, int substep) {
  const bool mixed = cfg_.precision == Precision::Mixed;
  const auto& w = cfg_.weights;
  const auto seed = step_seed(cfg_.seed, iter, substep, 0x9);
  auto run = [&](Generator& g, const torch::Tensor& in) {
    AutocastScope ac(mixed);
    return g->forward(in).to(torch::kFloat);
  };
  auto logits = [&](MultiScaleDiscriminator& d, const torch::Tensor& in) {
    AutocastScope ac(mixed);
    auto out = d->forward(in);
    for (auto& t : out) t = t.to(torch::kFloat);
    return out;
  };
  const auto& x = bx.images;
  const auto& y = by.images;
  LossTerms terms;
  auto fake_y = run(g_xy_, x);
  auto fake_x = run(g_yx_, y);

  auto policy = cfg_.diff_augment ? cfg_.augment : AugmentPolicy::none();
  terms.components["gan_G_xy"] =
      adv_g_loss(logits(d_y_, diff_augment_one(fake_y, policy, mix_seed(seed, 1))), cfg_.saturating_gan);
  terms.components["gan_G_yx"] =
      adv_g_loss(logits(d_x_, diff_augment_one(fake_x, policy, mix_seed(seed, 2))), cfg_.saturating_gan);

  if (w.cyc > 0.0 || w.sem > 0.0) {
    auto rec_x = run(g_yx_, fake_y);
    auto rec_y = run(g_xy_, fake_x);
    if (w.cyc > 0.0) terms.components["cyc"] = cycle_loss(x, rec_x, y, rec_y);
    if (w.sem > 0.0) terms.components["sem_cyc"] = semantic_cycle_loss(x, rec_x, bx.masks, y, rec_y, by.masks);
  }
  if (w.id > 0.0) {
    if (!guidance_.identity) throw ConfigError("lambda_id > 0 requires an identity encoder");
    torch::Tensor e_x, e_y;
    {
      torch::NoGradGuard no_grad;
      e_x = guidance_.identity->embed(x);
      e_y = guidance_.identity->embed(y);
    }
    terms.components["id"] = identity_loss(e_x, guidance_.identity->embed(fake_y), e_y, guidance_.identity->embed(fake_x));
  }
  if (w.perc > 0.0) {
    if (!guidance_.perceptual) throw ConfigError("lambda_perc > 0 requires a perceptual encoder");
    const auto& phi = *guidance_.perceptual;
    auto pairs = retrieve_pseudo_pairs(x, y, phi, cfg_.retrieval);
    std::vector<torch::Tensor> f_ystar, f_xstar;
    {
      torch::NoGradGuard no_grad;
      f_ystar = phi.features(y.index_select(0, torch::tensor(pairs.idx_for_x, torch::kLong).to(y.device())));
      f_xstar = phi.features(x.index_select(0, torch::tensor(pairs.idx_for_y, torch::kLong).to(x.device())));
    }
    terms.components["perc"] = perceptual_loss(phi.features(fake_y), f_ystar, phi.features(fake_x), f_xstar);
  }
  if (w.lmk > 0.0) {
    if (!guidance_.landmarks) throw ConfigError("lambda_lmk > 0 requires a landmark estimator");
    terms.components["lmk"] = landmark_loss(bx.landmarks, guidance_.landmarks->estimate(fake_y), by.landmarks,
                                            guidance_.landmarks->estimate(fake_x), bx.landmarks_valid,
                                            by.landmarks_valid);
  }
  if (w.con > 0.0) {
    auto encode = [&](Generator& g, const torch::Tensor& in) {
      AutocastScope ac(mixed);
      auto feats = g->encode(in, cfg_.nce.tap_scales);
      for (auto& f : feats) f = f.to(torch::kFloat);
      return feats;
    };
    terms.components["con"] =
        patch_nce_loss(encode(g_xy_, x), encode(g_xy_, fake_y), nce_xy_, cfg_.nce, mix_seed(seed, 3)) +
        patch_nce_loss(encode(g_yx_, y), encode(g_yx_, fake_x), nce_yx_, cfg_.nce, mix_seed(seed, 4));
  }
  if (paired && w.paired > 0.0) {
    if (paired->x.sizes() != paired->y.sizes()) throw Error("hybrid_paired_step: misaligned pair shapes");
    auto yhat = run(g_xy_, paired->x);
    terms.components["paired"] = paired_l1_loss(yhat, paired->y);
    auto fake_pair = torch::cat({paired->x, yhat}, 1);
    terms.components["gan_G_pair"] =
        adv_g_loss(logits(d_pair_, diff_augment_one(fake_pair, policy, mix_seed(seed, 5))), cfg_.saturating_gan);
  }
  return terms;
}

LossReport CycleGanModel::generator_update(const TrainBatch& bx, const TrainBatch& by, const PairedBatch* paired,
                                           int64_t iter, int substep, const LossReport& d_report) {
  const int acc = schedule_.accumulation;
  const int64_t micro = bx.size() / acc;
  const bool hybrid = paired != nullptr && cfg_.weights.paired > 0.0;
  auto d_params = discriminator_parameters();
  set_requires_grad(d_params, false);
  opt_g_->zero_grad();
  LossReport report;
  try {
    for (int k = 0; k < acc; ++k) {
      auto mx = bx.slice(k * micro, (k + 1) * micro);
      auto my = by.slice(k * micro, (k + 1) * micro);
      std::optional<PairedBatch> mp;
      if (hybrid) {
        const int64_t pm = paired->x.size(0) / acc;
        mp = PairedBatch{paired->x.slice(0, k * pm, (k + 1) * pm), paired->y.slice(0, k * pm, (k + 1) * pm)};
      }
      auto terms = generator_terms(mx, my, mp ? &*mp : nullptr, iter, substep);
      auto weighted = total_generator_loss(terms, cfg_.weights, hybrid);
      if (!std::isfinite(weighted.report.total) || !weighted.report.all_finite()) {
        std::ostringstream diag;
        diag << "non-finite generator loss at iter " << iter << ":";
        for (const auto& [name, v] : weighted.report.components) diag << " " << name << "=" << v;
        log_event(LogLevel::Error, diag.str());
        throw NumericError(diag.str());
      }
      (weighted.total / static_cast<double>(acc)).backward();
      for (const auto& [name, v] : weighted.report.components) report.components[name] += v / acc;
      report.weights = weighted.report.weights;
      report.total += weighted.report.total / acc;
    }
  } catch (...) {
    set_requires_grad(d_params, true);
    throw;
  }
  set_requires_grad(d_params, true);
  const double gnorm = clip_global_norm(gradients_of(generator_parameters()), schedule_.clip_max_norm, "generator");
  if (!std::isfinite(gnorm)) throw NumericError("non-finite generator gradient norm at iter " + std::to_string(iter));
  opt_g_->step();
  ++g_updates_;
  if (schedule_.ema) {
    ema_update(ema_xy_->parameters(), g_xy_->parameters(), schedule_.ema_decay);
    ema_update(ema_yx_->parameters(), g_yx_->parameters(), schedule_.ema_decay);
    copy_parameters(ema_xy_->buffers(), g_xy_->buffers());
    copy_parameters(ema_yx_->buffers(), g_yx_->buffers());
  } else {
    copy_module_state(*ema_xy_, *g_xy_);
    copy_module_state(*ema_yx_, *g_yx_);
  }
  for (const auto& [name, v] : d_report.components) report.components[name] = v;
  return report;
}

LossReport CycleGanModel::run_step(const TrainBatch& bx, const TrainBatch& by, const PairedBatch* paired,
                                   int64_t iter) {
  if (bx.size() != by.size()) throw Error("train_step: batch sizes differ");
  if (bx.size() % schedule_.accumulation != 0) throw Error("train_step: batch not divisible by accumulation");
  set_learning_rate(learning_rate(iter, schedule_));
  g_xy_->train();
  g_yx_->train();
  d_x_->train();
  d_y_->train();
  const auto [d_steps, g_steps] = ttur_steps(iter, schedule_);
  const PairedBatch* active_pair = (paired && cfg_.weights.paired > 0.0) ? paired : nullptr;
  LossReport d_report;
  for (int s = 0; s < d_steps; ++s) {
    double ldx = 0.0, ldy = 0.0;
    const double dl = discriminator_update(bx, by, active_pair, iter, s, ldx, ldy);
    d_report.components["gan_D_x"] = ldx;
    d_report.components["gan_D_y"] = ldy;
    d_report.components["d_loss"] = dl;
  }
  LossReport report;
  for (int s = 0; s < g_steps; ++s) report = generator_update(bx, by, active_pair, iter, s, d_report);
  return report;
}

LossReport CycleGanModel::train_step(const TrainBatch& batch_x, const TrainBatch& batch_y, int64_t iter) {
  return run_step(batch_x, batch_y, nullptr, iter);
}

LossReport CycleGanModel::hybrid_paired_step(const PairedBatch& paired, const TrainBatch& batch_x,
                                             const TrainBatch& batch_y, int64_t iter) {
  if (paired.x.sizes() != paired.y.sizes()) throw Error("hybrid_paired_step: misaligned pair shapes");
  return run_step(batch_x, batch_y, &paired, iter);
}

LossReport CycleGanModel::step(const StepInputs& inputs, int64_t iter) {
  if (inputs.paired) return hybrid_paired_step(*inputs.paired, inputs.x, inputs.y, iter);
  return train_step(inputs.x, inputs.y, iter);
}

torch::Tensor CycleGanModel::translate(const torch::Tensor& x, Direction direction) {
  torch::NoGradGuard guard;
  const bool use_ema = cfg_.eval_ema;
  Generator g = direction == Direction::XtoY ? (use_ema ? ema_xy_ : g_xy_) : (use_ema ? ema_yx_ : g_yx_);
  const bool was_training = g->is_training();
  g->eval();
  auto out = g->forward(x);
  if (was_training) g->train();
  return out;
}

void CycleGanModel::save(torch::serialize::OutputArchive& archive) {
  save_module(archive, "g_xy", *g_xy_);
  save_module(archive, "g_yx", *g_yx_);
  save_module(archive, "ema_xy", *ema_xy_);
  save_module(archive, "ema_yx", *ema_yx_);
  save_module(archive, "d_x", *d_x_);
  save_module(archive, "d_y", *d_y_);
  save_module(archive, "nce_xy", *nce_xy_);
  save_module(archive, "nce_yx", *nce_yx_);
  if (d_pair_) save_module(archive, "d_pair", *d_pair_);
  torch::serialize::OutputArchive og, od;
  opt_g_->save(og);
  opt_d_->save(od);
  archive.write("opt_g", og);
  archive.write("opt_d", od);
  archive.write("d_updates", torch::tensor(d_updates_));
  archive.write("g_updates", torch::tensor(g_updates_));
}

void CycleGanModel::load(torch::serialize::InputArchive& archive) {
  load_module(archive, "g_xy", *g_xy_);
  load_module(archive, "g_yx", *g_yx_);
  load_module(archive, "ema_xy", *ema_xy_);
  load_module(archive, "ema_yx", *ema_yx_);
  load_module(archive, "d_x", *d_x_);
  load_module(archive, "d_y", *d_y_);
  load_module(archive, "nce_xy", *nce_xy_);
  load_module(archive, "nce_yx", *nce_yx_);
  if (d_pair_) load_module(archive, "d_pair", *d_pair_);
  torch::serialize::InputArchive og, od;
  if (archive.try_read("opt_g", og)) opt_g_->load(og);
  if (archive.try_read("opt_d", od)) opt_d_->load(od);
  torch::Tensor t;
  if (archive.try_read("d_updates", t)) d_updates_ = t.item<int64_t>();
  if (archive.try_read("g_updates", t)) g_updates_ = t.item<int64_t>();
}

void CycleGanModel::to(torch::Device device) {
  for (auto* m : std::vector<torch::nn::Module*>{g_xy_.get(), g_yx_.get(), ema_xy_.get(), ema_yx_.get(), d_x_.get(),
                                                 d_y_.get(), nce_xy_.get(), nce_yx_.get()}) {
    m->to(device);
  }
  if (d_pair_) d_pair_->to(device);
  if (guidance_.identity) guidance_.identity->to(device);
  if (guidance_.perceptual) guidance_.perceptual->to(device);
}

}  // namespace facecycle
