#include "facecycle/baselines.hpp"

#include <cmath>

namespace facecycle {
namespace F = torch::nn::functional;

namespace {

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

void save_optimizer(torch::serialize::OutputArchive& archive, const std::string& key, torch::optim::Optimizer& opt) {
  torch::serialize::OutputArchive sub;
  opt.save(sub);
  archive.write(key, sub);
}

void load_optimizer(torch::serialize::InputArchive& archive, const std::string& key, torch::optim::Optimizer& opt) {
  torch::serialize::InputArchive sub;
  if (archive.try_read(key, sub)) opt.load(sub);
}

void set_lr(torch::optim::Adam& opt, double lr) {
  for (auto& group : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
}

void check_sigma(const torch::Tensor& sigma) {
  if (!(sigma > 0).all().item<bool>()) throw Error("sigma must be positive");
}

int64_t stage_channels(int64_t base, int64_t cap, int level) {
  return std::min<int64_t>(base << level, cap);
}

}  // namespace

void VaeConfig::validate() const {
  if (latent_dim < 1) throw ConfigError("latent_dim must be >= 1");
  if (!(beta >= 0.0)) throw ConfigError("beta must be >= 0");
  if (!(lr > 0.0)) throw ConfigError("vae lr must be > 0");
  if (base_channels < 1 || max_channels < base_channels) throw ConfigError("vae channel widths invalid");
  if (n_downsample < 1) throw ConfigError("vae n_downsample must be >= 1");
  if (resolution < 64 || resolution % (1 << n_downsample) != 0) {
    throw ConfigError("vae resolution must be >= 64 and divisible by 2^n_downsample");
  }
}

torch::Tensor reparameterize(const torch::Tensor& mu, const torch::Tensor& sigma, const torch::Tensor& eps) {
  if (mu.sizes() != sigma.sizes() || mu.sizes() != eps.sizes()) throw Error("reparameterize: shape mismatch");
  check_sigma(sigma);
  return mu + sigma * eps;
}

torch::Tensor kl_divergence(const torch::Tensor& mu, const torch::Tensor& sigma) {
  check_sigma(sigma);
  auto per_dim = 0.5 * (mu.square() + sigma.square() - 1.0 - 2.0 * sigma.log());
  if (per_dim.dim() < 2) return per_dim.sum();
  return per_dim.flatten(1).sum(1).mean();
}

torch::Tensor vae_loss(const torch::Tensor& x, const torch::Tensor& x_recon, const torch::Tensor& mu,
                       const torch::Tensor& sigma, double beta) {
  if (x.sizes() != x_recon.sizes()) throw Error("vae_loss: reconstruction shape mismatch");
  return F::mse_loss(x_recon, x) + beta * kl_divergence(mu, sigma);
}

torch::Tensor slerp(const torch::Tensor& a, const torch::Tensor& b, double t) {
  auto a64 = a.to(torch::kDouble), b64 = b.to(torch::kDouble);
  const double na = a64.norm().item<double>(), nb = b64.norm().item<double>();
  if (na == 0.0 || nb == 0.0) return ((1.0 - t) * a64 + t * b64).to(a.scalar_type());
  const double cosang = std::clamp((a64 / na).dot(b64 / nb).item<double>(), -1.0, 1.0);
  const double omega = std::acos(cosang);
  if (std::sin(omega) < 1e-8) return ((1.0 - t) * a64 + t * b64).to(a.scalar_type());
  const double s = std::sin(omega);
  return (std::sin((1.0 - t) * omega) / s * a64 + std::sin(t * omega) / s * b64).to(a.scalar_type());
}

VaeModel::VaeModel(VaeConfig cfg, TrainSchedule schedule) : cfg_(std::move(cfg)), schedule_(std::move(schedule)) {
  cfg_.validate();
  torch::manual_seed(cfg_.seed);
  bottleneck_side_ = cfg_.resolution >> cfg_.n_downsample;
  bottleneck_channels_ = stage_channels(cfg_.base_channels, cfg_.max_channels, cfg_.n_downsample - 1);
  encoder_ = torch::nn::Sequential();
  int64_t in = 3;
  for (int i = 0; i < cfg_.n_downsample; ++i) {
    const auto out = stage_channels(cfg_.base_channels, cfg_.max_channels, i);
    encoder_->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 4).stride(2).padding(1)));
    encoder_->push_back(torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)));
    in = out;
  }
  const auto flat = bottleneck_channels_ * bottleneck_side_ * bottleneck_side_;
  to_mu_ = torch::nn::Linear(flat, cfg_.latent_dim);
  to_logvar_ = torch::nn::Linear(flat, cfg_.latent_dim);
  from_z_x_ = torch::nn::Linear(cfg_.latent_dim, flat);
  from_z_y_ = torch::nn::Linear(cfg_.latent_dim, flat);
  decoder_x_ = make_decoder();
  decoder_y_ = make_decoder();

  std::vector<torch::Tensor> params;
  for (torch::nn::Module* m : std::vector<torch::nn::Module*>{encoder_.get(), to_mu_.get(), to_logvar_.get(),
                                                              from_z_x_.get(), from_z_y_.get(), decoder_x_.get(),
                                                              decoder_y_.get()}) {
    for (auto& p : m->parameters()) params.push_back(p);
  }
  opt_ = std::make_unique<torch::optim::Adam>(
      params, torch::optim::AdamOptions(cfg_.lr).betas({schedule_.adam_beta1, schedule_.adam_beta2}));
}

torch::nn::Sequential VaeModel::make_decoder() {
  torch::nn::Sequential dec;
  for (int i = cfg_.n_downsample - 1; i >= 0; --i) {
    const auto in = stage_channels(cfg_.base_channels, cfg_.max_channels, i);
    const auto out = i == 0 ? int64_t{3} : stage_channels(cfg_.base_channels, cfg_.max_channels, i - 1);
    dec->push_back(torch::nn::ConvTranspose2d(torch::nn::ConvTranspose2dOptions(in, out, 4).stride(2).padding(1)));
    if (i > 0) dec->push_back(torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)));
  }
  dec->push_back(torch::nn::Tanh());
  return dec;
}

std::pair<torch::Tensor, torch::Tensor> VaeModel::encode(const torch::Tensor& x) {
  if (x.dim() != 4 || x.size(2) != cfg_.resolution || x.size(3) != cfg_.resolution) {
    throw Error("vae expects [N, 3, " + std::to_string(cfg_.resolution) + ", " + std::to_string(cfg_.resolution) +
                "] input");
  }
  auto h = encoder_->forward(x).flatten(1);
  auto mu = to_mu_->forward(h);
  // Clamped log-variance keeps sigma strictly positive and finite.
  auto sigma = (0.5 * to_logvar_->forward(h).clamp(-30.0, 20.0)).exp();
  return {mu, sigma};
}

torch::Tensor VaeModel::decode(const torch::Tensor& z, Domain domain) {
  auto& lin = domain == Domain::X ? from_z_x_ : from_z_y_;
  auto& dec = domain == Domain::X ? decoder_x_ : decoder_y_;
  auto h = lin->forward(z).view({z.size(0), bottleneck_channels_, bottleneck_side_, bottleneck_side_});
  return dec->forward(h);
}

torch::Tensor VaeModel::translate(const torch::Tensor& x, Direction direction) {
  torch::NoGradGuard guard;
  return decode(encode(x).first, target_domain(direction));
}

torch::Tensor VaeModel::reconstruct(const torch::Tensor& x, Direction direction) {
  torch::NoGradGuard guard;
  return decode(encode(x).first, source_domain(direction));
}

torch::Tensor VaeModel::interpolate(const torch::Tensor& a, const torch::Tensor& b, int steps, Domain domain) {
  if (steps < 2) throw Error("interpolate needs at least 2 steps");
  torch::NoGradGuard guard;
  auto ma = encode(a.dim() == 3 ? a.unsqueeze(0) : a).first[0];
  auto mb = encode(b.dim() == 3 ? b.unsqueeze(0) : b).first[0];
  std::vector<torch::Tensor> zs;
  for (int i = 0; i < steps; ++i) zs.push_back(slerp(ma, mb, static_cast<double>(i) / (steps - 1)));
  return decode(torch::stack(zs), domain);
}

LossReport VaeModel::step(const StepInputs& inputs, int64_t iter) {
  opt_->zero_grad();
  auto gen = make_generator(mix_seed(cfg_.seed, static_cast<uint64_t>(iter)));
  auto branch = [&](const torch::Tensor& x, Domain domain, double& recon, double& kl) {
    auto [mu, sigma] = encode(x);
    auto eps = torch::randn(mu.sizes(), gen, mu.options());
    auto out = decode(reparameterize(mu, sigma, eps), domain);
    auto r = F::mse_loss(out, x);
    auto k = kl_divergence(mu, sigma);
    recon += r.item<double>();
    kl += k.item<double>();
    return r + cfg_.beta * k;
  };
  double recon = 0.0, kl = 0.0;
  auto loss = branch(inputs.x.images, Domain::X, recon, kl) + branch(inputs.y.images, Domain::Y, recon, kl);
  if (!std::isfinite(loss.item<double>())) throw NumericError("non-finite vae loss at iteration " + std::to_string(iter));
  loss.backward();
  opt_->step();
  ++g_updates_;
  LossReport r;
  r.components["recon"] = recon;
  r.components["kl"] = kl;
  r.weights["recon"] = 1.0;
  r.weights["kl"] = cfg_.beta;
  r.total = loss.item<double>();
  return r;
}

void VaeModel::save(torch::serialize::OutputArchive& archive) {
  save_module(archive, "encoder", *encoder_);
  save_module(archive, "to_mu", *to_mu_);
  save_module(archive, "to_logvar", *to_logvar_);
  save_module(archive, "from_z_x", *from_z_x_);
  save_module(archive, "from_z_y", *from_z_y_);
  save_module(archive, "decoder_x", *decoder_x_);
  save_module(archive, "decoder_y", *decoder_y_);
  save_optimizer(archive, "opt", *opt_);
  archive.write("g_updates", torch::tensor(g_updates_));
}

void VaeModel::load(torch::serialize::InputArchive& archive) {
  load_module(archive, "encoder", *encoder_);
  load_module(archive, "to_mu", *to_mu_);
  load_module(archive, "to_logvar", *to_logvar_);
  load_module(archive, "from_z_x", *from_z_x_);
  load_module(archive, "from_z_y", *from_z_y_);
  load_module(archive, "decoder_x", *decoder_x_);
  load_module(archive, "decoder_y", *decoder_y_);
  load_optimizer(archive, "opt", *opt_);
  torch::Tensor t;
  if (archive.try_read("g_updates", t)) g_updates_ = t.item<int64_t>();
}

void VaeModel::to(torch::Device device) {
  for (torch::nn::Module* m : std::vector<torch::nn::Module*>{encoder_.get(), to_mu_.get(), to_logvar_.get(),
                                                              from_z_x_.get(), from_z_y_.get(), decoder_x_.get(),
                                                              decoder_y_.get()}) {
    m->to(device);
  }
}

void Pix2pixConfig::validate() const {
  if (base_channels < 1 || max_channels < base_channels) throw ConfigError("pix2pix channel widths invalid");
  if (depth < 2) throw ConfigError("pix2pix depth must be >= 2");
  if (!(lr > 0.0)) throw ConfigError("pix2pix lr must be > 0");
  if (!(lambda_l1 >= 0.0)) throw ConfigError("lambda_l1 must be >= 0");
  if (discriminator.in_channels != 6) throw ConfigError("pix2pix discriminator takes 6 input channels");
  discriminator.validate();
  augment.validate();
}

UNetImpl::UNetImpl(int64_t base, int64_t cap, int depth) {
  if (depth < 2) throw ConfigError("unet depth must be >= 2");
  auto ch = [&](int i) { return stage_channels(base, cap, i); };
  for (int i = 0; i < depth; ++i) {
    const auto in = i == 0 ? int64_t{3} : ch(i - 1);
    down_.push_back(register_module("down" + std::to_string(i),
                                    torch::nn::Conv2d(torch::nn::Conv2dOptions(in, ch(i), 4).stride(2).padding(1))));
  }
  for (int i = 0; i < depth; ++i) {
    const auto in = i == depth - 1 ? ch(i) : 2 * ch(i);
    const auto out = i == 0 ? int64_t{3} : ch(i - 1);
    up_.push_back(register_module(
        "up" + std::to_string(i),
        torch::nn::ConvTranspose2d(torch::nn::ConvTranspose2dOptions(in, out, 4).stride(2).padding(1))));
  }
}

torch::Tensor UNetImpl::forward(const torch::Tensor& x) {
  const int depth = static_cast<int>(down_.size());
  std::vector<torch::Tensor> skips;
  auto h = x;
  for (int i = 0; i < depth; ++i) {
    h = down_[i]->forward(h);
    // Outermost and innermost stages are left unnormalised.
    if (i > 0 && i < depth - 1) h = instance_norm(h);
    if (i < depth - 1) h = F::leaky_relu(h, F::LeakyReLUFuncOptions().negative_slope(0.2));
    skips.push_back(h);
  }
  h = F::relu(h);
  for (int i = depth - 1; i >= 0; --i) {
    if (i < depth - 1) h = torch::cat({h, skips[i]}, 1);
    h = up_[i]->forward(h);
    if (i > 0) h = F::relu(instance_norm(h));
  }
  return torch::tanh(h);
}

Pix2pixModel::Pix2pixModel(Pix2pixConfig cfg, TrainSchedule schedule, int resolution)
    : cfg_(std::move(cfg)), schedule_(std::move(schedule)) {
  cfg_.validate();
  schedule_.validate();
  int max_depth = 0;
  while ((resolution >> (max_depth + 1)) >= 2) ++max_depth;
  torch::manual_seed(cfg_.seed);
  g_ = UNet(cfg_.base_channels, cfg_.max_channels, std::min(cfg_.depth, max_depth));
  d_ = MultiScaleDiscriminator(cfg_.discriminator);
  auto adam = [&](const std::vector<torch::Tensor>& params) {
    return std::make_unique<torch::optim::Adam>(
        params, torch::optim::AdamOptions(cfg_.lr).betas({schedule_.adam_beta1, schedule_.adam_beta2}));
  };
  opt_g_ = adam(g_->parameters());
  opt_d_ = adam(d_->parameters());
}

torch::Tensor Pix2pixModel::translate(const torch::Tensor& x, Direction direction) {
  if (direction != Direction::XtoY) throw ConfigError("pix2pix translates X to Y only");
  torch::NoGradGuard guard;
  const bool was_training = g_->is_training();
  g_->eval();
  auto out = g_->forward(x);
  if (was_training) g_->train();
  return out;
}

torch::Tensor Pix2pixModel::reconstruct(const torch::Tensor&, Direction) {
  throw ConfigError("pix2pix has no reverse mapping to reconstruct with");
}

LossReport Pix2pixModel::step(const StepInputs& inputs, int64_t iter) {
  if (!inputs.paired) throw ConfigError("pix2pix requires pairs");
  return pix2pix_step(inputs.paired->x, inputs.paired->y, iter);
}

LossReport Pix2pixModel::pix2pix_step(const torch::Tensor& x, const torch::Tensor& y_truth, int64_t iter) {
  if (!x.defined() || !y_truth.defined() || x.sizes() != y_truth.sizes()) {
    throw ConfigError("pix2pix requires pairs");
  }
  const double lr = cfg_.lr * learning_rate(iter, schedule_) / schedule_.lr0;
  set_lr(*opt_g_, lr);
  set_lr(*opt_d_, lr);
  g_->train();
  d_->train();
  const auto [d_steps, g_steps] = ttur_steps(iter, schedule_);
  auto policy = cfg_.diff_augment ? cfg_.augment : AugmentPolicy::none();
  auto seed_of = [&](int sub, uint64_t tag) {
    return mix_seed(mix_seed(mix_seed(cfg_.seed, static_cast<uint64_t>(iter)), static_cast<uint64_t>(sub)), tag);
  };

  double d_loss = 0.0;
  for (int s = 0; s < d_steps; ++s) {
    opt_d_->zero_grad();
    torch::Tensor fake;
    {
      torch::NoGradGuard guard;
      fake = g_->forward(x);
    }
    auto [real_in, fake_in] =
        diff_augment(torch::cat({x, y_truth}, 1), torch::cat({x, fake}, 1), policy, seed_of(s, 0xd));
    auto loss = adv_d_loss(d_->forward(real_in), d_->forward(fake_in));
    loss.backward();
    clip_global_norm(gradients_of(d_->parameters()), schedule_.clip_max_norm, "discriminator");
    opt_d_->step();
    ++d_updates_;
    d_loss = loss.item<double>();
  }

  LossReport report;
  for (auto& p : d_->parameters()) p.requires_grad_(false);
  for (int s = 0; s < g_steps; ++s) {
    opt_g_->zero_grad();
    auto fake = g_->forward(x);
    auto adv = adv_g_loss(d_->forward(diff_augment_one(torch::cat({x, fake}, 1), policy, seed_of(s, 0x9))));
    auto l1 = paired_l1_loss(fake, y_truth);
    auto total = adv + cfg_.lambda_l1 * l1;
    if (!std::isfinite(total.item<double>())) {
      for (auto& p : d_->parameters()) p.requires_grad_(true);
      throw NumericError("non-finite pix2pix loss at iteration " + std::to_string(iter));
    }
    total.backward();
    clip_global_norm(gradients_of(g_->parameters()), schedule_.clip_max_norm, "generator");
    opt_g_->step();
    ++g_updates_;
    report = LossReport{};
    report.components["gan_G"] = adv.item<double>();
    report.components["l1"] = l1.item<double>();
    report.components["d_loss"] = d_loss;
    report.weights["gan_G"] = 1.0;
    report.weights["l1"] = cfg_.lambda_l1;
    report.total = total.item<double>();
  }
  for (auto& p : d_->parameters()) p.requires_grad_(true);
  return report;
}

void Pix2pixModel::save(torch::serialize::OutputArchive& archive) {
  save_module(archive, "g", *g_);
  save_module(archive, "d", *d_);
  save_optimizer(archive, "opt_g", *opt_g_);
  save_optimizer(archive, "opt_d", *opt_d_);
  archive.write("d_updates", torch::tensor(d_updates_));
  archive.write("g_updates", torch::tensor(g_updates_));
}

void Pix2pixModel::load(torch::serialize::InputArchive& archive) {
  load_module(archive, "g", *g_);
  load_module(archive, "d", *d_);
  load_optimizer(archive, "opt_g", *opt_g_);
  load_optimizer(archive, "opt_d", *opt_d_);
  torch::Tensor t;
  if (archive.try_read("d_updates", t)) d_updates_ = t.item<int64_t>();
  if (archive.try_read("g_updates", t)) g_updates_ = t.item<int64_t>();
}

void Pix2pixModel::to(torch::Device device) {
  g_->to(device);
  d_->to(device);
}

}  // namespace facecycle
