#include "facecycle/networks.hpp"

#include <algorithm>
#include <cmath>

namespace facecycle {
namespace {

namespace F = torch::nn::functional;

bool contains(const std::vector<int>& v, int x) { return std::find(v.begin(), v.end(), x) != v.end(); }

int level_of_scale(int scale) {
  int level = 0;
  while ((1 << level) < scale) ++level;
  if ((1 << level) != scale) throw ConfigError("scale 1/" + std::to_string(scale) + " is not a power of two");
  return level;
}

SNConv2dOptions conv_opts(int64_t in, int64_t out, int64_t k, int64_t stride, int64_t pad, bool reflect,
                          SpectralNormOptions sn) {
  SNConv2dOptions o{.in_channels = in, .out_channels = out, .kernel_size = k};
  o.stride = stride;
  o.padding = pad;
  o.reflect_padding = reflect;
  o.sn = sn;
  return o;
}

}  // namespace

void GeneratorConfig::validate() const {
  if (base_channels < 1) throw ConfigError("generator.base_channels must be >= 1");
  if (max_channels < base_channels) throw ConfigError("generator.max_channels must be >= base_channels");
  if (n_downsample < 1 || n_downsample > 6) throw ConfigError("generator.n_downsample must be in [1, 6]");
  if (n_res_blocks < 0) throw ConfigError("generator.n_res_blocks must be >= 0");
  if (style_dim < 1) throw ConfigError("generator.style_dim must be >= 1");
  if (adain_in_late_blocks && (n_adain_blocks < 0 || n_adain_blocks > n_res_blocks)) {
    throw ConfigError("generator.n_adain_blocks must be in [0, n_res_blocks]");
  }
  for (int s : attention_scales) {
    int level = level_of_scale(s);
    if (level < 1 || level > n_downsample) {
      throw ConfigError("generator.attention_scales: 1/" + std::to_string(s) + " is not reachable by the encoder");
    }
  }
  for (int s : skip_scales) {
    int level = level_of_scale(s);
    if (level < 1 || level >= n_downsample) {
      throw ConfigError("generator.skip_scales: 1/" + std::to_string(s) + " has no decoder counterpart");
    }
  }
}

int64_t GeneratorConfig::channels_at(int level) const {
  return std::min<int64_t>(static_cast<int64_t>(base_channels) << level, max_channels);
}

void DiscriminatorConfig::validate() const {
  if (n_layers < 2) throw ConfigError("discriminator.n_layers must be >= 2");
  if (base_channels < 1) throw ConfigError("discriminator.base_channels must be >= 1");
  if (scales.empty()) throw ConfigError("discriminator.scales must not be empty");
  for (int s : scales) level_of_scale(s);
}

int64_t DiscriminatorConfig::logit_size(int64_t side) const {
  for (int i = 0; i < n_layers - 1; ++i) side = (side + 2 - 4) / 2 + 1;
  return side - 2;
}

SelfAttentionImpl::SelfAttentionImpl(int64_t channels, SpectralNormOptions sn) {
  int64_t inner = std::max<int64_t>(channels / 8, 1);
  query = register_module("query", SNConv2d(conv_opts(channels, inner, 1, 1, 0, false, sn)));
  key = register_module("key", SNConv2d(conv_opts(channels, inner, 1, 1, 0, false, sn)));
  value = register_module("value", SNConv2d(conv_opts(channels, channels, 1, 1, 0, false, sn)));
  gamma = register_parameter("gamma", torch::zeros({1}));
}

torch::Tensor SelfAttentionImpl::forward(const torch::Tensor& x) {
  const auto n = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  if (h * w > kMaxPositions) {
    throw Error("self-attention on a " + std::to_string(h) + "x" + std::to_string(w) +
                " map exceeds 4096 positions; configure attention at a coarser scale");
  }
  auto q = query->forward(x).flatten(2).transpose(1, 2);     // [N, hw, c']
  auto k = key->forward(x).flatten(2);                       // [N, c', hw]
  auto attn = torch::softmax(torch::bmm(q, k), -1);          // [N, hw, hw], rows sum to 1
  auto v = value->forward(x).flatten(2);                     // [N, C, hw]
  auto out = torch::bmm(v, attn.transpose(1, 2)).view({n, c, h, w});
  return x + gamma * out;
}

namespace {

std::pair<torch::Tensor, torch::Tensor> channel_stats(const torch::Tensor& x) {
  auto [var, mean] = torch::var_mean(x, {2, 3}, /*correction=*/0, /*keepdim=*/true);
  // The tiny offset keeps backward finite for constant channels.
  return {mean, torch::sqrt(var + 1e-12)};
}

torch::Tensor per_channel(const torch::Tensor& t, int64_t n, int64_t c) {
  if (t.dim() == 1) return t.view({1, c, 1, 1}).expand({n, c, 1, 1});
  return t.view({n, c, 1, 1});
}

}  // namespace

torch::Tensor instance_norm(const torch::Tensor& x, double eps) {
  auto [mean, std] = channel_stats(x);
  return (x - mean) / (std + eps);
}

torch::Tensor adain(const torch::Tensor& x, const torch::Tensor& scale, const torch::Tensor& shift, double eps) {
  const auto n = x.size(0), c = x.size(1);
  return per_channel(scale, n, c) * instance_norm(x, eps) + per_channel(shift, n, c);
}

ResidualBlockImpl::ResidualBlockImpl(int64_t ch, SpectralNormOptions sn) : channels(ch) {
  conv1 = register_module("conv1", SNConv2d(conv_opts(ch, ch, 3, 1, 1, true, sn)));
  conv2 = register_module("conv2", SNConv2d(conv_opts(ch, ch, 3, 1, 1, true, sn)));
}

torch::Tensor ResidualBlockImpl::forward(const torch::Tensor& x) {
  auto h = torch::relu(instance_norm(conv1->forward(x)));
  h = instance_norm(conv2->forward(h));
  return x + h;
}

torch::Tensor ResidualBlockImpl::forward_modulated(const torch::Tensor& x, const torch::Tensor& mod) {
  auto parts = mod.split(channels, 1);
  auto h = torch::relu(adain(conv1->forward(x), 1.0 + parts[0], parts[1]));
  h = adain(conv2->forward(h), 1.0 + parts[2], parts[3]);
  return x + h;
}

GeneratorImpl::GeneratorImpl(GeneratorConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  SpectralNormOptions sn{.enabled = cfg_.use_sn_on_g};
  const int levels = cfg_.n_downsample;

  stem = register_module("stem", SNConv2d(conv_opts(3, cfg_.channels_at(0), 7, 1, 3, true, sn)));
  enc_attention_.resize(levels + 1, nullptr);
  for (int k = 1; k <= levels; ++k) {
    down_.push_back(register_module("down" + std::to_string(k),
                                    SNConv2d(conv_opts(cfg_.channels_at(k - 1), cfg_.channels_at(k), 3, 2, 1, false, sn))));
    if (contains(cfg_.attention_scales, 1 << k)) {
      enc_attention_[k] = register_module("attn" + std::to_string(k), SelfAttention(cfg_.channels_at(k), sn));
    }
  }
  const auto bottleneck = cfg_.channels_at(levels);
  for (int i = 0; i < cfg_.n_res_blocks; ++i) {
    blocks_.push_back(register_module("res" + std::to_string(i), ResidualBlock(bottleneck, sn)));
  }
  for (int k = levels; k >= 1; --k) {
    up_.push_back(register_module("up" + std::to_string(k),
                                  SNConv2d(conv_opts(cfg_.channels_at(k), cfg_.channels_at(k - 1), 3, 1, 1, true, sn))));
  }
  out_ = register_module("out", SNConv2d(conv_opts(cfg_.channels_at(0), 3, 7, 1, 3, true, sn)));

  style_code = register_parameter("style_code", torch::randn({cfg_.style_dim}));
  if (cfg_.adain_in_late_blocks && cfg_.n_adain_blocks > 0) {
    map1_ = register_module("map1", torch::nn::Linear(cfg_.style_dim, cfg_.style_dim));
    map2_ = register_module("map2", torch::nn::Linear(cfg_.style_dim, cfg_.n_adain_blocks * 4 * bottleneck));
    torch::NoGradGuard guard;
    map2_->weight.zero_();
    map2_->bias.zero_();
  }
}

std::vector<torch::Tensor> GeneratorImpl::run_encoder(const torch::Tensor& x) {
  const auto side = x.size(2);
  if (x.dim() != 4 || x.size(1) != 3) throw Error("generator expects [N, 3, H, W] input");
  if (side < cfg_.min_resolution() || x.size(3) < cfg_.min_resolution()) {
    throw Error("generator input " + std::to_string(side) + "x" + std::to_string(x.size(3)) +
                " is below min resolution 64");
  }
  if (side % (1 << cfg_.n_downsample) != 0 || x.size(3) % (1 << cfg_.n_downsample) != 0) {
    throw Error("generator input side must be divisible by " + std::to_string(1 << cfg_.n_downsample));
  }
  attention_sizes_.clear();
  std::vector<torch::Tensor> feats;
  auto h = torch::relu(instance_norm(stem->forward(x)));
  feats.push_back(h);
  for (int k = 1; k <= cfg_.n_downsample; ++k) {
    h = torch::relu(instance_norm(down_[k - 1]->forward(h)));
    if (enc_attention_[k]) {
      attention_sizes_.push_back(h.size(2));
      if (attention_enabled_) h = enc_attention_[k]->forward(h);
    }
    feats.push_back(h);
  }
  return feats;
}

torch::Tensor GeneratorImpl::style_modulation(int64_t batch) {
  auto m = map2_->forward(torch::relu(map1_->forward(style_code.unsqueeze(0))));
  return m.expand({batch, m.size(1)});
}

torch::Tensor GeneratorImpl::forward(const torch::Tensor& x) {
  auto feats = run_encoder(x);
  const int levels = cfg_.n_downsample;
  auto h = feats[levels];

  const bool modulate = cfg_.adain_in_late_blocks && cfg_.n_adain_blocks > 0;
  torch::Tensor mod;
  if (modulate) mod = style_modulation(x.size(0));
  const int first_adain = cfg_.n_res_blocks - (modulate ? cfg_.n_adain_blocks : 0);
  const int64_t per_block = 4 * cfg_.channels_at(levels);
  for (int i = 0; i < cfg_.n_res_blocks; ++i) {
    if (i >= first_adain) {
      h = blocks_[i]->forward_modulated(h, mod.narrow(1, (i - first_adain) * per_block, per_block));
    } else {
      h = blocks_[i]->forward(h);
    }
  }
  for (int k = levels, j = 0; k >= 1; --k, ++j) {
    h = F::interpolate(h, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
    h = torch::relu(instance_norm(up_[j]->forward(h)));
    if (contains(cfg_.skip_scales, 1 << (k - 1))) h = h + feats[k - 1];
  }
  return torch::tanh(out_->forward(h));
}

std::vector<torch::Tensor> GeneratorImpl::encode(const torch::Tensor& x, const std::vector<int>& scales) {
  auto feats = run_encoder(x);
  std::vector<torch::Tensor> out;
  for (int s : scales) {
    int level = level_of_scale(s);
    if (level > cfg_.n_downsample) throw Error("encoder tap 1/" + std::to_string(s) + " out of range");
    out.push_back(feats[level]);
  }
  return out;
}

std::vector<int64_t> GeneratorImpl::encoder_channels(const std::vector<int>& scales) const {
  std::vector<int64_t> out;
  for (int s : scales) out.push_back(cfg_.channels_at(level_of_scale(s)));
  return out;
}

void GeneratorImpl::zero_init_output() {
  torch::NoGradGuard guard;
  out_->weight.zero_();
  if (out_->bias.defined()) out_->bias.zero_();
}

PatchDiscriminatorImpl::PatchDiscriminatorImpl(const DiscriminatorConfig& cfg) : use_norm_(cfg.use_norm) {
  SpectralNormOptions sn{.enabled = cfg.use_sn};
  int64_t in = cfg.in_channels;
  for (int i = 0; i < cfg.n_layers; ++i) {
    int64_t out = std::min<int64_t>(static_cast<int64_t>(cfg.base_channels) << i, cfg.max_channels);
    int64_t stride = i < cfg.n_layers - 1 ? 2 : 1;
    layers_.push_back(register_module("conv" + std::to_string(i), SNConv2d(conv_opts(in, out, 4, stride, 1, false, sn))));
    in = out;
  }
  layers_.push_back(register_module("logits", SNConv2d(conv_opts(in, 1, 4, 1, 1, false, sn))));
}

torch::Tensor PatchDiscriminatorImpl::forward(const torch::Tensor& x) {
  auto h = x;
  for (size_t i = 0; i + 1 < layers_.size(); ++i) {
    h = layers_[i]->forward(h);
    if (use_norm_ && i > 0) h = instance_norm(h);
    h = F::leaky_relu(h, F::LeakyReLUFuncOptions().negative_slope(0.2));
  }
  return layers_.back()->forward(h);
}

void PatchDiscriminatorImpl::zero_init_output() {
  torch::NoGradGuard guard;
  layers_.back()->weight.zero_();
  if (layers_.back()->bias.defined()) layers_.back()->bias.zero_();
}

MultiScaleDiscriminatorImpl::MultiScaleDiscriminatorImpl(DiscriminatorConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  for (size_t i = 0; i < cfg_.scales.size(); ++i) {
    critics_.push_back(register_module("scale" + std::to_string(cfg_.scales[i]), PatchDiscriminator(cfg_)));
  }
}

std::vector<torch::Tensor> MultiScaleDiscriminatorImpl::forward(const torch::Tensor& x) {
  std::vector<torch::Tensor> out;
  for (size_t i = 0; i < critics_.size(); ++i) {
    auto h = x;
    for (int s = cfg_.scales[i]; s > 1; s /= 2) h = F::avg_pool2d(h, F::AvgPool2dFuncOptions(2).stride(2));
    out.push_back(critics_[i]->forward(h));
  }
  return out;
}

void MultiScaleDiscriminatorImpl::zero_init_output() {
  for (auto& c : critics_) c->zero_init_output();
}

std::vector<SNConv2d> MultiScaleDiscriminatorImpl::sn_layers() const {
  std::vector<SNConv2d> out;
  for (const auto& c : critics_) {
    auto l = c->layers();
    out.insert(out.end(), l.begin(), l.end());
  }
  return out;
}

void copy_module_state(torch::nn::Module& dst, const torch::nn::Module& src) {
  torch::NoGradGuard guard;
  auto dp = dst.named_parameters(true);
  for (const auto& item : src.named_parameters(true)) dp[item.key()].copy_(item.value());
  auto db = dst.named_buffers(true);
  for (const auto& item : src.named_buffers(true)) db[item.key()].copy_(item.value());
}

}  // namespace facecycle
