#include "facecycle/spectral_norm.hpp"

#include <cmath>

namespace facecycle {
namespace {

namespace F = torch::nn::functional;

// Power iteration never runs below FP32, whatever the surrounding precision.
torch::ScalarType compute_dtype(const torch::Tensor& t) {
  return t.scalar_type() == torch::kDouble ? torch::kDouble : torch::kFloat;
}

torch::Tensor unit_gaussian(int64_t n, torch::Generator& gen, torch::ScalarType dtype) {
  auto v = torch::randn({n}, gen, torch::TensorOptions().dtype(torch::kDouble));
  return (v / v.norm()).to(dtype);
}

// Number of power-iteration steps run when a layer is constructed, so the
// first training forward already sees a converged estimate.
constexpr int kWarmupIters = 15;

}  // namespace

PowerStep power_iteration_step(const torch::Tensor& w, const torch::Tensor& v) {
  TORCH_CHECK(w.dim() == 2, "power_iteration_step expects a matrix");
  TORCH_CHECK(v.dim() == 1 && v.size(0) == w.size(1), "power_iteration_step: v has ", v.size(0),
              " entries, W has ", w.size(1), " columns");
  auto dtype = compute_dtype(w);
  auto wm = w.to(dtype);
  auto wtwv = wm.t().mv(wm.mv(v.to(dtype)));
  double n = wtwv.norm().item<double>();
  if (!(n > 0.0) || !std::isfinite(n)) {
    throw NumericError("power iteration: v in null space; reinitialize");
  }
  PowerStep out;
  out.v_next = wtwv / n;
  out.sigma = wm.mv(out.v_next).norm().item<double>();
  return out;
}

double estimate_sigma(const torch::Tensor& w, int iters, uint64_t seed) {
  if (iters < 1) throw Error("estimate_sigma: iters must be >= 1");
  auto wm = weight_as_matrix(w);
  auto dtype = compute_dtype(wm);
  auto run = [&](uint64_t s) {
    auto gen = make_generator(s);
    auto v = unit_gaussian(wm.size(1), gen, dtype);
    double sigma = 0.0;
    for (int i = 0; i < iters; ++i) {
      auto step = power_iteration_step(wm, v);
      v = step.v_next;
      sigma = step.sigma;
    }
    return sigma;
  };
  try {
    return run(seed);
  } catch (const NumericError&) {
    try {
      return run(mix_seed(seed, 0x5eed));
    } catch (const NumericError&) {
      throw NumericError("estimate_sigma: start vector in null space after reseed (zero operator?)");
    }
  }
}

torch::Tensor normalize_weight(const torch::Tensor& w, double sigma) {
  if (!(sigma > 0.0)) throw Error("normalize_weight: sigma must be positive");
  return w / sigma;
}

torch::Tensor weight_as_matrix(const torch::Tensor& weight) {
  if (weight.dim() == 2) return weight;
  if (weight.dim() == 1) return weight.unsqueeze(0);
  return weight.reshape({weight.size(0), -1});
}

SpectralNormalizer::SpectralNormalizer(torch::nn::Module& owner, const torch::Tensor& weight,
                                       SpectralNormOptions opts)
    : opts_(opts) {
  if (!opts_.enabled) return;
  if (opts_.n_power_iters < 1) throw ConfigError("spectral norm: n_power_iters must be >= 1");
  torch::NoGradGuard guard;
  auto wm = weight_as_matrix(weight).detach();
  auto dtype = compute_dtype(wm);
  auto u = torch::randn({wm.size(0)}, torch::TensorOptions().dtype(dtype));
  auto v = torch::randn({wm.size(1)}, torch::TensorOptions().dtype(dtype));
  u = u / u.norm();
  v = v / v.norm();
  double sigma = 0.0;
  if (wm.abs().max().item<double>() > 0.0) {
    for (int i = 0; i < kWarmupIters; ++i) {
      auto step = power_iteration_step(wm, v);
      v = step.v_next;
      sigma = step.sigma;
    }
    auto wv = wm.to(dtype).mv(v);
    u = wv / wv.norm();
  }
  u_ = owner.register_buffer("sn_u", u);
  v_ = owner.register_buffer("sn_v", v);
  sigma_ = owner.register_buffer("sn_sigma", torch::tensor(sigma, torch::TensorOptions().dtype(torch::kDouble)));
}

torch::Tensor SpectralNormalizer::apply(const torch::Tensor& weight, bool training) {
  if (!opts_.enabled) return weight;
  AutocastScope full_precision(false);
  auto wm = weight_as_matrix(weight);
  if (v_.size(0) != wm.size(1) || u_.size(0) != wm.size(0)) {
    throw Error("spectral norm: state vectors [" + std::to_string(u_.size(0)) + "], [" +
                std::to_string(v_.size(0)) + "] do not match reshaped weight [" +
                std::to_string(wm.size(0)) + ", " + std::to_string(wm.size(1)) + "]");
  }
  // A zero operator has no direction to track; its normalised form is itself.
  if (wm.detach().abs().max().item<double>() == 0.0) {
    if (training) {
      torch::NoGradGuard guard;
      sigma_.fill_(0.0);
    }
    return weight;
  }
  if (training) {
    torch::NoGradGuard guard;
    auto dtype = compute_dtype(u_);
    auto wd = wm.detach().to(dtype);
    auto v = v_.to(dtype);
    for (int i = 0; i < opts_.n_power_iters; ++i) {
      auto step = power_iteration_step(wd, v);
      v = step.v_next;
    }
    auto wv = wd.mv(v);
    v_.copy_(v);
    u_.copy_(wv / wv.norm());
  }
  auto sigma = wm.mv(v_.detach().to(wm.scalar_type()).clone()).norm();
  if (training) {
    torch::NoGradGuard guard;
    sigma_.fill_(sigma.item<double>());
  }
  if (opts_.detach_sigma) sigma = sigma.detach();
  return weight / sigma;
}

SpectralState SpectralNormalizer::state() const {
  SpectralState s;
  s.n_power_iters = opts_.n_power_iters;
  if (!opts_.enabled) return s;
  s.u = u_.detach().clone();
  s.v = v_.detach().clone();
  s.sigma = sigma_.item<double>();
  return s;
}

SNConv2dImpl::SNConv2dImpl(SNConv2dOptions opts) : opts_(opts) {
  weight = register_parameter(
      "weight", torch::empty({opts.out_channels, opts.in_channels, opts.kernel_size, opts.kernel_size}));
  torch::nn::init::kaiming_uniform_(weight, std::sqrt(5.0));
  if (opts.bias) {
    double fan_in = static_cast<double>(opts.in_channels * opts.kernel_size * opts.kernel_size);
    double bound = 1.0 / std::sqrt(fan_in);
    bias = register_parameter("bias", torch::empty({opts.out_channels}).uniform_(-bound, bound));
  }
  sn_ = SpectralNormalizer(*this, weight, opts.sn);
}

torch::Tensor SNConv2dImpl::effective_weight() { return sn_.apply(weight, is_training()); }

torch::Tensor SNConv2dImpl::forward(const torch::Tensor& x) {
  auto w = effective_weight();
  if (opts_.reflect_padding && opts_.padding > 0) {
    auto p = opts_.padding;
    auto padded = F::pad(x, F::PadFuncOptions({p, p, p, p}).mode(torch::kReflect));
    return F::conv2d(padded, w, F::Conv2dFuncOptions().bias(bias).stride(opts_.stride));
  }
  return F::conv2d(x, w, F::Conv2dFuncOptions().bias(bias).stride(opts_.stride).padding(opts_.padding));
}

SNLinearImpl::SNLinearImpl(int64_t in_features, int64_t out_features, SpectralNormOptions sn, bool use_bias) {
  weight = register_parameter("weight", torch::empty({out_features, in_features}));
  torch::nn::init::kaiming_uniform_(weight, std::sqrt(5.0));
  if (use_bias) {
    double bound = 1.0 / std::sqrt(static_cast<double>(in_features));
    bias = register_parameter("bias", torch::empty({out_features}).uniform_(-bound, bound));
  }
  sn_ = SpectralNormalizer(*this, weight, sn);
}

torch::Tensor SNLinearImpl::effective_weight() { return sn_.apply(weight, is_training()); }

torch::Tensor SNLinearImpl::forward(const torch::Tensor& x) {
  return F::linear(x, effective_weight(), bias);
}

}  // namespace facecycle
