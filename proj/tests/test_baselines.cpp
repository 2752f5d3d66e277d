#include "facecycle/baselines.hpp"
#include "test_support.hpp"

#include <doctest.h>

#include <cmath>

using namespace facecycle;
using namespace facecycle::testing;

namespace {

double kl_oracle(const torch::Tensor& mu, const torch::Tensor& sigma) {
  auto m = mu.to(torch::kDouble), s = sigma.to(torch::kDouble);
  double acc = 0.0;
  for (int64_t n = 0; n < m.size(0); ++n) {
    for (int64_t d = 0; d < m.size(1); ++d) {
      const double a = m[n][d].item<double>(), b = s[n][d].item<double>();
      acc += 0.5 * (a * a + b * b - 1.0 - 2.0 * std::log(b));
    }
  }
  return acc / static_cast<double>(m.size(0));
}

VaeConfig tiny_vae() {
  VaeConfig c;
  c.latent_dim = 8;
  c.base_channels = 8;
  c.max_channels = 32;
  c.n_downsample = 3;
  c.resolution = 64;
  return c;
}

Pix2pixConfig tiny_pix2pix() {
  Pix2pixConfig c;
  c.base_channels = 8;
  c.max_channels = 32;
  c.discriminator.base_channels = 8;
  c.discriminator.max_channels = 32;
  return c;
}

TrainSchedule short_schedule(int64_t iters) {
  TrainSchedule s;
  s.total_iters = iters;
  s.resolutions = {64};
  s.batch_size = 2;
  return s;
}

}  // namespace

TEST_CASE("reparameterize trivial cases") {
  auto gen = make_generator(1);
  auto mu = torch::randn({4, 3}, gen, torch::kDouble), eps = torch::randn({4, 3}, gen, torch::kDouble);
  CHECK(torch::allclose(reparameterize(mu, torch::full({4, 3}, 1e-12, torch::kDouble), eps), mu, 0, 1e-10));
  CHECK(torch::equal(reparameterize(torch::zeros({4, 3}, torch::kDouble), torch::ones({4, 3}, torch::kDouble), eps), eps));
  CHECK_THROWS_AS(reparameterize(mu, torch::zeros({4, 3}, torch::kDouble), eps), Error);
}

TEST_CASE("kl divergence closed form") {
  CHECK(kl_divergence(torch::zeros({2, 5}), torch::ones({2, 5})).item<double>() == 0.0);
  CHECK(kl_divergence(torch::ones({1, 1}, torch::kDouble), torch::ones({1, 1}, torch::kDouble)).item<double>() ==
        doctest::Approx(0.5));
  auto gen = make_generator(2);
  for (int trial = 0; trial < 10; ++trial) {
    auto mu = torch::randn({3, 6}, gen, torch::kDouble);
    auto sigma = torch::rand({3, 6}, gen, torch::kDouble) * 2 + 0.05;
    CHECK(std::abs(kl_divergence(mu, sigma).item<double>() - kl_oracle(mu, sigma)) <= 1e-9);
    CHECK(kl_divergence(mu, sigma).item<double>() > 0.0);
  }
  // Zero only at the prior: any single deviation makes it positive.
  auto mu = torch::zeros({1, 4}, torch::kDouble), sigma = torch::ones({1, 4}, torch::kDouble);
  mu[0][2] = 1e-3;
  CHECK(kl_divergence(mu, sigma).item<double>() > 0.0);
  mu[0][2] = 0.0;
  sigma[0][1] = 1.001;
  CHECK(kl_divergence(mu, sigma).item<double>() > 0.0);
}

TEST_CASE("vae loss examples") {
  auto x = torch::rand({2, 3, 8, 8}, torch::kDouble);
  CHECK(vae_loss(x, x, torch::zeros({2, 4}, torch::kDouble), torch::ones({2, 4}, torch::kDouble), 1.0).item<double>() ==
        0.0);
  CHECK(vae_loss(x, x, torch::ones({1, 1}, torch::kDouble), torch::ones({1, 1}, torch::kDouble), 1.0).item<double>() ==
        doctest::Approx(0.5));
  auto gen = make_generator(3);
  auto xr = torch::rand({2, 3, 8, 8}, gen, torch::kDouble);
  auto mu = torch::randn({2, 4}, gen, torch::kDouble), sigma = torch::rand({2, 4}, gen, torch::kDouble) + 0.1;
  const double mse = (x - xr).square().mean().item<double>();
  CHECK(vae_loss(x, xr, mu, sigma, 0.3).item<double>() == doctest::Approx(mse + 0.3 * kl_oracle(mu, sigma)).epsilon(1e-12));
  CHECK_THROWS_AS(vae_loss(x, xr, mu, torch::zeros({2, 4}, torch::kDouble), 1.0), Error);
}

TEST_CASE("slerp endpoints and norm path") {
  auto a = torch::tensor({1.0, 0.0}), b = torch::tensor({0.0, 1.0});
  CHECK(torch::allclose(slerp(a, b, 0.0), a));
  CHECK(torch::allclose(slerp(a, b, 1.0), b, 1e-6, 1e-6));
  CHECK(slerp(a, b, 0.5).norm().item<double>() == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("vae model shares the translation interface") {
  VaeModel vae(tiny_vae(), short_schedule(4));
  CHECK(vae.kind() == "vae");
  CHECK(vae.supports(Direction::XtoY));
  CHECK(vae.supports(Direction::YtoX));
  auto x = toy_batch(2, 64, 1, Domain::X).images;
  auto y = vae.translate(x, Direction::XtoY);
  CHECK(y.sizes() == x.sizes());
  CHECK(y.abs().max().item<float>() <= 1.0f);
  CHECK(vae.reconstruct(x, Direction::XtoY).sizes() == x.sizes());
  auto path = vae.interpolate(x[0], x[1], 5, Domain::Y);
  CHECK(path.size(0) == 5);

  StepInputs in{toy_batch(2, 64, 1, Domain::X), toy_batch(2, 64, 2, Domain::Y), std::nullopt};
  auto r = vae.step(in, 0);
  CHECK(r.all_finite());
  CHECK(r.at("kl") >= 0.0);
  CHECK(vae.g_updates() == 1);
}

TEST_CASE("vae steps are deterministic per seed") {
  StepInputs in{toy_batch(2, 64, 1, Domain::X), toy_batch(2, 64, 2, Domain::Y), std::nullopt};
  VaeModel a(tiny_vae(), short_schedule(4)), b(tiny_vae(), short_schedule(4));
  for (int it = 0; it < 3; ++it) CHECK(a.step(in, it).total == b.step(in, it).total);
}

TEST_CASE("pix2pix requires pairs and only maps X to Y") {
  Pix2pixModel p(tiny_pix2pix(), short_schedule(4), 64);
  CHECK(p.needs_pairs());
  CHECK(p.supports(Direction::XtoY));
  CHECK_FALSE(p.supports(Direction::YtoX));
  StepInputs unpaired{toy_batch(2, 64, 1, Domain::X), toy_batch(2, 64, 2, Domain::Y), std::nullopt};
  CHECK_THROWS_WITH_AS(p.step(unpaired, 0), doctest::Contains("pix2pix requires pairs"), ConfigError);
  CHECK_THROWS_AS(p.reconstruct(unpaired.x.images, Direction::XtoY), ConfigError);
  CHECK(p.translate(unpaired.x.images, Direction::XtoY).sizes() == unpaired.x.images.sizes());
}

TEST_CASE("pix2pix U-Net depth is capped by the resolution") {
  Pix2pixModel p(tiny_pix2pix(), short_schedule(4), 64);
  CHECK(p.generator()->depth() == 5);  // 64 / 2^5 = 2
}

TEST_CASE("pix2pix with zero logits and no L1 reproduces the adversarial trivial values") {
  auto cfg = tiny_pix2pix();
  cfg.lambda_l1 = 0.0;
  cfg.lr = 1e-30;  // the discriminator step must not move the zeroed logits
  // Float32 model: ln 2 holds to single precision.
  Pix2pixModel p(cfg, short_schedule(100), 64);
  p.discriminator()->zero_init_output();
  auto x = toy_batch(2, 64, 3, Domain::X).images, y = toy_batch(2, 64, 3, Domain::Y).images;
  auto r = p.pix2pix_step(x, y, 60);  // past the TTUR phase: one D step
  CHECK(r.at("d_loss") == doctest::Approx(2 * std::log(2.0)).epsilon(1e-6));
  CHECK(r.at("gan_G") == doctest::Approx(std::log(2.0)).epsilon(1e-6));
  CHECK(r.total == doctest::Approx(std::log(2.0)).epsilon(1e-6));
}

TEST_CASE("pix2pix L1 component") {
  auto cfg = tiny_pix2pix();
  cfg.lr = 1e-30;
  Pix2pixModel p(cfg, short_schedule(100), 64);
  auto x = toy_batch(2, 64, 4, Domain::X).images;
  torch::Tensor target;
  {
    torch::NoGradGuard guard;
    p.generator()->train();
    target = p.generator()->forward(x);
  }
  CHECK(p.pix2pix_step(x, target, 60).at("l1") == doctest::Approx(0.0).epsilon(1e-6));

  auto other = toy_batch(2, 64, 5, Domain::Y).images;
  torch::Tensor pred;
  {
    torch::NoGradGuard guard;
    pred = p.generator()->forward(x);
  }
  const double oracle = (pred.to(torch::kDouble) - other.to(torch::kDouble)).abs().mean().item<double>();
  CHECK(p.pix2pix_step(x, other, 61).at("l1") == doctest::Approx(oracle).epsilon(1e-5));
}

TEST_CASE("baseline config validation") {
  auto v = tiny_vae();
  v.latent_dim = 0;
  CHECK_THROWS_AS(v.validate(), ConfigError);
  v = tiny_vae();
  v.beta = -1;
  CHECK_THROWS_AS(v.validate(), ConfigError);
  auto p = tiny_pix2pix();
  p.lambda_l1 = -1;
  CHECK_THROWS_AS(p.validate(), ConfigError);
}
