#include "facecycle/spectral_norm.hpp"
#include "test_support.hpp"

#include <doctest.h>

#include <cmath>

using namespace facecycle;
using facecycle::testing::gradient_error;

namespace {

double svd_sigma(const torch::Tensor& w) {
  return torch::linalg_svdvals(weight_as_matrix(w).to(torch::kDouble))[0].item<double>();
}

}  // namespace

TEST_CASE("power step on the identity keeps v and gives sigma 1") {
  auto v = torch::tensor({0.6, 0.8, 0.0}, torch::kDouble);
  auto step = power_iteration_step(torch::eye(3, torch::kDouble), v);
  CHECK(torch::allclose(step.v_next, v));
  CHECK(step.sigma == doctest::Approx(1.0));
}

TEST_CASE("power step stuck on an exact eigenvector") {
  auto w = torch::diag(torch::tensor({3.0, 1.0}, torch::kDouble));
  auto step = power_iteration_step(w, torch::tensor({0.0, 1.0}, torch::kDouble));
  CHECK(torch::equal(step.v_next, torch::tensor({0.0, 1.0}, torch::kDouble)));
  CHECK(step.sigma == doctest::Approx(1.0));
}

TEST_CASE("power step rejects a null-space start") {
  auto w = torch::diag(torch::tensor({3.0, 0.0}, torch::kDouble));
  CHECK_THROWS_WITH_AS(power_iteration_step(w, torch::tensor({0.0, 1.0}, torch::kDouble)),
                       doctest::Contains("null space"), NumericError);
}

TEST_CASE("power iteration on a random 16x8 matrix matches SVD") {
  auto gen = make_generator(3);
  auto w = torch::randn({16, 8}, gen, torch::kDouble);
  CHECK(std::abs(estimate_sigma(w, 100, 1) / svd_sigma(w) - 1.0) <= 1e-4);
}

TEST_CASE("sigma estimate is nondecreasing over iterations") {
  auto gen = make_generator(4);
  auto w = torch::randn({12, 9}, gen, torch::kDouble);
  auto v = torch::randn({9}, gen, torch::kDouble);
  v = v / v.norm();
  double prev = 0.0;
  for (int i = 0; i < 30; ++i) {
    auto step = power_iteration_step(w, v);
    CHECK(step.sigma >= prev - 1e-12);
    prev = step.sigma;
    v = step.v_next;
  }
}

TEST_CASE("estimate_sigma edge cases") {
  CHECK_THROWS_WITH_AS(estimate_sigma(torch::zeros({4, 4}), 10, 0), doctest::Contains("null space"), NumericError);
  auto w = torch::diag(torch::tensor({5.0, 2.0, 1.0}, torch::kDouble));
  for (uint64_t seed : {0, 1, 99}) CHECK(std::abs(estimate_sigma(w, 50, seed) - 5.0) <= 1e-6);
  CHECK_THROWS_AS(estimate_sigma(w, 0, 0), Error);
}

TEST_CASE("estimate_sigma is deterministic and scales linearly") {
  auto gen = make_generator(8);
  auto w = torch::randn({10, 6}, gen, torch::kDouble);
  const double s = estimate_sigma(w, 60, 42);
  CHECK(s == estimate_sigma(w, 60, 42));
  for (double alpha : {0.1, 2.0, 17.5}) {
    CHECK(std::abs(estimate_sigma(alpha * w, 60, 42) - alpha * s) <= 1e-6 * alpha);
  }
}

TEST_CASE("normalize_weight") {
  auto w = torch::diag(torch::tensor({3.0, 1.0}, torch::kDouble));
  CHECK(torch::allclose(normalize_weight(w, 3.0), torch::diag(torch::tensor({1.0, 1.0 / 3.0}, torch::kDouble))));
  auto unit = torch::diag(torch::tensor({1.0, 0.5}, torch::kDouble));
  CHECK(torch::equal(normalize_weight(unit, 1.0), unit));
  CHECK_THROWS_AS(normalize_weight(w, 0.0), Error);
  CHECK_THROWS_AS(normalize_weight(w, -1.0), Error);

  auto gen = make_generator(12);
  auto r = torch::randn({20, 30}, gen, torch::kDouble);
  auto n = normalize_weight(r, svd_sigma(r));
  CHECK(std::abs(estimate_sigma(n, 100, 0) - 1.0) <= 1e-3);
}

TEST_CASE("scalar 1x1 SN conv passes its input through") {
  SNConv2d conv(SNConv2dOptions{.in_channels = 1, .out_channels = 1, .kernel_size = 1, .bias = false});
  torch::NoGradGuard guard;
  conv->weight.fill_(4.0);
  conv->train();
  auto x = torch::randn({2, 1, 3, 3});
  auto y = conv->forward(x);
  CHECK(torch::allclose(y, x));
  CHECK(conv->state().sigma == doctest::Approx(4.0));
}

TEST_CASE("identity-initialised SN linear layer is the identity") {
  SNLinear lin(5, 5, SpectralNormOptions{}, false);
  {
    torch::NoGradGuard guard;
    lin->weight.copy_(torch::eye(5));
  }
  lin->train();
  auto x = torch::randn({3, 5});
  CHECK(torch::allclose(lin->forward(x), x, 1e-6, 1e-6));
}

TEST_CASE("repeated training forwards converge to the SVD sigma and freeze in eval") {
  torch::manual_seed(0);
  SNConv2d conv(SNConv2dOptions{.in_channels = 4, .out_channels = 6, .kernel_size = 3, .padding = 1});
  conv->train();
  auto x = torch::randn({1, 4, 8, 8});
  for (int i = 0; i < 100; ++i) conv->forward(x);
  const double oracle = svd_sigma(conv->weight.detach());
  CHECK(std::abs(conv->state().sigma / oracle - 1.0) <= 1e-4);

  auto eff = conv->effective_weight();
  CHECK(std::abs(svd_sigma(eff.detach()) - 1.0) <= 1e-3);

  conv->eval();
  auto before = conv->state();
  conv->forward(x);
  auto after = conv->state();
  CHECK(torch::equal(before.u, after.u));
  CHECK(torch::equal(before.v, after.v));
}

TEST_CASE("state shape mismatch is reported") {
  SNLinear lin(4, 3);
  {
    torch::NoGradGuard guard;
    lin->weight.set_data(torch::randn({3, 5}));
  }
  CHECK_THROWS_WITH_AS(lin->forward(torch::randn({1, 5})), doctest::Contains("do not match"), Error);
}

TEST_CASE("gradient of W / sigma(W) matches finite differences") {
  torch::manual_seed(1);
  SNLinear lin(4, 4, SpectralNormOptions{}, false);
  lin->to(torch::kDouble);
  lin->train();
  auto x = torch::randn({1, 4}, torch::kDouble);
  for (int i = 0; i < 50; ++i) lin->forward(x);
  lin->eval();  // singular vectors frozen, sigma still a function of W
  const auto w0 = lin->weight.detach().clone();
  auto readout = torch::randn({4, 4}, torch::kDouble);
  auto f = [&](const std::vector<torch::Tensor>& in) {
    lin->weight = in[0];
    return (readout * lin->effective_weight()).sum();
  };
  CHECK(gradient_error(f, {w0}, {true}) <= 1e-3);

  lin->weight = w0;
  auto v = lin->state().v.to(torch::kDouble);
  CHECK(torch::allclose(lin->effective_weight(), w0 / w0.mv(v).norm(), 1e-12, 1e-12));
}
