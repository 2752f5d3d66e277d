#include "facecycle/networks.hpp"
#include "test_support.hpp"

#include <doctest.h>

using namespace facecycle;

namespace {

GeneratorConfig small_generator() {
  GeneratorConfig g;
  g.base_channels = 8;
  g.max_channels = 32;
  g.n_res_blocks = 2;
  g.n_adain_blocks = 1;
  g.style_dim = 8;
  return g;
}

}  // namespace

TEST_CASE("generator keeps shape and range at 256 and probes attention at 16 and 32") {
  torch::manual_seed(0);
  GeneratorConfig cfg;  // full default architecture
  Generator g(cfg);
  g->eval();
  torch::NoGradGuard guard;
  auto x = torch::rand({2, 3, 256, 256}) * 2 - 1;
  auto y = g->forward(x);
  CHECK(y.sizes() == x.sizes());
  CHECK(y.abs().max().item<float>() <= 1.0f);
  auto sizes = g->attention_input_sizes();
  std::sort(sizes.begin(), sizes.end());
  CHECK(sizes == std::vector<int64_t>{16, 32});
}

TEST_CASE("generator zero-initialised output layer emits zeros") {
  Generator g(small_generator());
  g->zero_init_output();
  torch::NoGradGuard guard;
  auto y = g->forward(torch::rand({1, 3, 64, 64}) * 2 - 1);
  CHECK(torch::equal(y, torch::zeros_like(y)));
}

TEST_CASE("generator rejects inputs below 64") {
  Generator g(small_generator());
  CHECK_THROWS_WITH(g->forward(torch::zeros({1, 3, 32, 32})), doctest::Contains("min resolution 64"));
}

TEST_CASE("generator is resolution polymorphic with shared weights") {
  Generator g(small_generator());
  g->eval();
  torch::NoGradGuard guard;
  for (int r : {64, 128, 256}) {
    auto y = g->forward(torch::zeros({1, 3, r, r}));
    CHECK(y.sizes() == torch::IntArrayRef({1, 3, r, r}));
  }
}

TEST_CASE("attention blocks are a strict extension at initialisation") {
  torch::manual_seed(5);
  auto cfg = small_generator();
  cfg.attention_scales = {16, 8};
  Generator g(cfg);
  g->eval();
  torch::NoGradGuard guard;
  auto x = torch::rand({2, 3, 64, 64}) * 2 - 1;
  auto with = g->forward(x);
  g->set_attention_enabled(false);
  auto without = g->forward(x);
  CHECK(torch::equal(with, without));
}

TEST_CASE("generator forward and backward stay finite over 100 seeds") {
  auto cfg = small_generator();
  cfg.n_downsample = 2;
  cfg.attention_scales = {4};
  cfg.skip_scales = {2};
  for (int seed = 0; seed < 100; ++seed) {
    torch::manual_seed(seed);
    Generator g(cfg);
    auto x = torch::rand({1, 3, 64, 64}) * 2 - 1;
    auto y = g->forward(x);
    y.square().mean().backward();
    bool finite = torch::isfinite(y).all().item<bool>();
    for (const auto& p : g->parameters()) {
      if (p.grad().defined()) finite = finite && torch::isfinite(p.grad()).all().item<bool>();
    }
    CHECK_MESSAGE(finite, "seed " << seed);
  }
}

TEST_CASE("generator config validation") {
  auto cfg = small_generator();
  cfg.attention_scales = {32};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small_generator();
  cfg.n_adain_blocks = 5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("self-attention: closed gate, single token, uniform logits") {
  torch::manual_seed(2);
  SelfAttention att(8);
  auto x = torch::randn({2, 8, 4, 4});
  CHECK(torch::equal(att->forward(x), x));

  torch::NoGradGuard guard;
  att->gamma.fill_(0.7);
  auto one = torch::randn({1, 8, 1, 1});
  CHECK(torch::allclose(att->forward(one), one + 0.7 * att->value->forward(one), 1e-6, 1e-6));

  att->query->weight.zero_();
  att->key->weight.zero_();
  auto v = att->value->forward(x);
  auto expected = x + 0.7 * v.mean({2, 3}, true).expand_as(x);
  CHECK(torch::allclose(att->forward(x), expected, 1e-5, 1e-5));

  CHECK_THROWS_WITH(att->forward(torch::zeros({1, 8, 65, 64})), doctest::Contains("coarser scale"));
}

TEST_CASE("adain: standardisation, collapse and constant channels") {
  auto gen = make_generator(9);
  auto x = torch::randn({2, 3, 8, 8}, gen, torch::kDouble) * 4 + 2;
  auto out = adain(x, torch::ones({3}, torch::kDouble), torch::zeros({3}, torch::kDouble));
  CHECK(out.mean({2, 3}).abs().max().item<double>() < 1e-9);
  CHECK((out.std({2, 3}, false) - 1).abs().max().item<double>() < 1e-4);

  auto shift = torch::tensor({0.5, -1.0, 2.0}, torch::kDouble);
  auto collapsed = adain(x, torch::zeros({3}, torch::kDouble), shift);
  CHECK(torch::allclose(collapsed, shift.view({1, 3, 1, 1}).expand_as(x)));

  auto constant = torch::full({1, 3, 4, 4}, 3.0, torch::kDouble);
  CHECK(torch::allclose(adain(constant, torch::ones({3}, torch::kDouble), shift),
                        shift.view({1, 3, 1, 1}).expand_as(constant)));
}

TEST_CASE("discriminator logit map sizes at 256") {
  DiscriminatorConfig cfg;
  MultiScaleDiscriminator d(cfg);
  torch::NoGradGuard guard;
  auto logits = d->forward(torch::zeros({1, 3, 256, 256}));
  REQUIRE(logits.size() == 2);
  CHECK(logits[0].sizes() == torch::IntArrayRef({1, 1, 30, 30}));
  CHECK(logits[1].sizes() == torch::IntArrayRef({1, 1, 14, 14}));
  CHECK(cfg.logit_size(256) == 30);
  CHECK(cfg.logit_size(128) == 14);
}

TEST_CASE("discriminator zero output and duplicate rows") {
  DiscriminatorConfig cfg;
  cfg.base_channels = 8;
  cfg.max_channels = 32;
  MultiScaleDiscriminator d(cfg);
  d->eval();
  torch::NoGradGuard guard;
  auto x = torch::rand({1, 3, 64, 64}) * 2 - 1;
  auto dup = d->forward(torch::cat({x, x}));
  for (const auto& l : dup) CHECK(torch::equal(l[0], l[1]));
  d->zero_init_output();
  for (const auto& l : d->forward(x)) CHECK(torch::equal(l, torch::zeros_like(l)));
}

TEST_CASE("every discriminator layer is spectrally normalised after a training step") {
  torch::manual_seed(3);
  DiscriminatorConfig cfg;
  cfg.base_channels = 8;
  cfg.max_channels = 32;
  MultiScaleDiscriminator d(cfg);
  d->train();
  torch::optim::Adam opt(d->parameters(), torch::optim::AdamOptions(1e-3));
  auto x = torch::rand({2, 3, 64, 64}) * 2 - 1;
  for (int i = 0; i < 60; ++i) {
    opt.zero_grad();
    auto loss = torch::zeros({});
    for (const auto& l : d->forward(x)) loss = loss + l.mean();
    loss.backward();
    opt.step();
  }
  // Power iteration tracks the moving weights; a few frozen forwards settle it.
  torch::NoGradGuard guard;
  for (int i = 0; i < 400; ++i) d->forward(x);
  for (auto& layer : d->sn_layers()) {
    auto w = weight_as_matrix(layer->effective_weight().detach()).to(torch::kDouble);
    CHECK(std::abs(torch::linalg_svdvals(w)[0].item<double>() - 1.0) <= 1e-3);
  }
}

TEST_CASE("copy_module_state reproduces outputs") {
  torch::manual_seed(4);
  Generator a(small_generator());
  torch::manual_seed(5);
  Generator b(small_generator());
  copy_module_state(*b, *a);
  a->eval();
  b->eval();
  torch::NoGradGuard guard;
  auto x = torch::rand({1, 3, 64, 64}) * 2 - 1;
  CHECK(torch::equal(a->forward(x), b->forward(x)));
}
