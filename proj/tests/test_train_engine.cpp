#include "facecycle/train_engine.hpp"
#include "test_support.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>

using namespace facecycle;
using namespace facecycle::testing;

TEST_CASE("ttur steps with an exclusive boundary") {
  TrainSchedule s;
  s.total_iters = 1000;
  CHECK(ttur_steps(0, s) == std::pair{2, 1});
  CHECK(ttur_steps(249, s) == std::pair{2, 1});
  CHECK(ttur_steps(250, s) == std::pair{1, 1});
  CHECK(ttur_steps(999, s) == std::pair{1, 1});
  s.ttur = false;
  CHECK(ttur_steps(0, s) == std::pair{1, 1});
}

TEST_CASE("learning rate is flat then linear to zero") {
  TrainSchedule s;
  s.total_iters = 1000;
  s.lr0 = 2e-4;
  CHECK(learning_rate(0, s) == 2e-4);
  CHECK(learning_rate(499, s) == 2e-4);
  CHECK(std::abs(learning_rate(500, s) - 2e-4) <= 1e-12);
  CHECK(std::abs(learning_rate(750, s) - 1e-4) <= 1e-12);
  CHECK(std::abs(learning_rate(1000, s)) <= 1e-12);
}

TEST_CASE("progressive resolution switch") {
  TrainSchedule s;
  s.total_iters = 100;
  CHECK(current_resolution(0, s) == 128);
  CHECK(current_resolution(49, s) == 128);
  CHECK(current_resolution(50, s) == 256);
  s.resolutions = {64};
  CHECK(current_resolution(99, s) == 64);
}

TEST_CASE("schedule validation") {
  TrainSchedule s;
  s.ema_decay = 1.0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = TrainSchedule{};
  s.ttur_phase_frac = 0.0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = TrainSchedule{};
  s.resolutions = {96};
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = TrainSchedule{};
  s.batch_size = 4;
  s.accumulation = 3;
  CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("ema update") {
  auto live = torch::randn({5}, torch::kDouble);
  auto shadow = torch::randn({5}, torch::kDouble);
  ema_update({shadow}, {live}, 0.0);
  CHECK(torch::equal(shadow, live));

  auto s0 = torch::randn({4}, torch::kDouble);
  auto w = torch::randn({4}, torch::kDouble);
  auto s = s0.clone();
  for (int k = 0; k < 10; ++k) ema_update({s}, {w}, 0.9);
  CHECK(torch::allclose(s, w + (s0 - w) * std::pow(0.9, 10), 0, 1e-9));

  auto gen = make_generator(1);
  auto a = torch::randn({3, 3}, gen, torch::kDouble), b = torch::randn({3, 3}, gen, torch::kDouble);
  auto oracle = 0.7 * a + 0.3 * b;
  ema_update({a}, {b}, 0.7);
  CHECK(torch::allclose(a, oracle, 0, 1e-15));

  CHECK_THROWS_AS(ema_update({a}, {b}, 1.0), Error);
  CHECK_THROWS_AS(ema_update({a}, {torch::zeros({2})}, 0.5), Error);
}

TEST_CASE("global norm clipping") {
  auto g = torch::tensor({0.6, 0.8}, torch::kDouble);
  CHECK(clip_global_norm({g}, 10.0) == doctest::Approx(1.0));
  CHECK(torch::equal(g, torch::tensor({0.6, 0.8}, torch::kDouble)));

  auto v = torch::tensor({3.0, 4.0}, torch::kDouble);
  CHECK(clip_global_norm({v}, 1.0) == doctest::Approx(5.0));
  CHECK(torch::allclose(v, torch::tensor({0.6, 0.8}, torch::kDouble)));

  auto gen = make_generator(2);
  std::vector<torch::Tensor> tree{torch::randn({4, 4}, gen), torch::randn({7}, gen), torch::randn({2, 3, 3}, gen)};
  clip_global_norm(tree, 2.0);
  double sq = 0.0;
  for (const auto& t : tree) sq += t.to(torch::kDouble).square().sum().item<double>();
  CHECK(std::abs(std::sqrt(sq) - 2.0) <= 1e-5);  // float32 leaves

  std::vector<torch::Tensor> bad{torch::tensor({1.0, std::numeric_limits<double>::quiet_NaN()})};
  CHECK_THROWS_WITH_AS(clip_global_norm(bad, 1.0, "discriminator"), doctest::Contains("discriminator"), NumericError);
}

TEST_CASE("translation shifts columns with zero fill") {
  auto x = torch::arange(64, torch::kFloat).view({1, 1, 1, 64}).expand({1, 3, 64, 64}).contiguous();
  auto out = translate_images(x, {{8, 0}});
  CHECK(torch::equal(out.slice(3, 0, 8), torch::zeros({1, 3, 64, 8})));
  CHECK(torch::equal(out.slice(3, 8, 64), x.slice(3, 0, 56)));
}

TEST_CASE("diff_augment: identity policies and shared draws") {
  auto gen = make_generator(3);
  auto real = torch::rand({3, 3, 16, 16}, gen) * 2 - 1, fake = torch::rand({3, 3, 16, 16}, gen) * 2 - 1;
  auto [r0, f0] = diff_augment(real, fake, AugmentPolicy::none(), 5);
  CHECK(torch::equal(r0, real));
  CHECK(torch::equal(f0, fake));
  AugmentPolicy off;
  off.apply_prob = 0.0;
  auto [r1, f1] = diff_augment(real, fake, off, 5);
  CHECK(torch::equal(r1, real));
  CHECK(torch::equal(f1, fake));

  AugmentPolicy p;
  p.apply_prob = 1.0;
  auto [r2, f2] = diff_augment(real, real.clone(), p, 9);
  CHECK(torch::equal(r2, f2));
  CHECK_FALSE(torch::equal(r2, real));
  CHECK(torch::equal(diff_augment_one(real, p, 9), r2));
  auto [r3, f3] = diff_augment(real, fake, p, 9);
  CHECK(torch::equal(r3, r2));
}

TEST_CASE("diff_augment passes gradients to the fake branch") {
  AugmentPolicy p;
  p.apply_prob = 1.0;
  auto fake = (torch::rand({2, 3, 16, 16}) * 2 - 1).requires_grad_(true);
  auto [r, f] = diff_augment(torch::zeros({2, 3, 16, 16}), fake, p, 4);
  f.sum().backward();
  CHECK(fake.grad().defined());
  CHECK(fake.grad().abs().sum().item<double>() > 0.0);
}

TEST_CASE("train step: finite report and update ledger") {
  const int64_t T = 8;
  auto model = tiny_cyclegan(T);
  auto bx = toy_batch(2, 64, 1, Domain::X), by = toy_batch(2, 64, 2, Domain::Y);
  for (int64_t it = 0; it < T; ++it) {
    auto r = model->train_step(bx, by, it);
    CHECK(r.all_finite());
    for (const auto& [name, v] : r.components) CHECK_MESSAGE(v >= 0.0, name);
  }
  // floor(0.25 * 8) = 2 iterations with two discriminator steps.
  CHECK(model->d_updates() == 2 * 2 + (T - 2));
  CHECK(model->g_updates() == T);
}

TEST_CASE("adversarial-only weights never query the guidance providers") {
  auto cfg = tiny_cyclegan_config("x", "y", "out", 4);
  cfg.weights = LossWeights{.cyc = 0, .id = 0, .perc = 0, .sem = 0, .lmk = 0, .con = 0, .paired = 0};
  auto guidance = GuidanceSet::toy(0);
  CycleGanModel model(cfg.cyclegan_config(), cfg.schedule, guidance);
  model.train_step(toy_batch(2, 64, 1, Domain::X), toy_batch(2, 64, 2, Domain::Y), 0);
  CHECK(guidance.identity->calls() == 0);
  CHECK(guidance.perceptual->calls() == 0);
  CHECK(guidance.landmarks->calls() == 0);
}

TEST_CASE("identical seeds give bit-identical reports for 10 steps") {
  auto a = tiny_cyclegan(10, 7), b = tiny_cyclegan(10, 7);
  auto bx = toy_batch(2, 64, 3, Domain::X), by = toy_batch(2, 64, 4, Domain::Y);
  for (int64_t it = 0; it < 10; ++it) {
    auto ra = a->train_step(bx, by, it), rb = b->train_step(bx, by, it);
    CHECK(ra.components == rb.components);
    CHECK(ra.total == rb.total);
  }
}

TEST_CASE("ema shadow is untouched by the optimiser") {
  auto cfg = tiny_cyclegan_config("x", "y", "out", 4);
  cfg.schedule.ema_decay = 1.0 - 1e-12;
  CycleGanModel model(cfg.cyclegan_config(), cfg.schedule, GuidanceSet::toy(0));
  std::vector<torch::Tensor> before;
  for (const auto& p : model.ema_xy()->parameters()) before.push_back(p.detach().clone());
  model.train_step(toy_batch(2, 64, 1, Domain::X), toy_batch(2, 64, 2, Domain::Y), 0);
  size_t i = 0;
  bool live_moved = false;
  for (const auto& p : model.ema_xy()->parameters()) {
    CHECK(torch::allclose(p, before[i], 0, 1e-9));
    CHECK_FALSE(p.requires_grad());
    ++i;
  }
  i = 0;
  for (const auto& p : model.g_xy()->parameters()) live_moved = live_moved || !torch::equal(p, before[i++]);
  CHECK(live_moved);
}

TEST_CASE("hybrid paired step") {
  auto bx = toy_batch(2, 64, 5, Domain::X), by = toy_batch(2, 64, 6, Domain::Y);
  PairedBatch pairs{toy_batch(2, 64, 7, Domain::X).images, toy_batch(2, 64, 7, Domain::Y).images};

  auto cfg = tiny_cyclegan_config("x", "y", "out", 4);
  cfg.weights.paired = 0.0;
  CycleGanModel reduced(cfg.cyclegan_config(), cfg.schedule, GuidanceSet::toy(0));
  CycleGanModel plain(cfg.cyclegan_config(), cfg.schedule, GuidanceSet::toy(0));
  auto r_hybrid = reduced.hybrid_paired_step(pairs, bx, by, 0);
  auto r_plain = plain.train_step(bx, by, 0);
  CHECK(r_hybrid.components == r_plain.components);
  CHECK(r_hybrid.total == r_plain.total);

  cfg.weights.paired = 10.0;
  CycleGanModel hybrid(cfg.cyclegan_config(), cfg.schedule, GuidanceSet::toy(0));
  auto r = hybrid.hybrid_paired_step(pairs, bx, by, 0);
  CHECK(r.at("paired") > 0.0);
  CHECK(r.at("gan_G_pair") > 0.0);
  CHECK(r.weights.at("paired") == 10.0);

  PairedBatch misaligned{pairs.x, pairs.y.slice(0, 0, 1)};
  CHECK_THROWS_WITH(hybrid.hybrid_paired_step(misaligned, bx, by, 1), doctest::Contains("misaligned"));
}

TEST_CASE("paired L1 oracle inside the hybrid step") {
  auto cfg = tiny_cyclegan_config("x", "y", "out", 4);
  CycleGanModel model(cfg.cyclegan_config(), cfg.schedule, GuidanceSet::toy(0));
  auto x = toy_batch(2, 64, 8, Domain::X).images;
  torch::Tensor predicted;
  {
    torch::NoGradGuard guard;
    model.g_xy()->train();
    predicted = model.g_xy()->forward(x);
  }
  PairedBatch exact{x, predicted};
  auto r = model.hybrid_paired_step(exact, toy_batch(2, 64, 9, Domain::X), toy_batch(2, 64, 10, Domain::Y), 0);
  CHECK(r.at("paired") == doctest::Approx(0.0).epsilon(1e-6));
}

TEST_CASE("checkpoint round trip preserves translations") {
  auto a = tiny_cyclegan(4, 1);
  a->train_step(toy_batch(2, 64, 1, Domain::X), toy_batch(2, 64, 2, Domain::Y), 0);
  torch::serialize::OutputArchive out;
  a->save(out);
  std::stringstream buffer;
  out.save_to(buffer);

  auto b = tiny_cyclegan(4, 2);
  torch::serialize::InputArchive in;
  in.load_from(buffer);
  b->load(in);
  auto x = toy_batch(2, 64, 3, Domain::X).images;
  CHECK(torch::equal(a->translate(x, Direction::XtoY), b->translate(x, Direction::XtoY)));
  CHECK(b->d_updates() == a->d_updates());
}
