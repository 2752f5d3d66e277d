#include "facecycle/data_pipeline.hpp"
#include "facecycle/metrics.hpp"
#include "test_support.hpp"

#include <doctest.h>

#include <fstream>
#include <set>

using namespace facecycle;
using namespace facecycle::testing;
namespace fs = std::filesystem;

namespace {

void write_gray_png(const fs::path& path, int w, int h, uint8_t value) {
  Image img{w, h, 3, std::vector<uint8_t>(static_cast<size_t>(w * h * 3), value)};
  write_png(path, img);
}

DatasetManifest synthetic_manifest(int identities, int frames) {
  DatasetManifest m;
  m.root = "/nonexistent";
  for (int i = 0; i < identities; ++i) {
    for (int f = 0; f < frames; ++f) {
      const auto id = "p" + std::to_string(i) + "_" + std::to_string(f);
      m.ids.push_back(id);
      m.files[id] = id + ".png";
    }
  }
  return m;
}

// chi-square 0.99 quantile with 81 degrees of freedom (10 x 10 table).
constexpr double kChi2Df81P99 = 113.512;

}  // namespace

TEST_CASE("ingest: empty directory, identities, sidecars") {
  TempDir dir("ingest");
  CHECK_THROWS_WITH(ingest_directory(dir.path(), Domain::X), doctest::Contains("no images"));

  write_gray_png(dir / "idA_001.png", 64, 64, 10);
  write_gray_png(dir / "idB_001.png", 64, 64, 20);
  write_gray_png(dir / "idB_002.png", 64, 64, 30);
  {
    std::ofstream junk(dir / "idC_001.png");
    junk << "not an image";
  }
  auto m = ingest_directory(dir.path(), Domain::X);
  CHECK(m.ids.size() == 3);
  CHECK(m.skipped == 1);
  CHECK_FALSE(m.has_sidecars);
  std::set<std::string> identities;
  for (const auto& id : m.ids) identities.insert(identity_of(id));
  CHECK(identities == std::set<std::string>{"idA", "idB"});

  TempDir toy("ingest_toy");
  auto dirs = make_toy_domains(toy.path(), 10, 64, 1, 5);
  auto tm = ingest_directory(dirs.dir_x, Domain::X);
  CHECK(tm.ids.size() == 10);
  CHECK(tm.has_sidecars);
  CHECK(tm.paired_with.size() == 10);  // recorded pairs survive re-ingestion
}

TEST_CASE("manifest validation and round trip") {
  auto m = synthetic_manifest(3, 2);
  m.ids.push_back(m.ids.front());
  CHECK_THROWS_WITH(m.validate(), doctest::Contains("duplicate"));
  m = synthetic_manifest(3, 2);
  m.paired_with = {{"p0_0", "q"}, {"p0_1", "q"}};
  CHECK_THROWS_WITH(m.validate(), doctest::Contains("injective"));

  TempDir dir("manifest");
  m = synthetic_manifest(2, 2);
  m.root = dir.path();
  m.domain = Domain::Y;
  m.paired_with = {{"p0_0", "p0_0"}};
  m.save();
  auto back = DatasetManifest::load(dir.path());
  CHECK(back.ids == m.ids);
  CHECK(back.domain == Domain::Y);
  CHECK(back.paired_with == m.paired_with);
}

TEST_CASE("preprocess geometry") {
  // Left and right quarters differ from the centre square.
  auto wide = torch::full({3, 256, 512}, 0.25);
  wide.slice(2, 128, 384).fill_(0.75);
  auto out = preprocess(wide, 256);
  CHECK(out.sizes() == torch::IntArrayRef({3, 256, 256}));
  CHECK(torch::allclose(out, torch::full({3, 256, 256}, 0.5)));  // 0.75 -> 0.5 in [-1, 1]

  auto square = torch::rand({3, 64, 64}, make_generator(1));
  CHECK(torch::allclose(preprocess(square, 64), square * 2 - 1, 0, 1e-6));
  CHECK_THROWS_WITH(preprocess(torch::rand({3, 32, 48}), 64), doctest::Contains("too small"));
}

TEST_CASE("preprocess is idempotent at the target resolution") {
  auto gen = make_generator(2);
  for (int trial = 0; trial < 5; ++trial) {
    auto once = preprocess(torch::rand({3, 100, 140}, gen), 64);
    CHECK(torch::equal(preprocess(once, 64, InputRange::Signed), once));
  }
}

TEST_CASE("bilinear 4x4 to 2x2 by hand") {
  // Half-pixel centres: output (0, 0) samples input (0.5, 0.5), the mean of
  // rows/cols 0..1.
  auto pattern = torch::arange(16, torch::kFloat).view({1, 4, 4});
  auto out = resize_bilinear(pattern, 2, 2);
  CHECK(torch::allclose(out[0], torch::tensor({{2.5f, 4.5f}, {10.5f, 12.5f}})));
}

TEST_CASE("split holds out identities") {
  auto m = synthetic_manifest(10, 3);
  auto [train, test] = split(m, {});
  std::set<std::string> tr, te;
  for (const auto& id : train.ids) tr.insert(identity_of(id));
  for (const auto& id : test.ids) te.insert(identity_of(id));
  CHECK(tr.size() == 8);
  CHECK(te.size() == 2);
  CHECK(train.ids.size() + test.ids.size() == m.ids.size());

  auto [train2, test2] = split(m, {});
  CHECK(train2.ids == train.ids);
  CHECK(split(m, {.seed = 99}).second.ids.size() % 3 == 0);

  CHECK_THROWS_WITH(split(synthetic_manifest(1, 5), {}), doctest::Contains("cannot hold out identities"));
}

TEST_CASE("split sides never share an identity") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    auto m = synthetic_manifest(2 + static_cast<int>(rng() % 30), 1 + static_cast<int>(rng() % 4));
    auto [train, test] = split(m, {.train_frac = 0.5 + 0.4 * (rng() % 100) / 100.0, .seed = rng()});
    std::set<std::string> tr;
    for (const auto& id : train.ids) tr.insert(identity_of(id));
    for (const auto& id : test.ids) CHECK_FALSE(tr.count(identity_of(id)));
    CHECK_FALSE(train.ids.empty());
    CHECK_FALSE(test.ids.empty());
  }
}

TEST_CASE("toy domains: schema, seeds and domain separation") {
  TempDir a("toy_a"), b("toy_b");
  auto da = make_toy_domains(a.path(), 60, 64, 1);
  auto db = make_toy_domains(b.path(), 60, 64, 2);
  auto listing = [](const fs::path& d) {
    std::set<std::string> names;
    for (const auto& e : fs::directory_iterator(d)) names.insert(e.path().filename().string());
    return names;
  };
  CHECK(listing(da.dir_x) == listing(db.dir_x));
  CHECK(listing(da.dir_x) == listing(da.dir_y));
  CHECK(listing(da.dir_x).count("id000_000.png"));
  CHECK(listing(da.dir_x).count("id000_000.landmarks.csv"));

  auto mx = DatasetManifest::load(da.dir_x), my = DatasetManifest::load(da.dir_y);
  auto x = ImageDataset::load(mx, 64, MissingSidecarPolicy::Strict);
  auto y = ImageDataset::load(my, 64, MissingSidecarPolicy::Strict);
  auto xb = ImageDataset::load(DatasetManifest::load(db.dir_x), 64, MissingSidecarPolicy::Strict);
  CHECK_FALSE(torch::equal(x.images(), xb.images()));

  auto ex = FeatureExtractor::toy(0, 4);
  auto half_a = x.images().slice(0, 0, 30), half_b = x.images().slice(0, 30, 60);
  const double within = fid_protocol(half_a, half_b, ex, 1).mean;
  const double across = fid_protocol(x.images().slice(0, 0, 30), y.images().slice(0, 30, 60), ex, 1).mean;
  CHECK(across > 10 * within);
}

TEST_CASE("toy sidecar landmarks follow the image through preprocessing") {
  TempDir dir("toy_lmk");
  auto d = make_toy_domains(dir.path(), 10, 128, 4);
  auto ds = ImageDataset::load(DatasetManifest::load(d.dir_x), 64, MissingSidecarPolicy::Strict);
  ToyLandmarkEstimator est;
  auto pred = est.estimate(ds.images());
  CHECK(landmark_nme(pred, ds.landmarks()).nme < 0.1);
}

TEST_CASE("paired rows and gathered pairs") {
  TempDir dir("pairs");
  auto d = make_toy_domains(dir.path(), 10, 64, 5);
  auto mx = DatasetManifest::load(d.dir_x);
  auto x = ImageDataset::load(mx, 64, MissingSidecarPolicy::Strict);
  auto y = ImageDataset::load(DatasetManifest::load(d.dir_y), 64, MissingSidecarPolicy::Strict);
  auto pairs = paired_rows(x, y, mx);
  CHECK(pairs.rows_x.size() == 10);
  auto batch = gather_pairs(x, y, pairs, {0, 3}, 64);
  CHECK(torch::equal(batch.x[1], x.images()[pairs.rows_x[3]]));
  CHECK(torch::equal(batch.y[1], y.images()[pairs.rows_y[3]]));
}

TEST_CASE("unpaired sampler") {
  CHECK_THROWS_WITH(UnpairedSampler(4, 10, 5, 0), doctest::Contains("exceeds dataset size"));
  UnpairedSampler a(20, 30, 4, 7), b(20, 30, 4, 7);
  CHECK(a.next() == b.next());
  UnpairedSampler c(20, 30, 4, 8);
  CHECK(a.next() != c.next());

  // Each pass over X draws every row once.
  UnpairedSampler s(12, 12, 3, 1);
  std::multiset<int64_t> seen;
  for (int i = 0; i < 4; ++i) {
    auto [xs, ys] = s.next();
    seen.insert(xs.begin(), xs.end());
  }
  CHECK(seen.size() == 12);
  CHECK(std::set<int64_t>(seen.begin(), seen.end()).size() == 12);
  s.next();
  CHECK(s.epoch() == 1);
}

TEST_CASE("unpaired sampler draws X and Y independently") {
  UnpairedSampler s(10, 10, 1, 11);
  std::vector<std::vector<double>> counts(10, std::vector<double>(10, 0.0));
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    auto [xs, ys] = s.next();
    counts[static_cast<size_t>(xs[0])][static_cast<size_t>(ys[0])] += 1;
  }
  double chi2 = 0.0;
  std::vector<double> rows(10, 0.0), cols(10, 0.0);
  for (int i = 0; i < 10; ++i) {
    for (int j = 0; j < 10; ++j) {
      rows[i] += counts[i][j];
      cols[j] += counts[i][j];
    }
  }
  for (int i = 0; i < 10; ++i) {
    for (int j = 0; j < 10; ++j) {
      const double expected = rows[i] * cols[j] / draws;
      chi2 += (counts[i][j] - expected) * (counts[i][j] - expected) / expected;
    }
  }
  CHECK(chi2 < kChi2Df81P99);
}

TEST_CASE("dataset gather resizes guidance with the images") {
  auto b = toy_batch(2, 128, 6, Domain::X);
  auto ds = ImageDataset::from_tensors(b.images, b.masks, b.landmarks, b.ids);
  auto g = ds.gather({1}, 64);
  CHECK(g.images.sizes() == torch::IntArrayRef({1, 3, 64, 64}));
  CHECK(g.masks.sizes() == torch::IntArrayRef({1, 64, 64}));
  CHECK(torch::allclose(g.landmarks[0], b.landmarks[1] * 0.5));
  CHECK(g.ids == std::vector<std::string>{"id1_000"});
}
