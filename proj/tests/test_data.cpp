#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "spct/data.hpp"

using namespace spct;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name)
      : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string read_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_bytes(const fs::path& p, const std::string& bytes) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f << bytes;
}

}  // namespace

TEST_CASE("generation is deterministic and respects the split rule") {
  const Dataset a = generate(7, 200, 32, 0.05);
  const Dataset b = generate(7, 200, 32, 0.05);
  CHECK(a.labeled.size() == 10);
  CHECK(a.unlabeled.size() == 190);
  CHECK(a.test.size() == 30);  // max(8, round(0.15 * 200))
  REQUIRE(a.images.size() == b.images.size());
  for (std::size_t i = 0; i < a.images.size(); ++i) {
    CHECK(a.images[i].data() == b.images[i].data());
    CHECK(a.masks[i].onehot.data() == b.masks[i].onehot.data());
  }
  CHECK(a.labeled == b.labeled);
  CHECK(a.unlabeled == b.unlabeled);

  const Dataset c = generate(8, 200, 32, 0.05);
  CHECK(c.images[0].data() != a.images[0].data());
}

TEST_CASE("splits are pairwise disjoint") {
  const Dataset ds = generate(3, 60, 16, 0.1);
  std::set<int> seen;
  for (const auto* set : {&ds.labeled, &ds.unlabeled, &ds.test})
    for (int idx : *set) {
      CHECK(seen.insert(idx).second);
      CHECK(idx >= 0);
      CHECK(idx < static_cast<int>(ds.images.size()));
    }
  CHECK(seen.size() == ds.labeled.size() + ds.unlabeled.size() + ds.test.size());
}

TEST_CASE("generated images are in range with valid masks") {
  const Dataset ds = generate(5, 40, 24, 0.1);
  for (const auto& img : ds.images) {
    CHECK(img.shape() == Shape{1, 24, 24});
    for (double v : img.data()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
  for (const auto& m : ds.masks) {
    GroundTruthMask::from_onehot(m.onehot);  // validates one-hot
    long long fg = 0;
    for (int label : m.labels()) fg += label;
    const double frac = static_cast<double>(fg) / (24.0 * 24.0);
    CHECK(frac >= 0.02);
    CHECK(frac <= 0.40);
  }
}

TEST_CASE("generation parameter validation") {
  CHECK_THROWS_AS(generate(1, 100, 8, 0.1), ValueError);    // hw too small
  CHECK_THROWS_AS(generate(1, 100, 32, 0.0), ValueError);   // ratio 0
  CHECK_THROWS_AS(generate(1, 100, 32, 1.0), ValueError);   // ratio 1
  CHECK_THROWS_AS(generate(1, 100, 32, 0.001), ValueError);  // |S| rounds to 0
}

TEST_CASE("tensor container round-trips f32 bit-exactly") {
  TempDir tmp("spct_data_rt");
  NamedTensor t;
  t.name = "weights";
  t.dtype = Dtype::f32;
  t.dims = {2, 3};
  t.f32 = {1.0f, -2.5f, 3.25e-7f, 0.0f, 1e30f, -0.125f};
  NamedTensor m;
  m.name = "mask";
  m.dtype = Dtype::u8;
  m.dims = {4};
  m.u8 = {0, 1, 1, 0};
  save_tensors(tmp.path / "x.spct", {t, m});
  const auto loaded = load_tensors(tmp.path / "x.spct");
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].name == "weights");
  CHECK(loaded[0].dims == Shape{2, 3});
  REQUIRE(loaded[0].f32.size() == t.f32.size());
  for (std::size_t i = 0; i < t.f32.size(); ++i) {
    // bit-exact comparison
    CHECK(std::memcmp(&loaded[0].f32[i], &t.f32[i], 4) == 0);
  }
  CHECK(loaded[1].u8 == m.u8);
}

TEST_CASE("tensor container rejects corruption") {
  TempDir tmp("spct_data_corrupt");
  NamedTensor t;
  t.name = "x";
  t.dtype = Dtype::f32;
  t.dims = {2};
  t.f32 = {1.0f, 2.0f};
  const auto path = tmp.path / "t.spct";
  save_tensors(path, {t});
  const std::string good = read_bytes(path);

  SECTION("bad magic") {
    std::string bad = good;
    bad[0] = 'X';
    write_bytes(path, bad);
    try {
      load_tensors(path);
      FAIL("expected IoError");
    } catch (const IoError& e) {
      CHECK(std::string(e.what()).find("bad magic") != std::string::npos);
    }
  }
  SECTION("unknown version") {
    std::string bad = good;
    bad[4] = 99;
    write_bytes(path, bad);
    CHECK_THROWS_AS(load_tensors(path), IoError);
  }
  SECTION("truncated payload names expected and actual length") {
    write_bytes(path, good.substr(0, good.size() - 3));
    try {
      load_tensors(path);
      FAIL("expected IoError");
    } catch (const IoError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("expected") != std::string::npos);
      CHECK(msg.find("offset") != std::string::npos);
    }
  }
  SECTION("trailing garbage rejected") {
    write_bytes(path, good + "zz");
    CHECK_THROWS_AS(load_tensors(path), IoError);
  }
}

TEST_CASE("dataset directory round-trip") {
  TempDir tmp("spct_data_dir");
  const Dataset ds = generate(11, 24, 16, 0.25);
  save_dataset(tmp.path, ds);
  CHECK(fs::exists(tmp.path / "images.spct"));
  CHECK(fs::exists(tmp.path / "masks.spct"));
  CHECK(fs::exists(tmp.path / "split.txt"));

  const Dataset back = load_dataset(tmp.path);
  CHECK(back.labeled == ds.labeled);
  CHECK(back.unlabeled == ds.unlabeled);
  CHECK(back.test == ds.test);
  REQUIRE(back.images.size() == ds.images.size());
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    // images were quantized through f32 at generation, so the value
    // round-trip is exact
    CHECK(back.images[i].data() == ds.images[i].data());
    CHECK(back.masks[i].onehot.data() == ds.masks[i].onehot.data());
  }
}

TEST_CASE("saving twice produces byte-identical files") {
  TempDir tmp("spct_data_bytes");
  const Dataset ds = generate(13, 20, 16, 0.2);
  save_dataset(tmp.path / "a", ds);
  save_dataset(tmp.path / "b", ds);
  for (const char* name : {"images.spct", "masks.spct", "split.txt"})
    CHECK(read_bytes(tmp.path / "a" / name) == read_bytes(tmp.path / "b" / name));
}

TEST_CASE("batch sampler covers the unlabeled split exactly per pass") {
  Dataset ds = generate(17, 20, 16, 0.2);  // |S|=4, |U|=16
  REQUIRE(ds.unlabeled.size() == 16);
  BatchSampler sampler(ds, 99);
  std::multiset<int> seen;
  for (int b = 0; b < 4; ++b) {
    const Batch batch = sampler.next(2, 4);
    CHECK(batch.labeled.size() == 2);
    CHECK(batch.unlabeled.size() == 4);
    for (int idx : batch.unlabeled) seen.insert(idx);
  }
  // one full pass: every unlabeled index exactly once
  CHECK(seen.size() == 16);
  CHECK(std::set<int>(seen.begin(), seen.end()).size() == 16);
  for (int idx : seen)
    CHECK(std::find(ds.unlabeled.begin(), ds.unlabeled.end(), idx) !=
          ds.unlabeled.end());
}

TEST_CASE("batch sampling is deterministic per seed") {
  const Dataset ds = generate(19, 30, 16, 0.2);
  BatchSampler s1(ds, 5), s2(ds, 5), s3(ds, 6);
  bool any_diff = false;
  for (int i = 0; i < 20; ++i) {
    const Batch a = s1.next(2, 3);
    const Batch b = s2.next(2, 3);
    const Batch c = s3.next(2, 3);
    CHECK(a.labeled == b.labeled);
    CHECK(a.unlabeled == b.unlabeled);
    any_diff |= a.unlabeled != c.unlabeled;
  }
  CHECK(any_diff);  // different seeds produce a different sequence
}

TEST_CASE("batch sampler validates sizes") {
  const Dataset ds = generate(23, 20, 16, 0.2);
  BatchSampler sampler(ds, 1);
  CHECK_THROWS_AS(sampler.next(100, 1), ValueError);
  CHECK_THROWS_AS(sampler.next(1, 100), ValueError);
}
