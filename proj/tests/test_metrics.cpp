#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "spct/metrics.hpp"
#include "spct/rng.hpp"

using namespace spct;

namespace {

BinaryMask random_mask(Rng& rng, int h, int w, double density) {
  std::vector<std::uint8_t> v(static_cast<std::size_t>(h) * w);
  for (auto& x : v) x = rng.uniform() < density ? 1 : 0;
  return BinaryMask{h, w, std::move(v)};
}

// independent double-loop oracle over all point pairs
std::optional<double> hausdorff_oracle(const BinaryMask& a,
                                       const BinaryMask& b) {
  std::vector<std::pair<int, int>> pa, pb;
  for (int y = 0; y < a.height; ++y)
    for (int x = 0; x < a.width; ++x) {
      if (a.v[static_cast<std::size_t>(y * a.width + x)]) pa.push_back({y, x});
      if (b.v[static_cast<std::size_t>(y * b.width + x)]) pb.push_back({y, x});
    }
  if (pa.empty() || pb.empty()) return std::nullopt;
  auto directed = [](const auto& from, const auto& to) {
    long long worst = 0;
    for (const auto& p : from) {
      long long best = LLONG_MAX;
      for (const auto& q : to) {
        const long long dy = p.first - q.first, dx = p.second - q.second;
        best = std::min(best, dy * dy + dx * dx);
      }
      worst = std::max(worst, best);
    }
    return worst;
  };
  return std::sqrt(
      static_cast<double>(std::max(directed(pa, pb), directed(pb, pa))));
}

double dsc_oracle(const BinaryMask& s, const BinaryMask& g) {
  long long inter = 0, ns = 0, ng = 0;
  for (std::size_t i = 0; i < s.v.size(); ++i) {
    if (s.v[i] && g.v[i]) ++inter;
    if (s.v[i]) ++ns;
    if (g.v[i]) ++ng;
  }
  if (ns + ng == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(ns + ng);
}

}  // namespace

TEST_CASE("dsc basics") {
  Rng rng(3);
  const BinaryMask a = random_mask(rng, 8, 8, 0.4);
  CHECK(dsc(a, a) == 1.0);

  BinaryMask left{2, 2, {1, 0, 1, 0}};
  BinaryMask right{2, 2, {0, 1, 0, 1}};
  CHECK(dsc(left, right) == 0.0);

  // |S| = |G| = 100 with overlap 50 on a 20x20 grid
  std::vector<std::uint8_t> s(400, 0), g(400, 0);
  for (int i = 0; i < 100; ++i) s[static_cast<std::size_t>(i)] = 1;
  for (int i = 50; i < 150; ++i) g[static_cast<std::size_t>(i)] = 1;
  CHECK(dsc(BinaryMask{20, 20, s}, BinaryMask{20, 20, g}) == 0.5);

  const BinaryMask empty{2, 2, {0, 0, 0, 0}};
  CHECK(dsc(empty, empty) == 1.0);
  CHECK_THROWS_AS(dsc(empty, BinaryMask{1, 4, {0, 0, 0, 0}}), ShapeError);
}

TEST_CASE("dsc is symmetric") {
  Rng rng(17);
  for (int i = 0; i < 100; ++i) {
    const BinaryMask a = random_mask(rng, 9, 9, 0.3);
    const BinaryMask b = random_mask(rng, 9, 9, 0.3);
    CHECK(dsc(a, b) == dsc(b, a));
  }
}

TEST_CASE("hausdorff basics") {
  BinaryMask a{5, 5, std::vector<std::uint8_t>(25, 0)};
  a.v[0] = 1;  // (0,0)
  BinaryMask b{5, 5, std::vector<std::uint8_t>(25, 0)};
  b.v[3 * 5 + 4] = 1;  // (3,4)
  const auto d = hausdorff(a, b);
  REQUIRE(d.has_value());
  CHECK(*d == 5.0);  // exact 3-4-5 triangle

  CHECK(*hausdorff(a, a) == 0.0);

  // 1x1 center inside a 3x3 block: worst point is the block corner
  BinaryMask center{5, 5, std::vector<std::uint8_t>(25, 0)};
  center.v[2 * 5 + 2] = 1;
  BinaryMask block{5, 5, std::vector<std::uint8_t>(25, 0)};
  for (int y = 1; y <= 3; ++y)
    for (int x = 1; x <= 3; ++x) block.v[static_cast<std::size_t>(y * 5 + x)] = 1;
  CHECK(*hausdorff(center, block) == Catch::Approx(std::sqrt(2.0)));

  const BinaryMask empty{5, 5, std::vector<std::uint8_t>(25, 0)};
  CHECK_FALSE(hausdorff(a, empty).has_value());
  CHECK_FALSE(hausdorff(empty, a).has_value());
  CHECK_FALSE(hausdorff(empty, empty).has_value());
}

TEST_CASE("metrics match the double-loop oracles exactly on random masks") {
  Rng rng(2024);
  int defined = 0;
  for (int i = 0; i < 100; ++i) {
    const BinaryMask a = random_mask(rng, 16, 16, rng.uniform(0.05, 0.5));
    const BinaryMask b = random_mask(rng, 16, 16, rng.uniform(0.05, 0.5));
    CHECK(dsc(a, b) == dsc_oracle(a, b));
    const auto got = hausdorff(a, b);
    const auto want = hausdorff_oracle(a, b);
    CHECK(got.has_value() == want.has_value());
    if (got && want) {
      CHECK(*got == *want);
      ++defined;
    }
    // symmetry and nonnegativity
    const auto rev = hausdorff(b, a);
    if (got && rev) {
      CHECK(*got == *rev);
      CHECK(*got >= 0.0);
    }
  }
  CHECK(defined > 50);
}

TEST_CASE("hausdorff is zero iff the sets are equal") {
  Rng rng(55);
  for (int i = 0; i < 50; ++i) {
    const BinaryMask a = random_mask(rng, 10, 10, 0.3);
    BinaryMask b = a;
    const auto d = hausdorff(a, b);
    if (d) CHECK(*d == 0.0);
    // flip one pixel far from any existing difference
    b.v[0] = b.v[0] ? 0 : 1;
    const auto d2 = hausdorff(a, b);
    if (d2 && a.count() > 0) CHECK(*d2 > 0.0);
  }
}
