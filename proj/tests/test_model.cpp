#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "spct/model.hpp"
#include "spct/rng.hpp"

using namespace spct;

namespace {

Tensor random_image(std::uint64_t seed, int h, int w) {
  Rng rng(seed);
  std::vector<double> v(static_cast<std::size_t>(h) * w);
  for (auto& x : v) x = rng.uniform(0.0, 1.0);
  return Tensor::from({1, h, w}, std::move(v));
}

bool same_values(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && a.data() == b.data();
}

}  // namespace

TEST_CASE("ensemble init is deterministic with per-view offsets") {
  const auto e1 = ViewEnsemble::init(7, 2, 2);
  const auto e2 = ViewEnsemble::init(7, 2, 2);
  for (int k = 0; k < 2; ++k) {
    const auto p1 = e1.students[static_cast<std::size_t>(k)].params();
    const auto p2 = e2.students[static_cast<std::size_t>(k)].params();
    for (std::size_t i = 0; i < p1.size(); ++i)
      CHECK(same_values(*p1[i], *p2[i]));
  }
  CHECK_FALSE(same_values(e1.students[0].w1, e1.students[1].w1));
  for (int k = 0; k < 2; ++k) {
    const auto sp = e1.students[static_cast<std::size_t>(k)].params();
    const auto tp = e1.teachers[static_cast<std::size_t>(k)].params();
    for (std::size_t i = 0; i < sp.size(); ++i)
      CHECK(same_values(*sp[i], *tp[i]));
  }
  CHECK_THROWS_AS(ViewEnsemble::init(7, 2, 0), ValueError);
}

TEST_CASE("forward yields a valid probability map of matching shape") {
  const auto net = SegNetTiny::init(11, 2);
  for (int hw : {3, 5, 8}) {
    const ProbMap p = net.forward(random_image(5, hw, hw));
    CHECK(p.values.shape() == Shape{2, hw, hw});
    ProbMap::from_values(p.values);  // throws if invariants are broken
  }
}

TEST_CASE("zero weights and bias give uniform predictions") {
  SegNetTiny net = SegNetTiny::init(1, 2);
  for (Tensor* p : net.params()) *p = Tensor::zeros(p->shape());
  const ProbMap p = net.forward(random_image(6, 5, 5));
  for (double v : p.values.data()) CHECK(v == Catch::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("forward is deterministic") {
  const auto net = SegNetTiny::init(21, 2);
  const Tensor img = random_image(9, 7, 7);
  CHECK(same_values(net.forward(img).values, net.forward(img).values));
}

TEST_CASE("soft vote averages and preserves the simplex") {
  const ProbMap a{Tensor::from({2, 1, 1}, {1.0 - 1e-12, 1e-12})};
  const ProbMap b{Tensor::from({2, 1, 1}, {1e-12, 1.0 - 1e-12})};
  const ProbMap v = soft_vote({a, b});
  CHECK(v.values.at({0, 0, 0}) == Catch::Approx(0.5).epsilon(1e-9));
  CHECK(v.values.at({1, 0, 0}) == Catch::Approx(0.5).epsilon(1e-9));

  SECTION("single view is the identity") {
    const ProbMap one = soft_vote({a});
    CHECK(same_values(one.values, a.values));
  }
  SECTION("channel sums stay one") {
    const auto net = SegNetTiny::init(3, 2);
    const auto net2 = SegNetTiny::init(4, 2);
    const Tensor img = random_image(10, 6, 6);
    const ProbMap vote = soft_vote({net.forward(img), net2.forward(img)});
    ProbMap::from_values(vote.values);
  }
  SECTION("agreement preservation") {
    // when all views agree confidently, the vote's argmax matches
    const ProbMap v2 = soft_vote({a, a});
    CHECK(argmax_classes(v2) == std::vector<int>{0});
  }
}

TEST_CASE("rotations are exact and invertible") {
  const Tensor x = random_image(13, 6, 6);
  SECTION("r=0 is the identity") {
    CHECK(same_values(apply_transform(Transform{0}, x), x));
  }
  SECTION("r=2 twice is the identity") {
    const Tensor once = apply_transform(Transform{2}, x);
    CHECK(same_values(apply_transform(Transform{2}, once), x));
  }
  SECTION("r=1 then r=3 is the identity") {
    const Tensor once = apply_transform(Transform{1}, x);
    CHECK(same_values(apply_transform(Transform{3}, once), x));
  }
  SECTION("inverse round-trips for every r") {
    for (int r = 0; r < 4; ++r) {
      const Transform t{r};
      const Tensor y = apply_transform(t.inverse(), apply_transform(t, x));
      CHECK(same_values(y, x));
    }
  }
  SECTION("odd turns require square input") {
    const Tensor rect = Tensor::zeros({1, 2, 3});
    CHECK_THROWS_AS(apply_transform(Transform{1}, rect), ShapeError);
    CHECK(apply_transform(Transform{2}, rect).shape() == Shape{1, 2, 3});
  }
}

TEST_CASE("rotation preserves per-pixel channel sums of a probability map") {
  const auto net = SegNetTiny::init(17, 2);
  const ProbMap p = net.forward(random_image(15, 6, 6));
  for (int r = 0; r < 4; ++r) {
    const Tensor rot = apply_transform(Transform{r}, p.values);
    ProbMap::from_values(rot);
  }
}

TEST_CASE("tracked copies deposit gradients into the original parameters") {
  SegNetTiny net = SegNetTiny::init(5, 2);
  Tape tape;
  const SegNetTiny tracked = net.tracked(tape);
  const ProbMap p = tracked.forward(random_image(2, 5, 5));
  backward(sum(mul(p.values, p.values.detach())));
  for (const Tensor* param : net.params()) {
    REQUIRE(param->has_grad());
    CHECK(param->grad().size() ==
          static_cast<std::size_t>(param->numel()));
  }
}
