#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "spct/model.hpp"
#include "spct/schedules.hpp"

using namespace spct;

TEST_CASE("pace schedule endpoints and midpoint") {
  const auto s = PaceSchedule::make(0.2, 50, 2, 0.01);
  CHECK(s.ceiling == Catch::Approx(std::log(200.0)).epsilon(1e-15));
  CHECK(pace_at(s, 0) == Catch::Approx(0.2).epsilon(1e-12));
  CHECK(pace_at(s, 50) == Catch::Approx(std::log(200.0)).epsilon(1e-12));
  CHECK(pace_at(s, 1000) == Catch::Approx(std::log(200.0)).epsilon(1e-12));
  // geometric midpoint sqrt(gamma0 * ceiling)
  CHECK(pace_at(s, 25) ==
        Catch::Approx(std::sqrt(0.2 * std::log(200.0))).epsilon(1e-12));
  CHECK(pace_at(s, 25) == Catch::Approx(1.02940).margin(1e-5));
}

TEST_CASE("pace schedule is nondecreasing and capped") {
  const auto s = PaceSchedule::make(0.35, 40, 3, 0.01);
  double prev = 0.0;
  for (int e = 0; e <= 120; ++e) {
    const double v = pace_at(s, e);
    CHECK(v >= prev);
    CHECK(v <= s.ceiling + 1e-15);
    prev = v;
  }
  CHECK_THROWS_AS(pace_at(s, -1), ValueError);
  CHECK_THROWS_AS(PaceSchedule::make(0.0, 50, 2, 0.01), ValueError);
}

TEST_CASE("alpha ramp") {
  const AlphaSchedule s{1e-4, 50};
  CHECK(alpha_at(s, 0) == 0.0);
  CHECK(alpha_at(s, 25) == Catch::Approx(5e-5).epsilon(1e-12));
  CHECK(alpha_at(s, 50) == 1e-4);
  CHECK(alpha_at(s, 500) == 1e-4);
  CHECK_THROWS_AS(alpha_at(s, -2), ValueError);
}

TEST_CASE("learning rate warm-up and cosine decay") {
  const auto s = LrSchedule::make(3e-3, 100);
  CHECK(s.warmup_epochs == 10);
  CHECK(lr_at(s, 0) == Catch::Approx(3e-3 / 300.0).epsilon(1e-12));
  CHECK(lr_at(s, 10) == Catch::Approx(3e-3).epsilon(1e-12));
  // midpoint of the decay span [10, 100)
  CHECK(lr_at(s, 55) == Catch::Approx(1.5e-3).epsilon(1e-12));
  CHECK(lr_at(s, 99) > 0.0);
  CHECK(lr_at(s, 99) < 1e-4);
  for (int e = 0; e < 100; ++e) CHECK(lr_at(s, e) > 0.0);
  CHECK_THROWS_AS(lr_at(s, 100), ValueError);
  CHECK_THROWS_AS(lr_at(s, -1), ValueError);
}

TEST_CASE("ema update fixed point and single step") {
  const Tensor t = Tensor::from({3}, {1.0, 1.0, 1.0});
  const Tensor st = Tensor::from({3}, {0.0, 0.0, 0.0});
  CHECK(ema_update(t, t, 0.99).data() == t.data());
  const Tensor out = ema_update(t, st, 0.99);
  for (double v : out.data()) CHECK(v == Catch::Approx(0.99).epsilon(1e-15));
  CHECK_THROWS_AS(ema_update(t, Tensor::zeros({4}), 0.99), ShapeError);
  CHECK_THROWS_AS(ema_update(t, st, 1.0), ValueError);
}

TEST_CASE("ema with frozen student decays geometrically at rate beta") {
  const double beta = 0.99;
  SegNetTiny student = SegNetTiny::init(3, 2);
  SegNetTiny teacher = SegNetTiny::init(4, 2);

  auto diff_norm = [&] {
    double acc = 0.0;
    const auto tp = teacher.params();
    const auto sp = student.params();
    for (std::size_t i = 0; i < tp.size(); ++i)
      for (std::size_t j = 0; j < tp[i]->data().size(); ++j) {
        const double d = tp[i]->data()[j] - sp[i]->data()[j];
        acc += d * d;
      }
    return std::sqrt(acc);
  };

  const double d0 = diff_norm();
  REQUIRE(d0 > 0.0);
  double prev = d0;
  for (int step = 1; step <= 100; ++step) {
    auto tp = teacher.params();
    auto sp = student.params();
    for (std::size_t i = 0; i < tp.size(); ++i)
      *tp[i] = ema_update(*tp[i], *sp[i], beta);
    const double cur = diff_norm();
    CHECK(std::abs(cur / prev - beta) <= 1e-12);
    prev = cur;
  }
  CHECK(prev == Catch::Approx(d0 * std::pow(beta, 100)).epsilon(1e-10));
}
