#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "spct/engine.hpp"

using namespace spct;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.views = 2;
  cfg.epochs = 2;
  cfg.iters_per_epoch = 3;
  cfg.batch_labeled = 2;
  cfg.batch_unlabeled = 3;
  cfg.base_lr = 2e-3;
  cfg.seed = 5;
  return cfg;
}

Dataset tiny_dataset() { return generate(31, 24, 16, 0.25); }

bool params_equal(const SegNetTiny& a, const SegNetTiny& b) {
  const auto pa = a.params();
  const auto pb = b.params();
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (pa[i]->data() != pb[i]->data()) return false;
  return true;
}

/// Exact predictor for 0/1-valued images: class 1 logit is 100*pixel - 50,
/// so the argmax reproduces the image as a mask.
SegNetTiny threshold_net() {
  SegNetTiny net = SegNetTiny::init(0, 2);
  for (Tensor* p : net.params()) *p = Tensor::zeros(p->shape());
  std::vector<double> w1(net.w1.data().size(), 0.0);
  w1[0 * 9 + 4] = 1.0;  // filter 0 = center tap
  net.w1 = Tensor::from(net.w1.shape(), w1);
  std::vector<double> w2(net.w2.data().size(), 0.0);
  w2[(0 * 8 + 0) * 9 + 4] = 1.0;
  net.w2 = Tensor::from(net.w2.shape(), w2);
  std::vector<double> w3(net.w3.data().size(), 0.0);
  w3[1 * 8 + 0] = 100.0;  // class-1 logit reads channel 0
  net.w3 = Tensor::from(net.w3.shape(), w3);
  net.b3 = Tensor::from({2}, {0.0, -50.0});
  return net;
}

}  // namespace

TEST_CASE("adam first step has magnitude close to lr") {
  Tensor theta = Tensor::zeros({4});
  const std::vector<double> g(4, 0.5);
  AdamState state;
  adam_step({&theta}, {&g}, state, 1e-3);
  for (double v : theta.data())
    CHECK(std::abs(v) == Catch::Approx(1e-3).epsilon(1e-6));

  SECTION("zero gradient leaves parameters unchanged") {
    Tensor fixed = Tensor::from({2}, {1.5, -2.5});
    const std::vector<double> zero(2, 0.0);
    AdamState s2;
    adam_step({&fixed}, {&zero}, s2, 1e-2);
    CHECK(fixed.data() == std::vector<double>{1.5, -2.5});
  }
  SECTION("two runs with the same inputs are identical") {
    Tensor t1 = Tensor::from({3}, {0.1, 0.2, 0.3});
    Tensor t2 = t1.clone();
    const std::vector<double> grad{0.3, -0.7, 0.05};
    AdamState s1, s2;
    for (int i = 0; i < 5; ++i) {
      adam_step({&t1}, {&grad}, s1, 3e-3);
      adam_step({&t2}, {&grad}, s2, 3e-3);
    }
    CHECK(t1.data() == t2.data());
  }
}

TEST_CASE("epochs=0 returns the initialized ensemble untouched") {
  TrainConfig cfg = tiny_config();
  cfg.epochs = 0;
  const Dataset ds = tiny_dataset();
  const TrainResult res = train(cfg, ds);
  CHECK(res.record.rows.empty());
  const ViewEnsemble fresh = ViewEnsemble::init(cfg.seed, 2, cfg.views);
  for (int k = 0; k < cfg.views; ++k) {
    CHECK(params_equal(res.ensemble.students[static_cast<std::size_t>(k)],
                       fresh.students[static_cast<std::size_t>(k)]));
    CHECK(params_equal(res.ensemble.teachers[static_cast<std::size_t>(k)],
                       fresh.teachers[static_cast<std::size_t>(k)]));
  }
}

TEST_CASE("ablation flags zero their loss columns and skip their machinery") {
  TrainConfig cfg = tiny_config();
  cfg.enable_spc = false;
  cfg.enable_consistency = false;
  const Dataset ds = tiny_dataset();
  const TrainResult res = train(cfg, ds);
  REQUIRE(res.record.rows.size() == 2);
  for (const auto& row : res.record.rows) {
    CHECK(row.loss_spc == 0.0);
    CHECK(row.loss_reg == 0.0);
    CHECK(row.loss_sup > 0.0);
    CHECK(std::isfinite(row.unlabeled_entropy));
  }
  // teachers were never EMA-updated: still exact copies of the init
  const ViewEnsemble fresh = ViewEnsemble::init(cfg.seed, 2, cfg.views);
  for (int k = 0; k < cfg.views; ++k)
    CHECK(params_equal(res.ensemble.teachers[static_cast<std::size_t>(k)],
                       fresh.teachers[static_cast<std::size_t>(k)]));
}

TEST_CASE("training is deterministic and parallel stepping matches serial") {
  const Dataset ds = tiny_dataset();
  TrainConfig cfg = tiny_config();
  const std::string serial1 = train(cfg, ds).record.to_csv();
  const std::string serial2 = train(cfg, ds).record.to_csv();
  CHECK(serial1 == serial2);

  cfg.parallel_views = true;
  const std::string parallel1 = train(cfg, ds).record.to_csv();
  const std::string parallel2 = train(cfg, ds).record.to_csv();
  CHECK(parallel1 == parallel2);
  CHECK(parallel1 == serial1);
}

TEST_CASE("loss columns are finite and spc engages") {
  TrainConfig cfg = tiny_config();
  const Dataset ds = tiny_dataset();
  const TrainResult res = train(cfg, ds);
  REQUIRE(res.record.rows.size() == 2);
  for (const auto& row : res.record.rows) {
    for (double v : {row.loss_sup, row.loss_spc, row.loss_reg,
                     row.unlabeled_entropy, row.val_dsc}) {
      CHECK(std::isfinite(v));
    }
    CHECK(row.loss_spc != 0.0);
    CHECK(row.loss_reg != 0.0);
    CHECK(row.gamma >= cfg.gamma0);
    CHECK(row.lr > 0.0);
  }
}

TEST_CASE("teacher parameters move only through EMA") {
  TrainConfig cfg = tiny_config();
  const Dataset ds = tiny_dataset();
  const TrainResult res = train(cfg, ds);
  // with consistency on, teachers moved away from the init but never held
  // gradients (train() itself asserts the latter every iteration)
  const ViewEnsemble fresh = ViewEnsemble::init(cfg.seed, 2, cfg.views);
  for (int k = 0; k < cfg.views; ++k) {
    CHECK_FALSE(params_equal(res.ensemble.teachers[static_cast<std::size_t>(k)],
                             fresh.teachers[static_cast<std::size_t>(k)]));
    for (const Tensor* p :
         res.ensemble.teachers[static_cast<std::size_t>(k)].params())
      CHECK_FALSE(p->has_grad());
  }
}

TEST_CASE("config validation") {
  TrainConfig cfg = tiny_config();
  cfg.views = 1;  // spc needs two views
  CHECK_THROWS_AS(cfg.validate(), ValueError);
  cfg = tiny_config();
  cfg.lambda1 = -0.5;
  CHECK_THROWS_AS(cfg.validate(), ValueError);
  cfg = tiny_config();
  cfg.epsilon_floor = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ValueError);
  cfg = tiny_config();
  cfg.base_lr = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ValueError);
}

TEST_CASE("train abort carries the failing iteration and last losses") {
  const TrainAbort abort("boom", 3, 17, 0.5, 0.25, 0.125);
  CHECK(abort.epoch == 3);
  CHECK(abort.iter == 17);
  CHECK(abort.last_sup == 0.5);
  CHECK(abort.last_spc == 0.25);
  CHECK(abort.last_reg == 0.125);
}

TEST_CASE("evaluate on an exact predictor and on an all-background one") {
  // dataset whose images are already 0/1 masks
  Dataset ds;
  ds.hw = 16;
  Rng rng(77);
  for (int i = 0; i < 4; ++i) {
    std::vector<double> img(16 * 16, 0.0);
    std::vector<int> labels(16 * 16, 0);
    const int cy = rng.uniform_int(4, 11), cx = rng.uniform_int(4, 11);
    for (int y = cy - 2; y <= cy + 2; ++y)
      for (int x = cx - 2; x <= cx + 2; ++x) {
        img[static_cast<std::size_t>(y * 16 + x)] = 1.0;
        labels[static_cast<std::size_t>(y * 16 + x)] = 1;
      }
    ds.images.push_back(Tensor::from({1, 16, 16}, img));
    ds.masks.push_back(GroundTruthMask::from_labels(labels, 2, 16, 16));
    ds.test.push_back(i);
  }
  ds.labeled = {0};
  ds.unlabeled = {1, 2, 3};

  SECTION("exact predictor gives DSC 1 and HD 0") {
    ViewEnsemble e = ViewEnsemble::init(1, 2, 1);
    e.students[0] = threshold_net();
    e.teachers[0] = threshold_net();
    const EvalResult res = evaluate(e, ds, true);
    CHECK(res.mean_dsc == 1.0);
    CHECK(res.mean_hd == 0.0);
    CHECK(res.hd_undefined == 0);
  }
  SECTION("all-background predictor gives DSC 0 and undefined HD") {
    ViewEnsemble e = ViewEnsemble::init(1, 2, 1);
    for (Tensor* p : e.students[0].params()) *p = Tensor::zeros(p->shape());
    for (Tensor* p : e.teachers[0].params()) *p = Tensor::zeros(p->shape());
    const EvalResult res = evaluate(e, ds, false);
    CHECK(res.mean_dsc == 0.0);
    CHECK(res.hd_undefined == 4);
    CHECK(std::isnan(res.mean_hd));
  }
  SECTION("K=1 soft vote equals single-model evaluation") {
    ViewEnsemble e = ViewEnsemble::init(9, 2, 1);
    const EvalResult res = evaluate(e, ds, false);
    // replicate by hand for the single net
    double dsc_sum = 0.0;
    for (int idx : ds.test) {
      const ProbMap p =
          e.students[0].forward(ds.images[static_cast<std::size_t>(idx)]);
      const auto labels = argmax_classes(p);
      const BinaryMask s = foreground_mask(labels, 16, 16);
      const BinaryMask g = foreground_mask(
          ds.masks[static_cast<std::size_t>(idx)].labels(), 16, 16);
      dsc_sum += dsc(s, g);
    }
    CHECK(res.mean_dsc == Catch::Approx(dsc_sum / 4.0).epsilon(1e-15));
  }
}

TEST_CASE("checkpoint round-trip within f32 precision") {
  TrainConfig cfg = tiny_config();
  cfg.epochs = 1;
  const Dataset ds = tiny_dataset();
  const TrainResult res = train(cfg, ds);

  const fs::path dir = fs::temp_directory_path() / "spct_ckpt_test";
  fs::remove_all(dir);
  save_checkpoint(dir, res.ensemble, cfg.epochs - 1);
  CHECK(fs::exists(dir / "checkpoint.spct"));
  CHECK(fs::exists(dir / "manifest.csv"));

  const ViewEnsemble back = load_checkpoint(dir, cfg.views, 2);
  for (int k = 0; k < cfg.views; ++k) {
    const auto orig =
        res.ensemble.students[static_cast<std::size_t>(k)].params();
    const auto loaded = back.students[static_cast<std::size_t>(k)].params();
    for (std::size_t i = 0; i < orig.size(); ++i) {
      REQUIRE(orig[i]->shape() == loaded[i]->shape());
      for (std::size_t j = 0; j < orig[i]->data().size(); ++j)
        CHECK(loaded[i]->data()[j] ==
              Catch::Approx(orig[i]->data()[j]).margin(1e-6));
    }
  }
  fs::remove_all(dir);
}
