#pragma once

#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "spct/data.hpp"
#include "spct/io.hpp"
#include "spct/losses.hpp"
#include "spct/metrics.hpp"
#include "spct/model.hpp"
#include "spct/schedules.hpp"
#include "spct/tensor.hpp"

namespace spct {

struct TrainConfig {
  int views = 2;  // K
  int epochs = 100;
  int iters_per_epoch = 50;
  int batch_labeled = 2;
  int batch_unlabeled = 4;
  double lambda1 = 0.5;
  double lambda2 = 4.0;
  double epsilon_floor = 0.01;
  double gamma0 = 0.2;
  int pace_ramp_epochs = 50;
  double alpha_max = 1e-4;
  int alpha_ramp_epochs = 50;
  double beta = 0.99;
  double base_lr = 3e-3;
  std::uint64_t seed = 1;
  bool enable_spc = true;
  bool enable_consistency = true;
  bool parallel_views = false;

  void validate() const {
    if (views < 1) throw ValueError("config: views must be >= 1");
    if (enable_spc && views < 2)
      throw ValueError("config: enable_spc requires views >= 2");
    if (epochs < 0) throw ValueError("config: epochs must be >= 0");
    if (iters_per_epoch < 1)
      throw ValueError("config: iters_per_epoch must be >= 1");
    if (batch_labeled < 1 || batch_unlabeled < 1)
      throw ValueError("config: batch sizes must be >= 1");
    if (lambda1 < 0.0 || lambda2 < 0.0)
      throw ValueError("config: lambda1/lambda2 must be >= 0");
    if (!(epsilon_floor > 0.0 && epsilon_floor < 1.0))
      throw ValueError("config: epsilon_floor must be in (0, 1)");
    if (!(gamma0 > 0.0)) throw ValueError("config: gamma0 must be > 0");
    if (pace_ramp_epochs < 1)
      throw ValueError("config: pace_ramp_epochs must be >= 1");
    if (alpha_max < 0.0) throw ValueError("config: alpha_max must be >= 0");
    if (alpha_ramp_epochs < 0)
      throw ValueError("config: alpha_ramp_epochs must be >= 0");
    if (!(beta >= 0.0 && beta < 1.0))
      throw ValueError("config: beta must be in [0, 1)");
    if (!(base_lr > 0.0)) throw ValueError("config: base_lr must be > 0");
  }
};

struct EpochRow {
  int epoch = 0;
  double gamma = 0.0;
  double alpha = 0.0;
  double lr = 0.0;
  double loss_sup = 0.0;
  double loss_spc = 0.0;
  double loss_reg = 0.0;
  double unlabeled_entropy = 0.0;
  double val_dsc = 0.0;
  double val_hd = 0.0;
};

struct TrainRecord {
  std::vector<EpochRow> rows;

  std::string to_csv() const {
    std::string out =
        "epoch,gamma,alpha,lr,loss_sup,loss_spc,loss_reg,"
        "unlabeled_entropy,val_dsc,val_hd\n";
    for (const auto& r : rows) {
      out += std::to_string(r.epoch);
      for (double v : {r.gamma, r.alpha, r.lr, r.loss_sup, r.loss_spc,
                       r.loss_reg, r.unlabeled_entropy, r.val_dsc, r.val_hd}) {
        out += ',';
        out += fmt_double(v);
      }
      out += '\n';
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Adam.
// ---------------------------------------------------------------------------

struct AdamState {
  std::vector<std::vector<double>> m, v;
  long long t = 0;
};

/// One Adam step (b1 0.9, b2 0.999, eps 1e-8, bias-corrected) over a
/// parameter list with externally supplied gradients.
inline void adam_step(const std::vector<Tensor*>& params,
                      const std::vector<const std::vector<double>*>& grads,
                      AdamState& state, double lr) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  if (params.size() != grads.size())
    throw ValueError("adam_step: params/grads length mismatch");
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(static_cast<std::size_t>(params[i]->numel()), 0.0);
      state.v[i].assign(static_cast<std::size_t>(params[i]->numel()), 0.0);
    }
  }
  state.t += 1;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& g = *grads[i];
    if (g.size() != state.m[i].size())
      throw ShapeError("adam_step: gradient shape mismatch");
    std::vector<double> next(params[i]->data());
    for (std::size_t j = 0; j < g.size(); ++j) {
      state.m[i][j] = b1 * state.m[i][j] + (1.0 - b1) * g[j];
      state.v[i][j] = b2 * state.v[i][j] + (1.0 - b2) * g[j] * g[j];
      const double mhat = state.m[i][j] / c1;
      const double vhat = state.v[i][j] / c2;
      next[j] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
    *params[i] = Tensor::from(params[i]->shape(), std::move(next));
  }
}

// ---------------------------------------------------------------------------
// Evaluation.
// ---------------------------------------------------------------------------

struct EvalResult {
  double mean_dsc = 0.0;
  double mean_hd = 0.0;  // NaN when every pair was undefined
  int hd_undefined = 0;
  int count = 0;
};

inline BinaryMask foreground_mask(const std::vector<int>& labels, int h,
                                  int w) {
  std::vector<std::uint8_t> v(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i)
    v[i] = labels[i] == 1 ? 1 : 0;
  return BinaryMask{h, w, std::move(v)};
}

/// Soft-voted prediction quality over the test split.
inline EvalResult evaluate(const ViewEnsemble& ensemble, const Dataset& ds,
                           bool use_teachers) {
  if (ds.test.empty()) throw ValueError("evaluate: empty test split");
  const auto& nets = use_teachers ? ensemble.teachers : ensemble.students;
  EvalResult res;
  double dsc_sum = 0.0, hd_sum = 0.0;
  int hd_count = 0;
  for (int idx : ds.test) {
    std::vector<ProbMap> preds;
    preds.reserve(nets.size());
    for (const auto& net : nets)
      preds.push_back(net.forward(ds.images[static_cast<std::size_t>(idx)]));
    const ProbMap vote = soft_vote(preds);
    const auto pred_labels = argmax_classes(vote);
    BinaryMask s = foreground_mask(pred_labels, ds.hw, ds.hw);
    BinaryMask g = foreground_mask(
        ds.masks[static_cast<std::size_t>(idx)].labels(), ds.hw, ds.hw);
    dsc_sum += dsc(s, g);
    if (auto hd = hausdorff(s, g)) {
      hd_sum += *hd;
      ++hd_count;
    } else {
      ++res.hd_undefined;
    }
    ++res.count;
  }
  res.mean_dsc = dsc_sum / res.count;
  res.mean_hd = hd_count > 0 ? hd_sum / hd_count
                             : std::numeric_limits<double>::quiet_NaN();
  return res;
}

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------

namespace detail {

/// Run fn(0..K-1) either inline or on one thread per view. Exceptions are
/// rethrown in view order so failures are deterministic.
inline void run_views(int views, bool parallel,
                      const std::function<void(int)>& fn) {
  if (!parallel || views == 1) {
    for (int k = 0; k < views; ++k) fn(k);
    return;
  }
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(views));
  std::vector<std::thread> threads;
  threads.reserve(static_cast<std::size_t>(views));
  for (int k = 0; k < views; ++k)
    threads.emplace_back([k, &fn, &errors] {
      try {
        fn(k);
      } catch (...) {
        errors[static_cast<std::size_t>(k)] = std::current_exception();
      }
    });
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline double mean_pixel_entropy(const ProbMap& p) {
  const int c = p.classes();
  const long long plane = p.pixels();
  const auto& d = p.values.data();
  double acc = 0.0;
  for (long long i = 0; i < plane; ++i) {
    for (int j = 0; j < c; ++j) {
      const double v =
          std::max(d[static_cast<std::size_t>(j * plane + i)], kProbFloor);
      acc -= v * std::log(v);
    }
  }
  return acc / static_cast<double>(plane);
}

}  // namespace detail

struct TrainResult {
  ViewEnsemble ensemble;
  TrainRecord record;
};

/// One full run of the co-training loop: per iteration, every view does an
/// augmented supervised pass, the views exchange unlabeled predictions for
/// the self-paced agreement loss, each student matches its teacher under a
/// random rotation, and Adam updates students while teachers track them by
/// EMA. Fully deterministic given the config; per-view work may run on
/// parallel threads with bit-identical results.
inline TrainResult train(const TrainConfig& cfg, const Dataset& ds) {
  cfg.validate();
  const int K = cfg.views;
  ViewEnsemble ensemble = ViewEnsemble::init(cfg.seed, 2, K);
  TrainRecord record;
  if (cfg.epochs == 0) return {std::move(ensemble), std::move(record)};

  const PaceSchedule pace = PaceSchedule::make(cfg.gamma0, cfg.pace_ramp_epochs,
                                               K, cfg.epsilon_floor);
  const AlphaSchedule alpha_sched{cfg.alpha_max, cfg.alpha_ramp_epochs};
  const LrSchedule lr_sched = LrSchedule::make(cfg.base_lr, cfg.epochs);

  BatchSampler sampler(ds, cfg.seed * 0x9e3779b97f4a7c15ull + 1);
  Rng aug_rng(cfg.seed * 0xd1342543de82ef95ull + 2);
  std::vector<AdamState> adam(static_cast<std::size_t>(K));

  const int bl = cfg.batch_labeled;
  const int bu = cfg.batch_unlabeled;
  double last_sup = 0.0, last_spc = 0.0, last_reg = 0.0;

  struct ViewWork {
    std::unique_ptr<Tape> tape;
    SegNetTiny net;                // tracked student
    Tensor ce;                     // mean supervised CE over the batch
    Tensor reg;                    // mean consistency loss over the batch
    std::vector<ProbMap> preds;    // tracked unlabeled predictions (spc)
    std::vector<ProbMap> entropy_preds;  // detached, for the entropy stat
    double total_value = 0.0;
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double gamma = pace_at(pace, epoch);
    const double alpha = alpha_at(alpha_sched, epoch);
    const double lr = lr_at(lr_sched, epoch);

    double ep_sup = 0.0, ep_spc = 0.0, ep_reg = 0.0, ep_ent = 0.0;

    for (int iter = 0; iter < cfg.iters_per_epoch; ++iter) {
      const Batch batch = sampler.next(bl, bu);
      // all randomness is drawn up front, in a fixed order, so serial and
      // parallel view stepping see identical draws
      std::vector<std::vector<int>> aug_rot(static_cast<std::size_t>(K));
      std::vector<std::vector<int>> cons_rot(static_cast<std::size_t>(K));
      for (int k = 0; k < K; ++k) {
        aug_rot[static_cast<std::size_t>(k)].resize(static_cast<std::size_t>(bl));
        for (int s = 0; s < bl; ++s)
          aug_rot[static_cast<std::size_t>(k)][static_cast<std::size_t>(s)] =
              aug_rng.uniform_int(0, 3);
      }
      for (int k = 0; k < K; ++k) {
        cons_rot[static_cast<std::size_t>(k)].resize(static_cast<std::size_t>(bu));
        for (int u = 0; u < bu; ++u)
          cons_rot[static_cast<std::size_t>(k)][static_cast<std::size_t>(u)] =
              aug_rng.uniform_int(0, 3);
      }

      std::vector<ViewWork> work(static_cast<std::size_t>(K));

      // phase A: per-view forwards
      detail::run_views(K, cfg.parallel_views, [&](int k) {
        ViewWork& w = work[static_cast<std::size_t>(k)];
        w.tape = std::make_unique<Tape>();
        w.net = ensemble.students[static_cast<std::size_t>(k)].tracked(*w.tape);

        Tensor ce_sum = Tensor::scalar(0.0);
        for (int s = 0; s < bl; ++s) {
          const int idx = batch.labeled[static_cast<std::size_t>(s)];
          const Transform tau{
              aug_rot[static_cast<std::size_t>(k)][static_cast<std::size_t>(s)]};
          const Tensor x =
              apply_transform(tau, ds.images[static_cast<std::size_t>(idx)]);
          const GroundTruthMask y{apply_transform(
              tau, ds.masks[static_cast<std::size_t>(idx)].onehot)};
          ce_sum = add(ce_sum, supervised_ce(w.net.forward(x), y));
        }
        w.ce = div(ce_sum, static_cast<double>(bl));

        if (cfg.enable_spc) {
          w.preds.reserve(static_cast<std::size_t>(bu));
          for (int u = 0; u < bu; ++u) {
            const int idx = batch.unlabeled[static_cast<std::size_t>(u)];
            w.preds.push_back(
                w.net.forward(ds.images[static_cast<std::size_t>(idx)]));
          }
          for (const auto& p : w.preds)
            w.entropy_preds.push_back(ProbMap{p.values.detach()});
        }

        if (cfg.enable_consistency) {
          Tensor reg_sum = Tensor::scalar(0.0);
          for (int u = 0; u < bu; ++u) {
            const int idx = batch.unlabeled[static_cast<std::size_t>(u)];
            const Transform tau{cons_rot[static_cast<std::size_t>(k)]
                                        [static_cast<std::size_t>(u)]};
            const ProbMap teacher_pred =
                ensemble.teachers[static_cast<std::size_t>(k)].forward(
                    ds.images[static_cast<std::size_t>(idx)]);
            const ProbMap student_pred = w.net.forward(apply_transform(
                tau, ds.images[static_cast<std::size_t>(idx)]));
            reg_sum =
                add(reg_sum, consistency_loss(teacher_pred, student_pred, tau));
            if (!cfg.enable_spc)
              w.entropy_preds.push_back(ProbMap{student_pred.values.detach()});
          }
          w.reg = div(reg_sum, static_cast<double>(bu));
        } else {
          w.reg = Tensor::scalar(0.0);
        }

        if (!cfg.enable_spc && !cfg.enable_consistency) {
          for (int u = 0; u < bu; ++u) {
            const int idx = batch.unlabeled[static_cast<std::size_t>(u)];
            w.entropy_preds.push_back(
                ensemble.students[static_cast<std::size_t>(k)].forward(
                    ds.images[static_cast<std::size_t>(idx)]));
          }
        }
      });

      // barrier: exchange detached predictions, fix the self-paced weights
      std::vector<std::vector<ProbMap>> shared(static_cast<std::size_t>(bu));
      std::vector<MixtureStats> stats(static_cast<std::size_t>(bu));
      double spc_value = 0.0;
      if (cfg.enable_spc) {
        for (int u = 0; u < bu; ++u) {
          auto& views_u = shared[static_cast<std::size_t>(u)];
          views_u.reserve(static_cast<std::size_t>(K));
          for (int k = 0; k < K; ++k)
            views_u.push_back(ProbMap{work[static_cast<std::size_t>(k)]
                                          .preds[static_cast<std::size_t>(u)]
                                          .values.detach()});
          auto st = spc_statistics(views_u, gamma, cfg.epsilon_floor);
          stats[static_cast<std::size_t>(u)] = std::move(st.second);
          spc_value +=
              spc_loss_given(views_u, stats[static_cast<std::size_t>(u)], alpha)
                  .item();
        }
        spc_value /= bu;
      }

      double ent_value = 0.0;
      for (int k = 0; k < K; ++k)
        for (const auto& p : work[static_cast<std::size_t>(k)].entropy_preds)
          ent_value += detail::mean_pixel_entropy(p);
      ent_value /= static_cast<double>(K) * bu;

      // phase B: per-view loss assembly, backward, optimizer and EMA
      detail::run_views(K, cfg.parallel_views, [&](int k) {
        ViewWork& w = work[static_cast<std::size_t>(k)];
        Tensor spc_term = Tensor::scalar(0.0);
        if (cfg.enable_spc) {
          Tensor acc = Tensor::scalar(0.0);
          for (int u = 0; u < bu; ++u) {
            std::vector<ProbMap> views_u =
                shared[static_cast<std::size_t>(u)];
            views_u[static_cast<std::size_t>(k)] =
                w.preds[static_cast<std::size_t>(u)];
            acc = add(acc, spc_loss_given(
                              views_u, stats[static_cast<std::size_t>(u)],
                              alpha));
          }
          spc_term = div(acc, static_cast<double>(bu));
        }
        // the supervised and consistency sums span all K views with a 1/K
        // factor; other views' terms are constants for this tape, so only
        // this view's share is materialized
        w.total_value = w.ce.item() / K + cfg.lambda1 * spc_term.item() +
                        cfg.lambda2 * w.reg.item() / K;
        if (!std::isfinite(w.total_value)) return;  // abort handled after join
        Tensor total = total_loss(div(w.ce, static_cast<double>(K)), spc_term,
                                  div(w.reg, static_cast<double>(K)),
                                  cfg.lambda1, cfg.lambda2);

        w.tape->backward(total);
        auto& student = ensemble.students[static_cast<std::size_t>(k)];
        std::vector<Tensor*> params = student.params();
        std::vector<const std::vector<double>*> grads;
        grads.reserve(params.size());
        for (Tensor* p : params) grads.push_back(&p->grad());
        adam_step(params, grads, adam[static_cast<std::size_t>(k)], lr);

        if (cfg.enable_consistency) {
          auto& teacher = ensemble.teachers[static_cast<std::size_t>(k)];
          std::vector<Tensor*> tp = teacher.params();
          std::vector<Tensor*> sp = student.params();
          for (std::size_t i = 0; i < tp.size(); ++i)
            *tp[i] = ema_update(*tp[i], *sp[i], cfg.beta);
        }
      });

      for (int k = 0; k < K; ++k)
        if (!std::isfinite(work[static_cast<std::size_t>(k)].total_value))
          throw TrainAbort(
              "train: non-finite loss at epoch " + std::to_string(epoch) +
                  " iteration " + std::to_string(iter) + " (view " +
                  std::to_string(k) + "); last finite losses sup=" +
                  fmt_double(last_sup) + " spc=" + fmt_double(last_spc) +
                  " reg=" + fmt_double(last_reg),
              epoch, iter, last_sup, last_spc, last_reg);

      double sup_value = 0.0, reg_value = 0.0;
      for (int k = 0; k < K; ++k) {
        sup_value += work[static_cast<std::size_t>(k)].ce.item();
        reg_value += work[static_cast<std::size_t>(k)].reg.item();
      }
      sup_value /= K;
      reg_value /= K;
      last_sup = sup_value;
      last_spc = spc_value;
      last_reg = reg_value;
      ep_sup += sup_value;
      ep_spc += spc_value;
      ep_reg += reg_value;
      ep_ent += ent_value;

      // teachers must never accumulate gradients
      for (const auto& teacher : ensemble.teachers)
        for (const Tensor* p : teacher.params())
          if (p->has_grad())
            throw Error("train: teacher parameter acquired a gradient");
    }

    const EvalResult ev = evaluate(ensemble, ds, cfg.enable_consistency);
    EpochRow row;
    row.epoch = epoch;
    row.gamma = gamma;
    row.alpha = alpha;
    row.lr = lr;
    row.loss_sup = ep_sup / cfg.iters_per_epoch;
    row.loss_spc = ep_spc / cfg.iters_per_epoch;
    row.loss_reg = ep_reg / cfg.iters_per_epoch;
    row.unlabeled_entropy = ep_ent / cfg.iters_per_epoch;
    row.val_dsc = ev.mean_dsc;
    row.val_hd = ev.mean_hd;
    record.rows.push_back(row);
  }
  return {std::move(ensemble), std::move(record)};
}

// ---------------------------------------------------------------------------
// Checkpoints: one tensor-container entry per parameter plus a manifest of
// view index, role and epoch.
// ---------------------------------------------------------------------------

inline void save_checkpoint(const std::filesystem::path& dir,
                            const ViewEnsemble& ensemble, int epoch) {
  std::filesystem::create_directories(dir);
  std::vector<NamedTensor> entries;
  std::string manifest = "entry_prefix,view,role,epoch\n";
  auto add_net = [&](const SegNetTiny& net, int view, const char* role) {
    const std::string prefix =
        "v" + std::to_string(view) + "." + role + ".";
    const auto names = SegNetTiny::param_names();
    const auto params = net.params();
    for (std::size_t i = 0; i < params.size(); ++i) {
      NamedTensor t;
      t.name = prefix + names[i];
      t.dtype = Dtype::f32;
      t.dims = params[i]->shape();
      t.f32.reserve(static_cast<std::size_t>(params[i]->numel()));
      for (double v : params[i]->data())
        t.f32.push_back(static_cast<float>(v));
      entries.push_back(std::move(t));
    }
    manifest += "v" + std::to_string(view) + "." + role + "," +
                std::to_string(view) + "," + role + "," +
                std::to_string(epoch) + "\n";
  };
  for (int k = 0; k < ensemble.views; ++k) {
    add_net(ensemble.students[static_cast<std::size_t>(k)], k, "student");
    add_net(ensemble.teachers[static_cast<std::size_t>(k)], k, "teacher");
  }
  save_tensors(dir / "checkpoint.spct", entries);
  std::ofstream mf(dir / "manifest.csv", std::ios::trunc);
  if (!mf) throw IoError("cannot write " + (dir / "manifest.csv").string());
  mf << manifest;
}

inline ViewEnsemble load_checkpoint(const std::filesystem::path& dir,
                                    int views, int classes) {
  const auto entries = load_tensors(dir / "checkpoint.spct");
  auto find = [&](const std::string& name) -> const NamedTensor& {
    for (const auto& e : entries)
      if (e.name == name) return e;
    throw IoError("checkpoint missing entry " + name);
  };
  ViewEnsemble ensemble = ViewEnsemble::init(0, classes, views);
  auto fill_net = [&](SegNetTiny& net, int view, const char* role) {
    const std::string prefix =
        "v" + std::to_string(view) + "." + role + ".";
    const auto names = SegNetTiny::param_names();
    auto params = net.params();
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& e = find(prefix + names[i]);
      if (e.dims != params[i]->shape())
        throw IoError("checkpoint entry " + e.name + " has shape " +
                      shape_str(e.dims) + ", expected " +
                      shape_str(params[i]->shape()));
      std::vector<double> v(e.f32.size());
      for (std::size_t j = 0; j < v.size(); ++j)
        v[j] = static_cast<double>(e.f32[j]);
      *params[i] = Tensor::from(e.dims, std::move(v));
    }
  };
  for (int k = 0; k < views; ++k) {
    fill_net(ensemble.students[static_cast<std::size_t>(k)], k, "student");
    fill_net(ensemble.teachers[static_cast<std::size_t>(k)], k, "teacher");
  }
  return ensemble;
}

}  // namespace spct
