#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "spct/io.hpp"
#include "spct/losses.hpp"
#include "spct/model.hpp"
#include "spct/rng.hpp"
#include "spct/tensor.hpp"

namespace spct {

/// Outcome of one numerical certification check.
struct CheckResult {
  std::string name;
  long long cases = 0;
  double max_error = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

struct VerifyReport {
  std::vector<CheckResult> checks;

  bool all_pass() const {
    for (const auto& c : checks)
      if (!c.pass) return false;
    return !checks.empty();
  }

  std::string to_csv() const {
    std::string out = "name,cases,max_error,tolerance,pass\n";
    for (const auto& c : checks) {
      out += csv_field(c.name) + "," + std::to_string(c.cases) + "," +
             fmt_double(c.max_error) + "," + fmt_double(c.tolerance) + "," +
             (c.pass ? "1" : "0") + "\n";
    }
    return out;
  }
};

namespace detail {

/// Quadratic self-paced objective (gamma/2) w^2 + (kl - gamma) w.
inline double spl_objective(double w, double gamma, double kl) {
  return 0.5 * gamma * w * w + (kl - gamma) * w;
}

/// Linear-regularizer weight rule, kept only as a contrast oracle:
/// minimizing kl*w - gamma*w over [0,1] selects w = 1 iff kl <= gamma.
inline double linear_spl_weight(double kl, double gamma) {
  return kl <= gamma ? 1.0 : 0.0;
}

inline double rel_err(double a, double b, double floor_mag) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor_mag});
}

}  // namespace detail

/// Closed-form self-paced weight: dominates random probes over [0,1] and
/// satisfies stationarity (gamma*w + kl - gamma = 0) when interior.
inline CheckResult check_theorem1(std::uint64_t seed, long long cases,
                                  long long probes = 10000) {
  if (cases < 1) throw ValueError("check_theorem1: cases must be >= 1");
  Rng rng(seed);
  double worst = 0.0;
  for (long long c = 0; c < cases; ++c) {
    const double gamma = rng.uniform(0.01, 8.0);
    const double kl = rng.uniform(0.0, 10.0);
    const double w_star = std::max(1.0 - kl / gamma, 0.0);
    const double f_star = detail::spl_objective(w_star, gamma, kl);
    for (long long p = 0; p < probes; ++p) {
      const double w = rng.uniform(0.0, 1.0);
      const double gap = f_star - detail::spl_objective(w, gamma, kl);
      worst = std::max(worst, gap);  // positive gap means a probe won
    }
    if (w_star > 0.0 && w_star < 1.0)
      worst = std::max(worst, std::abs(gamma * w_star + kl - gamma));
  }
  return {"theorem1_closed_form_weights", cases, worst, 1e-9, worst <= 1e-9};
}

/// Weighted-KL / generalized-JSD identity:
/// sum_k w_k KL(p^k || yhat*) == rho * JSD_pi with yhat* = sum_k pi_k p^k.
inline CheckResult check_theorem2(std::uint64_t seed, long long cases,
                                  double epsilon_floor = 0.01) {
  if (cases < 1) throw ValueError("check_theorem2: cases must be >= 1");
  Rng rng(seed);
  const int k_choices[] = {2, 3, 5};
  const int c_choices[] = {2, 4};
  double worst = 0.0;
  for (long long n = 0; n < cases; ++n) {
    const int K = k_choices[rng.uniform_int(0, 2)];
    const int C = c_choices[rng.uniform_int(0, 1)];
    std::vector<std::vector<double>> probs;
    std::vector<double> w(static_cast<std::size_t>(K));
    double rho = 0.0;
    for (int k = 0; k < K; ++k) {
      probs.push_back(rng.simplex(C));
      w[static_cast<std::size_t>(k)] = rng.uniform(epsilon_floor, 1.0);
      rho += w[static_cast<std::size_t>(k)];
    }
    std::vector<double> pi(static_cast<std::size_t>(K));
    for (int k = 0; k < K; ++k)
      pi[static_cast<std::size_t>(k)] = w[static_cast<std::size_t>(k)] / rho;
    std::vector<double> yhat(static_cast<std::size_t>(C), 0.0);
    for (int k = 0; k < K; ++k)
      for (int j = 0; j < C; ++j)
        yhat[static_cast<std::size_t>(j)] +=
            pi[static_cast<std::size_t>(k)] *
            probs[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)];
    double lhs = 0.0;
    for (int k = 0; k < K; ++k)
      lhs += w[static_cast<std::size_t>(k)] *
             kl_divergence(probs[static_cast<std::size_t>(k)], yhat);
    const double rhs = rho * jsd_alpha_value(probs, pi, 0.0);
    worst = std::max(worst, std::abs(lhs - rhs));
  }
  return {"theorem2_weighted_kl_jsd_identity", cases, worst, 1e-9,
          worst <= 1e-9};
}

/// The confidence-weighted mixture yhat* = sum_k pi_k p^k minimizes the
/// weighted KL sum against random simplex probes.
inline CheckResult check_pseudo_label_optimality(std::uint64_t seed,
                                                 long long cases,
                                                 long long probes) {
  if (cases < 1)
    throw ValueError("check_pseudo_label_optimality: cases must be >= 1");
  if (probes < 100)
    throw ValueError("check_pseudo_label_optimality: probes must be >= 100");
  Rng rng(seed);
  double worst = 0.0;
  for (long long n = 0; n < cases; ++n) {
    const int K = rng.uniform_int(2, 5);
    const int C = rng.uniform_int(2, 4);
    std::vector<std::vector<double>> probs;
    std::vector<double> w(static_cast<std::size_t>(K));
    double rho = 0.0;
    for (int k = 0; k < K; ++k) {
      probs.push_back(rng.simplex(C));
      w[static_cast<std::size_t>(k)] = rng.uniform(0.01, 1.0);
      rho += w[static_cast<std::size_t>(k)];
    }
    std::vector<double> yhat(static_cast<std::size_t>(C), 0.0);
    for (int k = 0; k < K; ++k)
      for (int j = 0; j < C; ++j)
        yhat[static_cast<std::size_t>(j)] +=
            w[static_cast<std::size_t>(k)] / rho *
            probs[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)];
    auto weighted_kl = [&](const std::vector<double>& target) {
      double acc = 0.0;
      for (int k = 0; k < K; ++k)
        acc += w[static_cast<std::size_t>(k)] *
               kl_divergence(probs[static_cast<std::size_t>(k)], target);
      return acc;
    };
    const double f_star = weighted_kl(yhat);
    for (long long p = 0; p < probes; ++p) {
      const double gap = f_star - weighted_kl(rng.simplex(C));
      worst = std::max(worst, gap);
    }
  }
  return {"pseudo_label_optimality", cases, worst, 1e-12, worst <= 1e-12};
}

/// Two facts about the pace range: KL of a view against the pi-mixture is
/// bounded by -ln(pi_k), and JSD^alpha grows with alpha while staying
/// non-negative on the {0, 0.1, 0.5, 1.0} grid.
inline CheckResult check_bound_and_alpha(std::uint64_t seed, long long cases,
                                         double epsilon_floor = 0.01) {
  if (cases < 1) throw ValueError("check_bound_and_alpha: cases must be >= 1");
  Rng rng(seed);
  const double alphas[] = {0.0, 0.1, 0.5, 1.0};
  double worst = 0.0;
  for (long long n = 0; n < cases; ++n) {
    const int K = rng.uniform_int(2, 5);
    const int C = rng.uniform_int(2, 4);
    std::vector<std::vector<double>> probs;
    std::vector<double> w(static_cast<std::size_t>(K));
    double rho = 0.0;
    for (int k = 0; k < K; ++k) {
      probs.push_back(rng.simplex(C));
      w[static_cast<std::size_t>(k)] = rng.uniform(epsilon_floor, 1.0);
      rho += w[static_cast<std::size_t>(k)];
    }
    std::vector<double> pi(static_cast<std::size_t>(K));
    std::vector<double> mix(static_cast<std::size_t>(C), 0.0);
    for (int k = 0; k < K; ++k) {
      pi[static_cast<std::size_t>(k)] = w[static_cast<std::size_t>(k)] / rho;
      for (int j = 0; j < C; ++j)
        mix[static_cast<std::size_t>(j)] +=
            pi[static_cast<std::size_t>(k)] *
            probs[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)];
    }
    for (int k = 0; k < K; ++k) {
      const double kl = kl_divergence(probs[static_cast<std::size_t>(k)], mix);
      const double bound = -std::log(pi[static_cast<std::size_t>(k)]);
      worst = std::max(worst, kl - bound);
    }
    double prev = -1e300;
    for (double a : alphas) {
      const double v = jsd_alpha_value(probs, pi, a);
      worst = std::max(worst, prev - v);  // monotone in alpha
      worst = std::max(worst, -v);        // non-negative
      prev = v;
    }
  }
  return {"pace_bound_and_alpha_monotonicity", cases, worst, 1e-12,
          worst <= 1e-12};
}

namespace detail {

/// Max relative error between a tape gradient and central differences of
/// `eval_at`, which must evaluate the same scalar function of the flat
/// parameter vector (respecting any internal stop-gradients).
template <typename Eval>
double fd_check(const std::vector<double>& base,
                const std::vector<double>& tape_grad, Eval eval_at, double h,
                double floor_mag) {
  double worst = 0.0;
  std::vector<double> x = base;
  for (std::size_t i = 0; i < base.size(); ++i) {
    x[i] = base[i] + h;
    const double up = eval_at(x);
    x[i] = base[i] - h;
    const double dn = eval_at(x);
    x[i] = base[i];
    const double fd = (up - dn) / (2.0 * h);
    worst = std::max(worst, rel_err(tape_grad[i], fd, floor_mag));
  }
  return worst;
}

}  // namespace detail

/// Gradient certification for the supervised, self-paced and consistency
/// losses and their weighted composite on a small image, against central
/// finite differences. Also asserts the detached-weight path carries
/// exactly zero gradient. `inject_fault` flips one gradient component to
/// exercise the failure path.
inline CheckResult check_gradients(std::uint64_t seed,
                                   bool inject_fault = false) {
  Rng rng(seed);
  const int C = 2, H = 6, W = 6;
  const long long plane = static_cast<long long>(H) * W;
  const double h_step = 1e-6;
  const double floor_mag = 1e-3;
  double worst = 0.0;

  auto random_logits = [&](int c, int hh, int ww) {
    std::vector<double> v(static_cast<std::size_t>(c) * hh * ww);
    for (auto& x : v) x = rng.uniform(-2.0, 2.0);
    return v;
  };

  // supervised cross-entropy through softmax
  {
    const std::vector<double> base = random_logits(C, H, W);
    std::vector<int> labels(static_cast<std::size_t>(plane));
    for (auto& l : labels) l = rng.uniform_int(0, C - 1);
    const auto y = GroundTruthMask::from_labels(labels, C, H, W);
    auto value_at = [&](const std::vector<double>& x) {
      const ProbMap p =
          ProbMap::from_logits(Tensor::from({C, H, W}, x));
      return supervised_ce(p, y).item();
    };
    Tape tape;
    Tensor logits = tape.leaf(Tensor::from({C, H, W}, base));
    backward(supervised_ce(ProbMap::from_logits(logits), y));
    std::vector<double> g = logits.grad();
    if (inject_fault && !g.empty()) g[0] = -g[0] + 1.0;
    worst = std::max(
        worst, detail::fd_check(base, g, value_at, h_step, floor_mag));
  }

  // self-paced loss w.r.t. each view's logits, weights frozen at the base
  // point exactly as the tape sees them
  {
    const int K = 2;
    std::vector<std::vector<double>> bases;
    for (int k = 0; k < K; ++k) bases.push_back(random_logits(C, H, W));
    const double gamma = std::log(2.0 / 0.01);
    const double alpha = 0.3;

    std::vector<ProbMap> detached;
    for (int k = 0; k < K; ++k)
      detached.push_back(ProbMap::from_logits(
          Tensor::from({C, H, W}, bases[static_cast<std::size_t>(k)])));
    const auto stats =
        spc_statistics(detached, gamma, 0.01).second;

    for (int k = 0; k < K; ++k) {
      Tape tape;
      Tensor logits = tape.leaf(
          Tensor::from({C, H, W}, bases[static_cast<std::size_t>(k)]));
      std::vector<ProbMap> views = detached;
      views[static_cast<std::size_t>(k)] = ProbMap::from_logits(logits);
      backward(spc_loss_given(views, stats, alpha));
      const std::vector<double>& g = logits.grad();
      auto value_at = [&](const std::vector<double>& x) {
        std::vector<ProbMap> vs = detached;
        vs[static_cast<std::size_t>(k)] =
            ProbMap::from_logits(Tensor::from({C, H, W}, x));
        return spc_loss_given(vs, stats, alpha).item();
      };
      worst = std::max(worst,
                       detail::fd_check(bases[static_cast<std::size_t>(k)], g,
                                        value_at, h_step, floor_mag));
    }

    // detached weight path: a tape leaf feeding only the (detached) weight
    // statistics must end up with an exactly-zero gradient
    {
      Tape tape;
      Tensor logits0 = tape.leaf(
          Tensor::from({C, H, W}, bases[0]));
      Tensor w_leaf = tape.leaf(Tensor::from(
          {2, H, W}, std::vector<double>(
                         static_cast<std::size_t>(2 * plane), 0.7)));
      MixtureStats st;
      st.views = 2;
      st.height = H;
      st.width = W;
      st.pi.assign(static_cast<std::size_t>(2 * plane), 0.0);
      st.rho.assign(static_cast<std::size_t>(plane), 0.0);
      const auto& wd = w_leaf.detach().data();
      for (long long i = 0; i < plane; ++i) {
        const double w0 = wd[static_cast<std::size_t>(i)];
        const double w1 = wd[static_cast<std::size_t>(plane + i)];
        st.rho[static_cast<std::size_t>(i)] = w0 + w1;
        st.pi[static_cast<std::size_t>(i)] = w0 / (w0 + w1);
        st.pi[static_cast<std::size_t>(plane + i)] = w1 / (w0 + w1);
      }
      std::vector<ProbMap> views = {ProbMap::from_logits(logits0),
                                    detached[1]};
      backward(spc_loss_given(views, st, alpha));
      for (double gv : w_leaf.grad())
        if (gv != 0.0) worst = std::max(worst, std::abs(gv) + 1.0);
    }
  }

  // consistency loss w.r.t. the student logits
  {
    const std::vector<double> t_base = random_logits(C, H, W);
    const std::vector<double> s_base = random_logits(C, H, W);
    const ProbMap teacher =
        ProbMap::from_logits(Tensor::from({C, H, W}, t_base));
    const Transform tau{1};
    auto value_at = [&](const std::vector<double>& x) {
      const ProbMap s = ProbMap::from_logits(Tensor::from({C, H, W}, x));
      return consistency_loss(teacher, s, tau).item();
    };
    Tape tape;
    Tensor logits = tape.leaf(Tensor::from({C, H, W}, s_base));
    backward(
        consistency_loss(teacher, ProbMap::from_logits(logits), tau));
    worst = std::max(worst, detail::fd_check(s_base, logits.grad(), value_at,
                                             h_step, floor_mag));
  }

  // full composite on a 6x6 image: all three terms through two tiny nets,
  // differentiated w.r.t. every student parameter
  {
    const int K = 2;
    std::vector<double> img(static_cast<std::size_t>(plane));
    for (auto& v : img) v = rng.uniform(0.0, 1.0);
    const Tensor image = Tensor::from({1, H, W}, img);
    std::vector<int> labels(static_cast<std::size_t>(plane));
    for (auto& l : labels) l = rng.uniform_int(0, C - 1);
    const auto y = GroundTruthMask::from_labels(labels, C, H, W);
    const Transform tau{2};
    const double gamma = 1.5, alpha = 0.2, lambda1 = 0.5, lambda2 = 4.0;

    std::vector<SegNetTiny> students, teachers;
    for (int k = 0; k < K; ++k) {
      students.push_back(
          SegNetTiny::init(seed + 100 + static_cast<std::uint64_t>(k), C));
      teachers.push_back(
          SegNetTiny::init(seed + 200 + static_cast<std::uint64_t>(k), C));
    }

    // weights frozen from the base point
    std::vector<ProbMap> base_preds;
    for (int k = 0; k < K; ++k)
      base_preds.push_back(
          ProbMap{students[static_cast<std::size_t>(k)].forward(image).values});
    const auto stats = spc_statistics(base_preds, gamma, 0.01).second;

    auto flatten = [](const SegNetTiny& net) {
      std::vector<double> out;
      for (const Tensor* p : net.params())
        out.insert(out.end(), p->data().begin(), p->data().end());
      return out;
    };
    auto unflatten = [&](SegNetTiny net, const std::vector<double>& flat) {
      std::size_t pos = 0;
      for (Tensor* p : net.params()) {
        const auto n = static_cast<std::size_t>(p->numel());
        *p = Tensor::from(p->shape(),
                          std::vector<double>(flat.begin() + pos,
                                              flat.begin() + pos + n));
        pos += n;
      }
      return net;
    };

    for (int k = 0; k < K; ++k) {
      auto composite = [&](const SegNetTiny& net_k, Tape* tape) {
        std::vector<ProbMap> views = base_preds;
        const SegNetTiny net =
            tape ? net_k.tracked(*tape) : net_k;
        const ProbMap lab_pred = net.forward(image);
        views[static_cast<std::size_t>(k)] = net.forward(image);
        Tensor sup = supervised_ce(lab_pred, y);
        Tensor spc = spc_loss_given(views, stats, alpha);
        const ProbMap teacher_pred =
            teachers[static_cast<std::size_t>(k)].forward(image);
        const ProbMap student_t =
            ProbMap{net.forward(apply_transform(tau, image)).values};
        Tensor reg = consistency_loss(teacher_pred, student_t, tau);
        return total_loss(sup, spc, reg, lambda1, lambda2);
      };

      const std::vector<double> base =
          flatten(students[static_cast<std::size_t>(k)]);
      Tape tape;
      Tensor total = composite(students[static_cast<std::size_t>(k)], &tape);
      tape.backward(total);
      std::vector<double> g;
      for (const Tensor* p :
           students[static_cast<std::size_t>(k)].params())
        g.insert(g.end(), p->grad().begin(), p->grad().end());
      auto value_at = [&](const std::vector<double>& flat) {
        return composite(
                   unflatten(students[static_cast<std::size_t>(k)], flat),
                   nullptr)
            .item();
      };
      worst = std::max(
          worst, detail::fd_check(base, g, value_at, h_step, floor_mag));
    }
  }

  return {"gradient_certification", 4, worst, 1e-4, worst <= 1e-4};
}

/// Full certification battery.
inline VerifyReport run_all_checks(std::uint64_t seed, long long cases,
                                   long long probes = 1000,
                                   bool inject_gradient_fault = false) {
  VerifyReport report;
  report.checks.push_back(check_theorem1(seed, cases));
  report.checks.push_back(check_theorem2(seed + 1, cases));
  report.checks.push_back(check_pseudo_label_optimality(
      seed + 2, std::max<long long>(1, cases / 5), probes));
  report.checks.push_back(check_bound_and_alpha(seed + 3, cases));
  report.checks.push_back(check_gradients(seed + 4, inject_gradient_fault));
  return report;
}

inline void write_verify_csv(const std::filesystem::path& path,
                             const VerifyReport& report) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << report.to_csv();
}

}  // namespace spct
