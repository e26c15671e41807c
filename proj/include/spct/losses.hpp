#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "spct/tensor.hpp"
#include "spct/transform.hpp"

namespace spct {

constexpr double kProbFloor = 1e-12;

/// Per-pixel categorical distribution over classes for one image.
/// values has shape [C,H,W]; every pixel's channel vector sums to 1
/// within 1e-9 with entries in [1e-12, 1].
struct ProbMap {
  Tensor values;

  int classes() const { return values.shape()[0]; }
  int height() const { return values.shape()[1]; }
  int width() const { return values.shape()[2]; }
  long long pixels() const {
    return static_cast<long long>(height()) * width();
  }

  static ProbMap from_logits(const Tensor& logits) {
    return ProbMap{softmax_channels(logits)};
  }

  /// Wrap an existing [C,H,W] tensor, checking the distribution invariants.
  static ProbMap from_values(const Tensor& v) {
    const Shape& s = v.shape();
    if (s.size() != 3)
      throw ShapeError("ProbMap: expected [C,H,W], got " + shape_str(s));
    const int c = s[0];
    const long long plane = static_cast<long long>(s[1]) * s[2];
    const auto& d = v.data();
    for (long long i = 0; i < plane; ++i) {
      double total = 0.0;
      for (int j = 0; j < c; ++j) {
        const double p = d[static_cast<std::size_t>(j * plane + i)];
        if (p < kProbFloor || p > 1.0)
          throw ValueError("ProbMap: entry " + std::to_string(p) +
                           " outside [1e-12, 1]");
        total += p;
      }
      if (std::abs(total - 1.0) > 1e-9)
        throw ValueError("ProbMap: pixel sums to " + std::to_string(total));
    }
    return ProbMap{v};
  }
};

/// One-hot ground truth, shape [C,H,W] with exactly one 1 per pixel.
struct GroundTruthMask {
  Tensor onehot;

  static GroundTruthMask from_labels(const std::vector<int>& labels,
                                     int classes, int h, int w) {
    if (static_cast<long long>(labels.size()) !=
        static_cast<long long>(h) * w)
      throw ShapeError("GroundTruthMask: label count mismatch");
    std::vector<double> v(static_cast<std::size_t>(classes) * h * w, 0.0);
    for (int i = 0; i < h * w; ++i) {
      const int c = labels[static_cast<std::size_t>(i)];
      if (c < 0 || c >= classes)
        throw ValueError("GroundTruthMask: label " + std::to_string(c) +
                         " out of range");
      v[static_cast<std::size_t>(c) * h * w + i] = 1.0;
    }
    return GroundTruthMask{Tensor::from({classes, h, w}, std::move(v))};
  }

  static GroundTruthMask from_onehot(const Tensor& t) {
    const Shape& s = t.shape();
    if (s.size() != 3)
      throw ShapeError("GroundTruthMask: expected [C,H,W], got " +
                       shape_str(s));
    const int c = s[0];
    const long long plane = static_cast<long long>(s[1]) * s[2];
    const auto& d = t.data();
    for (long long i = 0; i < plane; ++i) {
      int ones = 0;
      for (int j = 0; j < c; ++j) {
        const double v = d[static_cast<std::size_t>(j * plane + i)];
        if (v == 1.0)
          ++ones;
        else if (v != 0.0)
          throw ValueError("GroundTruthMask: non-binary entry " +
                           std::to_string(v));
      }
      if (ones != 1)
        throw ValueError("GroundTruthMask: pixel has " +
                         std::to_string(ones) + " hot classes");
    }
    return GroundTruthMask{t};
  }

  /// Per-pixel class indices (argmax of the one-hot planes).
  std::vector<int> labels() const {
    const Shape& s = onehot.shape();
    const int c = s[0];
    const long long plane = static_cast<long long>(s[1]) * s[2];
    const auto& d = onehot.data();
    std::vector<int> out(static_cast<std::size_t>(plane));
    for (long long i = 0; i < plane; ++i)
      for (int j = 0; j < c; ++j)
        if (d[static_cast<std::size_t>(j * plane + i)] == 1.0) {
          out[static_cast<std::size_t>(i)] = j;
          break;
        }
    return out;
  }
};

/// Per-pixel, per-view self-paced weights in [epsilon_floor, 1].
/// Never tape-tracked: weights are constants under differentiation.
struct WeightMap {
  int views = 0;
  int height = 0;
  int width = 0;
  double epsilon_floor = 0.0;
  std::vector<double> w;  // [K,H,W] row-major

  double at(int k, int y, int x) const {
    return w[static_cast<std::size_t>((k * height + y) * width + x)];
  }
};

/// Per-pixel view mixture weights pi (sum to 1) and total confidence
/// rho = sum_k w_k in [K*eps, K].
struct MixtureStats {
  int views = 0;
  int height = 0;
  int width = 0;
  std::vector<double> pi;   // [K,H,W]
  std::vector<double> rho;  // [H,W]
};

// ---------------------------------------------------------------------------
// Plain (non-differentiable) divergence helpers on class distributions.
// ---------------------------------------------------------------------------

/// KL(p || q) with natural log, both distributions clamped at 1e-12.
inline double kl_divergence(std::span<const double> p,
                            std::span<const double> q) {
  if (p.size() != q.size())
    throw ShapeError("kl_divergence: length mismatch " +
                     std::to_string(p.size()) + " vs " +
                     std::to_string(q.size()));
  double acc = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) {
    const double pj = std::max(p[j], kProbFloor);
    const double qj = std::max(q[j], kProbFloor);
    acc += pj * std::log(pj / qj);
  }
  return acc;
}

/// Shannon entropy -sum p ln p, in [0, ln C].
inline double entropy(std::span<const double> p) {
  double acc = 0.0;
  for (double v : p) {
    const double pv = std::max(v, kProbFloor);
    acc -= pv * std::log(pv);
  }
  return acc;
}

/// Closed-form self-paced weight: max(1 - kl/gamma, epsilon_floor).
/// Plain value, never tape-tracked.
inline double self_paced_weight(double kl_value, double gamma,
                                double epsilon_floor) {
  if (!(gamma > 0.0))
    throw ValueError("self_paced_weight: gamma must be positive, got " +
                     std::to_string(gamma));
  if (kl_value < 0.0)
    throw ValueError("self_paced_weight: negative divergence");
  return std::max(1.0 - kl_value / gamma, epsilon_floor);
}

/// Entropy-regularized generalized JSD of K distributions under mixture
/// weights pi:  H(sum_k pi_k p^k) - (1-alpha) sum_k pi_k H(p^k).
/// Straight-line value on plain vectors; oracle-friendly.
inline double jsd_alpha_value(const std::vector<std::vector<double>>& probs,
                              std::span<const double> pi, double alpha) {
  const std::size_t k = probs.size();
  if (k < 2) throw ValueError("jsd_alpha_value: need K >= 2 distributions");
  if (pi.size() != k) throw ShapeError("jsd_alpha_value: pi length mismatch");
  double pisum = 0.0;
  for (double v : pi) {
    if (!(v > 0.0)) throw ValueError("jsd_alpha_value: pi entries must be > 0");
    pisum += v;
  }
  if (std::abs(pisum - 1.0) > 1e-9)
    throw ValueError("jsd_alpha_value: pi must sum to 1");
  std::vector<double> mix(probs[0].size(), 0.0);
  double mean_h = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < mix.size(); ++j) mix[j] += pi[i] * probs[i][j];
    mean_h += pi[i] * entropy(probs[i]);
  }
  return entropy(mix) - (1.0 - alpha) * mean_h;
}

// ---------------------------------------------------------------------------
// Differentiable losses.
// ---------------------------------------------------------------------------

namespace detail {

/// -sum t*log(clamp(t)) for a [C,H,W] tensor weighted by a constant map,
/// assembled from tape ops.
inline Tensor weighted_neg_entropy_sum(const Tensor& probs,
                                       const Tensor& weight) {
  return sum(mul(weight, mul(probs, log(clamp(probs, kProbFloor, 1.0)))));
}

/// Replicate a [H,W] plane across C channels into a constant tensor.
inline Tensor replicate_channels(const std::vector<double>& plane, int c,
                                 int h, int w) {
  std::vector<double> out(static_cast<std::size_t>(c) * h * w);
  for (int j = 0; j < c; ++j)
    std::copy(plane.begin(), plane.end(),
              out.begin() + static_cast<std::ptrdiff_t>(j) * h * w);
  return Tensor::from({c, h, w}, std::move(out));
}

}  // namespace detail

/// Pixel-averaged cross-entropy of a prediction against one-hot truth:
/// -(1/|Omega|) sum_i sum_j y_ij log p_ij. Differentiable w.r.t. p.
inline Tensor supervised_ce(const ProbMap& p, const GroundTruthMask& y) {
  detail::require_same_shape(p.values, y.onehot, "supervised_ce");
  const double inv = 1.0 / static_cast<double>(p.pixels());
  return mul(neg(sum(mul(y.onehot.detach(),
                         log(clamp(p.values, kProbFloor, 1.0))))),
             inv);
}

/// Differentiable generalized JSD^alpha of K same-shape probability tensors
/// under constant mixture weights pi (one weight per view).
inline Tensor generalized_jsd_alpha(const std::vector<Tensor>& probs,
                                    std::span<const double> pi, double alpha) {
  if (probs.size() < 2)
    throw ValueError("generalized_jsd_alpha: need K >= 2 distributions");
  if (pi.size() != probs.size())
    throw ShapeError("generalized_jsd_alpha: pi length mismatch");
  double pisum = 0.0;
  for (double v : pi) {
    if (!(v > 0.0))
      throw ValueError("generalized_jsd_alpha: pi entries must be > 0");
    pisum += v;
  }
  if (std::abs(pisum - 1.0) > 1e-9)
    throw ValueError("generalized_jsd_alpha: pi must sum to 1");
  Tensor mix = mul(probs[0], pi[0]);
  for (std::size_t k = 1; k < probs.size(); ++k) {
    detail::require_same_shape(probs[0], probs[k], "generalized_jsd_alpha");
    mix = add(mix, mul(probs[k], pi[k]));
  }
  Tensor h_mix = neg(sum(mul(mix, log(clamp(mix, kProbFloor, 1.0)))));
  Tensor mean_h = Tensor::scalar(0.0);
  for (std::size_t k = 0; k < probs.size(); ++k) {
    Tensor hk =
        neg(sum(mul(probs[k], log(clamp(probs[k], kProbFloor, 1.0)))));
    mean_h = add(mean_h, mul(hk, pi[k]));
  }
  return sub(h_mix, mul(mean_h, 1.0 - alpha));
}

struct SpcResult {
  Tensor loss;  // pixel mean of rho * JSD^alpha_pi, differentiable in views
  WeightMap weights;
  MixtureStats stats;
};

/// Self-paced weights and mixture statistics for one image: each view's
/// per-pixel KL to the uniform view mixture (all views detached) feeds the
/// closed-form weight rule, then pi = w/rho, rho = sum_k w.
inline std::pair<WeightMap, MixtureStats> spc_statistics(
    const std::vector<ProbMap>& views, double gamma, double epsilon_floor) {
  const int k = static_cast<int>(views.size());
  if (k < 2) throw ValueError("spc_statistics: need K >= 2 views");
  if (!(gamma > 0.0)) throw ValueError("spc_statistics: gamma must be > 0");
  const int c = views[0].classes();
  const int h = views[0].height();
  const int w = views[0].width();
  for (const auto& v : views)
    detail::require_same_shape(views[0].values, v.values, "spc_statistics");

  const long long plane = static_cast<long long>(h) * w;
  WeightMap wm{k, h, w, epsilon_floor,
               std::vector<double>(static_cast<std::size_t>(k) * plane)};
  MixtureStats ms{k, h, w,
                  std::vector<double>(static_cast<std::size_t>(k) * plane),
                  std::vector<double>(static_cast<std::size_t>(plane))};

  std::vector<double> pk(static_cast<std::size_t>(c));
  std::vector<double> mk(static_cast<std::size_t>(c));
  for (long long i = 0; i < plane; ++i) {
    for (int j = 0; j < c; ++j) {
      double acc = 0.0;
      for (int v = 0; v < k; ++v)
        acc += views[static_cast<std::size_t>(v)].values.data()
            [static_cast<std::size_t>(j * plane + i)];
      mk[static_cast<std::size_t>(j)] = acc / k;
    }
    double rho = 0.0;
    for (int v = 0; v < k; ++v) {
      for (int j = 0; j < c; ++j)
        pk[static_cast<std::size_t>(j)] =
            views[static_cast<std::size_t>(v)].values.data()
                [static_cast<std::size_t>(j * plane + i)];
      const double kl = kl_divergence(pk, mk);
      const double wv = self_paced_weight(kl, gamma, epsilon_floor);
      wm.w[static_cast<std::size_t>(v * plane + i)] = wv;
      rho += wv;
    }
    ms.rho[static_cast<std::size_t>(i)] = rho;
    for (int v = 0; v < k; ++v)
      ms.pi[static_cast<std::size_t>(v * plane + i)] =
          wm.w[static_cast<std::size_t>(v * plane + i)] / rho;
  }
  return {std::move(wm), std::move(ms)};
}

/// Assemble the pixel-averaged rho-weighted JSD^alpha loss for one image
/// under fixed mixture statistics. Splitting H(mixture) and the per-view
/// entropies gives
///   sum_i rho_i JSD^a_pi = -sum(R .* mhat .* log mhat)
///                          + (1-a) sum_k sum(W_k .* p^k .* log p^k)
/// with mhat = sum_k pi_k p^k and all weight maps constant.
inline Tensor spc_loss_given(const std::vector<ProbMap>& views,
                             const MixtureStats& stats, double alpha) {
  const int k = static_cast<int>(views.size());
  if (k < 2) throw ValueError("spc_loss_given: need K >= 2 views");
  if (stats.views != k)
    throw ShapeError("spc_loss_given: stats built for different view count");
  const int c = views[0].classes();
  const int h = views[0].height();
  const int w = views[0].width();
  const long long plane = static_cast<long long>(h) * w;

  Tensor mhat;
  for (int v = 0; v < k; ++v) {
    std::vector<double> pi_plane(
        stats.pi.begin() + static_cast<std::ptrdiff_t>(v) * plane,
        stats.pi.begin() + static_cast<std::ptrdiff_t>(v + 1) * plane);
    Tensor pi_rep = detail::replicate_channels(pi_plane, c, h, w);
    Tensor term = mul(views[static_cast<std::size_t>(v)].values, pi_rep);
    mhat = (v == 0) ? term : add(mhat, term);
  }
  Tensor rho_rep = detail::replicate_channels(stats.rho, c, h, w);
  Tensor loss = neg(detail::weighted_neg_entropy_sum(mhat, rho_rep));
  if (alpha != 1.0) {
    Tensor acc = Tensor::scalar(0.0);
    for (int v = 0; v < k; ++v) {
      std::vector<double> w_plane(static_cast<std::size_t>(plane));
      for (long long i = 0; i < plane; ++i)
        w_plane[static_cast<std::size_t>(i)] =
            stats.pi[static_cast<std::size_t>(v * plane + i)] *
            stats.rho[static_cast<std::size_t>(i)];
      Tensor w_rep = detail::replicate_channels(w_plane, c, h, w);
      acc = add(acc, detail::weighted_neg_entropy_sum(
                         views[static_cast<std::size_t>(v)].values, w_rep));
    }
    loss = add(loss, mul(acc, 1.0 - alpha));
  }
  return div(loss, static_cast<double>(plane));
}

/// Self-paced co-training loss for one unlabeled image: computes weights on
/// detached values, then the pixel mean of rho * JSD^alpha_pi over the K
/// views. Gradients flow only into the view predictions.
inline SpcResult spc_loss(const std::vector<ProbMap>& views, double gamma,
                          double alpha, double epsilon_floor) {
  auto [wm, ms] = spc_statistics(views, gamma, epsilon_floor);
  Tensor loss = spc_loss_given(views, ms, alpha);
  return SpcResult{std::move(loss), std::move(wm), std::move(ms)};
}

/// L2 self-consistency between a teacher prediction (transformed, detached)
/// and a student prediction made on the transformed input: mean over pixels
/// and channels of (tau(teacher) - student)^2.
inline Tensor consistency_loss(const ProbMap& teacher_pred,
                               const ProbMap& student_pred,
                               const Transform& tau) {
  Tensor target = apply_transform(tau, teacher_pred.values.detach());
  if (target.shape() != student_pred.values.shape())
    throw ShapeError("consistency_loss: shape mismatch after transform, " +
                     shape_str(target.shape()) + " vs " +
                     shape_str(student_pred.values.shape()));
  Tensor d = sub(student_pred.values, target);
  return mean(mul(d, d));
}

/// Total training objective: sup + lambda1 * spc + lambda2 * reg.
inline Tensor total_loss(const Tensor& sup, const Tensor& spc,
                         const Tensor& reg, double lambda1, double lambda2) {
  for (const Tensor* t : {&sup, &spc, &reg})
    if (!std::isfinite(t->item()))
      throw NanError("total_loss: non-finite loss component");
  return add(sup, add(mul(spc, lambda1), mul(reg, lambda2)));
}

}  // namespace spct
