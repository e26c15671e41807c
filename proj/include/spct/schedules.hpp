#pragma once

#include <cmath>
#include <vector>

#include "spct/errors.hpp"
#include "spct/tensor.hpp"

namespace spct {

/// Geometric ramp of the learning pace from gamma0 to the useful ceiling
/// ln(K/epsilon), reached after epochs_to_ceiling epochs and capped there.
struct PaceSchedule {
  double gamma0 = 0.2;
  int epochs_to_ceiling = 50;
  double ceiling = 0.0;  // ln(K / epsilon_floor)

  static PaceSchedule make(double gamma0, int epochs_to_ceiling, int views,
                           double epsilon_floor) {
    if (!(gamma0 > 0.0)) throw ValueError("PaceSchedule: gamma0 must be > 0");
    if (epochs_to_ceiling < 1)
      throw ValueError("PaceSchedule: ramp must span at least one epoch");
    PaceSchedule s;
    s.gamma0 = gamma0;
    s.epochs_to_ceiling = epochs_to_ceiling;
    s.ceiling = std::log(static_cast<double>(views) / epsilon_floor);
    return s;
  }

  double increase_factor() const {
    return std::pow(ceiling / gamma0, 1.0 / epochs_to_ceiling);
  }
};

inline double pace_at(const PaceSchedule& s, int epoch) {
  if (epoch < 0) throw ValueError("pace_at: negative epoch");
  if (s.gamma0 >= s.ceiling) return s.ceiling;
  const double v =
      s.gamma0 * std::pow(s.ceiling / s.gamma0,
                          static_cast<double>(epoch) / s.epochs_to_ceiling);
  return std::min(v, s.ceiling);
}

/// Linear ramp of the entropy-regularization coefficient from 0 to
/// alpha_max over ramp_epochs, constant after.
struct AlphaSchedule {
  double alpha_max = 1e-4;
  int ramp_epochs = 50;
};

inline double alpha_at(const AlphaSchedule& s, int epoch) {
  if (epoch < 0) throw ValueError("alpha_at: negative epoch");
  if (s.ramp_epochs <= 0 || epoch >= s.ramp_epochs) return s.alpha_max;
  return s.alpha_max * static_cast<double>(epoch) / s.ramp_epochs;
}

/// Learning rate: linear warm-up from base_lr/300 to base_lr over the first
/// tenth of training, then cosine decay toward 0 at the final epoch.
struct LrSchedule {
  double base_lr = 0.0;
  int warmup_epochs = 0;
  int total_epochs = 0;

  static LrSchedule make(double base_lr, int total_epochs) {
    LrSchedule s;
    s.base_lr = base_lr;
    s.total_epochs = total_epochs;
    s.warmup_epochs = std::max(1, total_epochs / 10);
    return s;
  }
};

inline double lr_at(const LrSchedule& s, int epoch) {
  if (epoch < 0 || epoch >= s.total_epochs)
    throw ValueError("lr_at: epoch " + std::to_string(epoch) +
                     " outside [0, " + std::to_string(s.total_epochs) + ")");
  if (epoch < s.warmup_epochs) {
    const double lo = s.base_lr / 300.0;
    return lo + (s.base_lr - lo) * static_cast<double>(epoch) /
                    s.warmup_epochs;
  }
  const int span = s.total_epochs - s.warmup_epochs;
  if (span <= 0) return s.base_lr;
  const double t = static_cast<double>(epoch - s.warmup_epochs) / span;
  return s.base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

struct EmaConfig {
  double beta = 0.99;
};

/// theta_T <- beta * theta_T + (1 - beta) * theta_S, elementwise, no
/// gradient tracking. Returns a fresh untracked tensor.
inline Tensor ema_update(const Tensor& teacher, const Tensor& student,
                         double beta) {
  if (teacher.shape() != student.shape())
    throw ShapeError("ema_update: shape mismatch " +
                     shape_str(teacher.shape()) + " vs " +
                     shape_str(student.shape()));
  if (!(beta >= 0.0 && beta < 1.0))
    throw ValueError("ema_update: beta must be in [0, 1)");
  const auto n = static_cast<std::size_t>(teacher.numel());
  std::vector<double> out(n);
  const auto& tv = teacher.data();
  const auto& sv = student.data();
  for (std::size_t i = 0; i < n; ++i)
    out[i] = beta * tv[i] + (1.0 - beta) * sv[i];
  return Tensor::from(teacher.shape(), std::move(out));
}

}  // namespace spct
