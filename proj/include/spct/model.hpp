#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "spct/losses.hpp"
#include "spct/rng.hpp"
#include "spct/tensor.hpp"
#include "spct/transform.hpp"

namespace spct {

/// Minimal fixed segmentation network:
///   conv3x3(1->8) + relu -> conv3x3(8->8) + relu -> conv1x1(8->C) -> softmax.
/// Spatial size is preserved; parameter count depends only on C.
struct SegNetTiny {
  static constexpr int kHidden = 8;

  int classes = 2;
  Tensor w1, b1, w2, b2, w3, b3;

  static SegNetTiny init(std::uint64_t seed, int classes) {
    SegNetTiny net;
    net.classes = classes;
    Rng rng(seed);
    net.w1 = he_uniform(rng, {kHidden, 1, 3, 3}, 1 * 3 * 3);
    net.b1 = Tensor::zeros({kHidden});
    net.w2 = he_uniform(rng, {kHidden, kHidden, 3, 3}, kHidden * 3 * 3);
    net.b2 = Tensor::zeros({kHidden});
    net.w3 = he_uniform(rng, {classes, kHidden, 1, 1}, kHidden);
    net.b3 = Tensor::zeros({classes});
    return net;
  }

  std::vector<Tensor*> params() { return {&w1, &b1, &w2, &b2, &w3, &b3}; }
  std::vector<const Tensor*> params() const {
    return {&w1, &b1, &w2, &b2, &w3, &b3};
  }
  static std::vector<std::string> param_names() {
    return {"w1", "b1", "w2", "b2", "w3", "b3"};
  }

  /// Copy whose parameters are registered as leaves on `tape`. Payloads are
  /// shared, so gradients land in this net's tensors after backward().
  SegNetTiny tracked(Tape& tape) const {
    SegNetTiny t = *this;
    t.w1 = tape.leaf(w1);
    t.b1 = tape.leaf(b1);
    t.w2 = tape.leaf(w2);
    t.b2 = tape.leaf(b2);
    t.w3 = tape.leaf(w3);
    t.b3 = tape.leaf(b3);
    return t;
  }

  /// Deep copy of all parameter values.
  SegNetTiny clone() const {
    SegNetTiny c;
    c.classes = classes;
    c.w1 = w1.clone();
    c.b1 = b1.clone();
    c.w2 = w2.clone();
    c.b2 = b2.clone();
    c.w3 = w3.clone();
    c.b3 = b3.clone();
    return c;
  }

  ProbMap forward(const Tensor& image) const {
    Tensor h1 = relu(conv2d(image, w1, b1));
    Tensor h2 = relu(conv2d(h1, w2, b2));
    return ProbMap::from_logits(conv2d(h2, w3, b3));
  }

 private:
  static Tensor he_uniform(Rng& rng, Shape shape, int fan_in) {
    const double bound = std::sqrt(6.0 / fan_in);
    auto n = static_cast<std::size_t>(numel_of(shape));
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(-bound, bound);
    return Tensor::from(std::move(shape), std::move(v));
  }
};

/// K co-trained views, each a student/teacher pair. Teachers start as exact
/// copies of their students and are only ever moved by EMA updates.
struct ViewEnsemble {
  int views = 0;
  int classes = 2;
  std::vector<SegNetTiny> students;
  std::vector<SegNetTiny> teachers;

  static ViewEnsemble init(std::uint64_t seed, int classes, int views) {
    if (views < 1) throw ValueError("ViewEnsemble: need K >= 1 views");
    ViewEnsemble e;
    e.views = views;
    e.classes = classes;
    e.students.reserve(static_cast<std::size_t>(views));
    e.teachers.reserve(static_cast<std::size_t>(views));
    for (int k = 0; k < views; ++k) {
      e.students.push_back(
          SegNetTiny::init(seed + static_cast<std::uint64_t>(k), classes));
      e.teachers.push_back(e.students.back().clone());
    }
    return e;
  }
};

/// Elementwise mean of K probability maps; stays on the simplex.
inline ProbMap soft_vote(const std::vector<ProbMap>& preds) {
  if (preds.empty()) throw ValueError("soft_vote: empty prediction list");
  if (preds.size() == 1) return preds[0];
  for (const auto& p : preds)
    detail::require_same_shape(preds[0].values, p.values, "soft_vote");
  const auto n = static_cast<std::size_t>(preds[0].values.numel());
  std::vector<double> out(n, 0.0);
  for (const auto& p : preds) {
    const auto& d = p.values.data();
    for (std::size_t i = 0; i < n; ++i) out[i] += d[i];
  }
  const double inv = 1.0 / static_cast<double>(preds.size());
  for (auto& v : out) v *= inv;
  return ProbMap{Tensor::from(preds[0].values.shape(), std::move(out))};
}

/// Per-pixel argmax of a probability map; ties break to the lowest class.
inline std::vector<int> argmax_classes(const ProbMap& p) {
  const int c = p.classes();
  const long long plane = p.pixels();
  const auto& d = p.values.data();
  std::vector<int> out(static_cast<std::size_t>(plane));
  for (long long i = 0; i < plane; ++i) {
    int best = 0;
    double bv = d[static_cast<std::size_t>(i)];
    for (int j = 1; j < c; ++j) {
      const double v = d[static_cast<std::size_t>(j * plane + i)];
      if (v > bv) {
        bv = v;
        best = j;
      }
    }
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

}  // namespace spct
