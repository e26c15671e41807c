#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "spct/errors.hpp"

namespace spct {

using Shape = std::vector<int>;

inline long long numel_of(const Shape& s) {
  long long n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

class Tape;

/// Dense 64-bit real tensor, row-major. Value semantics: copies share an
/// immutable payload. A tensor is "tracked" when it refers to a node on a
/// gradient tape; untracked tensors act as constants under differentiation.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> data) {
    if (numel_of(shape) != static_cast<long long>(data.size()))
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    Tensor t;
    t.p_ = std::make_shared<Payload>();
    t.p_->shape = std::move(shape);
    t.p_->data = std::move(data);
    return t;
  }

  static Tensor zeros(Shape shape) {
    auto n = static_cast<std::size_t>(numel_of(shape));
    return from(std::move(shape), std::vector<double>(n, 0.0));
  }

  static Tensor full(Shape shape, double v) {
    auto n = static_cast<std::size_t>(numel_of(shape));
    return from(std::move(shape), std::vector<double>(n, v));
  }

  static Tensor scalar(double v) { return from({}, {v}); }

  bool defined() const { return p_ != nullptr; }
  const Shape& shape() const { return p_->shape; }
  long long numel() const { return static_cast<long long>(p_->data.size()); }
  const std::vector<double>& data() const { return p_->data; }

  /// Value of a scalar (rank-0 or single-element) tensor.
  double item() const {
    if (numel() != 1)
      throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
    return p_->data[0];
  }

  double at(std::initializer_list<int> idx) const {
    const Shape& s = shape();
    if (idx.size() != s.size())
      throw ShapeError("index rank mismatch for " + shape_str(s));
    long long flat = 0;
    std::size_t d = 0;
    for (int i : idx) {
      flat = flat * s[d] + i;
      ++d;
    }
    return p_->data[static_cast<std::size_t>(flat)];
  }

  bool tracked() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int node() const { return node_; }

  /// Same payload, no tape reference.
  Tensor detach() const {
    Tensor t;
    t.p_ = p_;
    return t;
  }

  /// Deep copy of the values (fresh payload, no grad sink, untracked).
  Tensor clone() const { return from(p_->shape, p_->data); }

  bool has_grad() const { return p_ && p_->grad != nullptr; }

  /// Gradient buffer populated by the last backward() in which this tensor
  /// was registered as a tape leaf.
  const std::vector<double>& grad() const {
    if (!has_grad())
      throw Error("tensor has no gradient (not registered as a tape leaf)");
    return *p_->grad;
  }

 private:
  struct Payload {
    Shape shape;
    std::vector<double> data;
    std::shared_ptr<std::vector<double>> grad;  // leaf gradient sink
  };
  std::shared_ptr<Payload> p_;
  Tape* tape_ = nullptr;
  int node_ = -1;

  friend class Tape;
  friend struct OpAccess;
};

/// Reverse-mode gradient tape. Append-only node list rebuilt on every
/// forward pass; single-threaded, not shareable. Concurrent training code
/// uses one tape per thread.
class Tape {
 public:
  using BackFn = std::function<void(const std::vector<double>&, Tape&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Register `t` as a differentiable leaf. Creates (or re-zeroes) the
  /// gradient sink shared with `t`'s payload; backward() accumulates into it.
  Tensor leaf(const Tensor& t) {
    require_recording();
    auto n = static_cast<std::size_t>(t.numel());
    if (!t.p_->grad)
      t.p_->grad = std::make_shared<std::vector<double>>(n, 0.0);
    else
      t.p_->grad->assign(n, 0.0);
    Tensor out;
    out.p_ = t.p_;
    out.tape_ = this;
    out.node_ = add_node("leaf", {}, nullptr, t.p_->grad);
    return out;
  }

  /// Run reverse accumulation from a scalar loss. Visits nodes exactly once
  /// in reverse creation order, deposits leaf gradients into their sinks,
  /// then clears the tape. A second backward on the same tape is an error.
  void backward(const Tensor& loss) {
    require_recording();
    if (!loss.tracked() || loss.tape_ != this)
      throw Error("backward: loss is not recorded on this tape");
    if (loss.numel() != 1)
      throw ShapeError("backward: loss must be scalar, got " +
                       shape_str(loss.shape()));
    grads_.assign(nodes_.size(), {});
    grads_[static_cast<std::size_t>(loss.node_)] = {1.0};
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
      auto& g = grads_[static_cast<std::size_t>(i)];
      if (g.empty()) continue;  // not reachable from the loss
      Node& node = nodes_[static_cast<std::size_t>(i)];
      if (node.sink) {
        for (std::size_t j = 0; j < g.size(); ++j) (*node.sink)[j] += g[j];
      } else if (node.back) {
        node.back(g, *this);
      }
      g.clear();
      g.shrink_to_fit();
    }
    done_ = true;
    nodes_.clear();
    grads_.clear();
  }

  bool done() const { return done_; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient accumulator for node `id`, zero-initialized on first touch.
  /// Only meaningful inside backward().
  std::vector<double>& acc(int id, std::size_t n) {
    auto& g = grads_[static_cast<std::size_t>(id)];
    if (g.empty()) g.assign(n, 0.0);
    return g;
  }

  int add_node(const char* op, std::initializer_list<int> parents, BackFn back,
               std::shared_ptr<std::vector<double>> sink = nullptr) {
    require_recording();
    const int id = static_cast<int>(nodes_.size());
    for (int p : parents)
      if (p >= id)
        throw Error("tape node order violated");  // inputs must precede
    nodes_.push_back(Node{op, std::move(back), std::move(sink)});
    return id;
  }

 private:
  struct Node {
    const char* op;
    BackFn back;                                // null for leaves
    std::shared_ptr<std::vector<double>> sink;  // non-null for leaves
  };

  void require_recording() const {
    if (done_) throw Error("tape already consumed by backward()");
  }

  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  bool done_ = false;
};

/// Internal accessor for op implementations.
struct OpAccess {
  static Tensor make(Shape shape, std::vector<double> data, Tape* tape,
                     int node) {
    Tensor t = Tensor::from(std::move(shape), std::move(data));
    t.tape_ = tape;
    t.node_ = node;
    return t;
  }
  static std::shared_ptr<const std::vector<double>> values(const Tensor& t) {
    return {t.p_, &t.p_->data};
  }
};

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b,
                               const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline Tape* merge_tape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.tracked() && b.tracked() && a.tape() != b.tape())
    throw Error(std::string(op) + ": operands recorded on different tapes");
  return a.tracked() ? a.tape() : b.tape();
}

/// Unary op scaffold: computes the output values and, when tracked,
/// records a node with the given backward closure.
template <typename Fwd, typename MakeBack>
Tensor unary_record(const char* op, const Tensor& a, Fwd fwd,
                    MakeBack make_back) {
  const auto n = static_cast<std::size_t>(a.numel());
  std::vector<double> out(n);
  const double* av = a.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i]);
  if (!a.tracked()) return Tensor::from(a.shape(), std::move(out));
  Tape* tp = a.tape();
  const int id = tp->add_node(op, {a.node()}, make_back(out));
  return OpAccess::make(a.shape(), std::move(out), tp, id);
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  const auto n = static_cast<std::size_t>(a.numel());
  std::vector<double> out(n);
  const double* av = a.data().data();
  const double* bv = b.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + bv[i];
  Tape* tp = detail::merge_tape(a, b, "add");
  if (!tp) return Tensor::from(a.shape(), std::move(out));
  const int an = a.tracked() ? a.node() : -1;
  const int bn = b.tracked() ? b.node() : -1;
  const int id = tp->add_node(
      "add", {std::max(an, -1), std::max(bn, -1)},
      [an, bn, n](const std::vector<double>& g, Tape& t) {
        const double* gp = g.data();
        if (an >= 0) {
          double* d = t.acc(an, n).data();
          for (std::size_t i = 0; i < n; ++i) d[i] += gp[i];
        }
        if (bn >= 0) {
          double* d = t.acc(bn, n).data();
          for (std::size_t i = 0; i < n; ++i) d[i] += gp[i];
        }
      });
  return OpAccess::make(a.shape(), std::move(out), tp, id);
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  const auto n = static_cast<std::size_t>(a.numel());
  std::vector<double> out(n);
  const double* av = a.data().data();
  const double* bv = b.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] - bv[i];
  Tape* tp = detail::merge_tape(a, b, "sub");
  if (!tp) return Tensor::from(a.shape(), std::move(out));
  const int an = a.tracked() ? a.node() : -1;
  const int bn = b.tracked() ? b.node() : -1;
  const int id = tp->add_node(
      "sub", {std::max(an, -1), std::max(bn, -1)},
      [an, bn, n](const std::vector<double>& g, Tape& t) {
        const double* gp = g.data();
        if (an >= 0) {
          double* d = t.acc(an, n).data();
          for (std::size_t i = 0; i < n; ++i) d[i] += gp[i];
        }
        if (bn >= 0) {
          double* d = t.acc(bn, n).data();
          for (std::size_t i = 0; i < n; ++i) d[i] -= gp[i];
        }
      });
  return OpAccess::make(a.shape(), std::move(out), tp, id);
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  const auto n = static_cast<std::size_t>(a.numel());
  std::vector<double> out(n);
  const double* av = a.data().data();
  const double* bv = b.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * bv[i];
  Tape* tp = detail::merge_tape(a, b, "mul");
  if (!tp) return Tensor::from(a.shape(), std::move(out));
  const int an = a.tracked() ? a.node() : -1;
  const int bn = b.tracked() ? b.node() : -1;
  auto ap = OpAccess::values(a);
  auto bp = OpAccess::values(b);
  const int id = tp->add_node(
      "mul", {std::max(an, -1), std::max(bn, -1)},
      [an, bn, ap, bp, n](const std::vector<double>& g, Tape& t) {
        const double* gp = g.data();
        if (an >= 0) {
          const double* bb = bp->data();
          double* d = t.acc(an, n).data();
          for (std::size_t i = 0; i < n; ++i) d[i] += gp[i] * bb[i];
        }
        if (bn >= 0) {
          const double* aa = ap->data();
          double* d = t.acc(bn, n).data();
          for (std::size_t i = 0; i < n; ++i) d[i] += gp[i] * aa[i];
        }
      });
  return OpAccess::make(a.shape(), std::move(out), tp, id);
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "div");
  const auto n = static_cast<std::size_t>(a.numel());
  std::vector<double> out(n);
  const double* av = a.data().data();
  const double* bv = b.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] / bv[i];
  Tape* tp = detail::merge_tape(a, b, "div");
  if (!tp) return Tensor::from(a.shape(), std::move(out));
  const int an = a.tracked() ? a.node() : -1;
  const int bn = b.tracked() ? b.node() : -1;
  auto ap = OpAccess::values(a);
  auto bp = OpAccess::values(b);
  const int id = tp->add_node(
      "div", {std::max(an, -1), std::max(bn, -1)},
      [an, bn, ap, bp, n](const std::vector<double>& g, Tape& t) {
        const double* gp = g.data();
        const double* bb = bp->data();
        if (an >= 0) {
          double* d = t.acc(an, n).data();
          for (std::size_t i = 0; i < n; ++i) d[i] += gp[i] / bb[i];
        }
        if (bn >= 0) {
          const double* aa = ap->data();
          double* d = t.acc(bn, n).data();
          for (std::size_t i = 0; i < n; ++i)
            d[i] -= gp[i] * aa[i] / (bb[i] * bb[i]);
        }
      });
  return OpAccess::make(a.shape(), std::move(out), tp, id);
}

inline Tensor neg(const Tensor& a) {
  const auto n = static_cast<std::size_t>(a.numel());
  return detail::unary_record(
      "neg", a, [](double x) { return -x; },
      [n, an = a.tracked() ? a.node() : -1](const std::vector<double>&) {
        return [an, n](const std::vector<double>& g, Tape& t) {
          const double* gp = g.data();
          double* d = t.acc(an, n).data();
          for (std::size_t i = 0; i < n; ++i) d[i] -= gp[i];
        };
      });
}

/// Natural log. Guards against non-clamped zeros: callers must clamp
/// probabilities to >= 1e-12 first.
inline Tensor log(const Tensor& a) {
  for (double x : a.data())
    if (!(x > 0.0))
      throw NanError("log: input not positive (" + std::to_string(x) +
                     "); clamp before taking logs");
  const auto n = static_cast<std::size_t>(a.numel());
  auto ap = OpAccess::values(a);
  return detail::unary_record(
      "log", a, [](double x) { return std::log(x); },
      [n, ap, an = a.tracked() ? a.node() : -1](const std::vector<double>&) {
        return [an, ap, n](const std::vector<double>& g, Tape& t) {
          const double* gp = g.data();
          const double* x = ap->data();
          double* d = t.acc(an, n).data();
          for (std::size_t i = 0; i < n; ++i) d[i] += gp[i] / x[i];
        };
      });
}

inline Tensor exp(const Tensor& a) {
  const auto n = static_cast<std::size_t>(a.numel());
  return detail::unary_record(
      "exp", a, [](double x) { return std::exp(x); },
      [n, an = a.tracked() ? a.node() : -1](const std::vector<double>& out) {
        auto yp = std::make_shared<std::vector<double>>(out);
        return [an, yp, n](const std::vector<double>& g, Tape& t) {
          const double* gp = g.data();
          const double* y = yp->data();
          double* d = t.acc(an, n).data();
          for (std::size_t i = 0; i < n; ++i) d[i] += gp[i] * y[i];
        };
      });
}

inline Tensor relu(const Tensor& a) {
  const auto n = static_cast<std::size_t>(a.numel());
  auto ap = OpAccess::values(a);
  return detail::unary_record(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [n, ap, an = a.tracked() ? a.node() : -1](const std::vector<double>&) {
        return [an, ap, n](const std::vector<double>& g, Tape& t) {
          const double* gp = g.data();
          const double* x = ap->data();
          double* d = t.acc(an, n).data();
          for (std::size_t i = 0; i < n; ++i)
            d[i] += x[i] > 0.0 ? gp[i] : 0.0;
        };
      });
}

inline Tensor clamp(const Tensor& a, double lo, double hi) {
  if (!(lo <= hi)) throw ValueError("clamp: lo > hi");
  const auto n = static_cast<std::size_t>(a.numel());
  auto ap = OpAccess::values(a);
  return detail::unary_record(
      "clamp", a,
      [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
      [n, ap, lo, hi,
       an = a.tracked() ? a.node() : -1](const std::vector<double>&) {
        return [an, ap, lo, hi, n](const std::vector<double>& g, Tape& t) {
          const double* gp = g.data();
          const double* x = ap->data();
          double* d = t.acc(an, n).data();
          for (std::size_t i = 0; i < n; ++i)
            d[i] += (x[i] >= lo && x[i] <= hi) ? gp[i] : 0.0;
        };
      });
}

inline Tensor add(const Tensor& a, double s) {
  const auto n = static_cast<std::size_t>(a.numel());
  return detail::unary_record(
      "add_s", a, [s](double x) { return x + s; },
      [n, an = a.tracked() ? a.node() : -1](const std::vector<double>&) {
        return [an, n](const std::vector<double>& g, Tape& t) {
          const double* gp = g.data();
          double* d = t.acc(an, n).data();
          for (std::size_t i = 0; i < n; ++i) d[i] += gp[i];
        };
      });
}

inline Tensor mul(const Tensor& a, double s) {
  const auto n = static_cast<std::size_t>(a.numel());
  return detail::unary_record(
      "mul_s", a, [s](double x) { return x * s; },
      [n, s, an = a.tracked() ? a.node() : -1](const std::vector<double>&) {
        return [an, s, n](const std::vector<double>& g, Tape& t) {
          const double* gp = g.data();
          double* d = t.acc(an, n).data();
          for (std::size_t i = 0; i < n; ++i) d[i] += gp[i] * s;
        };
      });
}

inline Tensor sub(const Tensor& a, double s) { return add(a, -s); }
inline Tensor sub(double s, const Tensor& a) { return add(neg(a), s); }
inline Tensor div(const Tensor& a, double s) { return mul(a, 1.0 / s); }

inline Tensor div(double s, const Tensor& a) {
  const auto n = static_cast<std::size_t>(a.numel());
  auto ap = OpAccess::values(a);
  return detail::unary_record(
      "rdiv_s", a, [s](double x) { return s / x; },
      [n, ap, s, an = a.tracked() ? a.node() : -1](const std::vector<double>&) {
        return [an, ap, s, n](const std::vector<double>& g, Tape& t) {
          const double* gp = g.data();
          const double* x = ap->data();
          double* d = t.acc(an, n).data();
          for (std::size_t i = 0; i < n; ++i)
            d[i] -= gp[i] * s / (x[i] * x[i]);
        };
      });
}

/// Sum of all elements -> scalar.
inline Tensor sum(const Tensor& a) {
  const auto n = static_cast<std::size_t>(a.numel());
  const auto& av = a.data();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += av[i];
  if (!a.tracked()) return Tensor::scalar(total);
  Tape* tp = a.tape();
  const int an = a.node();
  const int id =
      tp->add_node("sum", {an}, [an, n](const std::vector<double>& g, Tape& t) {
        const double g0 = g[0];
        double* d = t.acc(an, n).data();
        for (std::size_t i = 0; i < n; ++i) d[i] += g0;
      });
  return OpAccess::make({}, {total}, tp, id);
}

/// Mean of all elements -> scalar.
inline Tensor mean(const Tensor& a) {
  return div(sum(a), static_cast<double>(a.numel()));
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double s) { return add(a, s); }
inline Tensor operator+(double s, const Tensor& a) { return add(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return sub(a, s); }
inline Tensor operator-(double s, const Tensor& a) { return sub(s, a); }
inline Tensor operator*(const Tensor& a, double s) { return mul(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul(a, s); }
inline Tensor operator/(const Tensor& a, double s) { return div(a, s); }
inline Tensor operator/(double s, const Tensor& a) { return div(s, a); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

namespace detail {

/// Shift-and-accumulate cross-correlation core shared by the forward pass
/// and the input-gradient pass. For every kernel tap, adds
/// w * src[shifted window] into dst over the valid region.
inline void conv_tap_axpy(double w, const double* src, double* dst, int h,
                          int w_img, int dy, int dx) {
  const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
  const int x0 = std::max(0, -dx), x1 = std::min(w_img, w_img - dx);
  for (int y = y0; y < y1; ++y) {
    const double* s = src + (y + dy) * w_img + (x0 + dx);
    double* d = dst + y * w_img + x0;
    for (int x = x0; x < x1; ++x) d[x - x0] += w * s[x - x0];
  }
}

/// Correlation of two planes under a tap shift: sum_y,x a[y+dy, x+dx] * b[y, x].
inline double conv_tap_dot(const double* a, const double* b, int h, int w_img,
                           int dy, int dx) {
  const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
  const int x0 = std::max(0, -dx), x1 = std::min(w_img, w_img - dx);
  double acc = 0.0;
  for (int y = y0; y < y1; ++y) {
    const double* pa = a + (y + dy) * w_img + (x0 + dx);
    const double* pb = b + y * w_img + x0;
    for (int x = x0; x < x1; ++x) acc += pa[x - x0] * pb[x - x0];
  }
  return acc;
}

}  // namespace detail

/// 2-D cross-correlation with zero padding (k odd, spatial size preserved).
/// input [Cin,H,W], kernel [Cout,Cin,k,k], bias [Cout] -> [Cout,H,W].
/// Gradients flow to input, kernel and bias.
inline Tensor conv2d(const Tensor& input, const Tensor& kernel,
                     const Tensor& bias) {
  const Shape& is = input.shape();
  const Shape& ks = kernel.shape();
  const Shape& bs = bias.shape();
  if (is.size() != 3 || ks.size() != 4 || bs.size() != 1)
    throw ShapeError("conv2d: expected input [Cin,H,W], kernel [Cout,Cin,k,k],"
                     " bias [Cout]; got " +
                     shape_str(is) + ", " + shape_str(ks) + ", " +
                     shape_str(bs));
  const int cin = is[0], h = is[1], w = is[2];
  const int cout = ks[0], k = ks[2];
  if (ks[1] != cin)
    throw ShapeError("conv2d: channel mismatch, input has " +
                     std::to_string(cin) + " channels, kernel expects " +
                     std::to_string(ks[1]));
  if (ks[3] != k || k % 2 == 0)
    throw ShapeError("conv2d: kernel must be square with odd size, got " +
                     shape_str(ks));
  if (bs[0] != cout)
    throw ShapeError("conv2d: bias size " + std::to_string(bs[0]) +
                     " does not match " + std::to_string(cout) + " filters");
  const int pad = (k - 1) / 2;
  const int plane = h * w;

  std::vector<double> out(static_cast<std::size_t>(cout) * plane);
  const double* in = input.data().data();
  const double* ker = kernel.data().data();
  const double* bi = bias.data().data();
  for (int co = 0; co < cout; ++co) {
    double* dst = out.data() + co * plane;
    std::fill(dst, dst + plane, bi[co]);
    for (int ci = 0; ci < cin; ++ci) {
      const double* src = in + ci * plane;
      const double* kk = ker + (co * cin + ci) * k * k;
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx)
          detail::conv_tap_axpy(kk[ky * k + kx], src, dst, h, w, ky - pad,
                                kx - pad);
    }
  }

  Tape* tp = input.tracked() ? input.tape()
             : kernel.tracked() ? kernel.tape()
             : bias.tracked() ? bias.tape()
                              : nullptr;
  if ((input.tracked() && input.tape() != tp) ||
      (kernel.tracked() && kernel.tape() != tp) ||
      (bias.tracked() && bias.tape() != tp))
    throw Error("conv2d: operands recorded on different tapes");
  if (!tp) return Tensor::from({cout, h, w}, std::move(out));

  const int in_n = input.tracked() ? input.node() : -1;
  const int k_n = kernel.tracked() ? kernel.node() : -1;
  const int b_n = bias.tracked() ? bias.node() : -1;
  auto in_p = OpAccess::values(input);
  auto k_p = OpAccess::values(kernel);
  const int id = tp->add_node(
      "conv2d", {std::max(in_n, -1), std::max(k_n, -1), std::max(b_n, -1)},
      [=](const std::vector<double>& g, Tape& t) {
        if (in_n >= 0) {
          auto& gi = t.acc(in_n, static_cast<std::size_t>(cin) * plane);
          // correlate the output gradient with the flipped kernel
          for (int co = 0; co < cout; ++co) {
            const double* gsrc = g.data() + co * plane;
            for (int ci = 0; ci < cin; ++ci) {
              double* dst = gi.data() + ci * plane;
              const double* kk = k_p->data() + (co * cin + ci) * k * k;
              for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx)
                  detail::conv_tap_axpy(kk[ky * k + kx], gsrc, dst, h, w,
                                        pad - ky, pad - kx);
            }
          }
        }
        if (k_n >= 0) {
          auto& gk =
              t.acc(k_n, static_cast<std::size_t>(cout) * cin * k * k);
          for (int co = 0; co < cout; ++co) {
            const double* gsrc = g.data() + co * plane;
            for (int ci = 0; ci < cin; ++ci) {
              const double* src = in_p->data() + ci * plane;
              double* dst = gk.data() + (co * cin + ci) * k * k;
              for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx)
                  dst[ky * k + kx] += detail::conv_tap_dot(
                      src, gsrc, h, w, ky - pad, kx - pad);
            }
          }
        }
        if (b_n >= 0) {
          auto& gb = t.acc(b_n, static_cast<std::size_t>(cout));
          for (int co = 0; co < cout; ++co) {
            const double* gsrc = g.data() + co * plane;
            double acc = 0.0;
            for (int i = 0; i < plane; ++i) acc += gsrc[i];
            gb[static_cast<std::size_t>(co)] += acc;
          }
        }
      });
  return OpAccess::make({cout, h, w}, std::move(out), tp, id);
}

/// Per-pixel softmax over the channel dimension of [C,H,W] logits.
/// Numerically stabilized by max subtraction; outputs are floored at 1e-12
/// so downstream logs stay finite, leaving channel sums within 1e-9 of 1.
inline Tensor softmax_channels(const Tensor& logits) {
  const Shape& s = logits.shape();
  if (s.size() != 3)
    throw ShapeError("softmax_channels: expected [C,H,W], got " +
                     shape_str(s));
  const int c = s[0], h = s[1], w = s[2];
  const int plane = h * w;
  const auto& x = logits.data();
  for (double v : x)
    if (!std::isfinite(v))
      throw NanError("softmax_channels: non-finite logit");

  std::vector<double> out(x.size());
  for (int i = 0; i < plane; ++i) {
    double m = x[static_cast<std::size_t>(i)];
    for (int j = 1; j < c; ++j)
      m = std::max(m, x[static_cast<std::size_t>(j * plane + i)]);
    double total = 0.0;
    for (int j = 0; j < c; ++j) {
      const double e = std::exp(x[static_cast<std::size_t>(j * plane + i)] - m);
      out[static_cast<std::size_t>(j * plane + i)] = e;
      total += e;
    }
    for (int j = 0; j < c; ++j) {
      auto& p = out[static_cast<std::size_t>(j * plane + i)];
      p = std::max(p / total, 1e-12);
    }
  }
  if (!logits.tracked()) return Tensor::from(s, std::move(out));
  Tape* tp = logits.tape();
  const int xn = logits.node();
  auto yp = std::make_shared<std::vector<double>>(out);
  const int id = tp->add_node(
      "softmax", {xn}, [xn, yp, c, plane](const std::vector<double>& g, Tape& t) {
        double* gx = t.acc(xn, yp->size()).data();
        const double* gp = g.data();
        const double* y = yp->data();
        for (int i = 0; i < plane; ++i) {
          double dot = 0.0;
          for (int j = 0; j < c; ++j) {
            const int idx = j * plane + i;
            dot += gp[idx] * y[idx];
          }
          for (int j = 0; j < c; ++j) {
            const int idx = j * plane + i;
            gx[idx] += y[idx] * (gp[idx] - dot);
          }
        }
      });
  return OpAccess::make(s, std::move(out), tp, id);
}

/// Reverse accumulation from a scalar loss; see Tape::backward.
inline void backward(const Tensor& loss) {
  if (!loss.tracked())
    throw Error("backward: loss is not recorded on any tape");
  loss.tape()->backward(loss);
}

}  // namespace spct
