#pragma once

#include "spct/tensor.hpp"

namespace spct {

/// Exact geometric transform on the pixel grid: rotation by r * 90 degrees
/// counter-clockwise, r in {0,1,2,3}. Invertible bit-exactly.
struct Transform {
  int quarter_turns = 0;

  Transform inverse() const { return Transform{(4 - quarter_turns % 4) % 4}; }
};

/// Rotate the spatial dims of a [...,H,W] tensor (rank 2 or 3); channels
/// untouched. Odd quarter turns require square images.
inline Tensor apply_transform(const Transform& t, const Tensor& x) {
  const Shape& s = x.shape();
  if (s.size() != 2 && s.size() != 3)
    throw ShapeError("apply_transform: expected [H,W] or [C,H,W], got " +
                     shape_str(s));
  const int c = s.size() == 3 ? s[0] : 1;
  const int h = s[s.size() - 2], w = s[s.size() - 1];
  const int r = ((t.quarter_turns % 4) + 4) % 4;
  if (r % 2 == 1 && h != w)
    throw ShapeError("apply_transform: odd quarter turns need square input, "
                     "got " + shape_str(s));
  if (r == 0) return x;

  const int oh = (r % 2 == 0) ? h : w;
  const int ow = (r % 2 == 0) ? w : h;
  const int plane = h * w;
  // src index feeding out[y][x] for each rotation count
  auto src_of = [r, h, w](int y, int x) {
    switch (r) {
      case 1: return (x)*w + (w - 1 - y);          // 90 ccw
      case 2: return (h - 1 - y) * w + (w - 1 - x);  // 180
      default: return (h - 1 - x) * w + y;           // 270 ccw
    }
  };
  const auto& in = x.data();
  std::vector<double> out(in.size());
  for (int ch = 0; ch < c; ++ch) {
    const double* src = in.data() + ch * plane;
    double* dst = out.data() + ch * plane;
    for (int y = 0; y < oh; ++y)
      for (int xx = 0; xx < ow; ++xx) dst[y * ow + xx] = src[src_of(y, xx)];
  }
  Shape os = s;
  os[s.size() - 2] = oh;
  os[s.size() - 1] = ow;
  if (!x.tracked()) return Tensor::from(std::move(os), std::move(out));

  Tape* tp = x.tape();
  const int xn = x.node();
  const std::size_t n = in.size();
  const int id = tp->add_node(
      "rot90", {xn},
      [xn, n, c, h, w, oh, ow, plane, src_of](const std::vector<double>& g,
                                              Tape& tape) {
        auto& gx = tape.acc(xn, n);
        for (int ch = 0; ch < c; ++ch) {
          const double* gs = g.data() + ch * plane;
          double* gd = gx.data() + ch * plane;
          for (int y = 0; y < oh; ++y)
            for (int xx = 0; xx < ow; ++xx)
              gd[src_of(y, xx)] += gs[y * ow + xx];
        }
      });
  return OpAccess::make(std::move(os), std::move(out), tp, id);
}

}  // namespace spct
