#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "spct/errors.hpp"

namespace spct {

/// Binary segmentation mask on a [H,W] grid. Pixel spacing is 1.
struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> v;  // strictly 0/1, row-major

  static BinaryMask from(int h, int w, std::vector<std::uint8_t> data) {
    if (static_cast<long long>(data.size()) != static_cast<long long>(h) * w)
      throw ShapeError("BinaryMask: size mismatch");
    for (auto x : data)
      if (x > 1) throw ValueError("BinaryMask: non-binary value");
    return BinaryMask{h, w, std::move(data)};
  }

  long long count() const {
    long long n = 0;
    for (auto x : v) n += x;
    return n;
  }
};

/// Dice similarity coefficient 2|S^G| / (|S|+|G|); 1.0 when both are empty.
inline double dsc(const BinaryMask& s, const BinaryMask& g) {
  if (s.height != g.height || s.width != g.width)
    throw ShapeError("dsc: mask shape mismatch");
  long long inter = 0, total = 0;
  for (std::size_t i = 0; i < s.v.size(); ++i) {
    inter += s.v[i] & g.v[i];
    total += s.v[i] + g.v[i];
  }
  if (total == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(total);
}

/// Symmetric Hausdorff distance in pixels, exact brute force. Undefined
/// (nullopt) when either mask is empty; callers exclude those from means
/// and report the count.
inline std::optional<double> hausdorff(const BinaryMask& s,
                                       const BinaryMask& g) {
  if (s.height != g.height || s.width != g.width)
    throw ShapeError("hausdorff: mask shape mismatch");
  auto points = [](const BinaryMask& m) {
    std::vector<std::pair<int, int>> pts;
    for (int y = 0; y < m.height; ++y)
      for (int x = 0; x < m.width; ++x)
        if (m.v[static_cast<std::size_t>(y * m.width + x)]) pts.push_back({y, x});
    return pts;
  };
  const auto ps = points(s);
  const auto pg = points(g);
  if (ps.empty() || pg.empty()) return std::nullopt;

  auto directed_sq = [](const std::vector<std::pair<int, int>>& a,
                        const std::vector<std::pair<int, int>>& b) {
    long long worst = 0;
    for (const auto& [ay, ax] : a) {
      long long best = -1;
      for (const auto& [by, bx] : b) {
        const long long dy = ay - by, dx = ax - bx;
        const long long d = dy * dy + dx * dx;
        if (best < 0 || d < best) best = d;
        if (best == 0) break;
      }
      if (best > worst) worst = best;
    }
    return worst;
  };
  const long long d2 = std::max(directed_sq(ps, pg), directed_sq(pg, ps));
  return std::sqrt(static_cast<double>(d2));
}

}  // namespace spct
