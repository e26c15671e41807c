#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "spct/losses.hpp"
#include "spct/rng.hpp"
#include "spct/tensor.hpp"

namespace spct {

// ---------------------------------------------------------------------------
// SPCT tensor container: "SPCT" magic, u16 version, u32 entry count, then per
// entry a u16-length name, u8 dtype (0 = f32, 1 = u8), u8 rank, u32 dims and
// a row-major little-endian payload. Readers reject unknown magic/versions
// and name the byte offset of any truncation.
// ---------------------------------------------------------------------------

constexpr std::uint16_t kTensorFileVersion = 1;

enum class Dtype : std::uint8_t { f32 = 0, u8 = 1 };

struct NamedTensor {
  std::string name;
  Dtype dtype = Dtype::f32;
  Shape dims;
  std::vector<float> f32;       // used when dtype == f32
  std::vector<std::uint8_t> u8;  // used when dtype == u8
};

namespace detail {

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>(v >> 8));
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct ByteReader {
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n, const char* what) const {
    if (pos + n > buf.size())
      throw IoError(std::string("truncated tensor file: expected ") +
                    std::to_string(n) + " bytes for " + what + " at offset " +
                    std::to_string(pos) + ", only " +
                    std::to_string(buf.size() - pos) + " available");
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<std::uint8_t>(buf[pos++]);
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    std::uint16_t v = static_cast<std::uint8_t>(buf[pos]) |
                      (static_cast<std::uint16_t>(
                           static_cast<std::uint8_t>(buf[pos + 1]))
                       << 8);
    pos += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(buf[pos + i]))
           << (8 * i);
    pos += 4;
    return v;
  }
};

}  // namespace detail

inline void save_tensors(const std::filesystem::path& path,
                         const std::vector<NamedTensor>& tensors) {
  std::string out = "SPCT";
  detail::put_u16(out, kTensorFileVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    const long long n = numel_of(t.dims);
    detail::put_u16(out, static_cast<std::uint16_t>(t.name.size()));
    out += t.name;
    out.push_back(static_cast<char>(t.dtype));
    out.push_back(static_cast<char>(t.dims.size()));
    for (int d : t.dims) detail::put_u32(out, static_cast<std::uint32_t>(d));
    if (t.dtype == Dtype::f32) {
      if (static_cast<long long>(t.f32.size()) != n)
        throw ValueError("save_tensors: payload size mismatch for " + t.name);
      static_assert(sizeof(float) == 4);
      const std::size_t bytes = t.f32.size() * 4;
      const std::size_t base = out.size();
      out.resize(base + bytes);
      std::memcpy(out.data() + base, t.f32.data(), bytes);
    } else {
      if (static_cast<long long>(t.u8.size()) != n)
        throw ValueError("save_tensors: payload size mismatch for " + t.name);
      out.append(reinterpret_cast<const char*>(t.u8.data()), t.u8.size());
    }
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("write failed for " + path.string());
}

inline std::vector<NamedTensor> load_tensors(
    const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  const std::string buf = ss.str();

  detail::ByteReader r{buf};
  r.need(4, "magic");
  if (buf.compare(0, 4, "SPCT") != 0)
    throw IoError("bad magic in " + path.string() + " at offset 0");
  r.pos = 4;
  const auto version = r.u16("version");
  if (version != kTensorFileVersion)
    throw IoError("unsupported tensor file version " +
                  std::to_string(version) + " in " + path.string());
  const auto count = r.u32("entry count");
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t e = 0; e < count; ++e) {
    NamedTensor t;
    const auto name_len = r.u16("name length");
    r.need(name_len, "name");
    t.name.assign(buf, r.pos, name_len);
    r.pos += name_len;
    const auto dt = r.u8("dtype");
    if (dt > 1)
      throw IoError("unknown dtype code " + std::to_string(dt) +
                    " at offset " + std::to_string(r.pos - 1));
    t.dtype = static_cast<Dtype>(dt);
    const auto rank = r.u8("rank");
    t.dims.resize(rank);
    for (auto& d : t.dims) d = static_cast<int>(r.u32("dim"));
    const long long n = numel_of(t.dims);
    if (t.dtype == Dtype::f32) {
      const auto bytes = static_cast<std::size_t>(n) * 4;
      r.need(bytes, "f32 payload");
      t.f32.resize(static_cast<std::size_t>(n));
      std::memcpy(t.f32.data(), buf.data() + r.pos, bytes);
      r.pos += bytes;
    } else {
      r.need(static_cast<std::size_t>(n), "u8 payload");
      t.u8.assign(buf.begin() + static_cast<std::ptrdiff_t>(r.pos),
                  buf.begin() + static_cast<std::ptrdiff_t>(r.pos) + n);
      r.pos += static_cast<std::size_t>(n);
    }
    out.push_back(std::move(t));
  }
  if (r.pos != buf.size())
    throw IoError("trailing bytes in " + path.string() + " at offset " +
                  std::to_string(r.pos));
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic dataset.
// ---------------------------------------------------------------------------

/// Synthetic segmentation corpus: images [1,H,W] in [0,1], one-hot binary
/// masks, and disjoint labeled / unlabeled / test index sets. The first
/// `n` images split into S and U; the test set is appended after them.
struct Dataset {
  int hw = 0;
  int classes = 2;
  std::vector<Tensor> images;          // [1,H,W] each
  std::vector<GroundTruthMask> masks;  // [2,H,W] one-hot
  std::vector<int> labeled;            // S
  std::vector<int> unlabeled;          // U
  std::vector<int> test;               // T
};

namespace detail {

/// Foreground amplitude map: union of 1-2 random ellipses, then one 3x3 box
/// blur so object boundaries carry genuinely ambiguous pixels.
inline void draw_ellipses(Rng& rng, int hw, std::vector<double>& fg,
                          std::vector<std::uint8_t>& mask) {
  std::fill(fg.begin(), fg.end(), 0.0);
  std::fill(mask.begin(), mask.end(), 0);
  const int count = rng.uniform_int(1, 2);
  for (int e = 0; e < count; ++e) {
    const double cy = rng.uniform(0.25, 0.75) * hw;
    const double cx = rng.uniform(0.25, 0.75) * hw;
    const double ry = rng.uniform(0.12, 0.28) * hw;
    const double rx = rng.uniform(0.12, 0.28) * hw;
    const double ang = rng.uniform(0.0, 3.14159265358979323846);
    const double ca = std::cos(ang), sa = std::sin(ang);
    for (int y = 0; y < hw; ++y)
      for (int x = 0; x < hw; ++x) {
        const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
        const double u = (ca * dx + sa * dy) / rx;
        const double v = (-sa * dx + ca * dy) / ry;
        if (u * u + v * v <= 1.0) {
          mask[static_cast<std::size_t>(y * hw + x)] = 1;
          fg[static_cast<std::size_t>(y * hw + x)] = 1.0;
        }
      }
  }
  // 3x3 box blur of the amplitude (mask itself stays crisp)
  std::vector<double> blur(fg.size());
  for (int y = 0; y < hw; ++y)
    for (int x = 0; x < hw; ++x) {
      double acc = 0.0;
      int cnt = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= hw || xx < 0 || xx >= hw) continue;
          acc += fg[static_cast<std::size_t>(yy * hw + xx)];
          ++cnt;
        }
      blur[static_cast<std::size_t>(y * hw + x)] = acc / cnt;
    }
  fg = std::move(blur);
}

inline std::pair<Tensor, GroundTruthMask> synth_image(Rng& rng, int hw) {
  const auto plane = static_cast<std::size_t>(hw) * hw;
  std::vector<double> fg(plane);
  std::vector<std::uint8_t> mask(plane);
  // resample until the foreground fraction is reasonable
  for (;;) {
    draw_ellipses(rng, hw, fg, mask);
    long long on = 0;
    for (auto m : mask) on += m;
    const double frac = static_cast<double>(on) / static_cast<double>(plane);
    if (frac >= 0.02 && frac <= 0.40) break;
  }

  const double base = rng.uniform(0.30, 0.45);
  const double contrast = rng.uniform(0.16, 0.24);
  const double a1 = rng.uniform(0.03, 0.08);
  const double a2 = rng.uniform(0.03, 0.08);
  const double f1x = rng.uniform_int(1, 3), f1y = rng.uniform_int(1, 3);
  const double f2x = rng.uniform_int(1, 3), f2y = rng.uniform_int(1, 3);
  const double ph1 = rng.uniform(0.0, 6.28318530717958648);
  const double ph2 = rng.uniform(0.0, 6.28318530717958648);
  const double jitter = rng.uniform(0.85, 1.15);

  std::vector<double> img(plane);
  constexpr double two_pi = 6.28318530717958648;
  for (int y = 0; y < hw; ++y)
    for (int x = 0; x < hw; ++x) {
      const std::size_t i = static_cast<std::size_t>(y * hw + x);
      double v = base;
      v += a1 * std::sin(two_pi * (f1x * x + f1y * y) / hw + ph1);
      v += a2 * std::sin(two_pi * (f2x * x + f2y * y) / hw + ph2);
      v += contrast * fg[i];
      v += 0.15 * rng.normal();
      v = 0.5 + jitter * (v - 0.5);
      v = std::min(std::max(v, 0.0), 1.0);
      // quantize through f32 so in-memory data matches the on-disk format
      img[i] = static_cast<double>(static_cast<float>(v));
    }

  std::vector<int> labels(plane);
  for (std::size_t i = 0; i < plane; ++i) labels[i] = mask[i];
  return {Tensor::from({1, hw, hw}, std::move(img)),
          GroundTruthMask::from_labels(labels, 2, hw, hw)};
}

}  // namespace detail

/// Generate a deterministic synthetic dataset: n train images split into
/// labeled/unlabeled by `labeled_ratio` (|S| = round(ratio * n)), plus a
/// test set of max(8, round(0.15 n)) extra images.
inline Dataset generate(std::uint64_t seed, int n, int hw,
                        double labeled_ratio) {
  if (hw < 16) throw ValueError("generate: hw must be >= 16");
  if (!(labeled_ratio > 0.0 && labeled_ratio < 1.0))
    throw ValueError("generate: labeled_ratio must be in (0, 1)");
  const int n_labeled = static_cast<int>(std::lround(labeled_ratio * n));
  if (n_labeled == 0)
    throw ValueError("generate: labeled_ratio " +
                     std::to_string(labeled_ratio) + " yields no labeled images");
  const int n_test = std::max(8, static_cast<int>(std::lround(0.15 * n)));

  Rng rng(seed);
  Dataset ds;
  ds.hw = hw;
  ds.images.reserve(static_cast<std::size_t>(n + n_test));
  ds.masks.reserve(static_cast<std::size_t>(n + n_test));
  for (int i = 0; i < n + n_test; ++i) {
    auto [img, mask] = detail::synth_image(rng, hw);
    ds.images.push_back(std::move(img));
    ds.masks.push_back(std::move(mask));
  }
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  ds.labeled.assign(order.begin(), order.begin() + n_labeled);
  ds.unlabeled.assign(order.begin() + n_labeled, order.end());
  std::sort(ds.labeled.begin(), ds.labeled.end());
  std::sort(ds.unlabeled.begin(), ds.unlabeled.end());
  ds.test.resize(static_cast<std::size_t>(n_test));
  std::iota(ds.test.begin(), ds.test.end(), n);
  return ds;
}

// ---------------------------------------------------------------------------
// Dataset directory layout: images.spct, masks.spct, split.txt.
// ---------------------------------------------------------------------------

namespace detail {

inline std::string join_ints(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

inline std::vector<int> parse_ints(const std::string& line,
                                   const std::string& what) {
  std::vector<int> out;
  std::string cur;
  auto flush = [&] {
    if (cur.empty()) return;
    try {
      out.push_back(std::stoi(cur));
    } catch (const std::exception&) {
      throw IoError("bad index '" + cur + "' in " + what);
    }
    cur.clear();
  };
  for (char c : line) {
    if (c == ',')
      flush();
    else if (!std::isspace(static_cast<unsigned char>(c)))
      cur += c;
  }
  flush();
  return out;
}

}  // namespace detail

inline void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  const int count = static_cast<int>(ds.images.size());
  NamedTensor images;
  images.name = "images";
  images.dtype = Dtype::f32;
  images.dims = {count, 1, ds.hw, ds.hw};
  images.f32.reserve(static_cast<std::size_t>(count) * ds.hw * ds.hw);
  for (const auto& img : ds.images)
    for (double v : img.data()) images.f32.push_back(static_cast<float>(v));

  NamedTensor masks;
  masks.name = "masks";
  masks.dtype = Dtype::u8;
  masks.dims = {count, ds.hw, ds.hw};
  masks.u8.reserve(static_cast<std::size_t>(count) * ds.hw * ds.hw);
  for (const auto& m : ds.masks)
    for (int label : m.labels())
      masks.u8.push_back(static_cast<std::uint8_t>(label));

  save_tensors(dir / "images.spct", {images});
  save_tensors(dir / "masks.spct", {masks});

  std::ofstream split(dir / "split.txt", std::ios::trunc);
  if (!split) throw IoError("cannot write " + (dir / "split.txt").string());
  split << detail::join_ints(ds.labeled) << '\n'
        << detail::join_ints(ds.unlabeled) << '\n'
        << detail::join_ints(ds.test) << '\n';
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  auto img_entries = load_tensors(dir / "images.spct");
  auto mask_entries = load_tensors(dir / "masks.spct");
  if (img_entries.size() != 1 || img_entries[0].name != "images" ||
      img_entries[0].dims.size() != 4)
    throw IoError("images.spct: expected one rank-4 'images' entry");
  if (mask_entries.size() != 1 || mask_entries[0].name != "masks" ||
      mask_entries[0].dims.size() != 3)
    throw IoError("masks.spct: expected one rank-3 'masks' entry");
  const auto& ie = img_entries[0];
  const auto& me = mask_entries[0];
  const int count = ie.dims[0];
  const int hw = ie.dims[2];
  if (ie.dims[1] != 1 || ie.dims[3] != hw || me.dims[0] != count ||
      me.dims[1] != hw || me.dims[2] != hw)
    throw IoError("dataset tensors have inconsistent shapes");

  Dataset ds;
  ds.hw = hw;
  const auto plane = static_cast<std::size_t>(hw) * hw;
  for (int i = 0; i < count; ++i) {
    std::vector<double> img(plane);
    for (std::size_t j = 0; j < plane; ++j)
      img[j] = static_cast<double>(ie.f32[static_cast<std::size_t>(i) * plane + j]);
    ds.images.push_back(Tensor::from({1, hw, hw}, std::move(img)));
    std::vector<int> labels(plane);
    for (std::size_t j = 0; j < plane; ++j)
      labels[j] = me.u8[static_cast<std::size_t>(i) * plane + j];
    ds.masks.push_back(GroundTruthMask::from_labels(labels, 2, hw, hw));
  }

  std::ifstream split(dir / "split.txt");
  if (!split) throw IoError("cannot open " + (dir / "split.txt").string());
  std::string line;
  std::vector<std::vector<int>> sets;
  while (std::getline(split, line)) sets.push_back(detail::parse_ints(line, "split.txt"));
  if (sets.size() != 3)
    throw IoError("split.txt: expected 3 lines, got " +
                  std::to_string(sets.size()));
  ds.labeled = std::move(sets[0]);
  ds.unlabeled = std::move(sets[1]);
  ds.test = std::move(sets[2]);
  for (const auto* set : {&ds.labeled, &ds.unlabeled, &ds.test})
    for (int idx : *set)
      if (idx < 0 || idx >= count)
        throw IoError("split.txt: index " + std::to_string(idx) +
                      " out of range");
  return ds;
}

// ---------------------------------------------------------------------------
// Batch sampling.
// ---------------------------------------------------------------------------

struct Batch {
  std::vector<int> labeled;
  std::vector<int> unlabeled;
};

/// Without-replacement sampler: each pass over U visits every unlabeled
/// index once (batches spanning a pass boundary top up from a fresh
/// shuffle); the labeled set cycles the same way.
class BatchSampler {
 public:
  BatchSampler(const Dataset& ds, std::uint64_t seed)
      : labeled_(ds.labeled), unlabeled_(ds.unlabeled), rng_(seed) {
    if (labeled_.empty()) throw ValueError("BatchSampler: empty labeled split");
    if (unlabeled_.empty())
      throw ValueError("BatchSampler: empty unlabeled split");
    rng_.shuffle(labeled_);
    rng_.shuffle(unlabeled_);
  }

  Batch next(int n_labeled, int n_unlabeled) {
    if (n_labeled > static_cast<int>(labeled_.size()) ||
        n_unlabeled > static_cast<int>(unlabeled_.size()))
      throw ValueError("BatchSampler: batch size exceeds split size");
    Batch b;
    draw(labeled_, lab_pos_, n_labeled, b.labeled);
    draw(unlabeled_, unlab_pos_, n_unlabeled, b.unlabeled);
    return b;
  }

 private:
  void draw(std::vector<int>& pool, std::size_t& pos, int n,
            std::vector<int>& out) {
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      if (pos == pool.size()) {
        rng_.shuffle(pool);
        pos = 0;
      }
      out.push_back(pool[pos++]);
    }
  }

  std::vector<int> labeled_;
  std::vector<int> unlabeled_;
  std::size_t lab_pos_ = 0;
  std::size_t unlab_pos_ = 0;
  Rng rng_;
};

}  // namespace spct
