#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "occuray/error.hpp"

namespace occuray {

// Axis-aligned box, COCO convention: top-left origin, (x, y, w, h) in pixels.
struct Box {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  bool operator==(const Box&) const = default;
};

struct Point {
  double x = 0.0;
  double y = 0.0;
};

// Dense binary mask, row-major, one byte per pixel holding 0 or 1.
struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> bits;

  BinaryMask() = default;
  BinaryMask(int h, int w) : height(h), width(w) {
    if (h <= 0 || w <= 0) throw Error("BinaryMask: dimensions must be positive");
    bits.assign(static_cast<std::size_t>(h) * static_cast<std::size_t>(w), 0);
  }

  std::uint8_t at(int r, int c) const {
    return bits[static_cast<std::size_t>(r) * width + c];
  }
  void set(int r, int c, std::uint8_t v = 1) {
    bits[static_cast<std::size_t>(r) * width + c] = v;
  }

  std::uint64_t area() const {
    std::uint64_t n = 0;
    for (std::uint8_t b : bits) n += b;
    return n;
  }
  bool empty() const { return area() == 0; }

  bool operator==(const BinaryMask& o) const {
    return height == o.height && width == o.width && bits == o.bits;
  }
};

// Run-length encoded mask in the COCO layout: column-major scan order,
// first run counting zeros.
struct RleMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint32_t> counts;

  std::uint64_t pixel_count() const {
    std::uint64_t s = 0;
    for (std::uint32_t c : counts) s += c;
    return s;
  }
  // Set pixels live in the odd-indexed runs.
  std::uint64_t area() const {
    std::uint64_t a = 0;
    for (std::size_t i = 1; i < counts.size(); i += 2) a += counts[i];
    return a;
  }

  bool operator==(const RleMask& o) const = default;
};

namespace detail {

inline void require_same_shape(const BinaryMask& a, const BinaryMask& b,
                               const char* op) {
  if (a.height != b.height || a.width != b.width)
    throw Error(std::string(op) + ": dimension mismatch (" +
                std::to_string(a.height) + "x" + std::to_string(a.width) +
                " vs " + std::to_string(b.height) + "x" +
                std::to_string(b.width) + ")");
}

// Smallest integer c with c + 0.5 >= x. The initial guess may be off by one
// ulp, so nudge until the predicate itself holds.
inline long first_center_at_or_after(double x) {
  long c = static_cast<long>(std::ceil(x - 0.5));
  while (c + 0.5 < x) ++c;
  while (c - 1 + 0.5 >= x) --c;
  return c;
}

}  // namespace detail

// Pixel (r, c) is set iff its center (c+0.5, r+0.5) is inside the polygon
// under the even-odd rule; a center exactly on an edge counts as outside
// (crossings strictly to the right of the center are counted). Geometry is
// evaluated as given; only the canvas restricts the output.
inline BinaryMask rasterize_polygon(const std::vector<Point>& poly, int height,
                                    int width) {
  if (poly.size() < 3) throw Error("rasterize_polygon: need >= 3 vertices");
  BinaryMask mask(height, width);
  std::vector<double> crossings;
  for (int r = 0; r < height; ++r) {
    const double y = r + 0.5;
    crossings.clear();
    for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
      const Point& a = poly[i];
      const Point& b = poly[j];
      if ((a.y > y) != (b.y > y))
        crossings.push_back((b.x - a.x) * (y - a.y) / (b.y - a.y) + a.x);
    }
    std::sort(crossings.begin(), crossings.end());
    // Closed loop with the half-open vertex rule always yields an even count.
    for (std::size_t k = 0; k + 1 < crossings.size(); k += 2) {
      long c0 = detail::first_center_at_or_after(crossings[k]);
      long c1 = detail::first_center_at_or_after(crossings[k + 1]);
      c0 = std::max(c0, 0L);
      c1 = std::min(c1, static_cast<long>(width));
      for (long c = c0; c < c1; ++c) mask.set(r, static_cast<int>(c));
    }
  }
  return mask;
}

// COCO flat polygon [x1, y1, x2, y2, ...] -> vertex list.
inline std::vector<Point> polygon_from_flat(const std::vector<double>& flat) {
  if (flat.size() % 2 != 0)
    throw ParseError("polygon: odd number of coordinates");
  std::vector<Point> poly(flat.size() / 2);
  for (std::size_t i = 0; i < poly.size(); ++i)
    poly[i] = {flat[2 * i], flat[2 * i + 1]};
  return poly;
}

inline RleMask rle_encode(const BinaryMask& m) {
  RleMask r;
  r.height = m.height;
  r.width = m.width;
  std::uint8_t prev = 0;
  std::uint32_t run = 0;
  for (int c = 0; c < m.width; ++c) {
    for (int row = 0; row < m.height; ++row) {
      const std::uint8_t v = m.at(row, c) ? 1 : 0;
      if (v != prev) {
        r.counts.push_back(run);
        run = 0;
        prev = v;
      }
      ++run;
    }
  }
  r.counts.push_back(run);
  return r;
}

inline BinaryMask rle_decode(const RleMask& r) {
  if (r.height <= 0 || r.width <= 0)
    throw Error("rle_decode: dimensions must be positive");
  const std::uint64_t total =
      static_cast<std::uint64_t>(r.height) * static_cast<std::uint64_t>(r.width);
  if (r.pixel_count() != total)
    throw Error("rle_decode: counts sum to " + std::to_string(r.pixel_count()) +
                ", expected " + std::to_string(total));
  BinaryMask m(r.height, r.width);
  std::uint64_t pos = 0;
  std::uint8_t v = 0;
  for (std::uint32_t c : r.counts) {
    for (std::uint32_t k = 0; k < c; ++k) {
      // pos scans column-major.
      const int col = static_cast<int>(pos / r.height);
      const int row = static_cast<int>(pos % r.height);
      if (v) m.set(row, col);
      ++pos;
    }
    v = !v;
  }
  return m;
}

// Compressed RLE string, byte-compatible with the de-facto COCO codec:
// each count is emitted as little-endian 5-bit groups with a continuation
// bit, every 6-bit unit offset by 48 into printable ASCII; counts after the
// third are delta-encoded against the count two positions back.
inline std::string rle_to_string(const RleMask& r) {
  std::string s;
  for (std::size_t i = 0; i < r.counts.size(); ++i) {
    long long x = static_cast<long long>(r.counts[i]);
    if (i > 2) x -= static_cast<long long>(r.counts[i - 2]);
    bool more = true;
    while (more) {
      long long group = x & 0x1f;
      x >>= 5;
      more = (group & 0x10) ? (x != -1) : (x != 0);
      if (more) group |= 0x20;
      s.push_back(static_cast<char>(group + 48));
    }
  }
  return s;
}

inline RleMask rle_from_string(const std::string& s, int height, int width) {
  RleMask r;
  r.height = height;
  r.width = width;
  std::size_t k = 0;
  while (k < s.size()) {
    long long x = 0;
    int m = 0;
    bool more = true;
    while (more) {
      if (k >= s.size()) throw ParseError("rle string: truncated group");
      const long long group = s[k] - 48;
      if (group < 0 || group > 63)
        throw ParseError("rle string: byte out of range at position " +
                         std::to_string(k));
      x |= (group & 0x1f) << (5 * m);
      more = (group & 0x20) != 0;
      ++k;
      ++m;
      if (!more && (group & 0x10)) x |= ~((1LL << (5 * m)) - 1);
    }
    if (r.counts.size() > 2) x += static_cast<long long>(r.counts[r.counts.size() - 2]);
    if (x < 0) throw ParseError("rle string: negative run length");
    r.counts.push_back(static_cast<std::uint32_t>(x));
  }
  return r;
}

inline std::uint64_t intersection_count(const BinaryMask& a,
                                        const BinaryMask& b) {
  detail::require_same_shape(a, b, "intersection_count");
  std::uint64_t n = 0;
  for (std::size_t i = 0; i < a.bits.size(); ++i) n += a.bits[i] & b.bits[i];
  return n;
}

inline BinaryMask intersect(const BinaryMask& a, const BinaryMask& b) {
  detail::require_same_shape(a, b, "intersect");
  BinaryMask out(a.height, a.width);
  for (std::size_t i = 0; i < a.bits.size(); ++i)
    out.bits[i] = a.bits[i] & b.bits[i];
  return out;
}

inline BinaryMask union_of(const BinaryMask& a, const BinaryMask& b) {
  detail::require_same_shape(a, b, "union_of");
  BinaryMask out(a.height, a.width);
  for (std::size_t i = 0; i < a.bits.size(); ++i)
    out.bits[i] = a.bits[i] | b.bits[i];
  return out;
}

// |a n b| / |a u b|; 0 when both masks are empty so vacuous predictions
// never match vacuous ground truth.
inline double iou(const BinaryMask& a, const BinaryMask& b) {
  detail::require_same_shape(a, b, "iou");
  const std::uint64_t inter = intersection_count(a, b);
  const std::uint64_t uni = a.area() + b.area() - inter;
  if (uni == 0) return 0.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

// True iff the pixel center (cx, cy) falls in the half-open box
// [x, x+w) x [y, y+h).
inline bool center_in_box(double cx, double cy, const Box& b) {
  return cx >= b.x && cx < b.x + b.w && cy >= b.y && cy < b.y + b.h;
}

// Fraction of the mask's set pixels whose centers fall inside the box.
inline double coverage_fraction(const BinaryMask& mask, const Box& box) {
  const std::uint64_t total = mask.area();
  if (total == 0) throw Error("coverage_fraction: mask is empty");
  std::uint64_t covered = 0;
  for (int r = 0; r < mask.height; ++r)
    for (int c = 0; c < mask.width; ++c)
      if (mask.at(r, c) && center_in_box(c + 0.5, r + 0.5, box)) ++covered;
  return static_cast<double>(covered) / static_cast<double>(total);
}

// Rasterize a box on its own canvas: pixels whose centers fall in the box.
inline BinaryMask box_raster(const Box& box, int height, int width) {
  BinaryMask m(height, width);
  const long r0 = std::max(detail::first_center_at_or_after(box.y), 0L);
  const long r1 = std::min(detail::first_center_at_or_after(box.y + box.h),
                           static_cast<long>(height));
  const long c0 = std::max(detail::first_center_at_or_after(box.x), 0L);
  const long c1 = std::min(detail::first_center_at_or_after(box.x + box.w),
                           static_cast<long>(width));
  for (long r = r0; r < r1; ++r)
    for (long c = c0; c < c1; ++c) m.set(static_cast<int>(r), static_cast<int>(c));
  return m;
}

// Run-merge intersection count on RLE masks. Integer-exact, so IoU computed
// from it is bit-identical to the dense route.
inline std::uint64_t rle_intersection_count(const RleMask& a, const RleMask& b) {
  if (a.height != b.height || a.width != b.width)
    throw Error("rle_intersection_count: dimension mismatch");
  std::uint64_t inter = 0;
  std::size_t ia = 1, ib = 1;
  std::uint64_t ca = a.counts.empty() ? 0 : a.counts[0];
  std::uint64_t cb = b.counts.empty() ? 0 : b.counts[0];
  bool va = false, vb = false;
  std::uint64_t remaining =
      static_cast<std::uint64_t>(a.height) * static_cast<std::uint64_t>(a.width);
  while (remaining > 0) {
    while (ca == 0 && ia < a.counts.size()) {
      ca = a.counts[ia++];
      va = !va;
    }
    while (cb == 0 && ib < b.counts.size()) {
      cb = b.counts[ib++];
      vb = !vb;
    }
    const std::uint64_t step = std::min({ca, cb, remaining});
    if (step == 0) break;
    if (va && vb) inter += step;
    ca -= step;
    cb -= step;
    remaining -= step;
  }
  return inter;
}

}  // namespace occuray
