#pragma once

// Shared test plumbing: fixture paths, JSON loading, and small generators.

#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "occuray/coco.hpp"
#include "occuray/mask.hpp"
#include "occuray/rng.hpp"

namespace testutil {

inline std::string data_path(const std::string& name) {
  return std::string(OCCURAY_TEST_DATA_DIR) + "/" + name;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("missing test file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

inline nlohmann::json load_json(const std::string& name) {
  return nlohmann::json::parse(read_file(data_path(name)));
}

inline occuray::Dataset load_dataset(const std::string& name) {
  return occuray::parse_dataset(data_path(name));
}

inline occuray::BinaryMask random_mask(occuray::SplitMix64& rng, int max_side = 64) {
  const int h = 1 + static_cast<int>(rng.next_below(max_side));
  const int w = 1 + static_cast<int>(rng.next_below(max_side));
  occuray::BinaryMask m(h, w);
  const double density = rng.next_unit();
  for (auto& b : m.bits) b = rng.next_unit() < density ? 1 : 0;
  return m;
}

// A rectangle polygon whose raster is exactly rows r0..r1 x cols c0..c1.
inline std::vector<double> rect_poly(int r0, int r1, int c0, int c1) {
  return {double(c0), double(r0), double(c1 + 1), double(r0),
          double(c1 + 1), double(r1 + 1), double(c0), double(r1 + 1)};
}

// Valid dataset of axis-aligned rectangles with consistent bbox/area fields;
// no occlusion records. Occasional crowd annotations.
inline occuray::Dataset random_plain_dataset(occuray::SplitMix64& rng,
                                             int max_images = 8,
                                             int max_anns = 5) {
  occuray::Dataset ds;
  ds.categories.push_back({1, "gun", nlohmann::json::object()});
  ds.categories.push_back({2, "knife", nlohmann::json::object()});
  const int n_images = 1 + int(rng.next_below(static_cast<std::uint64_t>(max_images)));
  std::int64_t next_ann = 1;
  for (int i = 1; i <= n_images; ++i) {
    const int h = 6 + int(rng.next_below(14));
    const int w = 6 + int(rng.next_below(14));
    ds.images.push_back({i, w, h, "im" + std::to_string(i) + ".png",
                         nlohmann::json::object()});
    const int n_anns = int(rng.next_below(static_cast<std::uint64_t>(max_anns + 1)));
    for (int k = 0; k < n_anns; ++k) {
      const int r0 = int(rng.next_below(h - 1));
      const int r1 = r0 + int(rng.next_below(h - r0));
      const int c0 = int(rng.next_below(w - 1));
      const int c1 = c0 + int(rng.next_below(w - c0));
      occuray::AnnotationRecord a;
      a.id = next_ann++;
      a.image_id = i;
      a.category_id = 1 + std::int64_t(rng.next_below(2));
      a.bbox = {double(c0), double(r0), double(c1 - c0 + 1), double(r1 - r0 + 1)};
      a.segmentation = nlohmann::json::array({rect_poly(r0, r1, c0, c1)});
      a.area = double((r1 - r0 + 1) * (c1 - c0 + 1));
      if (rng.next_unit() < 0.08) a.iscrowd = 1;
      ds.annotations.push_back(std::move(a));
    }
  }
  return ds;
}

}  // namespace testutil
