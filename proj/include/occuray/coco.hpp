#pragma once

// COCO-style dataset model with the additive occlusion extension:
// per-annotation "occlusion" objects plus a top-level "occlusion_info"
// provenance block. Unknown JSON keys survive a parse/write round trip.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "occuray/error.hpp"
#include "occuray/mask.hpp"
#include "occuray/version.hpp"

namespace occuray {

using json = nlohmann::json;

enum class ClipMode { bbox, mask };

inline const char* to_string(ClipMode m) {
  return m == ClipMode::bbox ? "bbox" : "mask";
}

inline ClipMode clip_mode_from_string(const std::string& s) {
  if (s == "bbox") return ClipMode::bbox;
  if (s == "mask") return ClipMode::mask;
  throw ValidationError("unknown clip_mode: " + s);
}

struct OcclusionRecord {
  std::vector<std::int64_t> occluder_ids;
  RleMask segmentation;
  std::int64_t area = 0;

  bool operator==(const OcclusionRecord&) const = default;
};

struct OcclusionMeta {
  double coverage_threshold = 0.05;
  ClipMode clip_mode = ClipMode::mask;
  std::string tool_version = kVersion;

  bool operator==(const OcclusionMeta&) const = default;
};

struct ImageRecord {
  std::int64_t id = 0;
  int width = 0;
  int height = 0;
  std::string file_name;
  json extra = json::object();

  bool operator==(const ImageRecord&) const = default;
};

struct CategoryRecord {
  std::int64_t id = 0;
  std::string name;
  json extra = json::object();

  bool operator==(const CategoryRecord&) const = default;
};

struct AnnotationRecord {
  std::int64_t id = 0;
  std::int64_t image_id = 0;
  std::int64_t category_id = 0;
  Box bbox;
  // Verbatim COCO segmentation: list of flat polygons, or an RLE object with
  // "counts" as either a raw run list or a compressed string. Kept as JSON so
  // untouched annotations round-trip exactly.
  json segmentation;
  double area = 0.0;
  int iscrowd = 0;
  std::optional<OcclusionRecord> occlusion;
  json extra = json::object();

  bool operator==(const AnnotationRecord&) const = default;
};

struct Dataset {
  std::vector<ImageRecord> images;
  std::vector<AnnotationRecord> annotations;
  std::vector<CategoryRecord> categories;
  std::optional<OcclusionMeta> occlusion_meta;
  json extra = json::object();

  bool operator==(const Dataset&) const = default;
};

namespace detail {

// Emit integral doubles as JSON integers so files authored with integer
// bboxes/areas don't pick up ".0" suffixes on a round trip.
inline json number(double v) {
  const auto r = static_cast<std::int64_t>(std::llround(v));
  if (static_cast<double>(r) == v) return json(r);
  return json(v);
}

inline double as_double(const json& j, const char* what) {
  if (!j.is_number()) throw ValidationError(std::string(what) + ": expected a number");
  return j.get<double>();
}

inline std::int64_t as_int(const json& j, const char* what) {
  if (j.is_number_integer() || j.is_number_unsigned()) return j.get<std::int64_t>();
  if (j.is_number_float()) {
    const double v = j.get<double>();
    const auto r = static_cast<std::int64_t>(std::llround(v));
    if (static_cast<double>(r) == v) return r;
  }
  throw ValidationError(std::string(what) + ": expected an integer");
}

inline json take(json& obj, const char* key) {
  auto it = obj.find(key);
  if (it == obj.end()) return json();
  json v = std::move(*it);
  obj.erase(it);
  return v;
}

}  // namespace detail

// --- RLE <-> JSON ---------------------------------------------------------

// Accepts {"size": [h, w], "counts": [..] | "string"}.
inline RleMask rle_from_json(const json& j) {
  if (!j.is_object() || !j.contains("size") || !j.contains("counts"))
    throw ValidationError("RLE object needs \"size\" and \"counts\"");
  const auto& size = j.at("size");
  if (!size.is_array() || size.size() != 2)
    throw ValidationError("RLE \"size\" must be [height, width]");
  const int h = static_cast<int>(detail::as_int(size[0], "rle height"));
  const int w = static_cast<int>(detail::as_int(size[1], "rle width"));
  const auto& counts = j.at("counts");
  if (counts.is_string()) return rle_from_string(counts.get<std::string>(), h, w);
  if (counts.is_array()) {
    RleMask r;
    r.height = h;
    r.width = w;
    r.counts.reserve(counts.size());
    for (const auto& c : counts)
      r.counts.push_back(static_cast<std::uint32_t>(detail::as_int(c, "rle count")));
    return r;
  }
  throw ValidationError("RLE \"counts\" must be a string or an array");
}

inline json rle_to_json(const RleMask& r) {
  return json{{"size", {r.height, r.width}}, {"counts", rle_to_string(r)}};
}

// Materialize any annotation segmentation on the image canvas. Polygons are
// rasterized and unioned; RLE objects are decoded. Null/empty -> all-zero.
inline BinaryMask segmentation_mask(const json& seg, int height, int width) {
  if (seg.is_null()) return BinaryMask(height, width);
  if (seg.is_object()) {
    RleMask r = rle_from_json(seg);
    if (r.height != height || r.width != width)
      throw ValidationError("RLE size disagrees with image size");
    return rle_decode(r);
  }
  if (seg.is_array()) {
    BinaryMask out(height, width);
    for (const auto& flat_j : seg) {
      if (!flat_j.is_array()) throw ValidationError("polygon must be a flat array");
      std::vector<double> flat;
      flat.reserve(flat_j.size());
      for (const auto& v : flat_j) flat.push_back(detail::as_double(v, "polygon coord"));
      BinaryMask piece = rasterize_polygon(polygon_from_flat(flat), height, width);
      for (std::size_t i = 0; i < out.bits.size(); ++i) out.bits[i] |= piece.bits[i];
    }
    return out;
  }
  throw ValidationError("segmentation must be a polygon list or an RLE object");
}

inline BinaryMask annotation_mask(const AnnotationRecord& a, const ImageRecord& im) {
  return segmentation_mask(a.segmentation, im.height, im.width);
}

// --- parsing ---------------------------------------------------------------

inline ImageRecord image_from_json(json j) {
  ImageRecord im;
  im.id = detail::as_int(j.at("id"), "image id");
  im.width = static_cast<int>(detail::as_int(j.at("width"), "image width"));
  im.height = static_cast<int>(detail::as_int(j.at("height"), "image height"));
  detail::take(j, "id");
  detail::take(j, "width");
  detail::take(j, "height");
  json fn = detail::take(j, "file_name");
  im.file_name = fn.is_string() ? fn.get<std::string>() : std::string();
  im.extra = std::move(j);
  return im;
}

inline CategoryRecord category_from_json(json j) {
  CategoryRecord c;
  c.id = detail::as_int(j.at("id"), "category id");
  detail::take(j, "id");
  json name = detail::take(j, "name");
  c.name = name.is_string() ? name.get<std::string>() : std::string();
  c.extra = std::move(j);
  return c;
}

inline OcclusionRecord occlusion_from_json(const json& j) {
  if (!j.is_object()) throw ValidationError("\"occlusion\" must be an object");
  OcclusionRecord o;
  for (const auto& v : j.at("occluder_ids"))
    o.occluder_ids.push_back(detail::as_int(v, "occluder id"));
  o.segmentation = rle_from_json(j.at("segmentation"));
  o.area = detail::as_int(j.at("area"), "occlusion area");
  return o;
}

inline json occlusion_to_json(const OcclusionRecord& o) {
  return json{{"occluder_ids", o.occluder_ids},
              {"segmentation", rle_to_json(o.segmentation)},
              {"area", o.area}};
}

inline AnnotationRecord annotation_from_json(json j) {
  AnnotationRecord a;
  a.id = detail::as_int(j.at("id"), "annotation id");
  a.image_id = detail::as_int(j.at("image_id"), "annotation image_id");
  a.category_id = detail::as_int(j.at("category_id"), "annotation category_id");
  const auto& bbox = j.at("bbox");
  if (!bbox.is_array() || bbox.size() != 4)
    throw ValidationError("bbox must be [x, y, w, h]");
  a.bbox = Box{detail::as_double(bbox[0], "bbox.x"), detail::as_double(bbox[1], "bbox.y"),
               detail::as_double(bbox[2], "bbox.w"), detail::as_double(bbox[3], "bbox.h")};
  for (const char* k : {"id", "image_id", "category_id", "bbox"}) detail::take(j, k);
  a.segmentation = detail::take(j, "segmentation");
  json area = detail::take(j, "area");
  a.area = area.is_null() ? 0.0 : detail::as_double(area, "annotation area");
  json crowd = detail::take(j, "iscrowd");
  a.iscrowd = crowd.is_null() ? 0 : static_cast<int>(detail::as_int(crowd, "iscrowd"));
  json occ = detail::take(j, "occlusion");
  if (!occ.is_null()) a.occlusion = occlusion_from_json(occ);
  a.extra = std::move(j);
  return a;
}

inline OcclusionMeta occlusion_meta_from_json(const json& j) {
  OcclusionMeta m;
  m.coverage_threshold = detail::as_double(j.at("coverage_threshold"), "coverage_threshold");
  m.clip_mode = clip_mode_from_string(j.at("clip_mode").get<std::string>());
  m.tool_version = j.at("tool_version").get<std::string>();
  return m;
}

inline Dataset dataset_from_json(json j) {
  if (!j.is_object()) throw ValidationError("dataset root must be a JSON object");
  Dataset ds;
  auto parse_list = [](json arr, auto parse_one, auto& out, const char* what) {
    if (arr.is_null()) return;
    if (!arr.is_array()) throw ValidationError(std::string(what) + " must be an array");
    out.reserve(arr.size());
    for (auto& rec : arr) {
      try {
        out.push_back(parse_one(std::move(rec)));
      } catch (const json::exception& e) {
        throw ValidationError(std::string("bad ") + what + " record: " + e.what());
      }
    }
  };
  parse_list(detail::take(j, "images"), image_from_json, ds.images, "images");
  parse_list(detail::take(j, "annotations"), annotation_from_json, ds.annotations,
             "annotations");
  parse_list(detail::take(j, "categories"), category_from_json, ds.categories,
             "categories");
  json meta = detail::take(j, "occlusion_info");
  if (!meta.is_null()) ds.occlusion_meta = occlusion_meta_from_json(meta);
  ds.extra = std::move(j);
  return ds;
}

inline Dataset parse_dataset_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError("malformed JSON at byte " + std::to_string(e.byte) + ": " + e.what());
  }
  return dataset_from_json(std::move(j));
}

inline Dataset parse_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return parse_dataset_text(buf.str());
  } catch (ParseError& e) {
    throw ParseError(path + ": " + e.what());
  }
}

// --- validation -------------------------------------------------------------

enum class Severity { error, warning };

struct Violation {
  Severity severity = Severity::error;
  std::string rule;
  std::int64_t record_id = 0;
  std::string message;

  bool operator==(const Violation&) const = default;
};

inline std::vector<Violation> validate_dataset(const Dataset& ds) {
  std::vector<Violation> out;
  auto err = [&](const std::string& rule, std::int64_t id, const std::string& msg) {
    out.push_back({Severity::error, rule, id, msg});
  };
  auto warn = [&](const std::string& rule, std::int64_t id, const std::string& msg) {
    out.push_back({Severity::warning, rule, id, msg});
  };

  std::unordered_map<std::int64_t, const ImageRecord*> images;
  std::unordered_set<std::int64_t> cat_ids;
  std::unordered_map<std::int64_t, const AnnotationRecord*> anns;

  for (const auto& im : ds.images) {
    if (!images.emplace(im.id, &im).second)
      err("duplicate-image-id", im.id, "image id appears more than once");
    if (im.width <= 0 || im.height <= 0)
      err("bad-image-size", im.id, "width and height must be positive");
  }
  for (const auto& c : ds.categories)
    if (!cat_ids.insert(c.id).second)
      err("duplicate-category-id", c.id, "category id appears more than once");
  for (const auto& a : ds.annotations)
    if (!anns.emplace(a.id, &a).second)
      err("duplicate-annotation-id", a.id, "annotation id appears more than once");

  for (const auto& a : ds.annotations) {
    auto im_it = images.find(a.image_id);
    if (im_it == images.end())
      err("dangling-image-ref", a.id,
          "annotation references missing image " + std::to_string(a.image_id));
    if (!cat_ids.count(a.category_id))
      err("dangling-category-ref", a.id,
          "annotation references missing category " + std::to_string(a.category_id));
    if (a.bbox.w < 0 || a.bbox.h < 0)
      err("negative-bbox", a.id, "bbox width/height must be >= 0");

    const ImageRecord* im = im_it == images.end() ? nullptr : im_it->second;
    if (im && im->width > 0 && im->height > 0) {
      try {
        const BinaryMask m = annotation_mask(a, *im);
        const auto px = static_cast<std::int64_t>(m.area());
        if (!a.segmentation.is_null() && px != std::llround(a.area))
          warn("area-mismatch", a.id,
               "stored area " + std::to_string(std::llround(a.area)) +
                   " != rasterized " + std::to_string(px));
      } catch (const Error& e) {
        err("bad-segmentation", a.id, e.what());
      }
    }

    if (a.occlusion) {
      const auto& o = *a.occlusion;
      if (o.occluder_ids.empty())
        err("empty-occluder-list", a.id, "occlusion.occluder_ids must be non-empty");
      for (std::int64_t oid : o.occluder_ids) {
        if (oid == a.id)
          err("self-occlusion", a.id, "annotation listed as its own occluder");
        else if (!anns.count(oid))
          err("dangling-occluder-ref", a.id,
              "occluder id " + std::to_string(oid) + " not present");
        else if (anns.at(oid)->image_id != a.image_id)
          err("cross-image-occluder", a.id,
              "occluder " + std::to_string(oid) + " lives on another image");
      }
      if (o.area <= 0) err("empty-occlusion", a.id, "occlusion.area must be > 0");
      if (im) {
        if (o.segmentation.height != im->height || o.segmentation.width != im->width)
          err("occlusion-size-mismatch", a.id,
              "occlusion mask size disagrees with image size");
        else if (o.segmentation.pixel_count() !=
                 static_cast<std::uint64_t>(im->height) *
                     static_cast<std::uint64_t>(im->width))
          err("bad-occlusion-rle", a.id, "occlusion RLE counts do not sum to h*w");
        else if (static_cast<std::int64_t>(o.segmentation.area()) != o.area)
          warn("occlusion-area-mismatch", a.id,
               "occlusion.area disagrees with decoded mask");
      }
    }
  }

  // canonical order: rule name, then record id, so permuted inputs validate
  // to the same list
  std::sort(out.begin(), out.end(), [](const Violation& a, const Violation& b) {
    if (a.rule != b.rule) return a.rule < b.rule;
    if (a.record_id != b.record_id) return a.record_id < b.record_id;
    return a.message < b.message;
  });
  return out;
}

inline bool has_errors(const std::vector<Violation>& vs) {
  for (const auto& v : vs)
    if (v.severity == Severity::error) return true;
  return false;
}

inline json violations_to_json(const std::vector<Violation>& vs) {
  json arr = json::array();
  for (const auto& v : vs)
    arr.push_back({{"severity", v.severity == Severity::error ? "error" : "warning"},
                   {"rule", v.rule},
                   {"record_id", v.record_id},
                   {"message", v.message}});
  return arr;
}

// --- writing ----------------------------------------------------------------

inline json image_to_json(const ImageRecord& im) {
  json j = im.extra;
  j["id"] = im.id;
  j["width"] = im.width;
  j["height"] = im.height;
  j["file_name"] = im.file_name;
  return j;
}

inline json category_to_json(const CategoryRecord& c) {
  json j = c.extra;
  j["id"] = c.id;
  j["name"] = c.name;
  return j;
}

inline json annotation_to_json(const AnnotationRecord& a) {
  json j = a.extra;
  j["id"] = a.id;
  j["image_id"] = a.image_id;
  j["category_id"] = a.category_id;
  j["bbox"] = {detail::number(a.bbox.x), detail::number(a.bbox.y),
               detail::number(a.bbox.w), detail::number(a.bbox.h)};
  if (!a.segmentation.is_null()) j["segmentation"] = a.segmentation;
  j["area"] = detail::number(a.area);
  j["iscrowd"] = a.iscrowd;
  if (a.occlusion) j["occlusion"] = occlusion_to_json(*a.occlusion);
  return j;
}

inline json dataset_to_json(const Dataset& ds) {
  json j = ds.extra;
  j["images"] = json::array();
  for (const auto& im : ds.images) j["images"].push_back(image_to_json(im));
  j["annotations"] = json::array();
  for (const auto& a : ds.annotations) j["annotations"].push_back(annotation_to_json(a));
  j["categories"] = json::array();
  for (const auto& c : ds.categories) j["categories"].push_back(category_to_json(c));
  if (ds.occlusion_meta)
    j["occlusion_info"] = {{"coverage_threshold", ds.occlusion_meta->coverage_threshold},
                           {"clip_mode", to_string(ds.occlusion_meta->clip_mode)},
                           {"tool_version", ds.occlusion_meta->tool_version}};
  return j;
}

inline std::string write_dataset_text(const Dataset& ds) {
  const auto violations = validate_dataset(ds);
  if (has_errors(violations)) {
    for (const auto& v : violations)
      if (v.severity == Severity::error)
        throw ValidationError("refusing to write: [" + v.rule + "] record " +
                              std::to_string(v.record_id) + ": " + v.message);
  }
  return dataset_to_json(ds).dump(1) + "\n";
}

inline void write_dataset(const Dataset& ds, const std::string& path) {
  const std::string text = write_dataset_text(ds);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << text;
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace occuray
