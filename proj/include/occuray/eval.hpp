#pragma once

// COCO-protocol detection/segmentation evaluation: greedy per-image matching
// with crowd absorption, 101-point interpolated AP per category, averaged
// over IoU thresholds 0.50:0.05:0.95, with optional per-subset reporting.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "occuray/coco.hpp"
#include "occuray/mask.hpp"
#include "occuray/split.hpp"

namespace occuray {

struct DetectionResult {
  std::int64_t id = 0;  // rank tie-break; assigned from load order
  std::int64_t image_id = 0;
  std::int64_t category_id = 0;
  double score = 0.0;
  Box bbox;
  std::optional<RleMask> mask;
};

enum class IouKind { bbox, mask };

enum class MatchLabel { tp, fp, ignored };

struct MatchResult {
  std::vector<MatchLabel> labels;          // parallel to the det input order
  std::vector<std::int64_t> matched_gt;    // matched GT annotation id, or -1
  std::int64_t unmatched_gt = 0;           // non-crowd GTs left unmatched
};

inline std::vector<double> default_iou_thresholds() {
  std::vector<double> t;
  for (int k = 0; k < 10; ++k) t.push_back(0.50 + 0.05 * k);
  return t;
}

// --- IoU primitives ---------------------------------------------------------

// Boxes in (x, y, w, h). For crowd GT the denominator is the detection's own
// area, so a detection inside a crowd region scores high regardless of the
// region's extent.
inline double box_iou(const Box& det, const Box& gt, bool crowd) {
  const double ix = std::max(0.0, std::min(det.x + det.w, gt.x + gt.w) -
                                      std::max(det.x, gt.x));
  const double iy = std::max(0.0, std::min(det.y + det.h, gt.y + gt.h) -
                                      std::max(det.y, gt.y));
  const double inter = ix * iy;
  const double denom = crowd ? det.w * det.h : det.w * det.h + gt.w * gt.h - inter;
  if (denom <= 0.0) return 0.0;
  return inter / denom;
}

inline double mask_iou(const RleMask& det, const RleMask& gt, bool crowd) {
  const auto inter = rle_intersection_count(det, gt);
  const auto da = det.area();
  const auto ga = gt.area();
  const std::uint64_t denom = crowd ? da : da + ga - inter;
  if (denom == 0) return 0.0;
  return static_cast<double>(inter) / static_cast<double>(denom);
}

// --- matching ---------------------------------------------------------------

namespace detail {

struct GtEntry {
  std::int64_t id = 0;
  bool crowd = false;
};

// Greedy matching on a precomputed IoU matrix. `gts` must list non-crowd
// entries first (crowds absorb leftover detections without producing TPs).
inline MatchResult match_on_ious(const std::vector<std::vector<double>>& ious,
                                 const std::vector<GtEntry>& gts,
                                 double iou_threshold) {
  MatchResult res;
  const std::size_t nd = ious.size();
  res.labels.assign(nd, MatchLabel::fp);
  res.matched_gt.assign(nd, -1);
  std::vector<char> gt_used(gts.size(), 0);
  for (std::size_t d = 0; d < nd; ++d) {
    double best = std::min(iou_threshold, 1.0 - 1e-10);
    int m = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (gt_used[g] && !gts[g].crowd) continue;
      // once matched to a real GT, never trade it for a crowd region
      if (m > -1 && !gts[static_cast<std::size_t>(m)].crowd && gts[g].crowd) break;
      if (ious[d][g] < best) continue;
      best = ious[d][g];
      m = static_cast<int>(g);
    }
    if (m == -1) continue;
    const auto& gt = gts[static_cast<std::size_t>(m)];
    res.matched_gt[d] = gt.id;
    if (gt.crowd) {
      res.labels[d] = MatchLabel::ignored;
    } else {
      res.labels[d] = MatchLabel::tp;
      gt_used[static_cast<std::size_t>(m)] = 1;
    }
  }
  std::int64_t unmatched = 0;
  for (std::size_t g = 0; g < gts.size(); ++g)
    if (!gts[g].crowd && !gt_used[g]) ++unmatched;
  res.unmatched_gt = unmatched;
  return res;
}

inline RleMask detection_rle(const DetectionResult& d) {
  if (!d.mask)
    throw ValidationError("detection " + std::to_string(d.id) +
                          " has no mask but mask metrics were requested");
  return *d.mask;
}

}  // namespace detail

// Match one image+category cell. `dets` must already be sorted by descending
// score (ties by ascending id); crowd GTs may appear anywhere in `gts`.
inline MatchResult match_detections(const std::vector<const DetectionResult*>& dets,
                                    const std::vector<const AnnotationRecord*>& gts,
                                    const ImageRecord& im, double iou_threshold,
                                    IouKind kind) {
  std::vector<const AnnotationRecord*> ordered;
  for (const auto* g : gts)
    if (!g->iscrowd) ordered.push_back(g);
  for (const auto* g : gts)
    if (g->iscrowd) ordered.push_back(g);

  std::vector<detail::GtEntry> entries;
  entries.reserve(ordered.size());
  std::vector<RleMask> gt_rles;
  if (kind == IouKind::mask)
    for (const auto* g : ordered)
      gt_rles.push_back(rle_encode(annotation_mask(*g, im)));
  for (const auto* g : ordered) entries.push_back({g->id, g->iscrowd != 0});

  std::vector<std::vector<double>> ious(dets.size(),
                                        std::vector<double>(ordered.size(), 0.0));
  for (std::size_t d = 0; d < dets.size(); ++d) {
    const RleMask det_rle =
        kind == IouKind::mask ? detail::detection_rle(*dets[d]) : RleMask{};
    for (std::size_t g = 0; g < ordered.size(); ++g) {
      const bool crowd = entries[g].crowd;
      ious[d][g] = kind == IouKind::bbox
                       ? box_iou(dets[d]->bbox, ordered[g]->bbox, crowd)
                       : mask_iou(det_rle, gt_rles[g], crowd);
    }
  }
  return detail::match_on_ious(ious, entries, iou_threshold);
}

// --- average precision ------------------------------------------------------

// 101-point interpolated AP over labels ordered by descending score. Ignored
// labels contribute nothing. num_gt = 0: 0.0 if any label present, else
// undefined.
inline std::optional<double> average_precision(const std::vector<MatchLabel>& labels,
                                               std::int64_t num_gt) {
  if (num_gt <= 0) {
    if (labels.empty()) return std::nullopt;
    return 0.0;
  }
  std::vector<double> recall, precision;
  const double eps = std::numeric_limits<double>::epsilon();
  double tp = 0.0, fp = 0.0;
  for (const auto label : labels) {
    if (label == MatchLabel::ignored) continue;
    if (label == MatchLabel::tp) ++tp; else ++fp;
    recall.push_back(tp / static_cast<double>(num_gt));
    precision.push_back(tp / (tp + fp + eps));
  }
  // right-to-left precision envelope
  for (std::size_t i = precision.size(); i-- > 1;)
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double sum = 0.0;
  for (int ri = 0; ri <= 100; ++ri) {
    const double thr = static_cast<double>(ri) / 100.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), thr);
    if (it != recall.end())
      sum += precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return sum / 101.0;
}

// --- full evaluation --------------------------------------------------------

struct MetricSet {
  std::optional<double> ap, ap50, ap75;

  bool operator==(const MetricSet&) const = default;
};

struct CategoryMetrics {
  std::int64_t category_id = 0;
  std::string name;
  MetricSet bbox, mask;
};

struct SubsetMetrics {
  std::string name;
  MetricSet bbox, mask;
};

struct EvalReport {
  MetricSet bbox, mask;  // AP_b / AP_b50 / AP_b75 and AP_m / AP_m50 / AP_m75
  std::vector<CategoryMetrics> per_category;
  std::vector<SubsetMetrics> per_subset;
};

struct EvalOptions {
  bool with_bbox = true;
  bool with_mask = true;
  int max_dets = 100;
};

namespace detail {

struct RankedLabel {
  double score = 0.0;
  std::int64_t det_id = 0;
};

// AP per threshold for one (kind, category) over a fixed image set.
// Undefined (nullopt) when the category has no non-crowd GT in the set.
struct CategoryCurve {
  std::vector<std::optional<double>> ap_per_threshold;
};

inline CategoryCurve eval_category(
    const std::vector<const ImageRecord*>& images,
    const std::map<std::int64_t, std::vector<const AnnotationRecord*>>& gt_by_image,
    const std::map<std::int64_t, std::vector<const DetectionResult*>>& det_by_image,
    IouKind kind, const std::vector<double>& thresholds, int max_dets) {
  std::int64_t npig = 0;
  std::vector<RankedLabel> ranked;
  std::vector<std::vector<MatchLabel>> labels_per_t(thresholds.size());

  for (const ImageRecord* im : images) {
    const auto git = gt_by_image.find(im->id);
    const auto dit = det_by_image.find(im->id);
    std::vector<const AnnotationRecord*> gts =
        git == gt_by_image.end() ? std::vector<const AnnotationRecord*>{} : git->second;
    std::vector<const DetectionResult*> dets =
        dit == det_by_image.end() ? std::vector<const DetectionResult*>{} : dit->second;
    for (const auto* g : gts)
      if (!g->iscrowd) ++npig;
    if (dets.empty()) continue;
    std::sort(dets.begin(), dets.end(),
              [](const DetectionResult* a, const DetectionResult* b) {
                if (a->score != b->score) return a->score > b->score;
                return a->id < b->id;
              });
    if (static_cast<int>(dets.size()) > max_dets) dets.resize(max_dets);
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
      const MatchResult mr = match_detections(dets, gts, *im, thresholds[t], kind);
      labels_per_t[t].insert(labels_per_t[t].end(), mr.labels.begin(), mr.labels.end());
    }
    for (const auto* d : dets) ranked.push_back({d->score, d->id});
  }

  CategoryCurve curve;
  curve.ap_per_threshold.assign(thresholds.size(), std::nullopt);
  if (npig == 0) return curve;

  // global ranking across images: score desc, detection id asc
  std::vector<std::size_t> order(ranked.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (ranked[a].score != ranked[b].score) return ranked[a].score > ranked[b].score;
    return ranked[a].det_id < ranked[b].det_id;
  });
  for (std::size_t t = 0; t < thresholds.size(); ++t) {
    std::vector<MatchLabel> sorted_labels;
    sorted_labels.reserve(order.size());
    for (std::size_t i : order) sorted_labels.push_back(labels_per_t[t][i]);
    curve.ap_per_threshold[t] = average_precision(sorted_labels, npig);
  }
  return curve;
}

inline MetricSet summarize(const std::vector<CategoryCurve>& curves,
                           const std::vector<double>& thresholds) {
  auto mean_at = [&](auto pick) -> std::optional<double> {
    double sum = 0.0;
    int n = 0;
    for (const auto& c : curves) {
      const std::optional<double> v = pick(c);
      if (!v) continue;
      sum += *v;
      ++n;
    }
    if (n == 0) return std::nullopt;
    return sum / n;
  };
  MetricSet m;
  m.ap = mean_at([&](const CategoryCurve& c) -> std::optional<double> {
    double sum = 0.0;
    for (const auto& v : c.ap_per_threshold) {
      if (!v) return std::nullopt;
      sum += *v;
    }
    return sum / static_cast<double>(thresholds.size());
  });
  auto at = [&](double t) {
    std::size_t idx = 0;
    for (std::size_t i = 0; i < thresholds.size(); ++i)
      if (thresholds[i] == t) idx = i;
    return [idx](const CategoryCurve& c) { return c.ap_per_threshold[idx]; };
  };
  m.ap50 = mean_at(at(0.50));
  m.ap75 = mean_at(at(0.75));
  return m;
}

}  // namespace detail

// (bbox metrics, mask metrics) for one image subset; per-category rows
// optionally collected in category order.
inline std::pair<MetricSet, MetricSet> evaluate_subset(
    const Dataset& ds, const std::vector<DetectionResult>& dets,
    const std::vector<const ImageRecord*>& images, const EvalOptions& opts,
    std::vector<CategoryMetrics>* per_category = nullptr) {
  const auto thresholds = default_iou_thresholds();
  std::set<std::int64_t> image_ids;
  for (const auto* im : images) image_ids.insert(im->id);

  std::vector<detail::CategoryCurve> bbox_curves, mask_curves;
  for (const auto& cat : ds.categories) {
    std::map<std::int64_t, std::vector<const AnnotationRecord*>> gt_by_image;
    for (const auto& a : ds.annotations)
      if (a.category_id == cat.id && image_ids.count(a.image_id))
        gt_by_image[a.image_id].push_back(&a);
    std::map<std::int64_t, std::vector<const DetectionResult*>> det_by_image;
    for (const auto& d : dets)
      if (d.category_id == cat.id && image_ids.count(d.image_id))
        det_by_image[d.image_id].push_back(&d);

    detail::CategoryCurve bc, mc;
    bc.ap_per_threshold.assign(thresholds.size(), std::nullopt);
    mc.ap_per_threshold.assign(thresholds.size(), std::nullopt);
    if (opts.with_bbox)
      bc = detail::eval_category(images, gt_by_image, det_by_image, IouKind::bbox,
                                 thresholds, opts.max_dets);
    if (opts.with_mask)
      mc = detail::eval_category(images, gt_by_image, det_by_image, IouKind::mask,
                                 thresholds, opts.max_dets);
    const MetricSet bm = detail::summarize({bc}, thresholds);
    const MetricSet mm = detail::summarize({mc}, thresholds);
    if (per_category) per_category->push_back({cat.id, cat.name, bm, mm});
    bbox_curves.push_back(std::move(bc));
    mask_curves.push_back(std::move(mc));
  }
  return {detail::summarize(bbox_curves, thresholds),
          detail::summarize(mask_curves, thresholds)};
}

inline EvalReport evaluate(const Dataset& ds, const std::vector<DetectionResult>& dets,
                           const SplitResult* split = nullptr,
                           const EvalOptions& opts = {}) {
  std::unordered_map<std::int64_t, const ImageRecord*> images;
  for (const auto& im : ds.images) images.emplace(im.id, &im);
  std::set<std::int64_t> cat_ids;
  for (const auto& c : ds.categories) cat_ids.insert(c.id);
  for (const auto& d : dets) {
    if (!images.count(d.image_id))
      throw ValidationError("detection " + std::to_string(d.id) +
                            " references missing image " + std::to_string(d.image_id));
    if (!cat_ids.count(d.category_id))
      throw ValidationError("detection " + std::to_string(d.id) +
                            " references missing category " +
                            std::to_string(d.category_id));
    if (opts.with_mask && !d.mask)
      throw ValidationError("detection " + std::to_string(d.id) +
                            " has no mask but mask metrics were requested");
  }

  // image order: ascending id
  std::vector<const ImageRecord*> all_images;
  for (const auto& im : ds.images) all_images.push_back(&im);
  std::sort(all_images.begin(), all_images.end(),
            [](const ImageRecord* a, const ImageRecord* b) { return a->id < b->id; });

  EvalReport report;
  const auto overall = evaluate_subset(ds, dets, all_images, opts, &report.per_category);
  report.bbox = overall.first;
  report.mask = overall.second;

  if (split) {
    const std::vector<std::pair<std::string, const std::vector<std::int64_t>*>> subsets =
        {{"train", &split->train_ids}, {"val", &split->val_ids}, {"occ", &split->occ_ids}};
    for (const auto& [name, ids] : subsets) {
      std::vector<const ImageRecord*> subset_images;
      for (std::int64_t id : *ids) {
        auto it = images.find(id);
        if (it != images.end()) subset_images.push_back(it->second);
      }
      std::sort(subset_images.begin(), subset_images.end(),
                [](const ImageRecord* a, const ImageRecord* b) { return a->id < b->id; });
      const auto r = evaluate_subset(ds, dets, subset_images, opts);
      report.per_subset.push_back({name, r.first, r.second});
    }
  }
  return report;
}

// --- detections I/O & reporting ----------------------------------------------

inline std::vector<DetectionResult> detections_from_json(const json& arr) {
  if (!arr.is_array()) throw ValidationError("results file must be a JSON array");
  std::vector<DetectionResult> out;
  out.reserve(arr.size());
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const auto& j = arr[i];
    DetectionResult d;
    d.id = static_cast<std::int64_t>(i);
    d.image_id = detail::as_int(j.at("image_id"), "detection image_id");
    d.category_id = detail::as_int(j.at("category_id"), "detection category_id");
    d.score = detail::as_double(j.at("score"), "detection score");
    const auto& bbox = j.at("bbox");
    if (!bbox.is_array() || bbox.size() != 4)
      throw ValidationError("detection bbox must be [x, y, w, h]");
    d.bbox = Box{detail::as_double(bbox[0], "bbox.x"), detail::as_double(bbox[1], "bbox.y"),
                 detail::as_double(bbox[2], "bbox.w"), detail::as_double(bbox[3], "bbox.h")};
    if (j.contains("segmentation")) d.mask = rle_from_json(j.at("segmentation"));
    out.push_back(std::move(d));
  }
  return out;
}

inline std::vector<DetectionResult> load_detections(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(path + ": malformed JSON at byte " + std::to_string(e.byte) + ": " +
                     e.what());
  }
  return detections_from_json(j);
}

namespace detail {

inline json metric_json(const std::optional<double>& v) {
  if (!v) return nullptr;
  return *v;
}

}  // namespace detail

inline json report_to_json(const EvalReport& r) {
  json j{{"ap_b", detail::metric_json(r.bbox.ap)},
         {"ap_b50", detail::metric_json(r.bbox.ap50)},
         {"ap_b75", detail::metric_json(r.bbox.ap75)},
         {"ap_m", detail::metric_json(r.mask.ap)},
         {"ap_m50", detail::metric_json(r.mask.ap50)},
         {"ap_m75", detail::metric_json(r.mask.ap75)}};
  json cats = json::array();
  for (const auto& c : r.per_category)
    cats.push_back({{"category_id", c.category_id},
                    {"name", c.name},
                    {"ap_b", detail::metric_json(c.bbox.ap)},
                    {"ap_b50", detail::metric_json(c.bbox.ap50)},
                    {"ap_b75", detail::metric_json(c.bbox.ap75)},
                    {"ap_m", detail::metric_json(c.mask.ap)},
                    {"ap_m50", detail::metric_json(c.mask.ap50)},
                    {"ap_m75", detail::metric_json(c.mask.ap75)}});
  j["per_category"] = cats;
  json subs = json::array();
  for (const auto& s : r.per_subset)
    subs.push_back({{"subset", s.name},
                    {"ap_b", detail::metric_json(s.bbox.ap)},
                    {"ap_b50", detail::metric_json(s.bbox.ap50)},
                    {"ap_b75", detail::metric_json(s.bbox.ap75)},
                    {"ap_m", detail::metric_json(s.mask.ap)},
                    {"ap_m50", detail::metric_json(s.mask.ap50)},
                    {"ap_m75", detail::metric_json(s.mask.ap75)}});
  j["per_subset"] = subs;
  return j;
}

inline std::string report_table(const EvalReport& r) {
  std::ostringstream out;
  auto cell = [](const std::optional<double>& v) {
    std::ostringstream c;
    if (v)
      c << std::fixed << std::setprecision(3) << *v;
    else
      c << "-";
    return c.str();
  };
  auto row = [&](const std::string& name, const MetricSet& b, const MetricSet& m) {
    out << std::left << std::setw(12) << name;
    for (const auto& v : {b.ap, b.ap50, b.ap75, m.ap, m.ap50, m.ap75})
      out << std::right << std::setw(9) << cell(v);
    out << "\n";
  };
  out << std::left << std::setw(12) << "";
  for (const char* h : {"AP_b", "AP_b50", "AP_b75", "AP_m", "AP_m50", "AP_m75"})
    out << std::right << std::setw(9) << h;
  out << "\n";
  row("all", r.bbox, r.mask);
  for (const auto& s : r.per_subset) row(s.name, s.bbox, s.mask);
  for (const auto& c : r.per_category) row(c.name, c.bbox, c.mask);
  return out.str();
}

}  // namespace occuray
