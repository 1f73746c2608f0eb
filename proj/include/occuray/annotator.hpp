#pragma once

// Occlusion annotation: find occludee candidates by bbox coverage, verify by
// mask intersection, store the clipped occluder union per occludee, and count
// dataset statistics.

#include <algorithm>
#include <cstdint>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "occuray/coco.hpp"
#include "occuray/mask.hpp"
#include "occuray/parallel.hpp"

namespace occuray {

struct AnnotatorConfig {
  double coverage_threshold = 0.05;
  ClipMode clip_mode = ClipMode::mask;
  std::int64_t min_occlusion_area = 1;
};

struct DatasetStats {
  std::int64_t images_total = 0;
  std::int64_t images_annotated = 0;  // >= 1 annotation
  std::int64_t images_multi = 0;      // >= 2 annotations
  std::int64_t images_occluded = 0;   // >= 1 occlusion record
  std::int64_t annos_total = 0;
  std::int64_t annos_extra = 0;       // annotations carrying an occlusion record

  bool operator==(const DatasetStats&) const = default;
};

// One candidate occludee and the occluders whose bboxes cover enough of it.
struct OccludeeCandidate {
  std::int64_t occludee_id = 0;
  std::vector<std::int64_t> candidate_occluder_ids;
};

namespace detail {

// Annotations that can occlude or be occluded: real (non-crowd) instances
// with a non-empty mask.
struct InstanceMask {
  const AnnotationRecord* ann = nullptr;
  BinaryMask mask;
};

inline std::vector<InstanceMask> eligible_instances(
    const std::vector<const AnnotationRecord*>& anns, const ImageRecord& im) {
  std::vector<InstanceMask> out;
  for (const AnnotationRecord* a : anns) {
    if (a->iscrowd) continue;
    BinaryMask m = annotation_mask(*a, im);
    if (m.empty()) continue;
    out.push_back({a, std::move(m)});
  }
  return out;
}

}  // namespace detail

// Pairwise candidate scan: A is a candidate occludee of B when at least
// `coverage_threshold` of A's mask pixels fall inside B's bbox (inclusive).
// Callers pass only eligible annotations of a single image.
inline std::vector<OccludeeCandidate> find_occludee_candidates(
    const std::vector<const AnnotationRecord*>& anns, const ImageRecord& im,
    const AnnotatorConfig& cfg) {
  const auto inst = detail::eligible_instances(anns, im);
  std::vector<OccludeeCandidate> out;
  for (const auto& a : inst) {
    OccludeeCandidate cand{a.ann->id, {}};
    for (const auto& b : inst) {
      if (a.ann->id == b.ann->id) continue;
      if (coverage_fraction(a.mask, b.ann->bbox) >= cfg.coverage_threshold)
        cand.candidate_occluder_ids.push_back(b.ann->id);
    }
    if (!cand.candidate_occluder_ids.empty()) out.push_back(std::move(cand));
  }
  return out;
}

// Verify candidates by mask intersection and build the stored records. The
// occlusion mask is the union over verified occluders of occluder ∩ clip
// region, where the clip region is the occludee's bbox raster (bbox mode) or
// its mask (mask mode).
inline std::vector<std::pair<std::int64_t, OcclusionRecord>> resolve_occlusions(
    const std::vector<const AnnotationRecord*>& anns, const ImageRecord& im,
    const std::vector<OccludeeCandidate>& candidates, const AnnotatorConfig& cfg) {
  const auto inst = detail::eligible_instances(anns, im);
  std::map<std::int64_t, const detail::InstanceMask*> by_id;
  for (const auto& i : inst) by_id[i.ann->id] = &i;

  std::vector<std::pair<std::int64_t, OcclusionRecord>> out;
  for (const auto& cand : candidates) {
    auto it = by_id.find(cand.occludee_id);
    if (it == by_id.end()) continue;
    const detail::InstanceMask& occludee = *it->second;
    const BinaryMask clip = cfg.clip_mode == ClipMode::bbox
                                ? box_raster(occludee.ann->bbox, im.height, im.width)
                                : occludee.mask;
    OcclusionRecord rec;
    BinaryMask acc(im.height, im.width);
    for (std::int64_t oid : cand.candidate_occluder_ids) {
      auto oit = by_id.find(oid);
      if (oit == by_id.end()) continue;
      const detail::InstanceMask& occluder = *oit->second;
      if (intersection_count(occluder.mask, occludee.mask) == 0)
        continue;  // bboxes overlapped but masks don't: not an occluder
      rec.occluder_ids.push_back(oid);
      const BinaryMask piece = intersect(occluder.mask, clip);
      for (std::size_t i = 0; i < acc.bits.size(); ++i) acc.bits[i] |= piece.bits[i];
    }
    if (rec.occluder_ids.empty()) continue;
    rec.area = static_cast<std::int64_t>(acc.area());
    if (rec.area < cfg.min_occlusion_area) continue;
    std::sort(rec.occluder_ids.begin(), rec.occluder_ids.end());
    rec.segmentation = rle_encode(acc);
    out.emplace_back(cand.occludee_id, std::move(rec));
  }
  return out;
}

// Produce the "-A" version of a dataset: same images/annotations, occlusion
// fields recomputed from scratch. Deterministic for fixed inputs; per-image
// work may run on `jobs` threads.
inline Dataset annotate_dataset(const Dataset& ds, const AnnotatorConfig& cfg,
                                int jobs = 1) {
  if (cfg.coverage_threshold <= 0.0 || cfg.coverage_threshold > 1.0)
    throw ValidationError("coverage_threshold must be in (0, 1]");
  Dataset base = ds;
  for (auto& a : base.annotations) a.occlusion.reset();
  base.occlusion_meta.reset();
  {
    const auto violations = validate_dataset(base);
    if (has_errors(violations))
      throw ValidationError("annotate_dataset: input dataset invalid: [" +
                            violations.front().rule + "] record " +
                            std::to_string(violations.front().record_id));
  }

  std::map<std::int64_t, const ImageRecord*> images;
  for (const auto& im : base.images) images[im.id] = &im;
  std::map<std::int64_t, std::vector<std::size_t>> ann_by_image;
  for (std::size_t i = 0; i < base.annotations.size(); ++i)
    ann_by_image[base.annotations[i].image_id].push_back(i);

  std::vector<std::pair<const ImageRecord*, const std::vector<std::size_t>*>> work;
  for (const auto& [iid, idxs] : ann_by_image) work.emplace_back(images.at(iid), &idxs);

  // records per work item, merged afterwards in image-id order
  std::vector<std::vector<std::pair<std::int64_t, OcclusionRecord>>> results(work.size());
  parallel_for(work.size(), jobs, [&](std::size_t w) {
    const auto& [im, idxs] = work[w];
    std::vector<const AnnotationRecord*> anns;
    anns.reserve(idxs->size());
    for (std::size_t i : *idxs) anns.push_back(&base.annotations[i]);
    const auto cands = find_occludee_candidates(anns, *im, cfg);
    results[w] = resolve_occlusions(anns, *im, cands, cfg);
  });

  std::map<std::int64_t, OcclusionRecord> by_ann;
  for (auto& recs : results)
    for (auto& [aid, rec] : recs) by_ann.emplace(aid, std::move(rec));
  for (auto& a : base.annotations) {
    auto it = by_ann.find(a.id);
    if (it != by_ann.end()) a.occlusion = std::move(it->second);
  }
  base.occlusion_meta = OcclusionMeta{cfg.coverage_threshold, cfg.clip_mode, kVersion};
  return base;
}

inline DatasetStats compute_statistics(const Dataset& ds) {
  DatasetStats s;
  s.images_total = static_cast<std::int64_t>(ds.images.size());
  s.annos_total = static_cast<std::int64_t>(ds.annotations.size());
  std::map<std::int64_t, std::pair<std::int64_t, std::int64_t>> per_image;  // anns, occluded
  for (const auto& im : ds.images) per_image[im.id];
  for (const auto& a : ds.annotations) {
    auto& [n, occ] = per_image[a.image_id];
    ++n;
    if (a.occlusion) {
      ++occ;
      ++s.annos_extra;
    }
  }
  for (const auto& im : ds.images) {
    const auto& [n, occ] = per_image[im.id];
    if (n >= 1) ++s.images_annotated;
    if (n >= 2) ++s.images_multi;
    if (occ >= 1) ++s.images_occluded;
  }
  return s;
}

inline json stats_to_json(const DatasetStats& s) {
  return json{{"images", {{"total", s.images_total},
                          {"annotated", s.images_annotated},
                          {"multi", s.images_multi},
                          {"occluded", s.images_occluded}}},
              {"annotations", {{"total", s.annos_total}, {"extra", s.annos_extra}}}};
}

// Aligned two-block table with the Total/Anno/Multi/Occlu and Total/Extra rows.
inline std::string stats_table(const DatasetStats& s) {
  std::ostringstream out;
  auto row = [&](const char* label, std::int64_t v) {
    out << "  " << std::left << std::setw(6) << label << std::right << std::setw(10)
        << v << "\n";
  };
  out << "Images\n";
  row("Total", s.images_total);
  row("Anno", s.images_annotated);
  row("Multi", s.images_multi);
  row("Occlu", s.images_occluded);
  out << "Annotations\n";
  row("Total", s.annos_total);
  row("Extra", s.annos_extra);
  return out.str();
}

}  // namespace occuray
