#pragma once

// Ablation split: discard empty images, then draw the occlusion subset from
// occluded images and the validation subset from non-occluded ones, spilling
// any deficit into train.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "occuray/coco.hpp"
#include "occuray/rng.hpp"

namespace occuray {

struct SplitConfig {
  double train = 0.78;
  double val = 0.12;
  double occ = 0.10;
  std::uint64_t seed = 0;
};

struct ImageTag {
  std::int64_t image_id = 0;
  std::int64_t ann_count = 0;
  bool occluded = false;

  bool operator==(const ImageTag&) const = default;
};

struct SplitResult {
  std::vector<std::int64_t> train_ids;
  std::vector<std::int64_t> val_ids;
  std::vector<std::int64_t> occ_ids;
  std::vector<ImageTag> manifest;
  std::vector<std::string> warnings;

  bool operator==(const SplitResult&) const = default;
};

// Tags for every image, ordered by image id.
inline std::vector<ImageTag> classify_images(const Dataset& ds) {
  std::map<std::int64_t, ImageTag> tags;
  for (const auto& im : ds.images) tags[im.id] = ImageTag{im.id, 0, false};
  for (const auto& a : ds.annotations) {
    auto it = tags.find(a.image_id);
    if (it == tags.end()) continue;
    ++it->second.ann_count;
    if (a.occlusion) it->second.occluded = true;
  }
  std::vector<ImageTag> out;
  out.reserve(tags.size());
  for (auto& [id, t] : tags) out.push_back(t);
  return out;
}

inline SplitResult ablation_split(const Dataset& ds, const SplitConfig& cfg) {
  if (std::abs(cfg.train + cfg.val + cfg.occ - 1.0) > 1e-9)
    throw ValidationError("split proportions must sum to 1");
  for (double f : {cfg.train, cfg.val, cfg.occ})
    if (f < 0.0 || f > 1.0) throw ValidationError("split proportions must be in [0, 1]");

  SplitResult res;
  res.manifest = classify_images(ds);

  std::vector<std::int64_t> occluded, plain;  // both ordered by image id
  for (const auto& t : res.manifest) {
    if (t.ann_count == 0) continue;  // empty images are discarded
    (t.occluded ? occluded : plain).push_back(t.image_id);
  }
  const auto n = static_cast<std::int64_t>(occluded.size() + plain.size());
  const auto want_occ = std::llround(cfg.occ * static_cast<double>(n));
  const auto want_val = std::llround(cfg.val * static_cast<double>(n));

  SplitMix64 rng(cfg.seed);
  rng.shuffle(occluded);
  rng.shuffle(plain);

  const auto take_occ = std::min<std::int64_t>(want_occ, occluded.size());
  if (take_occ < want_occ)
    res.warnings.push_back("occlusion pool exhausted: wanted " +
                           std::to_string(want_occ) + " images, only " +
                           std::to_string(occluded.size()) + " occluded; remainder to train");
  res.occ_ids.assign(occluded.begin(), occluded.begin() + take_occ);

  const auto take_val = std::min<std::int64_t>(want_val, plain.size());
  if (take_val < want_val)
    res.warnings.push_back("validation pool exhausted: wanted " +
                           std::to_string(want_val) + " non-occluded images, only " +
                           std::to_string(plain.size()) + "; remainder to train");
  res.val_ids.assign(plain.begin(), plain.begin() + take_val);

  res.train_ids.assign(occluded.begin() + take_occ, occluded.end());
  res.train_ids.insert(res.train_ids.end(), plain.begin() + take_val, plain.end());

  std::sort(res.train_ids.begin(), res.train_ids.end());
  std::sort(res.val_ids.begin(), res.val_ids.end());
  std::sort(res.occ_ids.begin(), res.occ_ids.end());
  return res;
}

inline json split_to_json(const SplitResult& r) {
  json manifest = json::array();
  for (const auto& t : r.manifest)
    manifest.push_back({{"image_id", t.image_id},
                        {"ann_count", t.ann_count},
                        {"occluded", t.occluded}});
  return json{{"train", r.train_ids}, {"val", r.val_ids},   {"occ", r.occ_ids},
              {"warnings", r.warnings}, {"manifest", manifest}};
}

inline SplitResult split_from_json(const json& j) {
  SplitResult r;
  for (const auto& v : j.at("train")) r.train_ids.push_back(v.get<std::int64_t>());
  for (const auto& v : j.at("val")) r.val_ids.push_back(v.get<std::int64_t>());
  for (const auto& v : j.at("occ")) r.occ_ids.push_back(v.get<std::int64_t>());
  if (j.contains("warnings"))
    for (const auto& v : j.at("warnings")) r.warnings.push_back(v.get<std::string>());
  if (j.contains("manifest"))
    for (const auto& t : j.at("manifest"))
      r.manifest.push_back(ImageTag{t.at("image_id").get<std::int64_t>(),
                                    t.at("ann_count").get<std::int64_t>(),
                                    t.at("occluded").get<bool>()});
  return r;
}

// Filter a dataset down to one subset's images (annotations follow images).
inline Dataset filter_dataset(const Dataset& ds, const std::vector<std::int64_t>& ids) {
  std::unordered_set<std::int64_t> keep(ids.begin(), ids.end());
  Dataset out;
  out.categories = ds.categories;
  out.occlusion_meta = ds.occlusion_meta;
  out.extra = ds.extra;
  for (const auto& im : ds.images)
    if (keep.count(im.id)) out.images.push_back(im);
  for (const auto& a : ds.annotations)
    if (keep.count(a.image_id)) out.annotations.push_back(a);
  return out;
}

}  // namespace occuray
