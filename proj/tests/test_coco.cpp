// Dataset model: parsing, validation, and round-trip fidelity.

#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <set>
#include <string>
#include <vector>

#include "helpers.hpp"
#include "occuray/annotator.hpp"
#include "occuray/coco.hpp"
#include "occuray/rng.hpp"

using namespace occuray;
using nlohmann::json;

namespace {

AnnotationRecord rect_ann(std::int64_t id, std::int64_t image_id,
                          std::int64_t cat, int r0, int r1, int c0, int c1) {
  AnnotationRecord a;
  a.id = id;
  a.image_id = image_id;
  a.category_id = cat;
  a.bbox = {double(c0), double(r0), double(c1 - c0 + 1), double(r1 - r0 + 1)};
  a.segmentation = json::array({testutil::rect_poly(r0, r1, c0, c1)});
  a.area = double((r1 - r0 + 1) * (c1 - c0 + 1));
  return a;
}

Dataset minimal_dataset() {
  Dataset ds;
  ds.images.push_back({1, 16, 16, "im1.png", json::object()});
  ds.categories.push_back({1, "gun", json::object()});
  ds.annotations.push_back(rect_ann(10, 1, 1, 2, 5, 2, 5));
  return ds;
}

// Random but always-valid dataset: rectangles only, areas consistent, any
// occlusion record points at a same-image sibling and carries a real RLE.
Dataset random_dataset(SplitMix64& rng) {
  Dataset ds;
  ds.categories.push_back({1, "gun", json::object()});
  ds.categories.push_back({2, "knife", json::object()});
  const int n_images = 1 + int(rng.next_below(5));
  std::int64_t next_ann = 100;
  for (int i = 1; i <= n_images; ++i) {
    const int h = 6 + int(rng.next_below(12));
    const int w = 6 + int(rng.next_below(12));
    ImageRecord im{i, w, h, "im" + std::to_string(i) + ".png", json::object()};
    if (rng.next_unit() < 0.3) im.extra["license"] = 1;
    ds.images.push_back(im);
    const int n_anns = int(rng.next_below(4));
    std::vector<std::int64_t> ids_here;
    for (int k = 0; k < n_anns; ++k) {
      const int r0 = int(rng.next_below(h - 1));
      const int r1 = r0 + int(rng.next_below(h - r0));
      const int c0 = int(rng.next_below(w - 1));
      const int c1 = c0 + int(rng.next_below(w - c0));
      AnnotationRecord a = rect_ann(next_ann, i, 1 + std::int64_t(rng.next_below(2)),
                                    r0, r1, c0, c1);
      if (rng.next_unit() < 0.2) a.extra["score_hint"] = 0.5;
      if (rng.next_unit() < 0.15) a.iscrowd = 1;
      ids_here.push_back(a.id);
      ds.annotations.push_back(a);
      ++next_ann;
    }
    // sometimes attach an occlusion record to the first annotation of the
    // image, naming the second as occluder
    if (ids_here.size() >= 2 && rng.next_unit() < 0.5) {
      auto& a = ds.annotations[ds.annotations.size() - ids_here.size()];
      BinaryMask m(h, w);
      m.set(0, 0, true);
      OcclusionRecord o;
      o.occluder_ids = {ids_here[1]};
      o.segmentation = rle_encode(m);
      o.area = 1;
      a.occlusion = o;
    }
  }
  if (rng.next_unit() < 0.3) ds.extra["info"] = {{"year", 2026}};
  return ds;
}

}  // namespace

TEST_CASE("two-squares fixture parses into the expected records") {
  const Dataset ds = testutil::load_dataset("two_squares.json");
  REQUIRE(ds.images.size() == 2);
  REQUIRE(ds.annotations.size() == 3);
  REQUIRE(ds.categories.size() == 2);
  CHECK(ds.images[0].width == 16);
  CHECK(ds.images[0].height == 16);
  REQUIRE(ds.occlusion_meta.has_value());
  CHECK(ds.occlusion_meta->coverage_threshold == 0.05);
  CHECK(ds.occlusion_meta->clip_mode == ClipMode::mask);

  const auto& a = ds.annotations[0];
  REQUIRE(a.occlusion.has_value());
  CHECK(a.occlusion->occluder_ids == std::vector<std::int64_t>{2});
  CHECK(a.occlusion->area == 4);
  CHECK(a.occlusion->segmentation.height == 16);
  CHECK(a.occlusion->segmentation.width == 16);
  CHECK(rle_to_string(a.occlusion->segmentation) == "R12>0n5");
  CHECK(!ds.annotations[1].occlusion.has_value());
}

TEST_CASE("text round trip preserves the dataset and its JSON shape") {
  const std::string original = testutil::read_file(testutil::data_path("two_squares.json"));
  const Dataset ds = parse_dataset_text(original);
  const std::string rewritten = write_dataset_text(ds);
  const Dataset again = parse_dataset_text(rewritten);
  CHECK(again == ds);

  // identical JSON values (key order aside), and a stable canonical form
  CHECK(json::parse(original) == json::parse(rewritten));
  CHECK(write_dataset_text(again) == rewritten);

  // integer-valued fields stay integers in the output
  const json out = json::parse(rewritten);
  CHECK(out["annotations"][0]["area"].is_number_integer());
  CHECK(out["annotations"][0]["bbox"][0].is_number_integer());
  CHECK(out["annotations"][0]["occlusion"]["segmentation"]["counts"].is_string());
}

TEST_CASE("file round trip through disk") {
  const Dataset ds = testutil::load_dataset("two_squares.json");
  const std::string tmp = "test_coco_roundtrip.json";
  write_dataset(ds, tmp);
  const Dataset back = parse_dataset(tmp);
  std::remove(tmp.c_str());
  CHECK(back == ds);
}

TEST_CASE("empty dataset writes three empty arrays") {
  const Dataset ds;
  const json out = json::parse(write_dataset_text(ds));
  CHECK(out["images"].is_array());
  CHECK(out["images"].empty());
  CHECK(out["annotations"].empty());
  CHECK(out["categories"].empty());
  CHECK(!out.contains("occlusion_info"));
  CHECK(parse_dataset_text(write_dataset_text(ds)) == ds);
}

TEST_CASE("generated datasets round trip exactly") {
  SplitMix64 rng(0xC0C0ULL);
  for (int trial = 0; trial < 60; ++trial) {
    const Dataset ds = random_dataset(rng);
    CAPTURE(trial, ds.images.size(), ds.annotations.size());
    REQUIRE(!has_errors(validate_dataset(ds)));
    const Dataset back = parse_dataset_text(write_dataset_text(ds));
    REQUIRE(back == ds);
  }
}

TEST_CASE("extra keys survive a round trip") {
  Dataset ds = minimal_dataset();
  ds.extra["info"] = {{"description", "fixture"}, {"year", 2026}};
  ds.extra["licenses"] = json::array({{{"id", 1}, {"name", "none"}}});
  ds.images[0].extra["license"] = 1;
  ds.images[0].extra["flickr_url"] = "";
  ds.annotations[0].extra["attributes"] = {{"blurred", false}};
  ds.categories[0].extra["supercategory"] = "weapon";

  const Dataset back = parse_dataset_text(write_dataset_text(ds));
  CHECK(back == ds);
  const json out = json::parse(write_dataset_text(ds));
  CHECK(out["info"]["year"] == 2026);
  CHECK(out["images"][0]["license"] == 1);
  CHECK(out["annotations"][0]["attributes"]["blurred"] == false);
  CHECK(out["categories"][0]["supercategory"] == "weapon");
}

TEST_CASE("raw-count RLE segmentations are kept verbatim") {
  Dataset ds = minimal_dataset();
  // 16x16 image, segmentation as an uncompressed RLE object
  ds.annotations[0].segmentation =
      json{{"size", {16, 16}}, {"counts", {34, 4, 12, 4, 202}}};
  ds.annotations[0].area = 8;
  ds.annotations[0].bbox = {2.0, 2.0, 2.0, 4.0};

  const BinaryMask m = annotation_mask(ds.annotations[0], ds.images[0]);
  CHECK(m.area() == 8);
  const Dataset back = parse_dataset_text(write_dataset_text(ds));
  CHECK(back == ds);
  CHECK(back.annotations[0].segmentation["counts"].is_array());
}

TEST_CASE("compressed-string segmentations decode like their dense form") {
  SplitMix64 rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    const BinaryMask m = testutil::random_mask(rng, 24);
    const RleMask r = rle_encode(m);
    const json seg = rle_to_json(r);
    CHECK(segmentation_mask(seg, m.height, m.width) == m);
  }
}

TEST_CASE("validate: clean dataset has no violations") {
  CHECK(validate_dataset(minimal_dataset()).empty());
  CHECK(validate_dataset(testutil::load_dataset("two_squares.json")).empty());
  CHECK(validate_dataset(testutil::load_dataset("annotator_corpus.json")).empty());
  CHECK(validate_dataset(testutil::load_dataset("annotator_golden_mask.json")).empty());
}

TEST_CASE("validate: duplicate ids are errors") {
  Dataset ds = minimal_dataset();
  ds.images.push_back(ds.images[0]);
  ds.annotations.push_back(ds.annotations[0]);
  ds.categories.push_back(ds.categories[0]);
  const auto vs = validate_dataset(ds);
  std::set<std::string> rules;
  for (const auto& v : vs) rules.insert(v.rule);
  CHECK(rules.count("duplicate-image-id") == 1);
  CHECK(rules.count("duplicate-annotation-id") == 1);
  CHECK(rules.count("duplicate-category-id") == 1);
  CHECK(has_errors(vs));
}

TEST_CASE("validate: dangling references are errors that name the record") {
  Dataset ds = minimal_dataset();
  ds.annotations[0].image_id = 999;
  ds.annotations[0].category_id = 42;
  const auto vs = validate_dataset(ds);
  REQUIRE(vs.size() == 2);
  CHECK(vs[0].rule == "dangling-category-ref");
  CHECK(vs[1].rule == "dangling-image-ref");
  CHECK(vs[0].record_id == 10);
  CHECK(vs[1].message.find("999") != std::string::npos);
  CHECK_THROWS_AS(write_dataset_text(ds), ValidationError);
}

TEST_CASE("validate: occlusion reference rules") {
  SECTION("self occlusion") {
    Dataset ds = minimal_dataset();
    BinaryMask m(16, 16);
    m.set(2, 2, true);
    ds.annotations[0].occlusion = OcclusionRecord{{10}, rle_encode(m), 1};
    const auto vs = validate_dataset(ds);
    REQUIRE(vs.size() == 1);
    CHECK(vs[0].rule == "self-occlusion");
  }
  SECTION("dangling occluder") {
    Dataset ds = minimal_dataset();
    BinaryMask m(16, 16);
    m.set(2, 2, true);
    ds.annotations[0].occlusion = OcclusionRecord{{777}, rle_encode(m), 1};
    const auto vs = validate_dataset(ds);
    REQUIRE(vs.size() == 1);
    CHECK(vs[0].rule == "dangling-occluder-ref");
  }
  SECTION("occluder on another image") {
    Dataset ds = minimal_dataset();
    ds.images.push_back({2, 16, 16, "im2.png", json::object()});
    ds.annotations.push_back(rect_ann(11, 2, 1, 0, 3, 0, 3));
    BinaryMask m(16, 16);
    m.set(2, 2, true);
    ds.annotations[0].occlusion = OcclusionRecord{{11}, rle_encode(m), 1};
    const auto vs = validate_dataset(ds);
    REQUIRE(vs.size() == 1);
    CHECK(vs[0].rule == "cross-image-occluder");
  }
  SECTION("empty occluder list and wrong-size mask") {
    Dataset ds = minimal_dataset();
    BinaryMask m(8, 8);
    m.set(1, 1, true);
    ds.annotations[0].occlusion = OcclusionRecord{{}, rle_encode(m), 1};
    const auto vs = validate_dataset(ds);
    std::set<std::string> rules;
    for (const auto& v : vs) rules.insert(v.rule);
    CHECK(rules.count("empty-occluder-list") == 1);
    CHECK(rules.count("occlusion-size-mismatch") == 1);
  }
}

TEST_CASE("validate: area mismatches warn but do not block writing") {
  Dataset ds = minimal_dataset();
  ds.annotations[0].area = 400;  // raster says 16
  const auto vs = validate_dataset(ds);
  REQUIRE(vs.size() == 1);
  CHECK(vs[0].rule == "area-mismatch");
  CHECK(vs[0].severity == Severity::warning);
  CHECK(!has_errors(vs));
  CHECK_NOTHROW(write_dataset_text(ds));
}

TEST_CASE("validate: same violations regardless of record order") {
  Dataset ds = minimal_dataset();
  ds.images.push_back({2, 16, 16, "im2.png", json::object()});
  ds.annotations.push_back(rect_ann(11, 2, 9, 0, 3, 0, 3));  // bad category
  ds.annotations.push_back(rect_ann(12, 3, 1, 0, 3, 0, 3));  // bad image
  const auto before = validate_dataset(ds);
  std::reverse(ds.images.begin(), ds.images.end());
  std::reverse(ds.annotations.begin(), ds.annotations.end());
  CHECK(validate_dataset(ds) == before);
}

TEST_CASE("stripping occlusion keys yields the plain source dataset") {
  json j = testutil::load_json("annotator_golden_mask.json");
  j.erase("occlusion_info");
  for (auto& a : j["annotations"]) a.erase("occlusion");
  const Dataset stripped = parse_dataset_text(j.dump());
  for (const auto& a : stripped.annotations) CHECK(!a.occlusion.has_value());
  CHECK(!stripped.occlusion_meta.has_value());
  CHECK(stripped == testutil::load_dataset("annotator_corpus.json"));
}

TEST_CASE("parse errors carry a byte offset; type errors name the field") {
  try {
    parse_dataset_text("{\"images\": [}");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("byte") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_dataset_text("{\"images\": 5, \"annotations\": [], \"categories\": []}"),
                  Error);
  CHECK_THROWS_AS(parse_dataset("no_such_file_anywhere.json"), IoError);
}

TEST_CASE("annotate output written and re-read compares equal as a dataset") {
  const Dataset corpus = testutil::load_dataset("annotator_corpus.json");
  const Dataset annotated = annotate_dataset(corpus, {});
  const Dataset back = parse_dataset_text(write_dataset_text(annotated));
  CHECK(back == annotated);
  REQUIRE(back.occlusion_meta.has_value());
  CHECK(back.occlusion_meta->clip_mode == ClipMode::mask);
}
