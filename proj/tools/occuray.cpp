// occuray: command-line front end for the occlusion-annotation toolkit.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "occuray/annotator.hpp"
#include "occuray/bilayer.hpp"
#include "occuray/coco.hpp"
#include "occuray/eval.hpp"
#include "occuray/losses.hpp"
#include "occuray/split.hpp"
#include "occuray/version.hpp"

namespace {

using occuray::json;

int log_level() {  // 0=debug 1=info 2=warn 3=error
  const char* env = std::getenv("OCCURAY_LOG");
  if (!env) return 2;
  const std::string v(env);
  if (v == "debug") return 0;
  if (v == "info") return 1;
  if (v == "warn" || v == "warning") return 2;
  return 3;
}

void log_info(const std::string& msg) {
  if (log_level() <= 1) std::cerr << "[info] " << msg << "\n";
}

void write_json(const json& j, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw occuray::IoError("cannot open " + path + " for writing");
  out << j.dump(1) << "\n";
  if (!out) throw occuray::IoError("write failed: " + path);
}

struct AnnotateArgs {
  std::string in, out, stats_path;
  double threshold = 0.05;
  std::string clip = "mask";
  std::int64_t min_area = 1;
  int jobs = 0;
};

int run_annotate(const AnnotateArgs& a) {
  occuray::AnnotatorConfig cfg;
  cfg.coverage_threshold = a.threshold;
  cfg.clip_mode = occuray::clip_mode_from_string(a.clip);
  cfg.min_occlusion_area = a.min_area;
  const int jobs = a.jobs > 0 ? a.jobs : occuray::default_jobs();
  const occuray::Dataset ds = occuray::parse_dataset(a.in);
  log_info("annotating " + std::to_string(ds.images.size()) + " images with " +
           std::to_string(jobs) + " jobs");
  const occuray::Dataset annotated = occuray::annotate_dataset(ds, cfg, jobs);
  occuray::write_dataset(annotated, a.out);
  const auto stats = occuray::compute_statistics(annotated);
  std::cout << occuray::stats_table(stats);
  if (!a.stats_path.empty()) write_json(occuray::stats_to_json(stats), a.stats_path);
  return 0;
}

int run_stats(const std::string& in, const std::string& report) {
  const occuray::Dataset ds = occuray::parse_dataset(in);
  const auto stats = occuray::compute_statistics(ds);
  std::cout << occuray::stats_table(stats);
  if (!report.empty()) write_json(occuray::stats_to_json(stats), report);
  return 0;
}

struct SplitArgs {
  std::string in, out, datasets_dir;
  double train = 0.78, val = 0.12, occ = 0.10;
  std::uint64_t seed = 0;
};

int run_split(const SplitArgs& a) {
  occuray::SplitConfig cfg;
  cfg.train = a.train;
  cfg.val = a.val;
  cfg.occ = a.occ;
  cfg.seed = a.seed;
  const occuray::Dataset ds = occuray::parse_dataset(a.in);
  const occuray::SplitResult res = occuray::ablation_split(ds, cfg);
  write_json(occuray::split_to_json(res), a.out);
  std::cout << "train " << res.train_ids.size() << "\nval " << res.val_ids.size()
            << "\nocc " << res.occ_ids.size() << "\n";
  for (const auto& w : res.warnings) std::cerr << "[warn] " << w << "\n";
  if (!a.datasets_dir.empty()) {
    namespace fs = std::filesystem;
    fs::create_directories(a.datasets_dir);
    occuray::write_dataset(occuray::filter_dataset(ds, res.train_ids),
                           (fs::path(a.datasets_dir) / "train.json").string());
    occuray::write_dataset(occuray::filter_dataset(ds, res.val_ids),
                           (fs::path(a.datasets_dir) / "val.json").string());
    occuray::write_dataset(occuray::filter_dataset(ds, res.occ_ids),
                           (fs::path(a.datasets_dir) / "occ.json").string());
  }
  return 0;
}

struct EvalArgs {
  std::string gt, dets, kind = "both", split, report;
};

int run_eval(const EvalArgs& a) {
  occuray::EvalOptions opts;
  if (a.kind == "bbox") opts.with_mask = false;
  else if (a.kind == "mask") opts.with_bbox = false;
  else if (a.kind != "both")
    throw CLI::ValidationError("--kind", "must be bbox, mask, or both");
  const occuray::Dataset ds = occuray::parse_dataset(a.gt);
  const auto dets = occuray::load_detections(a.dets);
  occuray::SplitResult split;
  const occuray::SplitResult* split_ptr = nullptr;
  if (!a.split.empty()) {
    std::ifstream in(a.split, std::ios::binary);
    if (!in) throw occuray::IoError("cannot open " + a.split);
    split = occuray::split_from_json(json::parse(in));
    split_ptr = &split;
  }
  const occuray::EvalReport report = occuray::evaluate(ds, dets, split_ptr, opts);
  std::cout << occuray::report_table(report);
  if (!a.report.empty()) write_json(occuray::report_to_json(report), a.report);
  return 0;
}

int run_validate(const std::string& in, const std::string& report) {
  const occuray::Dataset ds = occuray::parse_dataset(in);
  const auto violations = occuray::validate_dataset(ds);
  if (!report.empty()) write_json(occuray::violations_to_json(violations), report);
  for (const auto& v : violations)
    std::cout << (v.severity == occuray::Severity::error ? "error" : "warning") << " ["
              << v.rule << "] record " << v.record_id << ": " << v.message << "\n";
  if (violations.empty()) std::cout << "ok\n";
  return occuray::has_errors(violations) ? 1 : 0;
}

occuray::SoftMask soft_mask_from_json(const json& j) {
  const int h = j.at("size")[0].get<int>();
  const int w = j.at("size")[1].get<int>();
  occuray::SoftMask m(h, w);
  m.probs = j.at("probs").get<std::vector<double>>();
  if (m.probs.size() != static_cast<std::size_t>(h) * w)
    throw occuray::ValidationError("probs length disagrees with size");
  return m;
}

occuray::BinaryMask binary_mask_from_json(const json& j) {
  const int h = j.at("size")[0].get<int>();
  const int w = j.at("size")[1].get<int>();
  occuray::BinaryMask m(h, w);
  const auto bits = j.at("bits").get<std::vector<int>>();
  if (bits.size() != m.bits.size())
    throw occuray::ValidationError("bits length disagrees with size");
  for (std::size_t i = 0; i < bits.size(); ++i) m.bits[i] = bits[i] ? 1 : 0;
  return m;
}

int run_loss_check(const std::string& cases_path, const std::string& report_path) {
  std::ifstream in(cases_path, std::ios::binary);
  if (!in) throw occuray::IoError("cannot open " + cases_path);
  const json doc = json::parse(in);
  json results = json::array();
  for (const auto& c : doc.at("cases")) {
    occuray::LossConfig cfg;
    if (c.contains("lambda")) cfg.lambda = c.at("lambda").get<double>();
    const auto pred_e = soft_mask_from_json(c.at("occludee_pred"));
    const auto gt_e = binary_mask_from_json(c.at("occludee_target"));
    const double bce = occuray::bce_mask_loss(pred_e, gt_e, cfg.epsilon);

    double seg = 0.0;
    if (c.contains("occluder_pred")) {
      const auto pred_r = soft_mask_from_json(c.at("occluder_pred"));
      occuray::BinaryMask gt_r;
      const bool has_gt_r = c.contains("occluder_target");
      if (has_gt_r) gt_r = binary_mask_from_json(c.at("occluder_target"));
      seg = occuray::seg_loss(pred_e, gt_e, pred_r, has_gt_r ? &gt_r : nullptr, cfg);
    } else {
      occuray::LossConfig solo = cfg;
      solo.lambda = 0.0;
      seg = occuray::seg_loss(pred_e, gt_e, pred_e, &gt_e, solo);
    }

    const std::vector<double> dir(pred_e.size(), 1.0);
    const double rel = occuray::bce_grad_check(pred_e, gt_e, dir, cfg.epsilon);
    results.push_back({{"name", c.value("name", "")},
                       {"bce_occludee", bce},
                       {"seg_loss", seg},
                       {"grad_rel_err", rel}});
    std::cout << c.value("name", "?") << ": bce " << bce << " seg " << seg
              << " grad_rel_err " << rel << "\n";
  }
  if (!report_path.empty()) write_json(json{{"cases", results}}, report_path);
  return 0;
}

struct DemoArgs {
  std::uint64_t seed = 0;
  int d = 32, g = 8, p = 4;
  std::string kernel = "attention";
  std::string report;
};

int run_decoder_demo(const DemoArgs& a) {
  occuray::SplitMix64 rng(a.seed);
  auto bundle = occuray::random_bundle(a.g, a.p, a.d, rng);
  auto toks = occuray::random_tokens(a.d, rng);

  std::unique_ptr<occuray::DecoderKernel> k_r, k_e;
  if (a.kernel == "identity") {
    k_r = std::make_unique<occuray::IdentityKernel>(a.d);
    k_e = std::make_unique<occuray::IdentityKernel>(a.d);
  } else if (a.kernel == "attention") {
    k_r = std::make_unique<occuray::AttentionKernel>(a.d, a.seed + 1);
    k_e = std::make_unique<occuray::AttentionKernel>(a.d, a.seed + 2);
  } else {
    throw CLI::ValidationError("--kernel", "must be identity or attention");
  }

  const auto out = occuray::forward_bilayer(bundle, toks, *k_r, *k_e);

  auto norm = [](const occuray::Matrix& m) {
    double s = 0.0;
    for (double v : m.a) s += v * v;
    return std::sqrt(s);
  };
  auto grid_json = [](const occuray::Matrix& m) {
    json rows = json::array();
    for (int r = 0; r < m.rows; ++r) {
      json row = json::array();
      for (int c = 0; c < m.cols; ++c) row.push_back(m.at(r, c));
      rows.push_back(row);
    }
    return rows;
  };

  json j{{"shapes",
          {{"d", a.d},
           {"grid", a.g},
           {"prompts", a.p},
           {"image_embedding", {bundle.image_embedding.rows, bundle.image_embedding.cols}},
           {"sparse_prompt", {bundle.sparse_prompt.rows, bundle.sparse_prompt.cols}}}},
         {"kernel", a.kernel},
         {"seed", a.seed},
         {"guidance_delta",
          {{"image", norm(out.refined_bundle.image_embedding)},
           {"sparse", norm(out.refined_bundle.sparse_prompt)}}},
         {"occluder_logits", grid_json(out.occluder_logits)},
         {"occludee_logits", grid_json(out.occludee_logits)},
         {"occluder_iou_logit", out.occluder_iou_logit},
         {"occludee_iou_logit", out.occludee_iou_logit}};

  // gradient check on a reduced instance so the demo stays fast
  {
    occuray::SplitMix64 small_rng(a.seed);
    auto small_bundle = occuray::random_bundle(4, 2, 4, small_rng);
    auto small_toks = occuray::random_tokens(4, small_rng);
    occuray::AttentionKernel sk_r(4, a.seed + 1), sk_e(4, a.seed + 2);
    occuray::BinaryMask gt_e(4, 4), gt_r(4, 4);
    for (int i = 0; i < 16; ++i) {
      gt_e.bits[i] = small_rng.next() % 2;
      gt_r.bits[i] = small_rng.next() % 2;
    }
    const auto check = occuray::bilayer_grad_check(small_bundle, small_toks, sk_r, sk_e,
                                                   gt_e, &gt_r);
    j["grad_check"] = {{"d", 4},
                       {"grid", 4},
                       {"prompts", 2},
                       {"max_rel_err", check.max_rel_err},
                       {"worst_param", check.worst_param},
                       {"checked", check.checked}};
  }

  std::cout << j.dump(1) << "\n";
  if (!a.report.empty()) write_json(j, a.report);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"occuray: occlusion annotation toolkit"};
  app.set_version_flag("--version", occuray::kVersion);
  app.set_config("--config", "", "key=value config file; flags take precedence");
  app.require_subcommand(1);

  AnnotateArgs ann;
  auto* annotate = app.add_subcommand("annotate", "add occlusion records to a dataset");
  annotate->add_option("--in", ann.in, "input dataset JSON")->required();
  annotate->add_option("--out", ann.out, "output dataset JSON")->required();
  annotate->add_option("--threshold", ann.threshold, "coverage threshold");
  annotate->add_option("--clip", ann.clip, "clip mode: bbox or mask");
  annotate->add_option("--min-area", ann.min_area, "minimum occlusion area in pixels");
  annotate->add_option("--jobs", ann.jobs, "worker threads (0 = all cores)");
  annotate->add_option("--stats", ann.stats_path, "also write statistics JSON here");

  std::string stats_in, stats_report;
  auto* stats = app.add_subcommand("stats", "dataset statistics table");
  stats->add_option("--in", stats_in, "input dataset JSON")->required();
  stats->add_option("--report", stats_report, "write statistics JSON here");

  SplitArgs sp;
  auto* split = app.add_subcommand("split", "train/val/occ ablation split");
  split->add_option("--in", sp.in, "annotated dataset JSON")->required();
  split->add_option("--out", sp.out, "manifest JSON path")->required();
  split->add_option("--seed", sp.seed, "split seed");
  split->add_option("--train", sp.train, "train fraction");
  split->add_option("--val", sp.val, "validation fraction");
  split->add_option("--occ", sp.occ, "occlusion fraction");
  split->add_option("--write-datasets", sp.datasets_dir,
                    "also write train/val/occ dataset files into this directory");

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "COCO-style AP evaluation");
  eval->add_option("--gt", ev.gt, "ground-truth dataset JSON")->required();
  eval->add_option("--dets", ev.dets, "detections (COCO results JSON)")->required();
  eval->add_option("--kind", ev.kind, "bbox, mask, or both");
  eval->add_option("--split", ev.split, "split manifest for per-subset tables");
  eval->add_option("--report", ev.report, "write report JSON here");

  std::string loss_cases, loss_report;
  auto* loss = app.add_subcommand("loss-check", "losses and gradient checks on a case file");
  loss->add_option("--cases", loss_cases, "JSON case file")->required();
  loss->add_option("--report", loss_report, "write results JSON here");

  DemoArgs demo;
  auto* dd = app.add_subcommand("decoder-demo", "seeded bilayer decoder walkthrough");
  dd->add_option("--seed", demo.seed, "instance seed");
  dd->add_option("--width", demo.d, "embedding width d");
  dd->add_option("--grid", demo.g, "grid side g");
  dd->add_option("--prompts", demo.p, "sparse prompt tokens p");
  dd->add_option("--kernel", demo.kernel, "identity or attention");
  dd->add_option("--report", demo.report, "write demo JSON here");

  std::string val_in, val_report;
  auto* validate = app.add_subcommand("validate", "check a dataset against the schema rules");
  validate->add_option("--in", val_in, "input dataset JSON")->required();
  validate->add_option("--report", val_report, "write violations JSON here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);  // prints help or error text
    return code == 0 ? 0 : 2;     // --help/--version exit cleanly
  }

  try {
    if (*annotate) return run_annotate(ann);
    if (*stats) return run_stats(stats_in, stats_report);
    if (*split) return run_split(sp);
    if (*eval) return run_eval(ev);
    if (*loss) return run_loss_check(loss_cases, loss_report);
    if (*dd) return run_decoder_demo(demo);
    if (*validate) return run_validate(val_in, val_report);
  } catch (const CLI::ValidationError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const occuray::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
