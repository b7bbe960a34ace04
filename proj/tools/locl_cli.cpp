// locl: command-line driver for the two-stage pipeline.
//
// Artifacts live under --out (default $LOCL_ARTIFACT_ROOT, else ./artifacts):
//   data/manifest.json, data/images/*.ppm      generate-data
//   lfe/lfe.ckpt, lfe/pretrain_history.csv      pretrain-lfe
//   train/<variant>/model.ckpt, history.csv     train
//   eval/<variant>/report.json, curve.csv,
//     predictions.json, comparison.json         evaluate
//   ablate/<knob>/table.json, table.csv         ablate
//   proposals/proposals.json                    dump-proposals
// Every stage directory also gets run_record.json.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "locl/checkpoint.hpp"
#include "locl/config.hpp"
#include "locl/dataset.hpp"
#include "locl/gczsl.hpp"
#include "locl/io.hpp"
#include "locl/pipeline.hpp"

#ifndef LOCL_VERSION
#define LOCL_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using namespace locl;
using nlohmann::json;

namespace {

struct Common {
  std::string config_path;
  std::string preset = "desk";
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string device = "cpu";
  bool quiet = false;
};

fs::path artifact_root(const Common& c) {
  if (!c.out.empty()) return c.out;
  if (const char* env = std::getenv("LOCL_ARTIFACT_ROOT"); env && *env) return env;
  return "artifacts";
}

ExperimentConfig resolve_config(const Common& c) {
  if (c.device != "cpu") throw ValidationError("device '" + c.device + "' is not available; only cpu is supported");
  ExperimentConfig cfg = preset(c.preset);
  if (!c.config_path.empty()) {
    json j;
    try {
      j = json::parse(io::read_file(c.config_path));
    } catch (const json::exception& e) {
      throw ValidationError("config " + c.config_path + " is not valid JSON: " + e.what());
    }
    cfg = config_from_json(j, cfg);
  }
  if (c.seed) {
    cfg.seed = *c.seed;
    cfg.dataset.seed = *c.seed;
  }
  cfg.validate();
  return cfg;
}

ProgressFn progress_of(const Common& c) {
  if (c.quiet) return {};
  const auto start = std::chrono::steady_clock::now();
  return [start](const std::string& msg) {
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::cerr << "[" << std::fixed << std::setprecision(1) << s << "s] " << msg << std::endl;
  };
}

/// Written last in each stage; never modified afterwards. Re-running a stage
/// replaces the stage directory's artifacts together with its record.
class RunRecord {
 public:
  RunRecord(std::string command, const ExperimentConfig& cfg)
      : command_(std::move(command)), cfg_(cfg), start_(std::chrono::steady_clock::now()) {}

  void input(const fs::path& p) { inputs_[p.string()] = io::file_hash(p); }
  void output(const fs::path& p) { outputs_.push_back(p.string()); }

  void write(const fs::path& dir) const {
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    const std::time_t now = std::time(nullptr);
    char stamp[32];
    std::strftime(stamp, sizeof(stamp), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    const json rec = {{"command", command_},
                      {"config_hash", config_hash(cfg_)},
                      {"seed", cfg_.seed},
                      {"version", LOCL_VERSION},
                      {"finished_at", stamp},
                      {"wall_clock_s", secs},
                      {"config", to_json(cfg_)},
                      {"inputs", inputs_},
                      {"outputs", outputs_}};
    io::atomic_write(dir / "run_record.json", rec.dump(2));
  }

 private:
  std::string command_;
  ExperimentConfig cfg_;
  std::chrono::steady_clock::time_point start_;
  json inputs_ = json::object();
  std::vector<std::string> outputs_;
};

void write_json(const fs::path& p, const json& j, RunRecord& rec) {
  io::atomic_write(p, j.dump(2));
  rec.output(p);
}

void write_text(const fs::path& p, const std::string& s, RunRecord& rec) {
  io::atomic_write(p, s);
  rec.output(p);
}

json meta_for(const ExperimentConfig& cfg, const std::string& stage) {
  return {{"stage", stage}, {"config_hash", config_hash(cfg)}, {"seed", cfg.seed}, {"version", LOCL_VERSION}};
}

// ---------------------------------------------------------------------------
// Loading upstream artifacts.

fs::path manifest_path(const fs::path& root) { return root / "data" / "manifest.json"; }
fs::path lfe_path(const fs::path& root) { return root / "lfe" / "lfe.ckpt"; }
fs::path model_path(const fs::path& root, Variant v) { return root / "train" / to_string(v) / "model.ckpt"; }

data::DatasetManifest require_manifest(const fs::path& root, bool diagnostics) {
  const fs::path p = manifest_path(root);
  if (!fs::exists(p)) throw MissingArtifactError("no dataset manifest at " + p.string() + "; run generate-data first");
  return data::load_manifest(p, {.with_diagnostics = diagnostics, .check_files = true});
}

data::Dataset dataset_from(const data::DatasetManifest& m, const ExperimentConfig& cfg, bool with_train, bool with_test) {
  if (m.image_size != cfg.dataset.image_size) {
    throw ValidationError("manifest image size " + std::to_string(m.image_size) + " differs from config image size " +
                          std::to_string(cfg.dataset.image_size));
  }
  data::Dataset ds;
  ds.vocabulary = m.vocabulary;
  ds.split = m.split;
  if (with_train) ds.train = data::load_samples(m, data::SplitTag::kTrain);
  if (with_test) ds.test = data::load_samples(m, data::SplitTag::kTest);
  return ds;
}

LfeModel<float> make_lfe(const ExperimentConfig& cfg, const data::Vocabulary& v) {
  return LfeModel<float>(cfg.lfe_config(), v.num_attributes(), v.num_objects());
}

std::vector<Variant> parse_variants(const std::string& s) {
  if (s == "both" || s == "all") return {Variant::kWholeImage, Variant::kLocl};
  return {variant_from(s)};
}

// ---------------------------------------------------------------------------
// Commands.

int cmd_generate(const Common& c) {
  const ExperimentConfig cfg = resolve_config(c);
  const fs::path root = artifact_root(c), dir = root / "data";
  RunRecord rec("generate-data", cfg);
  const auto progress = progress_of(c);
  if (progress) progress("generating " + std::to_string(cfg.dataset.num_train + cfg.dataset.num_val + cfg.dataset.num_test) +
                         " scenes");
  const data::Dataset ds = data::generate_dataset(cfg.dataset);
  std::vector<std::pair<data::SplitTag, const data::SceneSample*>> samples;
  for (const auto& s : ds.train) samples.push_back({data::SplitTag::kTrain, &s});
  for (const auto& s : ds.val) samples.push_back({data::SplitTag::kVal, &s});
  for (const auto& s : ds.test) samples.push_back({data::SplitTag::kTest, &s});
  const std::string ds_hash = hex64(fnv1a(to_json(cfg)["dataset"].dump()));
  data::write_manifest(samples, ds.vocabulary, ds.split, manifest_path(root), cfg.dataset.seed, cfg.dataset.image_size,
                       ds_hash);
  rec.output(manifest_path(root));
  rec.write(dir);
  std::cout << manifest_path(root).string() << '\n';
  return 0;
}

int cmd_pretrain(const Common& c) {
  const ExperimentConfig cfg = resolve_config(c);
  const fs::path root = artifact_root(c), dir = root / "lfe";
  RunRecord rec("pretrain-lfe", cfg);
  const auto m = require_manifest(root, false);
  rec.input(manifest_path(root));
  const data::Dataset ds = dataset_from(m, cfg, true, false);
  Stage1 st = run_pretrain(cfg, ds, progress_of(c));
  ckpt::save<float>(lfe_path(root), st.lfe.params(), meta_for(cfg, "pretrain-lfe"));
  rec.output(lfe_path(root));
  write_text(dir / "pretrain_history.csv", pretrain_history_csv(st.history), rec);
  rec.write(dir);
  std::cout << lfe_path(root).string() << '\n';
  return 0;
}

int cmd_train(const Common& c, const std::string& variants) {
  const ExperimentConfig cfg = resolve_config(c);
  const fs::path root = artifact_root(c);
  const auto m = require_manifest(root, false);
  if (!fs::exists(lfe_path(root)))
    throw MissingArtifactError("no pre-trained extractor at " + lfe_path(root).string() + "; run pretrain-lfe first");
  const data::Dataset ds = dataset_from(m, cfg, true, false);
  for (Variant v : parse_variants(variants)) {
    const fs::path dir = root / "train" / to_string(v);
    RunRecord rec(std::string("train ") + to_string(v), cfg);
    rec.input(manifest_path(root));
    rec.input(lfe_path(root));
    LfeModel<float> lfe = make_lfe(cfg, ds.vocabulary);
    ckpt::load<float>(lfe_path(root), lfe.params());
    Stage2 st = run_train(cfg, lfe, ds, v, progress_of(c));
    std::vector<Param<float>*> ps = lfe.params();
    st.cc.visit([&](Param<float>& p) { ps.push_back(&p); });
    json meta = meta_for(cfg, "train");
    meta["variant"] = to_string(v);
    ckpt::save<float>(model_path(root, v), ps, meta);
    rec.output(model_path(root, v));
    write_text(dir / "history.csv", cc_history_csv(st.history), rec);
    rec.write(dir);
    std::cout << model_path(root, v).string() << '\n';
  }
  return 0;
}

int cmd_evaluate(const Common& c, const std::string& variants, int clutter_min) {
  const ExperimentConfig cfg = resolve_config(c);
  const fs::path root = artifact_root(c);
  const auto vs = parse_variants(variants);
  for (Variant v : vs) {
    if (!fs::exists(model_path(root, v)))
      throw MissingArtifactError("no trained " + std::string(to_string(v)) + " model at " +
                                 model_path(root, v).string() + "; run train first");
  }
  const auto m = require_manifest(root, true);
  const data::Dataset ds = dataset_from(m, cfg, false, true);
  std::vector<VariantResult> results;
  for (Variant v : vs) {
    const fs::path dir = root / "eval" / to_string(v);
    RunRecord rec(std::string("evaluate ") + to_string(v), cfg);
    rec.input(manifest_path(root));
    rec.input(model_path(root, v));
    LfeModel<float> lfe = make_lfe(cfg, ds.vocabulary);
    CompositionClassifier<float> cc(classifier_config(cfg, v), cfg.channels);
    std::vector<Param<float>*> ps = lfe.params();
    cc.visit([&](Param<float>& p) { ps.push_back(&p); });
    ckpt::load<float>(model_path(root, v), ps);
    VariantResult vr;
    vr.variant = v;
    vr.config_hash = config_hash(cfg);
    vr.scored = score_samples(lfe, cc, std::span<const data::SceneSample>(ds.test), ds.split, v);
    vr.report = gczsl::evaluate(vr.scored.set, cfg.eval.sweep_points);
    json report = gczsl::report_to_json(vr.report);
    report["config_hash"] = vr.config_hash;
    report["seed"] = cfg.seed;
    report["variant"] = to_string(v);
    json by_clutter = json::object();
    for (int lvl = cfg.dataset.clutter_min; lvl <= cfg.dataset.clutter_max; ++lvl) {
      const auto sub = vr.scored.clutter_subset(lvl, lvl);
      bool seen = false, unseen = false;
      for (const auto& in : sub.instances) (in.seen ? seen : unseen) = true;
      if (!seen || !unseen) continue;
      json r = gczsl::report_to_json(gczsl::evaluate(sub, cfg.eval.sweep_points));
      r.erase("curve");
      by_clutter[std::to_string(lvl)] = r;
    }
    report["by_clutter_level"] = by_clutter;
    if (v == Variant::kLocl) {
      LfeModel<float> pre = make_lfe(cfg, ds.vocabulary);
      if (fs::exists(lfe_path(root))) {
        ckpt::load<float>(lfe_path(root), pre.params());
        report["objectness_after_pretraining"] = to_json(objectness_diagnostic(pre, std::span<const data::SceneSample>(ds.test)));
      }
      report["objectness"] = to_json(objectness_diagnostic(lfe, std::span<const data::SceneSample>(ds.test)));
    }
    write_json(dir / "report.json", report, rec);
    write_text(dir / "curve.csv", gczsl::curve_to_csv(vr.report.curve), rec);
    json preds = gczsl::predictions_to_json(vr.scored.set, cfg.eval.top_k);
    preds["config_hash"] = vr.config_hash;
    preds["seed"] = cfg.seed;
    write_json(dir / "predictions.json", preds, rec);
    rec.write(dir);
    std::cout << to_string(v) << ": auc=" << vr.report.auc << " best_seen=" << vr.report.best_seen
              << " best_unseen=" << vr.report.best_unseen << '\n';
    results.push_back(std::move(vr));
  }
  if (results.size() >= 2) {
    const fs::path dir = root / "eval";
    RunRecord rec("evaluate comparison", cfg);
    json cmp = {{"config_hash", config_hash(cfg)},
                {"seed", cfg.seed},
                {"all", compare_variants(results, cfg.eval.sweep_points)},
                {"cluttered", compare_variants(results, cfg.eval.sweep_points, clutter_min)},
                {"uncluttered", compare_variants(results, cfg.eval.sweep_points, 0, 0)}};
    write_json(dir / "comparison.json", cmp, rec);
    rec.write(dir);
  }
  return 0;
}

int cmd_ablate(const Common& c, const std::string& knob, std::vector<std::string> values) {
  const ExperimentConfig cfg = resolve_config(c);
  if (values.empty()) values = default_ablation_values(knob);
  else apply_knob(cfg, knob, values.front());  // rejects unknown knobs before any work
  const fs::path root = artifact_root(c), dir = root / "ablate" / knob;
  RunRecord rec("ablate " + knob, cfg);
  const auto m = require_manifest(root, false);
  rec.input(manifest_path(root));
  const data::Dataset ds = dataset_from(m, cfg, true, true);
  const auto rows = ablate(cfg, ds, knob, values, progress_of(c));
  json table = {{"knob", knob}, {"config_hash", config_hash(cfg)}, {"seed", cfg.seed}, {"rows", ablation_to_json(rows)}};
  write_json(dir / "table.json", table, rec);
  write_text(dir / "table.csv", ablation_to_csv(rows), rec);
  rec.write(dir);
  std::cout << ablation_to_csv(rows);
  return 0;
}

int cmd_dump_proposals(const Common& c, std::string checkpoint, const std::string& split, int limit) {
  const ExperimentConfig cfg = resolve_config(c);
  const fs::path root = artifact_root(c), dir = root / "proposals";
  if (checkpoint.empty()) checkpoint = lfe_path(root).string();
  if (!fs::exists(checkpoint))
    throw MissingArtifactError("no checkpoint at " + checkpoint + "; run pretrain-lfe (or train) first");
  RunRecord rec("dump-proposals", cfg);
  const auto m = require_manifest(root, false);
  rec.input(manifest_path(root));
  rec.input(checkpoint);
  LfeModel<float> lfe = make_lfe(cfg, m.vocabulary);
  // Trained model files also hold classifier tensors; only the extractor's are read.
  ckpt::load<float>(checkpoint, lfe.params());
  const auto tag = data::split_tag_from(split);
  const int r = cfg.cc.num_proposals;
  json images = json::array();
  int count = 0;
  for (const auto* rec_ptr : m.records_in(tag)) {
    if (limit >= 0 && count++ >= limit) break;
    const data::Image img = data::read_ppm(m.root / rec_ptr->path);
    const auto top = extract_top_proposals(lfe.propose(img), r);
    json boxes = json::array();
    for (Eigen::Index k = 0; k < top.boxes.rows(); ++k)
      boxes.push_back({{"box", {top.boxes(k, 0), top.boxes(k, 1), top.boxes(k, 2), top.boxes(k, 3)}},
                       {"objectness", top.scores(k)},
                       {"anchor", top.indices[static_cast<std::size_t>(k)]}});
    images.push_back({{"path", rec_ptr->path}, {"attr", rec_ptr->label.attr}, {"obj", rec_ptr->label.obj}, {"proposals", boxes}});
  }
  const json out = {{"config_hash", config_hash(cfg)},
                    {"seed", cfg.seed},
                    {"checkpoint", checkpoint},
                    {"image_size", m.image_size},
                    {"box_format", "x_min,y_min,x_max,y_max in pixels"},
                    {"r", r},
                    {"images", images}};
  write_json(dir / "proposals.json", out, rec);
  rec.write(dir);
  std::cout << (dir / "proposals.json").string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Localized compositional zero-shot learning on synthetic scenes"};
  app.set_version_flag("--version", LOCL_VERSION);
  app.require_subcommand(1);

  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "JSON file overlaid on the preset");
    sub->add_option("--preset", common.preset, "Base configuration: desk, paper or smoke")->capture_default_str();
    sub->add_option("--seed", common.seed, "Experiment and dataset seed");
    sub->add_option("--out", common.out, "Artifact root (default $LOCL_ARTIFACT_ROOT or ./artifacts)");
    sub->add_option("--device", common.device, "Compute device (cpu only)")->capture_default_str();
    sub->add_flag("-q,--quiet", common.quiet, "No progress output");
  };

  auto* gen = app.add_subcommand("generate-data", "Render the synthetic dataset and write its manifest");
  add_common(gen);
  auto* pre = app.add_subcommand("pretrain-lfe", "Pre-train the localized feature extractor");
  add_common(pre);

  std::string variants = "both";
  auto* train = app.add_subcommand("train", "Train the composition classifier on the pre-trained extractor");
  add_common(train);
  train->add_option("--variant", variants, "locl, whole_image or both")->capture_default_str();

  int clutter_min = 3;
  auto* eval = app.add_subcommand("evaluate", "Score the test split and write GCZSL reports");
  add_common(eval);
  eval->add_option("--variant", variants, "locl, whole_image or both")->capture_default_str();
  eval->add_option("--clutter-min", clutter_min, "Lowest clutter level of the cluttered comparison")->capture_default_str();

  std::string knob;
  std::vector<std::string> values;
  auto* abl = app.add_subcommand("ablate", "Sweep one knob, one full LOCL run per value");
  add_common(abl);
  abl->add_option("--knob", knob, "r, l, margin, alpha_beta, refinement or text_input")->required();
  abl->add_option("--values", values, "Values to sweep (default: the standard grid)")->delimiter(',');

  std::string checkpoint, split = "test";
  int limit = -1;
  auto* dump = app.add_subcommand("dump-proposals", "Write the top-r proposal boxes per image");
  add_common(dump);
  dump->add_option("--checkpoint", checkpoint, "Extractor or trained model checkpoint (default: lfe/lfe.ckpt)");
  dump->add_option("--split", split, "train, val or test")->capture_default_str();
  dump->add_option("--limit", limit, "At most this many images (-1: all)")->capture_default_str();

  auto* show = app.add_subcommand("show-config", "Print the resolved configuration with every key");
  add_common(show);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gen) return cmd_generate(common);
    if (*pre) return cmd_pretrain(common);
    if (*train) return cmd_train(common, variants);
    if (*eval) return cmd_evaluate(common, variants, clutter_min);
    if (*abl) return cmd_ablate(common, knob, values);
    if (*dump) return cmd_dump_proposals(common, checkpoint, split, limit);
    if (*show) {
      std::cout << to_json(resolve_config(common)).dump(2) << '\n';
      return 0;
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const MissingArtifactError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
