#pragma once

// Two-stage training (localized feature extractor, then composition
// classifier), evaluation, the objectness diagnostic and the ablation driver.

#include <algorithm>
#include <chrono>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "locl/classifier.hpp"
#include "locl/config.hpp"
#include "locl/dataset.hpp"
#include "locl/gczsl.hpp"
#include "locl/lfe.hpp"
#include "locl/pretrain.hpp"

namespace locl {

/// kLocl feeds the classifier the top-r proposal features; kWholeImage feeds
/// it one global-average-pooled feature of the same encoder.
enum class Variant { kLocl, kWholeImage };

inline const char* to_string(Variant v) { return v == Variant::kLocl ? "locl" : "whole_image"; }
inline Variant variant_from(const std::string& s) {
  if (s == "locl") return Variant::kLocl;
  if (s == "whole_image" || s == "whole-image") return Variant::kWholeImage;
  throw ValidationError("unknown variant '" + s + "' (expected locl or whole_image)");
}

inline ClassifierConfig classifier_config(const ExperimentConfig& cfg, Variant v) {
  ClassifierConfig c = cfg.cc;
  if (v == Variant::kWholeImage) c.num_proposals = 1;
  return c;
}

/// Classifier input for one image: r × C proposal features or 1 × C.
template <typename T>
Mat<T> classifier_input(const LfeModel<T>& lfe, const data::Image& img, Variant v, int r) {
  const FeatureMap<T> fmap = lfe.encoder.forward(img, nullptr);
  if (v == Variant::kWholeImage) return global_average_pool(fmap);
  const ProposalSet<T> props = rpn_forward(fmap, lfe.anchors, lfe.rpn);
  return extract_top_proposals(props, r).features;
}

// ---------------------------------------------------------------------------
// Composition classifier training.

struct CcEpoch {
  int epoch = 0;
  double loss = 0;
  double train_accuracy = 0;  // argmax over train pairs
};

namespace detail {

template <typename T>
bool predicted_correctly(const PairScores<T>& s, data::Pair label, const std::vector<data::Pair>& train_pairs) {
  const auto v = pair_score_vector(s, train_pairs);
  const auto best = std::max_element(v.begin(), v.end()) - v.begin();
  return train_pairs[static_cast<std::size_t>(best)] == label;
}

/// One image through encoder, RPN, top-r selection and pooling, with the
/// classifier's gradient propagated back into the extractor.
template <typename T>
std::pair<T, bool> finetune_step(LfeModel<T>& lfe, CompositionClassifier<T>& cc, const data::Image& img,
                                 data::Pair label, Variant v, const std::vector<data::Pair>& train_pairs) {
  ImageEncoderCache<T> ecache;
  const FeatureMap<T> fmap = lfe.encoder.forward(img, &ecache);
  const SemanticTables<T> tables = lfe.text.encode_all_primitives();
  Mat<T> grad_fmap = Mat<T>::Zero(fmap.data.rows(), fmap.data.cols());
  ClassifierCache<T> ccache;
  Vec<T> ga, go;
  T loss;
  bool hit;
  if (v == Variant::kWholeImage) {
    const PairScores<T> s = cc.forward(global_average_pool(fmap), tables, &ccache);
    loss = classifier_loss(s, label, cc.config().loss, &ga, &go);
    hit = predicted_correctly(s, label, train_pairs);
    const auto g = cc.backward(ga, go, ccache);
    grad_fmap.rowwise() += g.features.row(0) / T(fmap.data.rows());
    lfe.text.backward_tables(g.tables);
  } else {
    RpnCache<T> rcache;
    Vec<T> logits;
    Mat<T> deltas;
    lfe.rpn.split(lfe.rpn.forward(fmap, &rcache), logits, deltas);
    const Vec<T> obj = logits.unaryExpr([](T x) { return sigmoid(x); });
    const auto idx = top_indices(obj, cc.num_proposals());
    const auto r = static_cast<Eigen::Index>(idx.size());
    Mat<T> sub_anchors(r, 4), sub_deltas(r, 4);
    for (Eigen::Index i = 0; i < r; ++i) {
      sub_anchors.row(i) = lfe.anchors.row(idx[static_cast<std::size_t>(i)]);
      sub_deltas.row(i) = deltas.row(idx[static_cast<std::size_t>(i)]);
    }
    const int ih = fmap.height * fmap.stride, iw = fmap.width * fmap.stride;
    const Mat<T> boxes = decode_boxes(sub_anchors, sub_deltas, ih, iw, lfe.rpn.bounds());
    const Mat<T> feats = pool_region_features(fmap, boxes);
    const PairScores<T> s = cc.forward(feats, tables, &ccache);
    loss = classifier_loss(s, label, cc.config().loss, &ga, &go);
    hit = predicted_correctly(s, label, train_pairs);
    const auto g = cc.backward(ga, go, ccache);
    lfe.text.backward_tables(g.tables);
    Mat<T> grad_boxes;
    pool_region_backward(fmap, boxes, g.features, grad_fmap, &grad_boxes);
    const Mat<T> gsub = decode_boxes_backward(sub_anchors, sub_deltas, ih, iw, grad_boxes, lfe.rpn.bounds());
    Mat<T> grad_deltas = Mat<T>::Zero(deltas.rows(), 4);
    for (Eigen::Index i = 0; i < r; ++i) grad_deltas.row(idx[static_cast<std::size_t>(i)]) = gsub.row(i);
    grad_fmap += lfe.rpn.backward(Vec<T>(), grad_deltas, rcache);
  }
  lfe.encoder.backward(grad_fmap, ecache);
  return {loss, hit};
}

}  // namespace detail

/// Trains the classifier on top of a pre-trained extractor. With a zero
/// extractor learning rate the classifier inputs are computed once and reused.
template <typename T>
std::vector<CcEpoch> train_cc(LfeModel<T>& lfe, CompositionClassifier<T>& cc, std::span<const data::TrainingSample> samples,
                              const std::vector<data::Pair>& train_pairs, const CcSchedule& sched, Variant v,
                              std::uint64_t seed, const ProgressFn& progress = {}) {
  if (samples.empty()) throw ValidationError("classifier training needs at least one sample");
  if (v == Variant::kWholeImage && cc.num_proposals() != 1)
    throw ValidationError("whole-image classifier must take exactly one feature");
  const bool frozen = !(sched.lfe_lr > 0);
  std::vector<Mat<T>> cached;
  SemanticTables<T> tables;
  if (frozen) {
    cached.reserve(samples.size());
    for (const auto& s : samples) cached.push_back(classifier_input(lfe, *s.image, v, cc.num_proposals()));
    tables = lfe.text.encode_all_primitives();
  }
  std::vector<Param<T>*> params;
  cc.visit([&](Param<T>& p) { params.push_back(&p); });
  if (!frozen) lfe.visit([&](Param<T>& p) { params.push_back(&p); });

  std::mt19937_64 rng(derive_seed(seed, "cc-order"));
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  Adam<T> opt;
  std::vector<CcEpoch> history;
  const auto bs = static_cast<std::size_t>(std::max(1, sched.batch_size));
  for (int epoch = 0; epoch < sched.epochs; ++epoch) {
    const double lr = sched.lr_at(epoch), lfe_lr = sched.lfe_lr_at(epoch);
    auto lr_of = [&](ParamGroup g) { return g == ParamGroup::kClassifier ? lr : (frozen ? 0.0 : lfe_lr); };
    std::shuffle(order.begin(), order.end(), rng);
    CcEpoch rec;
    rec.epoch = epoch + 1;
    int hits = 0, batch = 0;
    for (std::size_t start = 0; start < order.size(); start += bs, ++batch) {
      const std::size_t end = std::min(order.size(), start + bs);
      for (auto* p : params) p->zero_grad();
      double batch_loss = 0;
      for (std::size_t i = start; i < end; ++i) {
        const auto& s = samples[order[i]];
        T loss;
        bool hit;
        if (frozen) {
          ClassifierCache<T> cache;
          const PairScores<T> sc = cc.forward(cached[order[i]], tables, &cache);
          Vec<T> ga, go;
          loss = classifier_loss(sc, s.label, cc.config().loss, &ga, &go);
          hit = detail::predicted_correctly(sc, s.label, train_pairs);
          cc.backward(ga, go, cache);
        } else {
          std::tie(loss, hit) = detail::finetune_step(lfe, cc, *s.image, s.label, v, train_pairs);
        }
        batch_loss += static_cast<double>(loss);
        hits += hit;
      }
      if (!std::isfinite(batch_loss)) throw DivergenceError("train", epoch + 1, batch + 1);
      rec.loss += batch_loss;
      opt.step(params, lr_of, 1.0 / static_cast<double>(end - start));
    }
    rec.loss /= static_cast<double>(samples.size());
    rec.train_accuracy = static_cast<double>(hits) / static_cast<double>(samples.size());
    history.push_back(rec);
    if (progress) {
      progress(std::string("train[") + to_string(v) + "] epoch " + std::to_string(rec.epoch) +
               " loss=" + std::to_string(rec.loss) + " acc=" + std::to_string(rec.train_accuracy));
    }
  }
  return history;
}

// ---------------------------------------------------------------------------
// Evaluation.

/// Scored test instances plus each one's clutter level.
struct ScoredSet {
  gczsl::EvalSet set;
  std::vector<int> clutter;

  /// Instances with clutter in [lo, hi].
  gczsl::EvalSet clutter_subset(int lo, int hi) const {
    gczsl::EvalSet out = set;
    out.instances.clear();
    for (std::size_t k = 0; k < set.instances.size(); ++k)
      if (clutter[k] >= lo && clutter[k] <= hi) out.instances.push_back(set.instances[k]);
    return out;
  }
};

template <typename T>
ScoredSet score_samples(const LfeModel<T>& lfe, const CompositionClassifier<T>& cc,
                        std::span<const data::SceneSample> samples, const data::PairSplit& split, Variant v) {
  ScoredSet out;
  out.set = gczsl::EvalSet::for_split(split);
  const SemanticTables<T> tables = lfe.text.encode_all_primitives();
  for (const auto& s : samples) {
    const PairScores<T> sc = cc.forward(classifier_input(lfe, s.image, v, cc.num_proposals()), tables, nullptr);
    gczsl::EvalInstance in;
    in.scores = pair_score_vector(sc, out.set.candidates);
    in.truth = s.label;
    in.seen = split.is_train(s.label);
    out.set.instances.push_back(std::move(in));
    out.clutter.push_back(s.clutter_level);
  }
  return out;
}

/// Mean objectness of anchors overlapping the hidden object box against the
/// mean of the remaining anchors, pooled over images.
struct ObjectnessDiagnostic {
  double inside_mean = 0;
  double outside_mean = 0;
  double relative_gap = 0;  // (inside − outside) / outside
  int images = 0;
};

template <typename T>
ObjectnessDiagnostic objectness_diagnostic(const LfeModel<T>& lfe, std::span<const data::SceneSample> samples) {
  double in_sum = 0, out_sum = 0;
  long in_n = 0, out_n = 0;
  ObjectnessDiagnostic d;
  for (const auto& s : samples) {
    if (!s.object_box) continue;
    const ProposalSet<T> p = lfe.propose(s.image);
    for (Eigen::Index k = 0; k < lfe.anchors.rows(); ++k) {
      const data::Box a{static_cast<double>(lfe.anchors(k, 0)), static_cast<double>(lfe.anchors(k, 1)),
                        static_cast<double>(lfe.anchors(k, 2)), static_cast<double>(lfe.anchors(k, 3))};
      if (a.intersects(*s.object_box)) {
        in_sum += static_cast<double>(p.objectness(k));
        ++in_n;
      } else {
        out_sum += static_cast<double>(p.objectness(k));
        ++out_n;
      }
    }
    ++d.images;
  }
  if (in_n == 0 || out_n == 0) throw ValidationError("objectness diagnostic needs object boxes and background anchors");
  d.inside_mean = in_sum / static_cast<double>(in_n);
  d.outside_mean = out_sum / static_cast<double>(out_n);
  d.relative_gap = (d.inside_mean - d.outside_mean) / d.outside_mean;
  return d;
}

inline nlohmann::json to_json(const ObjectnessDiagnostic& d) {
  return {{"inside_mean", d.inside_mean}, {"outside_mean", d.outside_mean}, {"relative_gap", d.relative_gap},
          {"images", d.images}};
}

// ---------------------------------------------------------------------------
// Whole experiments.

struct Stage1 {
  LfeModel<float> lfe;
  std::vector<PretrainEpoch> history;
};

inline Stage1 run_pretrain(const ExperimentConfig& cfg, const data::Dataset& ds, const ProgressFn& progress = {}) {
  cfg.validate();
  Stage1 st{LfeModel<float>(cfg.lfe_config(), ds.vocabulary.num_attributes(), ds.vocabulary.num_objects()), {}};
  st.lfe.init(derive_seed(cfg.seed, "lfe"));
  const auto view = data::training_view(ds.train);
  st.history = pretrain_lfe(st.lfe, std::span<const data::TrainingSample>(view), ds.split.train, cfg.pretrain,
                            derive_seed(cfg.seed, "pretrain"), progress);
  return st;
}

struct Stage2 {
  Variant variant = Variant::kLocl;
  CompositionClassifier<float> cc;
  std::vector<CcEpoch> history;
};

/// Trains a classifier variant. Fine-tuning mutates `lfe`, so callers that
/// compare variants pass each one its own copy.
inline Stage2 run_train(const ExperimentConfig& cfg, LfeModel<float>& lfe, const data::Dataset& ds, Variant v,
                        const ProgressFn& progress = {}) {
  Stage2 st{v, CompositionClassifier<float>(classifier_config(cfg, v), cfg.channels), {}};
  std::mt19937_64 rng(derive_seed(cfg.seed, std::string("cc-init-") + to_string(v)));
  st.cc.init(rng);
  const auto view = data::training_view(ds.train);
  st.history = train_cc(lfe, st.cc, std::span<const data::TrainingSample>(view), ds.split.train, cfg.cc_schedule, v,
                        derive_seed(cfg.seed, std::string("cc-") + to_string(v)), progress);
  return st;
}

struct VariantResult {
  Variant variant = Variant::kLocl;
  std::string config_hash;
  ScoredSet scored;
  gczsl::GczslReport report;
  std::vector<CcEpoch> history;
};

struct ExperimentResult {
  std::string config_hash;
  std::vector<PretrainEpoch> pretrain_history;
  ObjectnessDiagnostic objectness;
  std::vector<VariantResult> variants;
};

/// Pre-trains once, then trains and evaluates every requested variant on the
/// test split under the same seed.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const data::Dataset& ds,
                                       const std::vector<Variant>& variants, const ProgressFn& progress = {}) {
  ExperimentResult res;
  res.config_hash = config_hash(cfg);
  Stage1 s1 = run_pretrain(cfg, ds, progress);
  res.pretrain_history = s1.history;
  res.objectness = objectness_diagnostic(s1.lfe, std::span<const data::SceneSample>(ds.test));
  for (Variant v : variants) {
    LfeModel<float> lfe = s1.lfe;
    Stage2 s2 = run_train(cfg, lfe, ds, v, progress);
    VariantResult vr;
    vr.variant = v;
    vr.config_hash = res.config_hash;
    vr.scored = score_samples(lfe, s2.cc, std::span<const data::SceneSample>(ds.test), ds.split, v);
    vr.report = gczsl::evaluate(vr.scored.set, cfg.eval.sweep_points);
    vr.history = std::move(s2.history);
    res.variants.push_back(std::move(vr));
  }
  return res;
}

/// Per-variant reports with deltas against the first variant. All variants
/// must come from the same configuration.
inline nlohmann::json compare_variants(const std::vector<VariantResult>& runs, int sweep_points, int clutter_min = 0,
                                       int clutter_max = 1 << 30) {
  if (runs.size() < 2) throw ValidationError("comparison needs at least two variants");
  for (const auto& r : runs)
    if (r.config_hash != runs.front().config_hash) throw ValidationError("variants were run with different configs");
  nlohmann::json table = nlohmann::json::array();
  gczsl::GczslReport base;
  for (std::size_t k = 0; k < runs.size(); ++k) {
    const auto rep = gczsl::evaluate(runs[k].scored.clutter_subset(clutter_min, clutter_max), sweep_points);
    if (k == 0) base = rep;
    table.push_back({{"variant", to_string(runs[k].variant)},
                     {"auc", rep.auc},
                     {"best_seen_top1", rep.best_seen},
                     {"best_unseen_top1", rep.best_unseen},
                     {"object_top1", rep.object_top1},
                     {"attribute_top1", rep.attribute_top1},
                     {"delta_auc", rep.auc - base.auc},
                     {"delta_unseen_top1", rep.best_unseen - base.best_unseen},
                     {"delta_seen_top1", rep.best_seen - base.best_seen}});
  }
  return {{"config_hash", runs.front().config_hash},
          {"clutter_min", clutter_min},
          {"clutter_max", clutter_max},
          {"variants", table}};
}

// ---------------------------------------------------------------------------
// Ablations.

inline const std::vector<std::string>& ablation_knobs() {
  static const std::vector<std::string> k = {"r", "l", "margin", "alpha_beta", "refinement", "text_input"};
  return k;
}

/// The grid each knob is swept over by default.
inline std::vector<std::string> default_ablation_values(const std::string& knob) {
  if (knob == "r") return {"5", "10", "15", "20"};
  if (knob == "l") return {"10", "15", "20", "25"};
  if (knob == "margin") return {"0.5", "1", "3", "7"};
  if (knob == "alpha_beta") return {"0.3:0.7", "0.4:0.6", "0.5:0.5", "0.6:0.4", "0.7:0.3"};
  if (knob == "refinement") return {"add", "multiply", "concat"};
  if (knob == "text_input") return {"obj-attr", "obj"};
  std::string valid;
  for (const auto& k : ablation_knobs()) valid += (valid.empty() ? "" : ", ") + k;
  throw ValidationError("unknown ablation knob '" + knob + "' (valid: " + valid + ")");
}

/// Whether changing the knob changes pre-training.
inline bool knob_affects_pretraining(const std::string& knob) { return knob != "r" && knob != "refinement"; }

inline ExperimentConfig apply_knob(ExperimentConfig cfg, const std::string& knob, const std::string& value) {
  default_ablation_values(knob);  // rejects unknown knobs
  auto number = [&](const std::string& s) {
    try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw ValidationError("ablation value '" + s + "' for knob " + knob + " is not a number");
    }
  };
  if (knob == "r") {
    cfg.cc.num_proposals = static_cast<int>(number(value));
  } else if (knob == "l") {
    cfg.contrastive.num_pseudo_labels = static_cast<int>(number(value));
  } else if (knob == "margin") {
    cfg.contrastive.margin = number(value);
  } else if (knob == "alpha_beta") {
    const auto sep = value.find_first_of(":/");
    if (sep == std::string::npos) throw ValidationError("alpha_beta values look like 0.6:0.4");
    cfg.contrastive.alpha = number(value.substr(0, sep));
    cfg.contrastive.beta = number(value.substr(sep + 1));
  } else if (knob == "refinement") {
    cfg.cc.refine = refine_mode_from(value);
  } else if (knob == "text_input") {
    cfg.text_input = text_input_from(value);
  }
  cfg.validate();
  return cfg;
}

struct AblationRow {
  std::string knob;
  std::string value;
  std::string config_hash;
  gczsl::GczslReport report;
};

/// One LOCL run per value, sharing the seed. Pre-training is reused across
/// values of knobs that only affect the classifier.
inline std::vector<AblationRow> ablate(const ExperimentConfig& base, const data::Dataset& ds, const std::string& knob,
                                       const std::vector<std::string>& values, const ProgressFn& progress = {}) {
  if (values.empty()) throw ValidationError("ablation needs at least one value");
  std::vector<ExperimentConfig> cfgs;
  for (const auto& v : values) cfgs.push_back(apply_knob(base, knob, v));
  std::vector<AblationRow> rows;
  std::optional<Stage1> shared;
  for (std::size_t k = 0; k < values.size(); ++k) {
    const auto& cfg = cfgs[k];
    if (progress) progress("ablate " + knob + "=" + values[k]);
    Stage1 s1 = knob_affects_pretraining(knob) || !shared ? run_pretrain(cfg, ds, progress) : *shared;
    if (!knob_affects_pretraining(knob) && !shared) shared = s1;
    LfeModel<float> lfe = s1.lfe;
    Stage2 s2 = run_train(cfg, lfe, ds, Variant::kLocl, progress);
    const ScoredSet scored = score_samples(lfe, s2.cc, std::span<const data::SceneSample>(ds.test), ds.split,
                                           Variant::kLocl);
    rows.push_back({knob, values[k], config_hash(cfg), gczsl::evaluate(scored.set, cfg.eval.sweep_points)});
  }
  return rows;
}

inline nlohmann::json ablation_to_json(const std::vector<AblationRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json rep = gczsl::report_to_json(r.report);
    rep.erase("curve");
    out.push_back({{"knob", r.knob}, {"value", r.value}, {"config_hash", r.config_hash}, {"report", rep}});
  }
  return out;
}

inline std::string ablation_to_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out.precision(10);
  out << "knob,value,auc,best_seen_top1,best_unseen_top1,object_top1,attribute_top1\n";
  for (const auto& r : rows)
    out << r.knob << ',' << r.value << ',' << r.report.auc << ',' << r.report.best_seen << ','
        << r.report.best_unseen << ',' << r.report.object_top1 << ',' << r.report.attribute_top1 << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------
// Histories.

inline std::string pretrain_history_csv(const std::vector<PretrainEpoch>& h) {
  std::ostringstream out;
  out.precision(10);
  out << "epoch,phase,l_con,l_bce,l_total,l_align\n";
  for (const auto& e : h)
    out << e.epoch << ',' << e.phase << ',' << e.con << ',' << e.bce << ',' << e.total << ',' << e.align << '\n';
  return out.str();
}

inline std::string cc_history_csv(const std::vector<CcEpoch>& h) {
  std::ostringstream out;
  out.precision(10);
  out << "epoch,loss,train_accuracy\n";
  for (const auto& e : h) out << e.epoch << ',' << e.loss << ',' << e.train_accuracy << '\n';
  return out.str();
}

}  // namespace locl
