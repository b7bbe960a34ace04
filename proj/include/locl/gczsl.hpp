#pragma once

// Generalized CZSL protocol: a single calibration bias added to every unseen
// pair's score traces a seen-vs-unseen accuracy curve, summarised by its area.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "locl/core.hpp"
#include "locl/dataset.hpp"

namespace locl::gczsl {

struct EvalInstance {
  std::vector<double> scores;  // one per candidate, in candidate order
  data::Pair truth;
  bool seen = true;
};

/// Candidate pairs (sorted, closed world) and the scored instances.
struct EvalSet {
  std::vector<data::Pair> candidates;
  std::vector<bool> unseen;  // per candidate
  std::vector<EvalInstance> instances;

  static EvalSet for_split(const data::PairSplit& split) {
    EvalSet s;
    s.candidates = split.candidates();
    for (const auto& p : s.candidates) s.unseen.push_back(!split.is_train(p));
    return s;
  }

  int index_of(data::Pair p) const {
    const auto it = std::lower_bound(candidates.begin(), candidates.end(), p);
    if (it == candidates.end() || !(*it == p)) return -1;
    return static_cast<int>(it - candidates.begin());
  }

  void validate() const {
    if (candidates.empty()) throw ValidationError("evaluation needs a non-empty candidate set");
    if (unseen.size() != candidates.size()) throw ValidationError("candidate flags do not match candidates");
    if (!std::is_sorted(candidates.begin(), candidates.end()))
      throw ValidationError("candidates must be sorted");
    for (const auto& in : instances) {
      if (in.scores.size() != candidates.size()) throw ValidationError("instance scores do not match candidates");
      const int t = index_of(in.truth);
      if (t < 0) throw ValidationError("true pair is not a candidate");
      if (in.seen == unseen[static_cast<std::size_t>(t)])
        throw ValidationError("instance seen flag disagrees with its true pair");
    }
  }
};

/// Predicted candidate index under calibration c. Infinite c is the limit:
/// the best-scoring unseen (c = +inf) or seen (c = -inf) candidate. Ties go to
/// the lexicographically smallest pair.
inline int predict(const EvalSet& set, const EvalInstance& in, double c) {
  int best = -1;
  double best_score = -std::numeric_limits<double>::infinity();
  const bool plus_inf = std::isinf(c) && c > 0, minus_inf = std::isinf(c) && c < 0;
  for (std::size_t k = 0; k < set.candidates.size(); ++k) {
    const bool u = set.unseen[k];
    if ((plus_inf && !u) || (minus_inf && u)) continue;
    const double s = (u && !std::isinf(c)) ? in.scores[k] + c : in.scores[k];
    if (best < 0 || s > best_score) {
      best = static_cast<int>(k);
      best_score = s;
    }
  }
  if (best < 0) {
    // No candidate of the forced kind: fall back to the plain argmax.
    return predict(set, in, 0.0);
  }
  return best;
}

struct Top1 {
  double seen = 0;
  double unseen = 0;
};

inline Top1 calibrated_top1(const EvalSet& set, double c) {
  int n_seen = 0, n_unseen = 0, hit_seen = 0, hit_unseen = 0;
  for (const auto& in : set.instances) {
    const bool hit = set.candidates[static_cast<std::size_t>(predict(set, in, c))] == in.truth;
    if (in.seen) {
      ++n_seen;
      hit_seen += hit;
    } else {
      ++n_unseen;
      hit_unseen += hit;
    }
  }
  if (n_seen == 0 || n_unseen == 0) throw ValidationError("calibrated accuracy needs both seen and unseen instances");
  return {static_cast<double>(hit_seen) / n_seen, static_cast<double>(hit_unseen) / n_unseen};
}

struct CurvePoint {
  double calibration = 0;
  double seen = 0;
  double unseen = 0;
};

using CalibrationCurve = std::vector<CurvePoint>;

/// Largest |best seen score − best unseen score| over instances: beyond ±this
/// bias the prediction kind is saturated.
inline double max_score_gap(const EvalSet& set) {
  double gap = 0;
  for (const auto& in : set.instances) {
    double bs = -std::numeric_limits<double>::infinity(), bu = bs;
    for (std::size_t k = 0; k < set.candidates.size(); ++k) {
      if (set.unseen[k]) {
        bu = std::max(bu, in.scores[k]);
      } else {
        bs = std::max(bs, in.scores[k]);
      }
    }
    if (std::isfinite(bs) && std::isfinite(bu)) gap = std::max(gap, std::abs(bs - bu));
  }
  return gap;
}

/// num_points evenly spaced calibration values over [−Δ', +Δ'], where Δ' sits
/// just beyond the largest score gap so both endpoints are saturated.
inline CalibrationCurve sweep_curve(const EvalSet& set, int num_points) {
  if (num_points < 2) throw std::invalid_argument("sweep needs at least 2 points");
  const double gap = max_score_gap(set);
  const double edge = gap + 1e-6 * std::max(1.0, gap);
  CalibrationCurve curve;
  curve.reserve(static_cast<std::size_t>(num_points));
  for (int i = 0; i < num_points; ++i) {
    const double c = -edge + 2.0 * edge * i / (num_points - 1);
    const Top1 t = calibrated_top1(set, c);
    curve.push_back({c, t.seen, t.unseen});
  }
  return curve;
}

/// Trapezoidal area under seen accuracy (y) as a function of unseen accuracy
/// (x). Points are sorted by x; equal-x points keep the largest y.
inline double auc(const CalibrationCurve& curve) {
  if (curve.size() < 2) throw std::invalid_argument("auc needs at least 2 curve points");
  std::map<double, double> best;
  for (const auto& p : curve) {
    auto [it, inserted] = best.emplace(p.unseen, p.seen);
    if (!inserted) it->second = std::max(it->second, p.seen);
  }
  double area = 0;
  for (auto it = best.begin(); std::next(it) != best.end(); ++it) {
    const auto nx = std::next(it);
    area += (nx->first - it->first) * (nx->second + it->second) / 2.0;
  }
  return area;
}

struct PrimitiveAccuracy {
  double object = 0;
  double attribute = 0;
};

inline PrimitiveAccuracy primitive_accuracy(const EvalSet& set) {
  if (set.instances.empty()) throw ValidationError("primitive accuracy needs instances");
  int obj = 0, attr = 0;
  for (const auto& in : set.instances) {
    const auto& p = set.candidates[static_cast<std::size_t>(predict(set, in, 0.0))];
    obj += p.obj == in.truth.obj;
    attr += p.attr == in.truth.attr;
  }
  const double n = static_cast<double>(set.instances.size());
  return {obj / n, attr / n};
}

struct GczslReport {
  double auc = 0;
  /// Per-partition maxima over the sweep (not a shared operating point).
  double best_seen = 0;
  double best_unseen = 0;
  double object_top1 = 0;
  double attribute_top1 = 0;
  int num_seen = 0;
  int num_unseen = 0;
  int num_candidates = 0;
  CalibrationCurve curve;
};

inline GczslReport evaluate(const EvalSet& set, int num_points) {
  set.validate();
  GczslReport r;
  r.curve = sweep_curve(set, num_points);
  r.auc = auc(r.curve);
  for (const auto& p : r.curve) {
    r.best_seen = std::max(r.best_seen, p.seen);
    r.best_unseen = std::max(r.best_unseen, p.unseen);
  }
  const auto prim = primitive_accuracy(set);
  r.object_top1 = prim.object;
  r.attribute_top1 = prim.attribute;
  for (const auto& in : set.instances) (in.seen ? r.num_seen : r.num_unseen)++;
  r.num_candidates = static_cast<int>(set.candidates.size());
  return r;
}

// ---------------------------------------------------------------------------
// Files.

/// Report document. Accuracies are fractions; the *_pct fields are ×100.
inline nlohmann::json report_to_json(const GczslReport& r) {
  nlohmann::json j;
  j["auc"] = r.auc;
  j["auc_pct"] = 100.0 * r.auc;
  j["best_seen_top1"] = r.best_seen;
  j["best_unseen_top1"] = r.best_unseen;
  j["best_seen_top1_pct"] = 100.0 * r.best_seen;
  j["best_unseen_top1_pct"] = 100.0 * r.best_unseen;
  j["object_top1"] = r.object_top1;
  j["attribute_top1"] = r.attribute_top1;
  j["num_seen"] = r.num_seen;
  j["num_unseen"] = r.num_unseen;
  j["num_candidates"] = r.num_candidates;
  j["chance_top1"] = r.num_candidates > 0 ? 1.0 / r.num_candidates : 0.0;
  nlohmann::json c = nlohmann::json::array();
  for (const auto& p : r.curve) c.push_back({{"calibration", p.calibration}, {"seen", p.seen}, {"unseen", p.unseen}});
  j["curve"] = std::move(c);
  return j;
}

inline std::string curve_to_csv(const CalibrationCurve& curve) {
  std::ostringstream out;
  out.precision(17);
  out << "calibration,seen_top1,unseen_top1\n";
  for (const auto& p : curve) out << p.calibration << ',' << p.seen << ',' << p.unseen << '\n';
  return out.str();
}

/// Prediction dump: candidates, and per sample its true pair, seen flag,
/// score for every candidate and the top-k pairs.
inline nlohmann::json predictions_to_json(const EvalSet& set, int top_k = 3) {
  nlohmann::json j;
  nlohmann::json cands = nlohmann::json::array();
  for (std::size_t k = 0; k < set.candidates.size(); ++k)
    cands.push_back({{"attr", set.candidates[k].attr}, {"obj", set.candidates[k].obj}, {"unseen", bool(set.unseen[k])}});
  j["candidates"] = std::move(cands);
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& in : set.instances) {
    std::vector<int> order(in.scores.size());
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = static_cast<int>(k);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return in.scores[a] > in.scores[b]; });
    nlohmann::json top = nlohmann::json::array();
    for (int k = 0; k < top_k && k < static_cast<int>(order.size()); ++k) {
      const auto& p = set.candidates[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])];
      top.push_back({{"attr", p.attr}, {"obj", p.obj}, {"score", in.scores[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])]}});
    }
    samples.push_back({{"truth", {in.truth.attr, in.truth.obj}}, {"seen", in.seen}, {"scores", in.scores}, {"top_k", top}});
  }
  j["samples"] = std::move(samples);
  return j;
}

inline EvalSet predictions_from_json(const nlohmann::json& j) {
  EvalSet set;
  try {
    for (const auto& c : j.at("candidates")) {
      set.candidates.push_back({c.at("attr").get<int>(), c.at("obj").get<int>()});
      set.unseen.push_back(c.at("unseen").get<bool>());
    }
    for (const auto& s : j.at("samples")) {
      EvalInstance in;
      in.truth = {s.at("truth").at(0).get<int>(), s.at("truth").at(1).get<int>()};
      in.seen = s.at("seen").get<bool>();
      in.scores = s.at("scores").get<std::vector<double>>();
      set.instances.push_back(std::move(in));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed prediction dump: ") + e.what());
  }
  set.validate();
  return set;
}

}  // namespace locl::gczsl
