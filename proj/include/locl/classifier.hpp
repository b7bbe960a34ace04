#pragma once

// Composition classifier: fuses the top-r localized features, refines the
// fused feature against every attribute and object embedding and predicts one
// attribute and one object.

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "locl/core.hpp"
#include "locl/dataset.hpp"
#include "locl/encoders.hpp"
#include "locl/nn.hpp"

namespace locl {

enum class RefineMode { kMultiply, kAdd, kConcat };

inline const char* to_string(RefineMode m) {
  switch (m) {
    case RefineMode::kMultiply: return "multiply";
    case RefineMode::kAdd: return "add";
    case RefineMode::kConcat: return "concat";
  }
  return "?";
}

inline RefineMode refine_mode_from(const std::string& s) {
  if (s == "multiply") return RefineMode::kMultiply;
  if (s == "add") return RefineMode::kAdd;
  if (s == "concat") return RefineMode::kConcat;
  throw ValidationError("unknown refinement mode '" + s + "' (expected multiply, add or concat)");
}

/// Multi-label BCE on the two softmax outputs, or plain softmax cross-entropy.
enum class CcLoss { kBce, kSoftmaxCe };

inline const char* to_string(CcLoss l) { return l == CcLoss::kBce ? "bce" : "softmax_ce"; }
inline CcLoss cc_loss_from(const std::string& s) {
  if (s == "bce") return CcLoss::kBce;
  if (s == "softmax_ce") return CcLoss::kSoftmaxCe;
  throw ValidationError("unknown classifier loss '" + s + "'");
}

struct ClassifierConfig {
  int num_proposals = 10;
  int hidden = 128;
  int dim = 0;  // refined width D; 0 means the feature width C
  RefineMode refine = RefineMode::kMultiply;
  CcLoss loss = CcLoss::kBce;
};

// ---------------------------------------------------------------------------
// Stateless building blocks.

/// Σ_k softmax(weights)_k · features_k.
template <typename T>
RowVec<T> fuse_proposals(const Mat<T>& features, const RowVec<T>& weights) {
  if (features.rows() != weights.size()) {
    throw std::invalid_argument("fusion expects " + std::to_string(weights.size()) + " proposals, got " +
                                std::to_string(features.rows()));
  }
  const Vec<T> w = softmax<T>(weights.transpose());
  return w.transpose() * features;
}

/// Combines one visual projection with every semantic row.
template <typename T>
Mat<T> refine_rows(const RowVec<T>& visual, const Mat<T>& semantic, RefineMode mode) {
  if (visual.size() != semantic.cols()) throw std::invalid_argument("refine: projection widths differ");
  switch (mode) {
    case RefineMode::kMultiply: return (semantic.array().rowwise() * visual.array()).matrix();
    case RefineMode::kAdd: return (semantic.array().rowwise() + visual.array()).matrix();
    case RefineMode::kConcat: {
      Mat<T> out(semantic.rows(), 2 * semantic.cols());
      out.leftCols(semantic.cols()) = visual.replicate(semantic.rows(), 1);
      out.rightCols(semantic.cols()) = semantic;
      return out;
    }
  }
  throw ValidationError("unknown refinement mode");
}

template <typename T>
void refine_rows_backward(const RowVec<T>& visual, const Mat<T>& semantic, RefineMode mode, const Mat<T>& grad,
                          RowVec<T>& grad_visual, Mat<T>& grad_semantic) {
  switch (mode) {
    case RefineMode::kMultiply:
      grad_visual = (grad.array() * semantic.array()).colwise().sum().matrix();
      grad_semantic = (grad.array().rowwise() * visual.array()).matrix();
      return;
    case RefineMode::kAdd:
      grad_visual = grad.colwise().sum();
      grad_semantic = grad;
      return;
    case RefineMode::kConcat:
      grad_visual = grad.leftCols(semantic.cols()).colwise().sum();
      grad_semantic = grad.rightCols(semantic.cols());
      return;
  }
}

template <typename T>
struct PairScores {
  Vec<T> attribute_logits;
  Vec<T> object_logits;
  Vec<T> attribute_probs;
  Vec<T> object_probs;
};

/// log p(attr) + log p(obj) for every candidate pair, in candidate order.
template <typename T>
std::vector<double> pair_score_vector(const PairScores<T>& s, const std::vector<data::Pair>& candidates) {
  if (candidates.empty()) throw std::invalid_argument("pair_score: empty candidate set");
  std::vector<double> out;
  out.reserve(candidates.size());
  for (const auto& p : candidates) {
    if (p.attr < 0 || p.attr >= s.attribute_probs.size() || p.obj < 0 || p.obj >= s.object_probs.size())
      throw std::out_of_range("candidate pair outside the classifier's vocabulary");
    out.push_back(std::log(static_cast<double>(s.attribute_probs(p.attr))) +
                  std::log(static_cast<double>(s.object_probs(p.obj))));
  }
  return out;
}

template <typename T>
std::map<data::Pair, double> pair_score(const PairScores<T>& s, const std::vector<data::Pair>& candidates) {
  const auto v = pair_score_vector(s, candidates);
  std::map<data::Pair, double> out;
  for (std::size_t i = 0; i < candidates.size(); ++i) out[candidates[i]] = v[i];
  return out;
}

/// Classifier loss for one sample and its gradient w.r.t. both logit vectors.
template <typename T>
T classifier_loss(const PairScores<T>& s, data::Pair label, CcLoss kind, Vec<T>* grad_attr, Vec<T>* grad_obj) {
  auto one = [&](const Vec<T>& p, int target, Vec<T>* grad) {
    T loss = T(0);
    Vec<T> dp(p.size());
    if (kind == CcLoss::kSoftmaxCe) {
      loss = -std::log(std::max(p(target), T(1e-30)));
      if (grad) {
        *grad = p;
        (*grad)(target) -= T(1);
      }
      return loss;
    }
    const T k = T(p.size());
    for (Eigen::Index c = 0; c < p.size(); ++c) {
      const T pc = std::clamp(p(c), T(1e-7), T(1) - T(1e-7));
      const bool pos = c == target;
      loss -= (pos ? std::log(pc) : std::log(T(1) - pc)) / k;
      dp(c) = (pos ? -T(1) / pc : T(1) / (T(1) - pc)) / k;
    }
    if (grad) *grad = softmax_backward<T>(p, dp);
    return loss;
  };
  return one(s.attribute_probs, label.attr, grad_attr) + one(s.object_probs, label.obj, grad_obj);
}

// ---------------------------------------------------------------------------

template <typename T>
struct ClassifierCache {
  Mat<T> features;  // r × C
  Vec<T> weights;   // softmax of fusion parameters
  RowVec<T> fused;
  nn::MlpCache<T> ah, oh, as, os, da, dob;
  RowVec<T> visual_a, visual_o;
  Mat<T> semantic_a, semantic_o;
  Mat<T> refined_a, refined_o;
};

template <typename T>
struct ClassifierGrads {
  Mat<T> features;  // r × C
  SemanticTables<T> tables;
};

template <typename T>
class CompositionClassifier {
 public:
  CompositionClassifier() = default;
  CompositionClassifier(const ClassifierConfig& cfg, int channels)
      : cfg_(cfg),
        fusion_("cc.fusion", ParamGroup::kClassifier, 1, cfg.num_proposals),
        fc_ah_("cc.fc_ah", ParamGroup::kClassifier, channels, cfg.hidden, dim(channels)),
        fc_oh_("cc.fc_oh", ParamGroup::kClassifier, channels, cfg.hidden, dim(channels)),
        fc_as_("cc.fc_as", ParamGroup::kClassifier, channels, cfg.hidden, dim(channels)),
        fc_os_("cc.fc_os", ParamGroup::kClassifier, channels, cfg.hidden, dim(channels)),
        dec_a_("cc.decision_a", ParamGroup::kClassifier, refined_dim(channels), cfg.hidden, 1),
        dec_o_("cc.decision_o", ParamGroup::kClassifier, refined_dim(channels), cfg.hidden, 1) {
    if (cfg.num_proposals < 1) throw ValidationError("classifier needs at least one proposal");
  }

  const ClassifierConfig& config() const { return cfg_; }
  int num_proposals() const { return cfg_.num_proposals; }
  Param<T>& fusion() { return fusion_; }

  void init(std::mt19937_64& rng) {
    fusion_.value.setZero();
    for (auto* m : {&fc_ah_, &fc_oh_, &fc_as_, &fc_os_, &dec_a_, &dec_o_}) m->init(rng);
  }
  void visit(const ParamVisitor<T>& f) {
    f(fusion_);
    for (auto* m : {&fc_ah_, &fc_oh_, &fc_as_, &fc_os_, &dec_a_, &dec_o_}) m->visit(f);
  }

  /// Refined attribute (i × D') and object (j × D') rows for a fused feature.
  std::pair<Mat<T>, Mat<T>> refine(const RowVec<T>& fused, const SemanticTables<T>& tables) const {
    return {refine_rows<T>(fc_ah_.forward(fused, nullptr), fc_as_.forward(tables.attributes, nullptr), cfg_.refine),
            refine_rows<T>(fc_oh_.forward(fused, nullptr), fc_os_.forward(tables.objects, nullptr), cfg_.refine)};
  }

  PairScores<T> classify(const Mat<T>& refined_a, const Mat<T>& refined_o) const {
    PairScores<T> s;
    s.attribute_logits = dec_a_.forward(refined_a, nullptr).col(0);
    s.object_logits = dec_o_.forward(refined_o, nullptr).col(0);
    s.attribute_probs = softmax<T>(s.attribute_logits);
    s.object_probs = softmax<T>(s.object_logits);
    return s;
  }

  PairScores<T> forward(const Mat<T>& features, const SemanticTables<T>& tables, ClassifierCache<T>* cache) const {
    ClassifierCache<T> local;
    ClassifierCache<T>& c = cache ? *cache : local;
    c.features = features;
    c.fused = fuse_proposals<T>(features, fusion_.value.row(0));
    c.weights = softmax<T>(fusion_.value.row(0).transpose());
    c.visual_a = fc_ah_.forward(c.fused, &c.ah);
    c.visual_o = fc_oh_.forward(c.fused, &c.oh);
    c.semantic_a = fc_as_.forward(tables.attributes, &c.as);
    c.semantic_o = fc_os_.forward(tables.objects, &c.os);
    c.refined_a = refine_rows<T>(c.visual_a, c.semantic_a, cfg_.refine);
    c.refined_o = refine_rows<T>(c.visual_o, c.semantic_o, cfg_.refine);
    PairScores<T> s;
    s.attribute_logits = dec_a_.forward(c.refined_a, &c.da).col(0);
    s.object_logits = dec_o_.forward(c.refined_o, &c.dob).col(0);
    s.attribute_probs = softmax<T>(s.attribute_logits);
    s.object_probs = softmax<T>(s.object_logits);
    return s;
  }

  ClassifierGrads<T> backward(const Vec<T>& grad_attr_logits, const Vec<T>& grad_obj_logits,
                              const ClassifierCache<T>& c) {
    const Mat<T> gra = dec_a_.backward(grad_attr_logits, c.da);
    const Mat<T> gro = dec_o_.backward(grad_obj_logits, c.dob);
    RowVec<T> gva, gvo;
    Mat<T> gsa, gso;
    refine_rows_backward<T>(c.visual_a, c.semantic_a, cfg_.refine, gra, gva, gsa);
    refine_rows_backward<T>(c.visual_o, c.semantic_o, cfg_.refine, gro, gvo, gso);
    ClassifierGrads<T> g;
    g.tables.attributes = fc_as_.backward(gsa, c.as);
    g.tables.objects = fc_os_.backward(gso, c.os);
    const RowVec<T> gfused = fc_ah_.backward(gva, c.ah) + fc_oh_.backward(gvo, c.oh);
    g.features = c.weights * gfused;
    const Vec<T> gw = c.features * gfused.transpose();
    fusion_.grad.row(0) += softmax_backward<T>(c.weights, gw).transpose();
    return g;
  }

 private:
  int dim(int channels) const { return cfg_.dim > 0 ? cfg_.dim : channels; }
  int refined_dim(int channels) const { return cfg_.refine == RefineMode::kConcat ? 2 * dim(channels) : dim(channels); }

  ClassifierConfig cfg_;
  Param<T> fusion_;
  nn::Mlp<T> fc_ah_, fc_oh_, fc_as_, fc_os_;
  nn::Mlp<T> dec_a_, dec_o_;
};

}  // namespace locl
