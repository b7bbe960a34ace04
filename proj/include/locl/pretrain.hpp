#pragma once

// Text-guided pseudo labels and the contrastive pre-training objective of the
// localized feature extractor, plus its training loop.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "locl/core.hpp"
#include "locl/dataset.hpp"
#include "locl/encoders.hpp"
#include "locl/lfe.hpp"

namespace locl {

inline constexpr double kDegenerateNorm = 1e-12;

/// u·v / (‖u‖‖v‖); zero when either vector has norm below 1e-12.
template <typename T>
T cosine_similarity(const Vec<T>& u, const Vec<T>& v) {
  if (u.size() != v.size()) throw std::invalid_argument("cosine_similarity: length mismatch");
  const T nu = u.norm(), nv = v.norm();
  if (nu < T(kDegenerateNorm) || nv < T(kDegenerateNorm)) return T(0);
  return u.dot(v) / (nu * nv);
}

/// Row-wise cosine similarity of two equally shaped matrices.
template <typename T>
Vec<T> cosine_rows(const Mat<T>& a, const Mat<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument("cosine_rows: shape mismatch");
  Vec<T> out(a.rows());
  for (Eigen::Index k = 0; k < a.rows(); ++k) {
    const T na = a.row(k).norm(), nb = b.row(k).norm();
    out(k) = (na < T(kDegenerateNorm) || nb < T(kDegenerateNorm)) ? T(0) : a.row(k).dot(b.row(k)) / (na * nb);
  }
  return out;
}

/// Accumulates d/da and d/db of Σ_k grad(k)·cos(a_k, b_k).
template <typename T>
void cosine_rows_backward(const Mat<T>& a, const Mat<T>& b, const Vec<T>& grad, Mat<T>& grad_a, Mat<T>& grad_b) {
  for (Eigen::Index k = 0; k < a.rows(); ++k) {
    const T na = a.row(k).norm(), nb = b.row(k).norm();
    if (na < T(kDegenerateNorm) || nb < T(kDegenerateNorm) || grad(k) == T(0)) continue;
    const T c = a.row(k).dot(b.row(k)) / (na * nb);
    grad_a.row(k) += grad(k) * (b.row(k) / (na * nb) - c * a.row(k) / (na * na));
    grad_b.row(k) += grad(k) * (a.row(k) / (na * nb) - c * b.row(k) / (nb * nb));
  }
}

/// Row-normalised copy; degenerate rows become zero.
template <typename T>
Mat<T> normalize_rows(const Mat<T>& m, Vec<T>* norms = nullptr) {
  Mat<T> out = m;
  if (norms) norms->resize(m.rows());
  for (Eigen::Index k = 0; k < m.rows(); ++k) {
    const T n = m.row(k).norm();
    if (norms) (*norms)(k) = n;
    if (n < T(kDegenerateNorm)) {
      out.row(k).setZero();
    } else {
      out.row(k) /= n;
    }
  }
  return out;
}

/// Backward of normalize_rows given the normalised rows and original norms.
template <typename T>
Mat<T> normalize_rows_backward(const Mat<T>& normalized, const Vec<T>& norms, const Mat<T>& grad_normalized) {
  Mat<T> g = Mat<T>::Zero(normalized.rows(), normalized.cols());
  for (Eigen::Index k = 0; k < normalized.rows(); ++k) {
    if (norms(k) < T(kDegenerateNorm)) continue;
    const T dot = normalized.row(k).dot(grad_normalized.row(k));
    g.row(k) = (grad_normalized.row(k) - dot * normalized.row(k)) / norms(k);
  }
  return g;
}

/// φ_k: similarity of the pair embedding to every anchor feature.
template <typename T>
Vec<T> similarity_scores(const Vec<T>& pair_embedding, const Mat<T>& anchor_features) {
  Vec<T> phi(anchor_features.rows());
  for (Eigen::Index k = 0; k < anchor_features.rows(); ++k)
    phi(k) = cosine_similarity<T>(pair_embedding, anchor_features.row(k).transpose());
  return phi;
}

struct PseudoLabels {
  std::vector<int> y;  // 0/1 per anchor
  int l = 0;
};

/// y_k = 1 for the l largest φ_k (ties: lower anchor index first).
template <typename T>
PseudoLabels make_pseudo_labels(const Vec<T>& phi, int l) {
  if (l < 0 || l > phi.size()) {
    throw std::invalid_argument("pseudo label count " + std::to_string(l) + " outside [0, " +
                                std::to_string(phi.size()) + "]");
  }
  PseudoLabels out;
  out.l = l;
  out.y.assign(static_cast<std::size_t>(phi.size()), 0);
  for (int k : top_indices(phi, l)) out.y[static_cast<std::size_t>(k)] = 1;
  return out;
}

/// How d_k is derived from the anchor/proposal feature cosine.
enum class DistanceMode { kCosine, kOneMinusCosine };

inline const char* to_string(DistanceMode m) { return m == DistanceMode::kCosine ? "cosine" : "one_minus_cosine"; }
inline DistanceMode distance_mode_from(const std::string& s) {
  if (s == "cosine") return DistanceMode::kCosine;
  if (s == "one_minus_cosine") return DistanceMode::kOneMinusCosine;
  throw ValidationError("unknown distance mode '" + s + "'");
}

/// Σ_k (1−y_k)·d_k² + y_k·max(0, m − d_k²). When grad_d is non-null it
/// receives dL/dd.
template <typename T>
T contrastive_loss(const PseudoLabels& labels, const Vec<T>& d, double margin, Vec<T>* grad_d = nullptr) {
  if (static_cast<Eigen::Index>(labels.y.size()) != d.size())
    throw std::invalid_argument("contrastive_loss: labels and distances differ in length");
  if (grad_d) *grad_d = Vec<T>::Zero(d.size());
  T loss = T(0);
  for (Eigen::Index k = 0; k < d.size(); ++k) {
    const T dk = d(k), d2 = dk * dk;
    if (labels.y[static_cast<std::size_t>(k)] == 0) {
      loss += d2;
      if (grad_d) (*grad_d)(k) = T(2) * dk;
    } else {
      const T gap = T(margin) - d2;
      if (gap > T(0)) {
        loss += gap;
        if (grad_d) (*grad_d)(k) = T(-2) * dk;
      }
    }
  }
  return loss;
}

inline constexpr double kProbClamp = 1e-7;

/// BCE target for an objectness score: φ mapped from [-1, 1] onto [0, 1].
template <typename T>
T objectness_target(T phi) {
  return std::clamp((phi + T(1)) / T(2), T(0), T(1));
}

/// Mean binary cross-entropy between objectness and mapped similarity targets.
template <typename T>
T objectness_bce(const Vec<T>& objectness, const Vec<T>& phi) {
  if (objectness.size() != phi.size()) throw std::invalid_argument("objectness_bce: length mismatch");
  if (objectness.size() == 0) return T(0);
  T loss = T(0);
  for (Eigen::Index k = 0; k < phi.size(); ++k) {
    const T p = std::clamp(objectness(k), T(kProbClamp), T(1) - T(kProbClamp));
    const T t = objectness_target(phi(k));
    loss -= t * std::log(p) + (T(1) - t) * std::log(T(1) - p);
  }
  return loss / T(phi.size());
}

/// dL/d(logit) of objectness_bce when objectness = sigmoid(logit).
template <typename T>
Vec<T> objectness_bce_grad_logits(const Vec<T>& objectness, const Vec<T>& phi) {
  Vec<T> g(phi.size());
  for (Eigen::Index k = 0; k < phi.size(); ++k) g(k) = (objectness(k) - objectness_target(phi(k))) / T(phi.size());
  return g;
}

struct ContrastiveConfig {
  double margin = 1.0;
  double alpha = 0.6;
  double beta = 0.4;
  int num_pseudo_labels = 20;
  DistanceMode distance = DistanceMode::kCosine;

  void validate() const {
    if (!(margin > 0)) throw ValidationError("margin must be positive");
    if (alpha < 0 || beta < 0) throw ValidationError("alpha and beta must be non-negative");
    if (num_pseudo_labels < 0) throw ValidationError("pseudo label count must be non-negative");
  }
};

inline double total_pretrain_loss(double l_con, double l_bce, const ContrastiveConfig& cfg) {
  return cfg.alpha * l_con + cfg.beta * l_bce;
}

// ---------------------------------------------------------------------------
// Image-text alignment of the encoders. Each candidate text embedding is
// scored against the image by a soft maximum of its anchor similarities and
// the true label is classified with softmax cross-entropy.

struct AlignmentConfig {
  double pool_temperature = 0.1;
  double logit_scale = 10.0;
};

template <typename T>
struct AlignmentResult {
  T loss = T(0);
  Mat<T> grad_anchor;  // n × C
  Mat<T> grad_text;    // P × C
  Vec<T> pair_scores;  // P
};

template <typename T>
AlignmentResult<T> alignment_loss(const Mat<T>& anchor_features, const Mat<T>& text, int target,
                                  const AlignmentConfig& cfg, bool need_grad = true) {
  AlignmentResult<T> r;
  Vec<T> an_norm, tx_norm;
  const Mat<T> an = normalize_rows(anchor_features, &an_norm);
  const Mat<T> tx = normalize_rows(text, &tx_norm);
  const Mat<T> sims = an * tx.transpose();  // n × P
  const T tau = T(cfg.pool_temperature);
  const Eigen::Index n = sims.rows(), np = sims.cols();
  Mat<T> pool_w(n, np);
  Vec<T> pooled(np);
  for (Eigen::Index p = 0; p < np; ++p) {
    const T mx = sims.col(p).maxCoeff();
    Vec<T> e = ((sims.col(p).array() - mx) / tau).exp().matrix();
    const T s = e.sum();
    pooled(p) = mx + tau * std::log(s);
    pool_w.col(p) = e / s;
  }
  const Vec<T> logits = pooled * T(cfg.logit_scale);
  const Vec<T> prob = softmax<T>(logits);
  r.loss = -std::log(std::max(prob(target), T(1e-30)));
  r.pair_scores = pooled;
  if (!need_grad) return r;
  Vec<T> dlogits = prob;
  dlogits(target) -= T(1);
  const Vec<T> dpooled = dlogits * T(cfg.logit_scale);
  Mat<T> dsims = pool_w * dpooled.asDiagonal();
  const Mat<T> dan = dsims * tx;
  const Mat<T> dtx = dsims.transpose() * an;
  r.grad_anchor = normalize_rows_backward(an, an_norm, dan);
  r.grad_text = normalize_rows_backward(tx, tx_norm, dtx);
  return r;
}

// ---------------------------------------------------------------------------
// The localized feature extractor.

struct LfeConfig {
  ImageEncoderConfig encoder;
  AnchorConfig anchors;
  int rpn_hidden = 64;
  DeltaBounds deltas;
  int text_hidden = 128;
  TextInput text_input = TextInput::kObjectAttribute;
  ContrastiveConfig contrastive;
  AlignmentConfig alignment;
  /// Weight of the alignment term while the contrastive objective trains.
  double alignment_weight = 1.0;
};

template <typename T>
struct LfeModel {
  LfeConfig cfg;
  ImageEncoder<T> encoder;
  TextEncoder<T> text;
  RpnHead<T> rpn;
  Mat<T> anchors;

  LfeModel() = default;
  LfeModel(const LfeConfig& c, int num_attributes, int num_objects)
      : cfg(c),
        encoder(c.encoder),
        text(num_attributes, num_objects, c.encoder.channels(), c.text_hidden, c.text_input),
        rpn(c.encoder.channels(), c.rpn_hidden, c.anchors.per_cell(), c.deltas),
        anchors(generate_anchors<T>(c.encoder.image_size, c.encoder.total_stride(), c.anchors)) {
    cfg.contrastive.validate();
    cfg.deltas.validate();
    if (cfg.contrastive.num_pseudo_labels > anchors.rows())
      throw ValidationError("pseudo label count exceeds anchor count");
  }

  int image_size() const { return cfg.encoder.image_size; }
  int num_anchors() const { return static_cast<int>(anchors.rows()); }

  void init(std::uint64_t seed) {
    std::mt19937_64 rng(derive_seed(seed, "lfe-init"));
    encoder.init(rng);
    text.init(rng);
    rpn.init(rng);
  }

  void visit(const ParamVisitor<T>& f) {
    encoder.visit(f);
    text.visit(f);
    rpn.visit(f);
  }

  std::vector<Param<T>*> params() {
    std::vector<Param<T>*> out;
    visit([&](Param<T>& p) { out.push_back(&p); });
    return out;
  }

  /// Inference: proposals for every anchor (no text branch involved).
  ProposalSet<T> propose(const data::Image& img) const {
    const FeatureMap<T> f = encoder.forward(img, nullptr);
    return rpn_forward(f, anchors, rpn);
  }
};

/// Text-side candidates for alignment: the train pairs, or the distinct train
/// objects when only object names feed the text encoder.
inline std::vector<data::Pair> alignment_candidates(const std::vector<data::Pair>& train_pairs, TextInput input) {
  if (input == TextInput::kObjectAttribute) return train_pairs;
  std::vector<data::Pair> out;
  for (const auto& p : train_pairs) {
    data::Pair q{0, p.obj};
    if (std::find(out.begin(), out.end(), q) == out.end()) out.push_back(q);
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline int candidate_index(const std::vector<data::Pair>& candidates, data::Pair label, TextInput input) {
  const data::Pair key = input == TextInput::kObjectAttribute ? label : data::Pair{0, label.obj};
  const auto it = std::lower_bound(candidates.begin(), candidates.end(), key);
  if (it == candidates.end() || !(*it == key)) throw ValidationError("training label is not a train pair");
  return static_cast<int>(it - candidates.begin());
}

struct PretrainLosses {
  double con = 0;
  double bce = 0;
  double align = 0;
  double total = 0;
};

struct PretrainStepOptions {
  bool contrastive = true;  // false: alignment-only warm-up
  bool encoder_grad = true;
};

/// Forward + backward on one image; gradients accumulate into the model.
/// `fixed_phi` replaces the similarity scores (they are constants to the
/// gradient either way); `phi_out` receives the scores used.
template <typename T>
PretrainLosses pretrain_step(LfeModel<T>& model, const data::Image& img, data::Pair label,
                             const std::vector<data::Pair>& candidates, const PretrainStepOptions& opt,
                             const Vec<T>* fixed_phi = nullptr, Vec<T>* phi_out = nullptr) {
  ImageEncoderCache<T> ecache;
  const FeatureMap<T> fmap = model.encoder.forward(img, &ecache);
  const Mat<T> anchor_feats = pool_region_features(fmap, model.anchors);

  TextEncoderCache<T> tcache;
  const Mat<T> text = model.text.encode_pairs(candidates, &tcache);
  const int target = candidate_index(candidates, label, model.text.input());

  const auto& cc = model.cfg.contrastive;
  PretrainLosses out;
  const double gamma = opt.contrastive ? model.cfg.alignment_weight : 1.0;
  AlignmentResult<T> al;
  if (gamma > 0) {
    al = alignment_loss<T>(anchor_feats, text, target, model.cfg.alignment);
    out.align = static_cast<double>(al.loss);
  }

  Mat<T> grad_fmap = Mat<T>::Zero(fmap.data.rows(), fmap.data.cols());
  Mat<T> grad_anchor = Mat<T>::Zero(anchor_feats.rows(), anchor_feats.cols());
  if (gamma > 0) grad_anchor += T(gamma) * al.grad_anchor;

  if (opt.contrastive) {
    RpnCache<T> rcache;
    Vec<T> logits;
    Mat<T> deltas;
    model.rpn.split(model.rpn.forward(fmap, &rcache), logits, deltas);
    const int ih = fmap.height * fmap.stride, iw = fmap.width * fmap.stride;
    const Mat<T> boxes = decode_boxes(model.anchors, deltas, ih, iw, model.rpn.bounds());
    const Mat<T> prop_feats = pool_region_features(fmap, boxes);

    // Pseudo labels and BCE targets are treated as constants.
    const Vec<T> phi = fixed_phi ? *fixed_phi : similarity_scores<T>(text.row(target).transpose(), anchor_feats);
    if (phi_out) *phi_out = phi;
    const PseudoLabels y = make_pseudo_labels(phi, cc.num_pseudo_labels);

    Vec<T> cosv = cosine_rows(anchor_feats, prop_feats);
    Vec<T> d = cc.distance == DistanceMode::kCosine ? cosv : (Vec<T>::Ones(cosv.size()) - cosv).eval();
    Vec<T> grad_d;
    const T l_con = contrastive_loss(y, d, cc.margin, &grad_d);
    if (cc.distance == DistanceMode::kOneMinusCosine) grad_d = -grad_d;

    const Vec<T> obj = logits.unaryExpr([](T v) { return sigmoid(v); });
    const T l_bce = objectness_bce(obj, phi);
    out.con = static_cast<double>(l_con);
    out.bce = static_cast<double>(l_bce);

    Mat<T> grad_prop = Mat<T>::Zero(prop_feats.rows(), prop_feats.cols());
    cosine_rows_backward<T>(anchor_feats, prop_feats, grad_d * T(cc.alpha), grad_anchor, grad_prop);
    Mat<T> grad_boxes;
    pool_region_backward(fmap, boxes, grad_prop, grad_fmap, &grad_boxes);
    const Mat<T> grad_deltas = decode_boxes_backward(model.anchors, deltas, ih, iw, grad_boxes, model.rpn.bounds());
    const Vec<T> grad_logits = objectness_bce_grad_logits(obj, phi) * T(cc.beta);
    grad_fmap += model.rpn.backward(grad_logits, grad_deltas, rcache);
  }
  out.total = total_pretrain_loss(out.con, out.bce, cc) + gamma * out.align;

  pool_region_backward<T>(fmap, model.anchors, grad_anchor, grad_fmap, nullptr);
  if (gamma > 0) model.text.backward_pairs(T(gamma) * al.grad_text, tcache);
  if (opt.encoder_grad) model.encoder.backward(grad_fmap, ecache);
  return out;
}

// ---------------------------------------------------------------------------
// Training loop.

struct StepSchedule {
  double lr = 1e-5;
  double decay = 0.1;
  int decay_every = 10;
  int batch_size = 24;
  int max_epochs = 100;
  int early_stop_epoch = 50;

  int epochs() const { return std::min(max_epochs, early_stop_epoch); }
  double lr_at(int epoch) const {
    return decay_every > 0 ? lr * std::pow(decay, epoch / decay_every) : lr;
  }
};

struct PretrainSchedule {
  /// Alignment-only epochs before the contrastive objective switches on.
  int warmup_epochs = 0;
  double warmup_lr = 1e-3;
  StepSchedule main;
  double text_projection_lr_scale = 0.1;
  bool encoder_grad = true;
};

struct PretrainEpoch {
  int epoch = 0;
  std::string phase;
  double con = 0, bce = 0, align = 0, total = 0;
};

using ProgressFn = std::function<void(const std::string&)>;

template <typename T>
std::vector<PretrainEpoch> pretrain_lfe(LfeModel<T>& model, std::span<const data::TrainingSample> samples,
                                        const std::vector<data::Pair>& train_pairs, const PretrainSchedule& sched,
                                        std::uint64_t seed, const ProgressFn& progress = {}) {
  if (samples.empty()) throw ValidationError("pre-training needs at least one sample");
  const auto candidates = alignment_candidates(train_pairs, model.text.input());
  auto params = model.params();
  std::vector<PretrainEpoch> history;
  std::mt19937_64 rng(derive_seed(seed, "pretrain-order"));
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);

  const int total_epochs = sched.warmup_epochs + sched.main.epochs();
  Adam<T> warm_opt, main_opt;
  for (int epoch = 0; epoch < total_epochs; ++epoch) {
    const bool warm = epoch < sched.warmup_epochs;
    const int main_epoch = epoch - sched.warmup_epochs;
    const double lr = warm ? sched.warmup_lr : sched.main.lr_at(main_epoch);
    const PretrainStepOptions opt{!warm, warm || sched.encoder_grad};
    auto lr_of = [&](ParamGroup g) {
      if (g == ParamGroup::kTextProjection) return lr * sched.text_projection_lr_scale;
      if (warm && g == ParamGroup::kRpn) return 0.0;
      return lr;
    };
    std::shuffle(order.begin(), order.end(), rng);
    PretrainEpoch rec;
    rec.epoch = epoch + 1;
    rec.phase = warm ? "align" : "contrastive";
    const int bs = std::max(1, sched.main.batch_size);
    int batch = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(bs), ++batch) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(bs));
      for (auto* p : params) p->zero_grad();
      double batch_total = 0;
      for (std::size_t i = start; i < end; ++i) {
        const auto& s = samples[order[i]];
        const PretrainLosses l = pretrain_step(model, *s.image, s.label, candidates, opt);
        rec.con += l.con;
        rec.bce += l.bce;
        rec.align += l.align;
        rec.total += l.total;
        batch_total += l.total;
      }
      if (!std::isfinite(batch_total)) throw DivergenceError("pretrain-lfe", epoch + 1, batch + 1);
      (warm ? warm_opt : main_opt).step(params, lr_of, 1.0 / static_cast<double>(end - start));
    }
    const double n = static_cast<double>(samples.size());
    rec.con /= n;
    rec.bce /= n;
    rec.align /= n;
    rec.total /= n;
    history.push_back(rec);
    if (progress) {
      progress("pretrain epoch " + std::to_string(rec.epoch) + " [" + rec.phase + "] total=" +
               std::to_string(rec.total) + " con=" + std::to_string(rec.con) + " bce=" + std::to_string(rec.bce) +
               " align=" + std::to_string(rec.align));
    }
  }
  return history;
}

}  // namespace locl
