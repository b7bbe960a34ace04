#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "locl/classifier.hpp"
#include "locl/core.hpp"
#include "locl/dataset.hpp"
#include "locl/encoders.hpp"
#include "locl/lfe.hpp"
#include "locl/pretrain.hpp"

namespace locl {

struct CcSchedule {
  double lr = 1e-3;
  double decay = 0.1;
  int decay_every = 7;
  int batch_size = 32;
  int epochs = 30;
  /// Learning rate for the localized feature extractor while the classifier
  /// trains. Zero freezes it.
  double lfe_lr = 1e-6;

  double lr_at(int epoch) const { return decay_every > 0 ? lr * std::pow(decay, epoch / decay_every) : lr; }
  double lfe_lr_at(int epoch) const {
    return decay_every > 0 ? lfe_lr * std::pow(decay, epoch / decay_every) : lfe_lr;
  }
};

struct EvalConfig {
  int sweep_points = 50;
  int top_k = 3;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  data::DatasetConfig dataset;
  int channels = 64;
  /// Conv stack; empty means the default stride-32 stack for `channels`.
  std::vector<ConvSpec> encoder_layers;
  AnchorConfig anchors;
  int rpn_hidden = 64;
  DeltaBounds deltas;
  int text_hidden = 128;
  TextInput text_input = TextInput::kObjectAttribute;
  ContrastiveConfig contrastive;
  AlignmentConfig alignment;
  double alignment_weight = 1.0;
  PretrainSchedule pretrain;
  ClassifierConfig cc;
  CcSchedule cc_schedule;
  EvalConfig eval;

  ImageEncoderConfig encoder_config() const {
    ImageEncoderConfig e = default_encoder_config(dataset.image_size, channels);
    if (!encoder_layers.empty()) e.layers = encoder_layers;
    return e;
  }

  LfeConfig lfe_config() const {
    LfeConfig l;
    l.encoder = encoder_config();
    l.anchors = anchors;
    l.rpn_hidden = rpn_hidden;
    l.deltas = deltas;
    l.text_hidden = text_hidden;
    l.text_input = text_input;
    l.contrastive = contrastive;
    l.alignment = alignment;
    l.alignment_weight = alignment_weight;
    return l;
  }

  void validate() const {
    if (dataset.num_objects < 2 || dataset.num_attributes < 2) throw ValidationError("vocabulary needs at least 2x2");
    if (dataset.image_size <= 0) throw ValidationError("image size must be positive");
    if (channels < 1) throw ValidationError("channels must be positive");
    const auto enc = encoder_config();
    if (enc.channels() != channels) throw ValidationError("last encoder layer must have `channels` outputs");
    if (dataset.image_size % enc.total_stride() != 0)
      throw ValidationError("image size " + std::to_string(dataset.image_size) + " is not divisible by stride " +
                            std::to_string(enc.total_stride()));
    if (anchors.scales.empty() || anchors.ratios.empty()) throw ValidationError("anchor scales and ratios must be set");
    contrastive.validate();
    deltas.validate();
    const int side = dataset.image_size / enc.total_stride();
    const int n = side * side * anchors.per_cell();
    if (contrastive.num_pseudo_labels > n)
      throw ValidationError("pseudo label count " + std::to_string(contrastive.num_pseudo_labels) +
                            " exceeds anchor count " + std::to_string(n));
    if (cc.num_proposals < 1 || cc.num_proposals > n)
      throw ValidationError("proposal count " + std::to_string(cc.num_proposals) + " must lie in [1, " +
                            std::to_string(n) + "]");
    if (cc_schedule.batch_size < 1 || pretrain.main.batch_size < 1) throw ValidationError("batch sizes must be positive");
    if (cc_schedule.epochs < 0 || pretrain.warmup_epochs < 0) throw ValidationError("epoch counts must be non-negative");
    if (eval.sweep_points < 2) throw ValidationError("sweep needs at least 2 points");
  }
};

// ---------------------------------------------------------------------------
// JSON.

inline nlohmann::json to_json(const ExperimentConfig& c) {
  using nlohmann::json;
  json layers = json::array();
  for (const auto& l : c.encoder_layers) layers.push_back({{"kernel", l.kernel}, {"stride", l.stride}, {"channels", l.channels}});
  const auto& d = c.dataset;
  const auto& p = c.pretrain;
  return {
      {"seed", c.seed},
      {"dataset",
       {{"num_objects", d.num_objects},
        {"num_attributes", d.num_attributes},
        {"unseen_fraction", d.unseen_fraction},
        {"val_fraction", d.val_fraction},
        {"image_size", d.image_size},
        {"clutter_min", d.clutter_min},
        {"clutter_max", d.clutter_max},
        {"num_train", d.num_train},
        {"num_val", d.num_val},
        {"num_test", d.num_test},
        {"test_unseen_share", d.test_unseen_share},
        {"seed", d.seed}}},
      {"encoder", {{"channels", c.channels}, {"layers", layers}, {"text_hidden", c.text_hidden}}},
      {"lfe",
       {{"anchor_scales", c.anchors.scales},
        {"anchor_ratios", c.anchors.ratios},
        {"rpn_hidden", c.rpn_hidden},
        {"max_shift", c.deltas.shift},
        {"max_log_scale", c.deltas.log_scale},
        {"text_input", to_string(c.text_input)},
        {"num_pseudo_labels", c.contrastive.num_pseudo_labels},
        {"margin", c.contrastive.margin},
        {"alpha", c.contrastive.alpha},
        {"beta", c.contrastive.beta},
        {"distance", to_string(c.contrastive.distance)},
        {"alignment_temperature", c.alignment.pool_temperature},
        {"alignment_logit_scale", c.alignment.logit_scale},
        {"alignment_weight", c.alignment_weight},
        {"warmup_epochs", p.warmup_epochs},
        {"warmup_lr", p.warmup_lr},
        {"lr", p.main.lr},
        {"lr_decay", p.main.decay},
        {"decay_every", p.main.decay_every},
        {"batch_size", p.main.batch_size},
        {"max_epochs", p.main.max_epochs},
        {"early_stop_epoch", p.main.early_stop_epoch},
        {"text_projection_lr_scale", p.text_projection_lr_scale},
        {"encoder_grad", p.encoder_grad}}},
      {"cc",
       {{"num_proposals", c.cc.num_proposals},
        {"hidden", c.cc.hidden},
        {"dim", c.cc.dim},
        {"refinement", to_string(c.cc.refine)},
        {"loss", to_string(c.cc.loss)},
        {"lr", c.cc_schedule.lr},
        {"lr_decay", c.cc_schedule.decay},
        {"decay_every", c.cc_schedule.decay_every},
        {"batch_size", c.cc_schedule.batch_size},
        {"epochs", c.cc_schedule.epochs},
        {"lfe_lr", c.cc_schedule.lfe_lr}}},
      {"eval", {{"sweep_points", c.eval.sweep_points}, {"top_k", c.eval.top_k}}},
  };
}

namespace detail {

template <typename V>
void read_opt(const nlohmann::json& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}

inline void check_keys(const nlohmann::json& j, const nlohmann::json& reference, const std::string& where) {
  if (!j.is_object()) throw ValidationError("config section '" + where + "' must be an object");
  for (const auto& [k, v] : j.items()) {
    if (!reference.contains(k)) throw ValidationError("unknown config key '" + where + (where.empty() ? "" : ".") + k + "'");
    if (reference.at(k).is_object() && k != "layers") check_keys(v, reference.at(k), where.empty() ? k : where + "." + k);
  }
}

}  // namespace detail

/// Overlays the keys present in `j` onto `base`. Unknown keys are rejected.
inline ExperimentConfig config_from_json(const nlohmann::json& j, ExperimentConfig base = {}) {
  detail::check_keys(j, to_json(base), "");
  ExperimentConfig c = std::move(base);
  try {
    using detail::read_opt;
    read_opt(j, "seed", c.seed);
    if (j.contains("dataset")) {
      const auto& d = j.at("dataset");
      auto& o = c.dataset;
      read_opt(d, "num_objects", o.num_objects);
      read_opt(d, "num_attributes", o.num_attributes);
      read_opt(d, "unseen_fraction", o.unseen_fraction);
      read_opt(d, "val_fraction", o.val_fraction);
      read_opt(d, "image_size", o.image_size);
      read_opt(d, "clutter_min", o.clutter_min);
      read_opt(d, "clutter_max", o.clutter_max);
      read_opt(d, "num_train", o.num_train);
      read_opt(d, "num_val", o.num_val);
      read_opt(d, "num_test", o.num_test);
      read_opt(d, "test_unseen_share", o.test_unseen_share);
      read_opt(d, "seed", o.seed);
    }
    if (j.contains("encoder")) {
      const auto& e = j.at("encoder");
      read_opt(e, "channels", c.channels);
      read_opt(e, "text_hidden", c.text_hidden);
      if (e.contains("layers")) {
        c.encoder_layers.clear();
        for (const auto& l : e.at("layers"))
          c.encoder_layers.push_back({l.at("kernel").get<int>(), l.at("stride").get<int>(), l.at("channels").get<int>()});
      }
    }
    if (j.contains("lfe")) {
      const auto& l = j.at("lfe");
      read_opt(l, "anchor_scales", c.anchors.scales);
      read_opt(l, "anchor_ratios", c.anchors.ratios);
      read_opt(l, "rpn_hidden", c.rpn_hidden);
      read_opt(l, "max_shift", c.deltas.shift);
      read_opt(l, "max_log_scale", c.deltas.log_scale);
      if (l.contains("text_input")) c.text_input = text_input_from(l.at("text_input").get<std::string>());
      read_opt(l, "num_pseudo_labels", c.contrastive.num_pseudo_labels);
      read_opt(l, "margin", c.contrastive.margin);
      read_opt(l, "alpha", c.contrastive.alpha);
      read_opt(l, "beta", c.contrastive.beta);
      if (l.contains("distance")) c.contrastive.distance = distance_mode_from(l.at("distance").get<std::string>());
      read_opt(l, "alignment_temperature", c.alignment.pool_temperature);
      read_opt(l, "alignment_logit_scale", c.alignment.logit_scale);
      read_opt(l, "alignment_weight", c.alignment_weight);
      read_opt(l, "warmup_epochs", c.pretrain.warmup_epochs);
      read_opt(l, "warmup_lr", c.pretrain.warmup_lr);
      read_opt(l, "lr", c.pretrain.main.lr);
      read_opt(l, "lr_decay", c.pretrain.main.decay);
      read_opt(l, "decay_every", c.pretrain.main.decay_every);
      read_opt(l, "batch_size", c.pretrain.main.batch_size);
      read_opt(l, "max_epochs", c.pretrain.main.max_epochs);
      read_opt(l, "early_stop_epoch", c.pretrain.main.early_stop_epoch);
      read_opt(l, "text_projection_lr_scale", c.pretrain.text_projection_lr_scale);
      read_opt(l, "encoder_grad", c.pretrain.encoder_grad);
    }
    if (j.contains("cc")) {
      const auto& k = j.at("cc");
      read_opt(k, "num_proposals", c.cc.num_proposals);
      read_opt(k, "hidden", c.cc.hidden);
      read_opt(k, "dim", c.cc.dim);
      if (k.contains("refinement")) c.cc.refine = refine_mode_from(k.at("refinement").get<std::string>());
      if (k.contains("loss")) c.cc.loss = cc_loss_from(k.at("loss").get<std::string>());
      read_opt(k, "lr", c.cc_schedule.lr);
      read_opt(k, "lr_decay", c.cc_schedule.decay);
      read_opt(k, "decay_every", c.cc_schedule.decay_every);
      read_opt(k, "batch_size", c.cc_schedule.batch_size);
      read_opt(k, "epochs", c.cc_schedule.epochs);
      read_opt(k, "lfe_lr", c.cc_schedule.lfe_lr);
    }
    if (j.contains("eval")) {
      read_opt(j.at("eval"), "sweep_points", c.eval.sweep_points);
      read_opt(j.at("eval"), "top_k", c.eval.top_k);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("bad config value: ") + e.what());
  }
  return c;
}

/// Stable hash of the canonical JSON form.
inline std::string config_hash(const ExperimentConfig& c) { return hex64(fnv1a(to_json(c).dump())); }

// ---------------------------------------------------------------------------
// Presets. The defaults above follow the published training recipe; the desk
// preset shortens it to fit a CPU budget.

/// Larger learning rates and far fewer epochs, for the 2000-image synthetic
/// set on one CPU core.
inline ExperimentConfig desk_config() {
  ExperimentConfig c;
  c.pretrain.warmup_epochs = 14;
  c.pretrain.warmup_lr = 2e-3;
  // The summed contrastive term swamps the encoder; keep it fixed after warm-up
  // and let the main phase train the RPN and text side only.
  c.pretrain.encoder_grad = false;
  c.alignment_weight = 10;
  c.pretrain.main.lr = 2e-3;
  c.pretrain.main.decay_every = 100;
  c.pretrain.main.max_epochs = 20;
  c.pretrain.main.early_stop_epoch = 20;
  c.cc_schedule.epochs = 15;
  c.cc_schedule.lfe_lr = 1e-4;
  return c;
}

/// Tiny end-to-end configuration: 64×64 images, 200 samples.
inline ExperimentConfig smoke_config() {
  ExperimentConfig c = desk_config();
  c.dataset.image_size = 64;
  c.dataset.num_train = 140;
  c.dataset.num_val = 20;
  c.dataset.num_test = 40;
  c.channels = 32;
  c.text_hidden = 64;
  c.rpn_hidden = 32;
  c.cc.hidden = 64;
  c.pretrain.warmup_epochs = 1;
  c.pretrain.main.max_epochs = 1;
  c.pretrain.main.early_stop_epoch = 1;
  c.cc_schedule.epochs = 2;
  c.eval.sweep_points = 20;
  return c;
}

inline ExperimentConfig preset(const std::string& name) {
  if (name == "paper" || name == "default") return {};
  if (name == "desk") return desk_config();
  if (name == "smoke") return smoke_config();
  throw ValidationError("unknown preset '" + name + "' (expected paper, desk or smoke)");
}

}  // namespace locl
