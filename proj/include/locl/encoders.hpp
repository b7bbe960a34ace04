#pragma once

#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "locl/core.hpp"
#include "locl/dataset.hpp"
#include "locl/nn.hpp"

namespace locl {

/// Spatial feature map stored as (height*width) × channels, row-major over
/// positions. `stride` is the input-pixel size of one cell.
template <typename T>
struct FeatureMap {
  int height = 0;
  int width = 0;
  int channels = 0;
  int stride = 1;
  Mat<T> data;

  auto cell(int y, int x) const { return data.row(static_cast<Eigen::Index>(y) * width + x); }
};

struct ConvSpec {
  int kernel = 3;
  int stride = 1;
  int channels = 16;
};

struct ImageEncoderConfig {
  int image_size = 256;
  /// Last layer's channel count is the feature width C.
  std::vector<ConvSpec> layers = {{4, 4, 16}, {3, 2, 32}, {3, 2, 48}, {3, 2, 64}};

  int total_stride() const {
    int s = 1;
    for (const auto& l : layers) s *= l.stride;
    return s;
  }
  int channels() const { return layers.empty() ? 3 : layers.back().channels; }
};

/// Default conv stack for a given feature width, total stride 32.
inline ImageEncoderConfig default_encoder_config(int image_size, int channels) {
  ImageEncoderConfig c;
  c.image_size = image_size;
  c.layers = {{4, 4, 16}, {3, 2, 32}, {3, 2, 48}, {3, 2, channels}};
  return c;
}

template <typename T>
struct ImageEncoderCache {
  std::vector<nn::ConvCache<T>> convs;
  std::vector<Mat<T>> activations;  // post-ReLU output of every hidden layer
};

/// Small convolutional stack. ReLU after every layer except the last, so
/// features can take either sign.
template <typename T>
class ImageEncoder {
 public:
  ImageEncoder() = default;
  explicit ImageEncoder(ImageEncoderConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.layers.empty()) throw ValidationError("image encoder needs at least one layer");
    const int stride = cfg_.total_stride();
    if (cfg_.image_size % stride != 0) {
      throw ValidationError("image size " + std::to_string(cfg_.image_size) + " is not divisible by encoder stride " +
                            std::to_string(stride));
    }
    int cin = 3;
    int side = cfg_.image_size;
    for (std::size_t i = 0; i < cfg_.layers.size(); ++i) {
      const auto& l = cfg_.layers[i];
      if (l.kernel < l.stride) throw ValidationError("conv kernel must be at least its stride");
      convs_.emplace_back("encoder.conv" + std::to_string(i), ParamGroup::kImageEncoder, cin, l.channels, l.kernel,
                          l.stride);
      const int out = nn::conv_out_size(side, l.kernel, l.stride, convs_.back().padding());
      if (out * l.stride != side) throw ValidationError("conv layer " + std::to_string(i) + " does not tile its input");
      side = out;
      cin = l.channels;
    }
  }

  const ImageEncoderConfig& config() const { return cfg_; }
  int channels() const { return cfg_.channels(); }
  int stride() const { return cfg_.total_stride(); }
  int out_side() const { return cfg_.image_size / stride(); }

  void init(std::mt19937_64& rng) {
    for (std::size_t i = 0; i < convs_.size(); ++i) convs_[i].init(rng, i + 1 == convs_.size() ? 0.7 : 1.0);
  }
  void visit(const ParamVisitor<T>& f) {
    for (auto& c : convs_) c.visit(f);
  }
  std::vector<nn::Conv2d<T>>& convs() { return convs_; }

  FeatureMap<T> forward(const Mat<T>& pixels, int height, int width, ImageEncoderCache<T>* cache) const {
    if (height != cfg_.image_size || width != cfg_.image_size) {
      throw std::invalid_argument("image is " + std::to_string(height) + "x" + std::to_string(width) +
                                  ", encoder expects " + std::to_string(cfg_.image_size) + "x" +
                                  std::to_string(cfg_.image_size));
    }
    if (pixels.rows() != static_cast<Eigen::Index>(height) * width || pixels.cols() != 3)
      throw std::invalid_argument("pixel matrix must be (H*W) x 3");
    if (cache != nullptr) {
      cache->convs.assign(convs_.size(), {});
      cache->activations.clear();
    }
    Mat<T> x = pixels;
    int h = height, w = width;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      nn::ConvCache<T>* cc = cache ? &cache->convs[i] : nullptr;
      Mat<T> y = convs_[i].forward(x, h, w, cc);
      h /= convs_[i].stride();
      w /= convs_[i].stride();
      if (i + 1 < convs_.size()) {
        nn::relu_inplace(y);
        if (cache) cache->activations.push_back(y);
      }
      x = std::move(y);
    }
    FeatureMap<T> f;
    f.height = h;
    f.width = w;
    f.channels = channels();
    f.stride = stride();
    f.data = std::move(x);
    return f;
  }

  FeatureMap<T> forward(const data::Image& img, ImageEncoderCache<T>* cache) const {
    return forward(img.to_matrix<T>(), img.height, img.width, cache);
  }

  /// Accumulates parameter gradients from dL/dF.
  void backward(const Mat<T>& grad_fmap, const ImageEncoderCache<T>& cache) {
    Mat<T> g = grad_fmap;
    for (std::size_t i = convs_.size(); i-- > 0;) {
      if (i + 1 < convs_.size()) nn::relu_backward_inplace(g, cache.activations[i]);
      g = convs_[i].backward(g, cache.convs[i], i > 0);
    }
  }

 private:
  ImageEncoderConfig cfg_;
  std::vector<nn::Conv2d<T>> convs_;
};

template <typename T>
FeatureMap<T> encode_image(const data::Image& img, const ImageEncoder<T>& enc) {
  return enc.forward(img, nullptr);
}

/// What the pair projection sees: the attribute and object embeddings, or the
/// object embedding alone (attribute slot zeroed).
enum class TextInput { kObjectAttribute, kObjectOnly };

inline const char* to_string(TextInput t) { return t == TextInput::kObjectOnly ? "obj" : "obj-attr"; }
inline TextInput text_input_from(const std::string& s) {
  if (s == "obj-attr" || s == "obj_attr") return TextInput::kObjectAttribute;
  if (s == "obj") return TextInput::kObjectOnly;
  throw ValidationError("unknown text input '" + s + "' (expected obj-attr or obj)");
}

/// Per-primitive semantic embeddings (one row per attribute / object).
template <typename T>
struct SemanticTables {
  Mat<T> attributes;  // i × C
  Mat<T> objects;     // j × C
};

template <typename T>
struct TextEncoderCache {
  std::vector<data::Pair> pairs;
  nn::MlpCache<T> mlp;
};

/// Learnable attribute and object embedding tables plus a two-layer pair
/// projection into the visual feature space.
template <typename T>
class TextEncoder {
 public:
  TextEncoder() = default;
  TextEncoder(int num_attributes, int num_objects, int channels, int hidden, TextInput input = TextInput::kObjectAttribute)
      : input_(input),
        attr_("text.attribute_embedding", ParamGroup::kTextEmbedding, num_attributes, channels),
        obj_("text.object_embedding", ParamGroup::kTextEmbedding, num_objects, channels),
        proj_("text.pair_projection", ParamGroup::kTextProjection, 2 * channels, hidden, channels) {
    if (num_attributes < 1 || num_objects < 1) throw ValidationError("text encoder needs a non-empty vocabulary");
  }

  int channels() const { return static_cast<int>(attr_.value.cols()); }
  int num_attributes() const { return static_cast<int>(attr_.value.rows()); }
  int num_objects() const { return static_cast<int>(obj_.value.rows()); }
  TextInput input() const { return input_; }
  void set_input(TextInput t) { input_ = t; }

  void init(std::mt19937_64& rng) {
    init_normal(attr_, rng, 0.5);
    init_normal(obj_, rng, 0.5);
    proj_.init(rng);
  }
  void visit(const ParamVisitor<T>& f) {
    f(attr_);
    f(obj_);
    proj_.visit(f);
  }
  Param<T>& attribute_embedding() { return attr_; }
  Param<T>& object_embedding() { return obj_; }

  /// Pair embeddings, one row per requested pair.
  Mat<T> encode_pairs(std::span<const data::Pair> pairs, TextEncoderCache<T>* cache) const {
    const int c = channels();
    Mat<T> in = Mat<T>::Zero(static_cast<Eigen::Index>(pairs.size()), 2 * c);
    for (std::size_t k = 0; k < pairs.size(); ++k) {
      check(pairs[k]);
      const auto row = static_cast<Eigen::Index>(k);
      if (input_ == TextInput::kObjectAttribute) in.row(row).head(c) = attr_.value.row(pairs[k].attr);
      in.row(row).tail(c) = obj_.value.row(pairs[k].obj);
    }
    if (cache) cache->pairs.assign(pairs.begin(), pairs.end());
    return proj_.forward(in, cache ? &cache->mlp : nullptr);
  }

  Vec<T> encode_pair(data::Pair p) const {
    const data::Pair one[] = {p};
    return encode_pairs(one, nullptr).row(0).transpose();
  }

  SemanticTables<T> encode_all_primitives() const { return {attr_.value, obj_.value}; }

  void backward_pairs(const Mat<T>& grad_out, const TextEncoderCache<T>& cache) {
    const int c = channels();
    Mat<T> din = proj_.backward(grad_out, cache.mlp);
    for (std::size_t k = 0; k < cache.pairs.size(); ++k) {
      const auto row = static_cast<Eigen::Index>(k);
      if (input_ == TextInput::kObjectAttribute) attr_.grad.row(cache.pairs[k].attr) += din.row(row).head(c);
      obj_.grad.row(cache.pairs[k].obj) += din.row(row).tail(c);
    }
  }

  void backward_tables(const SemanticTables<T>& grads) {
    attr_.grad += grads.attributes;
    obj_.grad += grads.objects;
  }

 private:
  void check(data::Pair p) const {
    if (p.attr < 0 || p.attr >= num_attributes())
      throw std::out_of_range("attribute index " + std::to_string(p.attr) + " out of range");
    if (p.obj < 0 || p.obj >= num_objects())
      throw std::out_of_range("object index " + std::to_string(p.obj) + " out of range");
  }

  TextInput input_ = TextInput::kObjectAttribute;
  Param<T> attr_;
  Param<T> obj_;
  nn::Mlp<T> proj_;
};

template <typename T>
Vec<T> encode_pair(int attr_index, int obj_index, const TextEncoder<T>& enc) {
  return enc.encode_pair({attr_index, obj_index});
}

template <typename T>
SemanticTables<T> encode_all_primitives(const data::Vocabulary& vocab, const TextEncoder<T>& enc) {
  vocab.validate();
  if (vocab.num_attributes() != enc.num_attributes() || vocab.num_objects() != enc.num_objects())
    throw ValidationError("vocabulary does not match text encoder tables");
  return enc.encode_all_primitives();
}

}  // namespace locl
