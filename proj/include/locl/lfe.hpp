#pragma once

// Localized feature extraction: anchors, bilinear region pooling, the
// region-proposal head and top-r proposal selection.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "locl/core.hpp"
#include "locl/encoders.hpp"
#include "locl/nn.hpp"

namespace locl {

struct AnchorConfig {
  /// Anchor side lengths as multiples of the feature stride.
  std::vector<double> scales = {1.5, 3.0, 5.0};
  /// Height / width ratios.
  std::vector<double> ratios = {0.5, 1.0, 2.0};

  int per_cell() const { return static_cast<int>(scales.size() * ratios.size()); }
};

/// Anchor boxes (x_min, y_min, x_max, y_max), one row per anchor, ordered by
/// cell row, cell column, scale, ratio. Boxes are clipped to the image, so the
/// count is exactly (H/s)·(W/s)·|scales|·|ratios|.
template <typename T>
Mat<T> generate_anchors(int image_height, int image_width, int stride, const std::vector<double>& scales,
                        const std::vector<double>& ratios) {
  if (stride <= 0 || image_height % stride != 0 || image_width % stride != 0) {
    throw std::invalid_argument("stride " + std::to_string(stride) + " does not divide image size " +
                                std::to_string(image_height) + "x" + std::to_string(image_width));
  }
  if (scales.empty() || ratios.empty()) throw std::invalid_argument("anchor scales and ratios must be non-empty");
  const int gh = image_height / stride, gw = image_width / stride;
  const Eigen::Index n = static_cast<Eigen::Index>(gh) * gw * static_cast<Eigen::Index>(scales.size() * ratios.size());
  Mat<T> boxes(n, 4);
  Eigen::Index k = 0;
  for (int cy = 0; cy < gh; ++cy) {
    for (int cx = 0; cx < gw; ++cx) {
      const double ccx = (cx + 0.5) * stride, ccy = (cy + 0.5) * stride;
      for (double scale : scales) {
        for (double ratio : ratios) {
          if (scale <= 0 || ratio <= 0) throw std::invalid_argument("anchor scales and ratios must be positive");
          const double side = scale * stride;
          const double w = side / std::sqrt(ratio), h = side * std::sqrt(ratio);
          boxes(k, 0) = static_cast<T>(std::clamp(ccx - w / 2, 0.0, static_cast<double>(image_width)));
          boxes(k, 1) = static_cast<T>(std::clamp(ccy - h / 2, 0.0, static_cast<double>(image_height)));
          boxes(k, 2) = static_cast<T>(std::clamp(ccx + w / 2, 0.0, static_cast<double>(image_width)));
          boxes(k, 3) = static_cast<T>(std::clamp(ccy + h / 2, 0.0, static_cast<double>(image_height)));
          ++k;
        }
      }
    }
  }
  return boxes;
}

template <typename T>
Mat<T> generate_anchors(int image_size, int stride, const AnchorConfig& cfg) {
  return generate_anchors<T>(image_size, image_size, stride, cfg.scales, cfg.ratios);
}

namespace detail {

/// One bilinear sample point and how it moves with the box edges.
template <typename T>
struct SamplePoint {
  T x, y;
  T dx_dx0, dx_dx1, dy_dy0, dy_dy1;
};

constexpr int kPoolGrid = 3;

template <typename T>
int box_samples(const T* box, SamplePoint<T>* out) {
  const T x0 = box[0], y0 = box[1], x1 = box[2], y1 = box[3];
  if (!(x1 > x0) || !(y1 > y0)) {
    out[0] = {(x0 + x1) / 2, (y0 + y1) / 2, T(0.5), T(0.5), T(0.5), T(0.5)};
    return 1;
  }
  int n = 0;
  for (int iy = 0; iy < kPoolGrid; ++iy) {
    const T fy = (T(iy) + T(0.5)) / T(kPoolGrid);
    for (int ix = 0; ix < kPoolGrid; ++ix) {
      const T fx = (T(ix) + T(0.5)) / T(kPoolGrid);
      out[n++] = {x0 + fx * (x1 - x0), y0 + fy * (y1 - y0), T(1) - fx, fx, T(1) - fy, fy};
    }
  }
  return n;
}

/// Feature-map coordinate of an image coordinate: cell centres sit at integers.
template <typename T>
struct GridCoord {
  int i0, i1;
  T frac;
  T scale;  // d(coord)/d(pixel), zero when clamped
};

template <typename T>
GridCoord<T> grid_coord(T pixel, int stride, int extent) {
  T u = pixel / T(stride) - T(0.5);
  T scale = T(1) / T(stride);
  if (u <= T(0)) {
    u = T(0);
    scale = T(0);
  } else if (u >= T(extent - 1)) {
    u = T(extent - 1);
    scale = T(0);
  }
  const int i0 = std::min(static_cast<int>(std::floor(u)), extent - 1);
  const int i1 = std::min(i0 + 1, extent - 1);
  return {i0, i1, u - T(i0), scale};
}

}  // namespace detail

/// Averages a 3×3 grid of bilinear samples inside each box (a single centre
/// sample for zero-area boxes). Returns k × C.
template <typename T>
Mat<T> pool_region_features(const FeatureMap<T>& fmap, const Mat<T>& boxes) {
  if (boxes.cols() != 4) throw std::invalid_argument("boxes must be k x 4");
  Mat<T> out = Mat<T>::Zero(boxes.rows(), fmap.channels);
  detail::SamplePoint<T> pts[detail::kPoolGrid * detail::kPoolGrid];
  for (Eigen::Index b = 0; b < boxes.rows(); ++b) {
    const int n = detail::box_samples(boxes.row(b).data(), pts);
    auto acc = out.row(b);
    for (int s = 0; s < n; ++s) {
      const auto gx = detail::grid_coord(pts[s].x, fmap.stride, fmap.width);
      const auto gy = detail::grid_coord(pts[s].y, fmap.stride, fmap.height);
      const T w00 = (T(1) - gx.frac) * (T(1) - gy.frac), w01 = gx.frac * (T(1) - gy.frac);
      const T w10 = (T(1) - gx.frac) * gy.frac, w11 = gx.frac * gy.frac;
      acc += (w00 * fmap.cell(gy.i0, gx.i0) + w01 * fmap.cell(gy.i0, gx.i1) + w10 * fmap.cell(gy.i1, gx.i0) +
              w11 * fmap.cell(gy.i1, gx.i1)) /
             T(n);
    }
  }
  return out;
}

/// Backward of pool_region_features. Accumulates into grad_fmap (cells × C)
/// and, when non-null, grad_boxes (k × 4).
template <typename T>
void pool_region_backward(const FeatureMap<T>& fmap, const Mat<T>& boxes, const Mat<T>& grad_pooled,
                          Mat<T>& grad_fmap, Mat<T>* grad_boxes) {
  detail::SamplePoint<T> pts[detail::kPoolGrid * detail::kPoolGrid];
  if (grad_boxes) *grad_boxes = Mat<T>::Zero(boxes.rows(), 4);
  const int w = fmap.width;
  for (Eigen::Index b = 0; b < boxes.rows(); ++b) {
    const int n = detail::box_samples(boxes.row(b).data(), pts);
    const auto g = grad_pooled.row(b);
    for (int s = 0; s < n; ++s) {
      const auto gx = detail::grid_coord(pts[s].x, fmap.stride, fmap.width);
      const auto gy = detail::grid_coord(pts[s].y, fmap.stride, fmap.height);
      const T inv = T(1) / T(n);
      const T w00 = (T(1) - gx.frac) * (T(1) - gy.frac), w01 = gx.frac * (T(1) - gy.frac);
      const T w10 = (T(1) - gx.frac) * gy.frac, w11 = gx.frac * gy.frac;
      grad_fmap.row(static_cast<Eigen::Index>(gy.i0) * w + gx.i0) += w00 * inv * g;
      grad_fmap.row(static_cast<Eigen::Index>(gy.i0) * w + gx.i1) += w01 * inv * g;
      grad_fmap.row(static_cast<Eigen::Index>(gy.i1) * w + gx.i0) += w10 * inv * g;
      grad_fmap.row(static_cast<Eigen::Index>(gy.i1) * w + gx.i1) += w11 * inv * g;
      if (grad_boxes) {
        const auto f00 = fmap.cell(gy.i0, gx.i0), f01 = fmap.cell(gy.i0, gx.i1);
        const auto f10 = fmap.cell(gy.i1, gx.i0), f11 = fmap.cell(gy.i1, gx.i1);
        const T dval_du = g.dot((T(1) - gy.frac) * (f01 - f00) + gy.frac * (f11 - f10)) * inv;
        const T dval_dv = g.dot((T(1) - gx.frac) * (f10 - f00) + gx.frac * (f11 - f01)) * inv;
        const T dsx = dval_du * gx.scale, dsy = dval_dv * gy.scale;
        (*grad_boxes)(b, 0) += dsx * pts[s].dx_dx0;
        (*grad_boxes)(b, 2) += dsx * pts[s].dx_dx1;
        (*grad_boxes)(b, 1) += dsy * pts[s].dy_dy0;
        (*grad_boxes)(b, 3) += dsy * pts[s].dy_dy1;
      }
    }
  }
}

/// Mean over all cells: the whole-image feature.
template <typename T>
RowVec<T> global_average_pool(const FeatureMap<T>& fmap) {
  return fmap.data.colwise().mean();
}

// ---------------------------------------------------------------------------
// Box deltas (centre offset scaled by anchor size, log width/height).

// Raw deltas are squashed as b·tanh(d/b), so a proposal stays a refinement of
// its anchor and cannot degenerate to a point.
struct DeltaBounds {
  double shift = 0.25;      // centre offset, in anchor widths/heights
  double log_scale = 0.25;  // |log(side / anchor side)|

  void validate() const {
    if (!(shift > 0) || !(log_scale > 0)) throw ValidationError("delta bounds must be positive");
  }
};

template <typename T>
T bound_delta(T d, double b) {
  return T(b) * std::tanh(d / T(b));
}

template <typename T>
T bound_delta_grad(T d, double b) {
  const T t = std::tanh(d / T(b));
  return T(1) - t * t;
}

template <typename T>
Mat<T> decode_boxes(const Mat<T>& anchors, const Mat<T>& deltas, int image_height, int image_width,
                    const DeltaBounds& b = {}) {
  Mat<T> out(anchors.rows(), 4);
  for (Eigen::Index k = 0; k < anchors.rows(); ++k) {
    const T aw = anchors(k, 2) - anchors(k, 0), ah = anchors(k, 3) - anchors(k, 1);
    const T acx = anchors(k, 0) + aw / 2, acy = anchors(k, 1) + ah / 2;
    const T cx = acx + bound_delta(deltas(k, 0), b.shift) * aw;
    const T cy = acy + bound_delta(deltas(k, 1), b.shift) * ah;
    const T w = aw * std::exp(bound_delta(deltas(k, 2), b.log_scale));
    const T h = ah * std::exp(bound_delta(deltas(k, 3), b.log_scale));
    out(k, 0) = std::clamp(cx - w / 2, T(0), T(image_width));
    out(k, 1) = std::clamp(cy - h / 2, T(0), T(image_height));
    out(k, 2) = std::clamp(cx + w / 2, T(0), T(image_width));
    out(k, 3) = std::clamp(cy + h / 2, T(0), T(image_height));
  }
  return out;
}

/// dL/d(deltas) from dL/d(boxes). Clipped coordinates pass no gradient.
template <typename T>
Mat<T> decode_boxes_backward(const Mat<T>& anchors, const Mat<T>& deltas, int image_height, int image_width,
                             const Mat<T>& grad_boxes, const DeltaBounds& b = {}) {
  Mat<T> g = Mat<T>::Zero(anchors.rows(), 4);
  for (Eigen::Index k = 0; k < anchors.rows(); ++k) {
    const T aw = anchors(k, 2) - anchors(k, 0), ah = anchors(k, 3) - anchors(k, 1);
    const T acx = anchors(k, 0) + aw / 2, acy = anchors(k, 1) + ah / 2;
    const T cx = acx + bound_delta(deltas(k, 0), b.shift) * aw;
    const T cy = acy + bound_delta(deltas(k, 1), b.shift) * ah;
    const T w = aw * std::exp(bound_delta(deltas(k, 2), b.log_scale));
    const T h = ah * std::exp(bound_delta(deltas(k, 3), b.log_scale));
    auto live = [](T v, int hi) { return v > T(0) && v < T(hi); };
    const T gx0 = live(cx - w / 2, image_width) ? grad_boxes(k, 0) : T(0);
    const T gx1 = live(cx + w / 2, image_width) ? grad_boxes(k, 2) : T(0);
    const T gy0 = live(cy - h / 2, image_height) ? grad_boxes(k, 1) : T(0);
    const T gy1 = live(cy + h / 2, image_height) ? grad_boxes(k, 3) : T(0);
    g(k, 0) = (gx0 + gx1) * aw * bound_delta_grad(deltas(k, 0), b.shift);
    g(k, 1) = (gy0 + gy1) * ah * bound_delta_grad(deltas(k, 1), b.shift);
    g(k, 2) = (gx1 - gx0) * w / 2 * bound_delta_grad(deltas(k, 2), b.log_scale);
    g(k, 3) = (gy1 - gy0) * h / 2 * bound_delta_grad(deltas(k, 3), b.log_scale);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Region proposal head.

template <typename T>
struct ProposalSet {
  Mat<T> boxes;       // n × 4
  Vec<T> logits;      // n
  Vec<T> objectness;  // n, sigmoid(logits)
  Mat<T> deltas;      // n × 4
  Mat<T> features;    // n × C (empty when not pooled)
};

template <typename T>
struct RpnCache {
  nn::ConvCache<T> conv;
  Mat<T> hidden;
  nn::ConvCache<T> out;
};

/// 3×3 conv + ReLU, then a 1×1 conv emitting, for each of the A anchors per
/// cell, one objectness logit and four box deltas.
template <typename T>
class RpnHead {
 public:
  RpnHead() = default;
  RpnHead(int channels, int hidden, int anchors_per_cell, DeltaBounds bounds = {})
      : anchors_per_cell_(anchors_per_cell),
        bounds_(bounds),
        conv_("rpn.conv", ParamGroup::kRpn, channels, hidden, 3, 1),
        out_("rpn.out", ParamGroup::kRpn, hidden, anchors_per_cell * 5, 1, 1) {}

  int anchors_per_cell() const { return anchors_per_cell_; }
  const DeltaBounds& bounds() const { return bounds_; }

  void init(std::mt19937_64& rng, double delta_std = 0.01) {
    conv_.init(rng);
    init_normal(out_.weight(), rng, 0.01);
    out_.bias().value.setZero();
    for (int a = 0; a < anchors_per_cell_; ++a) {
      for (int d = 1; d < 5; ++d) {
        const int col = a * 5 + d;
        if (delta_std == 0.0) {
          out_.weight().value.col(col).setZero();
        } else {
          std::normal_distribution<double> dist(0.0, delta_std);
          for (Eigen::Index r = 0; r < out_.weight().value.rows(); ++r)
            out_.weight().value(r, col) = static_cast<T>(dist(rng));
        }
      }
    }
  }

  /// Zeroes the delta outputs so proposals coincide with anchors.
  void zero_delta_head() {
    for (int a = 0; a < anchors_per_cell_; ++a) {
      for (int d = 1; d < 5; ++d) {
        out_.weight().value.col(a * 5 + d).setZero();
        out_.bias().value(0, a * 5 + d) = T(0);
      }
    }
  }

  void visit(const ParamVisitor<T>& f) {
    conv_.visit(f);
    out_.visit(f);
  }

  /// Raw head output, cells × (A·5).
  Mat<T> forward(const FeatureMap<T>& fmap, RpnCache<T>* cache) const {
    if (fmap.channels != conv_.in_channels()) throw std::invalid_argument("RPN channel mismatch");
    nn::ConvCache<T>* c1 = cache ? &cache->conv : nullptr;
    Mat<T> h = conv_.forward(fmap.data, fmap.height, fmap.width, c1);
    nn::relu_inplace(h);
    Mat<T> out = out_.forward(h, fmap.height, fmap.width, cache ? &cache->out : nullptr);
    if (cache) cache->hidden = std::move(h);
    return out;
  }

  /// Splits head output into per-anchor logits (n) and deltas (n × 4).
  void split(const Mat<T>& raw, Vec<T>& logits, Mat<T>& deltas) const {
    const Eigen::Index n = raw.rows() * anchors_per_cell_;
    logits.resize(n);
    deltas.resize(n, 4);
    for (Eigen::Index cell = 0; cell < raw.rows(); ++cell) {
      for (int a = 0; a < anchors_per_cell_; ++a) {
        const Eigen::Index k = cell * anchors_per_cell_ + a;
        logits(k) = raw(cell, a * 5);
        for (int d = 0; d < 4; ++d) deltas(k, d) = raw(cell, a * 5 + 1 + d);
      }
    }
  }

  /// Backward from per-anchor gradients; returns dL/dF.
  Mat<T> backward(const Vec<T>& grad_logits, const Mat<T>& grad_deltas, const RpnCache<T>& cache) {
    const Eigen::Index cells = cache.hidden.rows();
    Mat<T> graw = Mat<T>::Zero(cells, anchors_per_cell_ * 5);
    for (Eigen::Index cell = 0; cell < cells; ++cell) {
      for (int a = 0; a < anchors_per_cell_; ++a) {
        const Eigen::Index k = cell * anchors_per_cell_ + a;
        if (grad_logits.size() > 0) graw(cell, a * 5) = grad_logits(k);
        if (grad_deltas.size() > 0)
          for (int d = 0; d < 4; ++d) graw(cell, a * 5 + 1 + d) = grad_deltas(k, d);
      }
    }
    Mat<T> gh = out_.backward(graw, cache.out, true);
    nn::relu_backward_inplace(gh, cache.hidden);
    return conv_.backward(gh, cache.conv, true);
  }

 private:
  int anchors_per_cell_ = 9;
  DeltaBounds bounds_;
  nn::Conv2d<T> conv_;
  nn::Conv2d<T> out_;
};

/// Full proposal set: one proposal per anchor, each pooled from F.
template <typename T>
ProposalSet<T> rpn_forward(const FeatureMap<T>& fmap, const Mat<T>& anchors, const RpnHead<T>& head,
                           RpnCache<T>* cache = nullptr) {
  const Eigen::Index expected = static_cast<Eigen::Index>(fmap.height) * fmap.width * head.anchors_per_cell();
  if (anchors.rows() != expected) {
    throw std::invalid_argument("anchor count " + std::to_string(anchors.rows()) + " does not match feature map (" +
                                std::to_string(expected) + ")");
  }
  ProposalSet<T> p;
  head.split(head.forward(fmap, cache), p.logits, p.deltas);
  p.objectness = p.logits.unaryExpr([](T v) { return sigmoid(v); });
  p.boxes = decode_boxes(anchors, p.deltas, fmap.height * fmap.stride, fmap.width * fmap.stride, head.bounds());
  p.features = pool_region_features(fmap, p.boxes);
  return p;
}

/// Indices of the r highest scores, descending; ties keep the lower index first.
template <typename T>
std::vector<int> top_indices(const Vec<T>& scores, int r) {
  if (r < 0 || r > scores.size()) {
    throw std::invalid_argument("cannot select " + std::to_string(r) + " of " + std::to_string(scores.size()) +
                                " entries");
  }
  std::vector<int> idx(static_cast<std::size_t>(scores.size()));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return scores(a) > scores(b); });
  idx.resize(static_cast<std::size_t>(r));
  return idx;
}

template <typename T>
struct TopProposals {
  std::vector<int> indices;  // anchor indices, descending objectness
  Mat<T> features;           // r × C
  Vec<T> scores;             // r
  Mat<T> boxes;              // r × 4
};

template <typename T>
TopProposals<T> extract_top_proposals(const ProposalSet<T>& proposals, int r) {
  const auto n = proposals.objectness.size();
  if (r < 1 || r > n) {
    throw std::invalid_argument("r = " + std::to_string(r) + " must lie in [1, " + std::to_string(n) + "]");
  }
  TopProposals<T> top;
  top.indices = top_indices(proposals.objectness, r);
  top.features.resize(r, proposals.features.cols());
  top.scores.resize(r);
  top.boxes.resize(r, 4);
  for (int i = 0; i < r; ++i) {
    const int k = top.indices[static_cast<std::size_t>(i)];
    if (proposals.features.size() > 0) top.features.row(i) = proposals.features.row(k);
    top.scores(i) = proposals.objectness(k);
    top.boxes.row(i) = proposals.boxes.row(k);
  }
  return top;
}

}  // namespace locl
