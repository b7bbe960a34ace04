#pragma once

// Minimal layers with explicit forward/backward. Activations are stored
// row-major as (spatial positions × channels).

#include <algorithm>
#include <cstring>
#include <string>
#include <vector>

#include "locl/core.hpp"

namespace locl::nn {

/// "Same"-style padding: output side equals input side / stride whenever the
/// kernel is at least the stride.
inline int same_padding(int kernel, int stride) { return std::max(0, (kernel - stride + 1) / 2); }

inline int conv_out_size(int in, int kernel, int stride, int pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

template <typename T>
struct ConvCache {
  int in_h = 0, in_w = 0, out_h = 0, out_w = 0;
  Mat<T> cols;
};

/// 2-D convolution via im2col. Weight is (k*k*cin) × cout.
template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::string name, ParamGroup group, int cin, int cout, int kernel, int stride)
      : cin_(cin), cout_(cout), kernel_(kernel), stride_(stride), pad_(same_padding(kernel, stride)),
        weight_(name + ".weight", group, static_cast<Eigen::Index>(kernel) * kernel * cin, cout),
        bias_(name + ".bias", group, 1, cout) {}

  int in_channels() const { return cin_; }
  int out_channels() const { return cout_; }
  int kernel() const { return kernel_; }
  int stride() const { return stride_; }
  int padding() const { return pad_; }

  Param<T>& weight() { return weight_; }
  Param<T>& bias() { return bias_; }
  const Param<T>& weight() const { return weight_; }
  const Param<T>& bias() const { return bias_; }

  void visit(const ParamVisitor<T>& f) {
    f(weight_);
    f(bias_);
  }

  void init(std::mt19937_64& rng, double gain = 1.0) {
    init_he(weight_, rng, gain);
    bias_.value.setZero();
  }

  Mat<T> forward(const Mat<T>& input, int h, int w, ConvCache<T>* cache) const {
    const int oh = conv_out_size(h, kernel_, stride_, pad_);
    const int ow = conv_out_size(w, kernel_, stride_, pad_);
    Mat<T> cols = im2col(input, h, w, oh, ow);
    Mat<T> out = cols * weight_.value;
    out.rowwise() += bias_.value.row(0);
    if (cache != nullptr) {
      cache->in_h = h;
      cache->in_w = w;
      cache->out_h = oh;
      cache->out_w = ow;
      cache->cols = std::move(cols);
    }
    return out;
  }

  /// Accumulates parameter gradients; returns dL/dinput unless need_input_grad is false.
  Mat<T> backward(const Mat<T>& grad_out, const ConvCache<T>& cache, bool need_input_grad) {
    weight_.grad.noalias() += cache.cols.transpose() * grad_out;
    bias_.grad.row(0) += grad_out.colwise().sum();
    if (!need_input_grad) return {};
    Mat<T> dcols = grad_out * weight_.value.transpose();
    return col2im(dcols, cache.in_h, cache.in_w, cache.out_h, cache.out_w);
  }

 private:
  Mat<T> im2col(const Mat<T>& input, int h, int w, int oh, int ow) const {
    const int k = kernel_;
    Mat<T> cols = Mat<T>::Zero(static_cast<Eigen::Index>(oh) * ow, static_cast<Eigen::Index>(k) * k * cin_);
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        T* dst = cols.row(static_cast<Eigen::Index>(oy) * ow + ox).data();
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * stride_ - pad_ + ky;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox * stride_ - pad_ + kx;
            if (ix < 0 || ix >= w) continue;
            std::memcpy(dst + (ky * k + kx) * cin_, input.row(static_cast<Eigen::Index>(iy) * w + ix).data(),
                        sizeof(T) * static_cast<std::size_t>(cin_));
          }
        }
      }
    }
    return cols;
  }

  Mat<T> col2im(const Mat<T>& dcols, int h, int w, int oh, int ow) const {
    const int k = kernel_;
    Mat<T> dinput = Mat<T>::Zero(static_cast<Eigen::Index>(h) * w, cin_);
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        const T* src = dcols.row(static_cast<Eigen::Index>(oy) * ow + ox).data();
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * stride_ - pad_ + ky;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox * stride_ - pad_ + kx;
            if (ix < 0 || ix >= w) continue;
            T* dst = dinput.row(static_cast<Eigen::Index>(iy) * w + ix).data();
            const T* s = src + (ky * k + kx) * cin_;
            for (int c = 0; c < cin_; ++c) dst[c] += s[c];
          }
        }
      }
    }
    return dinput;
  }

  int cin_ = 0, cout_ = 0, kernel_ = 1, stride_ = 1, pad_ = 0;
  Param<T> weight_;
  Param<T> bias_;
};

/// Fully connected layer acting on the rows of its input. Weight is in × out.
template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(std::string name, ParamGroup group, int in, int out)
      : weight_(name + ".weight", group, in, out), bias_(name + ".bias", group, 1, out) {}

  int in_features() const { return static_cast<int>(weight_.value.rows()); }
  int out_features() const { return static_cast<int>(weight_.value.cols()); }
  Param<T>& weight() { return weight_; }
  Param<T>& bias() { return bias_; }
  const Param<T>& weight() const { return weight_; }
  const Param<T>& bias() const { return bias_; }

  void visit(const ParamVisitor<T>& f) {
    f(weight_);
    f(bias_);
  }
  void init(std::mt19937_64& rng, double gain = 1.0) {
    init_he(weight_, rng, gain);
    bias_.value.setZero();
  }

  Mat<T> forward(const Mat<T>& x) const {
    Mat<T> y = x * weight_.value;
    y.rowwise() += bias_.value.row(0);
    return y;
  }

  Mat<T> backward(const Mat<T>& x, const Mat<T>& grad_out) {
    weight_.grad.noalias() += x.transpose() * grad_out;
    bias_.grad.row(0) += grad_out.colwise().sum();
    return grad_out * weight_.value.transpose();
  }

 private:
  Param<T> weight_;
  Param<T> bias_;
};

template <typename T>
void relu_inplace(Mat<T>& x) {
  x = x.cwiseMax(T(0));
}

/// Zeroes gradient entries where the forward activation was clipped.
template <typename T>
void relu_backward_inplace(Mat<T>& grad, const Mat<T>& activated) {
  grad = (activated.array() > T(0)).select(grad, T(0));
}

template <typename T>
struct MlpCache {
  Mat<T> input;
  Mat<T> hidden;
};

/// Two fully connected layers with a ReLU in between.
template <typename T>
class Mlp {
 public:
  Mlp() = default;
  Mlp(const std::string& name, ParamGroup group, int in, int hidden, int out)
      : fc1_(name + ".fc1", group, in, hidden), fc2_(name + ".fc2", group, hidden, out) {}

  int in_features() const { return fc1_.in_features(); }
  int out_features() const { return fc2_.out_features(); }

  void visit(const ParamVisitor<T>& f) {
    fc1_.visit(f);
    fc2_.visit(f);
  }
  void init(std::mt19937_64& rng) {
    fc1_.init(rng);
    fc2_.init(rng, 0.5);
  }

  Mat<T> forward(const Mat<T>& x, MlpCache<T>* cache) const {
    Mat<T> h = fc1_.forward(x);
    relu_inplace(h);
    Mat<T> y = fc2_.forward(h);
    if (cache != nullptr) {
      cache->input = x;
      cache->hidden = std::move(h);
    }
    return y;
  }

  Mat<T> backward(const Mat<T>& grad_out, const MlpCache<T>& cache) {
    Mat<T> dh = fc2_.backward(cache.hidden, grad_out);
    relu_backward_inplace(dh, cache.hidden);
    return fc1_.backward(cache.input, dh);
  }

  Linear<T>& fc1() { return fc1_; }
  Linear<T>& fc2() { return fc2_; }

 private:
  Linear<T> fc1_;
  Linear<T> fc2_;
};

}  // namespace locl::nn
