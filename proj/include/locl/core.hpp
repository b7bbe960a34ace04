#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace locl {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

/// Input failed a structural or semantic check (bad config, bad manifest, ...).
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A pipeline stage was asked to run before the stage it depends on.
class MissingArtifactError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& stage, int epoch, int batch)
      : std::runtime_error(stage + ": non-finite loss at epoch " + std::to_string(epoch) +
                           ", batch " + std::to_string(batch)),
        epoch_(epoch),
        batch_(batch) {}
  int epoch() const { return epoch_; }
  int batch() const { return batch_; }

 private:
  int epoch_;
  int batch_;
};

/// Parameter groups; each group gets its own learning rate from the schedule.
enum class ParamGroup { kImageEncoder, kTextEmbedding, kTextProjection, kRpn, kClassifier };

inline const char* group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::kImageEncoder: return "image_encoder";
    case ParamGroup::kTextEmbedding: return "text_embedding";
    case ParamGroup::kTextProjection: return "text_projection";
    case ParamGroup::kRpn: return "rpn";
    case ParamGroup::kClassifier: return "classifier";
  }
  return "unknown";
}

/// A learnable tensor with its gradient accumulator and Adam moments.
template <typename T>
struct Param {
  std::string name;
  ParamGroup group = ParamGroup::kClassifier;
  Mat<T> value;
  Mat<T> grad;
  Mat<T> m;
  Mat<T> v;

  Param() = default;
  Param(std::string n, ParamGroup g, Eigen::Index rows, Eigen::Index cols)
      : name(std::move(n)), group(g) {
    resize(rows, cols);
  }

  void resize(Eigen::Index rows, Eigen::Index cols) {
    value = Mat<T>::Zero(rows, cols);
    grad = Mat<T>::Zero(rows, cols);
    m = Mat<T>::Zero(rows, cols);
    v = Mat<T>::Zero(rows, cols);
  }
  void zero_grad() { grad.setZero(); }
  Eigen::Index size() const { return value.size(); }
};

template <typename T>
using ParamVisitor = std::function<void(Param<T>&)>;

/// He-normal initialisation for a fan_in × fan_out weight.
template <typename T>
void init_he(Param<T>& p, std::mt19937_64& rng, double gain = 1.0) {
  const double fan_in = static_cast<double>(p.value.rows());
  std::normal_distribution<double> dist(0.0, gain * std::sqrt(2.0 / fan_in));
  for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<T>(dist(rng));
}

template <typename T>
void init_normal(Param<T>& p, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<T>(dist(rng));
}

/// Adam with per-group learning rates. A group whose rate is zero is frozen
/// (its moments are not touched either).
template <typename T>
class Adam {
 public:
  explicit Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<Param<T>*>& params, const std::function<double(ParamGroup)>& lr_of,
            double grad_scale = 1.0) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (Param<T>* p : params) {
      const double lr = lr_of(p->group);
      if (lr <= 0.0) continue;
      T* val = p->value.data();
      T* g = p->grad.data();
      T* m = p->m.data();
      T* v = p->v.data();
      for (Eigen::Index i = 0; i < p->size(); ++i) {
        const double gi = static_cast<double>(g[i]) * grad_scale;
        const double mi = beta1_ * m[i] + (1.0 - beta1_) * gi;
        const double vi = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        val[i] -= static_cast<T>(lr * (mi / c1) / (std::sqrt(vi / c2) + eps_));
      }
    }
  }

  std::int64_t steps() const { return t_; }

 private:
  double beta1_;
  double beta2_;
  double eps_;
  std::int64_t t_ = 0;
};

template <typename T>
T sigmoid(T x) {
  if (x >= T(0)) {
    const T e = std::exp(-x);
    return T(1) / (T(1) + e);
  }
  const T e = std::exp(x);
  return e / (T(1) + e);
}

/// Numerically stable softmax of a vector.
template <typename T>
Vec<T> softmax(const Vec<T>& logits) {
  if (logits.size() == 0) return logits;
  const T mx = logits.maxCoeff();
  Vec<T> e = (logits.array() - mx).exp().matrix();
  return e / e.sum();
}

/// Backward of softmax: given p = softmax(z) and dL/dp, returns dL/dz.
template <typename T>
Vec<T> softmax_backward(const Vec<T>& p, const Vec<T>& dp) {
  const T dot = p.dot(dp);
  return (p.array() * (dp.array() - dot)).matrix();
}

/// 64-bit FNV-1a, used for config and artifact hashes (stable across runs).
inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[h & 0xF];
    h >>= 4;
  }
  return out;
}

/// Derives an independent stream seed from a parent seed and a tag.
inline std::uint64_t derive_seed(std::uint64_t parent, const std::string& tag) {
  return fnv1a(std::to_string(parent) + "/" + tag);
}

}  // namespace locl
