// SPDX-License-Identifier: Apache-2.0
//
// Dense building blocks with hand-written backward passes. Every operation
// works on a batch: one sample per matrix row.

#pragma once

#include <Eigen/Dense>

#include <bit>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "utal/numerics.hpp"

namespace utal {

template <typename Real>
using Matrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Real>
using Vector = Eigen::Matrix<Real, Eigen::Dynamic, 1>;

/// Thrown when a gradient or loss stops being finite during training.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require_shape(bool ok, const char* what) {
  if (!ok) throw std::logic_error(std::string("dimension mismatch: ") + what);
}

template <std::floating_point Real>
struct DenseGrads {
  Matrix<Real> weights;
  Vector<Real> biases;

  DenseGrads() = default;
  DenseGrads(Eigen::Index out, Eigen::Index in)
      : weights(Matrix<Real>::Zero(out, in)), biases(Vector<Real>::Zero(out)) {}

  void zero() {
    weights.setZero();
    biases.setZero();
  }
};

/// y = W x + b, weights stored [out x in].
template <std::floating_point Real>
class DenseLayer {
 public:
  Matrix<Real> weights;
  Vector<Real> biases;

  DenseLayer() = default;
  DenseLayer(Eigen::Index in, Eigen::Index out)
      : weights(Matrix<Real>::Zero(out, in)), biases(Vector<Real>::Zero(out)) {}

  /// Uniform in +-sqrt(6 / (in + out)); biases zero.
  static DenseLayer glorot(Eigen::Index in, Eigen::Index out, Rng& rng) {
    DenseLayer layer(in, out);
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    for (Eigen::Index r = 0; r < out; ++r)
      for (Eigen::Index c = 0; c < in; ++c)
        layer.weights(r, c) = static_cast<Real>(rng.uniform(-limit, limit));
    return layer;
  }

  Eigen::Index in_size() const { return weights.cols(); }
  Eigen::Index out_size() const { return weights.rows(); }

  /// Stateless forward; safe for concurrent readers.
  Matrix<Real> infer(const Matrix<Real>& x) const {
    require_shape(x.cols() == in_size(), "dense input width");
    Matrix<Real> y = x * weights.transpose();
    y.rowwise() += biases.transpose();
    return y;
  }

  /// Training forward; keeps the input for backward().
  Matrix<Real> forward(const Matrix<Real>& x) {
    input_ = x;
    return infer(x);
  }

  /// Accumulates dW += dY^T X and db += colsum(dY); returns dX = dY W.
  Matrix<Real> backward(const Matrix<Real>& dy, DenseGrads<Real>& grads) const {
    accumulate(dy, grads);
    return dy * weights;
  }

  /// backward() without the input gradient, for a first layer.
  void accumulate(const Matrix<Real>& dy, DenseGrads<Real>& grads) const {
    require_shape(dy.rows() == input_.rows() && dy.cols() == out_size(),
                  "dense upstream gradient");
    require_shape(grads.weights.rows() == weights.rows() &&
                      grads.weights.cols() == weights.cols(),
                  "dense gradient accumulator");
    grads.weights.noalias() += dy.transpose() * input_;
    grads.biases += dy.colwise().sum().transpose();
  }

  const Matrix<Real>& cached_input() const { return input_; }

 private:
  Matrix<Real> input_;
};

template <std::floating_point Real>
Matrix<Real> relu(const Matrix<Real>& x) {
  return x.cwiseMax(Real(0));
}

/// Gates dy by x > 0; the subgradient at 0 is 0.
template <std::floating_point Real>
Matrix<Real> relu_backward(const Matrix<Real>& x, const Matrix<Real>& dy) {
  require_shape(x.rows() == dy.rows() && x.cols() == dy.cols(), "relu gradient");
  return (x.array() > Real(0)).select(dy, Real(0));
}

inline constexpr double kNormFloor = 1e-12;

/// Row-wise y = x / max(||x||, 1e-12).
template <std::floating_point Real>
Matrix<Real> l2_normalize(const Matrix<Real>& x) {
  Matrix<Real> y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Real n = std::max<Real>(x.row(r).norm(), Real(kNormFloor));
    y.row(r) = x.row(r) / n;
  }
  return y;
}

/// dx = (I - y y^T) dy / ||x|| above the floor, dy / floor below it.
template <std::floating_point Real>
Matrix<Real> l2_normalize_backward(const Matrix<Real>& x, const Matrix<Real>& dy) {
  require_shape(x.rows() == dy.rows() && x.cols() == dy.cols(), "l2 gradient");
  Matrix<Real> dx(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Real n = x.row(r).norm();
    if (n > Real(kNormFloor)) {
      const auto y = x.row(r) / n;
      dx.row(r) = (dy.row(r) - y * y.dot(dy.row(r))) / n;
    } else {
      dx.row(r) = dy.row(r) / Real(kNormFloor);
    }
  }
  return dx;
}

/// Max-subtracted softmax of one logit vector.
template <std::floating_point Real>
std::vector<Real> softmax(std::span<const Real> z) {
  std::vector<Real> p(z.size());
  if (z.empty()) return p;
  Real zmax = z[0];
  for (Real v : z) zmax = std::max(zmax, v);
  Real sum = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    p[i] = std::exp(z[i] - zmax);
    sum += p[i];
  }
  for (Real& v : p) v /= sum;
  return p;
}

template <std::floating_point Real>
Real sigmoid(Real x) {
  if (x >= 0) return Real(1) / (Real(1) + std::exp(-x));
  const Real e = std::exp(x);
  return e / (Real(1) + e);
}

/// Heavy-ball SGD: v <- momentum v + g; w <- w - lr v. A nonzero
/// weight_decay adds weight_decay * w to the weight gradient (not biases).
template <std::floating_point Real>
class SgdMomentum {
 public:
  SgdMomentum(double lr, double momentum, double weight_decay = 0.0)
      : lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {
    if (!(lr >= 0.0)) throw std::invalid_argument("sgd: lr must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0))
      throw std::invalid_argument("sgd: momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) throw std::invalid_argument("sgd: weight_decay must be >= 0");
  }

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

  /// names[i] labels layers[i] in diagnostics.
  void step(std::span<DenseLayer<Real>> layers, std::span<const DenseGrads<Real>> grads,
            std::span<const std::string> names) {
    require_shape(layers.size() == grads.size(), "sgd parameter/gradient count");
    if (velocity_.empty()) {
      for (const auto& l : layers) velocity_.emplace_back(l.out_size(), l.in_size());
    }
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& g = grads[i];
      const std::string name = i < names.size() ? names[i] : "layer" + std::to_string(i);
      if (!g.weights.allFinite()) throw NumericError("non-finite gradient in " + name + ".weights");
      if (!g.biases.allFinite()) throw NumericError("non-finite gradient in " + name + ".biases");
      auto& v = velocity_[i];
      const Real m = static_cast<Real>(momentum_);
      const Real lr = static_cast<Real>(lr_);
      if (weight_decay_ > 0.0)
        v.weights = m * v.weights + g.weights + static_cast<Real>(weight_decay_) * layers[i].weights;
      else
        v.weights = m * v.weights + g.weights;
      v.biases = m * v.biases + g.biases;
      layers[i].weights -= lr * v.weights;
      layers[i].biases -= lr * v.biases;
    }
  }

 private:
  double lr_;
  double momentum_;
  double weight_decay_;
  std::vector<DenseGrads<Real>> velocity_;
};

// --- checkpoint payload ---------------------------------------------------
//
// "UTAL1", u32 layer count, then per layer: u32 out, u32 in, out*in weights
// (row-major) and out biases, all little-endian IEEE float32.

inline constexpr char kCheckpointMagic[5] = {'U', 'T', 'A', 'L', '1'};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                     static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b, 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("checkpoint truncated");
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
         (std::uint32_t(b[3]) << 24);
}

inline void put_f32(std::ostream& os, float f) { put_u32(os, std::bit_cast<std::uint32_t>(f)); }
inline float get_f32(std::istream& is) { return std::bit_cast<float>(get_u32(is)); }

}  // namespace detail

template <std::floating_point Real>
void write_layers(std::ostream& os, std::span<const DenseLayer<Real>> layers) {
  os.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_u32(os, static_cast<std::uint32_t>(layers.size()));
  for (const auto& l : layers) {
    detail::put_u32(os, static_cast<std::uint32_t>(l.out_size()));
    detail::put_u32(os, static_cast<std::uint32_t>(l.in_size()));
    for (Eigen::Index r = 0; r < l.weights.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weights.cols(); ++c)
        detail::put_f32(os, static_cast<float>(l.weights(r, c)));
    for (Eigen::Index r = 0; r < l.biases.size(); ++r)
      detail::put_f32(os, static_cast<float>(l.biases(r)));
  }
}

template <std::floating_point Real>
std::vector<DenseLayer<Real>> read_layers(std::istream& is) {
  char magic[sizeof kCheckpointMagic];
  if (!is.read(magic, sizeof magic) ||
      !std::equal(std::begin(magic), std::end(magic), std::begin(kCheckpointMagic)))
    throw std::runtime_error("not a UTAL1 checkpoint");
  const std::uint32_t count = detail::get_u32(is);
  std::vector<DenseLayer<Real>> layers;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t out = detail::get_u32(is);
    const std::uint32_t in = detail::get_u32(is);
    DenseLayer<Real> l(in, out);
    for (std::uint32_t r = 0; r < out; ++r)
      for (std::uint32_t c = 0; c < in; ++c) l.weights(r, c) = detail::get_f32(is);
    for (std::uint32_t r = 0; r < out; ++r) l.biases(r) = detail::get_f32(is);
    layers.push_back(std::move(l));
  }
  return layers;
}

}  // namespace utal
