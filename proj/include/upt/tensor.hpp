#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <numbers>
#include <cstddef>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "upt/error.hpp"

namespace upt {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

// Dense row-major array of doubles. Matrices are the common case; gains,
// biases and scalars use one-dimensional shapes.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
      : Tensor(Shape{rows, cols}, fill) {}

  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::initializer_list<double> values) {
    return Tensor(Shape{rows, cols}, std::vector<double>(values));
  }
  static Tensor vector(std::initializer_list<double> values) {
    return Tensor(Shape{values.size()}, std::vector<double>(values));
  }
  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }
  static Tensor identity(std::size_t n) {
    Tensor t(n, n);
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Matrix view: a 1-D tensor is treated as a single row.
  std::size_t rows() const { return shape_.size() >= 2 ? shape_[0] : 1; }
  std::size_t cols() const {
    return shape_.empty() ? 0 : (shape_.size() >= 2 ? shape_[1] : shape_[0]);
  }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const double& operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  const double& operator[](std::size_t i) const { return data_[i]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols(), cols()};
  }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  double item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor& operator+=(const Tensor& o) {
    require_same(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Tensor& operator-=(const Tensor& o) {
    require_same(o, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Tensor& operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
  }

  // Adds s * o in place.
  void axpy(double s, const Tensor& o) {
    require_same(o, "axpy");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += s * o.data_[i];
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void require_same(const Tensor& o, const char* op) const {
    if (o.shape_ != shape_) {
      throw ShapeError(std::string("shape mismatch in ") + op + ": " + shape_str(shape_) +
                       " vs " + shape_str(o.shape_));
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

inline Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
inline Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
inline Tensor operator*(double s, Tensor a) { return a *= s; }

inline double sum(const Tensor& t) {
  return std::accumulate(t.data().begin(), t.data().end(), 0.0);
}

inline double dot(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) {
    throw ShapeError("dot of " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff of " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline Tensor transpose(const Tensor& a) {
  Tensor t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("hadamard of " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  return out;
}

// ---------------------------------------------------------------------------
// Matrix products. Gradients of C = A·B are dA = G·Bᵀ and dB = Aᵀ·G.

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul inner dimensions disagree: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  Tensor c(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    double* crow = c.data().data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a(i, p);
      if (av == 0.0) continue;
      const double* brow = b.data().data() + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

// A·Bᵀ without materializing the transpose.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt inner dimensions disagree: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()) + "^T");
  }
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  Tensor c(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    const double* arow = a.data().data() + i * k;
    for (std::size_t j = 0; j < m; ++j) {
      const double* brow = b.data().data() + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c(i, j) = acc;
    }
  }
  return c;
}

// Aᵀ·B without materializing the transpose.
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn inner dimensions disagree: " + shape_str(a.shape()) + "^T x " +
                     shape_str(b.shape()));
  }
  const std::size_t k = a.rows(), n = a.cols(), m = b.cols();
  Tensor c(n, m);
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a.data().data() + p * n;
    const double* brow = b.data().data() + p * m;
    for (std::size_t i = 0; i < n; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c.data().data() + i * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

struct MatmulGrads {
  Tensor da;
  Tensor db;
};

inline MatmulGrads matmul_backward(const Tensor& grad_out, const Tensor& a, const Tensor& b) {
  return {matmul_nt(grad_out, b), matmul_tn(a, grad_out)};
}

// Column block [col0, col0 + width) of a matrix.
inline Tensor slice_cols(const Tensor& a, std::size_t col0, std::size_t width) {
  Tensor out(a.rows(), width);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < width; ++j) out(i, j) = a(i, col0 + j);
  return out;
}

inline void add_into_cols(Tensor& dst, const Tensor& src, std::size_t col0) {
  for (std::size_t i = 0; i < src.rows(); ++i)
    for (std::size_t j = 0; j < src.cols(); ++j) dst(i, col0 + j) += src(i, j);
}

inline Tensor slice_rows(const Tensor& a, std::size_t row0, std::size_t count) {
  Tensor out(count, a.cols());
  std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(row0 * a.cols()), count * a.cols(),
              out.data().begin());
  return out;
}

// ---------------------------------------------------------------------------
// Row softmax.

inline Tensor softmax_rows(const Tensor& x) {
  Tensor y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto in = x.row(i);
    auto out = y.row(i);
    const double mx = *std::max_element(in.begin(), in.end());
    double total = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      out[j] = std::exp(in[j] - mx);
      total += out[j];
    }
    for (double& v : out) v /= total;
  }
  return y;
}

// Given y = softmax_rows(x) and dL/dy, returns dL/dx.
inline Tensor softmax_rows_backward(const Tensor& y, const Tensor& grad_y) {
  Tensor gx(y.rows(), y.cols());
  for (std::size_t i = 0; i < y.rows(); ++i) {
    auto yr = y.row(i);
    auto gr = grad_y.row(i);
    double inner = 0.0;
    for (std::size_t j = 0; j < yr.size(); ++j) inner += yr[j] * gr[j];
    for (std::size_t j = 0; j < yr.size(); ++j) gx(i, j) = yr[j] * (gr[j] - inner);
  }
  return gx;
}

// ---------------------------------------------------------------------------
// Layer normalization over the last dimension.

inline constexpr double kLayerNormEps = 1e-5;

struct LayerNormCache {
  Tensor normalized;             // (x - mean) * inv_std, before the affine
  std::vector<double> inv_std;   // one per row
};

inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps,
                         LayerNormCache* cache = nullptr) {
  const std::size_t n = x.rows(), d = x.cols();
  if (d == 0) throw ShapeError("layer_norm needs d >= 1");
  if (gain.size() != d || bias.size() != d) {
    throw ShapeError("layer_norm affine " + shape_str(gain.shape()) + "/" +
                     shape_str(bias.shape()) + " does not match width " + std::to_string(d));
  }
  Tensor normalized(n, d);
  std::vector<double> inv_std(n);
  Tensor y(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    auto r = x.row(i);
    double mean = 0.0;
    for (double v : r) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : r) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      normalized(i, j) = (r[j] - mean) * inv_std[i];
      y(i, j) = gain[j] * normalized(i, j) + bias[j];
    }
  }
  if (cache) *cache = {std::move(normalized), std::move(inv_std)};
  return y;
}

struct LayerNormGrads {
  Tensor dx;
  Tensor dgain;
  Tensor dbias;
};

inline LayerNormGrads layer_norm_backward(const Tensor& grad_y, const Tensor& gain,
                                          const LayerNormCache& cache) {
  const std::size_t n = grad_y.rows(), d = grad_y.cols();
  LayerNormGrads g{Tensor(n, d), Tensor(gain.shape()), Tensor(gain.shape())};
  std::vector<double> dxhat(d);
  for (std::size_t i = 0; i < n; ++i) {
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = cache.normalized(i, j);
      g.dgain[j] += grad_y(i, j) * xh;
      g.dbias[j] += grad_y(i, j);
      dxhat[j] = grad_y(i, j) * gain[j];
      mean_dxhat += dxhat[j];
      mean_dxhat_xhat += dxhat[j] * xh;
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_xhat /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) {
      g.dx(i, j) =
          cache.inv_std[i] * (dxhat[j] - mean_dxhat - cache.normalized(i, j) * mean_dxhat_xhat);
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Elementwise activations. relu for adapter bottlenecks, gelu (erf form) for
// the backbone MLP.

enum class Activation { relu, gelu };

inline double activate(Activation kind, double x) {
  switch (kind) {
    case Activation::relu:
      return x > 0.0 ? x : 0.0;
    case Activation::gelu:
      return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
  }
  return 0.0;
}

inline double activate_derivative(Activation kind, double x) {
  switch (kind) {
    case Activation::relu:
      return x > 0.0 ? 1.0 : 0.0;
    case Activation::gelu: {
      const double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
      const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
      return cdf + x * pdf;
    }
  }
  return 0.0;
}

inline Tensor activation(Activation kind, const Tensor& x) {
  Tensor y = x;
  for (double& v : y.data()) v = activate(kind, v);
  return y;
}

inline Tensor activation_backward(Activation kind, const Tensor& x, const Tensor& grad_y) {
  Tensor gx = grad_y;
  for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= activate_derivative(kind, x[i]);
  return gx;
}

// ---------------------------------------------------------------------------
// L2 normalization of a single vector and its backward.

inline Tensor l2_normalize(const Tensor& u) {
  const double norm = std::sqrt(dot(u, u));
  if (norm == 0.0) throw ContractError("cannot normalize a zero vector");
  Tensor e = u;
  e *= 1.0 / norm;
  return e;
}

// Given u, e = u/|u| and dL/de, returns dL/du.
inline Tensor l2_normalize_backward(const Tensor& u, const Tensor& e, const Tensor& grad_e) {
  const double norm = std::sqrt(dot(u, u));
  const double proj = dot(e, grad_e);
  Tensor gu = grad_e;
  gu.axpy(-proj, e);
  gu *= 1.0 / norm;
  return gu;
}

// ---------------------------------------------------------------------------
// Parameters.

// A named value with a gradient accumulator. Frozen tensors silently drop
// accumulated gradient, so their grad stays identically zero.
struct ParamTensor {
  Tensor value;
  Tensor grad;
  bool trainable = true;

  ParamTensor() = default;
  explicit ParamTensor(Tensor v, bool train = true)
      : value(std::move(v)), grad(value.shape()), trainable(train) {}

  const Shape& shape() const { return value.shape(); }
  std::size_t size() const { return value.size(); }

  void accumulate(const Tensor& g) {
    if (!trainable) return;
    grad += g;
  }
  void accumulate(std::size_t i, double g) {
    if (trainable) grad[i] += g;
  }
  // Skips computing the gradient at all when frozen.
  template <class Fn>
  void accumulate_lazy(Fn&& make) {
    if (trainable) grad += make();
  }
  void zero_grad() { grad.fill(0.0); }
};

using Rng = std::mt19937_64;

inline Tensor gaussian(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

inline Tensor uniform(Shape shape, double lo, double hi, Rng& rng) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

}  // namespace upt
