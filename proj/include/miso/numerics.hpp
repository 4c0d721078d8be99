#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "miso/errors.hpp"

namespace miso {

// Dense row-major tensor of doubles. Rank 1..3 in practice; rank-2 helpers
// treat every leading dimension as rows and the last one as columns.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

  Tensor(std::vector<std::size_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (element_count(shape_) != data_.size()) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(shape_));
    }
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }

  static Tensor vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
  }

  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged rows in Tensor::from_rows");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  static Tensor identity(std::size_t n) {
    Tensor t = matrix(n, n);
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }
  std::size_t rows() const {
    if (shape_.empty()) return 0;
    const std::size_t c = cols();
    return c == 0 ? 0 : data_.size() / c;
  }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols(), cols()};
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool operator==(const Tensor& other) const = default;

  static std::size_t element_count(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           std::multiplies<>());
  }

  static std::string shape_string(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

inline std::string shape_string(const Tensor& t) { return Tensor::shape_string(t.shape()); }

namespace kernels {

// c[m x n] (+)= a[m x k] * b[k x n]
inline void gemm(const double* __restrict a, const double* __restrict b, double* __restrict c,
                 std::size_t m, std::size_t k, std::size_t n, bool accumulate = false) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m x n] (+)= a^T * b, with a[k x m] and b[k x n]
inline void gemm_at_b(const double* __restrict a, const double* __restrict b,
                      double* __restrict c, std::size_t k, std::size_t m, std::size_t n,
                      bool accumulate = false) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

inline void transpose(const double* __restrict a, double* __restrict out, std::size_t m,
                      std::size_t n) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
}

// c[m x n] (+)= a[m x k] * b^T, with b[n x k]. Uses a transposed copy of b.
inline void gemm_a_bt(const double* a, const double* b, double* c, std::size_t m,
                      std::size_t k, std::size_t n, bool accumulate = false) {
  std::vector<double> bt(k * n);
  transpose(b, bt.data(), n, k);
  gemm(a, bt.data(), c, m, k, n, accumulate);
}

inline double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

}  // namespace kernels

inline void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(what) + " must be rank 2, got shape " + shape_string(t));
  }
}

inline bool all_finite(const Tensor& t) {
  return std::all_of(t.data().begin(), t.data().end(),
                     [](double v) { return std::isfinite(v); });
}

inline void ensure_finite(const Tensor& t, const char* op) {
  if (!all_finite(t)) throw NumericError(std::string(op) + " produced a non-finite value");
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul lhs");
  require_matrix(b, "matmul rhs");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul inner dimensions differ: " + shape_string(a) + " x " +
                         shape_string(b));
  }
  Tensor c = Tensor::matrix(a.rows(), b.cols());
  kernels::gemm(a.data().data(), b.data().data(), c.data().data(), a.rows(), a.cols(),
                b.cols());
  ensure_finite(c, "matmul");
  return c;
}

inline Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose input");
  Tensor t = Tensor::matrix(a.cols(), a.rows());
  kernels::transpose(a.data().data(), t.data().data(), a.rows(), a.cols());
  return t;
}

// Row-wise softmax with per-row max subtraction.
inline Tensor stable_softmax_rows(const Tensor& x) {
  require_matrix(x, "softmax input");
  Tensor out = x;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    if (row.empty()) continue;
    const double mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      sum += v;
    }
    for (double& v : row) v /= sum;
  }
  ensure_finite(out, "stable_softmax_rows");
  return out;
}

inline double logsumexp(std::span<const double> v) {
  if (v.empty()) return -std::numeric_limits<double>::infinity();
  const double mx = *std::max_element(v.begin(), v.end());
  double sum = 0.0;
  for (double x : v) sum += std::exp(x - mx);
  return mx + std::log(sum);
}

// log sum_j exp(x[i, j]) for every row i; returns a rank-1 tensor of length rows.
inline Tensor logsumexp_rows(const Tensor& x) {
  require_matrix(x, "logsumexp input");
  if (x.cols() == 0) throw ArgumentError("logsumexp_rows over zero columns");
  std::vector<double> out(x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) out[r] = logsumexp(x.row(r));
  Tensor t = Tensor::vector(std::move(out));
  ensure_finite(t, "logsumexp_rows");
  return t;
}

using ScalarFunction = std::function<double(const Tensor&)>;

// Central-difference gradient of f at x.
inline Tensor finite_diff_grad(const ScalarFunction& f, const Tensor& x, double eps = 1e-6) {
  if (!(eps > 0.0)) throw ArgumentError("finite_diff_grad requires eps > 0");
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double fp = f(probe);
    probe[i] = orig - eps;
    const double fm = f(probe);
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw OracleError("non-finite function value at coordinate " + std::to_string(i));
    }
    grad[i] = (fp - fm) / (2.0 * eps);
  }
  return grad;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("max_abs_diff shapes differ: " + shape_string(a) + " vs " +
                         shape_string(b));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double frobenius_norm(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return std::sqrt(s);
}

// ||a - b|| / max(||a||, ||b||); 0 when both are zero.
inline double relative_error(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("relative_error shapes differ: " + shape_string(a) + " vs " +
                         shape_string(b));
  }
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += (a[i] - b[i]) * (a[i] - b[i]);
  const double scale = std::max(frobenius_norm(a), frobenius_norm(b));
  return scale == 0.0 ? 0.0 : std::sqrt(diff) / scale;
}

// Rows [begin, end) of a rank-2 tensor.
inline Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t end) {
  Tensor out = Tensor::matrix(end - begin, t.cols());
  std::copy(t.data().begin() + begin * t.cols(), t.data().begin() + end * t.cols(),
            out.data().begin());
  return out;
}

// Columns [begin, begin + width) of a rank-2 tensor.
inline Tensor slice_cols(const Tensor& t, std::size_t begin, std::size_t width) {
  Tensor out = Tensor::matrix(t.rows(), width);
  for (std::size_t r = 0; r < t.rows(); ++r)
    std::copy_n(t.row(r).begin() + begin, width, out.row(r).begin());
  return out;
}

inline void add_cols_into(Tensor& dst, const Tensor& src, std::size_t begin) {
  for (std::size_t r = 0; r < src.rows(); ++r) {
    auto d = dst.row(r);
    auto s = src.row(r);
    for (std::size_t c = 0; c < s.size(); ++c) d[begin + c] += s[c];
  }
}

inline Tensor vstack(std::span<const Tensor* const> parts, std::size_t cols) {
  std::size_t rows = 0;
  for (const Tensor* p : parts) {
    if (p->cols() != cols && p->size() != 0) {
      throw DimensionError("vstack column mismatch: " + shape_string(*p));
    }
    rows += p->rows();
  }
  Tensor out = Tensor::matrix(rows, cols);
  auto it = out.data().begin();
  for (const Tensor* p : parts) it = std::copy(p->data().begin(), p->data().end(), it);
  return out;
}

inline void add_into(Tensor& dst, const Tensor& src) {
  if (dst.size() != src.size()) {
    throw DimensionError("add_into size mismatch: " + shape_string(dst) + " vs " +
                         shape_string(src));
  }
  double* d = dst.data().data();
  const double* s = src.data().data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

}  // namespace miso
