#include "evakit/linalg.hpp"

#include <limits>

namespace evakit {

double log_sum_exp(std::span<const double> xs) {
  if (xs.empty()) return -std::numeric_limits<double>::infinity();
  const double mx = *std::max_element(xs.begin(), xs.end());
  if (!std::isfinite(mx)) return mx;
  double acc = 0.0;
  for (double x : xs) acc += std::exp(x - mx);
  return mx + std::log(acc);
}

void softmax_inplace(std::span<double> xs) {
  if (xs.empty()) return;
  const double mx = *std::max_element(xs.begin(), xs.end());
  double total = 0.0;
  for (double& x : xs) {
    x = std::exp(x - mx);
    total += x;
  }
  for (double& x : xs) x /= total;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: " + shape_string(a.rows(), a.cols()) + " * " +
                                             shape_string(b.rows(), b.cols()));
  Matrix c(a.rows(), b.cols());
  const std::size_t n = b.cols();
  const std::size_t inner = a.cols();
  std::size_t i = 0;
  // Four output rows per pass so each loaded row of b feeds four updates.
  for (; i + 4 <= a.rows(); i += 4) {
    double* c0 = c.data() + i * n;
    double* c1 = c0 + n;
    double* c2 = c1 + n;
    double* c3 = c2 + n;
    for (std::size_t k = 0; k < inner; ++k) {
      const double a0 = a(i, k), a1 = a(i + 1, k), a2 = a(i + 2, k), a3 = a(i + 3, k);
      const double* bk = b.data() + k * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double bkj = bk[j];
        c0[j] += a0 * bkj;
        c1[j] += a1 * bkj;
        c2[j] += a2 * bkj;
        c3[j] += a3 * bkj;
      }
    }
  }
  for (; i < a.rows(); ++i) {
    double* ci = c.data() + i * n;
    for (std::size_t k = 0; k < inner; ++k) {
      const double aik = a(i, k);
      const double* bk = b.data() + k * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aik * bk[j];
    }
  }
  return c;
}

void matmul_tn_accumulate(const Matrix& a, const Matrix& b, Matrix& c) {
  if (a.rows() != b.rows() || c.rows() != a.cols() || c.cols() != b.cols())
    throw ShapeError("matmul_tn: shape mismatch");
  const std::size_t n = b.cols();
  std::size_t i = 0;
  for (; i + 4 <= a.cols(); i += 4) {
    double* c0 = c.data() + i * n;
    double* c1 = c0 + n;
    double* c2 = c1 + n;
    double* c3 = c2 + n;
    for (std::size_t k = 0; k < a.rows(); ++k) {
      const double a0 = a(k, i), a1 = a(k, i + 1), a2 = a(k, i + 2), a3 = a(k, i + 3);
      const double* bk = b.data() + k * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double bkj = bk[j];
        c0[j] += a0 * bkj;
        c1[j] += a1 * bkj;
        c2[j] += a2 * bkj;
        c3[j] += a3 * bkj;
      }
    }
  }
  for (; i < a.cols(); ++i) {
    double* ci = c.data() + i * n;
    for (std::size_t k = 0; k < a.rows(); ++k) {
      const double aki = a(k, i);
      const double* bk = b.data() + k * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aki * bk[j];
    }
  }
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  Matrix c(a.cols(), b.cols());
  matmul_tn_accumulate(a, b, c);
  return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw ShapeError("matmul_nt: inner dimension mismatch");
  // Transposing b first lets the inner loop run over contiguous rows.
  Matrix bt(b.cols(), b.rows());
  for (std::size_t i = 0; i < b.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) bt(j, i) = b(i, j);
  return matmul(a, bt);
}

void add_inplace(Matrix& dst, const Matrix& src) {
  if (dst.rows() != src.rows() || dst.cols() != src.cols()) throw ShapeError("add_inplace: shape mismatch");
  for (std::size_t i = 0; i < dst.size(); ++i) dst.data()[i] += src.data()[i];
}

void scale_inplace(Matrix& m, double factor) {
  for (double& x : m.storage()) x *= factor;
}

Matrix slice_cols(const Matrix& m, std::size_t begin, std::size_t width) {
  if (begin + width > m.cols()) throw ShapeError("slice_cols: out of range");
  Matrix out(m.rows(), width);
  for (std::size_t r = 0; r < m.rows(); ++r)
    std::copy_n(m.data() + r * m.cols() + begin, width, out.data() + r * width);
  return out;
}

void set_cols(Matrix& dst, const Matrix& src, std::size_t begin) {
  if (dst.rows() != src.rows() || begin + src.cols() > dst.cols()) throw ShapeError("set_cols: out of range");
  for (std::size_t r = 0; r < src.rows(); ++r)
    std::copy_n(src.data() + r * src.cols(), src.cols(), dst.data() + r * dst.cols() + begin);
}

void add_cols(Matrix& dst, const Matrix& src, std::size_t begin) {
  if (dst.rows() != src.rows() || begin + src.cols() > dst.cols()) throw ShapeError("add_cols: out of range");
  for (std::size_t r = 0; r < src.rows(); ++r)
    for (std::size_t c = 0; c < src.cols(); ++c) dst(r, begin + c) += src(r, c);
}

Vector column_mean(const Matrix& m) {
  Vector mean(m.cols(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) mean[c] += m(r, c);
  if (m.rows() > 0)
    for (double& x : mean) x /= static_cast<double>(m.rows());
  return mean;
}

double frobenius_norm(const Matrix& m) {
  return std::sqrt(squared_norm(std::span<const double>(m.storage())));
}

}  // namespace evakit
