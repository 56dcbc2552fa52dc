#pragma once

#include "evakit/tensor.hpp"

namespace evakit {

// C = A * B
Matrix matmul(const Matrix& a, const Matrix& b);
// C = A^T * B
Matrix matmul_tn(const Matrix& a, const Matrix& b);
// C = A * B^T
Matrix matmul_nt(const Matrix& a, const Matrix& b);

// C += A^T * B, shapes must already agree.
void matmul_tn_accumulate(const Matrix& a, const Matrix& b, Matrix& c);

void add_inplace(Matrix& dst, const Matrix& src);
void scale_inplace(Matrix& m, double factor);

// Columns [begin, begin + width) of m.
Matrix slice_cols(const Matrix& m, std::size_t begin, std::size_t width);
// dst[:, begin:begin+src.cols()] = src
void set_cols(Matrix& dst, const Matrix& src, std::size_t begin);
// dst[:, begin:begin+src.cols()] += src
void add_cols(Matrix& dst, const Matrix& src, std::size_t begin);

Vector column_mean(const Matrix& m);

double frobenius_norm(const Matrix& m);

}  // namespace evakit
