#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include "evakit/tensor.hpp"

namespace evakit {

// Binary tensor fixture ("EVAT"), all fields little-endian:
//
//   bytes 0..3   magic "EVAT"
//   u32          rank (1..8)
//   u64 x rank   dims, outermost first
//   u32          element width in bytes (4 = float32, 8 = float64)
//   payload      prod(dims) IEEE-754 elements, row-major
struct Tensor {
  std::vector<std::uint64_t> dims;
  std::vector<double> values;  // widened to double on read
  std::uint32_t element_width = 8;

  std::size_t element_count() const;
};

inline constexpr char kFixtureMagic[4] = {'E', 'V', 'A', 'T'};

void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

void write_tensor_file(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor_file(const std::filesystem::path& path);

// Rank-2 helpers. A rank-1 tensor reads back as a single-row matrix.
Tensor to_tensor(const Matrix& m, std::uint32_t element_width = 8);
Matrix to_matrix(const Tensor& t);

}  // namespace evakit
