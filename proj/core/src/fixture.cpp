#include "evakit/fixture.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace evakit {

namespace {

static_assert(std::endian::native == std::endian::little, "fixture I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw ShapeError("fixture: truncated stream");
  return value;
}

}  // namespace

std::size_t Tensor::element_count() const {
  std::size_t n = 1;
  for (auto d : dims) n *= static_cast<std::size_t>(d);
  return n;
}

void write_tensor(std::ostream& out, const Tensor& t) {
  if (t.dims.empty() || t.dims.size() > 8) throw ShapeError("fixture: rank must be 1..8");
  if (t.element_width != 4 && t.element_width != 8) throw ShapeError("fixture: element width must be 4 or 8");
  if (t.values.size() != t.element_count()) throw ShapeError("fixture: value count does not match dims");
  out.write(kFixtureMagic, 4);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t.dims.size()));
  for (auto d : t.dims) put<std::uint64_t>(out, d);
  put<std::uint32_t>(out, t.element_width);
  for (double v : t.values) {
    if (t.element_width == 4)
      put<float>(out, static_cast<float>(v));
    else
      put<double>(out, v);
  }
  if (!out) throw std::runtime_error("fixture: write failed");
}

Tensor read_tensor(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kFixtureMagic, 4) != 0) throw ShapeError("fixture: bad magic");
  Tensor t;
  const auto rank = get<std::uint32_t>(in);
  if (rank == 0 || rank > 8) throw ShapeError("fixture: rank must be 1..8");
  t.dims.resize(rank);
  for (auto& d : t.dims) d = get<std::uint64_t>(in);
  t.element_width = get<std::uint32_t>(in);
  if (t.element_width != 4 && t.element_width != 8) throw ShapeError("fixture: element width must be 4 or 8");
  t.values.resize(t.element_count());
  for (double& v : t.values) v = t.element_width == 4 ? static_cast<double>(get<float>(in)) : get<double>(in);
  return t;
}

void write_tensor_file(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("fixture: cannot open " + path.string());
  write_tensor(out, t);
}

Tensor read_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("fixture: cannot open " + path.string());
  return read_tensor(in);
}

Tensor to_tensor(const Matrix& m, std::uint32_t element_width) {
  return Tensor{{m.rows(), m.cols()}, m.storage(), element_width};
}

Matrix to_matrix(const Tensor& t) {
  if (t.dims.size() == 1) return Matrix::from_data(1, t.dims[0], t.values);
  if (t.dims.size() != 2) throw ShapeError("fixture: expected a rank-1 or rank-2 tensor");
  return Matrix::from_data(t.dims[0], t.dims[1], t.values);
}

}  // namespace evakit
