#pragma once

// Binary tensor archive: little-endian, magic "RTGK", u32 version, u32 count,
// then per tensor: u16 name length, UTF-8 name, u8 rank, u64 dims, f32 data.

#include <rtgen/layers.hpp>

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace rtgen {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::vector<float> data;
};

void write_tensors(std::ostream& out, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_tensors(std::istream& in);

void save_tensors(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_tensors(const std::filesystem::path& path);

template <typename T>
NamedTensor to_tensor(const std::string& name, const DiffArray<T>& array) {
  NamedTensor t{name, {}, {}};
  for (Index d : array.shape()) t.dims.push_back(static_cast<std::uint64_t>(d));
  t.data.reserve(static_cast<std::size_t>(array.size()));
  const auto& v = array.value();
  for (Index i = 0; i < v.size(); ++i) t.data.push_back(static_cast<float>(v.data()[i]));
  return t;
}

template <typename T>
NamedTensor to_tensor(const std::string& name, const Matrix<T>& value, const Shape& shape) {
  NamedTensor t{name, {}, {}};
  for (Index d : shape) t.dims.push_back(static_cast<std::uint64_t>(d));
  for (Index i = 0; i < value.size(); ++i) t.data.push_back(static_cast<float>(value.data()[i]));
  return t;
}

/// Copies `tensor` into `target`, which must have the same shape.
template <typename T>
void assign_tensor(const NamedTensor& tensor, Matrix<T>& target, const Shape& shape) {
  if (tensor.dims.size() != shape.size()) throw CheckpointError("rank mismatch for tensor " + tensor.name);
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (tensor.dims[i] != static_cast<std::uint64_t>(shape[i])) {
      throw CheckpointError("shape mismatch for tensor " + tensor.name);
    }
  }
  for (Index i = 0; i < target.size(); ++i) target.data()[i] = static_cast<T>(tensor.data[static_cast<std::size_t>(i)]);
}

}  // namespace rtgen
