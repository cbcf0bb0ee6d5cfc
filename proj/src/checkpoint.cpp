#include <rtgen/checkpoint.hpp>

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace rtgen {
namespace {

constexpr std::array<char, 4> kMagic{'R', 'T', 'G', 'K'};

template <typename U>
void put_le(std::ostream& out, U value) {
  std::array<char, sizeof(U)> bytes{};
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFF);
  out.write(bytes.data(), bytes.size());
}

template <typename U>
U get_le(std::istream& in, const char* what) {
  std::array<unsigned char, sizeof(U)> bytes{};
  if (!in.read(reinterpret_cast<char*>(bytes.data()), bytes.size())) {
    throw CheckpointError(std::string("truncated checkpoint while reading ") + what);
  }
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
  return value;
}

}  // namespace

void write_tensors(std::ostream& out, const std::vector<NamedTensor>& tensors) {
  out.write(kMagic.data(), kMagic.size());
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.name.size() > 0xFFFF) throw CheckpointError("tensor name too long: " + t.name);
    if (t.dims.size() > 0xFF) throw CheckpointError("tensor rank too large: " + t.name);
    std::uint64_t count = 1;
    for (auto d : t.dims) count *= d;
    if (count != t.data.size()) throw CheckpointError("tensor data does not match dims: " + t.name);
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.dims.size()));
    for (auto d : t.dims) put_le<std::uint64_t>(out, d);
    for (float f : t.data) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
  }
  if (!out) throw CheckpointError("failed writing checkpoint");
}

std::vector<NamedTensor> read_tensors(std::istream& in) {
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) throw CheckpointError("bad checkpoint magic");
  const auto version = get_le<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const auto count = get_le<std::uint32_t>(in, "tensor count");
  std::vector<NamedTensor> tensors;
  tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name.resize(get_le<std::uint16_t>(in, "name length"));
    if (!in.read(t.name.data(), static_cast<std::streamsize>(t.name.size()))) {
      throw CheckpointError("truncated checkpoint while reading tensor name");
    }
    const auto rank = get_le<std::uint8_t>(in, "rank");
    std::uint64_t elements = 1;
    for (std::uint8_t r = 0; r < rank; ++r) {
      t.dims.push_back(get_le<std::uint64_t>(in, "dims"));
      elements *= t.dims.back();
    }
    if (elements > (std::uint64_t{1} << 32)) throw CheckpointError("implausible tensor size for " + t.name);
    t.data.resize(static_cast<std::size_t>(elements));
    for (auto& f : t.data) f = std::bit_cast<float>(get_le<std::uint32_t>(in, "data"));
    tensors.push_back(std::move(t));
  }
  return tensors;
}

void save_tensors(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot open " + path.string() + " for writing");
  write_tensors(out, tensors);
}

std::vector<NamedTensor> load_tensors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  return read_tensors(in);
}

}  // namespace rtgen
