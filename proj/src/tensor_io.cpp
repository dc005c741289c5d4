#include "aunet/tensor_io.hpp"

#include <array>
#include <bit>
#include <istream>
#include <ostream>

namespace aunet {

namespace {

template <std::size_t N>
void put_le(std::ostream& os, std::uint64_t v) {
  std::array<char, N> bytes{};
  for (std::size_t i = 0; i < N; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(bytes.data(), N);
}

template <std::size_t N>
std::uint64_t get_le(std::istream& is) {
  std::array<unsigned char, N> bytes{};
  is.read(reinterpret_cast<char*>(bytes.data()), N);
  if (!is) throw FormatError("unexpected end of binary stream");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < N; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return v;
}

constexpr std::array<char, 4> kTensorMagic{'A', 'U', 'T', '1'};
constexpr std::uint32_t kMaxRank = 16;

}  // namespace

void write_u32(std::ostream& os, std::uint32_t v) { put_le<4>(os, v); }
void write_u64(std::ostream& os, std::uint64_t v) { put_le<8>(os, v); }
void write_f64(std::ostream& os, double v) { put_le<8>(os, std::bit_cast<std::uint64_t>(v)); }

void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint32_t read_u32(std::istream& is) { return static_cast<std::uint32_t>(get_le<4>(is)); }
std::uint64_t read_u64(std::istream& is) { return get_le<8>(is); }
double read_f64(std::istream& is) { return std::bit_cast<double>(get_le<8>(is)); }

std::string read_string(std::istream& is) {
  const std::uint32_t n = read_u32(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw FormatError("truncated string record");
  return s;
}

void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kTensorMagic.data(), kTensorMagic.size());
  write_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (Index d : t.shape()) write_u64(os, static_cast<std::uint64_t>(d));
  for (Index i = 0; i < t.size(); ++i) write_f64(os, t.value()[i]);
}

Tensor read_tensor(std::istream& is) {
  std::array<char, 4> magic{};
  is.read(magic.data(), magic.size());
  if (!is || magic != kTensorMagic) throw FormatError("bad tensor magic (expected AUT1)");
  const std::uint32_t rank = read_u32(is);
  if (rank == 0 || rank > kMaxRank) throw FormatError("bad tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) {
    const std::uint64_t v = read_u64(is);
    if (v == 0 || v > (1ULL << 32)) throw FormatError("bad tensor dimension " + std::to_string(v));
    d = static_cast<Index>(v);
  }
  Tensor::Array values(shape_size(shape));
  for (Index i = 0; i < values.size(); ++i) values[i] = read_f64(is);
  return Tensor(std::move(shape), std::move(values));
}

}  // namespace aunet
