#pragma once

// Little-endian binary tensor records:
//   "AUT1" | u32 rank | u64 dims[rank] | f64 values[product(dims)]

#include "aunet/tensor.hpp"

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>

namespace aunet {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_f64(std::ostream& os, double v);
void write_string(std::ostream& os, const std::string& s);  // u32 length + bytes
std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);
double read_f64(std::istream& is);
std::string read_string(std::istream& is);

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

}  // namespace aunet
