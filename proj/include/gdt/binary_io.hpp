#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>

#include "gdt/errors.hpp"

// Explicit little-endian encoding shared by the checkpoint and dataset formats.

namespace gdt::binary {

template <typename UInt>
void write_uint(std::ostream& out, UInt value) {
  std::array<char, sizeof(UInt)> bytes{};
  for (std::size_t i = 0; i < sizeof(UInt); ++i) bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFF);
  out.write(bytes.data(), bytes.size());
}

inline void write_f64(std::ostream& out, double value) { write_uint(out, std::bit_cast<std::uint64_t>(value)); }

template <typename UInt>
UInt read_uint(std::istream& in, const char* what) {
  std::array<unsigned char, sizeof(UInt)> bytes{};
  in.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw FormatError(std::string("unexpected end of file while reading ") + what);
  }
  UInt value = 0;
  for (std::size_t i = 0; i < sizeof(UInt); ++i) value |= static_cast<UInt>(bytes[i]) << (8 * i);
  return value;
}

inline double read_f64(std::istream& in, const char* what) {
  return std::bit_cast<double>(read_uint<std::uint64_t>(in, what));
}

/// Bytes left between the current read position and the end of the stream.
inline std::uint64_t remaining(std::istream& in) {
  const auto here = in.tellg();
  in.seekg(0, std::ios::end);
  const auto end = in.tellg();
  in.seekg(here);
  if (here < 0 || end < 0) return 0;
  return static_cast<std::uint64_t>(end - here);
}

}  // namespace gdt::binary
