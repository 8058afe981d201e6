#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "gdt/tensor.hpp"

namespace gdt {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Little-endian parameter file:
//   "GDT1"
//   repeated until EOF:
//     u32 name_length, name bytes, u32 rank, rank x u64 extents,
//     product(extents) x f64 payload
void write_parameters(std::ostream& out, const std::vector<NamedTensor>& params);
std::vector<NamedTensor> read_parameters(std::istream& in);

void save_parameters(const std::filesystem::path& path, const std::vector<NamedTensor>& params);
std::vector<NamedTensor> load_parameters(const std::filesystem::path& path);

}  // namespace gdt
