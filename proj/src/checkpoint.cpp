#include "gdt/checkpoint.hpp"

#include <fstream>

#include "gdt/binary_io.hpp"
#include "gdt/errors.hpp"

namespace gdt {

namespace {
constexpr char kMagic[4] = {'G', 'D', 'T', '1'};
constexpr std::uint32_t kMaxRank = 8;
}  // namespace

void write_parameters(std::ostream& out, const std::vector<NamedTensor>& params) {
  out.write(kMagic, sizeof(kMagic));
  for (const auto& p : params) {
    binary::write_uint<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    binary::write_uint<std::uint32_t>(out, static_cast<std::uint32_t>(p.tensor.rank()));
    for (auto e : p.tensor.shape()) binary::write_uint<std::uint64_t>(out, e);
    for (double v : p.tensor.data()) binary::write_f64(out, v);
  }
  if (!out) throw IoError("failed writing parameter stream");
}

std::vector<NamedTensor> read_parameters(std::istream& in) {
  char magic[4] = {};
  in.read(magic, sizeof(magic));
  if (in.gcount() != 4 || std::string(magic, 4) != std::string(kMagic, 4)) {
    throw FormatError("not a parameter file: bad magic (expected GDT1)");
  }
  std::vector<NamedTensor> params;
  while (in.peek() != std::char_traits<char>::eof()) {
    const auto name_len = binary::read_uint<std::uint32_t>(in, "parameter name length");
    if (name_len > binary::remaining(in)) throw FormatError("parameter name length exceeds file size");
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const auto rank = binary::read_uint<std::uint32_t>(in, "parameter rank");
    if (rank > kMaxRank) throw FormatError("parameter '" + name + "' has implausible rank " + std::to_string(rank));
    Shape shape(rank);
    std::uint64_t count = 1;
    for (auto& e : shape) {
      e = binary::read_uint<std::uint64_t>(in, "parameter extent");
      if (e == 0) throw FormatError("parameter '" + name + "' has a zero extent");
      count *= e;
    }
    if (count > binary::remaining(in) / 8) {
      throw FormatError("parameter '" + name + "' payload truncated: needs " + std::to_string(count) + " values");
    }
    std::vector<double> data(count);
    for (auto& v : data) v = binary::read_f64(in, "parameter payload");
    params.push_back({std::move(name), Tensor::from(std::move(shape), std::move(data))});
  }
  return params;
}

void save_parameters(const std::filesystem::path& path, const std::vector<NamedTensor>& params) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  write_parameters(out, params);
}

std::vector<NamedTensor> load_parameters(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "': file not found or unreadable");
  return read_parameters(in);
}

}  // namespace gdt
