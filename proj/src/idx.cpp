#include "patchlab/idx.hpp"

#include <fstream>
#include <iterator>

#include "patchlab/error.hpp"

namespace patchlab::data {

std::size_t IdxArray::item_size() const {
  std::size_t size = 1;
  for (std::size_t i = 1; i < dims.size(); ++i) size *= dims[i];
  return size;
}

IdxArray parse_idx(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw FormatError("IDX header truncated", bytes.size());
  if (bytes[0] != 0 || bytes[1] != 0) throw FormatError("IDX magic must start with two zero bytes", bytes[0] != 0 ? 0 : 1);
  if (bytes[2] != 0x08) throw FormatError("unsupported IDX dtype " + std::to_string(bytes[2]) + " (only u8)", 2);
  const std::size_t rank = bytes[3];
  if (rank == 0) throw FormatError("IDX rank must be positive", 3);
  const std::size_t header = 4 + 4 * rank;
  if (bytes.size() < header) throw FormatError("IDX dimension table truncated", bytes.size());

  IdxArray out;
  std::size_t payload = 1;
  for (std::size_t d = 0; d < rank; ++d) {
    const std::size_t at = 4 + 4 * d;
    const std::uint32_t dim = (std::uint32_t{bytes[at]} << 24) | (std::uint32_t{bytes[at + 1]} << 16) |
                              (std::uint32_t{bytes[at + 2]} << 8) | std::uint32_t{bytes[at + 3]};
    out.dims.push_back(dim);
    payload *= dim;
  }
  if (bytes.size() < header + payload)
    throw FormatError("IDX payload truncated: expected " + std::to_string(payload) + " bytes", bytes.size());
  if (bytes.size() > header + payload) throw FormatError("IDX file has trailing bytes", header + payload);
  out.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header), bytes.end());
  return out;
}

IdxArray read_idx(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open IDX file " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_idx(bytes);
}

std::vector<std::uint8_t> encode_idx(const IdxArray& array) {
  if (array.dims.empty() || array.dims.size() > 255) throw ShapeError("IDX rank must be in [1, 255]");
  std::size_t payload = 1;
  for (auto d : array.dims) payload *= d;
  if (payload != array.data.size()) throw ShapeError("IDX dims do not match payload size");
  std::vector<std::uint8_t> out{0, 0, 0x08, static_cast<std::uint8_t>(array.dims.size())};
  for (auto d : array.dims)
    for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<std::uint8_t>((d >> shift) & 0xFF));
  out.insert(out.end(), array.data.begin(), array.data.end());
  return out;
}

void write_idx(const std::filesystem::path& path, const IdxArray& array) {
  const auto bytes = encode_idx(array);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write IDX file " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace patchlab::data
