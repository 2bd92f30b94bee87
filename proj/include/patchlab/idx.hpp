#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace patchlab::data {

/// Big-endian IDX container: two zero bytes, dtype byte (0x08 = u8), rank
/// byte, then one 32-bit big-endian size per dimension and the payload.
struct IdxArray {
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> data;

  std::size_t items() const { return dims.empty() ? 0 : dims.front(); }
  /// Bytes per item (product of the trailing dimensions).
  std::size_t item_size() const;
};

IdxArray parse_idx(std::span<const std::uint8_t> bytes);
IdxArray read_idx(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_idx(const IdxArray& array);
void write_idx(const std::filesystem::path& path, const IdxArray& array);

}  // namespace patchlab::data
