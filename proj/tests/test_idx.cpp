#include <filesystem>

#include "doctest.h"
#include "patchlab/error.hpp"
#include "patchlab/idx.hpp"

using namespace patchlab;
using namespace patchlab::data;

namespace {

std::vector<std::uint8_t> header(std::initializer_list<std::uint8_t> magic, std::initializer_list<std::uint32_t> dims) {
  std::vector<std::uint8_t> out(magic);
  for (std::uint32_t d : dims)
    for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<std::uint8_t>(d >> shift));
  return out;
}

}  // namespace

TEST_CASE("image file header 00 00 08 03 with dims (60000, 28, 28)") {
  auto bytes = header({0, 0, 8, 3}, {60000, 28, 28});
  CHECK(bytes.size() == 16);
  CHECK(bytes[4] == 0x00);
  CHECK(bytes[5] == 0x00);
  CHECK(bytes[6] == 0xEA);
  CHECK(bytes[7] == 0x60);
  bytes.resize(16 + 60000ull * 784, 0);
  bytes[16 + 784 * 59999] = 255;
  const auto array = parse_idx(bytes);
  CHECK(array.dims == std::vector<std::uint32_t>{60000, 28, 28});
  CHECK(array.items() == 60000);
  CHECK(array.item_size() == 784);
  CHECK(array.data.size() == 60000ull * 784);
  CHECK(array.data[784 * 59999] == 255);
}

TEST_CASE("label file header 00 00 08 01") {
  auto bytes = header({0, 0, 8, 1}, {60000});
  for (std::uint32_t i = 0; i < 60000; ++i) bytes.push_back(static_cast<std::uint8_t>(i % 10));
  const auto array = parse_idx(bytes);
  CHECK(array.items() == 60000);
  CHECK(array.item_size() == 1);
  CHECK(array.data[12345] == 5);
}

TEST_CASE("encode and parse round trip, also through a file") {
  IdxArray a;
  a.dims = {3, 2, 2};
  a.data = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11};
  const auto bytes = encode_idx(a);
  CHECK(bytes == [&] {
    auto h = header({0, 0, 8, 3}, {3, 2, 2});
    h.insert(h.end(), a.data.begin(), a.data.end());
    return h;
  }());
  const auto b = parse_idx(bytes);
  CHECK(b.dims == a.dims);
  CHECK(b.data == a.data);

  const auto path = std::filesystem::temp_directory_path() / "patchlab_idx_roundtrip.idx";
  write_idx(path, a);
  const auto c = read_idx(path);
  CHECK(c.data == a.data);
  std::filesystem::remove(path);
}

TEST_CASE("truncated payload reports the offset where data ran out") {
  auto bytes = header({0, 0, 8, 2}, {4, 5});
  bytes.resize(bytes.size() + 13, 7);  // 20 expected
  try {
    parse_idx(bytes);
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(e.offset() == 12 + 13);
  }
}

TEST_CASE("malformed headers") {
  CHECK_THROWS_AS(parse_idx(std::vector<std::uint8_t>{0, 0}), FormatError);
  try {
    parse_idx(std::vector<std::uint8_t>{0, 1, 8, 1, 0, 0, 0, 0});
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(e.offset() == 1);
  }
  CHECK_THROWS_AS(parse_idx(std::vector<std::uint8_t>{0, 0, 0x0D, 1, 0, 0, 0, 0}), FormatError);
  CHECK_THROWS_AS(parse_idx(std::vector<std::uint8_t>{0, 0, 8, 2, 0, 0, 0, 1}), FormatError);
  auto extra = header({0, 0, 8, 1}, {2});
  extra.insert(extra.end(), {1, 2, 3});
  CHECK_THROWS_AS(parse_idx(extra), FormatError);
  CHECK_THROWS_AS(read_idx("/nonexistent/patchlab.idx"), DataError);
}
