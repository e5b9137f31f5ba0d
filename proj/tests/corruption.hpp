#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "s2c/errors.hpp"

namespace s2c::testing {

struct Corruption {
  std::string name;
  CheckpointError::Kind expected;
  std::vector<unsigned char> bytes;
};

inline std::uint64_t le_u64(const std::vector<unsigned char>& b, std::size_t pos) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[pos + static_cast<std::size_t>(i)];
  return v;
}

inline std::uint32_t le_u32(const std::vector<unsigned char>& b, std::size_t pos) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[pos + static_cast<std::size_t>(i)];
  return v;
}

// Damaged copies of a valid single-precision checkpoint, one per load error kind
// detectable from the bytes alone.
inline std::vector<Corruption> corrupt_variants(const std::vector<unsigned char>& good) {
  using K = CheckpointError::Kind;
  std::vector<Corruption> out;
  auto add = [&](std::string name, K kind, auto&& edit) {
    auto b = good;
    edit(b);
    out.push_back({std::move(name), kind, std::move(b)});
  };
  add("bad magic", K::bad_magic, [](auto& b) { b[0] = 'X'; });
  add("future version", K::version_mismatch, [](auto& b) { b[4] = 2; });
  add("truncated payload", K::truncated, [](auto& b) { b.resize(b.size() - 10); });
  add("truncated preamble", K::truncated, [](auto& b) { b.resize(6); });
  add("malformed header", K::malformed_header, [](auto& b) { b[16] = 'x'; });
  // First index entry: u32 key length, key, u32 rank, extents, u64 offset, u64 bytes.
  const std::size_t index = 16 + static_cast<std::size_t>(le_u64(good, 8)) + 8;
  const std::uint32_t keylen = le_u32(good, index);
  const std::uint32_t rank = le_u32(good, index + 4 + keylen);
  const std::size_t bytes_field = index + 4 + keylen + 4 + 8 * rank + 8;
  add("index byte count", K::index_inconsistent,
      [bytes_field](auto& b) { b[bytes_field] = static_cast<unsigned char>(b[bytes_field] + 4); });
  add("trailing bytes", K::index_inconsistent, [](auto& b) { b.push_back(0); });
  return out;
}

}  // namespace s2c::testing
