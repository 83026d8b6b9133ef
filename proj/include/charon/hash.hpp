#pragma once

#include <cstdint>
#include <cstring>
#include <span>

#include "charon/core.hpp"

namespace charon {

// MurmurHash64A over an arbitrary byte span.
inline std::uint64_t murmur64(std::span<const std::uint8_t> data, std::uint64_t seed) {
  constexpr std::uint64_t m = 0xc6a4a7935bd1e995ULL;
  constexpr int r = 47;
  std::uint64_t h = seed ^ (data.size() * m);

  std::size_t i = 0;
  for (; i + 8 <= data.size(); i += 8) {
    std::uint64_t k;
    std::memcpy(&k, data.data() + i, 8);
    k *= m;
    k ^= k >> r;
    k *= m;
    h ^= k;
    h *= m;
  }
  const std::size_t rest = data.size() - i;
  if (rest > 0) {
    std::uint64_t tail = 0;
    for (std::size_t j = rest; j-- > 0;) tail = (tail << 8) | data[i + j];
    h ^= tail;
    h *= m;
  }
  h ^= h >> r;
  h *= m;
  h ^= h >> r;
  return h;
}

inline std::uint64_t flow_hash(const FlowKey& key, std::uint64_t seed) {
  const auto bytes = key.packed();
  return murmur64(bytes, seed);
}

// Maps the high 32 bits of a hash uniformly onto [0, n).
constexpr std::uint32_t hash_to_index(std::uint64_t h, std::uint64_t n) {
  return static_cast<std::uint32_t>(((h >> 32) * n) >> 32);
}

// Maps the low 32 bits of a hash uniformly onto [0, n).
constexpr std::uint32_t hash_to_value(std::uint64_t h, std::uint64_t n) {
  return static_cast<std::uint32_t>(((h & 0xffffffffULL) * n) >> 32);
}

}  // namespace charon
