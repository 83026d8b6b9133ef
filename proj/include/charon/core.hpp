#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace charon {

using Ipv4Addr = std::uint32_t;  // host byte order

// Base for every error the library throws.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
  using Error::Error;
};

class EncodingError : public Error {
public:
  using Error::Error;
};

class ClockRegressionError : public Error {
public:
  explicit ClockRegressionError(double last, double now)
      : Error("clock regression: now=" + std::to_string(now) +
              " precedes last update " + std::to_string(last)) {}
};

class NotAFlowPacket : public Error {
public:
  NotAFlowPacket() : Error("not a flow packet") {}
};

// Largest pool the timestamp covert channel can address (8 id bits).
inline constexpr std::size_t kMaxPoolSize = 256;
inline constexpr unsigned kMaxIdBits = 8;

inline constexpr std::uint8_t kProtoTcp = 6;
inline constexpr std::uint8_t kProtoUdp = 17;
inline constexpr std::uint8_t kProtoGre = 47;

struct FlowKey {
  Ipv4Addr src_ip = 0;
  Ipv4Addr dst_ip = 0;
  std::uint8_t protocol = 0;
  std::uint16_t src_port = 0;
  std::uint16_t dst_port = 0;

  friend bool operator==(const FlowKey&, const FlowKey&) = default;

  // 13-byte big-endian packing, the input of the selection hashes.
  std::array<std::uint8_t, 13> packed() const {
    return {static_cast<std::uint8_t>(src_ip >> 24), static_cast<std::uint8_t>(src_ip >> 16),
            static_cast<std::uint8_t>(src_ip >> 8),  static_cast<std::uint8_t>(src_ip),
            static_cast<std::uint8_t>(dst_ip >> 24), static_cast<std::uint8_t>(dst_ip >> 16),
            static_cast<std::uint8_t>(dst_ip >> 8),  static_cast<std::uint8_t>(dst_ip),
            protocol,
            static_cast<std::uint8_t>(src_port >> 8), static_cast<std::uint8_t>(src_port),
            static_cast<std::uint8_t>(dst_port >> 8), static_cast<std::uint8_t>(dst_port)};
  }
};

// Index of a backend in [0, pool_size).
class ServerId {
public:
  constexpr ServerId() = default;
  constexpr explicit ServerId(std::uint32_t v) : value_(v) {}

  constexpr std::uint32_t value() const { return value_; }
  constexpr operator std::size_t() const { return value_; }

  friend constexpr bool operator==(ServerId, ServerId) = default;
  friend constexpr auto operator<=>(ServerId, ServerId) = default;

private:
  std::uint32_t value_ = 0;
};

struct ServerDescriptor {
  ServerId server_id;
  Ipv4Addr dip = 0;
  double capacity = 1.0;       // work units per second
  double static_weight = 1.0;

  void validate() const {
    if (!(capacity > 0.0)) throw ConfigError("server capacity must be positive");
    if (!(static_weight >= 0.0)) throw ConfigError("server static weight must be non-negative");
  }
};

struct LbConfig {
  std::size_t pool_size = 16;
  unsigned id_bits = 4;
  double alias_update_interval = 1.0;  // seconds
  std::uint64_t rng_seed = 0x5eed;
  // The two "hash functions" are one keyed hash under two seeds.
  std::uint64_t hash_seed0 = 0x9e3779b97f4a7c15ULL;
  std::uint64_t hash_seed1 = 0xc2b2ae3d27d4eb4fULL;

  void validate() const {
    if (pool_size == 0) throw ConfigError("pool_size must be at least 1");
    if (pool_size > kMaxPoolSize) throw ConfigError("pool_size exceeds 256");
    if (id_bits < 1 || id_bits > kMaxIdBits) throw ConfigError("id_bits must be in [1, 8]");
    if ((std::size_t{1} << id_bits) < pool_size)
      throw ConfigError("2^id_bits must cover pool_size");
    if (hash_seed0 == hash_seed1) throw ConfigError("hash seeds must differ");
    if (!(alias_update_interval > 0.0)) throw ConfigError("alias_update_interval must be positive");
  }
};

inline std::string format_ipv4(Ipv4Addr a) {
  return std::to_string(a >> 24) + "." + std::to_string((a >> 16) & 0xff) + "." +
         std::to_string((a >> 8) & 0xff) + "." + std::to_string(a & 0xff);
}

constexpr Ipv4Addr make_ipv4(std::uint8_t a, std::uint8_t b, std::uint8_t c, std::uint8_t d) {
  return (Ipv4Addr{a} << 24) | (Ipv4Addr{b} << 16) | (Ipv4Addr{c} << 8) | Ipv4Addr{d};
}

}  // namespace charon

template <>
struct std::hash<charon::FlowKey> {
  std::size_t operator()(const charon::FlowKey& k) const noexcept {
    std::uint64_t h = (std::uint64_t{k.src_ip} << 32) | k.dst_ip;
    h ^= (std::uint64_t{k.src_port} << 24) ^ (std::uint64_t{k.dst_port} << 8) ^ k.protocol;
    h *= 0x9e3779b97f4a7c15ULL;
    return static_cast<std::size_t>(h ^ (h >> 29));
  }
};
