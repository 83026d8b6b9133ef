#pragma once

// Ethernet II / IPv4 / GRE (RFC 2784 + key) / TCP codec with the two
// covert-channel encodings: server id in the high TSval bits and load
// feedback in the GRE key.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "charon/core.hpp"

namespace charon {

inline constexpr std::uint16_t kEtherTypeIpv4 = 0x0800;
inline constexpr std::uint16_t kEtherTypeArp = 0x0806;

namespace tcp_flags {
inline constexpr std::uint8_t kFin = 0x01;
inline constexpr std::uint8_t kSyn = 0x02;
inline constexpr std::uint8_t kRst = 0x04;
inline constexpr std::uint8_t kPsh = 0x08;
inline constexpr std::uint8_t kAck = 0x10;
}  // namespace tcp_flags

enum class ParseErrc { kTruncated, kUnsupported, kMalformed };

class ParseError : public Error {
public:
  ParseError(ParseErrc code, std::size_t offset, const std::string& what)
      : Error(what + " at offset " + std::to_string(offset)), code_(code), offset_(offset) {}
  ParseErrc code() const { return code_; }
  std::size_t offset() const { return offset_; }

private:
  ParseErrc code_;
  std::size_t offset_;
};

using MacAddr = std::array<std::uint8_t, 6>;

struct EthernetHeader {
  MacAddr dst{};
  MacAddr src{};
  std::uint16_t ethertype = kEtherTypeIpv4;
  friend bool operator==(const EthernetHeader&, const EthernetHeader&) = default;
};

struct Ipv4Header {
  std::uint8_t tos = 0;
  std::uint16_t total_length = 0;  // recomputed on serialize
  std::uint16_t id = 0;
  std::uint16_t flags_fragment = 0x4000;  // DF
  std::uint8_t ttl = 64;
  std::uint8_t protocol = kProtoTcp;
  std::uint16_t checksum = 0;  // recomputed on serialize
  Ipv4Addr src = 0;
  Ipv4Addr dst = 0;
  std::vector<std::uint8_t> options;
  friend bool operator==(const Ipv4Header&, const Ipv4Header&) = default;

  std::size_t header_length() const { return 20 + options.size(); }
};

struct GreHeader {
  std::uint16_t flags_version = 0;  // bits other than C/K/S, plus version
  std::uint16_t protocol = kEtherTypeIpv4;
  bool checksum_present = false;
  std::uint16_t checksum = 0;  // recomputed on serialize when present
  std::uint16_t reserved1 = 0;
  std::optional<std::uint32_t> key;
  std::optional<std::uint32_t> sequence;
  friend bool operator==(const GreHeader&, const GreHeader&) = default;

  std::size_t header_length() const {
    return 4 + (checksum_present ? 4 : 0) + (key ? 4 : 0) + (sequence ? 4 : 0);
  }
};

struct TcpTimestamp {
  std::uint32_t tsval = 0;
  std::uint32_t tsecr = 0;
  friend bool operator==(const TcpTimestamp&, const TcpTimestamp&) = default;
};

struct TcpHeader {
  std::uint16_t src_port = 0;
  std::uint16_t dst_port = 0;
  std::uint32_t seq = 0;
  std::uint32_t ack = 0;
  std::uint8_t reserved_ns = 0;  // low nibble of the data-offset byte
  std::uint8_t flags = 0;
  std::uint16_t window = 65535;
  std::uint16_t checksum = 0;  // recomputed on serialize
  std::uint16_t urgent = 0;
  std::vector<std::uint8_t> options;  // opaque except for the timestamp option
  friend bool operator==(const TcpHeader&, const TcpHeader&) = default;

  std::size_t header_length() const { return 20 + options.size(); }
  bool has(std::uint8_t f) const { return (flags & f) == f; }
  bool is_syn() const { return has(tcp_flags::kSyn) && !has(tcp_flags::kAck); }
  bool is_synack() const { return has(tcp_flags::kSyn | tcp_flags::kAck); }

  std::optional<TcpTimestamp> timestamp() const;
  // Rewrites an existing timestamp option in place; returns false if absent.
  bool set_timestamp(const TcpTimestamp& ts);
};

// Parsed Ethernet -> IPv4 -> {TCP | GRE -> IPv4 -> TCP | opaque L4}.
struct PacketView {
  EthernetHeader eth;
  Ipv4Header ip;
  std::optional<GreHeader> gre;
  std::optional<Ipv4Header> inner_ip;
  std::optional<TcpHeader> tcp;
  std::vector<std::uint8_t> payload;  // TCP payload, or the raw L4 bytes when tcp is absent
  std::vector<std::uint8_t> trailer;  // link-layer padding after the outer IP datagram
  friend bool operator==(const PacketView&, const PacketView&) = default;

  // The IPv4 header that carries the transport segment.
  const Ipv4Header& l4_ip() const { return inner_ip ? *inner_ip : ip; }
  Ipv4Header& l4_ip() { return inner_ip ? *inner_ip : ip; }
  std::optional<TcpTimestamp> ts_option() const {
    return tcp ? tcp->timestamp() : std::nullopt;
  }
};

// ---------------------------------------------------------------------------
// Byte helpers

namespace wire {

inline std::uint16_t load16(std::span<const std::uint8_t> b, std::size_t off) {
  return static_cast<std::uint16_t>((b[off] << 8) | b[off + 1]);
}
inline std::uint32_t load32(std::span<const std::uint8_t> b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}
inline void put16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}
inline void put32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  put16(out, static_cast<std::uint16_t>(v >> 16));
  put16(out, static_cast<std::uint16_t>(v));
}
inline void store16(std::vector<std::uint8_t>& out, std::size_t off, std::uint16_t v) {
  out[off] = static_cast<std::uint8_t>(v >> 8);
  out[off + 1] = static_cast<std::uint8_t>(v);
}

// One's-complement sum folded to 16 bits, seeded with `initial`.
inline std::uint16_t internet_checksum(std::span<const std::uint8_t> data, std::uint32_t initial = 0) {
  std::uint64_t sum = initial;
  std::size_t i = 0;
  for (; i + 1 < data.size(); i += 2) sum += (std::uint32_t{data[i]} << 8) | data[i + 1];
  if (i < data.size()) sum += std::uint32_t{data[i]} << 8;
  while (sum >> 16) sum = (sum & 0xffff) + (sum >> 16);
  return static_cast<std::uint16_t>(~sum & 0xffff);
}

inline std::uint32_t pseudo_header_sum(const Ipv4Header& ip, std::size_t l4_length) {
  return (ip.src >> 16) + (ip.src & 0xffff) + (ip.dst >> 16) + (ip.dst & 0xffff) +
         std::uint32_t{ip.protocol} + static_cast<std::uint32_t>(l4_length);
}

}  // namespace wire

// ---------------------------------------------------------------------------
// TCP timestamp option (kind 8, length 10)

namespace detail {

// Offset of the timestamp option inside `options`, if well-formed and present.
inline std::optional<std::size_t> find_timestamp(std::span<const std::uint8_t> options) {
  std::size_t i = 0;
  while (i < options.size()) {
    const std::uint8_t kind = options[i];
    if (kind == 0) break;
    if (kind == 1) {
      ++i;
      continue;
    }
    if (i + 1 >= options.size()) break;
    const std::uint8_t len = options[i + 1];
    if (len < 2 || i + len > options.size()) break;
    if (kind == 8 && len == 10) return i;
    i += len;
  }
  return std::nullopt;
}

}  // namespace detail

inline std::optional<TcpTimestamp> TcpHeader::timestamp() const {
  const auto off = detail::find_timestamp(options);
  if (!off) return std::nullopt;
  return TcpTimestamp{wire::load32(options, *off + 2), wire::load32(options, *off + 6)};
}

inline bool TcpHeader::set_timestamp(const TcpTimestamp& ts) {
  const auto off = detail::find_timestamp(options);
  if (!off) return false;
  for (int k = 0; k < 4; ++k) {
    options[*off + 2 + k] = static_cast<std::uint8_t>(ts.tsval >> (24 - 8 * k));
    options[*off + 6 + k] = static_cast<std::uint8_t>(ts.tsecr >> (24 - 8 * k));
  }
  return true;
}

// NOP, NOP, TS(kind 8, len 10): the 12-byte layout most stacks emit.
inline std::vector<std::uint8_t> timestamp_option_bytes(const TcpTimestamp& ts) {
  std::vector<std::uint8_t> out{1, 1, 8, 10};
  wire::put32(out, ts.tsval);
  wire::put32(out, ts.tsecr);
  return out;
}

// ---------------------------------------------------------------------------
// Server id in the high bits of TSval

inline void check_id_bits(unsigned id_bits) {
  if (id_bits < 1 || id_bits > kMaxIdBits) throw EncodingError("id_bits must be in [1, 8]");
}

inline std::uint32_t stamp_server_id(std::uint32_t tsval, ServerId id, unsigned id_bits) {
  check_id_bits(id_bits);
  if (id.value() >= (1u << id_bits))
    throw EncodingError("server id " + std::to_string(id.value()) + " does not fit in " +
                        std::to_string(id_bits) + " bits");
  const unsigned low_bits = 32 - id_bits;
  const std::uint32_t low_mask = (std::uint32_t{1} << low_bits) - 1;
  return (id.value() << low_bits) | (tsval & low_mask);
}

inline ServerId extract_server_id(std::uint32_t ts, unsigned id_bits) {
  check_id_bits(id_bits);
  return ServerId(ts >> (32 - id_bits));
}

// ---------------------------------------------------------------------------
// Load feedback in the GRE key: (g_q << 16) | v_q, v_q in 8.8 fixed point.

struct Feedback {
  std::uint16_t g_q = 0;
  std::uint16_t v_q = 0;
  friend bool operator==(const Feedback&, const Feedback&) = default;

  double g() const { return g_q; }
  double v() const { return v_q / 256.0; }
  std::uint32_t key() const { return (std::uint32_t{g_q} << 16) | v_q; }
};

inline constexpr double kFeedbackMaxG = 65535.0;
inline constexpr double kFeedbackMaxV = 65535.0 / 256.0;  // 255.99609375

inline Feedback quantize_feedback(double g, double v) {
  const double gc = std::isnan(g) ? 0.0 : std::clamp(g, 0.0, kFeedbackMaxG);
  const double vc = std::isnan(v) ? 0.0 : std::clamp(v, 0.0, kFeedbackMaxV);
  return {static_cast<std::uint16_t>(std::lround(gc)),
          static_cast<std::uint16_t>(std::lround(vc * 256.0))};
}

inline std::uint32_t encode_feedback(double g, double v) { return quantize_feedback(g, v).key(); }

inline Feedback decode_feedback(std::uint32_t key) {
  return {static_cast<std::uint16_t>(key >> 16), static_cast<std::uint16_t>(key & 0xffff)};
}

// ---------------------------------------------------------------------------
// Parsing

namespace detail {

inline void need(std::span<const std::uint8_t> b, std::size_t off, std::size_t n, const char* what) {
  if (off + n > b.size()) throw ParseError(ParseErrc::kTruncated, off, std::string("truncated ") + what);
}

// Parses an IPv4 header at `off`; returns the datagram end offset.
inline std::size_t parse_ipv4(std::span<const std::uint8_t> b, std::size_t off, Ipv4Header& ip) {
  need(b, off, 20, "IPv4 header");
  const std::uint8_t vihl = b[off];
  if ((vihl >> 4) != 4) throw ParseError(ParseErrc::kUnsupported, off, "not IPv4");
  const std::size_t ihl = (vihl & 0x0f) * 4u;
  if (ihl < 20) throw ParseError(ParseErrc::kMalformed, off, "IPv4 IHL below 5");
  need(b, off, ihl, "IPv4 options");
  ip.tos = b[off + 1];
  ip.total_length = wire::load16(b, off + 2);
  ip.id = wire::load16(b, off + 4);
  ip.flags_fragment = wire::load16(b, off + 6);
  ip.ttl = b[off + 8];
  ip.protocol = b[off + 9];
  ip.checksum = wire::load16(b, off + 10);
  ip.src = wire::load32(b, off + 12);
  ip.dst = wire::load32(b, off + 16);
  ip.options.assign(b.begin() + off + 20, b.begin() + off + ihl);
  if (ip.total_length < ihl) throw ParseError(ParseErrc::kMalformed, off + 2, "IPv4 total length");
  need(b, off, ip.total_length, "IPv4 datagram");
  if ((ip.flags_fragment & 0x3fff) != 0)
    throw ParseError(ParseErrc::kUnsupported, off + 6, "IPv4 fragment");
  return off + ip.total_length;
}

inline void parse_tcp(std::span<const std::uint8_t> b, std::size_t off, std::size_t end,
                      TcpHeader& tcp, std::vector<std::uint8_t>& payload) {
  if (off + 20 > end) throw ParseError(ParseErrc::kTruncated, off, "truncated TCP header");
  tcp.src_port = wire::load16(b, off);
  tcp.dst_port = wire::load16(b, off + 2);
  tcp.seq = wire::load32(b, off + 4);
  tcp.ack = wire::load32(b, off + 8);
  const std::size_t doff = (b[off + 12] >> 4) * 4u;
  tcp.reserved_ns = b[off + 12] & 0x0f;
  tcp.flags = b[off + 13];
  tcp.window = wire::load16(b, off + 14);
  tcp.checksum = wire::load16(b, off + 16);
  tcp.urgent = wire::load16(b, off + 18);
  if (doff < 20) throw ParseError(ParseErrc::kMalformed, off + 12, "TCP data offset below 5");
  if (off + doff > end) throw ParseError(ParseErrc::kTruncated, off, "truncated TCP options");
  tcp.options.assign(b.begin() + off + 20, b.begin() + off + doff);
  payload.assign(b.begin() + off + doff, b.begin() + end);
}

inline void parse_l4(std::span<const std::uint8_t> b, std::size_t off, std::size_t end,
                     const Ipv4Header& ip, PacketView& view) {
  if (ip.protocol == kProtoTcp) {
    view.tcp.emplace();
    parse_tcp(b, off, end, *view.tcp, view.payload);
  } else {
    view.payload.assign(b.begin() + off, b.begin() + end);
  }
}

}  // namespace detail

inline PacketView parse_packet(std::span<const std::uint8_t> bytes) {
  PacketView view;
  detail::need(bytes, 0, 14, "Ethernet header");
  std::copy_n(bytes.begin(), 6, view.eth.dst.begin());
  std::copy_n(bytes.begin() + 6, 6, view.eth.src.begin());
  view.eth.ethertype = wire::load16(bytes, 12);
  if (view.eth.ethertype != kEtherTypeIpv4)
    throw ParseError(ParseErrc::kUnsupported, 12, "unsupported ethertype");

  std::size_t off = 14;
  const std::size_t end = detail::parse_ipv4(bytes, off, view.ip);
  off += view.ip.header_length();
  view.trailer.assign(bytes.begin() + end, bytes.end());

  if (view.ip.protocol != kProtoGre) {
    detail::parse_l4(bytes, off, end, view.ip, view);
    return view;
  }

  GreHeader gre;
  if (off + 4 > end) throw ParseError(ParseErrc::kTruncated, off, "truncated GRE header");
  const std::uint16_t fv = wire::load16(bytes, off);
  gre.protocol = wire::load16(bytes, off + 2);
  gre.checksum_present = (fv & 0x8000) != 0;
  gre.flags_version = fv & static_cast<std::uint16_t>(~0xb000);
  if ((fv & 0x0007) != 0) throw ParseError(ParseErrc::kUnsupported, off, "GRE version");
  std::size_t p = off + 4;
  if (gre.checksum_present) {
    if (p + 4 > end) throw ParseError(ParseErrc::kTruncated, p, "truncated GRE checksum");
    gre.checksum = wire::load16(bytes, p);
    gre.reserved1 = wire::load16(bytes, p + 2);
    p += 4;
  }
  if (fv & 0x2000) {
    if (p + 4 > end) throw ParseError(ParseErrc::kTruncated, p, "truncated GRE key");
    gre.key = wire::load32(bytes, p);
    p += 4;
  }
  if (fv & 0x1000) {
    if (p + 4 > end) throw ParseError(ParseErrc::kTruncated, p, "truncated GRE sequence");
    gre.sequence = wire::load32(bytes, p);
    p += 4;
  }
  if (gre.protocol != kEtherTypeIpv4)
    throw ParseError(ParseErrc::kUnsupported, off + 2, "GRE payload is not IPv4");
  view.gre = gre;

  view.inner_ip.emplace();
  const std::size_t inner_end = detail::parse_ipv4(bytes.first(end), p, *view.inner_ip);
  if (inner_end != end)
    throw ParseError(ParseErrc::kMalformed, p + 2, "inner IPv4 length disagrees with outer");
  p += view.inner_ip->header_length();
  detail::parse_l4(bytes, p, end, *view.inner_ip, view);
  return view;
}

inline PacketView parse_packet(const std::vector<std::uint8_t>& bytes) {
  return parse_packet(std::span<const std::uint8_t>(bytes));
}

// ---------------------------------------------------------------------------
// Serialization: lengths and every checksum are recomputed.

namespace detail {

inline void append_ipv4(std::vector<std::uint8_t>& out, const Ipv4Header& ip, std::size_t payload_len) {
  if (ip.options.size() % 4 != 0 || ip.options.size() > 40)
    throw EncodingError("IPv4 options must be a multiple of 4 bytes, at most 40");
  const std::size_t total = ip.header_length() + payload_len;
  if (total > 0xffff) throw EncodingError("IPv4 datagram too large");
  const std::size_t start = out.size();
  out.push_back(static_cast<std::uint8_t>(0x40 | (ip.header_length() / 4)));
  out.push_back(ip.tos);
  wire::put16(out, static_cast<std::uint16_t>(total));
  wire::put16(out, ip.id);
  wire::put16(out, ip.flags_fragment);
  out.push_back(ip.ttl);
  out.push_back(ip.protocol);
  wire::put16(out, 0);
  wire::put32(out, ip.src);
  wire::put32(out, ip.dst);
  out.insert(out.end(), ip.options.begin(), ip.options.end());
  const auto sum = wire::internet_checksum(std::span(out).subspan(start, ip.header_length()));
  wire::store16(out, start + 10, sum);
}

inline std::vector<std::uint8_t> l4_bytes(const PacketView& view, const Ipv4Header& ip) {
  std::vector<std::uint8_t> seg;
  if (!view.tcp) {
    seg = view.payload;
    return seg;
  }
  const TcpHeader& tcp = *view.tcp;
  if (tcp.options.size() % 4 != 0 || tcp.options.size() > 40)
    throw EncodingError("TCP options must be a multiple of 4 bytes, at most 40");
  seg.reserve(tcp.header_length() + view.payload.size());
  wire::put16(seg, tcp.src_port);
  wire::put16(seg, tcp.dst_port);
  wire::put32(seg, tcp.seq);
  wire::put32(seg, tcp.ack);
  seg.push_back(static_cast<std::uint8_t>(((tcp.header_length() / 4) << 4) | (tcp.reserved_ns & 0x0f)));
  seg.push_back(tcp.flags);
  wire::put16(seg, tcp.window);
  wire::put16(seg, 0);
  wire::put16(seg, tcp.urgent);
  seg.insert(seg.end(), tcp.options.begin(), tcp.options.end());
  seg.insert(seg.end(), view.payload.begin(), view.payload.end());
  wire::store16(seg, 16, wire::internet_checksum(seg, wire::pseudo_header_sum(ip, seg.size())));
  return seg;
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_packet(const PacketView& view) {
  if (view.gre.has_value() != view.inner_ip.has_value())
    throw EncodingError("GRE header and inner IPv4 header must come together");
  if (view.tcp && view.l4_ip().protocol != kProtoTcp)
    throw EncodingError("TCP header present but IPv4 protocol is not TCP");

  std::vector<std::uint8_t> out;
  out.reserve(128 + view.payload.size() + view.trailer.size());
  out.insert(out.end(), view.eth.dst.begin(), view.eth.dst.end());
  out.insert(out.end(), view.eth.src.begin(), view.eth.src.end());
  wire::put16(out, view.eth.ethertype);

  const std::vector<std::uint8_t> seg = detail::l4_bytes(view, view.l4_ip());
  if (!view.gre) {
    if (view.ip.protocol == kProtoGre) throw EncodingError("GRE protocol without GRE header");
    detail::append_ipv4(out, view.ip, seg.size());
    out.insert(out.end(), seg.begin(), seg.end());
  } else {
    if (view.ip.protocol != kProtoGre) throw EncodingError("GRE header but IPv4 protocol is not GRE");
    const GreHeader& gre = *view.gre;
    std::vector<std::uint8_t> g;
    std::uint16_t fv = gre.flags_version & static_cast<std::uint16_t>(~0xb000);
    if (gre.checksum_present) fv |= 0x8000;
    if (gre.key) fv |= 0x2000;
    if (gre.sequence) fv |= 0x1000;
    wire::put16(g, fv);
    wire::put16(g, gre.protocol);
    if (gre.checksum_present) {
      wire::put16(g, 0);
      wire::put16(g, gre.reserved1);
    }
    if (gre.key) wire::put32(g, *gre.key);
    if (gre.sequence) wire::put32(g, *gre.sequence);
    detail::append_ipv4(g, *view.inner_ip, seg.size());
    g.insert(g.end(), seg.begin(), seg.end());
    if (gre.checksum_present) wire::store16(g, 4, wire::internet_checksum(g));
    detail::append_ipv4(out, view.ip, g.size());
    out.insert(out.end(), g.begin(), g.end());
  }
  out.insert(out.end(), view.trailer.begin(), view.trailer.end());
  return out;
}

// ---------------------------------------------------------------------------
// Flow key and packet construction helpers

// 5-tuple of the transport segment (the inner one when GRE-encapsulated).
inline FlowKey flow_key_of(const PacketView& pkt) {
  if (!pkt.tcp) throw NotAFlowPacket();
  const Ipv4Header& ip = pkt.l4_ip();
  return {ip.src, ip.dst, ip.protocol, pkt.tcp->src_port, pkt.tcp->dst_port};
}

struct TcpPacketSpec {
  Ipv4Addr src = 0;
  Ipv4Addr dst = 0;
  std::uint16_t src_port = 0;
  std::uint16_t dst_port = 0;
  std::uint8_t flags = 0;
  std::uint32_t seq = 0;
  std::uint32_t ack = 0;
  std::optional<TcpTimestamp> timestamp;
  std::vector<std::uint8_t> payload;
};

inline PacketView make_tcp_packet(const TcpPacketSpec& spec) {
  PacketView v;
  v.eth.src = {0x02, 0, 0, 0, 0, 0x01};
  v.eth.dst = {0x02, 0, 0, 0, 0, 0x02};
  v.ip.src = spec.src;
  v.ip.dst = spec.dst;
  v.ip.protocol = kProtoTcp;
  TcpHeader tcp;
  tcp.src_port = spec.src_port;
  tcp.dst_port = spec.dst_port;
  tcp.flags = spec.flags;
  tcp.seq = spec.seq;
  tcp.ack = spec.ack;
  if (spec.timestamp) tcp.options = timestamp_option_bytes(*spec.timestamp);
  v.tcp = std::move(tcp);
  v.payload = spec.payload;
  return v;
}

inline PacketView encapsulate_gre(const PacketView& inner, Ipv4Addr outer_src, Ipv4Addr outer_dst,
                                  std::optional<std::uint32_t> key) {
  if (inner.gre) throw EncodingError("packet is already GRE-encapsulated");
  PacketView v;
  v.eth = inner.eth;
  v.ip.src = outer_src;
  v.ip.dst = outer_dst;
  v.ip.protocol = kProtoGre;
  v.gre.emplace();
  v.gre->key = key;
  v.inner_ip = inner.ip;
  v.tcp = inner.tcp;
  v.payload = inner.payload;
  return v;
}

inline PacketView decapsulate_gre(const PacketView& outer) {
  if (!outer.gre || !outer.inner_ip) throw EncodingError("packet is not GRE-encapsulated");
  PacketView v;
  v.eth = outer.eth;
  v.ip = *outer.inner_ip;
  v.tcp = outer.tcp;
  v.payload = outer.payload;
  return v;
}

}  // namespace charon
