#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "charon/packet.hpp"
#include "charon/pcap.hpp"

using namespace charon;

namespace {

// Independent checksum verifier: summing a region that includes its own
// checksum field must give 0xffff.
bool ones_complement_ok(const std::vector<std::uint8_t>& b, std::size_t off, std::size_t len,
                        std::uint32_t extra = 0) {
  std::uint32_t sum = extra;
  for (std::size_t i = 0; i < len; ++i) sum += (i % 2 == 0) ? b[off + i] * 256u : b[off + i];
  while (sum > 0xffff) sum = (sum & 0xffff) + (sum >> 16);
  return sum == 0xffff;
}

std::uint32_t pseudo(const std::vector<std::uint8_t>& b, std::size_t ip_off, std::size_t l4_len) {
  std::uint32_t s = 0;
  for (std::size_t i = 12; i < 20; i += 2) s += b[ip_off + i] * 256u + b[ip_off + i + 1];
  return s + b[ip_off + 9] + static_cast<std::uint32_t>(l4_len);
}

void expect_valid_checksums(const std::vector<std::uint8_t>& b) {
  std::size_t ip = 14;
  for (int depth = 0; depth < 2; ++depth) {
    const std::size_t ihl = (b[ip] & 0x0f) * 4u;
    const std::size_t total = b[ip + 2] * 256u + b[ip + 3];
    EXPECT_TRUE(ones_complement_ok(b, ip, ihl)) << "IPv4 header checksum at " << ip;
    const std::uint8_t proto = b[ip + 9];
    if (proto == kProtoTcp) {
      EXPECT_TRUE(ones_complement_ok(b, ip + ihl, total - ihl, pseudo(b, ip, total - ihl)))
          << "TCP checksum";
      return;
    }
    if (proto != kProtoGre) return;
    const std::size_t gre = ip + ihl;
    std::size_t next = gre + 4;
    const bool csum = b[gre] & 0x80;
    if (csum) {
      EXPECT_TRUE(ones_complement_ok(b, gre, total - ihl)) << "GRE checksum";
      next += 4;
    }
    if (b[gre] & 0x20) next += 4;
    if (b[gre] & 0x10) next += 4;
    ip = next;
  }
}

PacketView random_view(std::mt19937_64& rng) {
  auto byte = [&] { return static_cast<std::uint8_t>(rng()); };
  auto bytes = [&](std::size_t n) {
    std::vector<std::uint8_t> v(n);
    for (auto& x : v) x = byte();
    return v;
  };
  PacketView v;
  for (auto& x : v.eth.src) x = byte();
  for (auto& x : v.eth.dst) x = byte();
  auto random_ip = [&](Ipv4Header& ip) {
    ip.tos = byte();
    ip.id = static_cast<std::uint16_t>(rng());
    ip.flags_fragment = (rng() % 2) ? 0x4000 : 0x0000;
    ip.ttl = byte();
    ip.src = static_cast<Ipv4Addr>(rng());
    ip.dst = static_cast<Ipv4Addr>(rng());
    if (rng() % 4 == 0) ip.options = bytes(4 * (1 + rng() % 3));
  };
  random_ip(v.ip);
  const int shape = static_cast<int>(rng() % 4);  // tcp, gre+tcp, udp-ish, gre+opaque
  const bool gre = shape == 1 || shape == 3;
  const bool tcp = shape <= 1;
  if (gre) {
    v.ip.protocol = kProtoGre;
    v.gre.emplace();
    v.gre->checksum_present = rng() % 2;
    if (v.gre->checksum_present) v.gre->reserved1 = static_cast<std::uint16_t>(rng());
    if (rng() % 4) v.gre->key = static_cast<std::uint32_t>(rng());
    if (rng() % 3 == 0) v.gre->sequence = static_cast<std::uint32_t>(rng());
    v.inner_ip.emplace();
    random_ip(*v.inner_ip);
  }
  Ipv4Header& l4ip = v.l4_ip();
  if (tcp) {
    l4ip.protocol = kProtoTcp;
    TcpHeader t;
    t.src_port = static_cast<std::uint16_t>(rng());
    t.dst_port = static_cast<std::uint16_t>(rng());
    t.seq = static_cast<std::uint32_t>(rng());
    t.ack = static_cast<std::uint32_t>(rng());
    t.reserved_ns = byte() & 0x0f;
    t.flags = byte();
    t.window = static_cast<std::uint16_t>(rng());
    t.urgent = static_cast<std::uint16_t>(rng());
    if (rng() % 3) {
      t.options = timestamp_option_bytes({static_cast<std::uint32_t>(rng()), static_cast<std::uint32_t>(rng())});
      if (rng() % 2) {
        const auto extra = std::vector<std::uint8_t>{2, 4, 0x05, 0xb4};  // MSS, kept opaque
        t.options.insert(t.options.begin(), extra.begin(), extra.end());
      }
    }
    v.tcp = t;
  } else {
    l4ip.protocol = kProtoUdp;
  }
  v.payload = bytes(rng() % 64);
  if (!gre && rng() % 5 == 0) v.trailer = std::vector<std::uint8_t>(rng() % 8, 0);
  return v;
}

const Ipv4Addr kClient = make_ipv4(192, 168, 1, 2);
const Ipv4Addr kVip = make_ipv4(10, 1, 0, 1);

}  // namespace

TEST(Stamp, Examples) {
  EXPECT_EQ(stamp_server_id(0x12345678, ServerId(0), 4), 0x02345678u);
  EXPECT_EQ(stamp_server_id(0x00000001, ServerId(15), 4), 0xF0000001u);
  EXPECT_EQ(stamp_server_id(0xFFFFFFFF, ServerId(3), 8), 0x03FFFFFFu);
  EXPECT_EQ(extract_server_id(0xF0000001, 4), ServerId(15));
  EXPECT_EQ(extract_server_id(0x02345678, 4), ServerId(0));
}

TEST(Stamp, RejectsOversizedIdAndBadBits) {
  EXPECT_THROW(stamp_server_id(0, ServerId(16), 4), EncodingError);
  EXPECT_THROW(stamp_server_id(0, ServerId(0), 0), EncodingError);
  EXPECT_THROW(stamp_server_id(0, ServerId(0), 9), EncodingError);
  EXPECT_THROW(extract_server_id(0, 9), EncodingError);
}

TEST(Stamp, RoundTripAllIdsAndLocality) {
  std::mt19937 rng(1);
  for (std::uint32_t id = 0; id < 16; ++id) {
    for (int k = 0; k < 1000; ++k) {
      const std::uint32_t ts = rng();
      const std::uint32_t s = stamp_server_id(ts, ServerId(id), 4);
      EXPECT_EQ(extract_server_id(s, 4), ServerId(id));
      EXPECT_EQ(s & 0x0fffffffu, ts & 0x0fffffffu);  // only the top nibble may change
    }
  }
}

TEST(Feedback, Examples) {
  EXPECT_EQ(encode_feedback(0, 0), 0u);
  EXPECT_EQ(decode_feedback(0), (Feedback{0, 0}));
  // Independent bit packing: g=3 -> 0x0003, v=1.5 -> 1.5*256 = 384 = 0x0180.
  const std::uint32_t expected = (3u << 16) | static_cast<std::uint32_t>(1.5 * 256);
  EXPECT_EQ(expected, 0x00030180u);
  EXPECT_EQ(encode_feedback(3, 1.5), expected);
  EXPECT_EQ(decode_feedback(expected).g(), 3.0);
  EXPECT_EQ(decode_feedback(expected).v(), 1.5);
  const Feedback sat = decode_feedback(encode_feedback(1e6, 300));
  EXPECT_EQ(sat.g(), 65535.0);
  EXPECT_EQ(sat.v(), 255.99609375);
  EXPECT_EQ(decode_feedback(encode_feedback(-4, -1)), (Feedback{0, 0}));
}

TEST(Feedback, QuantizationErrorBound) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, kFeedbackMaxV);
  for (int i = 0; i < 100000; ++i) {
    const double v = u(rng);
    EXPECT_LE(std::abs(decode_feedback(encode_feedback(10, v)).v() - v), 1.0 / 512.0);
  }
}

TEST(Parse, SynWithTimestampIs66Bytes) {
  const auto bytes = serialize_packet(make_tcp_packet(
      {kClient, kVip, 40000, 80, tcp_flags::kSyn, 1, 0, TcpTimestamp{0x11223344, 0}, {}}));
  EXPECT_EQ(bytes.size(), 66u);
  const PacketView v = parse_packet(bytes);
  ASSERT_TRUE(v.ts_option());
  EXPECT_EQ(v.ts_option()->tsval, 0x11223344u);
  EXPECT_EQ(v.ts_option()->tsecr, 0u);
  EXPECT_TRUE(v.tcp->is_syn());
  expect_valid_checksums(bytes);
}

TEST(Parse, GreSynackCarriesKey) {
  const PacketView inner = make_tcp_packet(
      {kVip, kClient, 80, 40000, tcp_flags::kSyn | tcp_flags::kAck, 9, 2, TcpTimestamp{5, 0x11223344}, {}});
  const auto bytes = serialize_packet(encapsulate_gre(inner, make_ipv4(10, 2, 0, 1), make_ipv4(10, 1, 0, 254), 0x00030180));
  const PacketView v = parse_packet(bytes);
  ASSERT_TRUE(v.gre && v.gre->key);
  EXPECT_EQ(*v.gre->key, 0x00030180u);
  EXPECT_TRUE(v.tcp->is_synack());
  EXPECT_EQ(v.l4_ip().src, kVip);
  expect_valid_checksums(bytes);
  EXPECT_EQ(serialize_packet(decapsulate_gre(v)), serialize_packet(inner));
}

TEST(Parse, ErrorsAreTyped) {
  const auto syn = serialize_packet(make_tcp_packet({kClient, kVip, 1, 80, tcp_flags::kSyn, 0, 0, {}, {}}));
  for (std::size_t cut : {0u, 10u, 20u, 40u, 53u}) {
    try {
      parse_packet(std::span(syn).first(cut));
      FAIL() << "accepted truncated packet of " << cut << " bytes";
    } catch (const ParseError& e) {
      EXPECT_EQ(e.code(), ParseErrc::kTruncated) << cut;
    }
  }
  std::vector<std::uint8_t> arp(42, 0);
  arp[12] = 0x08;
  arp[13] = 0x06;
  try {
    parse_packet(arp);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.code(), ParseErrc::kUnsupported);
    EXPECT_EQ(e.offset(), 12u);
  }
  auto v6 = syn;
  v6[14] = 0x60;
  EXPECT_THROW(parse_packet(v6), ParseError);
}

TEST(Parse, OptionsOtherThanTimestampStayOpaque) {
  PacketView v = make_tcp_packet({kClient, kVip, 1, 80, tcp_flags::kAck, 0, 0, TcpTimestamp{1, 2}, {}});
  v.tcp->options.insert(v.tcp->options.begin(), {2, 4, 0x05, 0xb4});
  const PacketView p = parse_packet(serialize_packet(v));
  EXPECT_EQ(p.tcp->options, v.tcp->options);
  EXPECT_EQ(p.ts_option(), (TcpTimestamp{1, 2}));
}

TEST(RoundTrip, RandomCorpus) {
  std::mt19937_64 rng(2718);
  for (int i = 0; i < 1000; ++i) {
    const PacketView v = random_view(rng);
    const auto bytes = serialize_packet(v);
    expect_valid_checksums(bytes);
    const PacketView p = parse_packet(bytes);
    EXPECT_EQ(serialize_packet(p), bytes) << "packet " << i;
    EXPECT_EQ(parse_packet(serialize_packet(p)), p) << "packet " << i;
    EXPECT_EQ(p.tcp.has_value(), v.tcp.has_value());
    EXPECT_EQ(p.payload, v.payload);
    if (v.gre) {
      EXPECT_EQ(p.gre->key, v.gre->key);
    }
  }
}

TEST(Pcap, WriteThenRead) {
  const auto path = std::filesystem::temp_directory_path() / "charon_test_roundtrip.pcap";
  std::vector<PcapRecord> recs;
  for (std::uint32_t i = 0; i < 3; ++i) {
    PcapRecord r;
    r.ts_sec = 100 + i;
    r.ts_frac = 250000 * i;
    r.data = serialize_packet(make_tcp_packet({kClient, kVip, static_cast<std::uint16_t>(1000 + i), 80,
                                               tcp_flags::kSyn, i, 0, TcpTimestamp{i, 0}, {}}));
    r.orig_len = static_cast<std::uint32_t>(r.data.size());
    recs.push_back(r);
  }
  write_pcap(path.string(), recs);
  const PcapFile f = read_pcap(path.string());
  std::filesystem::remove(path);
  ASSERT_EQ(f.records.size(), 3u);
  EXPECT_FALSE(f.nanosecond);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(f.records[i].data, recs[i].data);
    EXPECT_DOUBLE_EQ(f.records[i].timestamp(false), 100 + i + 0.25 * i);
  }
}

TEST(Pcap, MissingFileThrows) { EXPECT_THROW(read_pcap("/nonexistent/x.pcap"), PcapError); }
