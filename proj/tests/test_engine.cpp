#include <gtest/gtest.h>

#include <random>
#include <thread>

#include "charon/engine.hpp"

using namespace charon;

namespace {

const Ipv4Addr kVip = make_ipv4(10, 1, 0, 1);
const Ipv4Addr kLb = make_ipv4(10, 1, 0, 254);

std::vector<ServerDescriptor> pool(std::size_t n, double cap = 1.0) {
  return make_pool(std::vector<double>(n, cap));
}

FlowKey client_key(std::uint32_t i) {
  return {make_ipv4(192, 168, 0, 0) + (i >> 16), kVip, kProtoTcp, static_cast<std::uint16_t>(i), 80};
}

PacketView syn_for(const FlowKey& k, std::uint32_t tsval = 1) {
  return make_tcp_packet({k.src_ip, k.dst_ip, k.src_port, k.dst_port, tcp_flags::kSyn, 0, 0,
                          TcpTimestamp{tsval, 0}, {}});
}

PacketView synack_from(const Engine& e, ServerId s, const FlowKey& k, std::uint32_t tsval,
                       std::optional<std::uint32_t> key) {
  const PacketView inner = make_tcp_packet({k.dst_ip, k.src_ip, k.dst_port, k.src_port,
                                            tcp_flags::kSyn | tcp_flags::kAck, 0, 1,
                                            TcpTimestamp{tsval, 1}, {}});
  return encapsulate_gre(inner, e.ip_table().dip(s), kLb, key);
}

PacketView ack_echoing(const FlowKey& k, std::uint32_t tsecr) {
  return make_tcp_packet({k.src_ip, k.dst_ip, k.src_port, k.dst_port, tcp_flags::kAck, 1, 1,
                          TcpTimestamp{2, tsecr}, {}});
}

template <class T>
T as(const LbAction& a) {
  EXPECT_TRUE(std::holds_alternative<T>(a)) << describe(a);
  return std::get<T>(a);
}

// Searches for a flow whose two candidates are (a, b).
std::optional<FlowKey> key_with_candidates(const Engine& e, ServerId a, ServerId b) {
  for (std::uint32_t i = 0; i < 1'000'000; ++i) {
    const FlowKey k = client_key(i);
    if (e.candidates(k) == CandidatePair{a, b}) return k;
  }
  return std::nullopt;
}

}  // namespace

TEST(Engine, WorkedExampleEndToEnd) {
  Engine e(LbConfig{}, pool(4));
  const auto k = key_with_candidates(e, ServerId(0), ServerId(1));
  ASSERT_TRUE(k);
  e.scores().set(ServerId(0), 1, 2, 5);
  e.scores().set(ServerId(1), 3, 1, 7);
  const auto fwd = as<ForwardToServer>(e.dispatch(syn_for(*k), 8));
  EXPECT_EQ(fwd.server, ServerId(0));
  EXPECT_EQ(fwd.dip, e.ip_table().dip(ServerId(0)));
  EXPECT_EQ(e.scores().entry(ServerId(0)), (ScoreEntry{1, 2, 8}));
  EXPECT_EQ(e.scores().entry(ServerId(1)), (ScoreEntry{2, 1, 8}));
}

TEST(Engine, SinglePoolAlwaysServerZero) {
  LbConfig c;
  c.id_bits = 1;
  Engine e(c, pool(1));
  for (std::uint32_t i = 0; i < 100; ++i)
    EXPECT_EQ(as<ForwardToServer>(e.dispatch(syn_for(client_key(i)), i)).server, ServerId(0));
}

TEST(Engine, RetransmittedSynHasSameCandidates) {
  Engine e(LbConfig{}, pool(16));
  const FlowKey k = client_key(42);
  const auto c = e.candidates(k);
  const auto first = as<ForwardToServer>(e.dispatch(syn_for(k, 1), 1)).server;
  const auto again = as<ForwardToServer>(e.dispatch(syn_for(k, 9), 1)).server;
  EXPECT_EQ(e.candidates(k), c);
  EXPECT_TRUE(first == c.first || first == c.second);
  EXPECT_TRUE(again == c.first || again == c.second);
}

TEST(Engine, SynackFeedbackAndStamping) {
  Engine e(LbConfig{}, pool(16));
  e.scores().set(ServerId(0), 50, 1, 0);
  const FlowKey k = client_key(7);
  const auto out = as<ForwardToClient>(
      e.dispatch(synack_from(e, ServerId(0), k, 0x02345678, encode_feedback(0, 2)), 3));
  EXPECT_EQ(out.server, ServerId(0));
  EXPECT_EQ(e.scores().entry(ServerId(0)), (ScoreEntry{0, 2, 3}));
  EXPECT_FALSE(out.packet.gre);
  EXPECT_EQ(out.packet.ip.dst, k.src_ip);
  EXPECT_EQ(out.packet.ts_option()->tsval >> 28, 0u);

  const auto out15 = as<ForwardToClient>(
      e.dispatch(synack_from(e, ServerId(15), k, 0x01234567, encode_feedback(1, 1)), 4));
  EXPECT_EQ(out15.packet.ts_option()->tsval, 0xF1234567u);
}

TEST(Engine, FeedbackRoundTripThroughCodec) {
  Engine e(LbConfig{}, pool(16));
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> ug(0, 1000), uv(0, 200);
  for (int i = 0; i < 1000; ++i) {
    const double g = ug(rng), v = uv(rng);
    const ServerId s(static_cast<std::uint32_t>(rng() % 16));
    e.dispatch(synack_from(e, s, client_key(i), 5, encode_feedback(g, v)), i);
    const Feedback q = quantize_feedback(g, v);
    EXPECT_EQ(e.scores().entry(s), (ScoreEntry{q.g(), q.v(), static_cast<double>(i)}));
    EXPECT_LE(std::abs(e.scores().entry(s).v - v), 1.0 / 512);
  }
}

TEST(Engine, DropReasons) {
  Engine e(LbConfig{}, pool(16));
  const FlowKey k = client_key(1);
  // SYNACK without GRE
  const PacketView bare = make_tcp_packet({k.dst_ip, k.src_ip, 80, k.src_port,
                                           tcp_flags::kSyn | tcp_flags::kAck, 0, 1, TcpTimestamp{1, 1}, {}});
  EXPECT_EQ(as<Drop>(e.dispatch(bare, 0)).reason, DropReason::kNoFeedback);
  // GRE without key
  EXPECT_EQ(as<Drop>(e.dispatch(synack_from(e, ServerId(2), k, 1, std::nullopt), 0)).reason,
            DropReason::kNoFeedback);
  // GRE from an unknown source
  const PacketView stranger = encapsulate_gre(bare, make_ipv4(172, 16, 0, 9), kLb, 0);
  EXPECT_EQ(as<Drop>(e.dispatch(stranger, 0)).reason, DropReason::kUnknownServer);
  // established packet without timestamp
  const PacketView nots = make_tcp_packet({k.src_ip, k.dst_ip, k.src_port, 80, tcp_flags::kAck, 1, 1, {}, {}});
  EXPECT_EQ(as<Drop>(e.dispatch(nots, 0)).reason, DropReason::kNoCovertChannel);
  EXPECT_EQ(e.drops(DropReason::kNoFeedback), 2u);
  EXPECT_EQ(e.drops(DropReason::kUnknownServer), 1u);
  EXPECT_EQ(e.drops(DropReason::kNoCovertChannel), 1u);
}

TEST(Engine, StaleIdIsDropped) {
  Engine e(LbConfig{}, pool(10));
  EXPECT_EQ(as<Drop>(e.dispatch(ack_echoing(client_key(1), 0xC0000000), 0)).reason, DropReason::kStaleId);
  EXPECT_EQ(as<ForwardToServer>(e.dispatch(ack_echoing(client_key(1), 0x90000000), 0)).server, ServerId(9));
}

TEST(Engine, EstablishedBoundaryIds) {
  Engine e(LbConfig{}, pool(16));
  const auto f0 = as<ForwardToServer>(e.dispatch(ack_echoing(client_key(1), 0x02345678), 0));
  EXPECT_EQ(f0.dip, e.ip_table().dip(ServerId(0)));
  const auto f15 = as<ForwardToServer>(e.dispatch(ack_echoing(client_key(1), 0xF0000001), 0));
  EXPECT_EQ(f15.dip, e.ip_table().dip(ServerId(15)));
}

TEST(Engine, RawDispatch) {
  Engine e(LbConfig{}, pool(16));
  const FlowKey k = client_key(3);
  EXPECT_TRUE(std::holds_alternative<ForwardToServer>(e.process_packet(serialize_packet(syn_for(k)), 0)));
  EXPECT_TRUE(std::holds_alternative<ForwardToClient>(
      e.process_packet(serialize_packet(synack_from(e, ServerId(1), k, 9, 0x10100)), 1)));
  std::vector<std::uint8_t> arp(42, 0);
  arp[12] = 0x08;
  arp[13] = 0x06;
  EXPECT_EQ(as<Drop>(e.process_packet(arp, 2)).reason, DropReason::kUnsupported);
  EXPECT_EQ(as<Drop>(e.process_packet(std::vector<std::uint8_t>(10, 0), 2)).reason, DropReason::kParseError);
  EXPECT_EQ(as<Drop>(e.process_packet(std::vector<std::uint8_t>(60, 0), 2)).reason, DropReason::kUnsupported);
}

TEST(Engine, EstablishedPathTouchesNoLoadState) {
  Engine e(LbConfig{}, pool(16));
  e.scores().set(ServerId(3), 4, 1, 2);
  const auto before = e.scores().snapshot();
  const auto table = e.alias_table();
  for (std::uint32_t i = 0; i < 1000; ++i) e.dispatch(ack_echoing(client_key(i), (i % 16) << 28), 5);
  EXPECT_EQ(e.scores().snapshot(), before);
  EXPECT_EQ(e.alias_table(), table);
}

TEST(Engine, StateIsIndependentOfFlowCount) {
  Engine e(LbConfig{}, pool(16));
  const std::size_t footprint = e.state_footprint();
  for (std::uint32_t i = 0; i < 20000; ++i) e.dispatch(syn_for(client_key(i)), i * 1e-4);
  EXPECT_EQ(e.state_footprint(), footprint);
}

TEST(Engine, WeightedRefreshFollowsCapacities) {
  Engine e(LbConfig{}, make_pool(std::vector<double>{1, 1, 2, 2}));
  e.refresh(WeightMode::kStatic, 0);
  std::vector<std::size_t> first(4, 0);
  constexpr std::size_t draws = 100000;
  for (std::uint32_t i = 0; i < draws; ++i) ++first[e.candidates(client_key(i)).first];
  const double p[] = {1.0 / 6, 1.0 / 6, 1.0 / 3, 1.0 / 3};
  for (std::size_t i = 0; i < 4; ++i)
    EXPECT_NEAR(static_cast<double>(first[i]), draws * p[i], 3 * std::sqrt(draws * p[i] * (1 - p[i])));
}

TEST(Engine, RefreshWithSameWeightsIsIdempotent) {
  Engine e(LbConfig{}, make_pool(std::vector<double>{1, 2, 3, 4}));
  std::vector<CandidatePair> before;
  for (std::uint32_t i = 0; i < 1000; ++i) before.push_back(e.candidates(client_key(i)));
  e.refresh(WeightMode::kStatic, 1);
  for (std::uint32_t i = 0; i < 1000; ++i) EXPECT_EQ(e.candidates(client_key(i)), before[i]);
}

TEST(Engine, FailedRefreshKeepsOldTable) {
  Engine e(LbConfig{}, pool(4));
  const auto old = e.alias_table();
  EXPECT_THROW(e.refresh_weights(std::vector<double>{0, 0, 0, 0}, 1), DegenerateWeights);
  EXPECT_THROW(e.refresh_weights(std::vector<double>{1, 1}, 1), ConfigError);
  EXPECT_EQ(e.alias_table(), old);
}

TEST(Engine, DynamicWeightsFormula) {
  Engine e(LbConfig{}, pool(2));
  e.scores().set(ServerId(0), 1, 2, 0);
  e.scores().set(ServerId(1), 3, 1, 0);
  const auto w = e.dynamic_weights(1);
  EXPECT_DOUBLE_EQ(w[0], 2.0 / (1 + 0));
  EXPECT_DOUBLE_EQ(w[1], 1.0 / (1 + 2));
  e.reset_scores();
  EXPECT_EQ(e.dynamic_weights(1), e.static_weights());
}

TEST(Engine, PccSurvivesRebuildResetAndFeedback) {
  Engine e(LbConfig{}, pool(16));
  std::mt19937_64 rng(8);
  struct Flow {
    FlowKey key;
    ServerId server;
    std::uint32_t echoed;
  };
  std::vector<Flow> flows;
  double now = 0;
  for (std::uint32_t i = 0; i < 2000; ++i) {
    const FlowKey k = client_key(i);
    const ServerId s = as<ForwardToServer>(e.dispatch(syn_for(k), now += 1e-3)).server;
    const auto back = as<ForwardToClient>(
        e.dispatch(synack_from(e, s, k, static_cast<std::uint32_t>(rng()) >> 4, encode_feedback(1, 3)), now));
    flows.push_back({k, s, back.packet.ts_option()->tsval});
  }
  auto check = [&] {
    for (const auto& f : flows)
      ASSERT_EQ(as<ForwardToServer>(e.dispatch(ack_echoing(f.key, f.echoed), now)).server, f.server);
  };
  check();
  std::vector<double> w(16);
  for (auto& x : w) x = static_cast<double>(rng() % 100);
  w[0] += 1;
  e.refresh_weights(w, now);
  check();
  e.reset_scores();
  check();
  for (int i = 0; i < 5000; ++i)
    e.feedback(ServerId(static_cast<std::uint32_t>(rng() % 16)), static_cast<std::uint32_t>(rng()), now += 1e-6);
  check();
}

TEST(Engine, ConcurrentRefreshDuringSyns) {
  Engine e(LbConfig{}, pool(16));
  std::atomic<bool> stop{false};
  std::atomic<std::size_t> invalid{0}, decisions{0};
  std::thread refresher([&] {
    std::mt19937_64 rng(1);
    std::vector<double> w(16);
    while (!stop.load()) {
      for (auto& x : w) x = static_cast<double>(rng() % 10);
      w[rng() % 16] += 1;
      e.refresh_weights(w, 0);
    }
  });
  std::vector<std::thread> workers;
  for (int t = 0; t < 3; ++t)
    workers.emplace_back([&, t] {
      for (std::uint32_t i = 0; i < 20000; ++i) {
        const auto a = e.dispatch(syn_for(client_key(i + 100000u * t)), 1.0);
        const auto* f = std::get_if<ForwardToServer>(&a);
        if (!f || f->server.value() >= 16) ++invalid;
        ++decisions;
      }
    });
  for (auto& w : workers) w.join();
  stop = true;
  refresher.join();
  EXPECT_EQ(invalid.load(), 0u);
  EXPECT_EQ(decisions.load(), 60000u);
}

TEST(Engine, FixedPointEngineMatchesWorkedExample) {
  FixedEngine fe(LbConfig{}, pool(4));
  Engine re(LbConfig{}, pool(4));
  const auto k = key_with_candidates(re, ServerId(0), ServerId(1));
  ASSERT_TRUE(k);
  fe.scores().set(ServerId(0), 1, 2, 5);
  fe.scores().set(ServerId(1), 3, 1, 7);
  EXPECT_EQ(as<ForwardToServer>(fe.dispatch(syn_for(*k), 8)).server, ServerId(0));
  EXPECT_EQ(fe.scores().entry(ServerId(0)), (ScoreEntry{1, 2, 8}));
}

TEST(Engine, ConfigValidation) {
  LbConfig c;
  c.id_bits = 3;
  EXPECT_THROW(Engine(c, pool(16)), ConfigError);
  auto dup = pool(3);
  dup[2].dip = dup[0].dip;
  EXPECT_THROW(Engine(LbConfig{}, dup), ConfigError);
}
