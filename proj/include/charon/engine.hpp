#pragma once

// Per-packet load-balancing pipeline.
//
//   SYN from client        -> two alias draws, lower decayed score wins,
//                             +1 unit task committed, forward to its DIP.
//   GRE SYNACK from server -> GRE key overwrites the server's score entry,
//                             decapsulate, stamp server id into TSval,
//                             forward to client.
//   anything else          -> server id from the high bits of the echoed
//                             TSecr, forward to its DIP. No table access.
//
// The only mutable state is the score table, the alias table and the IP
// table, all sized by the pool. Nothing is kept per flow.

#include <algorithm>
#include <array>
#include <atomic>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "charon/alias.hpp"
#include "charon/core.hpp"
#include "charon/packet.hpp"
#include "charon/score.hpp"

namespace charon {

class IpTable {
public:
  IpTable() = default;
  explicit IpTable(std::vector<ServerDescriptor> servers) : servers_(std::move(servers)) {
    if (servers_.empty() || servers_.size() > kMaxPoolSize)
      throw ConfigError("IP table size must be in [1, 256]");
    for (std::size_t i = 0; i < servers_.size(); ++i) {
      servers_[i].validate();
      if (servers_[i].server_id.value() != i) throw ConfigError("IP table ids must be 0..n-1 in order");
      if (!by_dip_.emplace(servers_[i].dip, servers_[i].server_id).second)
        throw ConfigError("duplicate DIP " + format_ipv4(servers_[i].dip));
    }
  }

  std::size_t size() const { return servers_.size(); }
  const ServerDescriptor& operator[](ServerId id) const { return servers_.at(id); }
  Ipv4Addr dip(ServerId id) const { return servers_.at(id).dip; }
  std::span<const ServerDescriptor> servers() const { return servers_; }

  std::optional<ServerId> find(Ipv4Addr dip) const {
    auto it = by_dip_.find(dip);
    if (it == by_dip_.end()) return std::nullopt;
    return it->second;
  }

private:
  std::vector<ServerDescriptor> servers_;
  std::unordered_map<Ipv4Addr, ServerId> by_dip_;
};

// Pool of `n` servers with DIPs base, base+1, ...
inline std::vector<ServerDescriptor> make_pool(std::span<const double> capacities,
                                               Ipv4Addr base_dip = make_ipv4(10, 2, 0, 1)) {
  std::vector<ServerDescriptor> pool;
  pool.reserve(capacities.size());
  for (std::size_t i = 0; i < capacities.size(); ++i)
    pool.push_back({ServerId(static_cast<std::uint32_t>(i)), base_dip + static_cast<Ipv4Addr>(i),
                    capacities[i], capacities[i]});
  return pool;
}

enum class DropReason : std::uint8_t {
  kParseError,
  kUnsupported,
  kNoFeedback,
  kUnknownServer,
  kNoCovertChannel,
  kStaleId,
  kServerTraffic,
};
inline constexpr std::size_t kDropReasonCount = 7;

inline const char* to_string(DropReason r) {
  switch (r) {
    case DropReason::kParseError: return "parse error";
    case DropReason::kUnsupported: return "unsupported";
    case DropReason::kNoFeedback: return "no feedback";
    case DropReason::kUnknownServer: return "unknown server";
    case DropReason::kNoCovertChannel: return "no covert channel";
    case DropReason::kStaleId: return "stale id";
    case DropReason::kServerTraffic: return "server traffic";
  }
  return "?";
}

struct ForwardToServer {
  ServerId server;
  Ipv4Addr dip = 0;
  PacketView packet;
};

struct ForwardToClient {
  ServerId server;
  PacketView packet;  // decapsulated, id-stamped
};

struct Drop {
  DropReason reason;
};

using LbAction = std::variant<ForwardToServer, ForwardToClient, Drop>;

inline std::string describe(const LbAction& action) {
  struct Visitor {
    std::string operator()(const ForwardToServer& f) const {
      return "to-server id=" + std::to_string(f.server.value()) + " dip=" + format_ipv4(f.dip);
    }
    std::string operator()(const ForwardToClient& f) const {
      return "to-client id=" + std::to_string(f.server.value()) +
             " dst=" + format_ipv4(f.packet.ip.dst);
    }
    std::string operator()(const Drop& d) const { return std::string("drop ") + to_string(d.reason); }
  };
  return std::visit(Visitor{}, action);
}

enum class WeightMode { kStatic, kDynamic };

template <class Arith = RealScoreArith>
class BasicEngine {
public:
  BasicEngine(LbConfig config, std::vector<ServerDescriptor> servers)
      : config_(config), ip_table_(std::move(servers)), scores_(ip_table_.size()) {
    config_.pool_size = ip_table_.size();
    config_.validate();
    alias_weights_ = static_weights();
    alias_ = std::make_shared<const AliasTable>(build_alias_table(alias_weights_));
  }

  const LbConfig& config() const { return config_; }
  const IpTable& ip_table() const { return ip_table_; }
  BasicScoreTable<Arith>& scores() { return scores_; }
  const BasicScoreTable<Arith>& scores() const { return scores_; }

  std::shared_ptr<const AliasTable> alias_table() const {
    std::lock_guard lock(alias_mu_);
    return alias_;
  }

  std::vector<double> static_weights() const {
    std::vector<double> w;
    for (const auto& s : ip_table_.servers()) w.push_back(s.static_weight);
    return w;
  }

  // weight_i = v_i / (1 + g'_i); falls back to static weights if all vanish.
  std::vector<double> dynamic_weights(double now) const {
    std::vector<double> w;
    double total = 0.0;
    for (std::size_t i = 0; i < ip_table_.size(); ++i) {
      const ServerId id(static_cast<std::uint32_t>(i));
      const ScoreEntry e = scores_.entry(id);
      w.push_back(e.v / (1.0 + decayed_score(e, std::max(now, e.t))));
      total += w.back();
    }
    return total > 0.0 ? w : static_weights();
  }

  // Builds a new alias table and swaps it in; on error the old one stays.
  // Unchanged weights keep the current table.
  void refresh_weights(std::span<const double> weights, double /*now*/) {
    if (weights.size() != ip_table_.size()) throw ConfigError("weight vector size != pool size");
    {
      std::lock_guard lock(alias_mu_);
      if (std::equal(weights.begin(), weights.end(), alias_weights_.begin(), alias_weights_.end())) return;
    }
    auto fresh = std::make_shared<const AliasTable>(build_alias_table(weights));
    std::lock_guard lock(alias_mu_);
    alias_ = std::move(fresh);
    alias_weights_.assign(weights.begin(), weights.end());
  }

  void refresh(WeightMode mode, double now) {
    const auto w = mode == WeightMode::kStatic ? static_weights() : dynamic_weights(now);
    refresh_weights(w, now);
  }

  CandidatePair candidates(const FlowKey& key) const {
    return two_choices(key, *alias_table(), {config_.hash_seed0, config_.hash_seed1});
  }

  // Read-compare-commit for a new flow.
  ServerId select(const FlowKey& key, double now) {
    const CandidatePair c = candidates(key);
    return scores_.select_and_commit(c.first, c.second, now);
  }

  // Overwrites the server's entry with the feedback carried in a GRE key.
  void feedback(ServerId server, std::uint32_t gre_key, double now) {
    const Feedback fb = decode_feedback(gre_key);
    scores_.apply_feedback(server, fb.g(), fb.v(), now);
  }

  LbAction handle_syn(const PacketView& pkt, double now) {
    if (!pkt.tcp || pkt.gre) return drop(DropReason::kParseError);
    if (!pkt.tcp->is_syn()) return drop(DropReason::kUnsupported);
    const ServerId chosen = select(flow_key_of(pkt), now);
    return ForwardToServer{chosen, ip_table_.dip(chosen), pkt};
  }

  LbAction handle_synack(const PacketView& pkt, double now) {
    if (!pkt.gre || !pkt.tcp) return drop(DropReason::kNoFeedback);
    const auto server = ip_table_.find(pkt.ip.src);
    if (!server) return drop(DropReason::kUnknownServer);
    if (!pkt.gre->key) return drop(DropReason::kNoFeedback);
    if (!pkt.tcp->is_synack()) return drop(DropReason::kServerTraffic);
    feedback(*server, *pkt.gre->key, now);

    PacketView out = decapsulate_gre(pkt);
    const auto ts = out.tcp->timestamp();
    if (!ts) return drop(DropReason::kNoCovertChannel);
    out.tcp->set_timestamp({stamp_server_id(ts->tsval, *server, config_.id_bits), ts->tsecr});
    return ForwardToClient{*server, std::move(out)};
  }

  // Established-flow path: reads only the covert channel and the IP table.
  LbAction handle_established(const PacketView& pkt) const {
    if (!pkt.tcp) return drop(DropReason::kParseError);
    const auto ts = pkt.tcp->timestamp();
    if (!ts) return drop(DropReason::kNoCovertChannel);
    const ServerId id = extract_server_id(ts->tsecr, config_.id_bits);
    if (id.value() >= ip_table_.size()) return drop(DropReason::kStaleId);
    return ForwardToServer{id, ip_table_.dip(id), pkt};
  }

  LbAction process_packet(std::span<const std::uint8_t> bytes, double now) {
    PacketView pkt;
    try {
      pkt = parse_packet(bytes);
    } catch (const ParseError& e) {
      return drop(e.code() == ParseErrc::kTruncated ? DropReason::kParseError
                                                    : DropReason::kUnsupported);
    }
    return dispatch(pkt, now);
  }

  LbAction dispatch(const PacketView& pkt, double now) {
    if (!pkt.tcp) return drop(DropReason::kUnsupported);
    if (pkt.gre) return handle_synack(pkt, now);
    if (ip_table_.find(pkt.ip.src)) return drop(DropReason::kServerTraffic);
    if (pkt.tcp->is_syn()) return handle_syn(pkt, now);
    if (pkt.tcp->is_synack()) return drop(DropReason::kNoFeedback);
    return handle_established(pkt);
  }

  // Simulated LB restart: load predictions are lost, nothing else is.
  void reset_scores() { scores_.reset(); }

  std::uint64_t drops(DropReason r) const {
    return drop_counts_[static_cast<std::size_t>(r)].load(std::memory_order_relaxed);
  }

  // Bytes of mutable lookup state; independent of the number of flows seen.
  std::size_t state_footprint() const {
    return scores_.footprint_bytes() + alias_table()->size() * sizeof(AliasEntry) +
           ip_table_.size() * sizeof(ServerDescriptor);
  }

private:
  Drop drop(DropReason r) const {
    drop_counts_[static_cast<std::size_t>(r)].fetch_add(1, std::memory_order_relaxed);
    return Drop{r};
  }

  LbConfig config_;
  IpTable ip_table_;
  BasicScoreTable<Arith> scores_;
  mutable std::mutex alias_mu_;
  std::shared_ptr<const AliasTable> alias_;
  std::vector<double> alias_weights_;
  mutable std::array<std::atomic<std::uint64_t>, kDropReasonCount> drop_counts_{};
};

using Engine = BasicEngine<RealScoreArith>;
using FixedEngine = BasicEngine<FixedScoreArith>;

}  // namespace charon
