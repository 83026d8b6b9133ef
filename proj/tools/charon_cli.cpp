// Command-line front end: experiment reproduction, engine benchmark and
// pcap replay. Exit codes: 0 success, 1 usage/config error, 2 runtime error.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "charon/engine.hpp"
#include "charon/experiments.hpp"
#include "charon/pcap.hpp"

namespace {

using namespace charon;

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::size_t> episodes;
  std::optional<std::size_t> servers;
  std::optional<std::size_t> flows;
  std::optional<std::string> policy;
  std::optional<std::string> loads;
  std::optional<unsigned> threads;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "Config file (key = value, [section] per command)");
  cmd->add_option("--seed", f.seed, "RNG seed");
  cmd->add_option("--out", f.out, "Output directory");
  cmd->add_option("--episodes", f.episodes, "Episodes per cell");
  cmd->add_option("--servers", f.servers, "Number of application servers");
  cmd->add_option("--flows", f.flows, "Flows per episode");
  cmd->add_option("--policy", f.policy, "Policy or comma-separated policy list");
  cmd->add_option("--loads", f.loads, "Comma-separated offered loads");
  cmd->add_option("--threads", f.threads, "Worker threads (0 = all cores)");
}

ExperimentSpec build_spec(const std::string& scenario, const CommonFlags& f) {
  ExperimentSpec spec;
  spec.scenario = scenario;
  if (!f.config.empty()) apply_config_file(spec, f.config, scenario);
  if (f.seed) spec.sim.rng_seed = *f.seed;
  if (f.out) spec.out_dir = *f.out;
  if (f.episodes) spec.sim.episodes = *f.episodes;
  if (f.servers) {
    spec.sim.num_servers = *f.servers;
    spec.bench_servers = *f.servers;
  }
  if (f.flows) spec.sim.num_flows = *f.flows;
  if (f.policy) apply_setting(spec, "policies", *f.policy);
  if (f.loads) apply_setting(spec, "loads", *f.loads);
  if (f.threads) spec.threads = *f.threads;
  return spec;
}

int replay_pcap(const std::string& path, std::size_t servers, unsigned id_bits) {
  std::vector<double> caps(servers, 1.0);
  LbConfig lb;
  lb.pool_size = servers;
  lb.id_bits = id_bits;
  Engine engine(lb, make_pool(caps));
  const PcapFile file = read_pcap(path);
  std::size_t index = 0;
  for (const PcapRecord& rec : file.records) {
    const double t = rec.timestamp(file.nanosecond);
    const LbAction action = engine.process_packet(rec.data, t);
    std::printf("%zu %.6f %s\n", index++, t, describe(action).c_str());
  }
  return 0;
}

// Writes a handshake trace: client SYN, server GRE SYNACK, client ACK per flow.
int synth_pcap(const std::string& path, std::size_t flows, std::size_t servers, std::uint64_t seed) {
  std::vector<double> caps(servers, 1.0);
  LbConfig lb;
  lb.pool_size = servers;
  lb.id_bits = servers <= 16 ? 4 : kMaxIdBits;
  Engine engine(lb, make_pool(caps));
  std::mt19937_64 rng(seed);
  std::vector<PcapRecord> records;
  std::uint32_t usec = 0;
  const auto record = [&](const PacketView& v) {
    PcapRecord r;
    r.ts_sec = usec / 1'000'000;
    r.ts_frac = usec % 1'000'000;
    r.data = serialize_packet(v);
    records.push_back(std::move(r));
    usec += 100;
  };
  const Ipv4Addr lb_addr = make_ipv4(10, 1, 0, 254);
  for (std::size_t i = 0; i < flows; ++i) {
    const std::uint64_t r = rng();
    TcpPacketSpec syn;
    syn.src = make_ipv4(192, 168, 0, 0) | static_cast<Ipv4Addr>(r & 0xffff);
    syn.dst = kSimVip;
    syn.src_port = static_cast<std::uint16_t>(1024 + (r >> 16) % 60000);
    syn.dst_port = 80;
    syn.flags = tcp_flags::kSyn;
    syn.seq = static_cast<std::uint32_t>(r >> 32);
    syn.timestamp = TcpTimestamp{1000 + static_cast<std::uint32_t>(i), 0};
    const PacketView syn_pkt = make_tcp_packet(syn);
    record(syn_pkt);
    const auto fwd = std::get<ForwardToServer>(engine.dispatch(syn_pkt, usec * 1e-6));

    TcpPacketSpec synack;
    synack.src = kSimVip;
    synack.dst = syn.src;
    synack.src_port = 80;
    synack.dst_port = syn.src_port;
    synack.flags = tcp_flags::kSyn | tcp_flags::kAck;
    synack.seq = static_cast<std::uint32_t>(rng());
    synack.ack = syn.seq + 1;
    synack.timestamp = TcpTimestamp{static_cast<std::uint32_t>(rng()) >> lb.id_bits, syn.timestamp->tsval};
    record(encapsulate_gre(make_tcp_packet(synack), fwd.dip, lb_addr, encode_feedback(1.0, 2.0)));
    const ServerId id = fwd.server;

    TcpPacketSpec ack = syn;
    ack.flags = tcp_flags::kAck;
    ack.seq = syn.seq + 1;
    ack.ack = synack.seq + 1;
    ack.timestamp = TcpTimestamp{syn.timestamp->tsval + 1, stamp_server_id(synack.timestamp->tsval, id, lb.id_bits)};
    record(make_tcp_packet(ack));
  }
  write_pcap(path, records);
  std::printf("wrote %zu packets to %s\n", records.size(), path.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stateless load-aware load balancer: simulator, experiments and packet replay"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));

  CommonFlags ft_flags, cdf_flags, sweep_flags, bench_flags;
  auto* ft = app.add_subcommand("fairness-table", "Jain index per (load, policy) cell");
  add_common(ft, ft_flags);
  auto* cdf = app.add_subcommand("fct-cdf", "FCT CDFs per load level and a percentile summary");
  add_common(cdf, cdf_flags);
  auto* sweep = app.add_subcommand("interval-sweep", "W-SAPP FCT across alias refresh intervals");
  add_common(sweep, sweep_flags);
  std::optional<std::size_t> bench_packets;
  auto* bench = app.add_subcommand("bench-engine", "Per-packet decision throughput and latency");
  add_common(bench, bench_flags);
  bench->add_option("--packets", bench_packets, "Packets to time");

  std::string pcap_path;
  std::size_t replay_servers = 16;
  unsigned replay_bits = 4;
  auto* replay = app.add_subcommand("replay-pcap", "Run a pcap file through the engine, one line per packet");
  replay->add_option("pcap", pcap_path, "Capture file")->required();
  replay->add_option("--servers", replay_servers, "Pool size");
  replay->add_option("--id-bits", replay_bits, "Timestamp bits carrying the server id");

  std::string synth_path;
  std::size_t synth_flows = 10, synth_servers = 16;
  std::uint64_t synth_seed = 1;
  auto* synth = app.add_subcommand("synth-pcap", "Write a synthetic handshake capture for replay-pcap");
  synth->add_option("pcap", synth_path, "Output file")->required();
  synth->add_option("--flows", synth_flows, "Number of handshakes");
  synth->add_option("--servers", synth_servers, "Pool size");
  synth->add_option("--seed", synth_seed, "RNG seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*ft) {
      const auto spec = build_spec("fairness-table", ft_flags);
      std::printf("%s\n", cmd_fairness_table(spec).string().c_str());
    } else if (*cdf) {
      const auto spec = build_spec("fct-cdf", cdf_flags);
      for (const auto& p : cmd_fct_cdf(spec)) std::printf("%s\n", p.string().c_str());
    } else if (*sweep) {
      const auto spec = build_spec("interval-sweep", sweep_flags);
      std::printf("%s\n", cmd_interval_sweep(spec).string().c_str());
    } else if (*bench) {
      auto spec = build_spec("bench-engine", bench_flags);
      if (bench_packets) spec.bench_packets = *bench_packets;
      const BenchReport r = bench_engine(spec);
      std::printf("packets            %zu (syn %zu, established %zu, dropped %zu)\n", r.packets, r.syn,
                  r.established, r.dropped);
      std::printf("elapsed            %.3f s\n", r.seconds);
      std::printf("decisions/second   %.0f\n", r.decisions_per_second);
      std::printf("latency p50/p99/p99.9  %.0f / %.0f / %.0f ns\n", r.p50_ns, r.p99_ns, r.p999_ns);
    } else if (*replay) {
      if (replay_servers == 0 || replay_servers > kMaxPoolSize) throw UsageError("--servers must be in [1, 256]");
      return replay_pcap(pcap_path, replay_servers, replay_bits);
    } else if (*synth) {
      if (synth_servers == 0 || synth_servers > kMaxPoolSize) throw UsageError("--servers must be in [1, 256]");
      return synth_pcap(synth_path, synth_flows, synth_servers, synth_seed);
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
