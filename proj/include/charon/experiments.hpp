#pragma once

// Experiment runner behind the CLI: config parsing, the fairness table, FCT
// CDFs, the alias refresh interval sweep, and the engine benchmark.

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <mutex>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "charon/engine.hpp"
#include "charon/sim.hpp"

namespace charon {

inline constexpr const char* kVersion = "1.0.0";

class UsageError : public ConfigError {
public:
  using ConfigError::ConfigError;
};

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in{std::string(s)};
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline double parse_number(const std::string& key, const std::string& text) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    throw ConfigError(key + ": not a number: '" + text + "'");
  }
  if (used != text.size()) throw ConfigError(key + ": not a number: '" + text + "'");
  return v;
}

inline std::uint64_t parse_count(const std::string& key, const std::string& text) {
  if (text.empty() || text.find_first_not_of("0123456789") != std::string::npos)
    throw ConfigError(key + ": expected a non-negative integer, got '" + text + "'");
  try {
    return std::stoull(text);
  } catch (const std::exception&) {
    throw ConfigError(key + ": integer out of range: '" + text + "'");
  }
}

// "1s", "1000ms", "0.2ms", "500us", "250ns"; a bare number is seconds.
// Normalized to integer nanoseconds so equal durations compare equal.
inline std::chrono::nanoseconds parse_duration(std::string_view text) {
  const std::string s = trim(text);
  std::size_t split = s.size();
  while (split > 0 && std::isalpha(static_cast<unsigned char>(s[split - 1]))) --split;
  const std::string num = s.substr(0, split);
  const std::string unit = s.substr(split);
  double scale;
  if (unit.empty() || unit == "s")
    scale = 1e9;
  else if (unit == "ms")
    scale = 1e6;
  else if (unit == "us")
    scale = 1e3;
  else if (unit == "ns")
    scale = 1;
  else
    throw ConfigError("unknown duration unit '" + unit + "' in '" + s + "'");
  const double value = parse_number("duration", num);
  if (!(value > 0)) throw ConfigError("duration must be positive: '" + s + "'");
  return std::chrono::nanoseconds(std::llround(value * scale));
}

inline double to_seconds(std::chrono::nanoseconds d) { return static_cast<double>(d.count()) * 1e-9; }

inline std::string format_duration(std::chrono::nanoseconds d) {
  const auto ns = d.count();
  char buf[64];
  if (ns % 1'000'000'000 == 0)
    std::snprintf(buf, sizeof buf, "%llds", static_cast<long long>(ns / 1'000'000'000));
  else if (ns % 1'000 == 0 && ns < 1'000'000'000)
    std::snprintf(buf, sizeof buf, "%gms", static_cast<double>(ns) / 1e6);
  else
    std::snprintf(buf, sizeof buf, "%gs", static_cast<double>(ns) * 1e-9);
  return buf;
}

struct ExperimentSpec {
  std::string scenario;
  SimConfig sim;
  std::vector<double> loads{0.645, 0.765, 0.845, 0.925, 1.0};
  std::vector<Policy> policies{kAllPolicies.begin(), kAllPolicies.end()};
  std::vector<std::chrono::nanoseconds> intervals{
      std::chrono::microseconds(200), std::chrono::microseconds(500), std::chrono::milliseconds(1),
      std::chrono::seconds(1), std::chrono::seconds(2)};
  std::vector<double> sweep_loads{0.645, 0.925};
  std::size_t cdf_points = 1000;
  std::size_t bench_packets = 1'000'000;
  std::size_t bench_warmup = 10'000;
  std::size_t bench_servers = 16;
  unsigned threads = 0;  // 0: hardware concurrency
  std::filesystem::path out_dir = "results";

  // Canonical text of every field that influences results.
  std::string canonical() const {
    std::ostringstream o;
    o.precision(17);
    o << "scenario=" << scenario << ";lbs=" << sim.num_lbs << ";servers=" << sim.num_servers
      << ";base_capacity=" << sim.base_capacity << ";capacity_ratio=" << sim.capacity_ratio
      << ";flows=" << sim.num_flows << ";episodes=" << sim.episodes
      << ";mean_flow_duration=" << sim.mean_flow_duration << ";interval=" << sim.alias_update_interval
      << ";weight_mode=" << (sim.weight_mode == WeightMode::kStatic ? "static" : "dynamic")
      << ";server_model=" << (sim.server_model == ServerModel::kProcessorSharing ? "ps" : "fifo")
      << ";feedback_window=" << sim.feedback_window << ";seed=" << sim.rng_seed << ";loads=";
    for (double l : loads) o << l << ',';
    o << ";policies=";
    for (Policy p : policies) o << to_string(p) << ',';
    o << ";intervals=";
    for (auto d : intervals) o << d.count() << ',';
    o << ";sweep_loads=";
    for (double l : sweep_loads) o << l << ',';
    o << ";cdf_points=" << cdf_points;
    return o.str();
  }

  std::uint64_t config_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : canonical()) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    return h;
  }

  std::string metadata_line() const {
    char hash[32];
    std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(config_hash()));
    return "# charon-lb " + std::string(kVersion) + " scenario=" + scenario +
           " seed=" + std::to_string(sim.rng_seed) + " config_hash=" + hash;
  }
};

// ---------------------------------------------------------------------------
// Config files: "key = value" lines, optional [section] headers naming the
// command they apply to, '#' comments. Unknown keys and sections are errors.

inline const std::vector<std::string>& known_sections() {
  static const std::vector<std::string> s{"fairness-table", "fct-cdf", "interval-sweep", "bench-engine",
                                          "replay-pcap"};
  return s;
}

inline void apply_setting(ExperimentSpec& spec, const std::string& key, const std::string& value) {
  SimConfig& c = spec.sim;
  if (key == "num_lbs" || key == "lbs") {
    c.num_lbs = parse_count(key, value);
  } else if (key == "servers" || key == "num_servers") {
    c.num_servers = parse_count(key, value);
  } else if (key == "flows" || key == "num_flows") {
    c.num_flows = parse_count(key, value);
  } else if (key == "episodes") {
    c.episodes = parse_count(key, value);
  } else if (key == "mean_flow_duration") {
    c.mean_flow_duration = to_seconds(parse_duration(value));
  } else if (key == "base_capacity") {
    c.base_capacity = parse_number(key, value);
  } else if (key == "capacity_ratio") {
    c.capacity_ratio = parse_number(key, value);
  } else if (key == "load" || key == "offered_load") {
    c.offered_load = parse_number(key, value);
    spec.loads = {c.offered_load};
  } else if (key == "loads") {
    spec.loads.clear();
    for (const auto& v : split_list(value)) spec.loads.push_back(parse_number(key, v));
  } else if (key == "sweep_loads") {
    spec.sweep_loads.clear();
    for (const auto& v : split_list(value)) spec.sweep_loads.push_back(parse_number(key, v));
  } else if (key == "policy" || key == "policies") {
    spec.policies.clear();
    for (const auto& v : split_list(value)) {
      const auto p = parse_policy(v);
      if (!p) throw ConfigError("unknown policy '" + v + "'");
      spec.policies.push_back(*p);
    }
  } else if (key == "interval" || key == "alias_update_interval") {
    c.alias_update_interval = to_seconds(parse_duration(value));
  } else if (key == "intervals") {
    spec.intervals.clear();
    for (const auto& v : split_list(value)) spec.intervals.push_back(parse_duration(v));
  } else if (key == "weight_mode") {
    if (value == "static")
      c.weight_mode = WeightMode::kStatic;
    else if (value == "dynamic")
      c.weight_mode = WeightMode::kDynamic;
    else
      throw ConfigError("weight_mode must be static or dynamic");
  } else if (key == "server_model") {
    if (value == "ps")
      c.server_model = ServerModel::kProcessorSharing;
    else if (value == "fifo")
      c.server_model = ServerModel::kFifo;
    else
      throw ConfigError("server_model must be ps or fifo");
  } else if (key == "feedback_window") {
    c.feedback_window = parse_count(key, value);
  } else if (key == "seed") {
    c.rng_seed = parse_count(key, value);
  } else if (key == "cdf_points") {
    spec.cdf_points = parse_count(key, value);
  } else if (key == "packets") {
    spec.bench_packets = parse_count(key, value);
  } else if (key == "warmup") {
    spec.bench_warmup = parse_count(key, value);
  } else if (key == "bench_servers") {
    spec.bench_servers = parse_count(key, value);
  } else if (key == "threads") {
    spec.threads = static_cast<unsigned>(parse_count(key, value));
  } else if (key == "out") {
    spec.out_dir = value;
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

// Applies the global entries and those in the section named `scenario`.
inline void apply_config_text(ExperimentSpec& spec, const std::string& text, const std::string& scenario) {
  std::istringstream in(text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = "line " + std::to_string(lineno) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "unterminated section header");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      const auto& known = known_sections();
      if (std::find(known.begin(), known.end(), section) == known.end())
        throw ConfigError(where + "unknown section '" + section + "'");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    try {
      if (section.empty() || section == scenario) apply_setting(spec, key, value);
      else {
        ExperimentSpec scratch;  // other sections are still checked strictly
        apply_setting(scratch, key, value);
      }
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
}

inline void apply_config_file(ExperimentSpec& spec, const std::filesystem::path& path,
                              const std::string& scenario) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  try {
    apply_config_text(spec, buf.str(), scenario);
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Cell execution

struct CellResult {
  double load = 0;
  Policy policy = Policy::kEcmp;
  std::chrono::nanoseconds interval{0};
  std::vector<EpisodeMetrics> episodes;

  double mean_jain() const {
    double s = 0;
    for (const auto& e : episodes) s += e.jain;
    return s / static_cast<double>(episodes.size());
  }
  // Percentiles over the pooled samples of all episodes.
  FctSummary pooled_fct() const {
    std::vector<double> all;
    for (const auto& e : episodes) {
      const auto v = e.fct_values();
      all.insert(all.end(), v.begin(), v.end());
    }
    return fct_percentiles(all);
  }
  std::vector<double> pooled_sorted_fct() const {
    std::vector<double> all;
    for (const auto& e : episodes) {
      const auto v = e.fct_values();
      all.insert(all.end(), v.begin(), v.end());
    }
    std::sort(all.begin(), all.end());
    return all;
  }
};

inline SimConfig cell_config(const ExperimentSpec& spec, double load, Policy policy) {
  SimConfig c = spec.sim;
  c.offered_load = load;
  c.policy = policy;
  return c;
}

// Runs independent cells, optionally on worker threads. Results keep input order.
inline std::vector<CellResult> run_cells(const std::vector<CellResult>& cells_in,
                                         const std::vector<SimConfig>& configs, unsigned threads) {
  std::vector<CellResult> cells = cells_in;
  unsigned workers = threads ? threads : std::max(1u, std::thread::hardware_concurrency());
  workers = std::min<unsigned>(workers, static_cast<unsigned>(cells.size()));
  if (workers <= 1) {
    for (std::size_t i = 0; i < cells.size(); ++i) cells[i].episodes = run_episodes(configs[i]);
    return cells;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::future<void>> pool;
  std::exception_ptr failure;
  std::mutex failure_mu;
  for (unsigned w = 0; w < workers; ++w) {
    pool.push_back(std::async(std::launch::async, [&] {
      for (std::size_t i; (i = next.fetch_add(1)) < cells.size();) {
        try {
          cells[i].episodes = run_episodes(configs[i]);
        } catch (...) {
          std::lock_guard lock(failure_mu);
          if (!failure) failure = std::current_exception();
        }
      }
    }));
  }
  for (auto& f : pool) f.get();
  if (failure) std::rethrow_exception(failure);
  return cells;
}

inline void validate_spec(const ExperimentSpec& spec) {
  spec.sim.validate();
  if (spec.policies.empty()) throw UsageError("policy list is empty");
  if (spec.loads.empty()) throw UsageError("load list is empty");
  for (double l : spec.loads)
    if (!(l > 0)) throw UsageError("offered loads must be positive");
}

inline std::ofstream open_output(const std::filesystem::path& path) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  if (ec) throw Error("cannot create directory " + path.parent_path().string() + ": " + ec.message());
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  return out;
}

inline void close_output(std::ofstream& out, const std::filesystem::path& path) {
  out.close();
  if (!out) throw Error("write failed: " + path.string());
}

inline std::string fmt(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::string load_label(double load) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", load);
  return buf;
}

// ---------------------------------------------------------------------------
// fairness-table

inline std::vector<CellResult> run_fairness_table(const ExperimentSpec& spec) {
  validate_spec(spec);
  std::vector<CellResult> cells;
  std::vector<SimConfig> configs;
  for (double load : spec.loads)
    for (Policy p : spec.policies) {
      cells.push_back({load, p, {}, {}});
      configs.push_back(cell_config(spec, load, p));
    }
  return run_cells(cells, configs, spec.threads);
}

inline void write_fairness_csv(std::ostream& out, const ExperimentSpec& spec, const std::vector<CellResult>& cells) {
  out << spec.metadata_line() << '\n';
  out << "load,policy,jain_mean";
  for (std::size_t e = 0; e < spec.sim.episodes; ++e) out << ",jain_ep" << e;
  out << ",jain_assigned_mean\n";
  for (const auto& c : cells) {
    double assigned = 0;
    for (const auto& e : c.episodes) assigned += e.jain_assigned;
    out << load_label(c.load) << ',' << to_string(c.policy) << ',' << fmt(c.mean_jain());
    for (const auto& e : c.episodes) out << ',' << fmt(e.jain);
    out << ',' << fmt(assigned / static_cast<double>(c.episodes.size())) << '\n';
  }
}

inline std::filesystem::path cmd_fairness_table(const ExperimentSpec& spec) {
  const auto cells = run_fairness_table(spec);
  const auto path = spec.out_dir / "fairness_table.csv";
  auto out = open_output(path);
  write_fairness_csv(out, spec, cells);
  close_output(out, path);
  return path;
}

// ---------------------------------------------------------------------------
// fct-cdf

inline void write_cdf_csv(std::ostream& out, const ExperimentSpec& spec, const std::vector<CellResult>& cells) {
  out << spec.metadata_line() << '\n';
  out << "policy,fct,cdf\n";
  for (const auto& c : cells) {
    const auto sorted = c.pooled_sorted_fct();
    const std::size_t n = sorted.size();
    const auto row = [&](std::size_t rank) {  // 1-based
      out << to_string(c.policy) << ',' << fmt(sorted[rank - 1]) << ','
          << fmt(static_cast<double>(rank) / static_cast<double>(n)) << '\n';
    };
    if (spec.cdf_points == 0 || spec.cdf_points >= n) {
      for (std::size_t r = 1; r <= n; ++r) row(r);
    } else {
      for (std::size_t k = 1; k <= spec.cdf_points; ++k)
        row(std::max<std::size_t>(1, (k * n + spec.cdf_points - 1) / spec.cdf_points));
    }
  }
}

inline void write_fct_summary_csv(std::ostream& out, const ExperimentSpec& spec,
                                  const std::vector<CellResult>& cells) {
  out << spec.metadata_line() << '\n';
  out << "load,policy,p50,p90,p99,mean\n";
  for (const auto& c : cells) {
    const auto s = c.pooled_fct();
    out << load_label(c.load) << ',' << to_string(c.policy) << ',' << fmt(s.p50) << ',' << fmt(s.p90) << ','
        << fmt(s.p99) << ',' << fmt(s.mean) << '\n';
  }
}

inline std::vector<std::filesystem::path> cmd_fct_cdf(const ExperimentSpec& spec) {
  const auto cells = run_fairness_table(spec);
  std::vector<std::filesystem::path> written;
  for (double load : spec.loads) {
    std::vector<CellResult> at_load;
    for (const auto& c : cells)
      if (c.load == load) at_load.push_back(c);
    const auto path = spec.out_dir / ("fct_cdf_load_" + load_label(load) + ".csv");
    auto out = open_output(path);
    write_cdf_csv(out, spec, at_load);
    close_output(out, path);
    written.push_back(path);
  }
  const auto summary = spec.out_dir / "fct_summary.csv";
  auto out = open_output(summary);
  write_fct_summary_csv(out, spec, cells);
  close_output(out, summary);
  written.push_back(summary);
  return written;
}

// ---------------------------------------------------------------------------
// interval-sweep (W-SAPP only)

inline std::vector<CellResult> run_interval_sweep(const ExperimentSpec& spec) {
  spec.sim.validate();
  if (spec.intervals.empty()) throw UsageError("interval list is empty");
  if (spec.sweep_loads.empty()) throw UsageError("sweep load list is empty");
  std::vector<CellResult> cells;
  std::vector<SimConfig> configs;
  for (double load : spec.sweep_loads)
    for (auto interval : spec.intervals) {
      cells.push_back({load, Policy::kWSapp, interval, {}});
      SimConfig c = cell_config(spec, load, Policy::kWSapp);
      c.alias_update_interval = to_seconds(interval);
      configs.push_back(c);
    }
  return run_cells(cells, configs, spec.threads);
}

inline void write_sweep_csv(std::ostream& out, const ExperimentSpec& spec, const std::vector<CellResult>& cells) {
  out << spec.metadata_line() << '\n';
  out << "load,interval,interval_s,p50,p90,p99,mean\n";
  for (const auto& c : cells) {
    const auto s = c.pooled_fct();
    out << load_label(c.load) << ',' << format_duration(c.interval) << ',' << fmt(to_seconds(c.interval), 9) << ','
        << fmt(s.p50) << ',' << fmt(s.p90) << ',' << fmt(s.p99) << ',' << fmt(s.mean) << '\n';
  }
}

inline std::filesystem::path cmd_interval_sweep(const ExperimentSpec& spec) {
  const auto cells = run_interval_sweep(spec);
  const auto path = spec.out_dir / "interval_sweep.csv";
  auto out = open_output(path);
  write_sweep_csv(out, spec, cells);
  close_output(out, path);
  return path;
}

// ---------------------------------------------------------------------------
// bench-engine

struct BenchReport {
  std::size_t packets = 0;
  double seconds = 0;
  double decisions_per_second = 0;
  double p50_ns = 0, p99_ns = 0, p999_ns = 0;
  std::size_t syn = 0, established = 0, dropped = 0;
};

// Alternates SYNs with established-flow packets through process_packet.
inline BenchReport bench_engine(const ExperimentSpec& spec) {
  if (spec.bench_packets == 0) throw UsageError("bench-engine: packet count must be positive");
  if (spec.bench_servers == 0 || spec.bench_servers > kMaxPoolSize)
    throw UsageError("bench-engine: servers must be in [1, 256]");
  std::vector<double> caps(spec.bench_servers, 1.0);
  for (std::size_t i = caps.size() / 2; i < caps.size(); ++i) caps[i] = 2.0;
  LbConfig lb;
  lb.pool_size = caps.size();
  lb.id_bits = caps.size() <= 16 ? 4 : kMaxIdBits;
  Engine engine(lb, make_pool(caps));

  std::mt19937_64 rng(spec.sim.rng_seed);
  constexpr std::size_t kCorpus = 4096;
  std::vector<std::vector<std::uint8_t>> corpus;
  for (std::size_t i = 0; i < kCorpus; ++i) {
    const std::uint64_t r = rng();
    TcpPacketSpec p;
    p.src = make_ipv4(10, 0, 0, 0) | static_cast<Ipv4Addr>(r & 0xffffff);
    p.dst = kSimVip;
    p.src_port = static_cast<std::uint16_t>(1024 + (r >> 24) % 60000);
    p.dst_port = 80;
    if (i % 2 == 0) {
      p.flags = tcp_flags::kSyn;
      p.timestamp = TcpTimestamp{static_cast<std::uint32_t>(r >> 40), 0};
    } else {
      p.flags = tcp_flags::kAck;
      const ServerId id(static_cast<std::uint32_t>((r >> 40) % caps.size()));
      p.timestamp = TcpTimestamp{1, stamp_server_id(static_cast<std::uint32_t>(r >> 8), id, lb.id_bits)};
    }
    corpus.push_back(serialize_packet(make_tcp_packet(p)));
  }

  using Clock = std::chrono::steady_clock;
  const auto run_one = [&](std::size_t i, double now) { return engine.process_packet(corpus[i % kCorpus], now); };
  for (std::size_t i = 0; i < spec.bench_warmup; ++i) run_one(i, 0.0);

  BenchReport r;
  r.packets = spec.bench_packets;
  std::vector<double> lat;
  lat.reserve(spec.bench_packets);
  const auto start = Clock::now();
  for (std::size_t i = 0; i < spec.bench_packets; ++i) {
    const auto t0 = Clock::now();
    const LbAction a = run_one(i, std::chrono::duration<double>(t0 - start).count());
    lat.push_back(static_cast<double>(std::chrono::duration_cast<std::chrono::nanoseconds>(Clock::now() - t0).count()));
    if (std::holds_alternative<Drop>(a))
      ++r.dropped;
    else if (i % 2 == 0)
      ++r.syn;
    else
      ++r.established;
  }
  r.seconds = std::chrono::duration<double>(Clock::now() - start).count();
  r.decisions_per_second = static_cast<double>(r.packets) / r.seconds;
  std::sort(lat.begin(), lat.end());
  const auto pct = [&](double p) {
    return lat[std::min(lat.size() - 1, static_cast<std::size_t>(std::ceil(p * static_cast<double>(lat.size()))) - 1)];
  };
  r.p50_ns = pct(0.50);
  r.p99_ns = pct(0.99);
  r.p999_ns = pct(0.999);
  return r;
}

}  // namespace charon
