#pragma once

// Flow-level discrete-event simulator: Poisson arrivals, heterogeneous
// servers, pluggable LB policies, FCT and fairness metrics.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <queue>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "charon/alias.hpp"
#include "charon/core.hpp"
#include "charon/engine.hpp"
#include "charon/hash.hpp"
#include "charon/packet.hpp"

namespace charon {

enum class Policy { kEcmp, kWcmp, kGsq, kGsqPo2, kSapp, kWSapp };

inline constexpr std::array<Policy, 6> kAllPolicies = {Policy::kEcmp,   Policy::kWcmp,
                                                       Policy::kGsq,    Policy::kGsqPo2,
                                                       Policy::kSapp,   Policy::kWSapp};

inline const char* to_string(Policy p) {
  switch (p) {
    case Policy::kEcmp: return "ECMP";
    case Policy::kWcmp: return "WCMP";
    case Policy::kGsq: return "GSQ";
    case Policy::kGsqPo2: return "GSQ_PO2";
    case Policy::kSapp: return "SAPP";
    case Policy::kWSapp: return "W_SAPP";
  }
  return "?";
}

inline std::optional<Policy> parse_policy(std::string_view name) {
  std::string s;
  for (char c : name) s.push_back(c == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
  if (s == "GSQ2") s = "GSQ_PO2";
  if (s == "WSAPP") s = "W_SAPP";
  for (Policy p : kAllPolicies)
    if (s == to_string(p)) return p;
  return std::nullopt;
}

inline bool is_score_policy(Policy p) { return p == Policy::kSapp || p == Policy::kWSapp; }

enum class ServerModel { kProcessorSharing, kFifo };

struct SimConfig {
  std::size_t num_lbs = 2;
  std::size_t num_servers = 64;
  // Empty: half the servers at base_capacity, the other half at
  // base_capacity * capacity_ratio.
  std::vector<double> capacities;
  double base_capacity = 1.0;
  double capacity_ratio = 2.0;
  std::size_t num_flows = 50'000;
  std::size_t episodes = 3;
  double mean_flow_duration = 0.5;  // seconds on an idle slowest server
  double offered_load = 1.0;        // fraction of total capacity
  Policy policy = Policy::kWSapp;
  double alias_update_interval = 1.0;
  WeightMode weight_mode = WeightMode::kStatic;
  ServerModel server_model = ServerModel::kProcessorSharing;
  std::size_t feedback_window = 32;  // completed flows averaged for v
  std::uint64_t rng_seed = 1;

  std::vector<double> server_capacities() const {
    if (!capacities.empty()) return capacities;
    std::vector<double> c(num_servers, base_capacity);
    for (std::size_t i = num_servers / 2; i < num_servers; ++i) c[i] = base_capacity * capacity_ratio;
    return c;
  }

  double reference_capacity() const {
    const auto c = server_capacities();
    return *std::min_element(c.begin(), c.end());
  }

  double mean_work() const { return mean_flow_duration * reference_capacity(); }

  double arrival_rate() const {
    const auto c = server_capacities();
    return offered_load * std::accumulate(c.begin(), c.end(), 0.0) / mean_work();
  }

  void validate() const {
    if (num_lbs == 0) throw ConfigError("num_lbs must be at least 1");
    if (num_servers == 0 || num_servers > kMaxPoolSize) throw ConfigError("num_servers must be in [1, 256]");
    if (capacities.empty() && num_servers % 2 != 0)
      throw ConfigError("num_servers must be even for the half/half capacity profile");
    if (!capacities.empty() && capacities.size() != num_servers)
      throw ConfigError("capacities length must equal num_servers");
    for (double c : server_capacities())
      if (!(c > 0.0) || !std::isfinite(c)) throw ConfigError("server capacities must be positive");
    if (!(capacity_ratio > 0.0)) throw ConfigError("capacity_ratio must be positive");
    if (num_flows == 0) throw ConfigError("num_flows must be at least 1");
    if (episodes == 0) throw ConfigError("episodes must be at least 1");
    if (!(mean_flow_duration > 0.0)) throw ConfigError("mean_flow_duration must be positive");
    if (!(offered_load > 0.0)) throw ConfigError("offered_load must be positive");
    if (!(alias_update_interval > 0.0)) throw ConfigError("alias_update_interval must be positive");
    if (feedback_window == 0) throw ConfigError("feedback_window must be at least 1");
  }
};

// ---------------------------------------------------------------------------
// Metrics

struct FctSummary {
  double p50 = 0, p90 = 0, p99 = 0, mean = 0;
};

// Nearest-rank percentiles and the arithmetic mean.
inline FctSummary fct_percentiles(std::span<const double> samples) {
  if (samples.empty()) throw Error("fct_percentiles: empty sample");
  std::vector<double> s(samples.begin(), samples.end());
  std::sort(s.begin(), s.end());
  const auto rank = [&](double p) {
    auto r = static_cast<std::size_t>(std::ceil(p / 100.0 * static_cast<double>(s.size())));
    return s[std::clamp<std::size_t>(r, 1, s.size()) - 1];
  };
  long double total = 0;
  for (double x : s) total += x;
  return {rank(50), rank(90), rank(99), static_cast<double>(total / s.size())};
}

// (sum x)^2 / (n * sum x^2)
inline double jain_index(std::span<const double> x) {
  if (x.empty()) throw Error("jain_index: empty input");
  long double sum = 0, sq = 0;
  for (double v : x) {
    if (v < 0) throw Error("jain_index: negative value");
    sum += v;
    sq += static_cast<long double>(v) * v;
  }
  if (sq == 0) throw Error("jain_index: undefined for all-zero input");
  return static_cast<double>(sum * sum / (x.size() * sq));
}

struct FctSample {
  std::uint64_t flow_id = 0;
  double fct = 0.0;
};

struct EpisodeMetrics {
  std::vector<FctSample> fct_samples;                  // in completion order
  std::vector<std::uint64_t> per_server_flow_counts;   // flows assigned to each server
  std::vector<double> mean_active_flows;               // time-average over the arrival phase
  double jain = 0.0;           // over mean_active_flows
  double jain_assigned = 0.0;  // over per_server_flow_counts
  FctSummary fct;
  double arrival_horizon = 0.0;  // time of the last arrival
  double end_time = 0.0;         // time of the last completion

  std::vector<double> fct_values() const {
    std::vector<double> v;
    v.reserve(fct_samples.size());
    for (const auto& s : fct_samples) v.push_back(s.fct);
    return v;
  }
};

// ---------------------------------------------------------------------------
// Policy decisions

// What a policy may look at. Queue lengths are the oracle view, counted on
// every read; score policies see only their LB's engine.
class WorldView {
public:
  WorldView(std::size_t num_servers, const std::vector<std::size_t>* queues, Engine* engine,
            const AliasTable* weighted_table, std::pair<std::uint64_t, std::uint64_t> seeds, double now)
      : n_(num_servers), queues_(queues), engine_(engine), weighted_(weighted_table), seeds_(seeds), now_(now) {}

  std::size_t num_servers() const { return n_; }
  double now() const { return now_; }
  std::pair<std::uint64_t, std::uint64_t> seeds() const { return seeds_; }

  std::size_t queue_length(ServerId id) const {
    if (!queues_) throw Error("queue lengths are not visible to this policy");
    ++queue_reads_;
    return queues_->at(id);
  }
  Engine& engine() const {
    if (!engine_) throw Error("no LB engine attached to this world view");
    return *engine_;
  }
  const AliasTable& weighted_table() const {
    if (!weighted_) throw Error("no weighted table attached to this world view");
    return *weighted_;
  }
  std::size_t queue_reads() const { return queue_reads_; }

private:
  std::size_t n_;
  const std::vector<std::size_t>* queues_;
  Engine* engine_;
  const AliasTable* weighted_;
  std::pair<std::uint64_t, std::uint64_t> seeds_;
  double now_;
  mutable std::size_t queue_reads_ = 0;
};

inline ServerId policy_decide(Policy policy, const FlowKey& key, const WorldView& world) {
  const std::size_t n = world.num_servers();
  const auto [seed0, seed1] = world.seeds();
  const auto uniform = [&](std::uint64_t seed) {
    return ServerId(hash_to_index(flow_hash(key, seed), n));
  };
  switch (policy) {
    case Policy::kEcmp:
      return uniform(seed0);
    case Policy::kWcmp:
      return alias_draw(key, world.weighted_table(), seed0);
    case Policy::kGsq: {
      // Lowest index wins ties.
      ServerId best(0);
      std::size_t best_q = world.queue_length(best);
      for (std::uint32_t i = 1; i < n; ++i) {
        const std::size_t q = world.queue_length(ServerId(i));
        if (q < best_q) {
          best_q = q;
          best = ServerId(i);
        }
      }
      return best;
    }
    case Policy::kGsqPo2: {
      const ServerId a = uniform(seed0);
      const ServerId b = uniform(seed1);
      return world.queue_length(b) < world.queue_length(a) ? b : a;
    }
    case Policy::kSapp:
    case Policy::kWSapp:
      return world.engine().select(key, world.now());
  }
  return ServerId(0);
}

// ---------------------------------------------------------------------------
// Event loop

struct Arrival {
  double time = 0.0;
  double work = 0.0;
  FlowKey key;
};

// Produces arrivals in non-decreasing time order.
using ArrivalSource = std::function<std::optional<Arrival>()>;

inline constexpr Ipv4Addr kSimVip = make_ipv4(10, 1, 0, 1);

inline ArrivalSource poisson_arrivals(const SimConfig& cfg, std::uint64_t seed) {
  struct State {
    std::mt19937_64 rng;
    std::exponential_distribution<double> gap;
    std::exponential_distribution<double> work;
    std::size_t remaining;
    double t = 0.0;
  };
  auto st = std::make_shared<State>(State{std::mt19937_64(seed),
                                          std::exponential_distribution<double>(cfg.arrival_rate()),
                                          std::exponential_distribution<double>(1.0 / cfg.mean_work()),
                                          cfg.num_flows});
  return [st]() -> std::optional<Arrival> {
    if (st->remaining == 0) return std::nullopt;
    --st->remaining;
    st->t += st->gap(st->rng);
    Arrival a;
    a.time = st->t;
    a.work = st->work(st->rng);
    const std::uint64_t r = st->rng();
    a.key = {make_ipv4(10, 0, 0, 0) | static_cast<Ipv4Addr>(r & 0x00ffffff), kSimVip, kProtoTcp,
             static_cast<std::uint16_t>(1024 + ((r >> 24) % 64512)), 80};
    return a;
  };
}

inline ArrivalSource scripted_arrivals(std::vector<Arrival> script) {
  auto st = std::make_shared<std::pair<std::vector<Arrival>, std::size_t>>(std::move(script), 0);
  return [st]() -> std::optional<Arrival> {
    if (st->second >= st->first.size()) return std::nullopt;
    return st->first[st->second++];
  };
}

enum class EventKind : std::uint8_t { kFlowCompletion = 0, kAliasRefresh = 1, kFlowArrival = 2 };

struct SimEvent {
  double time = 0.0;
  EventKind kind = EventKind::kFlowArrival;
  std::uint64_t seq = 0;
  std::uint32_t target = 0;    // server for completions, LB for refreshes
  std::uint64_t version = 0;   // completion validity stamp

  // Min-heap ordering: time, then kind priority, then sequence number.
  friend bool operator>(const SimEvent& a, const SimEvent& b) {
    if (a.time != b.time) return a.time > b.time;
    if (a.kind != b.kind) return a.kind > b.kind;
    return a.seq > b.seq;
  }
};

class Simulator {
public:
  explicit Simulator(SimConfig cfg, std::uint64_t episode_seed)
      : Simulator(cfg, poisson_arrivals(cfg, episode_seed)) {}

  Simulator(SimConfig cfg, ArrivalSource source) : cfg_(std::move(cfg)), source_(std::move(source)) {
    cfg_.validate();
    const auto caps = cfg_.server_capacities();
    servers_.resize(caps.size());
    for (std::size_t i = 0; i < caps.size(); ++i) servers_[i].capacity = caps[i];
    queues_.assign(caps.size(), 0);
    weighted_ = std::make_unique<AliasTable>(build_alias_table(caps));

    if (is_score_policy(cfg_.policy)) {
      std::vector<double> weights = caps;
      if (cfg_.policy == Policy::kSapp) std::fill(weights.begin(), weights.end(), 1.0);
      auto pool = make_pool(caps);
      for (std::size_t i = 0; i < pool.size(); ++i) pool[i].static_weight = weights[i];
      LbConfig lb;
      lb.pool_size = caps.size();
      lb.id_bits = caps.size() <= 16 ? 4 : kMaxIdBits;
      lb.alias_update_interval = cfg_.alias_update_interval;
      for (std::size_t l = 0; l < cfg_.num_lbs; ++l) {
        lb.hash_seed0 = 0x9e3779b97f4a7c15ULL + 2 * l;
        lb.hash_seed1 = 0xc2b2ae3d27d4eb4fULL + 2 * l;
        engines_.push_back(std::make_unique<Engine>(lb, pool));
        push({cfg_.alias_update_interval, EventKind::kAliasRefresh, 0, static_cast<std::uint32_t>(l), 0});
      }
    }
    metrics_.per_server_flow_counts.assign(caps.size(), 0);
    pull_arrival();
  }

  const SimConfig& config() const { return cfg_; }
  double now() const { return now_; }
  bool done() const { return events_.empty(); }

  // Processes every event with time <= t.
  void run_until(double t) {
    while (!events_.empty() && events_.top().time <= t) step();
    if (t > now_ && std::isfinite(t)) now_ = t;
  }

  EpisodeMetrics run() {
    while (!events_.empty()) step();
    return finish();
  }

  double injected_work() const { return injected_work_; }
  double completed_work() const { return completed_work_; }

  // Outstanding work at the current simulation time.
  double in_flight_work() const {
    double total = 0.0;
    for (const Server& s : servers_) {
      const double v = s.virtual_time_at(now_, cfg_.server_model);
      for (const auto& f : s.flows) total += f.finish_tag - std::max(v, f.start_tag);
    }
    return total;
  }

  // Service delivered so far: capacity integrated over each server's busy time.
  double delivered_work() const {
    double total = 0.0;
    for (const Server& s : servers_) total += s.served + (s.flows.empty() ? 0.0 : s.capacity * (now_ - s.last));
    return total;
  }

  std::size_t oracle_queue_reads() const { return oracle_reads_; }
  const std::vector<ServerId>& assignments() const { return assignments_; }
  const std::vector<std::size_t>& queue_lengths() const { return queues_; }
  std::uint64_t trace_digest() const { return digest_; }
  std::size_t refreshes() const { return refreshes_; }
  const Engine& engine(std::size_t lb) const { return *engines_.at(lb); }

private:
  struct ActiveFlow {
    double finish_tag;
    double start_tag;  // virtual time at which service starts
    double work;
    std::uint64_t flow_id;
    friend bool operator>(const ActiveFlow& a, const ActiveFlow& b) {
      if (a.finish_tag != b.finish_tag) return a.finish_tag > b.finish_tag;
      return a.flow_id > b.flow_id;
    }
  };

  struct Server {
    double capacity = 1.0;
    // Virtual time: attained service per flow (PS) or cumulative work served (FIFO).
    double vtime = 0.0;
    double last = 0.0;
    double tail_tag = 0.0;  // FIFO: finish tag of the last queued flow
    std::uint64_t version = 0;
    std::vector<ActiveFlow> flows;  // min-heap on finish_tag
    std::deque<double> recent_fct;
    double area = 0.0;  // integral of active flow count
    double area_mark = 0.0;
    double served = 0.0;  // integral of capacity over busy time

    double rate(ServerModel model) const {
      if (flows.empty()) return 0.0;
      return model == ServerModel::kProcessorSharing ? capacity / static_cast<double>(flows.size()) : capacity;
    }
    double virtual_time_at(double t, ServerModel model) const { return vtime + rate(model) * (t - last); }
    void advance(double t, ServerModel model) {
      vtime = virtual_time_at(t, model);
      integrate(t);
    }
    void integrate(double t) {
      area += static_cast<double>(flows.size()) * (t - last);
      if (!flows.empty()) served += capacity * (t - last);
      last = t;
    }
  };

  void push(SimEvent e) {
    e.seq = next_seq_++;
    events_.push(e);
  }

  void pull_arrival() {
    if (auto a = source_()) {
      if (a->time < last_arrival_time_) throw Error("arrival source went back in time");
      if (!(a->work > 0.0)) throw Error("flow work must be positive");
      last_arrival_time_ = a->time;
      pending_.push_back(*a);
      push({a->time, EventKind::kFlowArrival, 0, 0, 0});
    } else {
      arrivals_exhausted_ = true;
    }
  }

  void schedule_completion(std::size_t sid) {
    Server& s = servers_[sid];
    ++s.version;
    if (s.flows.empty()) return;
    const double rate = s.rate(cfg_.server_model);
    const double dt = std::max(0.0, (s.flows.front().finish_tag - s.vtime) / rate);
    push({s.last + dt, EventKind::kFlowCompletion, 0, static_cast<std::uint32_t>(sid), s.version});
  }

  void mix_digest(std::uint64_t x) {
    digest_ ^= x + 0x9e3779b97f4a7c15ULL + (digest_ << 6) + (digest_ >> 2);
  }

  void step() {
    const SimEvent ev = events_.top();
    events_.pop();
    now_ = ev.time;
    switch (ev.kind) {
      case EventKind::kFlowArrival: on_arrival(); break;
      case EventKind::kFlowCompletion: on_completion(ev); break;
      case EventKind::kAliasRefresh: on_refresh(ev); break;
    }
  }

  void on_arrival() {
    const Arrival a = pending_.front();
    pending_.pop_front();
    const std::uint64_t flow_id = next_flow_id_++;
    const std::size_t lb = static_cast<std::size_t>(flow_id % cfg_.num_lbs);

    WorldView world(servers_.size(), is_score_policy(cfg_.policy) ? nullptr : &queues_,
                    engines_.empty() ? nullptr : engines_[lb].get(), weighted_.get(),
                    {0x9e3779b97f4a7c15ULL + 2 * lb, 0xc2b2ae3d27d4eb4fULL + 2 * lb}, now_);
    const ServerId sid = policy_decide(cfg_.policy, a.key, world);
    oracle_reads_ += world.queue_reads();

    Server& s = servers_.at(sid);
    s.advance(now_, cfg_.server_model);
    double start = s.vtime;
    double finish;
    if (cfg_.server_model == ServerModel::kProcessorSharing) {
      finish = s.vtime + a.work;
    } else {
      start = std::max(s.vtime, s.tail_tag);
      finish = start + a.work;
      s.tail_tag = finish;
    }
    s.flows.push_back({finish, start, a.work, flow_id});
    std::push_heap(s.flows.begin(), s.flows.end(), std::greater<>{});
    ++queues_[sid];
    arrival_time_.push_back(now_);
    injected_work_ += a.work;
    ++metrics_.per_server_flow_counts[sid];
    assignments_.push_back(sid);
    mix_digest((flow_id << 8) ^ sid.value());

    if (is_score_policy(cfg_.policy)) {
      // The server's reply carries its instantaneous load back to the same LB.
      engines_[lb]->feedback(sid, encode_feedback(static_cast<double>(s.flows.size()), velocity(s)), now_);
    }
    schedule_completion(sid);
    pull_arrival();
    if (arrivals_exhausted_) mark_horizon();
  }

  // Unit tasks per second: inverse of the recent mean FCT, nominal before any completion.
  double velocity(const Server& s) const {
    if (s.recent_fct.empty()) return s.capacity / cfg_.mean_work();
    const double mean =
        std::accumulate(s.recent_fct.begin(), s.recent_fct.end(), 0.0) / static_cast<double>(s.recent_fct.size());
    return mean > 0.0 ? 1.0 / mean : kFeedbackMaxV;
  }

  void on_completion(const SimEvent& ev) {
    Server& s = servers_[ev.target];
    if (ev.version != s.version) return;
    std::pop_heap(s.flows.begin(), s.flows.end(), std::greater<>{});
    const ActiveFlow done = s.flows.back();
    area_step(s);
    s.flows.pop_back();
    s.vtime = done.finish_tag;
    --queues_[ev.target];

    const double fct = now_ - arrival_time_[done.flow_id];
    metrics_.fct_samples.push_back({done.flow_id, fct});
    s.recent_fct.push_back(fct);
    if (s.recent_fct.size() > cfg_.feedback_window) s.recent_fct.pop_front();
    completed_work_ += done.work;
    mix_digest((done.flow_id << 16) ^ ev.target ^ 0x5a5a);
    schedule_completion(ev.target);
  }

  // Integrates the active-flow count up to now without moving virtual time
  // past the completing flow's finish tag.
  void area_step(Server& s) { s.integrate(now_); }

  void on_refresh(const SimEvent& ev) {
    if (arrivals_exhausted_) return;
    Engine& e = *engines_.at(ev.target);
    e.refresh(cfg_.weight_mode, now_);
    ++refreshes_;
    push({now_ + cfg_.alias_update_interval, EventKind::kAliasRefresh, 0, ev.target, 0});
  }

  void mark_horizon() {
    if (horizon_marked_) return;
    horizon_marked_ = true;
    metrics_.arrival_horizon = now_;
    for (Server& s : servers_) {
      s.advance(now_, cfg_.server_model);
      s.area_mark = s.area;
    }
  }

  EpisodeMetrics finish() {
    EpisodeMetrics m = std::move(metrics_);
    m.end_time = now_;
    const double horizon = m.arrival_horizon > 0.0 ? m.arrival_horizon : now_;
    m.mean_active_flows.resize(servers_.size());
    for (std::size_t i = 0; i < servers_.size(); ++i)
      m.mean_active_flows[i] = horizon > 0.0 ? servers_[i].area_mark / horizon : 0.0;
    const bool any_active = std::any_of(m.mean_active_flows.begin(), m.mean_active_flows.end(),
                                        [](double x) { return x > 0.0; });
    m.jain = any_active ? jain_index(m.mean_active_flows) : 1.0;
    std::vector<double> counts(m.per_server_flow_counts.begin(), m.per_server_flow_counts.end());
    m.jain_assigned = jain_index(counts);
    const auto values = m.fct_values();
    m.fct = fct_percentiles(values);
    return m;
  }

  SimConfig cfg_;
  ArrivalSource source_;
  std::vector<Server> servers_;
  std::vector<std::size_t> queues_;
  std::unique_ptr<AliasTable> weighted_;
  std::vector<std::unique_ptr<Engine>> engines_;
  std::priority_queue<SimEvent, std::vector<SimEvent>, std::greater<>> events_;
  std::deque<Arrival> pending_;
  std::vector<double> arrival_time_;
  std::vector<ServerId> assignments_;
  EpisodeMetrics metrics_;
  double now_ = 0.0;
  double last_arrival_time_ = 0.0;
  double injected_work_ = 0.0;
  double completed_work_ = 0.0;
  std::uint64_t next_seq_ = 0;
  std::uint64_t next_flow_id_ = 0;
  std::uint64_t digest_ = 0;
  std::size_t oracle_reads_ = 0;
  std::size_t refreshes_ = 0;
  bool arrivals_exhausted_ = false;
  bool horizon_marked_ = false;
};

inline std::uint64_t episode_seed(std::uint64_t base, std::size_t episode) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (episode + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// One episode with the config's seed.
inline EpisodeMetrics run_episode(const SimConfig& cfg) {
  return Simulator(cfg, cfg.rng_seed).run();
}

// All configured episodes, each with an independent derived seed.
inline std::vector<EpisodeMetrics> run_episodes(const SimConfig& cfg) {
  std::vector<EpisodeMetrics> out;
  for (std::size_t e = 0; e < cfg.episodes; ++e) out.push_back(Simulator(cfg, episode_seed(cfg.rng_seed, e)).run());
  return out;
}

}  // namespace charon
