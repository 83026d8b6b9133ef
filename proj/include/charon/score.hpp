#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <mutex>
#include <vector>

#include "charon/core.hpp"

namespace charon {

// Per-server load prediction: remaining work g (unit tasks), drain
// velocity v (unit tasks per second), and last update time t (seconds).
struct ScoreEntry {
  double g = 0.0;
  double v = 0.0;
  double t = 0.0;
  friend bool operator==(const ScoreEntry&, const ScoreEntry&) = default;
};

// g' = max(0, g - v * (now - t))
inline double decayed_score(const ScoreEntry& e, double now) {
  if (now < e.t) throw ClockRegressionError(e.t, now);
  return std::max(0.0, e.g - e.v * (now - e.t));
}

// Double-precision datapath.
struct RealScoreArith {
  using Entry = ScoreEntry;
  using Score = double;

  static Entry make(double g, double v, double t) {
    return {std::max(0.0, g), std::max(0.0, v), t};
  }
  static ScoreEntry view(const Entry& e) { return e; }
  static Score score_at(const Entry& e, double now) { return decayed_score(e, now); }
  static double to_real(Score s) { return s; }
  static Entry settle(const Entry& e, Score s, double now) { return {s, e.v, now}; }
  static Score plus_unit(Score s) { return s + 1.0; }
};

__extension__ typedef unsigned __int128 uint128_t;

// Hardware-style datapath: g and v in unsigned Q16.16, time in integer
// nanoseconds. Saturates instead of wrapping.
struct FixedScoreArith {
  struct Entry {
    std::uint32_t g_q = 0;
    std::uint32_t v_q = 0;
    std::uint64_t t_ns = 0;
    friend bool operator==(const Entry&, const Entry&) = default;
  };
  using Score = std::uint32_t;

  static constexpr double kOne = 65536.0;

  static std::uint32_t to_q16(double x) {
    if (!(x > 0.0)) return 0;
    const double scaled = std::round(x * kOne);
    if (scaled >= static_cast<double>(std::numeric_limits<std::uint32_t>::max()))
      return std::numeric_limits<std::uint32_t>::max();
    return static_cast<std::uint32_t>(scaled);
  }
  static std::uint64_t to_ns(double t) {
    if (t <= 0.0) return 0;
    return static_cast<std::uint64_t>(std::llround(t * 1e9));
  }

  static Entry make(double g, double v, double t) { return {to_q16(g), to_q16(v), to_ns(t)}; }
  static ScoreEntry view(const Entry& e) {
    return {e.g_q / kOne, e.v_q / kOne, static_cast<double>(e.t_ns) * 1e-9};
  }
  static Score score_at(const Entry& e, double now) {
    const std::uint64_t now_ns = to_ns(now);
    if (now_ns < e.t_ns) throw ClockRegressionError(e.t_ns * 1e-9, now);
    const uint128_t drained =
        static_cast<uint128_t>(e.v_q) * (now_ns - e.t_ns) / 1'000'000'000u;
    return drained >= e.g_q ? 0u : static_cast<Score>(e.g_q - static_cast<std::uint32_t>(drained));
  }
  static double to_real(Score s) { return s / kOne; }
  static Entry settle(const Entry& e, Score s, double now) { return {s, e.v_q, to_ns(now)}; }
  static Score plus_unit(Score s) {
    constexpr std::uint32_t unit = 1u << 16;
    return s > std::numeric_limits<Score>::max() - unit ? std::numeric_limits<Score>::max()
                                                        : s + unit;
  }
};

// Score Table: one entry per server. Every public operation is atomic with
// respect to the others; select_and_commit is the combined read-compare-commit
// step run for each SYN.
template <class Arith>
class BasicScoreTable {
public:
  using Entry = typename Arith::Entry;

  explicit BasicScoreTable(std::size_t pool_size) : entries_(pool_size) {
    if (pool_size == 0 || pool_size > kMaxPoolSize)
      throw ConfigError("score table size must be in [1, 256]");
  }

  BasicScoreTable(const BasicScoreTable& other) : entries_(other.snapshot_raw()) {}
  BasicScoreTable& operator=(const BasicScoreTable& other) {
    if (this != &other) {
      auto copy = other.snapshot_raw();
      std::lock_guard lock(mu_);
      entries_ = std::move(copy);
    }
    return *this;
  }

  std::size_t size() const { return entries_.size(); }

  ScoreEntry entry(ServerId id) const {
    std::lock_guard lock(mu_);
    return Arith::view(entries_.at(id));
  }

  // Sets an entry directly; used for fixtures and initial state.
  void set(ServerId id, double g, double v, double t) {
    std::lock_guard lock(mu_);
    entries_.at(id) = Arith::make(g, v, t);
  }

  double decayed_score(ServerId id, double now) const {
    std::lock_guard lock(mu_);
    return Arith::to_real(Arith::score_at(entries_.at(id), now));
  }

  // Lower decayed score wins; ties and a == b go to a.
  ServerId select_lower(ServerId a, ServerId b, double now) const {
    std::lock_guard lock(mu_);
    return lower_locked(a, b, now);
  }

  // Writes back the decayed values of both candidates at `now`, then adds
  // one unit task to the chosen one.
  void commit_selection(ServerId chosen, ServerId other, double now) {
    std::lock_guard lock(mu_);
    commit_locked(chosen, other, now);
  }

  void commit_selection(ServerId chosen, double now) { commit_selection(chosen, chosen, now); }

  ServerId select_and_commit(ServerId a, ServerId b, double now) {
    std::lock_guard lock(mu_);
    const ServerId chosen = lower_locked(a, b, now);
    commit_locked(chosen, chosen == a ? b : a, now);
    return chosen;
  }

  // Feedback is authoritative: it replaces the predicted state.
  void apply_feedback(ServerId id, double reported_g, double reported_v, double now) {
    std::lock_guard lock(mu_);
    Entry& e = entries_.at(id);
    if (now < Arith::view(e).t) throw ClockRegressionError(Arith::view(e).t, now);
    e = Arith::make(reported_g, reported_v, now);
  }

  void reset() {
    std::lock_guard lock(mu_);
    std::fill(entries_.begin(), entries_.end(), Entry{});
  }

  std::vector<ScoreEntry> snapshot() const {
    std::lock_guard lock(mu_);
    std::vector<ScoreEntry> out;
    out.reserve(entries_.size());
    for (const Entry& e : entries_) out.push_back(Arith::view(e));
    return out;
  }

  std::size_t footprint_bytes() const { return entries_.size() * sizeof(Entry); }

private:
  std::vector<Entry> snapshot_raw() const {
    std::lock_guard lock(mu_);
    return entries_;
  }

  ServerId lower_locked(ServerId a, ServerId b, double now) const {
    const auto sa = Arith::score_at(entries_.at(a), now);
    if (a == b) return a;
    const auto sb = Arith::score_at(entries_.at(b), now);
    return sb < sa ? b : a;
  }

  void commit_locked(ServerId chosen, ServerId other, double now) {
    Entry& c = entries_.at(chosen);
    if (other != chosen) {
      Entry& o = entries_.at(other);
      o = Arith::settle(o, Arith::score_at(o, now), now);
    }
    c = Arith::settle(c, Arith::plus_unit(Arith::score_at(c, now)), now);
  }

  mutable std::mutex mu_;
  std::vector<Entry> entries_;
};

using ScoreTable = BasicScoreTable<RealScoreArith>;
using FixedScoreTable = BasicScoreTable<FixedScoreArith>;

}  // namespace charon
