#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "charon/core.hpp"
#include "charon/hash.hpp"

namespace charon {

class DegenerateWeights : public Error {
public:
  DegenerateWeights() : Error("degenerate weight vector") {}
};

class InvalidWeight : public Error {
public:
  explicit InvalidWeight(std::size_t i) : Error("invalid weight at index " + std::to_string(i)) {}
};

// Thresholds are fractions of this scale; threshold == scale marks a full bucket.
inline constexpr std::uint32_t kAliasScale = 1u << 16;

struct AliasEntry {
  std::uint32_t threshold = 0;
  ServerId alias;
};

class AliasTable {
public:
  AliasTable() = default;
  AliasTable(std::vector<AliasEntry> entries, std::uint32_t scale)
      : entries_(std::move(entries)), scale_(scale) {}

  std::size_t size() const { return entries_.size(); }
  std::uint32_t scale() const { return scale_; }
  std::span<const AliasEntry> entries() const { return entries_; }
  const AliasEntry& operator[](std::size_t i) const { return entries_[i]; }

  // Returns the alias when random_value >= threshold, else the entry index.
  ServerId sample(std::size_t entry_index, std::uint32_t random_value) const {
    if (entry_index >= entries_.size())
      throw std::out_of_range("alias entry index " + std::to_string(entry_index) +
                              " out of range");
    if (random_value >= scale_) throw std::out_of_range("alias random value exceeds scale");
    const AliasEntry& e = entries_[entry_index];
    return random_value >= e.threshold ? e.alias : ServerId(static_cast<std::uint32_t>(entry_index));
  }

private:
  std::vector<AliasEntry> entries_;
  std::uint32_t scale_ = kAliasScale;
};

namespace detail {

// Integer bucket masses summing to exactly n * scale (largest-remainder rounding).
inline std::vector<std::uint64_t> scaled_masses(std::span<const double> weights, std::uint32_t scale) {
  const std::size_t n = weights.size();
  long double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!(weights[i] >= 0.0) || !std::isfinite(weights[i])) throw InvalidWeight(i);
    total += weights[i];
  }
  if (!(total > 0)) throw DegenerateWeights();

  const std::uint64_t budget = static_cast<std::uint64_t>(n) * scale;
  std::vector<std::uint64_t> mass(n);
  std::vector<std::pair<long double, std::size_t>> remainders;
  remainders.reserve(n);
  std::uint64_t assigned = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const long double exact = static_cast<long double>(weights[i]) * budget / total;
    const auto whole = static_cast<std::uint64_t>(std::floor(exact));
    mass[i] = whole;
    assigned += whole;
    remainders.emplace_back(exact - whole, i);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; assigned < budget; ++k, ++assigned) ++mass[remainders[k % n].second];
  // Rounding of the long double products can overshoot by a unit or two.
  while (assigned > budget) {
    auto it = std::max_element(mass.begin(), mass.end());
    --*it;
    --assigned;
  }
  return mass;
}

}  // namespace detail

// Two-worklist (small/large) construction over integer masses. Every
// (entry, random) pair maps to a bucket, so enumeration reproduces the
// rounded masses exactly.
inline AliasTable build_alias_table(std::span<const double> weights,
                                    std::uint32_t scale = kAliasScale) {
  if (weights.empty()) throw DegenerateWeights();
  if (weights.size() > kMaxPoolSize) throw ConfigError("alias table larger than 256 entries");
  if (scale == 0) throw ConfigError("alias scale must be positive");
  const std::size_t n = weights.size();
  std::vector<std::uint64_t> mass = detail::scaled_masses(weights, scale);

  std::vector<AliasEntry> entries(n);
  std::vector<std::size_t> small, large;
  for (std::size_t i = 0; i < n; ++i) {
    entries[i] = {scale, ServerId(static_cast<std::uint32_t>(i))};
    if (mass[i] < scale)
      small.push_back(i);
    else if (mass[i] > scale)
      large.push_back(i);
  }
  while (!small.empty() && !large.empty()) {
    const std::size_t s = small.back();
    small.pop_back();
    const std::size_t l = large.back();
    entries[s] = {static_cast<std::uint32_t>(mass[s]), ServerId(static_cast<std::uint32_t>(l))};
    mass[l] -= scale - mass[s];
    if (mass[l] < scale) {
      large.pop_back();
      small.push_back(l);
    } else if (mass[l] == scale) {
      large.pop_back();
    }
  }
  // Exact integer bookkeeping leaves both lists empty; anything left is full.
  return AliasTable(std::move(entries), scale);
}

inline AliasTable build_alias_table(std::initializer_list<double> weights,
                                    std::uint32_t scale = kAliasScale) {
  return build_alias_table(std::span<const double>(weights.begin(), weights.size()), scale);
}

inline ServerId alias_sample(const AliasTable& table, std::size_t entry_index,
                             std::uint32_t random_value) {
  return table.sample(entry_index, random_value);
}

struct CandidatePair {
  ServerId first;
  ServerId second;
  friend bool operator==(const CandidatePair&, const CandidatePair&) = default;
};

// One draw: entry index from the high hash bits, random value from the low bits.
inline ServerId alias_draw(const FlowKey& key, const AliasTable& table, std::uint64_t seed) {
  const std::uint64_t h = flow_hash(key, seed);
  return table.sample(hash_to_index(h, table.size()), hash_to_value(h, table.scale()));
}

// Power-of-2-choices candidates. The two ids may coincide.
inline CandidatePair two_choices(const FlowKey& key, const AliasTable& table,
                                 std::pair<std::uint64_t, std::uint64_t> seeds) {
  if (table.size() == 1) return {ServerId(0), ServerId(0)};
  return {alias_draw(key, table, seeds.first), alias_draw(key, table, seeds.second)};
}

}  // namespace charon
