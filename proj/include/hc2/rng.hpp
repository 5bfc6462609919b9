#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "hc2/error.hpp"

namespace hc2 {

namespace detail {

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

/// Named deterministic random stream.
///
/// A stream is identified by (seed, label); substreams extend the label path,
/// so "train" -> "train/dropout" is independent of "train/sampling". The
/// engine is std::mt19937_64, whose output sequence is fixed by the standard;
/// every derived draw (uniform, normal, bounded index) is computed here rather
/// than through <random> distributions, which are implementation-defined.
class RngStream {
 public:
  RngStream() : RngStream(0, "root") {}
  RngStream(std::uint64_t seed, std::string_view label)
      : seed_(seed), label_(label), engine_(detail::mix64(seed ^ detail::mix64(detail::fnv1a(label)))) {}

  RngStream substream(std::string_view name) const {
    return RngStream(seed_, label_ + "/" + std::string(name));
  }

  std::uint64_t seed() const noexcept { return seed_; }
  const std::string& label() const noexcept { return label_; }
  /// Number of 64-bit words consumed so far.
  std::uint64_t draws() const noexcept { return draws_; }

  std::uint64_t next_u64() {
    ++draws_;
    return engine_();
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Standard normal via Box-Muller; consumes exactly two words.
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Unbiased integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n) {
    if (n == 0) throw ContractError("uniform_index over an empty range");
    const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % n);
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// In-place Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = uniform_index(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  /// `count` distinct indices from [0, n), uniformly without replacement,
  /// in selection order (partial Fisher-Yates).
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t count) {
    if (count > n) throw ContractError("cannot draw more distinct items than available");
    // Partial Fisher-Yates over a virtual identity array; only swapped slots are stored.
    std::unordered_map<std::size_t, std::size_t> moved;
    auto at = [&moved](std::size_t i) {
      const auto it = moved.find(i);
      return it == moved.end() ? i : it->second;
    };
    std::vector<std::size_t> out(count);
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t j = i + uniform_index(n - i);
      const std::size_t vi = at(i), vj = at(j);
      out[i] = vj;
      moved[j] = vi;
    }
    return out;
  }

 private:
  std::uint64_t seed_;
  std::string label_;
  std::mt19937_64 engine_;
  std::uint64_t draws_ = 0;
};

}  // namespace hc2
