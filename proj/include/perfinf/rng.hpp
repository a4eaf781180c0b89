#pragma once

#include <array>
#include <cstdint>
#include <initializer_list>

namespace perfinf {

/// Counter-based pseudo-random stream (Philox 4x32-10).
///
/// Substreams are derived from key material rather than generator state, so a
/// stream addressed by (seed, ids...) produces the same values no matter what
/// other streams were consumed before it. Replications, time steps and players
/// each get their own substream and serial/parallel runs agree bit for bit.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed);

  /// Derives an independent child stream keyed by (this stream, ids...).
  RngStream substream(std::initializer_list<std::uint64_t> ids) const;

  std::uint64_t next_u64();

  /// Uniform double in [0, 1).
  double uniform();
  /// Uniform double in [lo, hi).
  double uniform(double lo, double hi);
  /// Standard normal via Box-Muller (second variate cached).
  double normal();
  double normal(double mean, double sd);

 private:
  RngStream() = default;
  void seed_from_key(std::uint64_t key64);
  void refill();

  std::uint64_t root_key_ = 0;  // derivation key, not mutated by draws
  std::array<std::uint32_t, 2> key_{};
  std::array<std::uint32_t, 4> counter_{};
  std::array<std::uint32_t, 4> block_{};
  int block_pos_ = 4;
  double cached_normal_ = 0.0;
  bool has_cached_normal_ = false;
};

namespace detail {
/// One Philox 4x32-10 block; exposed for known-answer tests.
std::array<std::uint32_t, 4> philox4x32_10(std::array<std::uint32_t, 4> counter,
                                           std::array<std::uint32_t, 2> key);
std::uint64_t splitmix64(std::uint64_t& state);
}  // namespace detail

}  // namespace perfinf
