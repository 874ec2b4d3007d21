#pragma once

#include "dfiv/linalg.hpp"

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace dfiv {

namespace detail {

inline constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

// splitmix64 finalizer; a bijection on u64.
inline std::uint64_t mix64(std::uint64_t x) {
  x ^= x >> 30;
  x *= 0xBF58476D1CE4E5B9ULL;
  x ^= x >> 27;
  x *= 0x94D049BB133111EBULL;
  x ^= x >> 31;
  return x;
}

}  // namespace detail

/// Counter-based random stream. A draw is a pure function of
/// (seed, stream_id, counter), so identical (seed, stream_id) replay the
/// same sequence and distinct stream ids give unrelated sequences.
/// Single-owner: concurrent draws from one stream are not allowed;
/// parallel work must fork substreams.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed, std::uint64_t stream_id = 0)
      : seed_(seed), stream_id_(stream_id) {
    key_ = detail::mix64(detail::mix64(seed + detail::kGolden) ^
                         detail::mix64(stream_id ^ 0xD1B54A32D192ED03ULL));
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }

  std::uint64_t next_u64() { return detail::mix64(key_ + detail::kGolden * ++counter_); }

  /// Uniform in [0, 1), 53 mantissa bits.
  double next_uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform in [lo, hi).
  double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_uniform(); }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t next_below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("RngStream::next_below: n == 0");
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  /// Standard normal via Box-Muller. Consumes two u64 draws per value.
  double next_gaussian() {
    // Offset keeps u1 in (0,1) so log() stays finite.
    double u1 = (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  /// Child stream derived from this stream's identity and a tag.
  /// The child starts at counter 0; the parent state is untouched.
  RngStream fork(std::uint64_t tag) const {
    return RngStream(seed_, detail::mix64(stream_id_ ^ (detail::kGolden * (tag + 1))));
  }

  /// Fisher-Yates shuffle of the first `take` elements against the whole
  /// vector (partial shuffle); take == size gives a full shuffle.
  template <typename T>
  void partial_shuffle(std::vector<T>& v, std::size_t take) {
    if (take > v.size()) throw std::invalid_argument("partial_shuffle: take > size");
    for (std::size_t i = 0; i < take; ++i) {
      std::size_t j = i + static_cast<std::size_t>(next_below(v.size() - i));
      std::swap(v[i], v[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

/// n i.i.d. draws from N(mean, sd^2). sd == 0 returns the constant mean
/// without consuming stream state.
inline Vec sample_gaussian(RngStream& rng, double mean, double sd, Index n) {
  if (sd < 0) throw std::invalid_argument("sample_gaussian: negative sd");
  Vec out(n);
  if (sd == 0.0) {
    out.setConstant(mean);
    return out;
  }
  for (Index i = 0; i < n; ++i) out[i] = mean + sd * rng.next_gaussian();
  return out;
}

inline Vec sample_uniform(RngStream& rng, double lo, double hi, Index n) {
  Vec out(n);
  for (Index i = 0; i < n; ++i) out[i] = rng.next_uniform(lo, hi);
  return out;
}

/// First `count` indices of a fresh random permutation of {0, .., n-1}.
/// count == n consumes no randomness and returns identity order, so
/// full-batch runs are independent of the stream.
inline std::vector<Index> sample_indices(RngStream& rng, Index n, Index count) {
  if (count > n) throw std::invalid_argument("sample_indices: count > n");
  std::vector<Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Index{0});
  if (count == n) return idx;
  rng.partial_shuffle(idx, static_cast<std::size_t>(count));
  idx.resize(static_cast<std::size_t>(count));
  return idx;
}

}  // namespace dfiv
