#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string_view>

namespace dpstride {

// Finalizer from the splitmix64 generator. Bijective on 64-bit words, so
// distinct counters never collide within a stream.
inline constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Derives a child seed from (seed, salt). Used to give every sample index,
// grid index, and pipeline stage its own independent stream.
inline constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
  return mix64(mix64(seed) ^ mix64(salt + 0x5851f42d4c957f2dull));
}

// Tagged variant for separating pipeline stages ("table", "train", "eval").
inline constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
  std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return derive_seed(seed, h);
}

// Stream ids reserved by the estimation pipeline. A per-sample seed is
// derive_seed(stage_seed, sample_index); within it, stream 0 draws the data
// point, kNoiseStreamBase + t_idx draws the corruption noise at grid index
// t_idx, and kChainStream drives ancestral sampling. Keeping these fixed is
// what lets a cost-table entry be replayed exactly from (seed, index) alone.
inline constexpr std::uint64_t kDataStream = 0;
inline constexpr std::uint64_t kChainStream = 1;
inline constexpr std::uint64_t kEvalNoiseStream = 2;
inline constexpr std::uint64_t kNoiseStreamBase = 1u << 20;

// Counter-based generator: value i of stream (seed, stream_id) is a pure
// function of (seed, stream_id, i). No state beyond the counter, so any
// stream can be reopened anywhere and replayed.
class RandomStream {
public:
  RandomStream(std::uint64_t seed, std::uint64_t stream_id)
      : key_(derive_seed(seed, stream_id)) {}

  std::uint64_t next_u64() { return mix64(key_ + 0x9e3779b97f4a7c15ull * ++counter_); }

  // Uniform on [0,1) with 53 random bits.
  double next_uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller; the second variate of each pair is cached.
  double next_gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - next_uniform();  // (0,1], keeps the log finite
    double u2 = next_uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  void fill_gaussian(std::span<double> out) {
    for (double& v : out) v = next_gaussian();
  }

private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace dpstride
