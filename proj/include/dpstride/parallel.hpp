#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <thread>
#include <vector>

namespace dpstride {

// Work items are split into fixed chunks; each chunk accumulates into its own
// slot and the slots are merged by a balanced pairwise tree. Both the chunk
// boundaries and the merge tree depend only on n_items, never on how many
// workers ran, so results are bit-identical across thread counts.

inline constexpr std::uint64_t kReduceChunk = 64;

inline int resolve_threads(int requested) {
  if (requested > 0) return requested;
  unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<int>(hw) : 1;
}

// fn(chunk_index, begin, end, partial) fills the partial for [begin, end).
template <typename Partial, typename Fn>
std::vector<Partial> map_chunks(std::uint64_t n_items, int n_threads, Fn&& fn) {
  std::uint64_t n_chunks = (n_items + kReduceChunk - 1) / kReduceChunk;
  std::vector<Partial> parts(n_chunks);
  auto work = [&](std::uint64_t c) {
    std::uint64_t begin = c * kReduceChunk;
    std::uint64_t end = std::min(begin + kReduceChunk, n_items);
    fn(c, begin, end, parts[c]);
  };
  n_threads = resolve_threads(n_threads);
  if (n_threads <= 1 || n_chunks <= 1) {
    for (std::uint64_t c = 0; c < n_chunks; ++c) work(c);
    return parts;
  }
  std::atomic<std::uint64_t> next{0};
  std::vector<std::thread> pool;
  int workers = static_cast<int>(std::min<std::uint64_t>(n_chunks, n_threads));
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        std::uint64_t c = next.fetch_add(1);
        if (c >= n_chunks) return;
        work(c);
      }
    });
  }
  for (auto& th : pool) th.join();
  return parts;
}

// combine(a, b) must write a+b into a. Reduction order is a fixed balanced
// tree over the chunk slots.
template <typename Partial, typename Combine>
Partial pairwise_reduce(std::vector<Partial> parts, Combine&& combine) {
  while (parts.size() > 1) {
    std::size_t half = (parts.size() + 1) / 2;
    for (std::size_t i = 0; i + i + 1 < parts.size(); ++i)
      combine(parts[2 * i], parts[2 * i + 1]);
    std::vector<Partial> merged;
    merged.reserve(half);
    for (std::size_t i = 0; i < parts.size(); i += 2) merged.push_back(std::move(parts[i]));
    parts = std::move(merged);
  }
  return std::move(parts.front());
}

}  // namespace dpstride
