#pragma once

#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace nspforge {

// Resolves the worker count: explicit request > NSP_FORGE_THREADS > 1.
inline int resolve_threads(int requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("NSP_FORGE_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return 1;
}

inline int& global_threads() {
  static int n = 1;
  return n;
}

// Runs fn(chunk_begin, chunk_end) over [0, n) in fixed-size chunks. Chunking
// is independent of the worker count, so any reduction that stores one
// partial per chunk and combines them in chunk order is bit-identical for
// every thread count. Chunks are assigned round-robin (chunk i -> worker
// i % workers): no queue, no atomics.
template <class Fn>
void parallel_chunks(size_t n, size_t chunk, Fn&& fn) {
  if (n == 0) return;
  const size_t nchunks = (n + chunk - 1) / chunk;
  const int workers =
      static_cast<int>(std::min<size_t>(global_threads(), nchunks));
  if (workers <= 1) {
    for (size_t c = 0; c < nchunks; ++c)
      fn(c * chunk, std::min(n, (c + 1) * chunk), c);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int wkr = 0; wkr < workers; ++wkr) {
    pool.emplace_back([&, wkr] {
      for (size_t c = wkr; c < nchunks; c += workers)
        fn(c * chunk, std::min(n, (c + 1) * chunk), c);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace nspforge
