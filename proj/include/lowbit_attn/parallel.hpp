// Copyright 2026 The lowbit-attn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace lowbit_attn {

namespace detail {
inline std::atomic<unsigned>& thread_override() {
  static std::atomic<unsigned> value{0};
  return value;
}
}  // namespace detail

/// Worker count for tile-parallel loops. Priority: set_thread_count(),
/// then LOWBIT_ATTN_THREADS, then the hardware concurrency.
inline unsigned thread_count() {
  if (const unsigned forced = detail::thread_override().load(); forced > 0) return forced;
  if (const char* env = std::getenv("LOWBIT_ATTN_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v > 0) return static_cast<unsigned>(v);
    } catch (const std::exception&) {
      // ignored: fall through to the hardware default
    }
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// 0 restores the default.
inline void set_thread_count(unsigned n) { detail::thread_override().store(n); }

/// Runs fn(i) for i in [0, n). Every index must write disjoint outputs; the
/// result is then independent of the worker count.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const std::size_t workers = std::min<std::size_t>(thread_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  std::vector<std::jthread> pool;
  pool.reserve(workers - 1);
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  pool.clear();
  if (error) std::rethrow_exception(error);
}

}  // namespace lowbit_attn
