#pragma once

#include <exception>
#include <thread>
#include <vector>

namespace icafs::vfl {

/// Runs fn(k) for k in [0, n), one thread per party when workers > 1. The first failure is rethrown.
template <typename F>
void for_each_party(int n, int workers, F&& fn) {
  if (workers <= 1 || n <= 1) {
    for (int k = 0; k < n; ++k) fn(k);
    return;
  }
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
  std::vector<std::thread> threads;
  threads.reserve(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) {
    threads.emplace_back([&, k] {
      try {
        fn(k);
      } catch (...) {
        errors[static_cast<std::size_t>(k)] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace icafs::vfl
