#include <epicache/common.hpp>

#include <algorithm>
#include <exception>
#include <thread>
#include <vector>

namespace epicache {

std::uint64_t fnv1a64(const void* data, std::size_t size) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string hex64(std::uint64_t value) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[value & 0xf];
    value >>= 4;
  }
  return out;
}

void parallel_for(Index n, const std::function<void(Index)>& body,
                  unsigned workers) {
  if (n <= 0) return;
  if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
  workers = static_cast<unsigned>(
      std::min<Index>(static_cast<Index>(workers), n));
  if (workers <= 1) {
    for (Index i = 0; i < n; ++i) body(i);
    return;
  }

  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  pool.reserve(workers);
  for (unsigned t = 0; t < workers; ++t) {
    const Index begin = n * t / workers;
    const Index end = n * (t + 1) / workers;
    pool.emplace_back([&, begin, end, t] {
      try {
        for (Index i = begin; i < end; ++i) body(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace epicache
