#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <stdexcept>
#include <string>

namespace epicache {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using IntVector = Eigen::VectorXi;
using Index = Eigen::Index;

// Error taxonomy shared by all modules.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ParamError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Derives independent RNG streams from a base seed plus context words
// (stream tag, sample index, ...). Order-sensitive.
inline std::uint64_t mix_seed(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x9e3779b97f4a7c15ull;
  for (std::uint64_t p : parts) h = splitmix64(h ^ splitmix64(p));
  return h;
}

// Stream tags keep per-purpose randomness disjoint under one user seed.
namespace seed_stream {
constexpr std::uint64_t init = 0x01;
constexpr std::uint64_t shuffle = 0x02;
constexpr std::uint64_t augment = 0x03;
constexpr std::uint64_t attack_target = 0x04;
constexpr std::uint64_t attack_start = 0x05;
constexpr std::uint64_t corrupt = 0x06;
constexpr std::uint64_t sample = 0x07;
constexpr std::uint64_t kmeans = 0x08;
}  // namespace seed_stream

std::uint64_t fnv1a64(const void* data, std::size_t size);
std::string hex64(std::uint64_t value);

// First index of the maximum entry; ties resolve to the lowest index.
inline Index argmax(const Vector& v) {
  Index best = 0;
  for (Index i = 1; i < v.size(); ++i)
    if (v(i) > v(best)) best = i;
  return best;
}

// Runs body(i) for i in [0, n). Work is split into contiguous chunks, one
// per worker; results must be written to per-index slots so the outcome is
// independent of the worker count. workers == 0 picks the hardware count.
void parallel_for(Index n, const std::function<void(Index)>& body,
                  unsigned workers = 0);

}  // namespace epicache
