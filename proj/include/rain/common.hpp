#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace rain {

using Rng = std::mt19937_64;

/// Raised when a dataset or evaluation call violates the retrieval protocol
/// (missing HR gallery image, query identity absent from gallery, ...).
class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised for invalid experiment/training configuration. The CLI maps this to
/// exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training hit a non-finite loss. Carries the offending step.
class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(const std::string& what, long step)
      : std::runtime_error(what), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

// splitmix64 finalizer; used to derive independent child seeds from
// (seed, stream) so no RNG state is ever shared between components.
constexpr std::uint64_t mix_seed(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) noexcept {
  return mix_seed(mix_seed(seed) ^ mix_seed(stream + 0x632be59bd9b4e019ULL));
}

inline Rng make_rng(std::uint64_t seed, std::uint64_t stream) {
  return Rng(derive_seed(seed, stream));
}

}  // namespace rain
