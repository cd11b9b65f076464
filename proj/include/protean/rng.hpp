#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace protean {

using Rng = std::mt19937_64;

/// Derives an independent seed for a named stream (partition, init, dropout,
/// dp, attack, ...) so each source of randomness can be varied on its own.
std::uint64_t derive_seed(std::uint64_t base, std::string_view stream, std::uint64_t index = 0);

inline Rng make_rng(std::uint64_t base, std::string_view stream, std::uint64_t index = 0) {
  return Rng(derive_seed(base, stream, index));
}

}  // namespace protean
