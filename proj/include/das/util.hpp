#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string_view>
#include <vector>

namespace das {

// 64-bit FNV-1a.
std::uint64_t fnv1a(std::span<const std::byte> bytes,
                    std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a(std::string_view text);

// SplitMix64 finalizer; used to derive independent stream seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

using Rng = std::mt19937_64;

// Seeded Fisher-Yates permutation of 0..n-1. Uses only raw engine output so
// the result does not depend on the standard library's distributions.
std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed);

// Uniform integer in [0, bound) from raw engine output (Lemire-free modulo
// with rejection; portable across standard libraries).
std::uint64_t uniform_below(Rng& rng, std::uint64_t bound);

// Runs fn(i) for i in [0, n) on up to n_workers threads. Work items are
// claimed dynamically; fn must write results by index only.
void parallel_for(std::size_t n, std::size_t n_workers,
                  const std::function<void(std::size_t)>& fn);

std::string hex64(std::uint64_t value);

}  // namespace das
