#pragma once

#include <cstdint>
#include <random>

namespace longgee {

// splitmix64 step; used to derive independent engine seeds from a base seed
// plus a stream index, so parallel workers get reproducible streams.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    return splitmix64(splitmix64(seed) ^ stream);
}

inline std::mt19937_64 make_engine(std::uint64_t seed, std::uint64_t stream = 0) {
    return std::mt19937_64(mix_seed(seed, stream));
}

} // namespace longgee
