#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace anchornet {

/// Named, splittable seed. Every consumer derives its own stream through
/// split() so two modules never draw from the same generator by accident.
class SeedTree {
 public:
  explicit SeedTree(std::uint64_t seed) : state_(mix(seed)) {}

  SeedTree split(std::string_view name) const {
    std::uint64_t h = 1469598103934665603ull;  // FNV-1a
    for (unsigned char ch : name) {
      h ^= ch;
      h *= 1099511628211ull;
    }
    return SeedTree(state_ ^ mix(h), Raw{});
  }
  SeedTree split(std::uint64_t index) const {
    return SeedTree(mix(state_ + 0x9e3779b97f4a7c15ull * (index + 1)), Raw{});
  }

  std::uint64_t value() const { return state_; }
  std::mt19937_64 engine() const { return std::mt19937_64(state_); }

 private:
  struct Raw {};
  SeedTree(std::uint64_t state, Raw) : state_(state) {}

  static std::uint64_t mix(std::uint64_t z) {  // splitmix64 finalizer
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  std::uint64_t state_;
};

}  // namespace anchornet
