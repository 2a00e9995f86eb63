#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

#include "sonata/error.hpp"

namespace sonata {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Deterministic stream of seeds derived from a run-level seed.
class SeedSequence {
 public:
  explicit SeedSequence(std::uint64_t seed) : state_(seed) {}
  std::uint64_t next() { return splitmix64(state_++); }

 private:
  std::uint64_t state_;
};

// Seeded 64-bit hash over key bytes: word-wise multiply-xorshift folding, then a
// seed-dependent multiply-shift finalizer.
inline std::uint64_t hash_bytes(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = seed ^ (bytes.size() * 0x9e3779b97f4a7c15ULL);
  std::size_t i = 0;
  for (; i + 8 <= bytes.size(); i += 8) {
    std::uint64_t w = 0;
    for (int b = 0; b < 8; ++b) w |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[i + b])) << (8 * b);
    h = splitmix64(h ^ w);
  }
  std::uint64_t tail = 0;
  for (int b = 0; i < bytes.size(); ++i, ++b)
    tail |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[i])) << (8 * b);
  h = splitmix64(h ^ tail);
  const std::uint64_t a = (seed * 2 + 1) | 1;  // odd multiplier
  return (a * h) ^ ((a * h) >> 29);
}

struct SketchDims {
  std::size_t width = 1;  // m
  std::size_t depth = 1;  // k
};

// Count-min sizing: m = ceil(e / eps), k = ceil(ln(1 / delta)).
inline SketchDims count_min_dims(double epsilon, double delta) {
  if (!(epsilon > 0 && epsilon < 1) || !(delta > 0 && delta < 1))
    throw ArgumentError("sketch error parameters must lie in (0, 1)");
  SketchDims d;
  d.width = static_cast<std::size_t>(std::ceil(std::exp(1.0) / epsilon));
  d.depth = static_cast<std::size_t>(std::ceil(std::log(1.0 / delta)));
  d.depth = std::max<std::size_t>(d.depth, 1);
  return d;
}

// Bloom sizing: same probe count as the count-min; the bit array covers the same
// number of cells (k * m bits).
inline SketchDims bloom_dims(double epsilon, double delta) {
  SketchDims cm = count_min_dims(epsilon, delta);
  return SketchDims{cm.width * cm.depth, cm.depth};
}

inline std::vector<std::uint64_t> derive_seeds(std::uint64_t seed, std::size_t n) {
  SeedSequence seq(seed);
  std::vector<std::uint64_t> out;
  while (out.size() < n) {
    auto s = seq.next();
    if (std::find(out.begin(), out.end(), s) == out.end()) out.push_back(s);
  }
  return out;
}

class CountMinSketch {
 public:
  static constexpr unsigned kCounterBits = 32;

  CountMinSketch(std::size_t width, std::size_t depth, std::uint64_t seed)
      : width_(width), depth_(depth), seeds_(derive_seeds(seed, depth)), counters_(width * depth, 0) {
    if (width == 0 || depth == 0) throw ArgumentError("count-min dimensions must be positive");
  }

  CountMinSketch(SketchDims d, std::uint64_t seed) : CountMinSketch(d.width, d.depth, seed) {}

  // Add `by` to the key's counters; returns the new estimate.
  std::uint64_t update(std::string_view key, std::uint64_t by = 1) {
    std::uint64_t est = UINT64_MAX;
    for (std::size_t row = 0; row < depth_; ++row) {
      auto& c = counters_[row * width_ + index(key, row)];
      c = saturating_add(c, by);
      est = std::min<std::uint64_t>(est, c);
    }
    return est;
  }

  std::uint64_t estimate(std::string_view key) const {
    std::uint64_t est = UINT64_MAX;
    for (std::size_t row = 0; row < depth_; ++row)
      est = std::min<std::uint64_t>(est, counters_[row * width_ + index(key, row)]);
    return est;
  }

  void reset() { std::fill(counters_.begin(), counters_.end(), 0); }

  std::size_t width() const { return width_; }
  std::size_t depth() const { return depth_; }
  const std::vector<std::uint64_t>& seeds() const { return seeds_; }
  std::uint64_t state_bits() const { return static_cast<std::uint64_t>(width_) * depth_ * kCounterBits; }

 private:
  static std::uint32_t saturating_add(std::uint32_t c, std::uint64_t by) {
    std::uint64_t s = static_cast<std::uint64_t>(c) + by;
    return s > UINT32_MAX ? UINT32_MAX : static_cast<std::uint32_t>(s);
  }

  std::size_t index(std::string_view key, std::size_t row) const { return hash_bytes(key, seeds_[row]) % width_; }

  std::size_t width_, depth_;
  std::vector<std::uint64_t> seeds_;
  std::vector<std::uint32_t> counters_;
};

class BloomFilter {
 public:
  BloomFilter(std::size_t bits, std::size_t probes, std::uint64_t seed)
      : bits_(bits), seeds_(derive_seeds(seed, probes)), array_(bits, false) {
    if (bits == 0 || probes == 0) throw ArgumentError("bloom dimensions must be positive");
  }

  BloomFilter(SketchDims d, std::uint64_t seed) : BloomFilter(d.width, d.depth, seed) {}

  // Insert; returns true when the key was already (possibly falsely) present.
  bool insert(std::string_view key) {
    bool present = true;
    for (auto s : seeds_) {
      auto bit = array_.begin() + static_cast<std::ptrdiff_t>(hash_bytes(key, s) % bits_);
      present = present && *bit;
      *bit = true;
    }
    return present;
  }

  bool query(std::string_view key) const {
    for (auto s : seeds_)
      if (!array_[hash_bytes(key, s) % bits_]) return false;
    return true;
  }

  void reset() { std::fill(array_.begin(), array_.end(), false); }

  std::size_t bits() const { return bits_; }
  std::size_t probes() const { return seeds_.size(); }
  const std::vector<std::uint64_t>& seeds() const { return seeds_; }
  std::uint64_t state_bits() const { return bits_; }

 private:
  std::size_t bits_;
  std::vector<std::uint64_t> seeds_;
  std::vector<bool> array_;
};

}  // namespace sonata
