#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace bakd {

/// Seeded pseudo-random source with a platform-independent draw sequence.
///
/// The engine is std::mt19937_64, whose output sequence is fixed by the C++
/// standard. The standard library distributions are NOT portable, so every
/// derived draw is defined here:
///   uniform()        (u >> 11) * 2^-53, a double in [0, 1)
///   normal()         Box-Muller on two uniforms, the second deviate cached
///   uniform_index(n) Lemire's multiply-shift with rejection
///   shuffle(v)       Fisher-Yates from the back using uniform_index
/// A single Rng must never be shared across threads; derive child seeds.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() { return engine_(); }
  double uniform();
  double normal();
  bool bernoulli(double p) { return uniform() < p; }
  std::size_t uniform_index(std::size_t n);

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[uniform_index(i)]);
    }
  }

  /// Textual engine state (std::mt19937_64 stream format) plus the cached
  /// normal deviate, so a restored Rng continues bit-identically.
  std::string serialize() const;
  static Rng deserialize(const std::string& state);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// SplitMix64 finaliser.
std::uint64_t mix64(std::uint64_t x) noexcept;

/// Child seed for a named role: hash(root, role, a, b). Used to give every
/// (repetition, round, purpose) its own independent stream.
std::uint64_t derive_seed(std::uint64_t root, std::string_view role, std::uint64_t a = 0,
                          std::uint64_t b = 0) noexcept;

}  // namespace bakd
