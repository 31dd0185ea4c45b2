#include "bakd/rng.hpp"

#include <bit>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace bakd {

Rng::Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

double Rng::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // 1 - u keeps the log argument in (0, 1].
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(angle);
  has_spare_ = true;
  return r * std::cos(angle);
}

namespace {
__extension__ using u128 = unsigned __int128;
}  // namespace

std::size_t Rng::uniform_index(std::size_t n) {
  if (n == 0) throw std::invalid_argument("Rng::uniform_index: empty range");
  const auto range = static_cast<std::uint64_t>(n);
  u128 product = static_cast<u128>(engine_()) * range;
  auto low = static_cast<std::uint64_t>(product);
  if (low < range) {
    const std::uint64_t threshold = (0 - range) % range;
    while (low < threshold) {
      product = static_cast<u128>(engine_()) * range;
      low = static_cast<std::uint64_t>(product);
    }
  }
  return static_cast<std::size_t>(product >> 64);
}

std::string Rng::serialize() const {
  std::ostringstream os;
  os << seed_ << ' ' << (has_spare_ ? 1 : 0) << ' ' << std::bit_cast<std::uint64_t>(spare_) << ' '
     << engine_;
  return os.str();
}

Rng Rng::deserialize(const std::string& state) {
  std::istringstream is(state);
  std::uint64_t seed = 0;
  int spare_flag = 0;
  std::uint64_t spare_bits = 0;
  is >> seed >> spare_flag >> spare_bits;
  Rng rng(seed);
  is >> rng.engine_;
  if (!is) throw std::runtime_error("Rng::deserialize: malformed state");
  rng.has_spare_ = spare_flag != 0;
  rng.spare_ = std::bit_cast<double>(spare_bits);
  return rng;
}

std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t root, std::string_view role, std::uint64_t a,
                          std::uint64_t b) noexcept {
  // FNV-1a over the role name, then chained SplitMix64.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : role) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  std::uint64_t s = mix64(root ^ mix64(h));
  s = mix64(s ^ mix64(a + 0x632be59bd9b4e019ULL));
  s = mix64(s ^ mix64(b + 0x85157af5ULL));
  return s;
}

}  // namespace bakd
