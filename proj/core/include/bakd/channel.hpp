#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>

#include "bakd/numerics.hpp"
#include "bakd/rng.hpp"

namespace bakd {

/// Additive white Gaussian noise on real symbols.
struct ChannelConfig {
  double noise_power = 0.0;  // variance per real symbol (gamma^-1)
  std::uint64_t seed = 0;

  void validate() const;
};

/// Number of full rounds a budget of `total` symbols pays for at
/// `per_round` symbols each. Throws when per_round == 0.
std::uint64_t rounds_available(std::uint64_t total, std::uint64_t per_round);

/// Integer symbols per round for a compressed batch: max(1, floor((1-R)*B*D)).
std::uint64_t compressed_symbols(std::size_t batch, std::size_t dim, double ratio);

/// The real-valued round count N / ((1-R)*B*D), kept for reporting only.
double rounds_real_valued(std::uint64_t total, std::size_t batch, std::size_t dim, double ratio);

/// Learner-to-teacher symbol accounting. Once a transmission is refused the
/// budget is frozen: `consumed` never changes again.
class FrameBudget {
 public:
  FrameBudget(std::uint64_t total, std::uint64_t per_round);

  std::uint64_t total() const noexcept { return total_; }
  std::uint64_t per_round() const noexcept { return per_round_; }
  std::uint64_t consumed() const noexcept { return consumed_; }
  std::uint64_t remaining() const noexcept { return total_ - consumed_; }
  std::uint64_t rounds() const { return rounds_available(total_, per_round_); }
  bool refused() const noexcept { return refused_; }

  /// Charges `symbols` if affordable; otherwise marks the budget refused.
  bool try_consume(std::uint64_t symbols);

  static FrameBudget restore(std::uint64_t total, std::uint64_t per_round, std::uint64_t consumed,
                             bool refused);

 private:
  std::uint64_t total_;
  std::uint64_t per_round_;
  std::uint64_t consumed_ = 0;
  bool refused_ = false;
};

/// Sends `symbols` through the channel: charges the budget and adds i.i.d.
/// N(0, noise_power) noise. Returns nullopt, leaving the vector undelivered,
/// when the remaining budget is smaller than the vector.
std::optional<Vector> transmit(std::span<const double> symbols, const ChannelConfig& cfg,
                               FrameBudget& budget, Rng& rng);

}  // namespace bakd
