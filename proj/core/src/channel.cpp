#include "bakd/channel.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace bakd {

void ChannelConfig::validate() const {
  if (!(noise_power >= 0.0) || !std::isfinite(noise_power)) {
    throw std::invalid_argument("ChannelConfig: noise power must be finite and >= 0");
  }
}

std::uint64_t rounds_available(std::uint64_t total, std::uint64_t per_round) {
  if (per_round == 0) throw std::invalid_argument("rounds_available: per-round cost is zero");
  return total / per_round;
}

std::uint64_t compressed_symbols(std::size_t batch, std::size_t dim, double ratio) {
  if (!(ratio >= 0.0 && ratio < 1.0)) {
    throw std::invalid_argument("compression ratio " + std::to_string(ratio) + " outside [0, 1)");
  }
  const double full = static_cast<double>(batch) * static_cast<double>(dim);
  // The small slack absorbs representation error such as (1 - 0.5) * 4 = 1.9999...
  const auto m = static_cast<std::uint64_t>(std::floor((1.0 - ratio) * full + 1e-9));
  return std::max<std::uint64_t>(1, std::min<std::uint64_t>(m, batch * dim));
}

double rounds_real_valued(std::uint64_t total, std::size_t batch, std::size_t dim, double ratio) {
  return static_cast<double>(total) /
         ((1.0 - ratio) * static_cast<double>(batch) * static_cast<double>(dim));
}

FrameBudget::FrameBudget(std::uint64_t total, std::uint64_t per_round)
    : total_(total), per_round_(per_round) {
  if (per_round == 0) throw std::invalid_argument("FrameBudget: per-round cost is zero");
}

bool FrameBudget::try_consume(std::uint64_t symbols) {
  if (refused_ || symbols > remaining()) {
    refused_ = true;
    return false;
  }
  consumed_ += symbols;
  return true;
}

FrameBudget FrameBudget::restore(std::uint64_t total, std::uint64_t per_round,
                                 std::uint64_t consumed, bool refused) {
  FrameBudget b(total, per_round);
  if (consumed > total) throw std::invalid_argument("FrameBudget: consumed exceeds total");
  b.consumed_ = consumed;
  b.refused_ = refused;
  return b;
}

std::optional<Vector> transmit(std::span<const double> symbols, const ChannelConfig& cfg,
                               FrameBudget& budget, Rng& rng) {
  cfg.validate();
  if (!budget.try_consume(symbols.size())) return std::nullopt;
  Vector out = Eigen::Map<const Vector>(symbols.data(), static_cast<Eigen::Index>(symbols.size()));
  if (cfg.noise_power > 0.0) {
    const double sd = std::sqrt(cfg.noise_power);
    for (Eigen::Index i = 0; i < out.size(); ++i) out[i] += sd * rng.normal();
  }
  return out;
}

}  // namespace bakd
