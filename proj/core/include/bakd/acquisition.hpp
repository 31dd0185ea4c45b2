#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bakd/codec.hpp"
#include "bakd/models.hpp"
#include "bakd/numerics.hpp"
#include "bakd/rng.hpp"

namespace bakd {

enum class Strategy {
  batchbald,
  batchbald_compression_aware,
  random,
  max_entropy,
};

std::string to_string(Strategy s);
Strategy parse_strategy(std::string_view s);

struct AcquisitionConfig {
  std::size_t batch_size = 4;
  std::size_t mc_samples = 25;
  /// Largest K^b enumerated exactly; beyond it the joint entropy is sampled.
  std::uint64_t joint_config_limit = 1'000'000;
  std::size_t joint_samples = 10'000;
  Strategy strategy = Strategy::batchbald;

  bool epistemic() const noexcept {
    return strategy == Strategy::batchbald || strategy == Strategy::batchbald_compression_aware;
  }
  void validate() const;
};

struct ScoredBatch {
  std::vector<std::size_t> indices;  // positions in the pool, in selection order
  double score = 0.0;                // NaN when the strategy does not score
  std::vector<double> step_scores;   // greedy prefix scores (or per-pick entropies)
};

/// Mean entropy of the rows of an S x K table: (1/S) sum_s H(row_s).
double mean_row_entropy(const Matrix& sample_probs);

/// H(mean row) - mean row entropy, for one point's S x K sample table.
double bald_score(const Matrix& sample_probs);

/// Products of per-sample label probabilities over all K^n configurations:
/// out(s, c) = prod_j tables[j](s, y_j) with c = (..(y_1 K + y_2) K ..) + y_n.
/// An empty list gives an S x 1 column of ones.
Matrix joint_sample_products(std::span<const Matrix* const> tables, std::size_t samples);

/// Entropy of p(c, y) = (1/S) sum_s prefix(s, c) * last(s, y).
double joint_entropy_from_prefix(const Matrix& prefix, const Matrix& last);

/// Exact H(y_1..y_b) under the shared-sample mixture, by full enumeration.
double joint_entropy_exact(std::span<const Matrix* const> tables);

struct SampledEntropy {
  double value = 0.0;
  double std_error = 0.0;
};

/// Monte-Carlo H(y_1..y_b): configurations are drawn from the mixture itself
/// (pick s uniformly, then y_j ~ tables[j](s, .)) and -log p(config) averaged.
SampledEntropy joint_entropy_sampled(std::span<const Matrix* const> tables, std::size_t draws,
                                     Rng& rng);

/// BatchBALD: H(y_1..y_b) - sum_j (1/S) sum_s H(y_j | theta_s). Exact when
/// K^b <= joint_config_limit, otherwise sampled with `rng`.
double batchbald_score(std::span<const Matrix* const> tables, const AcquisitionConfig& cfg,
                       Rng* rng = nullptr);
double batchbald_score(std::span<const Matrix> tables, const AcquisitionConfig& cfg,
                       Rng* rng = nullptr);

/// Greedy BatchBALD over precomputed per-point tables (all sharing thetas).
ScoredBatch greedy_select_tables(std::span<const Matrix> pool_tables, const AcquisitionConfig& cfg,
                                 Rng& rng);

/// Greedy batch acquisition on a pool (one input per row). MC dropout
/// samples are drawn once and shared by every candidate scoring. With a
/// codec, each candidate batch is scored on its decoded surrogates: the b
/// chosen inputs fill slots 1..b, later slots hold zeros, and ZZ^T is applied.
ScoredBatch greedy_select(const Matrix& pool, const MlpClassifier& model,
                          const AcquisitionConfig& cfg, const MixupCodec* codec, Rng& rng);

/// Top-B pool points by entropy of the MC-mean predictive distribution.
ScoredBatch max_entropy_select(const Matrix& pool, const MlpClassifier& model,
                               const AcquisitionConfig& cfg, Rng& rng);

/// B distinct uniformly random pool positions.
ScoredBatch random_select(std::size_t pool_size, const AcquisitionConfig& cfg, Rng& rng);

/// Dispatches on cfg.strategy. `codec` is used only by the compression-aware strategy.
ScoredBatch select_batch(const Matrix& pool, const MlpClassifier& model,
                         const AcquisitionConfig& cfg, const MixupCodec* codec, Rng& rng);

}  // namespace bakd
