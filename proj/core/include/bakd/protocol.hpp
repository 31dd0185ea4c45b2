#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bakd/acquisition.hpp"
#include "bakd/channel.hpp"
#include "bakd/codec.hpp"
#include "bakd/data_io.hpp"
#include "bakd/models.hpp"

namespace bakd {

enum class Variant { bakd, ccbakd, baseline_random, baseline_max_entropy };

std::string to_string(Variant v);
Variant parse_variant(std::string_view s);

struct ProtocolConfig {
  Variant variant = Variant::bakd;
  std::size_t batch_size = 4;   // B
  double ratio = 0.0;           // R, compressed variant only
  std::uint64_t symbols = 784;  // N
  ChannelConfig channel;
  AcquisitionConfig acquisition;
  TrainingConfig training;
  MlpSpec learner = MlpSpec::learner();
  /// MC samples for the learner's test-accuracy estimate.
  std::size_t eval_samples = 25;
  /// Evaluate test accuracy every k rounds (0: only after the final round).
  std::size_t eval_every = 1;
  bool record_wall_time = false;

  bool compressed() const noexcept { return variant == Variant::ccbakd; }
  /// Strategy actually used for the variant (baselines and CC-BAKD override).
  Strategy strategy() const;
  void validate() const;
};

/// One completed communication round.
struct RoundRecord {
  std::size_t round = 0;                  // 1-based
  std::vector<std::size_t> selected;      // rows of the original pool
  double acq_score = 0.0;                 // NaN for unscored strategies
  std::uint64_t symbols_consumed = 0;     // cumulative after this round
  double distortion = 0.0;                // ||x_hat - x||^2 of the batch at the teacher
  double label_agreement = 0.0;           // argmax(estimated) == argmax(true) fraction
  double test_accuracy = 0.0;             // NaN when not evaluated this round
  double wall_ms = 0.0;
};

inline constexpr std::string_view kStopBudget = "budget";
inline constexpr std::string_view kStopPoolExhausted = "pool_exhausted";

struct RunResult {
  double initial_accuracy = 0.0;
  double final_accuracy = 0.0;
  std::vector<RoundRecord> rounds;
  std::string stop_reason;
};

/// The learner's evolving data: hard-labelled L0, teacher-labelled L_tr and
/// the remaining pool U (rows of the original pool, in original order).
struct DatasetState {
  ExampleSet labeled;
  std::vector<SoftExample> soft;
  std::vector<std::size_t> soft_rows;  // original pool row of each soft example
  std::vector<std::size_t> pool_rows;
  Matrix pool_features;

  /// Throws std::logic_error when any two sets share a source index.
  void check_disjoint() const;
};

/// Teacher soft labels for each row of `inputs` (dropout disabled).
std::vector<SoftLabel> teacher_label(const MlpClassifier& teacher, const Matrix& inputs);

enum class Phase { selected, transmitted, labelled, retrained };

/// A single protocol execution as a round-by-round state machine.
class ProtocolRun {
 public:
  /// The bundle, teacher and codec must outlive the run. `codec` is required
  /// for the compressed variant and ignored otherwise.
  ProtocolRun(ProtocolConfig cfg, const DatasetBundle& bundle, const MlpClassifier& teacher,
              const MixupCodec* codec, std::uint64_t seed);

  /// Fits the learner on L0 and measures the baseline accuracy.
  void initialize();
  /// Runs one round. Returns nullopt (and sets stop_reason) when the run ends.
  std::optional<RoundRecord> step();
  RunResult run_to_end();

  bool initialized() const noexcept { return initialized_; }
  bool finished() const noexcept { return !stop_reason_.empty(); }
  const std::string& stop_reason() const noexcept { return stop_reason_; }
  const DatasetState& state() const noexcept { return state_; }
  const MlpClassifier& learner() const noexcept { return learner_; }
  const FrameBudget& budget() const noexcept { return budget_; }
  const std::vector<RoundRecord>& records() const noexcept { return records_; }
  std::size_t per_round_symbols() const noexcept { return budget_.per_round(); }
  RunResult result() const;

  /// Called at each phase inside a round; used to observe or interrupt.
  void set_phase_hook(std::function<void(Phase)> hook) { hook_ = std::move(hook); }

  /// Round-resumable state. Rejected while a round is in progress.
  std::vector<std::uint8_t> snapshot() const;
  static ProtocolRun resume(std::span<const std::uint8_t> bytes, ProtocolConfig cfg,
                            const DatasetBundle& bundle, const MlpClassifier& teacher,
                            const MixupCodec* codec);

 private:
  std::uint64_t fingerprint() const;
  void finish(std::string_view reason);
  double evaluate(std::size_t round) const;
  void phase(Phase p);

  ProtocolConfig cfg_;
  const DatasetBundle* bundle_;
  const MlpClassifier* teacher_;
  const MixupCodec* codec_;
  std::uint64_t seed_;
  MlpClassifier learner_;
  DatasetState state_;
  FrameBudget budget_;
  std::vector<RoundRecord> records_;
  double initial_accuracy_ = 0.0;
  std::string stop_reason_;
  bool initialized_ = false;
  bool in_round_ = false;
  std::function<void(Phase)> hook_;
};

RunResult run_bakd(const ProtocolConfig& cfg, const DatasetBundle& bundle,
                   const MlpClassifier& teacher, std::uint64_t seed);
RunResult run_ccbakd(const ProtocolConfig& cfg, const DatasetBundle& bundle,
                     const MlpClassifier& teacher, const MixupCodec& codec, std::uint64_t seed);

}  // namespace bakd
