#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "bakd/data_io.hpp"
#include "bakd/numerics.hpp"
#include "bakd/rng.hpp"

namespace bakd {

/// Fully connected ReLU network shape plus its dropout sites.
///
/// `dropout` holds one drop probability per site. Site 0 feeds the first
/// layer (input dropout); site l feeds layer l, so the last entry is the
/// pre-output site. Dropout is inverted: kept units are scaled by 1/(1-p).
struct MlpSpec {
  std::size_t input_dim = 784;
  std::vector<std::size_t> hidden{800, 800};
  std::size_t classes = 10;
  std::vector<double> dropout{0.0, 0.0, 0.5};

  std::size_t layers() const noexcept { return hidden.size() + 1; }
  std::size_t fan_in(std::size_t layer) const;
  std::size_t fan_out(std::size_t layer) const;
  void validate() const;

  /// 784-800-800-10, dropout 0.5 on the pre-output site only.
  static MlpSpec learner();
  /// 784-1200-1200-10. Inputs are kept with probability 0.8 (drop 0.2) and
  /// hidden units dropped with probability 0.5.
  static MlpSpec teacher();
};

bool operator==(const MlpSpec& a, const MlpSpec& b);

inline constexpr double kSimplexTolerance = 1e-9;
inline constexpr double kProbabilityFloor = 1e-12;

/// A length-K probability vector (entries >= 0, sum 1 within 1e-9).
struct SoftLabel {
  Vector probs;

  static SoftLabel validated(Vector probs, double tolerance = kSimplexTolerance);
  static SoftLabel one_hot(std::size_t cls, std::size_t classes);

  std::size_t classes() const noexcept { return static_cast<std::size_t>(probs.size()); }
  std::size_t argmax() const { return bakd::argmax(as_span(probs)); }
};

/// Which input is paired with an estimated soft target during retraining.
enum class CeVariant {
  clean_inputs,    // CE1: the learner's own uncompressed x
  decoded_inputs,  // CE2: x-hat from a noiseless local encode/decode
};

std::string to_string(CeVariant v);
CeVariant parse_ce_variant(std::string_view s);

struct TrainingConfig {
  double lr = 0.01;
  double momentum = 0.9;
  std::size_t minibatch = 32;
  /// Number of passes; an upper bound when early stopping is enabled.
  std::size_t epochs = 10;
  /// Weight of the soft-labelled term of the objective.
  double tau = 1.0;
  /// Weight of the squared-norm penalty standing in for KL(q || p0).
  double beta = 0.0;
  /// Decoupled SGD weight decay (grad += wd * theta), used by the teacher.
  double weight_decay = 0.0;
  /// Epochs without validation improvement before stopping; 0 disables.
  /// A tie with the best score moves the restore point to the later epoch.
  std::size_t early_stop_patience = 0;
  bool warm_start = true;
  CeVariant ce_variant = CeVariant::clean_inputs;

  void validate() const;
};

/// One teacher-labelled point held by the learner.
struct SoftExample {
  Vector input;          // clean x
  Vector decoded_input;  // local noiseless reconstruction x-hat (== x without a codec)
  SoftLabel target;      // estimated soft target returned by the teacher
  std::size_t source_index = 0;
};

/// A realised dropout configuration, i.e. one parameter sample theta ~ q.
/// `site[l]` is empty when site l is inactive, else a scaled 0 / 1/(1-p) mask.
struct DropoutMasks {
  std::vector<Vector> site;
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::vector<double> trace)
      : std::runtime_error(what), trace_(std::move(trace)) {}
  const std::vector<double>& trace() const noexcept { return trace_; }

 private:
  std::vector<double> trace_;
};

/// Dense ReLU classifier. When `variational()` is true, dropout stays active
/// at prediction time and every prediction is an average over sampled masks
/// (MC dropout); otherwise inference is deterministic with dropout disabled.
class MlpClassifier {
 public:
  MlpClassifier() = default;
  MlpClassifier(MlpSpec spec, bool variational, std::size_t mc_samples, Rng& init_rng);

  const MlpSpec& spec() const noexcept { return spec_; }
  bool variational() const noexcept { return variational_; }
  std::size_t mc_samples() const noexcept { return mc_samples_; }
  void set_mc_samples(std::size_t s);
  /// True when predictions actually vary with the dropout masks.
  bool stochastic() const noexcept;

  /// Zero biases, weights uniform in +-1/sqrt(fan_in), drawn layer by layer.
  void reinitialize(Rng& rng);

  std::vector<Matrix>& weights() noexcept { return weights_; }  // layer l: fan_in x fan_out
  std::vector<Vector>& biases() noexcept { return biases_; }
  const std::vector<Matrix>& weights() const noexcept { return weights_; }
  const std::vector<Vector>& biases() const noexcept { return biases_; }
  std::size_t parameter_count() const;
  double squared_norm() const;

  /// Logits for every row of `x`; `masks == nullptr` disables dropout.
  Matrix logits(const Matrix& x, const DropoutMasks* masks) const;
  /// Deterministic class probabilities (dropout disabled).
  Matrix predict_proba(const Matrix& x) const;

  DropoutMasks draw_masks(Rng& rng) const;
  std::vector<DropoutMasks> draw_thetas(std::size_t count, Rng& rng) const;

  /// result[s] holds n x K probabilities of every row under thetas[s]. Layers
  /// ahead of the first active dropout site are evaluated once.
  std::vector<Matrix> sample_proba(const Matrix& x, std::span<const DropoutMasks> thetas) const;

  bool operator==(const MlpClassifier& other) const;

 private:
  std::size_t first_active_site() const;

  MlpSpec spec_;
  bool variational_ = false;
  std::size_t mc_samples_ = 1;
  std::vector<Matrix> weights_;
  std::vector<Vector> biases_;
};

/// One stochastic forward pass with freshly drawn masks.
SoftLabel forward_sample(const MlpClassifier& model, std::span<const double> x, Rng& rng);

struct McPrediction {
  SoftLabel mean;
  Matrix samples;  // S x K, one row per theta sample
};

McPrediction mc_predict(const MlpClassifier& model, std::span<const double> x, std::size_t samples,
                        Rng& rng);

/// Per-row S x K probability tables under shared theta samples. The same
/// theta_s is used for every row, which is what joint acquisition scores need.
std::vector<Matrix> mc_sample_tables(const MlpClassifier& model, const Matrix& x,
                                     std::span<const DropoutMasks> thetas);

/// MC-averaged class probabilities (deterministic for non-variational models).
Matrix predictive_mean(const MlpClassifier& model, const Matrix& x, std::size_t samples, Rng& rng);

/// -sum_y target(y) * log p(y); log-probabilities are floored at log(1e-12).
double soft_ce_loss(std::span<const double> log_probs, const SoftLabel& target);
/// Same loss evaluated from logits.
double soft_ce_from_logits(std::span<const double> logits, std::span<const double> target);
/// Gradient of soft_ce_from_logits with respect to the logits.
Vector soft_ce_logit_gradient(std::span<const double> logits, std::span<const double> target);

/// Per-example dropout masks for a minibatch; `site[l]` is empty or rows x width.
struct BatchMasks {
  std::vector<Matrix> site;
};

struct Gradients {
  std::vector<Matrix> weights;
  std::vector<Vector> biases;
};

/// (1/m) * sum_i w_i * CE_i + (l2 / 2) * ||theta||^2 for one minibatch, with
/// its exact gradient when `grad` is non-null.
double batch_loss_and_gradient(const MlpClassifier& model, const Matrix& x, const Matrix& targets,
                               std::span<const double> example_weights, const BatchMasks& masks,
                               double l2, Gradients* grad);

struct FreeEnergy {
  double hard_ce = 0.0;   // sum over L0, MC-averaged
  double soft_ce = 0.0;   // sum over L_tr, MC-averaged
  double penalty = 0.0;   // 0.5 * ||theta||^2
  double total = 0.0;
};

/// CE(L0) + beta*P + tau*[CE_soft(L_tr) + beta*P], CE terms summed over
/// examples and averaged over `samples` theta draws. The bracket vanishes
/// when L_tr is empty.
FreeEnergy weighted_free_energy(const MlpClassifier& model, const ExampleSet& labeled,
                                std::span<const SoftExample> soft, const TrainingConfig& cfg,
                                std::size_t samples, Rng& rng);

/// Called after every epoch; `val_accuracy` is NaN without a validation set.
using EpochCallback = std::function<void(std::size_t epoch, double loss, double val_accuracy)>;

struct TrainResult {
  std::vector<double> epoch_loss;
  std::vector<double> validation_accuracy;
  std::size_t best_epoch = 0;
  bool early_stopped = false;
};

/// SGD with momentum over L0 followed by L_tr in insertion order (no
/// shuffling). Hard examples carry weight 1, soft ones weight tau; with
/// tau == 0 the soft examples are left out entirely. Momentum restarts at
/// every call. When `validation` is given and patience > 0, training stops
/// after `patience` epochs without a validation-accuracy gain and the best
/// weights are restored.
TrainResult train(MlpClassifier& model, const ExampleSet& labeled,
                  std::span<const SoftExample> soft, const TrainingConfig& cfg, Rng& rng,
                  const ExampleSet* validation = nullptr, const EpochCallback& on_epoch = {});

/// Argmax of the MC-mean predictive distribution against hard labels.
double evaluate_accuracy(const MlpClassifier& model, const ExampleSet& test, std::size_t samples,
                         Rng& rng);

struct TeacherConfig {
  MlpSpec spec = MlpSpec::teacher();
  TrainingConfig training{.lr = 0.01,
                          .momentum = 0.9,
                          .minibatch = 32,
                          .epochs = 100,
                          .tau = 0.0,
                          .beta = 0.0,
                          .weight_decay = 5e-4,
                          .early_stop_patience = 5,
                          .warm_start = true,
                          .ce_variant = CeVariant::clean_inputs};
  std::uint64_t seed = 0;
};

struct TeacherResult {
  MlpClassifier model;
  TrainResult history;
};

TeacherResult pretrain_teacher(const DatasetBundle& bundle, const TeacherConfig& cfg,
                               const EpochCallback& on_epoch = {});

/// Checkpoint: "BAKDMLP1", u32 version, spec fields, flags, then per layer the
/// weight matrix (row-major, fan_in x fan_out) and bias as little-endian f64,
/// then a CRC-32 trailer.
void save_model(const std::filesystem::path& path, const MlpClassifier& model);
MlpClassifier load_model(const std::filesystem::path& path);
std::vector<std::uint8_t> serialize_model(const MlpClassifier& model);
MlpClassifier deserialize_model(std::span<const std::uint8_t> bytes);

}  // namespace bakd
