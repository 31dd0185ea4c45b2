#include "bakd/protocol.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <set>
#include <stdexcept>

#include "bakd/binary_io.hpp"

namespace bakd {

namespace {

constexpr std::string_view kSnapshotMagic = "BAKDRUN1";
constexpr std::uint32_t kSnapshotVersion = 1;
const double kNaN = std::numeric_limits<double>::quiet_NaN();

class RoundGuard {
 public:
  explicit RoundGuard(bool& flag) : flag_(flag) { flag_ = true; }
  ~RoundGuard() { flag_ = false; }
  RoundGuard(const RoundGuard&) = delete;
  RoundGuard& operator=(const RoundGuard&) = delete;

 private:
  bool& flag_;
};

std::uint64_t symbols_per_round(const ProtocolConfig& cfg, std::size_t dim,
                                const MixupCodec* codec) {
  if (cfg.compressed()) {
    if (codec == nullptr) throw std::invalid_argument("CC-BAKD run needs a codec");
    return codec->compressed_dim();
  }
  return cfg.batch_size * dim;
}

Matrix rows_of(const Matrix& m, std::span<const std::size_t> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    out.row(static_cast<Eigen::Index>(k)) = m.row(static_cast<Eigen::Index>(rows[k]));
  }
  return out;
}

}  // namespace

std::string to_string(Variant v) {
  switch (v) {
    case Variant::bakd: return "BAKD";
    case Variant::ccbakd: return "CC-BAKD";
    case Variant::baseline_random: return "baseline-random";
    case Variant::baseline_max_entropy: return "baseline-max-entropy";
  }
  return "unknown";
}

Variant parse_variant(std::string_view s) {
  if (s == "BAKD" || s == "bakd") return Variant::bakd;
  if (s == "CC-BAKD" || s == "ccbakd" || s == "cc-bakd") return Variant::ccbakd;
  if (s == "baseline-random" || s == "random") return Variant::baseline_random;
  if (s == "baseline-max-entropy" || s == "max-entropy" || s == "max_entropy") {
    return Variant::baseline_max_entropy;
  }
  throw std::invalid_argument("unknown variant '" + std::string(s) + "'");
}

Strategy ProtocolConfig::strategy() const {
  switch (variant) {
    case Variant::bakd: return Strategy::batchbald;
    case Variant::ccbakd: return Strategy::batchbald_compression_aware;
    case Variant::baseline_random: return Strategy::random;
    case Variant::baseline_max_entropy: return Strategy::max_entropy;
  }
  return Strategy::batchbald;
}

void ProtocolConfig::validate() const {
  if (batch_size == 0) throw std::invalid_argument("ProtocolConfig: B must be >= 1");
  if (!(ratio >= 0.0 && ratio < 1.0)) {
    throw std::invalid_argument("ProtocolConfig: R = " + std::to_string(ratio) + " outside [0, 1)");
  }
  if (!compressed() && ratio != 0.0) {
    throw std::invalid_argument("ProtocolConfig: R must be 0 for uncompressed variants");
  }
  if (acquisition.batch_size != batch_size) {
    throw std::invalid_argument("ProtocolConfig: acquisition batch size differs from B");
  }
  if (eval_samples == 0) throw std::invalid_argument("ProtocolConfig: eval_samples must be >= 1");
  channel.validate();
  training.validate();
  learner.validate();
  AcquisitionConfig a = acquisition;
  a.strategy = strategy();
  a.validate();
}

void DatasetState::check_disjoint() const {
  std::set<std::size_t> seen;
  auto claim = [&](std::size_t id, const char* where) {
    if (!seen.insert(id).second) {
      throw std::logic_error(std::string("dataset state: source index ") + std::to_string(id) +
                             " appears twice (" + where + ")");
    }
  };
  for (std::size_t id : labeled.source_index) claim(id, "L0");
  for (const auto& ex : soft) claim(ex.source_index, "L_tr");
  std::set<std::size_t> rows(pool_rows.begin(), pool_rows.end());
  for (std::size_t r : soft_rows) {
    if (rows.count(r) != 0) {
      throw std::logic_error("dataset state: pool row " + std::to_string(r) + " is both in U and L_tr");
    }
  }
}

std::vector<SoftLabel> teacher_label(const MlpClassifier& teacher, const Matrix& inputs) {
  const Matrix p = teacher.predict_proba(inputs);
  std::vector<SoftLabel> out;
  out.reserve(static_cast<std::size_t>(p.rows()));
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    out.push_back(SoftLabel::validated(p.row(i).transpose()));
  }
  return out;
}

ProtocolRun::ProtocolRun(ProtocolConfig cfg, const DatasetBundle& bundle,
                         const MlpClassifier& teacher, const MixupCodec* codec, std::uint64_t seed)
    : cfg_(std::move(cfg)),
      bundle_(&bundle),
      teacher_(&teacher),
      codec_(cfg_.compressed() ? codec : nullptr),
      seed_(seed),
      budget_(cfg_.symbols, symbols_per_round(cfg_, bundle.pool.dim(), codec)) {
  cfg_.validate();
  cfg_.acquisition.strategy = cfg_.strategy();
  const std::size_t D = bundle.pool.dim();
  if (bundle.learner_labeled.empty()) throw std::invalid_argument("ProtocolRun: L0 is empty");
  if (D != cfg_.learner.input_dim || D != teacher.spec().input_dim) {
    throw std::invalid_argument("ProtocolRun: input dimension mismatch between data and models");
  }
  if (codec_ != nullptr) {
    if (codec_->batch() != cfg_.batch_size || codec_->dim() != D ||
        codec_->compressed_dim() != compressed_symbols(cfg_.batch_size, D, cfg_.ratio)) {
      throw std::invalid_argument(
          "ProtocolRun: codec (B=" + std::to_string(codec_->batch()) + ", D=" +
          std::to_string(codec_->dim()) + ", M=" + std::to_string(codec_->compressed_dim()) +
          ") does not match config (B=" + std::to_string(cfg_.batch_size) + ", D=" +
          std::to_string(D) + ", R=" + std::to_string(cfg_.ratio) + ")");
    }
  }
  state_.labeled = bundle.learner_labeled;
  state_.pool_features = bundle.pool.features;
  state_.pool_rows.resize(bundle.pool.size());
  for (std::size_t i = 0; i < state_.pool_rows.size(); ++i) state_.pool_rows[i] = i;
}

void ProtocolRun::phase(Phase p) {
  if (hook_) hook_(p);
}

double ProtocolRun::evaluate(std::size_t round) const {
  Rng rng(derive_seed(seed_, "eval", round));
  return evaluate_accuracy(learner_, bundle_->test, cfg_.eval_samples, rng);
}

void ProtocolRun::initialize() {
  if (initialized_) return;
  Rng init(derive_seed(seed_, "learner-init"));
  learner_ = MlpClassifier(cfg_.learner, true, cfg_.acquisition.mc_samples, init);
  Rng fit(derive_seed(seed_, "train", 0));
  train(learner_, state_.labeled, {}, cfg_.training, fit);
  initial_accuracy_ = evaluate(0);
  initialized_ = true;
}

void ProtocolRun::finish(std::string_view reason) {
  stop_reason_ = std::string(reason);
  if (!records_.empty() && std::isnan(records_.back().test_accuracy)) {
    records_.back().test_accuracy = evaluate(records_.back().round);
  }
}

std::optional<RoundRecord> ProtocolRun::step() {
  if (!initialized_) initialize();
  if (finished()) return std::nullopt;
  const std::size_t B = cfg_.batch_size;
  if (budget_.remaining() < budget_.per_round()) {
    budget_.try_consume(budget_.per_round());
    finish(kStopBudget);
    return std::nullopt;
  }
  if (state_.pool_rows.size() < B) {
    finish(kStopPoolExhausted);
    return std::nullopt;
  }

  RoundGuard guard(in_round_);
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t round = records_.size() + 1;
  RoundRecord rec;
  rec.round = round;

  Rng acq_rng(derive_seed(seed_, "acquire", round));
  const ScoredBatch pick = select_batch(state_.pool_features, learner_, cfg_.acquisition, codec_, acq_rng);
  rec.acq_score = pick.score;
  const Matrix batch = rows_of(state_.pool_features, pick.indices);
  phase(Phase::selected);

  Rng channel_rng(derive_seed(seed_, "channel", round));
  Matrix received;
  Matrix local;
  if (codec_ != nullptr) {
    const Vector code = codec_->encode(batch);
    const auto sent = transmit(as_span(code), cfg_.channel, budget_, channel_rng);
    if (!sent) throw std::logic_error("budget refused a transmission that was checked as affordable");
    received = codec_->reconstruct(as_span(*sent));
    local = codec_->project(batch);
  } else {
    const auto sent = transmit({batch.data(), static_cast<std::size_t>(batch.size())}, cfg_.channel,
                               budget_, channel_rng);
    if (!sent) throw std::logic_error("budget refused a transmission that was checked as affordable");
    received = Eigen::Map<const Matrix>(sent->data(), batch.rows(), batch.cols());
    local = batch;
  }
  rec.symbols_consumed = budget_.consumed();
  rec.distortion = distortion(batch, received);
  phase(Phase::transmitted);

  const auto estimated = teacher_label(*teacher_, received);
  const auto truth = teacher_label(*teacher_, batch);
  std::size_t agree = 0;
  for (std::size_t k = 0; k < B; ++k) {
    if (estimated[k].argmax() == truth[k].argmax()) ++agree;
  }
  rec.label_agreement = static_cast<double>(agree) / static_cast<double>(B);

  std::vector<bool> remove(state_.pool_rows.size(), false);
  for (std::size_t k = 0; k < B; ++k) {
    const std::size_t pos = pick.indices[k];
    const std::size_t row = state_.pool_rows[pos];
    rec.selected.push_back(row);
    remove[pos] = true;
    state_.soft.push_back(SoftExample{batch.row(static_cast<Eigen::Index>(k)).transpose(),
                                      local.row(static_cast<Eigen::Index>(k)).transpose(),
                                      estimated[k], bundle_->pool.source_index[row]});
    state_.soft_rows.push_back(row);
  }
  std::vector<std::size_t> keep;
  std::vector<std::size_t> kept_rows;
  for (std::size_t i = 0; i < remove.size(); ++i) {
    if (!remove[i]) {
      keep.push_back(i);
      kept_rows.push_back(state_.pool_rows[i]);
    }
  }
  state_.pool_features = rows_of(state_.pool_features, keep);
  state_.pool_rows = std::move(kept_rows);
  phase(Phase::labelled);

  Rng train_rng(derive_seed(seed_, "train", round));
  train(learner_, state_.labeled, state_.soft, cfg_.training, train_rng);
  phase(Phase::retrained);

  const bool eval_now = cfg_.eval_every > 0 && round % cfg_.eval_every == 0;
  rec.test_accuracy = eval_now ? evaluate(round) : kNaN;
  if (cfg_.record_wall_time) {
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  }
  records_.push_back(rec);
  return rec;
}

RunResult ProtocolRun::result() const {
  RunResult r;
  r.initial_accuracy = initial_accuracy_;
  r.rounds = records_;
  r.stop_reason = stop_reason_;
  r.final_accuracy = records_.empty() ? initial_accuracy_ : records_.back().test_accuracy;
  return r;
}

RunResult ProtocolRun::run_to_end() {
  initialize();
  while (step()) {
  }
  return result();
}

std::uint64_t ProtocolRun::fingerprint() const {
  ByteWriter w;
  w.str(to_string(cfg_.variant));
  w.u64(cfg_.batch_size);
  w.f64(cfg_.ratio);
  w.u64(cfg_.symbols);
  w.f64(cfg_.channel.noise_power);
  w.u64(cfg_.acquisition.mc_samples);
  w.u64(cfg_.acquisition.joint_config_limit);
  w.u64(cfg_.acquisition.joint_samples);
  const TrainingConfig& t = cfg_.training;
  for (double v : {t.lr, t.momentum, t.tau, t.beta, t.weight_decay}) w.f64(v);
  w.u64(t.minibatch);
  w.u64(t.epochs);
  w.u8(t.warm_start ? 1 : 0);
  w.str(to_string(t.ce_variant));
  w.u64(cfg_.eval_samples);
  w.u64(cfg_.eval_every);
  for (std::size_t id : bundle_->learner_labeled.source_index) w.u64(id);
  for (std::size_t id : bundle_->pool.source_index) w.u64(id);
  w.u64(bundle_->test.size());
  w.u64(teacher_->parameter_count());
  w.u64(codec_ != nullptr ? codec_->compressed_dim() : 0);
  return crc32_of(w.buffer()) | (std::uint64_t{crc32_of(serialize_model(*teacher_))} << 32);
}

std::vector<std::uint8_t> ProtocolRun::snapshot() const {
  if (in_round_) throw std::logic_error("snapshot requested in the middle of a round");
  ByteWriter w;
  w.magic(kSnapshotMagic);
  w.u32(kSnapshotVersion);
  w.u64(fingerprint());
  w.u64(seed_);
  w.u8(initialized_ ? 1 : 0);
  w.f64(initial_accuracy_);
  w.str(stop_reason_);
  w.u64(budget_.total());
  w.u64(budget_.per_round());
  w.u64(budget_.consumed());
  w.u8(budget_.refused() ? 1 : 0);

  w.u64(records_.size());
  for (const auto& r : records_) {
    w.u64(r.round);
    w.u64(r.selected.size());
    for (std::size_t s : r.selected) w.u64(s);
    w.f64(r.acq_score);
    w.u64(r.symbols_consumed);
    w.f64(r.distortion);
    w.f64(r.label_agreement);
    w.f64(r.test_accuracy);
    w.f64(r.wall_ms);
  }
  w.u64(state_.pool_rows.size());
  for (std::size_t r : state_.pool_rows) w.u64(r);
  w.u64(state_.soft.size());
  for (std::size_t i = 0; i < state_.soft.size(); ++i) {
    const auto& ex = state_.soft[i];
    w.u64(state_.soft_rows[i]);
    w.u64(static_cast<std::uint64_t>(ex.decoded_input.size()));
    w.f64s(as_span(ex.decoded_input));
    w.u64(ex.target.classes());
    w.f64s(as_span(ex.target.probs));
  }
  if (initialized_) {
    const auto model = serialize_model(learner_);
    w.u64(model.size());
    w.bytes(model);
  } else {
    w.u64(0);
  }
  append_crc32(w);
  return w.take();
}

ProtocolRun ProtocolRun::resume(std::span<const std::uint8_t> bytes, ProtocolConfig cfg,
                                const DatasetBundle& bundle, const MlpClassifier& teacher,
                                const MixupCodec* codec) {
  ByteReader r(verify_crc32(bytes, "run snapshot"));
  r.expect_magic(kSnapshotMagic);
  if (const auto v = r.u32(); v != kSnapshotVersion) {
    throw FormatError("run snapshot: unsupported version " + std::to_string(v));
  }
  const std::uint64_t fp = r.u64();
  const std::uint64_t seed = r.u64();
  ProtocolRun run(std::move(cfg), bundle, teacher, codec, seed);
  if (run.fingerprint() != fp) {
    throw FormatError("run snapshot: configuration, data or teacher differ from the snapshot");
  }
  run.initialized_ = r.u8() != 0;
  run.initial_accuracy_ = r.f64();
  run.stop_reason_ = r.str();
  const std::uint64_t total = r.u64();
  const std::uint64_t per_round = r.u64();
  const std::uint64_t consumed = r.u64();
  const bool refused = r.u8() != 0;
  run.budget_ = FrameBudget::restore(total, per_round, consumed, refused);

  const std::size_t pool_size = bundle.pool.size();
  auto checked_row = [&](std::uint64_t row) {
    if (row >= pool_size) throw FormatError("run snapshot: pool row " + std::to_string(row) + " out of range");
    return static_cast<std::size_t>(row);
  };
  const std::uint64_t n_records = r.u64();
  for (std::uint64_t i = 0; i < n_records; ++i) {
    RoundRecord rec;
    rec.round = r.u64();
    const std::uint64_t n_sel = r.u64();
    if (n_sel > pool_size) throw FormatError("run snapshot: implausible batch size");
    for (std::uint64_t k = 0; k < n_sel; ++k) rec.selected.push_back(checked_row(r.u64()));
    rec.acq_score = r.f64();
    rec.symbols_consumed = r.u64();
    rec.distortion = r.f64();
    rec.label_agreement = r.f64();
    rec.test_accuracy = r.f64();
    rec.wall_ms = r.f64();
    run.records_.push_back(std::move(rec));
  }
  const std::uint64_t n_pool = r.u64();
  if (n_pool > pool_size) throw FormatError("run snapshot: pool larger than the bundle's");
  run.state_.pool_rows.clear();
  for (std::uint64_t i = 0; i < n_pool; ++i) run.state_.pool_rows.push_back(checked_row(r.u64()));
  run.state_.pool_features = rows_of(bundle.pool.features, run.state_.pool_rows);

  const std::uint64_t n_soft = r.u64();
  if (n_soft > pool_size) throw FormatError("run snapshot: too many soft examples");
  for (std::uint64_t i = 0; i < n_soft; ++i) {
    const std::size_t row = checked_row(r.u64());
    SoftExample ex;
    ex.input = bundle.pool.features.row(static_cast<Eigen::Index>(row)).transpose();
    ex.source_index = bundle.pool.source_index[row];
    const std::uint64_t d = r.u64();
    if (d != bundle.pool.dim()) throw FormatError("run snapshot: decoded input length mismatch");
    ex.decoded_input.resize(static_cast<Eigen::Index>(d));
    r.f64s({ex.decoded_input.data(), d});
    const std::uint64_t k = r.u64();
    if (k == 0 || k > 1024) throw FormatError("run snapshot: implausible class count");
    Vector probs(static_cast<Eigen::Index>(k));
    r.f64s({probs.data(), k});
    ex.target = SoftLabel{std::move(probs)};
    run.state_.soft.push_back(std::move(ex));
    run.state_.soft_rows.push_back(row);
  }
  const std::uint64_t model_len = r.u64();
  if (model_len > r.remaining()) throw FormatError("run snapshot: truncated learner weights");
  if (model_len > 0) {
    std::vector<std::uint8_t> model(model_len);
    for (auto& b : model) b = r.u8();
    run.learner_ = deserialize_model(model);
  }
  if (r.remaining() != 0) throw FormatError("run snapshot: trailing bytes");
  run.state_.check_disjoint();
  return run;
}

RunResult run_bakd(const ProtocolConfig& cfg, const DatasetBundle& bundle,
                   const MlpClassifier& teacher, std::uint64_t seed) {
  if (cfg.compressed()) throw std::invalid_argument("run_bakd: config describes a compressed variant");
  ProtocolRun run(cfg, bundle, teacher, nullptr, seed);
  return run.run_to_end();
}

RunResult run_ccbakd(const ProtocolConfig& cfg, const DatasetBundle& bundle,
                     const MlpClassifier& teacher, const MixupCodec& codec, std::uint64_t seed) {
  if (!cfg.compressed()) throw std::invalid_argument("run_ccbakd: config variant is not CC-BAKD");
  ProtocolRun run(cfg, bundle, teacher, &codec, seed);
  return run.run_to_end();
}

}  // namespace bakd
