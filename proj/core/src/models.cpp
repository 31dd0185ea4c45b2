#include "bakd/models.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "bakd/binary_io.hpp"

namespace bakd {

namespace {

constexpr std::string_view kModelMagic = "BAKDMLP1";
constexpr std::uint32_t kModelVersion = 1;
constexpr Eigen::Index kEvalChunk = 1000;

const double kLogFloor = std::log(kProbabilityFloor);

void relu_inplace(Matrix& m) { m = m.cwiseMax(0.0); }

void softmax_rows_inplace(Matrix& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const double mx = row.maxCoeff();
    row = (row.array() - mx).exp().matrix();
    row /= row.sum();
  }
}

void require_finite(const Matrix& m, const char* where) {
  if (!m.allFinite()) {
    throw std::runtime_error(std::string(where) + ": non-finite activations (diverged model?)");
  }
}

void apply_site_mask(Matrix& h, const Vector& mask) {
  if (mask.size() == 0) return;
  h.array().rowwise() *= mask.transpose().array();
}

}  // namespace

// ---------------------------------------------------------------------------
// MlpSpec

std::size_t MlpSpec::fan_in(std::size_t layer) const {
  if (layer >= layers()) throw std::out_of_range("MlpSpec::fan_in: layer out of range");
  return layer == 0 ? input_dim : hidden[layer - 1];
}

std::size_t MlpSpec::fan_out(std::size_t layer) const {
  if (layer >= layers()) throw std::out_of_range("MlpSpec::fan_out: layer out of range");
  return layer + 1 == layers() ? classes : hidden[layer];
}

void MlpSpec::validate() const {
  if (input_dim == 0) throw std::invalid_argument("MlpSpec: input_dim must be positive");
  if (classes < 2) throw std::invalid_argument("MlpSpec: need at least two classes");
  for (std::size_t w : hidden) {
    if (w == 0) throw std::invalid_argument("MlpSpec: hidden widths must be positive");
  }
  if (dropout.size() != layers()) {
    throw std::invalid_argument("MlpSpec: expected " + std::to_string(layers()) +
                                " dropout sites, got " + std::to_string(dropout.size()));
  }
  for (double p : dropout) {
    if (!(p >= 0.0 && p < 1.0)) {
      throw std::invalid_argument("MlpSpec: dropout probability " + std::to_string(p) +
                                  " outside [0, 1)");
    }
  }
}

MlpSpec MlpSpec::learner() { return MlpSpec{784, {800, 800}, 10, {0.0, 0.0, 0.5}}; }
MlpSpec MlpSpec::teacher() { return MlpSpec{784, {1200, 1200}, 10, {0.2, 0.5, 0.5}}; }

bool operator==(const MlpSpec& a, const MlpSpec& b) {
  return a.input_dim == b.input_dim && a.hidden == b.hidden && a.classes == b.classes &&
         a.dropout == b.dropout;
}

// ---------------------------------------------------------------------------
// SoftLabel, CeVariant, TrainingConfig

SoftLabel SoftLabel::validated(Vector probs, double tolerance) {
  if (probs.size() == 0) throw std::invalid_argument("SoftLabel: empty probability vector");
  double sum = 0.0;
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    const double p = probs[i];
    if (!(p >= 0.0) || !std::isfinite(p)) {
      throw std::invalid_argument("SoftLabel: entry " + std::to_string(i) + " = " +
                                  std::to_string(p) + " is not a probability");
    }
    sum += p;
  }
  if (std::abs(sum - 1.0) > tolerance) {
    throw std::invalid_argument("SoftLabel: entries sum to " + std::to_string(sum));
  }
  return SoftLabel{std::move(probs)};
}

SoftLabel SoftLabel::one_hot(std::size_t cls, std::size_t classes) {
  if (cls >= classes) throw std::invalid_argument("SoftLabel::one_hot: class out of range");
  Vector v = Vector::Zero(static_cast<Eigen::Index>(classes));
  v[static_cast<Eigen::Index>(cls)] = 1.0;
  return SoftLabel{std::move(v)};
}

std::string to_string(CeVariant v) {
  return v == CeVariant::clean_inputs ? "CE1" : "CE2";
}

CeVariant parse_ce_variant(std::string_view s) {
  if (s == "CE1" || s == "ce1" || s == "clean") return CeVariant::clean_inputs;
  if (s == "CE2" || s == "ce2" || s == "decoded") return CeVariant::decoded_inputs;
  throw std::invalid_argument("unknown CE variant '" + std::string(s) + "' (expected CE1 or CE2)");
}

void TrainingConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw std::invalid_argument("TrainingConfig: lr must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw std::invalid_argument("TrainingConfig: momentum must lie in [0, 1)");
  }
  if (minibatch == 0) throw std::invalid_argument("TrainingConfig: minibatch must be >= 1");
  if (epochs == 0) throw std::invalid_argument("TrainingConfig: epochs must be >= 1");
  if (!(tau >= 0.0) || !std::isfinite(tau)) throw std::invalid_argument("TrainingConfig: tau must be >= 0");
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw std::invalid_argument("TrainingConfig: beta must be >= 0");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("TrainingConfig: weight_decay must be >= 0");
}

// ---------------------------------------------------------------------------
// MlpClassifier

MlpClassifier::MlpClassifier(MlpSpec spec, bool variational, std::size_t mc_samples, Rng& init_rng)
    : spec_(std::move(spec)), variational_(variational) {
  spec_.validate();
  set_mc_samples(mc_samples);
  reinitialize(init_rng);
}

void MlpClassifier::set_mc_samples(std::size_t s) {
  if (s == 0) throw std::invalid_argument("MlpClassifier: mc_samples must be >= 1");
  mc_samples_ = s;
}

void MlpClassifier::reinitialize(Rng& rng) {
  const std::size_t L = spec_.layers();
  weights_.assign(L, Matrix());
  biases_.assign(L, Vector());
  for (std::size_t l = 0; l < L; ++l) {
    const auto in = static_cast<Eigen::Index>(spec_.fan_in(l));
    const auto out = static_cast<Eigen::Index>(spec_.fan_out(l));
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    Matrix& w = weights_[l];
    w.resize(in, out);
    double* p = w.data();
    for (Eigen::Index i = 0; i < in * out; ++i) p[i] = bound * (2.0 * rng.uniform() - 1.0);
    biases_[l] = Vector::Zero(out);
  }
}

std::size_t MlpClassifier::parameter_count() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    n += static_cast<std::size_t>(weights_[l].size() + biases_[l].size());
  }
  return n;
}

double MlpClassifier::squared_norm() const {
  double s = 0.0;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    s += weights_[l].squaredNorm() + biases_[l].squaredNorm();
  }
  return s;
}

std::size_t MlpClassifier::first_active_site() const {
  for (std::size_t l = 0; l < spec_.dropout.size(); ++l) {
    if (spec_.dropout[l] > 0.0) return l;
  }
  return spec_.layers();
}

bool MlpClassifier::stochastic() const noexcept {
  return variational_ && first_active_site() < spec_.layers();
}

Matrix MlpClassifier::logits(const Matrix& x, const DropoutMasks* masks) const {
  if (static_cast<std::size_t>(x.cols()) != spec_.input_dim) {
    throw DimensionError("MlpClassifier: input has " + std::to_string(x.cols()) +
                         " features, network expects " + std::to_string(spec_.input_dim));
  }
  const std::size_t L = spec_.layers();
  Matrix h = x;
  for (std::size_t l = 0; l < L; ++l) {
    if (masks != nullptr) apply_site_mask(h, masks->site[l]);
    Matrix z = h * weights_[l];
    z.rowwise() += biases_[l].transpose();
    if (l + 1 < L) relu_inplace(z);
    h = std::move(z);
  }
  return h;
}

Matrix MlpClassifier::predict_proba(const Matrix& x) const {
  Matrix p = logits(x, nullptr);
  require_finite(p, "predict_proba");
  softmax_rows_inplace(p);
  return p;
}

DropoutMasks MlpClassifier::draw_masks(Rng& rng) const {
  DropoutMasks m;
  m.site.resize(spec_.layers());
  for (std::size_t l = 0; l < spec_.layers(); ++l) {
    const double p = spec_.dropout[l];
    if (p <= 0.0) continue;
    const double keep_scale = 1.0 / (1.0 - p);
    Vector& v = m.site[l];
    v.resize(static_cast<Eigen::Index>(spec_.fan_in(l)));
    for (Eigen::Index j = 0; j < v.size(); ++j) v[j] = rng.uniform() >= p ? keep_scale : 0.0;
  }
  return m;
}

std::vector<DropoutMasks> MlpClassifier::draw_thetas(std::size_t count, Rng& rng) const {
  std::vector<DropoutMasks> out;
  out.reserve(count);
  for (std::size_t s = 0; s < count; ++s) out.push_back(draw_masks(rng));
  return out;
}

std::vector<Matrix> MlpClassifier::sample_proba(const Matrix& x,
                                                std::span<const DropoutMasks> thetas) const {
  const std::size_t f = first_active_site();
  const std::size_t L = spec_.layers();
  if (!variational_ || f == L) {
    return std::vector<Matrix>(thetas.size(), predict_proba(x));
  }
  if (static_cast<std::size_t>(x.cols()) != spec_.input_dim) {
    throw DimensionError("MlpClassifier: input has " + std::to_string(x.cols()) +
                         " features, network expects " + std::to_string(spec_.input_dim));
  }
  Matrix prefix = x;
  for (std::size_t l = 0; l < f; ++l) {
    Matrix z = prefix * weights_[l];
    z.rowwise() += biases_[l].transpose();
    relu_inplace(z);
    prefix = std::move(z);
  }
  std::vector<Matrix> out;
  out.reserve(thetas.size());
  for (const auto& theta : thetas) {
    Matrix h = prefix;
    for (std::size_t l = f; l < L; ++l) {
      apply_site_mask(h, theta.site[l]);
      Matrix z = h * weights_[l];
      z.rowwise() += biases_[l].transpose();
      if (l + 1 < L) relu_inplace(z);
      h = std::move(z);
    }
    require_finite(h, "sample_proba");
    softmax_rows_inplace(h);
    out.push_back(std::move(h));
  }
  return out;
}

bool MlpClassifier::operator==(const MlpClassifier& o) const {
  if (!(spec_ == o.spec_) || variational_ != o.variational_ || mc_samples_ != o.mc_samples_ ||
      weights_.size() != o.weights_.size()) {
    return false;
  }
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    if (weights_[l] != o.weights_[l] || biases_[l] != o.biases_[l]) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Prediction

SoftLabel forward_sample(const MlpClassifier& model, std::span<const double> x, Rng& rng) {
  Matrix row = Eigen::Map<const Matrix>(x.data(), 1, static_cast<Eigen::Index>(x.size()));
  const DropoutMasks masks = model.draw_masks(rng);
  Matrix z = model.logits(row, model.variational() ? &masks : nullptr);
  require_finite(z, "forward_sample");
  return SoftLabel{softmax(row_span(z, 0))};
}

McPrediction mc_predict(const MlpClassifier& model, std::span<const double> x, std::size_t samples,
                        Rng& rng) {
  if (samples == 0) throw std::invalid_argument("mc_predict: S must be >= 1");
  const auto k = static_cast<Eigen::Index>(model.spec().classes);
  McPrediction out;
  out.samples.resize(static_cast<Eigen::Index>(samples), k);
  for (std::size_t s = 0; s < samples; ++s) {
    out.samples.row(static_cast<Eigen::Index>(s)) = forward_sample(model, x, rng).probs.transpose();
  }
  // Every row is the same deterministic output; averaging would only add rounding.
  if (!model.stochastic()) {
    out.mean.probs = out.samples.row(0).transpose();
  } else {
    out.mean.probs = out.samples.colwise().mean().transpose();
  }
  return out;
}

std::vector<Matrix> mc_sample_tables(const MlpClassifier& model, const Matrix& x,
                                     std::span<const DropoutMasks> thetas) {
  const auto per_theta = model.sample_proba(x, thetas);
  const auto S = static_cast<Eigen::Index>(thetas.size());
  const auto K = static_cast<Eigen::Index>(model.spec().classes);
  std::vector<Matrix> tables(static_cast<std::size_t>(x.rows()), Matrix(S, K));
  for (Eigen::Index s = 0; s < S; ++s) {
    const Matrix& p = per_theta[static_cast<std::size_t>(s)];
    for (Eigen::Index i = 0; i < x.rows(); ++i) tables[static_cast<std::size_t>(i)].row(s) = p.row(i);
  }
  return tables;
}

Matrix predictive_mean(const MlpClassifier& model, const Matrix& x, std::size_t samples, Rng& rng) {
  if (samples == 0) throw std::invalid_argument("predictive_mean: S must be >= 1");
  if (!model.stochastic()) return model.predict_proba(x);
  const auto thetas = model.draw_thetas(samples, rng);
  Matrix mean = Matrix::Zero(x.rows(), static_cast<Eigen::Index>(model.spec().classes));
  for (Eigen::Index start = 0; start < x.rows(); start += kEvalChunk) {
    const Eigen::Index n = std::min(kEvalChunk, x.rows() - start);
    const Matrix chunk = x.middleRows(start, n);
    for (const Matrix& p : model.sample_proba(chunk, thetas)) mean.middleRows(start, n) += p;
  }
  mean /= static_cast<double>(samples);
  return mean;
}

// ---------------------------------------------------------------------------
// Losses

double soft_ce_loss(std::span<const double> log_probs, const SoftLabel& target) {
  if (log_probs.size() != target.classes()) {
    throw DimensionError("soft_ce_loss: " + std::to_string(log_probs.size()) +
                         " log-probabilities for a " + std::to_string(target.classes()) +
                         "-class target");
  }
  double loss = 0.0;
  for (std::size_t k = 0; k < log_probs.size(); ++k) {
    const double t = target.probs[static_cast<Eigen::Index>(k)];
    if (t > 0.0) loss -= t * std::max(log_probs[k], kLogFloor);
  }
  return loss;
}

double soft_ce_from_logits(std::span<const double> logits, std::span<const double> target) {
  const Vector lp = log_softmax(logits);
  double loss = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    if (target[k] > 0.0) loss -= target[k] * std::max(lp[static_cast<Eigen::Index>(k)], kLogFloor);
  }
  return loss;
}

// With the floor active on class k that term is constant, so only unfloored
// classes contribute: dL/dz_j = p_j * sum_{k unfloored} t_k - t_j [j unfloored].
Vector soft_ce_logit_gradient(std::span<const double> logits, std::span<const double> target) {
  if (logits.size() != target.size()) {
    throw DimensionError("soft_ce_logit_gradient: logits and target lengths differ");
  }
  const Vector lp = log_softmax(logits);
  const auto K = static_cast<Eigen::Index>(logits.size());
  Vector g(K);
  double live_mass = 0.0;
  for (Eigen::Index k = 0; k < K; ++k) {
    if (lp[k] > kLogFloor) live_mass += target[static_cast<std::size_t>(k)];
  }
  for (Eigen::Index k = 0; k < K; ++k) {
    const double t = lp[k] > kLogFloor ? target[static_cast<std::size_t>(k)] : 0.0;
    g[k] = std::exp(lp[k]) * live_mass - t;
  }
  return g;
}

double batch_loss_and_gradient(const MlpClassifier& model, const Matrix& x, const Matrix& targets,
                               std::span<const double> example_weights, const BatchMasks& masks,
                               double l2, Gradients* grad) {
  const auto& W = model.weights();
  const auto& b = model.biases();
  const std::size_t L = W.size();
  const Eigen::Index m = x.rows();
  if (m == 0) throw std::invalid_argument("batch_loss_and_gradient: empty minibatch");
  if (targets.rows() != m || static_cast<Eigen::Index>(example_weights.size()) != m) {
    throw DimensionError("batch_loss_and_gradient: inputs, targets and weights disagree on rows");
  }
  auto site_mask = [&](std::size_t l) -> const Matrix* {
    if (l < masks.site.size() && masks.site[l].size() != 0) return &masks.site[l];
    return nullptr;
  };

  // Forward, keeping the masked input of every layer and each hidden pre-activation.
  std::vector<Matrix> inputs(L);
  std::vector<Matrix> pre(L);
  Matrix h = x;
  for (std::size_t l = 0; l < L; ++l) {
    if (const Matrix* mk = site_mask(l)) h.array() *= mk->array();
    inputs[l] = h;
    Matrix z = inputs[l] * W[l];
    z.rowwise() += b[l].transpose();
    if (l + 1 < L) {
      pre[l] = z;
      relu_inplace(z);
    }
    h = std::move(z);
  }
  const Matrix& logit = h;

  const double inv_m = 1.0 / static_cast<double>(m);
  double data_loss = 0.0;
  Matrix delta(m, logit.cols());
  for (Eigen::Index i = 0; i < m; ++i) {
    const double w = example_weights[static_cast<std::size_t>(i)];
    const auto z = row_span(logit, i);
    const auto t = row_span(targets, i);
    data_loss += w * soft_ce_from_logits(z, t);
    if (grad != nullptr) delta.row(i) = (w * inv_m) * soft_ce_logit_gradient(z, t).transpose();
  }
  const double loss = data_loss * inv_m + 0.5 * l2 * model.squared_norm();

  if (grad != nullptr) {
    grad->weights.resize(L);
    grad->biases.resize(L);
    for (std::size_t l = L; l-- > 0;) {
      grad->weights[l].noalias() = inputs[l].transpose() * delta;
      grad->biases[l] = delta.colwise().sum().transpose();
      if (l2 != 0.0) {
        grad->weights[l] += l2 * W[l];
        grad->biases[l] += l2 * b[l];
      }
      if (l == 0) break;
      Matrix back = delta * W[l].transpose();
      if (const Matrix* mk = site_mask(l)) back.array() *= mk->array();
      back.array() *= (pre[l - 1].array() > 0.0).cast<double>();
      delta = std::move(back);
    }
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Objective and training

namespace {

const Vector& training_input(const SoftExample& ex, CeVariant v) {
  if (v == CeVariant::decoded_inputs) {
    if (ex.decoded_input.size() == 0) {
      throw std::invalid_argument("CE2 training needs decoded inputs for every soft example");
    }
    return ex.decoded_input;
  }
  return ex.input;
}

Matrix one_hot_targets(const ExampleSet& set, std::size_t classes) {
  if (!set.labeled()) throw std::invalid_argument("hard-labelled set carries no labels");
  Matrix t = Matrix::Zero(static_cast<Eigen::Index>(set.size()), static_cast<Eigen::Index>(classes));
  for (std::size_t i = 0; i < set.size(); ++i) {
    const int y = set.labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw std::invalid_argument("label " + std::to_string(y) + " outside the class range");
    }
    t(static_cast<Eigen::Index>(i), y) = 1.0;
  }
  return t;
}

double mean_ce_sum(const MlpClassifier& model, const Matrix& x, const Matrix& targets,
                   std::span<const DropoutMasks> thetas) {
  if (x.rows() == 0) return 0.0;
  double total = 0.0;
  for (const Matrix& p : model.sample_proba(x, thetas)) {
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      for (Eigen::Index k = 0; k < p.cols(); ++k) {
        const double t = targets(i, k);
        if (t > 0.0) total -= t * std::max(std::log(p(i, k)), kLogFloor);
      }
    }
  }
  return total / static_cast<double>(thetas.size());
}

}  // namespace

FreeEnergy weighted_free_energy(const MlpClassifier& model, const ExampleSet& labeled,
                                std::span<const SoftExample> soft, const TrainingConfig& cfg,
                                std::size_t samples, Rng& rng) {
  if (labeled.empty()) throw std::invalid_argument("weighted_free_energy: L0 is empty");
  if (samples == 0) throw std::invalid_argument("weighted_free_energy: S must be >= 1");
  const std::size_t K = model.spec().classes;
  const auto thetas = model.draw_thetas(model.variational() ? samples : 1, rng);

  FreeEnergy fe;
  fe.hard_ce = mean_ce_sum(model, labeled.features, one_hot_targets(labeled, K), thetas);
  if (!soft.empty()) {
    const auto n = static_cast<Eigen::Index>(soft.size());
    Matrix xs(n, static_cast<Eigen::Index>(model.spec().input_dim));
    Matrix ts(n, static_cast<Eigen::Index>(K));
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& ex = soft[static_cast<std::size_t>(i)];
      xs.row(i) = training_input(ex, cfg.ce_variant).transpose();
      ts.row(i) = ex.target.probs.transpose();
    }
    fe.soft_ce = mean_ce_sum(model, xs, ts, thetas);
  }
  fe.penalty = 0.5 * model.squared_norm();
  fe.total = fe.hard_ce + cfg.beta * fe.penalty;
  if (!soft.empty()) fe.total += cfg.tau * (fe.soft_ce + cfg.beta * fe.penalty);
  return fe;
}

double evaluate_accuracy(const MlpClassifier& model, const ExampleSet& test, std::size_t samples,
                         Rng& rng) {
  if (test.empty()) throw std::invalid_argument("evaluate_accuracy: empty test set");
  if (!test.labeled()) throw std::invalid_argument("evaluate_accuracy: test set has no labels");
  Matrix mean;
  if (model.variational()) {
    mean = predictive_mean(model, test.features, samples, rng);
  } else {
    mean.resize(test.features.rows(), static_cast<Eigen::Index>(model.spec().classes));
    for (Eigen::Index start = 0; start < test.features.rows(); start += kEvalChunk) {
      const Eigen::Index n = std::min(kEvalChunk, test.features.rows() - start);
      mean.middleRows(start, n) = model.predict_proba(test.features.middleRows(start, n));
    }
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    if (static_cast<int>(argmax(row_span(mean, static_cast<Eigen::Index>(i)))) == test.labels[i]) {
      ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

TrainResult train(MlpClassifier& model, const ExampleSet& labeled,
                  std::span<const SoftExample> soft, const TrainingConfig& cfg, Rng& rng,
                  const ExampleSet* validation, const EpochCallback& on_epoch) {
  cfg.validate();
  if (labeled.empty() && soft.empty()) throw std::invalid_argument("train: no training data");
  if (!cfg.warm_start) model.reinitialize(rng);

  const std::size_t K = model.spec().classes;
  const bool use_soft = cfg.tau > 0.0 && !soft.empty();

  // Rows: L0 in order, then L_tr in insertion order.
  Matrix assembled_x;
  Matrix targets = labeled.empty() ? Matrix(0, static_cast<Eigen::Index>(K))
                                   : one_hot_targets(labeled, K);
  std::vector<double> weights(labeled.size(), 1.0);
  const Matrix* X = &labeled.features;
  if (use_soft) {
    const auto n0 = static_cast<Eigen::Index>(labeled.size());
    const auto n = n0 + static_cast<Eigen::Index>(soft.size());
    assembled_x.resize(n, static_cast<Eigen::Index>(model.spec().input_dim));
    if (n0 > 0) assembled_x.topRows(n0) = labeled.features;
    Matrix t(n, static_cast<Eigen::Index>(K));
    if (n0 > 0) t.topRows(n0) = targets;
    for (std::size_t j = 0; j < soft.size(); ++j) {
      const auto r = n0 + static_cast<Eigen::Index>(j);
      assembled_x.row(r) = training_input(soft[j], cfg.ce_variant).transpose();
      t.row(r) = soft[j].target.probs.transpose();
      weights.push_back(cfg.tau);
    }
    targets = std::move(t);
    X = &assembled_x;
  }
  const Eigen::Index n = X->rows();
  if (n == 0) throw std::invalid_argument("train: no training rows (tau = 0 and L0 empty)");

  // The per-example objective is the free energy divided by n, so the prior
  // share (1 for L0, tau more for L_tr) is spread over the n rows.
  const double prior_share = 1.0 + (use_soft ? cfg.tau : 0.0);
  const double l2 = cfg.beta * prior_share / static_cast<double>(n);

  auto& W = model.weights();
  auto& b = model.biases();
  const std::size_t L = W.size();
  std::vector<Matrix> vW(L);
  std::vector<Vector> vb(L);
  for (std::size_t l = 0; l < L; ++l) {
    vW[l] = Matrix::Zero(W[l].rows(), W[l].cols());
    vb[l] = Vector::Zero(b[l].size());
  }

  const bool early_stop = validation != nullptr && cfg.early_stop_patience > 0;
  TrainResult result;
  double best_acc = -1.0;
  std::size_t since_best = 0;
  std::vector<Matrix> best_W;
  std::vector<Vector> best_b;

  Gradients grad;
  BatchMasks masks;
  masks.site.resize(L);
  const auto& dropout = model.spec().dropout;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (Eigen::Index start = 0; start < n; start += static_cast<Eigen::Index>(cfg.minibatch)) {
      const Eigen::Index m = std::min<Eigen::Index>(static_cast<Eigen::Index>(cfg.minibatch), n - start);
      const Matrix xb = X->middleRows(start, m);
      const Matrix tb = targets.middleRows(start, m);
      for (std::size_t l = 0; l < L; ++l) {
        const double p = dropout[l];
        if (p <= 0.0) {
          masks.site[l].resize(0, 0);
          continue;
        }
        const double scale = 1.0 / (1.0 - p);
        Matrix& mk = masks.site[l];
        mk.resize(m, W[l].rows());
        double* d = mk.data();
        for (Eigen::Index i = 0; i < mk.size(); ++i) d[i] = rng.uniform() >= p ? scale : 0.0;
      }
      const double loss = batch_loss_and_gradient(
          model, xb, tb, std::span<const double>(weights).subspan(static_cast<std::size_t>(start), static_cast<std::size_t>(m)),
          masks, l2, &grad);
      if (!std::isfinite(loss)) {
        result.epoch_loss.push_back(loss);
        throw DivergenceError("training diverged at epoch " + std::to_string(epoch) +
                                  ", minibatch starting at row " + std::to_string(start),
                              result.epoch_loss);
      }
      loss_sum += loss;
      ++batches;
      for (std::size_t l = 0; l < L; ++l) {
        if (cfg.weight_decay != 0.0) {
          grad.weights[l] += cfg.weight_decay * W[l];
          grad.biases[l] += cfg.weight_decay * b[l];
        }
        vW[l] = cfg.momentum * vW[l] + grad.weights[l];
        vb[l] = cfg.momentum * vb[l] + grad.biases[l];
        W[l] -= cfg.lr * vW[l];
        b[l] -= cfg.lr * vb[l];
      }
    }
    result.epoch_loss.push_back(loss_sum / static_cast<double>(batches));

    double acc = std::numeric_limits<double>::quiet_NaN();
    if (early_stop) {
      Rng eval_rng(derive_seed(rng.seed(), "validation", epoch));
      acc = evaluate_accuracy(model, *validation, model.mc_samples(), eval_rng);
      result.validation_accuracy.push_back(acc);
    }
    if (on_epoch) on_epoch(epoch, result.epoch_loss.back(), acc);
    if (early_stop) {
      if (acc > best_acc) {
        best_acc = acc;
        result.best_epoch = epoch;
        best_W = W;
        best_b = b;
        since_best = 0;
      } else {
        // A tie moves the restore point forward but does not reset patience:
        // small validation sets change in coarse steps, and an equal score
        // after more training is the better snapshot to keep.
        if (acc == best_acc) {
          result.best_epoch = epoch;
          best_W = W;
          best_b = b;
        }
        if (++since_best >= cfg.early_stop_patience) {
          result.early_stopped = true;
          break;
        }
      }
    }
  }
  if (early_stop && !best_W.empty()) {
    W = std::move(best_W);
    b = std::move(best_b);
  }
  return result;
}

TeacherResult pretrain_teacher(const DatasetBundle& bundle, const TeacherConfig& cfg,
                               const EpochCallback& on_epoch) {
  if (bundle.teacher_train.empty()) throw std::invalid_argument("pretrain_teacher: empty teacher training set");
  if (bundle.teacher_val.empty()) throw std::invalid_argument("pretrain_teacher: empty teacher validation set");
  Rng init_rng(derive_seed(cfg.seed, "teacher-init"));
  TeacherResult out{MlpClassifier(cfg.spec, false, 1, init_rng), {}};
  Rng train_rng(derive_seed(cfg.seed, "teacher-train"));

  out.history = train(out.model, bundle.teacher_train, {}, cfg.training, train_rng,
                      &bundle.teacher_val, on_epoch);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

std::vector<std::uint8_t> serialize_model(const MlpClassifier& model) {
  const MlpSpec& spec = model.spec();
  ByteWriter w;
  w.magic(kModelMagic);
  w.u32(kModelVersion);
  w.u64(spec.input_dim);
  w.u64(spec.hidden.size());
  for (std::size_t h : spec.hidden) w.u64(h);
  w.u64(spec.classes);
  w.f64s(spec.dropout);
  w.u8(model.variational() ? 1 : 0);
  w.u64(model.mc_samples());
  for (std::size_t l = 0; l < spec.layers(); ++l) {
    const Matrix& W = model.weights()[l];
    w.f64s({W.data(), static_cast<std::size_t>(W.size())});
    w.f64s(as_span(model.biases()[l]));
  }
  append_crc32(w);
  return w.take();
}

MlpClassifier deserialize_model(std::span<const std::uint8_t> bytes) {
  const auto body = verify_crc32(bytes, "model checkpoint");
  ByteReader r(body);
  r.expect_magic(kModelMagic);
  const std::uint32_t version = r.u32();
  if (version != kModelVersion) {
    throw FormatError("model checkpoint: unsupported version " + std::to_string(version));
  }
  MlpSpec spec;
  spec.input_dim = r.u64();
  const std::uint64_t depth = r.u64();
  if (depth > 64) throw FormatError("model checkpoint: implausible depth " + std::to_string(depth));
  spec.hidden.resize(depth);
  for (auto& h : spec.hidden) h = r.u64();
  spec.classes = r.u64();
  spec.dropout.resize(depth + 1);
  r.f64s(spec.dropout);
  const bool variational = r.u8() != 0;
  const std::size_t mc = r.u64();
  try {
    spec.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("model checkpoint: ") + e.what());
  }
  std::size_t expected = 0;
  for (std::size_t l = 0; l < spec.layers(); ++l) expected += (spec.fan_in(l) + 1) * spec.fan_out(l) * 8;
  if (r.remaining() != expected) {
    throw FormatError("model checkpoint: expected " + std::to_string(expected) +
                      " bytes of parameters, found " + std::to_string(r.remaining()));
  }
  Rng unused(0);
  MlpClassifier model(spec, variational, std::max<std::size_t>(mc, 1), unused);
  for (std::size_t l = 0; l < spec.layers(); ++l) {
    Matrix& W = model.weights()[l];
    r.f64s({W.data(), static_cast<std::size_t>(W.size())});
    Vector& b = model.biases()[l];
    r.f64s({b.data(), static_cast<std::size_t>(b.size())});
  }
  return model;
}

void save_model(const std::filesystem::path& path, const MlpClassifier& model) {
  write_file_bytes(path, serialize_model(model));
}

MlpClassifier load_model(const std::filesystem::path& path) {
  return deserialize_model(read_file_bytes(path));
}

}  // namespace bakd
