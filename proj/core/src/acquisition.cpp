#include "bakd/acquisition.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace bakd {

namespace {

// K^n, or nullopt-like max() when it exceeds `cap`.
std::uint64_t config_count(std::size_t k, std::size_t n, std::uint64_t cap) {
  std::uint64_t c = 1;
  for (std::size_t i = 0; i < n; ++i) {
    if (c > cap / std::max<std::size_t>(k, 1)) return std::numeric_limits<std::uint64_t>::max();
    c *= k;
  }
  return c;
}

// Appends one point to a product table: next(s, c*K + y) = prefix(s, c) * t(s, y).
Matrix extend_products(const Matrix& prefix, const Matrix& t) {
  const Eigen::Index S = prefix.rows();
  const Eigen::Index C = prefix.cols();
  const Eigen::Index K = t.cols();
  Matrix next(S, C * K);
  for (Eigen::Index s = 0; s < S; ++s) {
    for (Eigen::Index c = 0; c < C; ++c) {
      const double pc = prefix(s, c);
      for (Eigen::Index y = 0; y < K; ++y) next(s, c * K + y) = pc * t(s, y);
    }
  }
  return next;
}

void check_tables(std::span<const Matrix* const> tables) {
  if (tables.empty()) return;
  const Eigen::Index S = tables[0]->rows();
  const Eigen::Index K = tables[0]->cols();
  for (const Matrix* t : tables) {
    if (t->rows() != S) {
      throw std::invalid_argument("batchbald: sample tables disagree on S (" +
                                  std::to_string(t->rows()) + " vs " + std::to_string(S) + ")");
    }
    if (t->cols() != K) throw std::invalid_argument("batchbald: sample tables disagree on K");
  }
  if (S < 2) throw std::invalid_argument("batchbald: need S >= 2 samples (MI is 0 from one sample)");
}

std::size_t categorical(std::span<const double> p, double u) {
  double acc = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    acc += p[k];
    if (u < acc) return k;
  }
  // Rounding left u beyond the cumulative sum; take the last class with mass.
  for (std::size_t k = p.size(); k-- > 0;) {
    if (p[k] > 0.0) return k;
  }
  return p.size() - 1;
}

void require_pool(std::size_t pool_size, std::size_t batch) {
  if (pool_size < batch) {
    throw std::invalid_argument("acquisition: pool of " + std::to_string(pool_size) +
                                " cannot supply a batch of " + std::to_string(batch));
  }
}

}  // namespace

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::batchbald: return "batchbald";
    case Strategy::batchbald_compression_aware: return "batchbald_compression_aware";
    case Strategy::random: return "random";
    case Strategy::max_entropy: return "max_entropy";
  }
  return "unknown";
}

Strategy parse_strategy(std::string_view s) {
  if (s == "batchbald") return Strategy::batchbald;
  if (s == "batchbald_compression_aware" || s == "batchbald_ca") {
    return Strategy::batchbald_compression_aware;
  }
  if (s == "random") return Strategy::random;
  if (s == "max_entropy") return Strategy::max_entropy;
  throw std::invalid_argument("unknown acquisition strategy '" + std::string(s) + "'");
}

void AcquisitionConfig::validate() const {
  if (batch_size == 0) throw std::invalid_argument("AcquisitionConfig: B must be >= 1");
  if (mc_samples == 0) throw std::invalid_argument("AcquisitionConfig: S must be >= 1");
  if (epistemic() && mc_samples < 2) {
    throw std::invalid_argument("AcquisitionConfig: epistemic strategies need S >= 2");
  }
  if (joint_config_limit == 0) throw std::invalid_argument("AcquisitionConfig: joint_config_limit must be >= 1");
  if (joint_samples == 0) throw std::invalid_argument("AcquisitionConfig: joint_samples must be >= 1");
}

double mean_row_entropy(const Matrix& sample_probs) {
  double total = 0.0;
  for (Eigen::Index s = 0; s < sample_probs.rows(); ++s) {
    total += entropy_unchecked(row_span(sample_probs, s));
  }
  return total / static_cast<double>(sample_probs.rows());
}

double bald_score(const Matrix& sample_probs) {
  if (sample_probs.rows() < 2) throw std::invalid_argument("bald_score: need S >= 2 samples");
  const Eigen::Index K = sample_probs.cols();
  Vector mean = Vector::Zero(K);
  for (Eigen::Index s = 0; s < sample_probs.rows(); ++s) {
    for (Eigen::Index y = 0; y < K; ++y) mean[y] += sample_probs(s, y);
  }
  mean /= static_cast<double>(sample_probs.rows());
  return entropy_unchecked(as_span(mean)) - mean_row_entropy(sample_probs);
}

Matrix joint_sample_products(std::span<const Matrix* const> tables, std::size_t samples) {
  Matrix prefix = Matrix::Ones(static_cast<Eigen::Index>(samples), 1);
  for (const Matrix* t : tables) prefix = extend_products(prefix, *t);
  return prefix;
}

double joint_entropy_from_prefix(const Matrix& prefix, const Matrix& last) {
  const Eigen::Index S = prefix.rows();
  const Eigen::Index C = prefix.cols();
  const Eigen::Index K = last.cols();
  Matrix joint = Matrix::Zero(C, K);
  for (Eigen::Index s = 0; s < S; ++s) {
    for (Eigen::Index c = 0; c < C; ++c) {
      const double pc = prefix(s, c);
      for (Eigen::Index y = 0; y < K; ++y) joint(c, y) += pc * last(s, y);
    }
  }
  joint /= static_cast<double>(S);
  return entropy_unchecked({joint.data(), static_cast<std::size_t>(joint.size())});
}

double joint_entropy_exact(std::span<const Matrix* const> tables) {
  if (tables.empty()) return 0.0;
  check_tables(tables);
  const Matrix prefix =
      joint_sample_products(tables.first(tables.size() - 1), static_cast<std::size_t>(tables[0]->rows()));
  return joint_entropy_from_prefix(prefix, *tables.back());
}

SampledEntropy joint_entropy_sampled(std::span<const Matrix* const> tables, std::size_t draws,
                                     Rng& rng) {
  if (tables.empty()) return {};
  check_tables(tables);
  if (draws < 2) throw std::invalid_argument("joint_entropy_sampled: need at least two draws");
  const auto S = static_cast<std::size_t>(tables[0]->rows());
  const std::size_t b = tables.size();
  std::vector<Eigen::Index> config(b);
  double sum = 0.0;
  double sum_sq = 0.0;
  for (std::size_t d = 0; d < draws; ++d) {
    const auto s = static_cast<Eigen::Index>(rng.uniform_index(S));
    for (std::size_t j = 0; j < b; ++j) {
      config[j] = static_cast<Eigen::Index>(categorical(row_span(*tables[j], s), rng.uniform()));
    }
    double p = 0.0;
    for (Eigen::Index t = 0; t < static_cast<Eigen::Index>(S); ++t) {
      double prod = 1.0;
      for (std::size_t j = 0; j < b; ++j) prod *= (*tables[j])(t, config[j]);
      p += prod;
    }
    p /= static_cast<double>(S);
    const double h = -std::log(std::max(p, std::numeric_limits<double>::min()));
    sum += h;
    sum_sq += h * h;
  }
  const double n = static_cast<double>(draws);
  const double mean = sum / n;
  const double var = std::max(0.0, (sum_sq - n * mean * mean) / (n - 1.0));
  return {mean, std::sqrt(var / n)};
}

double batchbald_score(std::span<const Matrix* const> tables, const AcquisitionConfig& cfg,
                       Rng* rng) {
  if (tables.empty()) return 0.0;
  check_tables(tables);
  const auto K = static_cast<std::size_t>(tables[0]->cols());
  double joint = 0.0;
  if (config_count(K, tables.size(), cfg.joint_config_limit) <= cfg.joint_config_limit) {
    joint = joint_entropy_exact(tables);
  } else {
    if (rng == nullptr) throw std::invalid_argument("batchbald_score: sampled estimate needs an Rng");
    joint = joint_entropy_sampled(tables, cfg.joint_samples, *rng).value;
  }
  double conditional = 0.0;
  for (const Matrix* t : tables) conditional += mean_row_entropy(*t);
  return joint - conditional;
}

double batchbald_score(std::span<const Matrix> tables, const AcquisitionConfig& cfg, Rng* rng) {
  std::vector<const Matrix*> ptrs;
  ptrs.reserve(tables.size());
  for (const Matrix& t : tables) ptrs.push_back(&t);
  return batchbald_score(std::span<const Matrix* const>(ptrs), cfg, rng);
}

ScoredBatch greedy_select_tables(std::span<const Matrix> pool_tables, const AcquisitionConfig& cfg,
                                 Rng& rng) {
  cfg.validate();
  const std::size_t U = pool_tables.size();
  const std::size_t B = cfg.batch_size;
  require_pool(U, B);
  std::vector<const Matrix*> all;
  all.reserve(U);
  for (const Matrix& t : pool_tables) all.push_back(&t);
  check_tables(all);
  const auto S = static_cast<std::size_t>(pool_tables[0].rows());
  const auto K = static_cast<std::size_t>(pool_tables[0].cols());

  std::vector<double> cond(U);
  for (std::size_t i = 0; i < U; ++i) cond[i] = mean_row_entropy(pool_tables[i]);

  ScoredBatch out;
  std::vector<bool> taken(U, false);
  std::vector<const Matrix*> chosen;
  double cond_sel = 0.0;
  Matrix prefix = Matrix::Ones(static_cast<Eigen::Index>(S), 1);
  for (std::size_t b = 0; b < B; ++b) {
    const bool exact = config_count(K, b + 1, cfg.joint_config_limit) <= cfg.joint_config_limit;
    const std::uint64_t step_seed = exact ? 0 : rng.next_u64();
    double best = -std::numeric_limits<double>::infinity();
    std::size_t best_i = U;
    for (std::size_t i = 0; i < U; ++i) {
      if (taken[i]) continue;
      double joint = 0.0;
      if (exact) {
        joint = joint_entropy_from_prefix(prefix, pool_tables[i]);
      } else {
        Rng r(step_seed);
        chosen.push_back(&pool_tables[i]);
        joint = joint_entropy_sampled(chosen, cfg.joint_samples, r).value;
        chosen.pop_back();
      }
      const double score = joint - (cond_sel + cond[i]);
      if (score > best) {
        best = score;
        best_i = i;
      }
    }
    taken[best_i] = true;
    chosen.push_back(&pool_tables[best_i]);
    cond_sel += cond[best_i];
    out.indices.push_back(best_i);
    out.step_scores.push_back(best);
    const bool need_prefix =
        b + 1 < B && config_count(K, b + 2, cfg.joint_config_limit) <= cfg.joint_config_limit;
    if (need_prefix) prefix = extend_products(prefix, pool_tables[best_i]);
  }
  out.score = out.step_scores.back();
  return out;
}

ScoredBatch greedy_select(const Matrix& pool, const MlpClassifier& model,
                          const AcquisitionConfig& cfg, const MixupCodec* codec, Rng& rng) {
  cfg.validate();
  const auto U = static_cast<std::size_t>(pool.rows());
  const std::size_t B = cfg.batch_size;
  require_pool(U, B);
  const auto thetas = model.draw_thetas(cfg.mc_samples, rng);
  if (codec == nullptr) {
    const auto tables = mc_sample_tables(model, pool, thetas);
    return greedy_select_tables(tables, cfg, rng);
  }

  if (codec->batch() != B || codec->dim() != static_cast<std::size_t>(pool.cols())) {
    throw std::invalid_argument("greedy_select: codec shape (B=" + std::to_string(codec->batch()) +
                                ", D=" + std::to_string(codec->dim()) + ") does not match B=" +
                                std::to_string(B) + ", D=" + std::to_string(pool.cols()));
  }
  const auto D = pool.cols();
  const auto M = static_cast<Eigen::Index>(codec->compressed_dim());
  const bool centered = codec->config().centered;

  // Slot-wise codes of every pool point; a batch's code is the sum over its slots.
  std::vector<Matrix> slot_codes(B);
  for (std::size_t j = 0; j < B; ++j) slot_codes[j].noalias() = pool * codec->slot_block(j);
  Vector code_sel = Vector::Zero(M);
  if (centered) code_sel = -(codec->z().transpose() * codec->mean());

  ScoredBatch out;
  std::vector<bool> taken(U, false);
  std::vector<std::size_t> candidates;
  for (std::size_t b = 0; b < B; ++b) {
    candidates.clear();
    for (std::size_t i = 0; i < U; ++i) {
      if (!taken[i]) candidates.push_back(i);
    }
    const auto nc = static_cast<Eigen::Index>(candidates.size());
    const auto width = static_cast<Eigen::Index>(b + 1);
    Matrix codes(nc, M);
    for (Eigen::Index c = 0; c < nc; ++c) {
      codes.row(c) = code_sel.transpose() + slot_codes[b].row(static_cast<Eigen::Index>(candidates[static_cast<std::size_t>(c)]));
    }
    // Decoded surrogates: row c*width + j is slot j of candidate c's batch.
    Matrix surrogates(nc * width, D);
    for (Eigen::Index j = 0; j < width; ++j) {
      Matrix slot = codes * codec->slot_block(static_cast<std::size_t>(j)).transpose();
      if (centered) slot.rowwise() += codec->mean().segment(j * D, D).transpose();
      for (Eigen::Index c = 0; c < nc; ++c) surrogates.row(c * width + j) = slot.row(c);
    }
    const auto tables = mc_sample_tables(model, surrogates, thetas);

    const auto K = static_cast<std::size_t>(model.spec().classes);
    const bool exact = config_count(K, b + 1, cfg.joint_config_limit) <= cfg.joint_config_limit;
    const std::uint64_t step_seed = exact ? 0 : rng.next_u64();
    double best = -std::numeric_limits<double>::infinity();
    std::size_t best_c = 0;
    std::vector<const Matrix*> ptrs(static_cast<std::size_t>(width));
    for (Eigen::Index c = 0; c < nc; ++c) {
      for (Eigen::Index j = 0; j < width; ++j) {
        ptrs[static_cast<std::size_t>(j)] = &tables[static_cast<std::size_t>(c * width + j)];
      }
      Rng r(step_seed);
      const double score = batchbald_score(std::span<const Matrix* const>(ptrs), cfg, &r);
      if (score > best) {
        best = score;
        best_c = static_cast<std::size_t>(c);
      }
    }
    const std::size_t pick = candidates[best_c];
    taken[pick] = true;
    code_sel += slot_codes[b].row(static_cast<Eigen::Index>(pick)).transpose();
    out.indices.push_back(pick);
    out.step_scores.push_back(best);
  }
  out.score = out.step_scores.back();
  return out;
}

ScoredBatch max_entropy_select(const Matrix& pool, const MlpClassifier& model,
                               const AcquisitionConfig& cfg, Rng& rng) {
  cfg.validate();
  const auto U = static_cast<std::size_t>(pool.rows());
  require_pool(U, cfg.batch_size);
  const Matrix mean = predictive_mean(model, pool, cfg.mc_samples, rng);
  std::vector<double> h(U);
  for (std::size_t i = 0; i < U; ++i) h[i] = entropy_unchecked(row_span(mean, static_cast<Eigen::Index>(i)));
  std::vector<std::size_t> order(U);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return h[a] > h[b]; });
  ScoredBatch out;
  out.score = 0.0;
  for (std::size_t k = 0; k < cfg.batch_size; ++k) {
    out.indices.push_back(order[k]);
    out.step_scores.push_back(h[order[k]]);
    out.score += h[order[k]];
  }
  return out;
}

ScoredBatch random_select(std::size_t pool_size, const AcquisitionConfig& cfg, Rng& rng) {
  cfg.validate();
  require_pool(pool_size, cfg.batch_size);
  std::vector<std::size_t> idx(pool_size);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  // Partial Fisher-Yates: the first B slots receive a uniform sample without replacement.
  for (std::size_t k = 0; k < cfg.batch_size; ++k) {
    std::swap(idx[k], idx[k + rng.uniform_index(pool_size - k)]);
  }
  ScoredBatch out;
  out.indices.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(cfg.batch_size));
  out.score = std::numeric_limits<double>::quiet_NaN();
  return out;
}

ScoredBatch select_batch(const Matrix& pool, const MlpClassifier& model,
                         const AcquisitionConfig& cfg, const MixupCodec* codec, Rng& rng) {
  switch (cfg.strategy) {
    case Strategy::batchbald: return greedy_select(pool, model, cfg, nullptr, rng);
    case Strategy::batchbald_compression_aware:
      if (codec == nullptr) throw std::invalid_argument("compression-aware acquisition needs a codec");
      return greedy_select(pool, model, cfg, codec, rng);
    case Strategy::random: return random_select(static_cast<std::size_t>(pool.rows()), cfg, rng);
    case Strategy::max_entropy: return max_entropy_select(pool, model, cfg, rng);
  }
  throw std::logic_error("select_batch: unhandled strategy");
}

}  // namespace bakd
