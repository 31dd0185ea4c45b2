#include "bakd/codec.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "bakd/binary_io.hpp"
#include "bakd/channel.hpp"

namespace bakd {

namespace {

constexpr std::string_view kCodecMagic = "BAKDCDC1";
constexpr std::string_view kBasisMagic = "BAKDPCA1";
constexpr std::uint32_t kCodecVersion = 1;
// Eigenvalues below this fraction of the largest count as numerically zero.
constexpr double kRankTolerance = 1e-10;

void check_batch_shape(const Matrix& batch, const CodecConfig& cfg, const char* where) {
  if (static_cast<std::size_t>(batch.rows()) != cfg.batch ||
      static_cast<std::size_t>(batch.cols()) != cfg.dim) {
    throw DimensionError(std::string(where) + ": batch is " + shape_of(batch) + ", codec expects " +
                         std::to_string(cfg.batch) + "x" + std::to_string(cfg.dim));
  }
}

Eigen::Map<const Vector> stacked(const Matrix& batch) {
  return {batch.data(), batch.size()};
}

}  // namespace

std::size_t CodecConfig::compressed_dim() const {
  return static_cast<std::size_t>(compressed_symbols(batch, dim, ratio));
}

void CodecConfig::validate() const {
  if (batch == 0 || dim == 0) throw std::invalid_argument("CodecConfig: B and D must be positive");
  if (!(ratio >= 0.0 && ratio < 1.0)) {
    throw std::invalid_argument("CodecConfig: compression ratio " + std::to_string(ratio) +
                                " outside [0, 1)");
  }
  if (fit_passes == 0) throw std::invalid_argument("CodecConfig: fit_passes must be >= 1");
  if (fit_pool_size < batch) throw std::invalid_argument("CodecConfig: fit_pool_size must be >= B");
}

MixupCodec::MixupCodec(CodecConfig cfg, Matrix z, Vector spectrum, Vector mean)
    : cfg_(cfg), z_(std::move(z)), spectrum_(std::move(spectrum)), mean_(std::move(mean)) {
  if (static_cast<std::size_t>(z_.rows()) != cfg_.stacked_dim()) {
    throw DimensionError("MixupCodec: Z has " + std::to_string(z_.rows()) + " rows, B*D = " +
                         std::to_string(cfg_.stacked_dim()));
  }
  if (z_.cols() == 0 || z_.cols() > z_.rows()) {
    throw DimensionError("MixupCodec: Z must have between 1 and B*D columns, got " + shape_of(z_));
  }
  if (mean_.size() == 0) mean_ = Vector::Zero(z_.rows());
  if (mean_.size() != z_.rows()) throw DimensionError("MixupCodec: mean length differs from B*D");
  cfg_.centered = mean_.squaredNorm() > 0.0 || cfg_.centered;
}

MixupCodec MixupCodec::identity(std::size_t batch, std::size_t dim) {
  CodecConfig cfg;
  cfg.batch = batch;
  cfg.dim = dim;
  cfg.ratio = 0.0;
  const auto n = static_cast<Eigen::Index>(batch * dim);
  return MixupCodec(cfg, Matrix::Identity(n, n), Vector::Ones(n));
}

Vector MixupCodec::encode(const Matrix& batch) const {
  check_batch_shape(batch, cfg_, "encode");
  if (cfg_.centered) return z_.transpose() * (stacked(batch) - mean_);
  return z_.transpose() * stacked(batch);
}

Matrix MixupCodec::reconstruct(std::span<const double> received) const {
  if (received.size() != compressed_dim()) {
    throw DimensionError("reconstruct: received " + std::to_string(received.size()) +
                         " symbols, codec emits " + std::to_string(compressed_dim()));
  }
  Vector flat = z_ * Eigen::Map<const Vector>(received.data(), z_.cols());
  if (cfg_.centered) flat += mean_;
  return Eigen::Map<const Matrix>(flat.data(), static_cast<Eigen::Index>(cfg_.batch),
                                  static_cast<Eigen::Index>(cfg_.dim));
}

Matrix MixupCodec::project(const Matrix& batch) const {
  const Vector code = encode(batch);
  return reconstruct(as_span(code));
}

Eigen::Block<const Matrix> MixupCodec::slot_block(std::size_t slot) const {
  if (slot >= cfg_.batch) throw std::out_of_range("MixupCodec::slot_block: slot out of range");
  const auto d = static_cast<Eigen::Index>(cfg_.dim);
  return z_.block(static_cast<Eigen::Index>(slot) * d, 0, d, z_.cols());
}

double distortion(const Matrix& original, const Matrix& decoded) {
  if (original.rows() != decoded.rows() || original.cols() != decoded.cols()) {
    throw DimensionError("distortion: shapes " + shape_of(original) + " and " + shape_of(decoded) +
                         " differ");
  }
  return (decoded - original).squaredNorm();
}

PcaBasis fit_pca_basis(const Matrix& examples, std::size_t batch, std::size_t passes,
                       std::size_t pool_size, bool centered, Rng& rng, std::size_t max_rank) {
  const auto n = static_cast<std::size_t>(examples.rows());
  if (batch == 0) throw std::invalid_argument("fit_pca_basis: B must be positive");
  if (n < batch) {
    throw std::invalid_argument("fit_pca_basis: " + std::to_string(n) +
                                " fit examples cannot fill a batch of " + std::to_string(batch));
  }
  if (passes == 0) throw std::invalid_argument("fit_pca_basis: passes must be >= 1");
  const auto dim = static_cast<std::size_t>(examples.cols());
  const auto bd = static_cast<Eigen::Index>(batch * dim);
  const std::size_t used = std::min(pool_size, n);
  const std::size_t per_pass = used / batch;
  if (per_pass == 0) throw std::invalid_argument("fit_pca_basis: fit pool smaller than one batch");

  Matrix gram = Matrix::Zero(bd, bd);
  Vector sum = Vector::Zero(bd);
  Matrix vecs(static_cast<Eigen::Index>(per_pass), bd);
  std::vector<std::size_t> order(n);
  for (std::size_t p = 0; p < passes; ++p) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    for (std::size_t v = 0; v < per_pass; ++v) {
      for (std::size_t j = 0; j < batch; ++j) {
        vecs.block(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(j * dim), 1,
                   static_cast<Eigen::Index>(dim)) =
            examples.row(static_cast<Eigen::Index>(order[v * batch + j]));
      }
    }
    gram.noalias() += vecs.transpose() * vecs;
    sum += vecs.colwise().sum().transpose();
  }
  const double count = static_cast<double>(passes * per_pass);
  PcaBasis basis;
  basis.batch = batch;
  basis.dim = dim;
  basis.centered = centered;
  basis.vector_count = passes * per_pass;
  basis.mean = Vector::Zero(bd);
  if (centered) {
    basis.mean = sum / count;
    gram -= count * basis.mean * basis.mean.transpose();
  }
  gram /= count;
  // Symmetrise away the rounding asymmetry of the accumulated products.
  gram = 0.5 * (gram + gram.transpose()).eval();
  basis.total_energy = gram.trace();
  const std::size_t rank = max_rank == 0 ? static_cast<std::size_t>(bd)
                                         : std::min<std::size_t>(max_rank, static_cast<std::size_t>(bd));
  EigenPairs pairs = top_eigenvectors(gram, rank);
  basis.vectors = std::move(pairs.vectors);
  basis.eigenvalues = std::move(pairs.values);
  return basis;
}

MixupCodec codec_from_basis(const PcaBasis& basis, const CodecConfig& cfg) {
  cfg.validate();
  if (basis.batch != cfg.batch || basis.dim != cfg.dim) {
    throw std::invalid_argument("codec_from_basis: basis is for B=" + std::to_string(basis.batch) +
                                ", D=" + std::to_string(basis.dim) + "; codec wants B=" +
                                std::to_string(cfg.batch) + ", D=" + std::to_string(cfg.dim));
  }
  const std::size_t m = cfg.compressed_dim();
  if (m > static_cast<std::size_t>(basis.vectors.cols())) {
    throw std::invalid_argument("codec_from_basis: M=" + std::to_string(m) + " exceeds the " +
                                std::to_string(basis.vectors.cols()) + " stored basis vectors");
  }
  const auto mi = static_cast<Eigen::Index>(m);
  CodecConfig c = cfg;
  c.centered = basis.centered;
  MixupCodec codec(c, basis.vectors.leftCols(mi), basis.eigenvalues.head(mi),
                   basis.centered ? basis.mean : Vector{});

  const double top = basis.eigenvalues.size() > 0 ? std::max(basis.eigenvalues[0], 0.0) : 0.0;
  std::size_t numeric_rank = 0;
  for (Eigen::Index i = 0; i < basis.eigenvalues.size(); ++i) {
    if (basis.eigenvalues[i] > kRankTolerance * top) ++numeric_rank;
  }
  codec.set_rank_padded(m > numeric_rank);
  const double total =
      basis.total_energy > 0.0 ? basis.total_energy : basis.eigenvalues.cwiseMax(0.0).sum();
  codec.set_retained_energy(total > 0.0 ? basis.eigenvalues.head(mi).cwiseMax(0.0).sum() / total : 1.0);
  return codec;
}

MixupCodec fit_codec(const Matrix& examples, const CodecConfig& cfg, Rng& rng) {
  cfg.validate();
  if (static_cast<std::size_t>(examples.cols()) != cfg.dim) {
    throw DimensionError("fit_codec: examples have " + std::to_string(examples.cols()) +
                         " features, config says D=" + std::to_string(cfg.dim));
  }
  const PcaBasis basis =
      fit_pca_basis(examples, cfg.batch, cfg.fit_passes, cfg.fit_pool_size, cfg.centered, rng);
  return codec_from_basis(basis, cfg);
}

ExampleSet balanced_subset(const ExampleSet& train, std::size_t count, std::uint64_t seed,
                           int num_classes) {
  if (!train.labeled()) throw std::invalid_argument("balanced_subset: set is unlabeled");
  const auto k = static_cast<std::size_t>(num_classes);
  if (count % k != 0) throw std::invalid_argument("balanced_subset: count not divisible by K");
  std::vector<std::vector<std::size_t>> by_class(k);
  for (std::size_t i = 0; i < train.size(); ++i) by_class[static_cast<std::size_t>(train.labels[i])].push_back(i);
  Rng rng(derive_seed(seed, "codec-fit-subset"));
  std::vector<std::size_t> rows;
  rows.reserve(count);
  for (auto& idx : by_class) {
    if (idx.size() < count / k) throw std::invalid_argument("balanced_subset: class too small");
    rng.shuffle(idx);
    rows.insert(rows.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(count / k));
  }
  rng.shuffle(rows);
  return train.subset(rows);
}

void save_codec(const std::filesystem::path& path, const MixupCodec& codec) {
  const CodecConfig& c = codec.config();
  ByteWriter w;
  w.magic(kCodecMagic);
  w.u32(kCodecVersion);
  w.u64(c.batch);
  w.u64(c.dim);
  w.u64(codec.compressed_dim());
  w.f64(c.ratio);
  w.u8(c.centered ? 1 : 0);
  const Matrix& z = codec.z();
  for (Eigen::Index col = 0; col < z.cols(); ++col) {
    for (Eigen::Index row = 0; row < z.rows(); ++row) w.f64(z(row, col));
  }
  w.f64s(as_span(codec.spectrum()));
  if (c.centered) w.f64s(as_span(codec.mean()));
  w.u8(codec.rank_padded() ? 1 : 0);
  w.f64(codec.retained_energy());
  append_crc32(w);
  write_file_bytes(path, w.buffer());
}

MixupCodec load_codec(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  ByteReader r(verify_crc32(bytes, "codec checkpoint " + path.string()));
  r.expect_magic(kCodecMagic);
  if (const auto v = r.u32(); v != kCodecVersion) {
    throw FormatError("codec checkpoint: unsupported version " + std::to_string(v));
  }
  CodecConfig c;
  c.batch = r.u64();
  c.dim = r.u64();
  const std::size_t m = r.u64();
  c.ratio = r.f64();
  c.centered = r.u8() != 0;
  const std::size_t bd = c.batch * c.dim;
  if (c.batch == 0 || c.dim == 0 || m == 0 || m > bd || bd > (1u << 16)) {
    throw FormatError("codec checkpoint: implausible shape B=" + std::to_string(c.batch) +
                      " D=" + std::to_string(c.dim) + " M=" + std::to_string(m));
  }
  Matrix z(static_cast<Eigen::Index>(bd), static_cast<Eigen::Index>(m));
  for (Eigen::Index col = 0; col < z.cols(); ++col) {
    for (Eigen::Index row = 0; row < z.rows(); ++row) z(row, col) = r.f64();
  }
  Vector spectrum(static_cast<Eigen::Index>(m));
  r.f64s({spectrum.data(), m});
  Vector mean;
  if (c.centered) {
    mean.resize(static_cast<Eigen::Index>(bd));
    r.f64s({mean.data(), bd});
  }
  const bool padded = r.u8() != 0;
  const double energy = r.f64();
  if (r.remaining() != 0) throw FormatError("codec checkpoint: trailing bytes");
  MixupCodec codec(c, std::move(z), std::move(spectrum), std::move(mean));
  codec.set_rank_padded(padded);
  codec.set_retained_energy(energy);
  return codec;
}

void save_basis(const std::filesystem::path& path, const PcaBasis& basis) {
  ByteWriter w;
  w.magic(kBasisMagic);
  w.u32(kCodecVersion);
  w.u64(basis.batch);
  w.u64(basis.dim);
  w.u8(basis.centered ? 1 : 0);
  w.u64(basis.vector_count);
  w.f64(basis.total_energy);
  w.u64(static_cast<std::uint64_t>(basis.vectors.cols()));
  w.f64s({basis.vectors.data(), static_cast<std::size_t>(basis.vectors.size())});
  w.f64s(as_span(basis.eigenvalues));
  w.f64s(as_span(basis.mean));
  append_crc32(w);
  write_file_bytes(path, w.buffer());
}

PcaBasis load_basis(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  ByteReader r(verify_crc32(bytes, "PCA basis " + path.string()));
  r.expect_magic(kBasisMagic);
  if (const auto v = r.u32(); v != kCodecVersion) {
    throw FormatError("PCA basis: unsupported version " + std::to_string(v));
  }
  PcaBasis b;
  b.batch = r.u64();
  b.dim = r.u64();
  b.centered = r.u8() != 0;
  b.vector_count = r.u64();
  b.total_energy = r.f64();
  const std::size_t cols = r.u64();
  const std::size_t bd = b.batch * b.dim;
  if (bd == 0 || bd > (1u << 16) || cols > bd) throw FormatError("PCA basis: implausible shape");
  b.vectors.resize(static_cast<Eigen::Index>(bd), static_cast<Eigen::Index>(cols));
  r.f64s({b.vectors.data(), bd * cols});
  b.eigenvalues.resize(static_cast<Eigen::Index>(cols));
  r.f64s({b.eigenvalues.data(), cols});
  b.mean.resize(static_cast<Eigen::Index>(bd));
  r.f64s({b.mean.data(), bd});
  if (r.remaining() != 0) throw FormatError("PCA basis: trailing bytes");
  return b;
}

}  // namespace bakd
