#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "bakd/data_io.hpp"
#include "bakd/numerics.hpp"
#include "bakd/rng.hpp"

namespace bakd {

struct CodecConfig {
  std::size_t batch = 4;         // B
  std::size_t dim = 784;         // D
  double ratio = 0.99;           // R in [0, 1)
  std::size_t fit_passes = 10;
  std::size_t fit_pool_size = 10000;
  std::uint64_t seed = 0;
  bool centered = false;

  std::size_t stacked_dim() const noexcept { return batch * dim; }
  /// max(1, floor((1-R) * B * D)).
  std::size_t compressed_dim() const;
  void validate() const;
};

/// Eigenbasis of the (optionally centred) second-moment matrix of stacked
/// batch vectors. Truncating it to M columns gives the codec for any R.
struct PcaBasis {
  std::size_t batch = 0;
  std::size_t dim = 0;
  bool centered = false;
  Matrix vectors;          // BD x r, columns by non-increasing eigenvalue
  Vector eigenvalues;      // length r
  Vector mean;             // length BD; zero when uncentred
  std::size_t vector_count = 0;
  /// Trace of the fitted moment matrix, i.e. the energy of the full spectrum
  /// even when `vectors` is truncated.
  double total_energy = 0.0;
};

/// Joint linear compressor: encode is Z^T (x - mu), reconstruct is Z y + mu,
/// where x stacks the B inputs of a batch one after another (x_1, ..., x_B)
/// and mu is zero for the default uncentred fit.
class MixupCodec {
 public:
  MixupCodec() = default;
  MixupCodec(CodecConfig cfg, Matrix z, Vector spectrum, Vector mean = {});

  /// Z = I_{BD}: the R = 0 lossless case.
  static MixupCodec identity(std::size_t batch, std::size_t dim);

  const CodecConfig& config() const noexcept { return cfg_; }
  const Matrix& z() const noexcept { return z_; }
  const Vector& spectrum() const noexcept { return spectrum_; }
  const Vector& mean() const noexcept { return mean_; }
  std::size_t batch() const noexcept { return cfg_.batch; }
  std::size_t dim() const noexcept { return cfg_.dim; }
  std::size_t compressed_dim() const noexcept { return static_cast<std::size_t>(z_.cols()); }
  /// True when fewer eigenvalues than M were numerically nonzero at fit time.
  bool rank_padded() const noexcept { return rank_padded_; }
  void set_rank_padded(bool v) noexcept { rank_padded_ = v; }
  /// Fraction of the fit spectrum's total energy captured by the kept columns.
  double retained_energy() const noexcept { return retained_energy_; }
  void set_retained_energy(double v) noexcept { retained_energy_ = v; }

  /// `batch` is B x D (one input per row). Returns the length-M code.
  Vector encode(const Matrix& batch) const;
  /// Inverse map of a length-M vector to a B x D batch (no clipping).
  Matrix reconstruct(std::span<const double> received) const;
  /// reconstruct(encode(batch)): the noiseless local decode.
  Matrix project(const Matrix& batch) const;

  /// The D x M block of Z acting on batch slot `slot`.
  Eigen::Block<const Matrix> slot_block(std::size_t slot) const;

 private:
  CodecConfig cfg_;
  Matrix z_;
  Vector spectrum_;
  Vector mean_;
  bool rank_padded_ = false;
  double retained_energy_ = 1.0;
};

/// Squared Euclidean norm of the stacked difference.
double distortion(const Matrix& original, const Matrix& decoded);

/// Stacked batch vectors for the fit: each pass permutes the examples, keeps
/// the first min(fit_pool_size, n) and groups them into floor(that / B)
/// batches without replacement. `max_rank` (0 = all) truncates the basis.
PcaBasis fit_pca_basis(const Matrix& examples, std::size_t batch, std::size_t passes,
                       std::size_t pool_size, bool centered, Rng& rng, std::size_t max_rank = 0);

MixupCodec codec_from_basis(const PcaBasis& basis, const CodecConfig& cfg);

MixupCodec fit_codec(const Matrix& examples, const CodecConfig& cfg, Rng& rng);

/// Class-balanced subset of `train` used to fit codecs out of band.
ExampleSet balanced_subset(const ExampleSet& train, std::size_t count, std::uint64_t seed,
                           int num_classes = kNumClasses);

/// Checkpoint: "BAKDCDC1", u32 version, B, D, M, R, centred flag, then Z
/// column-major, the M-entry spectrum and (centred only) the mean, all as
/// little-endian f64, then a CRC-32 trailer.
void save_codec(const std::filesystem::path& path, const MixupCodec& codec);
MixupCodec load_codec(const std::filesystem::path& path);

void save_basis(const std::filesystem::path& path, const PcaBasis& basis);
PcaBasis load_basis(const std::filesystem::path& path);

}  // namespace bakd
