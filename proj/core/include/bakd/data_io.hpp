#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bakd/numerics.hpp"

namespace bakd {

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;
inline constexpr int kNumClasses = 10;

/// Malformed IDX container. `offset()` is the byte position of the problem.
class IdxFormatError : public std::runtime_error {
 public:
  IdxFormatError(const std::string& what, std::size_t offset);
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

struct Example {
  Vector features;  // length D, each in [0, 1]
  std::optional<int> hard_label;
  std::size_t source_index = 0;
};

/// A set of examples stored row-wise. `labels` is either empty (unlabeled)
/// or one entry per row. `source_index` identifies each row in the file it
/// came from; splits are disjoint in this index.
struct ExampleSet {
  Matrix features;
  std::vector<int> labels;
  std::vector<std::size_t> source_index;

  std::size_t size() const noexcept { return static_cast<std::size_t>(features.rows()); }
  std::size_t dim() const noexcept { return static_cast<std::size_t>(features.cols()); }
  bool empty() const noexcept { return size() == 0; }
  bool labeled() const noexcept { return !labels.empty(); }

  Example example(std::size_t i) const;
  ExampleSet subset(std::span<const std::size_t> rows) const;
  /// Copy without the rows at the given positions; remaining order is kept.
  ExampleSet without(std::span<const std::size_t> rows) const;
};

/// Loads an IDX3 image file (magic 0x00000803). Pixels are flattened
/// row-major and scaled by 1/255. Rows are unlabeled; source_index = file order.
ExampleSet load_idx_images(const std::filesystem::path& path);

/// Loads an IDX1 label file (magic 0x00000801). Labels >= num_classes are rejected.
std::vector<int> load_idx_labels(const std::filesystem::path& path, int num_classes = kNumClasses);

void write_idx_images(const std::filesystem::path& path, std::uint32_t rows, std::uint32_t cols,
                      std::span<const std::uint8_t> pixels);
void write_idx_labels(const std::filesystem::path& path, std::span<const std::uint8_t> labels);

struct MnistFiles {
  std::filesystem::path dir;
  std::string train_images = "train-images-idx3-ubyte";
  std::string train_labels = "train-labels-idx1-ubyte";
  std::string test_images = "t10k-images-idx3-ubyte";
  std::string test_labels = "t10k-labels-idx1-ubyte";
};

struct MnistData {
  ExampleSet train;
  ExampleSet test;
};

ExampleSet load_labeled(const std::filesystem::path& images, const std::filesystem::path& labels);
MnistData load_mnist(const MnistFiles& files);

struct SplitSpec {
  std::size_t learner_labeled = 10;
  std::size_t pool = 1000;
  std::size_t teacher_train = 50000;
  std::size_t teacher_val = 100;
  std::size_t repetitions = 10;
  std::uint64_t seed = 0;
  int num_classes = kNumClasses;
  /// Draw the teacher's train/validation splits once per seed and carve
  /// each repetition's L0 and pool from the rest, so one pretrained teacher
  /// serves every repetition. When false, all four splits vary per repetition.
  bool shared_teacher = true;

  void validate() const;
};

struct DatasetBundle {
  ExampleSet learner_labeled;  // L0, hard labels
  ExampleSet pool;             // U; labels retained for offline evaluation only
  ExampleSet teacher_train;
  ExampleSet teacher_val;
  ExampleSet test;
};

/// Class-balanced, pairwise-disjoint splits for one repetition.
///
/// With `shared_teacher`, per class the indices are shuffled with a stream
/// derived from `seed` alone and carved into teacher validation then teacher
/// training; the remainder is shuffled with Rng(seed + repetition) and carved
/// into learner labeled then pool. Otherwise one Rng(seed + repetition)
/// shuffle carves learner labeled, pool, teacher validation, teacher training.
/// Each split is finally shuffled so classes are interleaved.
DatasetBundle make_splits(const ExampleSet& train, const ExampleSet& test, const SplitSpec& spec,
                          std::size_t repetition);

}  // namespace bakd
