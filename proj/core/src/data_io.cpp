#include "bakd/data_io.hpp"

#include <fstream>

#include "bakd/binary_io.hpp"
#include "bakd/rng.hpp"

namespace bakd {

namespace {

std::uint32_t read_be32(std::span<const std::uint8_t> data, std::size_t offset,
                        const std::string& what) {
  if (data.size() < offset + 4) {
    throw IdxFormatError(what + ": truncated header", data.size());
  }
  return (std::uint32_t{data[offset]} << 24) | (std::uint32_t{data[offset + 1]} << 16) |
         (std::uint32_t{data[offset + 2]} << 8) | std::uint32_t{data[offset + 3]};
}

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

std::string hex32(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "0x%08x", v);
  return buf;
}

}  // namespace

IdxFormatError::IdxFormatError(const std::string& what, std::size_t offset)
    : std::runtime_error(what + " (byte offset " + std::to_string(offset) + ")"),
      offset_(offset) {}

Example ExampleSet::example(std::size_t i) const {
  Example ex;
  ex.features = features.row(static_cast<Eigen::Index>(i)).transpose();
  if (labeled()) ex.hard_label = labels[i];
  ex.source_index = source_index[i];
  return ex;
}

ExampleSet ExampleSet::subset(std::span<const std::size_t> rows) const {
  ExampleSet out;
  out.features.resize(static_cast<Eigen::Index>(rows.size()), features.cols());
  out.source_index.reserve(rows.size());
  if (labeled()) out.labels.reserve(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const std::size_t r = rows[k];
    if (r >= size()) throw std::out_of_range("ExampleSet::subset: row " + std::to_string(r));
    out.features.row(static_cast<Eigen::Index>(k)) = features.row(static_cast<Eigen::Index>(r));
    out.source_index.push_back(source_index[r]);
    if (labeled()) out.labels.push_back(labels[r]);
  }
  return out;
}

ExampleSet ExampleSet::without(std::span<const std::size_t> rows) const {
  std::vector<bool> drop(size(), false);
  for (std::size_t r : rows) {
    if (r >= size()) throw std::out_of_range("ExampleSet::without: row " + std::to_string(r));
    drop[r] = true;
  }
  std::vector<std::size_t> keep;
  keep.reserve(size());
  for (std::size_t r = 0; r < size(); ++r) {
    if (!drop[r]) keep.push_back(r);
  }
  return subset(keep);
}

ExampleSet load_idx_images(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  const std::string what = "IDX images " + path.string();
  const std::uint32_t magic = read_be32(bytes, 0, what);
  if (magic != kIdxImageMagic) {
    throw IdxFormatError(what + ": bad magic " + hex32(magic) + ", expected " +
                             hex32(kIdxImageMagic),
                         0);
  }
  const std::uint64_t count = read_be32(bytes, 4, what);
  const std::uint64_t rows = read_be32(bytes, 8, what);
  const std::uint64_t cols = read_be32(bytes, 12, what);
  constexpr std::size_t kHeader = 16;
  const std::uint64_t dim = rows * cols;
  if (dim == 0 || dim > (1ULL << 24) || count * dim > (1ULL << 40)) {
    throw IdxFormatError(what + ": implausible dimensions " + std::to_string(count) + "x" +
                             std::to_string(rows) + "x" + std::to_string(cols),
                         4);
  }
  const std::uint64_t need = kHeader + count * dim;
  if (bytes.size() < need) {
    throw IdxFormatError(what + ": payload truncated, header declares " + std::to_string(count) +
                             " images needing " + std::to_string(need) + " bytes",
                         bytes.size());
  }

  ExampleSet out;
  out.features.resize(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(dim));
  const std::uint8_t* src = bytes.data() + kHeader;
  double* dst = out.features.data();
  for (std::uint64_t i = 0; i < count * dim; ++i) dst[i] = static_cast<double>(src[i]) / 255.0;
  out.source_index.resize(count);
  for (std::uint64_t i = 0; i < count; ++i) out.source_index[i] = i;
  return out;
}

std::vector<int> load_idx_labels(const std::filesystem::path& path, int num_classes) {
  const auto bytes = read_file_bytes(path);
  const std::string what = "IDX labels " + path.string();
  const std::uint32_t magic = read_be32(bytes, 0, what);
  if (magic != kIdxLabelMagic) {
    throw IdxFormatError(what + ": bad magic " + hex32(magic) + ", expected " +
                             hex32(kIdxLabelMagic),
                         0);
  }
  const std::uint64_t count = read_be32(bytes, 4, what);
  constexpr std::size_t kHeader = 8;
  if (bytes.size() < kHeader + count) {
    throw IdxFormatError(what + ": payload truncated, header declares " + std::to_string(count) +
                             " labels",
                         bytes.size());
  }
  std::vector<int> labels(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    const int y = bytes[kHeader + i];
    if (y >= num_classes) {
      throw IdxFormatError(what + ": label " + std::to_string(y) + " outside [0, " +
                               std::to_string(num_classes) + ")",
                           kHeader + i);
    }
    labels[i] = y;
  }
  return labels;
}

void write_idx_images(const std::filesystem::path& path, std::uint32_t rows, std::uint32_t cols,
                      std::span<const std::uint8_t> pixels) {
  const std::size_t dim = std::size_t{rows} * cols;
  if (dim == 0 || pixels.size() % dim != 0) {
    throw std::invalid_argument("write_idx_images: pixel count is not a multiple of rows*cols");
  }
  std::vector<std::uint8_t> out;
  out.reserve(16 + pixels.size());
  put_be32(out, kIdxImageMagic);
  put_be32(out, static_cast<std::uint32_t>(pixels.size() / dim));
  put_be32(out, rows);
  put_be32(out, cols);
  out.insert(out.end(), pixels.begin(), pixels.end());
  write_file_bytes(path, out);
}

void write_idx_labels(const std::filesystem::path& path, std::span<const std::uint8_t> labels) {
  std::vector<std::uint8_t> out;
  out.reserve(8 + labels.size());
  put_be32(out, kIdxLabelMagic);
  put_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.insert(out.end(), labels.begin(), labels.end());
  write_file_bytes(path, out);
}

ExampleSet load_labeled(const std::filesystem::path& images, const std::filesystem::path& labels) {
  ExampleSet set = load_idx_images(images);
  set.labels = load_idx_labels(labels);
  if (set.labels.size() != set.size()) {
    throw std::runtime_error("label count " + std::to_string(set.labels.size()) +
                             " does not match image count " + std::to_string(set.size()) +
                             " for " + images.string());
  }
  return set;
}

MnistData load_mnist(const MnistFiles& files) {
  MnistData data;
  data.train = load_labeled(files.dir / files.train_images, files.dir / files.train_labels);
  data.test = load_labeled(files.dir / files.test_images, files.dir / files.test_labels);
  if (data.train.dim() != data.test.dim()) {
    throw std::runtime_error("train and test images have different dimensions");
  }
  return data;
}

void SplitSpec::validate() const {
  if (num_classes <= 0) throw std::invalid_argument("SplitSpec: num_classes must be positive");
  const auto k = static_cast<std::size_t>(num_classes);
  auto check = [k](std::size_t n, const char* name) {
    if (n % k != 0) {
      throw std::invalid_argument(std::string("SplitSpec: ") + name + " = " + std::to_string(n) +
                                  " is not divisible by the number of classes");
    }
  };
  check(learner_labeled, "learner_labeled");
  check(pool, "pool");
  check(teacher_train, "teacher_train");
  check(teacher_val, "teacher_val");
  if (learner_labeled == 0) throw std::invalid_argument("SplitSpec: learner_labeled must be > 0");
  if (repetitions == 0) throw std::invalid_argument("SplitSpec: repetitions must be > 0");
}

DatasetBundle make_splits(const ExampleSet& train, const ExampleSet& test, const SplitSpec& spec,
                          std::size_t repetition) {
  spec.validate();
  if (repetition >= spec.repetitions) {
    throw std::invalid_argument("make_splits: repetition " + std::to_string(repetition) +
                                " >= repetitions " + std::to_string(spec.repetitions));
  }
  if (!train.labeled()) throw std::invalid_argument("make_splits: training set is unlabeled");

  const auto k = static_cast<std::size_t>(spec.num_classes);
  std::vector<std::vector<std::size_t>> by_class(k);
  for (std::size_t i = 0; i < train.size(); ++i) {
    const int y = train.labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw std::invalid_argument("make_splits: label out of range at row " + std::to_string(i));
    }
    by_class[static_cast<std::size_t>(y)].push_back(i);
  }

  const std::size_t counts[4] = {spec.learner_labeled / k, spec.pool / k, spec.teacher_val / k,
                                 spec.teacher_train / k};
  const std::size_t per_class = counts[0] + counts[1] + counts[2] + counts[3];

  for (std::size_t c = 0; c < k; ++c) {
    if (by_class[c].size() < per_class) {
      throw std::invalid_argument("make_splits: class " + std::to_string(c) + " has " +
                                  std::to_string(by_class[c].size()) + " examples, " +
                                  std::to_string(per_class) + " required");
    }
  }

  // parts: 0 learner labeled, 1 pool, 2 teacher validation, 3 teacher training.
  std::vector<std::size_t> parts[4];
  auto carve = [&](std::vector<std::size_t>& idx, std::size_t at, int first, int last) {
    for (int p = first; p <= last; ++p) {
      parts[p].insert(parts[p].end(), idx.begin() + static_cast<std::ptrdiff_t>(at),
                      idx.begin() + static_cast<std::ptrdiff_t>(at + counts[p]));
      at += counts[p];
    }
    return at;
  };
  Rng rng(spec.seed + repetition);
  if (spec.shared_teacher) {
    Rng teacher_rng(derive_seed(spec.seed, "teacher-split"));
    for (auto& idx : by_class) {
      teacher_rng.shuffle(idx);
      const std::size_t used = carve(idx, 0, 2, 3);
      std::vector<std::size_t> rest(idx.begin() + static_cast<std::ptrdiff_t>(used), idx.end());
      rng.shuffle(rest);
      carve(rest, 0, 0, 1);
    }
    for (int p : {2, 3}) teacher_rng.shuffle(parts[p]);
    for (int p : {0, 1}) rng.shuffle(parts[p]);
  } else {
    for (auto& idx : by_class) {
      rng.shuffle(idx);
      carve(idx, 0, 0, 3);
    }
    for (auto& p : parts) rng.shuffle(p);
  }

  DatasetBundle bundle;
  bundle.learner_labeled = train.subset(parts[0]);
  bundle.pool = train.subset(parts[1]);
  bundle.teacher_val = train.subset(parts[2]);
  bundle.teacher_train = train.subset(parts[3]);
  bundle.test = test;
  return bundle;
}

}  // namespace bakd
