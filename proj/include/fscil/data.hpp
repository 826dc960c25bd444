#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fscil/rng.hpp"
#include "fscil/tensor.hpp"

namespace fscil {

/// Samples as rows of channel-last pixels, with integer class labels.
struct Dataset {
  Tensor features;  // samples x (image_size^2 * channels); empty when there are no samples
  std::vector<std::size_t> labels;
  std::size_t classes = 0;
  std::size_t image_size = 0;
  std::size_t channels = 1;

  std::size_t size() const { return labels.size(); }
  std::size_t pixels() const { return image_size * image_size * channels; }
  /// Subset by sample index, in the given order.
  Dataset subset(std::span<const std::size_t> index) const;
  std::uint64_t hash() const;
};

struct BlobSpec {
  std::size_t classes = 18;
  std::size_t dim = 16;  // must be a perfect square times channels
  std::size_t train_per_class = 40;
  std::size_t test_per_class = 40;
  double separation = 8.0;  // minimum mean distance in units of the within-class std
  double std = 1.0;
  std::uint64_t seed = 0;
};

struct Blobs {
  Dataset train;
  Dataset test;
  Tensor means;             // classes x dim
  double bayes_accuracy;    // nearest-true-mean Monte-Carlo estimate, in [0, 1]
};

/// Isotropic Gaussian clusters reshaped to sqrt(dim) x sqrt(dim) single-channel images.
Blobs generate_blobs(const BlobSpec& spec);

/// Nearest-true-mean accuracy of isotropic clusters, by Monte-Carlo.
double bayes_accuracy_estimate(const Tensor& means, double std, std::size_t samples_per_class,
                               std::uint64_t seed);

/// IDX element types.
enum class IdxType : std::uint8_t { u8 = 0x08, f64 = 0x0E };

struct IdxArray {
  IdxType type = IdxType::u8;
  std::vector<std::uint32_t> dims;
  std::vector<double> values;  // raw element values, not rescaled
};

IdxArray parse_idx(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> serialize_idx(const IdxArray& array);
IdxArray read_idx(const std::filesystem::path& path);
void write_idx(const std::filesystem::path& path, const IdxArray& array);

/// Images (rank 3 or 4: count, rows, cols[, channels]) plus a label file.
/// Byte pixels are scaled to [0, 1]; float pixels are taken as is.
Dataset load_idx_images(const std::filesystem::path& images, const std::filesystem::path& labels);
void save_idx_images(const Dataset& data, const std::filesystem::path& images,
                     const std::filesystem::path& labels);

/// One FSCIL session: disjoint label set, training sample indices into the
/// training set and the cumulative test pool into the test set.
struct SessionSpec {
  std::size_t index = 0;
  std::vector<std::size_t> classes;
  std::size_t ways = 0;
  std::size_t shots = 0;  // 0 for the base session (all samples)
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Class labels of the training and test sets; enough to plan splits.
struct DatasetMeta {
  std::size_t classes = 0;
  std::vector<std::size_t> train_labels;
  std::vector<std::size_t> test_labels;
};

/// Base session on classes [0, base_classes), then `sessions` sessions of
/// `ways` new classes with `shots` seeded picks each. sessions == 0 uses as
/// many as fit.
std::vector<SessionSpec> build_fscil_splits(const DatasetMeta& meta, std::size_t base_classes,
                                            std::size_t ways, std::size_t shots,
                                            std::uint64_t seed, std::size_t sessions = 0);

/// Training samples of one session. Move-only: the payload has exactly one owner.
class SessionView {
 public:
  SessionView(std::size_t session, Dataset data) : session_(session), data_(std::move(data)) {}
  SessionView(SessionView&&) = default;
  SessionView& operator=(SessionView&&) = default;
  SessionView(const SessionView&) = delete;
  SessionView& operator=(const SessionView&) = delete;

  std::size_t session() const { return session_; }
  const Dataset& data() const { return data_; }

 private:
  std::size_t session_;
  Dataset data_;
};

/// Hands out each session's training data once, in order. Data of a session
/// is gone once the next one is acquired; asking for it is a ContractViolation.
class SessionDataStream {
 public:
  SessionDataStream(const Dataset& train, const std::vector<SessionSpec>& specs);

  std::size_t sessions() const { return pending_.size(); }
  std::size_t next() const { return next_; }
  SessionView acquire(std::size_t session);

 private:
  std::vector<std::optional<Dataset>> pending_;
  std::size_t next_ = 0;
};

}  // namespace fscil

namespace fscil {

/// Shuffled index batches covering [0, n). A trailing batch of one sample is
/// merged into the previous batch so train-mode batch norm always sees two rows.
std::vector<std::vector<std::size_t>> minibatches(std::size_t n, std::size_t batch_size,
                                                  SeededRng& rng);

}  // namespace fscil
