#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "fscil/autodiff.hpp"
#include "fscil/rng.hpp"

namespace fscil {

inline constexpr double kSpreadOffset = 4.0;
inline constexpr double kHeadTemperature = 16.0;

/// Classes added together (one session). Rows are classes.
struct HeadBlock {
  Var mean;    // classes x D
  Var spread;  // classes x D, pre-softplus
  std::size_t first_class = 0;
  std::size_t classes() const { return mean.rows(); }
};

/// Half-open range of head blocks.
struct BlockRange {
  std::size_t begin = 0;
  std::size_t end = 0;
};

/// Cosine classifier whose class weights are mean + noise * softplus(spread - offset).
class StochasticHead {
 public:
  StochasticHead(std::size_t dim, double temperature = kHeadTemperature,
                 double offset = kSpreadOffset);

  std::size_t dim() const { return dim_; }
  std::size_t classes() const;
  std::size_t blocks() const { return blocks_.size(); }
  double temperature() const { return temperature_; }
  void set_temperature(double t);
  double offset() const { return offset_; }
  /// Initial spread; defaults to the offset, giving noise scale ln 2.
  double spread_init() const { return spread_init_; }
  void set_spread_init(double s) { spread_init_ = s; }

  HeadBlock& block(std::size_t i) { return blocks_.at(i); }
  const HeadBlock& block(std::size_t i) const { return blocks_.at(i); }
  BlockRange all() const { return {0, blocks_.size()}; }
  /// Block holding a global class index.
  std::size_t block_of(std::size_t cls) const;

  /// Appends one block whose means are the given prototypes (classes x D).
  /// Existing blocks are left untouched. Returns the new block index.
  std::size_t init_means_from_prototypes(const Tensor& prototypes);

  /// Noise scale softplus(spread - offset) for one class.
  std::vector<double> noise_scale(std::size_t cls) const;
  /// mean + eps * softplus(spread - offset) with fresh eps, or mean when noise is off.
  std::vector<double> sample_weights(std::size_t cls, SeededRng* rng) const;

  /// Scaled cosine logits (batch x classes-in-range). A null rng disables noise.
  Var logits(const Var& z, SeededRng* rng, BlockRange range) const;
  Var logits(const Var& z, SeededRng* rng) const { return logits(z, rng, all()); }
  /// Logits with caller-supplied noise, one tensor per block in range.
  Var logits_with_noise(const Var& z, const std::vector<Tensor>& eps, BlockRange range) const;

  std::vector<double> class_probs(std::span<const double> z, SeededRng* rng, BlockRange range) const;
  std::vector<double> class_probs(std::span<const double> z, SeededRng* rng = nullptr) const {
    return class_probs(z, rng, all());
  }
  /// Argmax of class_probs as a global class index; ties go to the lower index.
  std::size_t predict_label(std::span<const double> z, BlockRange range, SeededRng* rng = nullptr) const;
  std::size_t predict_label(std::span<const double> z) const { return predict_label(z, all()); }

  /// Trainable leaves of the blocks in range (means, and spreads unless deterministic).
  std::vector<Var> parameters(BlockRange range, bool include_spread = true) const;
  void set_trainable(BlockRange range, bool on);
  std::uint64_t hash() const;

 private:
  Var weights(SeededRng* rng, const std::vector<Tensor>* eps,
              BlockRange range) const;

  std::size_t dim_;
  double temperature_;
  double offset_;
  double spread_init_;
  std::vector<HeadBlock> blocks_;
};

}  // namespace fscil
