#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "fscil/autodiff.hpp"
#include "fscil/config.hpp"
#include "fscil/rng.hpp"
#include "fscil/task_inference.hpp"

namespace fscil {

/// Maps an embedding to a predicted class prototype: two linear layers with a
/// GELU in between (hidden width D), or a single linear layer.
struct PredictionNet {
  std::size_t dim = 0;
  bool linear = false;
  std::size_t session = 0;
  Var w1, b1, w2, b2;  // w2/b2 unused in the linear variant

  /// Uniform(+-1/sqrt(D)) weights, zero biases.
  static PredictionNet create(std::size_t dim, bool linear, SeededRng& rng, std::size_t session = 0);
  /// Exact identity map (linear variant only).
  static PredictionNet identity(std::size_t dim, std::size_t session = 0);

  Var forward(const Var& x) const;
  Tensor apply(const Tensor& x) const;
  std::vector<double> apply(std::span<const double> x) const;
  std::vector<Var> parameters() const;
  std::vector<std::pair<std::string, Var>> named_parameters() const;
  std::uint64_t hash() const;
};

/// mean(full) - mean(subset).
std::vector<double> estimate_intra_class_bias(const Tensor& full, const Tensor& subset);

struct OutlierPairs {
  Tensor inputs;   // pairs x D
  Tensor targets;  // pairs x D
  std::vector<std::size_t> source;  // row index of each input in the class embeddings
  std::size_t size() const { return source.size(); }
};

/// The `count` rows farthest (Euclidean) from `prototype`, each paired with it.
/// Ties keep the lower row index first. count > rows is an ArgumentError
/// unless `lenient`, which clamps.
OutlierPairs select_outlier_pairs(const Tensor& class_embeddings, std::span<const double> prototype,
                                  std::size_t count, bool lenient = false);

/// Concatenation of pair lists.
OutlierPairs merge_pairs(const std::vector<OutlierPairs>& parts);

struct PseudoLabels {
  std::vector<std::size_t> index;  // row in the pool
  std::vector<std::size_t> cls;
};

/// Assigns every pool row to its nearest class under the router.
PseudoLabels pseudo_label(const Tensor& pool, const TaskRouter& router, Metric metric);

/// Mean squared error fit with Adam; returns per-epoch losses.
std::vector<double> train_prediction_net(PredictionNet& net, const OutlierPairs& pairs,
                                         const RectificationConfig& cfg, SeededRng& rng);

/// (P(mu) + mu) / 2.
std::vector<double> rectify_prototype(const PredictionNet& net, std::span<const double> mu);

/// Class means replaced by their rectified values and scatter recomputed from
/// P(h_i) around the rectified mean of each sample's class.
SessionStats refine_gaussian_stats(const PredictionNet& net, const Tensor& embeddings,
                                   std::span<const std::size_t> labels, const SessionStats& raw);

}  // namespace fscil
