// Few-shot prototypes drawn from one side of each class, rectified by a net
// trained on outlier and pseudo-labeled pairs.
#pragma once

#include <cmath>
#include <vector>

#include "fscil/rectification.hpp"
#include "fscil/task_inference.hpp"
#include "support.hpp"

namespace fscil::testing {

struct PlantedBiasOutcome {
  double raw_error = 0.0;        // |few-shot mean - true mean| of the first class
  double rectified_error = 0.0;  // |R(few-shot mean) - true mean| of the first class
  bool improved() const { return rectified_error <= raw_error; }
};

inline double distance(std::span<const double> a, std::span<const double> b) {
  return std::sqrt(squared_euclidean(a, b));
}

inline PlantedBiasOutcome planted_bias_trial(std::uint64_t seed, std::size_t classes = 3, std::size_t dim = 4,
                                             std::size_t shots = 5, std::size_t pool_per_class = 30,
                                             std::size_t epochs = 300) {
  SeededRng rng(seed, 0xB1A5);
  std::vector<std::vector<double>> truth(classes);
  for (auto& m : truth) m = random_vector(dim, rng, 4.0);

  Tensor few(Shape{classes * shots, dim});
  std::vector<std::size_t> few_labels;
  Tensor pool(Shape{classes * pool_per_class, dim});
  for (std::size_t c = 0; c < classes; ++c) {
    auto side = random_vector(dim, rng);
    double norm = 0;
    for (double v : side) norm += v * v;
    for (double& v : side) v /= std::sqrt(norm);
    for (std::size_t s = 0; s < shots; ++s) {
      std::vector<double> x(dim);
      do {
        for (std::size_t j = 0; j < dim; ++j) x[j] = rng.normal();
      } while ([&] {
        double p = 0;
        for (std::size_t j = 0; j < dim; ++j) p += x[j] * side[j];
        return p < 0.5;
      }());
      for (std::size_t j = 0; j < dim; ++j) few.at(c * shots + s, j) = truth[c][j] + x[j];
      few_labels.push_back(c);
    }
    for (std::size_t s = 0; s < pool_per_class; ++s)
      for (std::size_t j = 0; j < dim; ++j) pool.at(c * pool_per_class + s, j) = truth[c][j] + rng.normal();
  }

  const SessionStats raw = fit_class_stats(few, few_labels, 0);
  TaskRouter router(dim);
  router.add_session(raw);
  const PseudoLabels pseudo = pseudo_label(pool, router, Metric::euclidean);

  std::vector<OutlierPairs> parts;
  std::vector<std::vector<double>> enriched(classes, std::vector<double>(dim, 0.0));
  for (std::size_t c = 0; c < classes; ++c) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < pseudo.index.size(); ++i)
      if (pseudo.cls[i] == c) rows.push_back(pseudo.index[i]);
    const Tensor members = gather_rows(pool, rows);
    for (std::size_t s = 0; s < shots; ++s)
      for (std::size_t j = 0; j < dim; ++j) enriched[c][j] += few.at(c * shots + s, j);
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t j = 0; j < dim; ++j) enriched[c][j] += members.at(r, j);
    for (double& v : enriched[c]) v /= static_cast<double>(shots + rows.size());
    parts.push_back(select_outlier_pairs(slice_rows(few, c * shots, shots), enriched[c], 1));
    if (!rows.empty()) parts.push_back(select_outlier_pairs(members, enriched[c], rows.size()));
  }

  RectificationConfig cfg;
  cfg.epochs = epochs;
  PredictionNet net = PredictionNet::create(dim, false, rng);
  train_prediction_net(net, merge_pairs(parts), cfg, rng);

  PlantedBiasOutcome out;
  const auto& mu = raw.classes[0].mean;
  out.raw_error = distance(mu, truth[0]);
  out.rectified_error = distance(rectify_prototype(net, mu), truth[0]);
  return out;
}

}  // namespace fscil::testing
