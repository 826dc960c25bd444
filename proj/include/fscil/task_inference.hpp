#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "fscil/config.hpp"
#include "fscil/tensor.hpp"

namespace fscil {

struct ClassGaussian {
  std::size_t cls = 0;
  std::size_t session = 0;
  std::vector<double> mean;
  std::size_t count = 0;
};

/// Class means of one session plus its pooled within-class scatter, normalised
/// by the session's total sample count.
struct SessionStats {
  std::size_t session = 0;
  std::vector<ClassGaussian> classes;
  Tensor scatter;  // D x D
  std::size_t samples = 0;
};

/// Fits means and pooled scatter from embeddings (rows) and labels. Classes
/// appear in ascending label order.
SessionStats fit_class_stats(const Tensor& embeddings, std::span<const std::size_t> labels,
                             std::size_t session);

/// Pooled scatter of rows around per-row centers, divided by the row count.
Tensor pooled_scatter(const Tensor& points, const Tensor& centers);

/// Elementwise sum; an empty `total` is treated as zero.
Tensor accumulate_covariance(const Tensor& total, const Tensor& session_scatter);

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
/// Throws NumericError naming the failing pivot.
Tensor cholesky(const Tensor& a);

/// Squared Mahalanobis distance under A + eps I, eps = reg * trace(A) / D.
class MahalanobisMetric {
 public:
  MahalanobisMetric(const Tensor& covariance, double reg = 1e-6);
  double distance(std::span<const double> x, std::span<const double> mean) const;
  double epsilon() const { return eps_; }
  std::size_t dim() const { return dim_; }

 private:
  std::size_t dim_;
  double eps_;
  Tensor chol_;
};

double squared_euclidean(std::span<const double> a, std::span<const double> b);

struct Selection {
  std::size_t index = 0;  // position in the candidate list
  std::size_t cls = 0;
  std::size_t session = 0;
  double distance = 0.0;
};

/// Nearest class by Mahalanobis (with `covariance`) or squared Euclidean
/// distance. Ties go to the lowest candidate index. metric must not be automatic.
Selection select_class(std::span<const double> h, std::span<const ClassGaussian> gaussians,
                       const Tensor& covariance, Metric metric, double reg = 1e-6);

/// Routing table over every class seen so far.
class TaskRouter {
 public:
  explicit TaskRouter(std::size_t dim, double reg = 1e-6) : dim_(dim), reg_(reg) {}

  std::size_t dim() const { return dim_; }
  const std::vector<ClassGaussian>& gaussians() const { return gaussians_; }
  const Tensor& covariance() const { return covariance_; }
  const std::vector<std::size_t>& sessions() const { return sessions_; }
  bool empty() const { return gaussians_.empty(); }

  /// Adds a session's class means and accumulates its scatter.
  void add_session(const SessionStats& stats);

  Selection select(std::span<const double> h, Metric metric) const;
  std::vector<Selection> select_all(const Tensor& h, Metric metric) const;

 private:
  std::size_t dim_;
  double reg_;
  std::vector<ClassGaussian> gaussians_;
  Tensor covariance_;
  std::vector<std::size_t> sessions_;
};

}  // namespace fscil
