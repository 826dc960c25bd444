#include "fscil/task_inference.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <sstream>

#include "fscil/errors.hpp"

namespace fscil {

SessionStats fit_class_stats(const Tensor& embeddings, std::span<const std::size_t> labels,
                             std::size_t session) {
  if (labels.empty()) throw ArgumentError("fit_class_stats: no samples");
  if (embeddings.rows() != labels.size()) throw ArgumentError("fit_class_stats: rows != labels");
  const std::size_t d = embeddings.cols();
  std::map<std::size_t, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < labels.size(); ++i) members[labels[i]].push_back(i);

  SessionStats s;
  s.session = session;
  s.samples = labels.size();
  std::map<std::size_t, std::size_t> slot;
  for (const auto& [cls, rows] : members) {
    ClassGaussian g;
    g.cls = cls;
    g.session = session;
    g.count = rows.size();
    g.mean.assign(d, 0.0);
    for (std::size_t r : rows) {
      for (std::size_t j = 0; j < d; ++j) g.mean[j] += embeddings.at(r, j);
    }
    for (double& m : g.mean) m /= static_cast<double>(rows.size());
    slot[cls] = s.classes.size();
    s.classes.push_back(std::move(g));
  }
  Tensor centers(Shape{labels.size(), d});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto& m = s.classes[slot[labels[i]]].mean;
    std::copy(m.begin(), m.end(), centers.row(i).begin());
  }
  s.scatter = pooled_scatter(embeddings, centers);
  return s;
}

Tensor pooled_scatter(const Tensor& points, const Tensor& centers) {
  if (points.shape() != centers.shape()) throw ArgumentError("pooled_scatter: shape mismatch");
  const std::size_t n = points.rows(), d = points.cols();
  Tensor a(Shape{d, d});
  std::vector<double> dev(d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) dev[j] = points.at(i, j) - centers.at(i, j);
    for (std::size_t r = 0; r < d; ++r) {
      for (std::size_t c = r; c < d; ++c) a.at(r, c) += dev[r] * dev[c];
    }
  }
  for (std::size_t r = 0; r < d; ++r) {
    for (std::size_t c = r; c < d; ++c) {
      a.at(r, c) /= static_cast<double>(n);
      a.at(c, r) = a.at(r, c);
    }
  }
  return a;
}

Tensor accumulate_covariance(const Tensor& total, const Tensor& session_scatter) {
  if (total.empty()) return session_scatter;
  if (total.shape() != session_scatter.shape()) {
    throw ArgumentError("accumulate_covariance: shape mismatch " + shape_string(total.shape()) +
                        " vs " + shape_string(session_scatter.shape()));
  }
  Tensor out(total.shape(), total.storage());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += session_scatter[i];
  return out;
}

Tensor cholesky(const Tensor& a) {
  const std::size_t n = a.rows();
  if (a.rank() != 2 || a.cols() != n) throw ArgumentError("cholesky needs a square matrix");
  Tensor l(Shape{n, n});
  for (std::size_t j = 0; j < n; ++j) {
    double diag = a.at(j, j);
    for (std::size_t k = 0; k < j; ++k) diag -= l.at(j, k) * l.at(j, k);
    if (!(diag > 0.0) || !std::isfinite(diag)) {
      std::ostringstream msg;
      msg << "matrix is not positive definite: pivot " << j << " is " << diag
          << " (regularised covariance is singular)";
      throw NumericError(msg.str());
    }
    const double ljj = std::sqrt(diag);
    l.at(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a.at(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l.at(i, k) * l.at(j, k);
      l.at(i, j) = s / ljj;
    }
  }
  return l;
}

MahalanobisMetric::MahalanobisMetric(const Tensor& covariance, double reg) : dim_(covariance.rows()) {
  if (covariance.rank() != 2 || covariance.cols() != dim_) {
    throw ArgumentError("covariance must be square, got " + shape_string(covariance.shape()));
  }
  double trace = 0.0;
  for (std::size_t i = 0; i < dim_; ++i) trace += covariance.at(i, i);
  eps_ = reg * trace / static_cast<double>(dim_);
  Tensor a = covariance;
  for (std::size_t i = 0; i < dim_; ++i) a.at(i, i) += eps_;
  chol_ = cholesky(a);
}

double MahalanobisMetric::distance(std::span<const double> x, std::span<const double> mean) const {
  if (x.size() != dim_ || mean.size() != dim_) throw ArgumentError("Mahalanobis: dimension mismatch");
  // Forward substitution L y = x - mean; distance is |y|^2.
  std::vector<double> y(dim_);
  double s2 = 0.0;
  for (std::size_t i = 0; i < dim_; ++i) {
    double s = x[i] - mean[i];
    for (std::size_t k = 0; k < i; ++k) s -= chol_.at(i, k) * y[k];
    y[i] = s / chol_.at(i, i);
    s2 += y[i] * y[i];
  }
  return s2;
}

double squared_euclidean(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ArgumentError("euclidean: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

namespace {

template <typename Dist>
Selection argmin(std::span<const ClassGaussian> gaussians, Dist&& dist) {
  if (gaussians.empty()) throw ArgumentError("select_class: no candidate classes");
  Selection best;
  best.distance = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < gaussians.size(); ++i) {
    const double d = dist(gaussians[i].mean);
    if (d < best.distance) best = {i, gaussians[i].cls, gaussians[i].session, d};
  }
  if (!std::isfinite(best.distance)) throw NumericError("select_class: no finite distance");
  return best;
}

}  // namespace

Selection select_class(std::span<const double> h, std::span<const ClassGaussian> gaussians,
                       const Tensor& covariance, Metric metric, double reg) {
  if (metric == Metric::euclidean) {
    return argmin(gaussians, [&](const std::vector<double>& m) { return squared_euclidean(h, m); });
  }
  if (metric != Metric::mahalanobis) throw ArgumentError("select_class needs a concrete metric");
  const MahalanobisMetric mm(covariance, reg);
  return argmin(gaussians, [&](const std::vector<double>& m) { return mm.distance(h, m); });
}

void TaskRouter::add_session(const SessionStats& stats) {
  if (stats.scatter.rows() != dim_) throw ArgumentError("session statistics have the wrong dimension");
  for (const auto& g : stats.classes) gaussians_.push_back(g);
  covariance_ = accumulate_covariance(covariance_, stats.scatter);
  sessions_.push_back(stats.session);
}

Selection TaskRouter::select(std::span<const double> h, Metric metric) const {
  return select_class(h, gaussians_, covariance_, metric, reg_);
}

std::vector<Selection> TaskRouter::select_all(const Tensor& h, Metric metric) const {
  std::vector<Selection> out;
  if (h.empty()) return out;
  if (metric == Metric::euclidean) {
    for (std::size_t i = 0; i < h.rows(); ++i) {
      out.push_back(argmin(std::span<const ClassGaussian>(gaussians_),
                           [&](const std::vector<double>& m) { return squared_euclidean(h.row(i), m); }));
    }
    return out;
  }
  if (metric != Metric::mahalanobis) throw ArgumentError("select_all needs a concrete metric");
  const MahalanobisMetric mm(covariance_, reg_);
  for (std::size_t i = 0; i < h.rows(); ++i) {
    out.push_back(argmin(std::span<const ClassGaussian>(gaussians_),
                         [&](const std::vector<double>& m) { return mm.distance(h.row(i), m); }));
  }
  return out;
}

}  // namespace fscil
