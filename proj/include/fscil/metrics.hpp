#pragma once

#include <cstddef>
#include <vector>

#include <json.hpp>

namespace fscil {

/// Predictions on the cumulative test pool after one session.
struct SessionPredictions {
  std::vector<std::size_t> labels;
  std::vector<std::size_t> predictions;
};

struct Metrics {
  std::vector<double> session_accuracy;           // percent, one per evaluation point
  std::vector<std::vector<double>> task_accuracy;  // [t][j], j <= t: accuracy on task j's classes after session t
  double average_accuracy = 0.0;  // mean of session_accuracy
  double forgetting = 0.0;        // mean over j < final of max_t a[t][j] - a[final][j]
  double macro_f1 = 0.0;          // final cumulative pool, in [0, 1]
};

/// `session_classes[j]` lists the classes introduced by task j; evaluation t
/// must only contain labels of tasks 0..t.
Metrics compute_metrics(const std::vector<SessionPredictions>& evals,
                        const std::vector<std::vector<std::size_t>>& session_classes);

/// Accuracy in percent; an empty set is an ArgumentError.
double accuracy(const std::vector<std::size_t>& labels, const std::vector<std::size_t>& predictions);

/// Mean per-class F1 over classes occurring in labels or predictions.
double macro_f1(const std::vector<std::size_t>& labels, const std::vector<std::size_t>& predictions);

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single value
};

Summary summarize(const std::vector<double>& values);

nlohmann::json to_json(const Metrics& m);
Metrics metrics_from_json(const nlohmann::json& j);

}  // namespace fscil
