#include "fscil/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "fscil/errors.hpp"

namespace fscil {

double accuracy(const std::vector<std::size_t>& labels, const std::vector<std::size_t>& predictions) {
  if (labels.size() != predictions.size()) {
    throw ArgumentError("labels and predictions differ in length (" + std::to_string(labels.size()) +
                        " vs " + std::to_string(predictions.size()) + ")");
  }
  if (labels.empty()) throw ArgumentError("accuracy of an empty set");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += labels[i] == predictions[i];
  return 100.0 * static_cast<double>(correct) / static_cast<double>(labels.size());
}

double macro_f1(const std::vector<std::size_t>& labels, const std::vector<std::size_t>& predictions) {
  if (labels.size() != predictions.size()) throw ArgumentError("labels and predictions differ in length");
  if (labels.empty()) throw ArgumentError("F1 of an empty set");
  std::map<std::size_t, std::size_t> tp, fp, fn;
  std::set<std::size_t> classes(labels.begin(), labels.end());
  classes.insert(predictions.begin(), predictions.end());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == predictions[i]) {
      ++tp[labels[i]];
    } else {
      ++fp[predictions[i]];
      ++fn[labels[i]];
    }
  }
  double sum = 0.0;
  for (std::size_t c : classes) {
    const double t = static_cast<double>(tp[c]);
    const double denom = 2.0 * t + static_cast<double>(fp[c]) + static_cast<double>(fn[c]);
    sum += denom > 0.0 ? 2.0 * t / denom : 0.0;
  }
  return sum / static_cast<double>(classes.size());
}

Metrics compute_metrics(const std::vector<SessionPredictions>& evals,
                        const std::vector<std::vector<std::size_t>>& session_classes) {
  if (evals.empty()) throw ArgumentError("no evaluations to summarise");
  if (evals.size() > session_classes.size()) {
    throw ArgumentError("more evaluations (" + std::to_string(evals.size()) + ") than tasks (" +
                        std::to_string(session_classes.size()) + ")");
  }
  std::map<std::size_t, std::size_t> task_of;
  for (std::size_t j = 0; j < session_classes.size(); ++j) {
    for (std::size_t c : session_classes[j]) {
      if (!task_of.emplace(c, j).second) throw ArgumentError("class " + std::to_string(c) + " belongs to two tasks");
    }
  }
  Metrics m;
  for (std::size_t t = 0; t < evals.size(); ++t) {
    const auto& e = evals[t];
    m.session_accuracy.push_back(accuracy(e.labels, e.predictions));
    std::vector<std::size_t> correct(t + 1, 0), total(t + 1, 0);
    for (std::size_t i = 0; i < e.labels.size(); ++i) {
      auto it = task_of.find(e.labels[i]);
      if (it == task_of.end() || it->second > t) {
        throw ArgumentError("evaluation " + std::to_string(t) + " contains label " +
                            std::to_string(e.labels[i]) + " of an unseen task");
      }
      ++total[it->second];
      correct[it->second] += e.labels[i] == e.predictions[i];
    }
    std::vector<double> row(t + 1, 0.0);
    for (std::size_t j = 0; j <= t; ++j) {
      row[j] = total[j] ? 100.0 * static_cast<double>(correct[j]) / static_cast<double>(total[j]) : 0.0;
    }
    m.task_accuracy.push_back(std::move(row));
  }
  m.average_accuracy = std::accumulate(m.session_accuracy.begin(), m.session_accuracy.end(), 0.0) /
                       static_cast<double>(m.session_accuracy.size());
  const std::size_t final = evals.size() - 1;
  if (final > 0) {
    double sum = 0.0;
    for (std::size_t j = 0; j < final; ++j) {
      double best = 0.0;
      for (std::size_t t = j; t <= final; ++t) best = std::max(best, m.task_accuracy[t][j]);
      sum += best - m.task_accuracy[final][j];
    }
    m.forgetting = sum / static_cast<double>(final);
  }
  m.macro_f1 = macro_f1(evals[final].labels, evals[final].predictions);
  return m;
}

Summary summarize(const std::vector<double>& values) {
  Summary s;
  if (values.empty()) return s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  if (values.size() > 1) {
    double v = 0.0;
    for (double x : values) v += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(v / static_cast<double>(values.size() - 1));
  }
  return s;
}

nlohmann::json to_json(const Metrics& m) {
  return {{"session_accuracy", m.session_accuracy},
          {"task_accuracy", m.task_accuracy},
          {"average_accuracy", m.average_accuracy},
          {"forgetting", m.forgetting},
          {"macro_f1", m.macro_f1}};
}

Metrics metrics_from_json(const nlohmann::json& j) {
  Metrics m;
  m.session_accuracy = j.at("session_accuracy").get<std::vector<double>>();
  m.task_accuracy = j.at("task_accuracy").get<std::vector<std::vector<double>>>();
  m.average_accuracy = j.at("average_accuracy").get<double>();
  m.forgetting = j.at("forgetting").get<double>();
  m.macro_f1 = j.at("macro_f1").get<double>();
  return m;
}

}  // namespace fscil
