// Dataset metadata shaped like the standard benchmarks.
#pragma once

#include <set>
#include <string>
#include <vector>

#include "fscil/data.hpp"

namespace fscil::testing {

/// Equal per-class counts.
inline DatasetMeta uniform_meta(std::size_t classes, std::size_t train_per_class, std::size_t test_per_class) {
  DatasetMeta m;
  m.classes = classes;
  for (std::size_t c = 0; c < classes; ++c) {
    m.train_labels.insert(m.train_labels.end(), train_per_class, c);
    m.test_labels.insert(m.test_labels.end(), test_per_class, c);
  }
  return m;
}

/// 200 classes whose test counts reproduce the published cumulative pool
/// sizes of both the 100+10x10 and the 50+15x10 splits.
inline DatasetMeta cub_meta() {
  const std::vector<std::pair<std::size_t, std::size_t>> cumulative{
      {50, 1389},   {65, 1826},   {80, 2272},   {95, 2715},   {100, 2864},  {110, 3143},
      {120, 3430},  {125, 3578},  {130, 3728},  {140, 4028},  {150, 4326},  {155, 4466},
      {160, 4614},  {170, 4911},  {180, 5206},  {185, 5355},  {190, 5494},  {200, 5794}};
  DatasetMeta m;
  m.classes = 200;
  std::size_t cls = 0, size = 0;
  for (auto [upto, total] : cumulative) {
    const std::size_t n = upto - cls, add = total - size;
    for (std::size_t i = 0; i < n; ++i, ++cls) {
      const std::size_t count = add / n + (i < add % n ? 1 : 0);
      m.test_labels.insert(m.test_labels.end(), count, cls);
    }
    size = total;
  }
  for (std::size_t c = 0; c < 200; ++c) m.train_labels.insert(m.train_labels.end(), 30, c);
  return m;
}

inline const std::vector<std::size_t>& cub_sizes_100_10() {
  static const std::vector<std::size_t> v{2864, 3143, 3430, 3728, 4028, 4326, 4614, 4911, 5206, 5494, 5794};
  return v;
}

inline const std::vector<std::size_t>& cub_sizes_50_15() {
  static const std::vector<std::size_t> v{1389, 1826, 2272, 2715, 3143, 3578, 4028, 4466, 4911, 5355, 5794};
  return v;
}

/// Empty string when every invariant holds, else the first failure.
inline std::string check_split(const std::vector<SessionSpec>& specs, const DatasetMeta& meta, std::size_t ways,
                               std::size_t shots) {
  std::set<std::size_t> seen;
  std::size_t pool = 0;
  for (const auto& s : specs) {
    for (std::size_t c : s.classes)
      if (!seen.insert(c).second) return "class " + std::to_string(c) + " repeats in session " + std::to_string(s.index);
    std::set<std::size_t> own(s.classes.begin(), s.classes.end());
    for (std::size_t i : s.train)
      if (!own.count(meta.train_labels[i])) return "foreign training sample in session " + std::to_string(s.index);
    if (s.index > 0) {
      if (s.classes.size() != ways) return "wrong way count";
      if (s.train.size() != ways * shots) return "wrong shot count";
      for (std::size_t c : s.classes) {
        std::size_t n = 0;
        for (std::size_t i : s.train) n += meta.train_labels[i] == c;
        if (n != shots) return "class " + std::to_string(c) + " has " + std::to_string(n) + " shots";
      }
    } else {
      std::size_t n = 0;
      for (std::size_t y : meta.train_labels) n += own.count(y);
      if (s.train.size() != n) return "base session is missing samples";
    }
    std::size_t expect = 0;
    for (std::size_t y : meta.test_labels) expect += seen.count(y);
    if (s.test.size() != expect) return "test pool of session " + std::to_string(s.index) + " has the wrong size";
    for (std::size_t i : s.test)
      if (!seen.count(meta.test_labels[i])) return "test pool holds an unseen class";
    if (s.test.size() < pool) return "test pool shrank";
    pool = s.test.size();
  }
  return {};
}

}  // namespace fscil::testing
