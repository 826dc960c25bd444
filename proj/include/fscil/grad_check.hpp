#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "fscil/autodiff.hpp"

namespace fscil {

inline constexpr double kGradCheckStep = 1e-5;

struct GradReport {
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  std::size_t checked = 0;
  std::vector<double> analytic;
  std::vector<double> numeric;

  bool passed() const { return max_rel_error <= tolerance; }
};

/// |a - n| / max(|a|, |n|, 1e-3); the floor keeps near-zero gradients from
/// dominating the report.
double relative_error(double analytic, double numeric);

/// Compares d f(x) / dx against central differences. f must map a leaf to a
/// single-element Var and be deterministic; a second evaluation at the same
/// point that differs throws UsageError.
GradReport grad_check(const std::function<Var(const Var&)>& f, const Tensor& x,
                      double tolerance = 1e-4, double step = kGradCheckStep);

/// Same check for a closure over existing leaves. Every leaf in `wrt` is
/// perturbed in place and restored afterwards.
GradReport grad_check(const std::function<Var()>& loss, std::span<const Var> wrt,
                      double tolerance = 1e-4, double step = kGradCheckStep);

}  // namespace fscil
