#include "fscil/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "fscil/errors.hpp"

namespace fscil {

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-3});
  return std::abs(analytic - numeric) / denom;
}

namespace {

double scalar_of(const Var& out) {
  if (out.size() != 1) {
    throw ArgumentError("grad_check: function must return one element, got shape " +
                        shape_string(out.shape()));
  }
  return out.value()[0];
}

}  // namespace

GradReport grad_check(const std::function<Var()>& loss, std::span<const Var> wrt,
                      double tolerance, double step) {
  GradReport report;
  report.tolerance = tolerance;

  for (const Var& v : wrt) const_cast<Var&>(v).zero_grad();
  Var out = loss();
  const double f0 = scalar_of(out);
  backward(out);
  if (scalar_of(loss()) != f0) throw UsageError("grad_check: function is not deterministic");

  for (const Var& cv : wrt) {
    Var v = cv;
    auto g = v.grad();
    const std::vector<double> grads(g.begin(), g.end());
    auto x = v.mutable_value().values();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double saved = x[i];
      x[i] = saved + step;
      const double fp = scalar_of(loss());
      x[i] = saved - step;
      const double fm = scalar_of(loss());
      x[i] = saved;
      const double numeric = (fp - fm) / (2.0 * step);
      const double analytic = grads.empty() ? 0.0 : grads[i];
      report.analytic.push_back(analytic);
      report.numeric.push_back(numeric);
      report.max_rel_error = std::max(report.max_rel_error, relative_error(analytic, numeric));
      ++report.checked;
    }
  }
  for (const Var& v : wrt) const_cast<Var&>(v).zero_grad();
  return report;
}

GradReport grad_check(const std::function<Var(const Var&)>& f, const Tensor& x, double tolerance,
                      double step) {
  Var leaf = parameter(x);
  const Var leaves[] = {leaf};
  return grad_check([&] { return f(leaf); }, leaves, tolerance, step);
}

}  // namespace fscil
