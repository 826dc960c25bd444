#include "fscil/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "fscil/errors.hpp"

namespace fscil {

BatchNormParams BatchNormParams::identity(std::size_t features) {
  BatchNormParams p;
  p.gamma = Tensor(Shape{features}, 1.0);
  p.beta = Tensor(Shape{features}, 0.0);
  p.running_mean = Tensor(Shape{features}, 0.0);
  p.running_var = Tensor(Shape{features}, 1.0);
  return p;
}

void softmax_inplace(std::span<double> x) {
  if (x.empty()) return;
  const double m = *std::max_element(x.begin(), x.end());
  double s = 0.0;
  for (double& v : x) {
    v = std::exp(v - m);
    s += v;
  }
  for (double& v : x) v /= s;
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw ArgumentError("softmax axis " + std::to_string(axis) + " invalid for shape " +
                        shape_string(x.shape()));
  }
  Tensor out = x;
  const Shape& s = x.shape();
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  const std::size_t outer = x.size() / (inner * len);
  std::vector<double> buf(len);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      for (std::size_t k = 0; k < len; ++k) buf[k] = x[base + k * inner];
      softmax_inplace(buf);
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] = buf[k];
    }
  }
  return out;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

Tensor gelu(const Tensor& x) {
  Tensor out = x;
  for (double& v : out.values()) v = gelu(v);
  return out;
}

double softplus(double x) {
  // log1p(exp(-|x|)) + max(x, 0)
  return std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0);
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor batch_norm(const Tensor& x, BatchNormParams& p, Mode mode) {
  if (x.rank() != 2) throw ArgumentError("batch_norm expects a rank-2 input");
  const std::size_t n = x.rows();
  const std::size_t f = x.cols();
  if (p.features() != f) {
    throw ArgumentError("batch_norm has " + std::to_string(p.features()) +
                        " features, input has " + std::to_string(f));
  }
  Tensor out(x.shape());
  if (mode == Mode::train) {
    if (n < 2) throw UsageError("batch_norm in train mode needs a batch of at least 2");
    for (std::size_t j = 0; j < f; ++j) {
      double mean = 0.0;
      for (std::size_t i = 0; i < n; ++i) mean += x.at(i, j);
      mean /= static_cast<double>(n);
      double var = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double d = x.at(i, j) - mean;
        var += d * d;
      }
      var /= static_cast<double>(n);
      const double inv = 1.0 / std::sqrt(var + p.eps);
      for (std::size_t i = 0; i < n; ++i) {
        out.at(i, j) = p.gamma[j] * (x.at(i, j) - mean) * inv + p.beta[j];
      }
      const double unbiased = var * static_cast<double>(n) / static_cast<double>(n - 1);
      p.running_mean[j] = (1.0 - p.momentum) * p.running_mean[j] + p.momentum * mean;
      p.running_var[j] = (1.0 - p.momentum) * p.running_var[j] + p.momentum * unbiased;
    }
  } else {
    for (std::size_t j = 0; j < f; ++j) {
      const double inv = 1.0 / std::sqrt(p.running_var[j] + p.eps);
      for (std::size_t i = 0; i < n; ++i) {
        out.at(i, j) = p.gamma[j] * (x.at(i, j) - p.running_mean[j]) * inv + p.beta[j];
      }
    }
  }
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ArgumentError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double cosine_similarity(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw ArgumentError("cosine_similarity: length mismatch");
  const double nu = norm2(u);
  const double nv = norm2(v);
  if (nu == 0.0 || nv == 0.0) throw DomainError("cosine_similarity of a zero vector");
  const double c = dot(u, v) / (nu * nv);
  return std::clamp(c, -1.0, 1.0);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ArgumentError("matmul: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  Tensor out(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b.data() + p * n;
      double* orow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out(Shape{n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);
  return out;
}

std::vector<double> row_mean(const Tensor& x) {
  const std::size_t n = x.rows(), f = x.cols();
  std::vector<double> m(f, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < f; ++j) m[j] += x.at(i, j);
  for (double& v : m) v /= static_cast<double>(n);
  return m;
}

double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

}  // namespace fscil
