#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "fscil/tensor.hpp"

namespace fscil {

enum class Mode { train, eval };

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Per-feature scale/shift plus running statistics. Features are the last axis.
struct BatchNormParams {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  double eps = kBatchNormEps;
  double momentum = kBatchNormMomentum;

  static BatchNormParams identity(std::size_t features);
  std::size_t features() const { return gamma.size(); }
};

/// Softmax along `axis`, computed with max subtraction.
Tensor softmax(const Tensor& x, std::size_t axis);
void softmax_inplace(std::span<double> x);

double gelu(double x);
/// d/dx of the exact erf GELU.
double gelu_grad(double x);
Tensor gelu(const Tensor& x);

/// ln(1 + e^x) without overflow for large |x|.
double softplus(double x);
double sigmoid(double x);

/// Rows of `x` (rank 2, rows = batch) normalized per feature. Train mode uses
/// batch statistics and updates the running ones (momentum, unbiased variance);
/// eval mode uses the running statistics only.
Tensor batch_norm(const Tensor& x, BatchNormParams& params, Mode mode);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);
double cosine_similarity(std::span<const double> u, std::span<const double> v);

/// Plain matrix product used outside of autodiff graphs.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

/// Mean of the rows of a matrix.
std::vector<double> row_mean(const Tensor& x);
/// Entropy (natural log) of a probability vector.
double entropy(std::span<const double> p);

}  // namespace fscil
