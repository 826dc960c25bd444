#pragma once

#include <cstddef>
#include <vector>

#include "fscil/autodiff.hpp"
#include "fscil/ops.hpp"

namespace fscil {

/// Batch norm with trainable per-feature scale/shift and running statistics.
struct BatchNormLayer {
  Var gamma;
  Var beta;
  Tensor running_mean;
  Tensor running_var;
  double eps = kBatchNormEps;
  double momentum = kBatchNormMomentum;

  static BatchNormLayer make(std::size_t features);
  std::size_t features() const { return gamma.size(); }
};

/// Softmax attention weights of every head, laid out [batch][head][query][key].
struct AttentionMaps {
  std::size_t batch = 0;
  std::size_t heads = 0;
  std::size_t queries = 0;
  std::size_t keys = 0;
  std::vector<double> weights;

  double at(std::size_t b, std::size_t h, std::size_t q, std::size_t k) const {
    return weights[((b * heads + h) * queries + q) * keys + k];
  }
};

/// Spatial geometry for conv/pool over channel-last images stored as
/// (batch*height*width) x channels.
struct Geometry {
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;

  /// floor((in + 2*padding - kernel) / stride) + 1; throws if kernel exceeds padded input.
  std::size_t output_size(std::size_t in) const;
};

namespace ad {

/// Rows are samples; normalizes every column. See fscil::batch_norm for modes.
Var batch_norm(const Var& x, BatchNormLayer& layer, Mode mode);

/// Scaled dot-product attention for `batch` sequences of `tokens` rows each.
/// q, k, v are (batch*tokens) x d and already projected; heads split the
/// columns. Optional prefix keys/values (m x d) are prepended to every
/// sequence's keys and values; queries come from the tokens only. Output is
/// the concatenation of head outputs, (batch*tokens) x d.
Var attention(const Var& q, const Var& k, const Var& v, const Var& prefix_k, const Var& prefix_v,
              std::size_t batch, std::size_t tokens, std::size_t heads,
              AttentionMaps* maps = nullptr);

/// Attention pooling: per sequence, softmax over tokens of x*w, then the
/// weighted sum of tokens. x is (batch*tokens) x d, w is d x 1; returns batch x d.
Var sequence_pool(const Var& x, const Var& w, std::size_t batch, std::size_t tokens);

/// 2-D convolution without bias; weight is (kernel*kernel*in_channels) x out_channels
/// with patch order (ky, kx, channel).
Var conv2d(const Var& x, const Var& weight, std::size_t batch, std::size_t height, std::size_t width,
           const Geometry& g);

Var max_pool(const Var& x, std::size_t batch, std::size_t height, std::size_t width,
             const Geometry& g);

}  // namespace ad
}  // namespace fscil
