#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fscil/tensor.hpp"

namespace fscil {

/// Graph node. The node's gradient lives in value.grad() and is allocated on
/// first accumulation.
struct Node {
  Tensor value;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;
  bool requires_grad = false;
};

/// Handle to a graph node. Copies share the node; leaves created with
/// parameter() persist across steps and accumulate gradients until zeroed.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return node_->value.has_grad(); }
  /// Gradient buffer, or an empty span when nothing has been accumulated.
  std::span<const double> grad() const;
  void zero_grad() { node_->value.zero_grad(); }

  Node* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node>& shared() const noexcept { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Trainable leaf.
Var parameter(Tensor value);
/// Leaf that never receives a gradient.
Var constant(Tensor value);
/// New leaf holding a copy of v's value; cuts the graph.
Var detach(const Var& v);
/// Deep copy of a leaf (value and requires_grad flag, no gradient).
Var clone_leaf(const Var& v);

/// Back-propagates from a single-element root, accumulating into every
/// reachable node that requires a gradient.
void backward(const Var& root);

namespace ad {

Var matmul(const Var& a, const Var& b, bool transpose_a = false, bool transpose_b = false);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
/// a (m x n) + b (n), broadcast over rows.
Var add_bias(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
/// Elementwise product with a constant tensor of the same shape.
Var mul_const(const Var& a, const Tensor& c);

Var gelu(const Var& a);
Var relu(const Var& a);
Var softplus(const Var& a);

/// Softmax / log-softmax along the last axis of a matrix.
Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);
/// Each row divided by its L2 norm. Zero rows are a DomainError.
Var l2_normalize_rows(const Var& a);

Var sum(const Var& a);
Var mean(const Var& a);

/// Mean over rows of -log softmax(logits)[label].
Var cross_entropy(const Var& logits, std::span<const std::size_t> labels);
/// Mean over rows of -sum_j target_ij * log softmax(logits)_ij.
Var soft_cross_entropy(const Tensor& targets, const Var& logits);
/// Mean of squared differences over all elements.
Var mse(const Var& prediction, const Tensor& target);

Var concat_rows(std::span<const Var> parts);
Var slice_rows(const Var& a, std::size_t begin, std::size_t count);
/// Rows gathered by index (with repetition allowed).
Var gather_rows(const Var& a, std::span<const std::size_t> index);

}  // namespace ad

/// Stable content hash (FNV-1a over values and shapes).
std::uint64_t hash_values(std::span<const Var> vars);
std::uint64_t hash_tensor(const Tensor& t, std::uint64_t h = 1469598103934665603ULL);

}  // namespace fscil
