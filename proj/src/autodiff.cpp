#include "fscil/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

#include "fscil/errors.hpp"
#include "fscil/ops.hpp"

namespace fscil {

std::span<const double> Var::grad() const {
  if (!node_->value.has_grad()) return {};
  return node_->value.grad();
}

Var parameter(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return Var(std::move(n));
}

Var constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return Var(std::move(n));
}

Var detach(const Var& v) {
  Tensor t(v.value().shape(), v.value().storage());
  return constant(std::move(t));
}

Var clone_leaf(const Var& v) {
  Tensor t(v.value().shape(), v.value().storage());
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  n->requires_grad = v.requires_grad();
  return Var(std::move(n));
}

void backward(const Var& root) {
  if (!root.defined()) throw UsageError("backward on an undefined Var");
  if (root.size() != 1) {
    throw UsageError("backward needs a scalar root, got shape " + shape_string(root.shape()));
  }
  if (!root.requires_grad()) return;

  // Iterative post-order DFS; `order` ends up topologically sorted.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child && child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->value.ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->value.has_grad()) n->backward(*n);
  }
  // Intermediate buffers are not needed once propagated.
  for (Node* n : order) {
    if (n->backward) n->value.drop_grad();
  }
}

namespace {

std::shared_ptr<Node> make_node(Tensor value, std::vector<std::shared_ptr<Node>> inputs) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  for (const auto& in : inputs) n->requires_grad = n->requires_grad || (in && in->requires_grad);
  n->inputs = std::move(inputs);
  return n;
}

/// Gradient buffer of input i, or an empty span if it needs none.
std::span<double> in_grad(Node& self, std::size_t i) {
  Node* in = self.inputs[i].get();
  if (!in || !in->requires_grad) return {};
  return in->value.ensure_grad();
}

void require_same(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ArgumentError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                        shape_string(b.shape()));
  }
}

void require_matrix(const Var& a, const char* op) {
  if (a.value().rank() != 2) {
    throw ArgumentError(std::string(op) + " expects a matrix, got " + shape_string(a.shape()));
  }
}

// C (m x n) += op(A) * op(B), with A stored (ra x ca) and B stored (rb x cb).
void gemm_acc(const double* A, std::size_t ra, std::size_t ca, bool ta, const double* B,
              std::size_t rb, std::size_t cb, bool tb, double* C) {
  const std::size_t m = ta ? ca : ra;
  const std::size_t k = ta ? ra : ca;
  const std::size_t n = tb ? rb : cb;
  (void)rb;
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ta ? A[p * ca + i] : A[i * ca + p];
      if (av == 0.0) continue;
      if (!tb) {
        const double* brow = B + p * cb;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      } else {
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * B[j * cb + p];
      }
    }
  }
}

}  // namespace

namespace ad {

Var matmul(const Var& a, const Var& b, bool ta, bool tb) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t ra = a.rows(), ca = a.cols(), rb = b.rows(), cb = b.cols();
  const std::size_t m = ta ? ca : ra, k = ta ? ra : ca;
  const std::size_t kb = tb ? cb : rb, n = tb ? rb : cb;
  if (k != kb) {
    throw ArgumentError("matmul: inner dimensions differ " + shape_string(a.shape()) +
                        (ta ? "^T" : "") + " x " + shape_string(b.shape()) + (tb ? "^T" : ""));
  }
  Tensor out(Shape{m, n});
  gemm_acc(a.value().data(), ra, ca, ta, b.value().data(), rb, cb, tb, out.data());
  auto node = make_node(std::move(out), {a.shared(), b.shared()});
  node->backward = [ra, ca, rb, cb, ta, tb, m, n](Node& self) {
    const double* g = self.value.grad().data();
    const Tensor& A = self.inputs[0]->value;
    const Tensor& B = self.inputs[1]->value;
    if (auto ga = in_grad(self, 0); !ga.empty()) {
      // dA = G op(B)^T  (or its transpose when A was transposed)
      if (!ta) {
        gemm_acc(g, m, n, false, B.data(), rb, cb, !tb, ga.data());
      } else {
        gemm_acc(B.data(), rb, cb, tb, g, m, n, true, ga.data());
      }
    }
    if (auto gb = in_grad(self, 1); !gb.empty()) {
      if (!tb) {
        gemm_acc(A.data(), ra, ca, !ta, g, m, n, false, gb.data());
      } else {
        gemm_acc(g, m, n, true, A.data(), ra, ca, ta, gb.data());
      }
    }
  };
  return Var(node);
}

Var add(const Var& a, const Var& b) {
  require_same(a, b, "add");
  Tensor out = a.value();
  out.drop_grad();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  auto node = make_node(std::move(out), {a.shared(), b.shared()});
  node->backward = [](Node& self) {
    auto g = self.value.grad();
    for (std::size_t s = 0; s < 2; ++s) {
      if (auto gi = in_grad(self, s); !gi.empty())
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  };
  return Var(node);
}

Var sub(const Var& a, const Var& b) {
  require_same(a, b, "sub");
  Tensor out = a.value();
  out.drop_grad();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  auto node = make_node(std::move(out), {a.shared(), b.shared()});
  node->backward = [](Node& self) {
    auto g = self.value.grad();
    if (auto ga = in_grad(self, 0); !ga.empty())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (auto gb = in_grad(self, 1); !gb.empty())
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
  };
  return Var(node);
}

Var mul(const Var& a, const Var& b) {
  require_same(a, b, "mul");
  Tensor out = a.value();
  out.drop_grad();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  auto node = make_node(std::move(out), {a.shared(), b.shared()});
  node->backward = [](Node& self) {
    auto g = self.value.grad();
    const Tensor& A = self.inputs[0]->value;
    const Tensor& B = self.inputs[1]->value;
    if (auto ga = in_grad(self, 0); !ga.empty())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B[i];
    if (auto gb = in_grad(self, 1); !gb.empty())
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A[i];
  };
  return Var(node);
}

Var add_bias(const Var& a, const Var& b) {
  require_matrix(a, "add_bias");
  const std::size_t m = a.rows(), n = a.cols();
  if (b.size() != n) throw ArgumentError("add_bias: bias length differs from column count");
  Tensor out = a.value();
  out.drop_grad();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += b.value()[j];
  auto node = make_node(std::move(out), {a.shared(), b.shared()});
  node->backward = [m, n](Node& self) {
    auto g = self.value.grad();
    if (auto ga = in_grad(self, 0); !ga.empty())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (auto gb = in_grad(self, 1); !gb.empty())
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
  };
  return Var(node);
}

Var scale(const Var& a, double s) {
  Tensor out = a.value();
  out.drop_grad();
  for (double& v : out.values()) v *= s;
  auto node = make_node(std::move(out), {a.shared()});
  node->backward = [s](Node& self) {
    auto g = self.value.grad();
    if (auto ga = in_grad(self, 0); !ga.empty())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  };
  return Var(node);
}

Var add_scalar(const Var& a, double s) {
  Tensor out = a.value();
  out.drop_grad();
  for (double& v : out.values()) v += s;
  auto node = make_node(std::move(out), {a.shared()});
  node->backward = [](Node& self) {
    auto g = self.value.grad();
    if (auto ga = in_grad(self, 0); !ga.empty())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  };
  return Var(node);
}

Var mul_const(const Var& a, const Tensor& c) {
  if (a.shape() != c.shape()) throw ArgumentError("mul_const: shape mismatch");
  Tensor out = a.value();
  out.drop_grad();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c[i];
  auto node = make_node(std::move(out), {a.shared()});
  node->backward = [c = Tensor(c.shape(), c.storage())](Node& self) {
    auto g = self.value.grad();
    if (auto ga = in_grad(self, 0); !ga.empty())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c[i] * g[i];
  };
  return Var(node);
}

namespace {
template <typename F, typename DF>
Var unary(const Var& a, F f, DF df) {
  Tensor out = a.value();
  out.drop_grad();
  for (double& v : out.values()) v = f(v);
  auto node = make_node(std::move(out), {a.shared()});
  node->backward = [df](Node& self) {
    auto g = self.value.grad();
    const Tensor& x = self.inputs[0]->value;
    if (auto ga = in_grad(self, 0); !ga.empty())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(x[i]);
  };
  return Var(node);
}
}  // namespace

Var gelu(const Var& a) {
  return unary(a, [](double x) { return fscil::gelu(x); }, [](double x) { return gelu_grad(x); });
}

Var relu(const Var& a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Var softplus(const Var& a) {
  return unary(a, [](double x) { return fscil::softplus(x); }, [](double x) { return sigmoid(x); });
}

Var softmax_rows(const Var& a) {
  require_matrix(a, "softmax_rows");
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out = a.value();
  out.drop_grad();
  for (std::size_t i = 0; i < m; ++i) softmax_inplace(out.row(i));
  auto node = make_node(std::move(out), {a.shared()});
  node->backward = [m, n](Node& self) {
    auto g = self.value.grad();
    const Tensor& y = self.value;
    if (auto ga = in_grad(self, 0); !ga.empty()) {
      for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * y[i * n + j];
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += y[i * n + j] * (g[i * n + j] - s);
      }
    }
  };
  return Var(node);
}

Var log_softmax_rows(const Var& a) {
  require_matrix(a, "log_softmax_rows");
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out = a.value();
  out.drop_grad();
  for (std::size_t i = 0; i < m; ++i) {
    auto r = out.row(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double s = 0.0;
    for (double v : r) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    for (double& v : r) v -= lse;
  }
  auto node = make_node(std::move(out), {a.shared()});
  node->backward = [m, n](Node& self) {
    auto g = self.value.grad();
    const Tensor& y = self.value;
    if (auto ga = in_grad(self, 0); !ga.empty()) {
      for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += g[i * n + j];
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[i * n + j] - std::exp(y[i * n + j]) * s;
      }
    }
  };
  return Var(node);
}

Var l2_normalize_rows(const Var& a) {
  require_matrix(a, "l2_normalize_rows");
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out = a.value();
  out.drop_grad();
  std::vector<double> norms(m);
  for (std::size_t i = 0; i < m; ++i) {
    auto r = out.row(i);
    norms[i] = norm2(r);
    if (norms[i] == 0.0) throw DomainError("l2_normalize_rows: zero row " + std::to_string(i));
    for (double& v : r) v /= norms[i];
  }
  auto node = make_node(std::move(out), {a.shared()});
  node->backward = [m, n, norms = std::move(norms)](Node& self) {
    auto g = self.value.grad();
    const Tensor& y = self.value;
    if (auto ga = in_grad(self, 0); !ga.empty()) {
      for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * y[i * n + j];
        for (std::size_t j = 0; j < n; ++j)
          ga[i * n + j] += (g[i * n + j] - y[i * n + j] * s) / norms[i];
      }
    }
  };
  return Var(node);
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  auto node = make_node(Tensor::scalar(s), {a.shared()});
  node->backward = [](Node& self) {
    const double g = self.value.grad()[0];
    if (auto ga = in_grad(self, 0); !ga.empty())
      for (double& v : ga) v += g;
  };
  return Var(node);
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Var cross_entropy(const Var& logits, std::span<const std::size_t> labels) {
  require_matrix(logits, "cross_entropy");
  const std::size_t m = logits.rows(), n = logits.cols();
  if (labels.size() != m) throw ArgumentError("cross_entropy: label count differs from rows");
  for (std::size_t y : labels) {
    if (y >= n) throw ArgumentError("cross_entropy: label out of range");
  }
  Var lsm = log_softmax_rows(logits);
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) loss -= lsm.value()[i * n + labels[i]];
  loss /= static_cast<double>(m);
  auto node = make_node(Tensor::scalar(loss), {lsm.shared()});
  node->backward = [m, n, lab = std::vector<std::size_t>(labels.begin(), labels.end())](Node& self) {
    const double g = self.value.grad()[0] / static_cast<double>(m);
    if (auto gi = in_grad(self, 0); !gi.empty())
      for (std::size_t i = 0; i < m; ++i) gi[i * n + lab[i]] -= g;
  };
  return Var(node);
}

Var soft_cross_entropy(const Tensor& targets, const Var& logits) {
  require_matrix(logits, "soft_cross_entropy");
  if (targets.shape() != logits.shape()) throw ArgumentError("soft_cross_entropy: shape mismatch");
  const std::size_t m = logits.rows();
  Var lsm = log_softmax_rows(logits);
  double loss = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) loss -= targets[i] * lsm.value()[i];
  loss /= static_cast<double>(m);
  auto node = make_node(Tensor::scalar(loss), {lsm.shared()});
  node->backward = [m, t = Tensor(targets.shape(), targets.storage())](Node& self) {
    const double g = self.value.grad()[0] / static_cast<double>(m);
    if (auto gi = in_grad(self, 0); !gi.empty())
      for (std::size_t i = 0; i < t.size(); ++i) gi[i] -= g * t[i];
  };
  return Var(node);
}

Var mse(const Var& prediction, const Tensor& target) {
  if (prediction.shape() != target.shape()) throw ArgumentError("mse: shape mismatch");
  const std::size_t n = target.size();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = prediction.value()[i] - target[i];
    loss += d * d;
  }
  loss /= static_cast<double>(n);
  auto node = make_node(Tensor::scalar(loss), {prediction.shared()});
  node->backward = [n, t = Tensor(target.shape(), target.storage())](Node& self) {
    const double g = self.value.grad()[0] * 2.0 / static_cast<double>(n);
    const Tensor& p = self.inputs[0]->value;
    if (auto gi = in_grad(self, 0); !gi.empty())
      for (std::size_t i = 0; i < n; ++i) gi[i] += g * (p[i] - t[i]);
  };
  return Var(node);
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ArgumentError("concat_rows of nothing");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  std::vector<std::shared_ptr<Node>> inputs;
  for (const Var& p : parts) {
    if (p.cols() != n) throw ArgumentError("concat_rows: column counts differ");
    m += p.rows();
    inputs.push_back(p.shared());
  }
  std::vector<double> v;
  v.reserve(m * n);
  for (const Var& p : parts) v.insert(v.end(), p.value().storage().begin(), p.value().storage().end());
  auto node = make_node(Tensor(Shape{m, n}, std::move(v)), std::move(inputs));
  node->backward = [](Node& self) {
    auto g = self.value.grad();
    std::size_t off = 0;
    for (std::size_t s = 0; s < self.inputs.size(); ++s) {
      const std::size_t len = self.inputs[s]->value.size();
      if (auto gi = in_grad(self, s); !gi.empty())
        for (std::size_t i = 0; i < len; ++i) gi[i] += g[off + i];
      off += len;
    }
  };
  return Var(node);
}

Var slice_rows(const Var& a, std::size_t begin, std::size_t count) {
  require_matrix(a, "slice_rows");
  const std::size_t n = a.cols();
  if (count == 0 || begin + count > a.rows()) throw ArgumentError("slice_rows: range out of bounds");
  std::vector<double> v(a.value().storage().begin() + begin * n,
                        a.value().storage().begin() + (begin + count) * n);
  auto node = make_node(Tensor(Shape{count, n}, std::move(v)), {a.shared()});
  node->backward = [begin, n](Node& self) {
    auto g = self.value.grad();
    if (auto ga = in_grad(self, 0); !ga.empty())
      for (std::size_t i = 0; i < g.size(); ++i) ga[begin * n + i] += g[i];
  };
  return Var(node);
}

Var gather_rows(const Var& a, std::span<const std::size_t> index) {
  require_matrix(a, "gather_rows");
  const std::size_t n = a.cols();
  if (index.empty()) throw ArgumentError("gather_rows: empty index");
  std::vector<double> v;
  v.reserve(index.size() * n);
  for (std::size_t r : index) {
    if (r >= a.rows()) throw ArgumentError("gather_rows: row index out of range");
    auto row = a.value().row(r);
    v.insert(v.end(), row.begin(), row.end());
  }
  auto node = make_node(Tensor(Shape{index.size(), n}, std::move(v)), {a.shared()});
  node->backward = [n, idx = std::vector<std::size_t>(index.begin(), index.end())](Node& self) {
    auto g = self.value.grad();
    if (auto ga = in_grad(self, 0); !ga.empty())
      for (std::size_t k = 0; k < idx.size(); ++k)
        for (std::size_t j = 0; j < n; ++j) ga[idx[k] * n + j] += g[k * n + j];
  };
  return Var(node);
}

}  // namespace ad

std::uint64_t hash_tensor(const Tensor& t, std::uint64_t h) {
  auto mix = [&h](const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  for (std::size_t d : t.shape()) {
    const std::uint64_t v = d;
    mix(&v, sizeof v);
  }
  mix(t.data(), t.size() * sizeof(double));
  return h;
}

std::uint64_t hash_values(std::span<const Var> vars) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const Var& v : vars) h = hash_tensor(v.value(), h);
  return h;
}

}  // namespace fscil
