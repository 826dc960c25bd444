#include "fscil/rectification.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "fscil/data.hpp"
#include "fscil/errors.hpp"
#include "fscil/ops.hpp"
#include "fscil/optim.hpp"

namespace fscil {

PredictionNet PredictionNet::create(std::size_t dim, bool linear, SeededRng& rng, std::size_t session) {
  if (dim == 0) throw ArgumentError("prediction net dimension must be positive");
  PredictionNet n;
  n.dim = dim;
  n.linear = linear;
  n.session = session;
  const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
  auto uniform = [&](Shape s) {
    Tensor t(std::move(s));
    for (double& x : t.values()) x = rng.uniform(-bound, bound);
    return parameter(std::move(t));
  };
  n.w1 = uniform({dim, dim});
  n.b1 = parameter(Tensor(Shape{dim}, 0.0));
  if (!linear) {
    n.w2 = uniform({dim, dim});
    n.b2 = parameter(Tensor(Shape{dim}, 0.0));
  }
  return n;
}

PredictionNet PredictionNet::identity(std::size_t dim, std::size_t session) {
  PredictionNet n;
  n.dim = dim;
  n.linear = true;
  n.session = session;
  Tensor w(Shape{dim, dim});
  for (std::size_t i = 0; i < dim; ++i) w.at(i, i) = 1.0;
  n.w1 = parameter(std::move(w));
  n.b1 = parameter(Tensor(Shape{dim}, 0.0));
  return n;
}

Var PredictionNet::forward(const Var& x) const {
  if (x.cols() != dim) throw ArgumentError("prediction net input has the wrong dimension");
  Var h = ad::add_bias(ad::matmul(x, w1), b1);
  if (linear) return h;
  return ad::add_bias(ad::matmul(ad::gelu(h), w2), b2);
}

Tensor PredictionNet::apply(const Tensor& x) const { return forward(constant(x)).value(); }

std::vector<double> PredictionNet::apply(std::span<const double> x) const {
  const Tensor out = apply(Tensor(Shape{1, x.size()}, std::vector<double>(x.begin(), x.end())));
  return out.storage();
}

std::vector<Var> PredictionNet::parameters() const {
  std::vector<Var> out;
  for (auto& [n, v] : named_parameters()) out.push_back(v);
  return out;
}

std::vector<std::pair<std::string, Var>> PredictionNet::named_parameters() const {
  std::vector<std::pair<std::string, Var>> out{{"w1", w1}, {"b1", b1}};
  if (!linear) {
    out.emplace_back("w2", w2);
    out.emplace_back("b2", b2);
  }
  return out;
}

std::uint64_t PredictionNet::hash() const { return hash_values(parameters()); }

std::vector<double> estimate_intra_class_bias(const Tensor& full, const Tensor& subset) {
  if (full.empty() || subset.empty()) throw ArgumentError("intra-class bias needs two nonempty sets");
  if (full.cols() != subset.cols()) throw ArgumentError("intra-class bias: dimension mismatch");
  const auto a = row_mean(full);
  const auto b = row_mean(subset);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

OutlierPairs select_outlier_pairs(const Tensor& class_embeddings, std::span<const double> prototype,
                                  std::size_t count, bool lenient) {
  const std::size_t n = class_embeddings.empty() ? 0 : class_embeddings.rows();
  if (count > n) {
    if (!lenient) {
      throw ArgumentError("asked for " + std::to_string(count) + " outliers from a class of " +
                          std::to_string(n));
    }
    count = n;
  }
  OutlierPairs p;
  if (count == 0) return p;
  const std::size_t d = class_embeddings.cols();
  if (prototype.size() != d) throw ArgumentError("prototype dimension mismatch");
  std::vector<double> dist(n);
  for (std::size_t i = 0; i < n; ++i) dist[i] = squared_euclidean(class_embeddings.row(i), prototype);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dist[a] > dist[b]; });
  order.resize(count);
  p.source = order;
  p.inputs = gather_rows(class_embeddings, order);
  p.targets = Tensor(Shape{count, d});
  for (std::size_t r = 0; r < count; ++r) std::copy(prototype.begin(), prototype.end(), p.targets.row(r).begin());
  return p;
}

OutlierPairs merge_pairs(const std::vector<OutlierPairs>& parts) {
  OutlierPairs out;
  std::vector<double> in, tg;
  std::size_t d = 0;
  for (const auto& p : parts) {
    if (p.size() == 0) continue;
    d = p.inputs.cols();
    in.insert(in.end(), p.inputs.storage().begin(), p.inputs.storage().end());
    tg.insert(tg.end(), p.targets.storage().begin(), p.targets.storage().end());
    out.source.insert(out.source.end(), p.source.begin(), p.source.end());
  }
  if (out.source.empty()) return out;
  out.inputs = Tensor(Shape{out.source.size(), d}, std::move(in));
  out.targets = Tensor(Shape{out.source.size(), d}, std::move(tg));
  return out;
}

PseudoLabels pseudo_label(const Tensor& pool, const TaskRouter& router, Metric metric) {
  PseudoLabels out;
  if (pool.empty() || pool.rows() == 0) return out;
  const auto sel = router.select_all(pool, metric);
  for (std::size_t i = 0; i < sel.size(); ++i) {
    out.index.push_back(i);
    out.cls.push_back(sel[i].cls);
  }
  return out;
}

std::vector<double> train_prediction_net(PredictionNet& net, const OutlierPairs& pairs,
                                         const RectificationConfig& cfg, SeededRng& rng) {
  if (pairs.size() == 0) throw ArgumentError("prediction net needs at least one pair");
  OptimizerConfig oc;
  oc.kind = OptimizerKind::adam;
  oc.lr = cfg.lr;
  for (auto& v : net.parameters()) v.set_requires_grad(true);
  Optimizer opt({ParamGroup{net.parameters(), false, 1.0}}, oc);
  SeededRng order = rng.split(51);
  std::vector<double> losses;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double sum = 0.0;
    std::size_t batches = 0;
    for (const auto& idx : minibatches(pairs.size(), cfg.batch_size, order)) {
      Var pred = net.forward(constant(gather_rows(pairs.inputs, idx)));
      Var loss = ad::mse(pred, gather_rows(pairs.targets, idx));
      opt.zero_grad();
      backward(loss);
      opt.step();
      sum += loss.value()[0];
      ++batches;
    }
    losses.push_back(sum / static_cast<double>(batches));
  }
  for (auto& v : net.parameters()) v.set_requires_grad(false);
  return losses;
}

std::vector<double> rectify_prototype(const PredictionNet& net, std::span<const double> mu) {
  const auto p = net.apply(mu);
  std::vector<double> r(mu.size());
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = 0.5 * (p[i] + mu[i]);
  return r;
}

SessionStats refine_gaussian_stats(const PredictionNet& net, const Tensor& embeddings,
                                   std::span<const std::size_t> labels, const SessionStats& raw) {
  if (embeddings.rows() != labels.size()) throw ArgumentError("refine: rows != labels");
  SessionStats out = raw;
  std::map<std::size_t, std::size_t> slot;
  for (std::size_t i = 0; i < out.classes.size(); ++i) {
    out.classes[i].mean = rectify_prototype(net, raw.classes[i].mean);
    slot[out.classes[i].cls] = i;
  }
  const Tensor predicted = net.apply(embeddings);
  Tensor centers(predicted.shape());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto it = slot.find(labels[i]);
    if (it == slot.end()) throw ArgumentError("refine: label " + std::to_string(labels[i]) + " has no statistics");
    const auto& m = out.classes[it->second].mean;
    std::copy(m.begin(), m.end(), centers.row(i).begin());
  }
  out.scatter = pooled_scatter(predicted, centers);
  out.samples = labels.size();
  return out;
}

}  // namespace fscil
