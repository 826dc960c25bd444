#include "fscil/stochastic_head.hpp"

#include "fscil/errors.hpp"
#include "fscil/ops.hpp"

namespace fscil {

StochasticHead::StochasticHead(std::size_t dim, double temperature, double offset)
    : dim_(dim), temperature_(temperature), offset_(offset), spread_init_(offset) {
  if (dim == 0) throw ArgumentError("head dimension must be positive");
  set_temperature(temperature);
}

void StochasticHead::set_temperature(double t) {
  if (!(t > 0.0)) throw ArgumentError("head temperature must be positive");
  temperature_ = t;
}

std::size_t StochasticHead::classes() const {
  std::size_t n = 0;
  for (const auto& b : blocks_) n += b.classes();
  return n;
}

std::size_t StochasticHead::block_of(std::size_t cls) const {
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const auto& b = blocks_[i];
    if (cls >= b.first_class && cls < b.first_class + b.classes()) return i;
  }
  throw ArgumentError("class " + std::to_string(cls) + " is not in the head");
}

std::size_t StochasticHead::init_means_from_prototypes(const Tensor& prototypes) {
  if (prototypes.rank() != 2 || prototypes.cols() != dim_) {
    throw ArgumentError("prototypes must be [classes, " + std::to_string(dim_) + "], got " +
                        shape_string(prototypes.shape()));
  }
  HeadBlock b;
  b.mean = parameter(Tensor(prototypes.shape(), prototypes.storage()));
  b.spread = parameter(Tensor(prototypes.shape(), spread_init_));
  b.first_class = classes();
  blocks_.push_back(std::move(b));
  return blocks_.size() - 1;
}

std::vector<double> StochasticHead::noise_scale(std::size_t cls) const {
  const auto& b = blocks_[block_of(cls)];
  auto row = b.spread.value().row(cls - b.first_class);
  std::vector<double> s(row.size());
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = softplus(row[i] - offset_);
  return s;
}

std::vector<double> StochasticHead::sample_weights(std::size_t cls, SeededRng* rng) const {
  const auto& b = blocks_[block_of(cls)];
  auto mu = b.mean.value().row(cls - b.first_class);
  std::vector<double> w(mu.begin(), mu.end());
  if (!rng) return w;
  const auto scale = noise_scale(cls);
  for (std::size_t i = 0; i < w.size(); ++i) w[i] += rng->normal() * scale[i];
  return w;
}

Var StochasticHead::weights(SeededRng* rng, const std::vector<Tensor>* eps,
                            BlockRange range) const {
  if (range.begin >= range.end || range.end > blocks_.size()) {
    throw ArgumentError("empty or out-of-range head block range");
  }
  if (eps && eps->size() != range.end - range.begin) {
    throw ArgumentError("noise tensors must match the number of blocks");
  }
  std::vector<Var> parts;
  for (std::size_t i = range.begin; i < range.end; ++i) {
    const auto& b = blocks_[i];
    if (!rng && !eps) {
      parts.push_back(b.mean);
      continue;
    }
    Tensor noise(b.mean.shape());
    if (eps) {
      noise = (*eps)[i - range.begin];
      if (noise.shape() != b.mean.shape()) throw ArgumentError("noise tensor shape mismatch");
    } else {
      for (double& e : noise.values()) e = rng->normal();
    }
    Var scale = ad::softplus(ad::add_scalar(b.spread, -offset_));
    parts.push_back(ad::add(b.mean, ad::mul_const(scale, noise)));
  }
  return parts.size() == 1 ? parts[0] : ad::concat_rows(parts);
}

Var StochasticHead::logits(const Var& z, SeededRng* rng, BlockRange range) const {
  Var w = weights(rng, nullptr, range);
  Var zn = ad::l2_normalize_rows(z);
  Var wn = ad::l2_normalize_rows(w);
  return ad::scale(ad::matmul(zn, wn, false, true), temperature_);
}

Var StochasticHead::logits_with_noise(const Var& z, const std::vector<Tensor>& eps,
                                      BlockRange range) const {
  Var w = weights(nullptr, &eps, range);
  Var zn = ad::l2_normalize_rows(z);
  Var wn = ad::l2_normalize_rows(w);
  return ad::scale(ad::matmul(zn, wn, false, true), temperature_);
}

std::vector<double> StochasticHead::class_probs(std::span<const double> z, SeededRng* rng,
                                                BlockRange range) const {
  if (z.size() != dim_) throw ArgumentError("feature dimension does not match the head");
  Var zv = constant(Tensor(Shape{1, dim_}, std::vector<double>(z.begin(), z.end())));
  Var l = logits(zv, rng, range);
  std::vector<double> p(l.value().storage());
  softmax_inplace(p);
  return p;
}

std::size_t StochasticHead::predict_label(std::span<const double> z, BlockRange range,
                                          SeededRng* rng) const {
  const auto p = class_probs(z, rng, range);
  std::size_t best = 0;
  for (std::size_t i = 1; i < p.size(); ++i) {
    if (p[i] > p[best]) best = i;
  }
  return blocks_[range.begin].first_class + best;
}

std::vector<Var> StochasticHead::parameters(BlockRange range, bool include_spread) const {
  std::vector<Var> out;
  for (std::size_t i = range.begin; i < range.end; ++i) {
    out.push_back(blocks_[i].mean);
    if (include_spread) out.push_back(blocks_[i].spread);
  }
  return out;
}

void StochasticHead::set_trainable(BlockRange range, bool on) {
  for (auto& v : parameters(range)) v.set_requires_grad(on);
}

std::uint64_t StochasticHead::hash() const { return hash_values(parameters(all())); }

}  // namespace fscil
