#include "fscil/optim.hpp"

#include <cmath>
#include <numbers>

#include "fscil/errors.hpp"

namespace fscil {

OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "sgd") return OptimizerKind::sgd;
  if (name == "adam") return OptimizerKind::adam;
  if (name == "adamw") return OptimizerKind::adamw;
  throw ArgumentError("unknown optimizer '" + name + "' (expected sgd, adam or adamw)");
}

std::string to_string(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::sgd: return "sgd";
    case OptimizerKind::adam: return "adam";
    case OptimizerKind::adamw: return "adamw";
  }
  return "?";
}

Optimizer::Optimizer(std::vector<ParamGroup> groups, OptimizerConfig config) : config_(config) {
  if (config.lr < 0.0) throw ArgumentError("learning rate must be nonnegative");
  for (auto& g : groups) {
    for (auto& p : g.params) {
      if (!p.defined()) throw ArgumentError("optimizer given an undefined parameter");
      slots_.push_back({p, g.decay, g.lr_scale, std::vector<double>(p.size(), 0.0),
                        std::vector<double>(p.size(), 0.0)});
    }
  }
}

std::size_t Optimizer::parameter_count() const {
  std::size_t n = 0;
  for (const auto& s : slots_) n += s.param.size();
  return n;
}

void Optimizer::zero_grad() {
  for (auto& s : slots_) s.param.zero_grad();
}

void Optimizer::step() {
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (auto& s : slots_) {
    if (!s.param.requires_grad()) {
      throw ContractViolation("optimizer step on a frozen parameter");
    }
    auto g = s.param.grad();
    if (g.empty()) continue;
    auto x = s.param.mutable_value().values();
    const double wd = s.decay ? config_.weight_decay : 0.0;
    const double lr = config_.lr * s.lr_scale;
    for (std::size_t i = 0; i < x.size(); ++i) {
      switch (config_.kind) {
        case OptimizerKind::sgd: {
          const double gi = g[i] + wd * x[i];
          s.m[i] = config_.momentum * s.m[i] + gi;
          x[i] -= lr * s.m[i];
          break;
        }
        case OptimizerKind::adam:
        case OptimizerKind::adamw: {
          const bool coupled = config_.kind == OptimizerKind::adam;
          const double gi = coupled ? g[i] + wd * x[i] : g[i];
          s.m[i] = b1 * s.m[i] + (1.0 - b1) * gi;
          s.v[i] = b2 * s.v[i] + (1.0 - b2) * gi * gi;
          const double update = (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + config_.eps);
          if (!coupled) x[i] -= lr * wd * x[i];
          x[i] -= lr * update;
          break;
        }
      }
    }
  }
}

double cosine_schedule(double start, double end, std::size_t t, std::size_t total) {
  if (total == 0 || t >= total) return end;
  const double frac = static_cast<double>(t) / static_cast<double>(total);
  return end + 0.5 * (start - end) * (1.0 + std::cos(std::numbers::pi * frac));
}

double linear_warmup(double from, double to, std::size_t t, std::size_t steps) {
  if (steps == 0 || t >= steps) return to;
  return from + (to - from) * static_cast<double>(t) / static_cast<double>(steps);
}

ReduceOnPlateau::ReduceOnPlateau(double factor, std::size_t patience, double min_lr,
                                 double threshold)
    : factor_(factor), min_lr_(min_lr), threshold_(threshold), patience_(patience) {
  if (factor <= 0.0 || factor >= 1.0) throw ArgumentError("plateau factor must lie in (0, 1)");
}

double ReduceOnPlateau::update(double metric, double lr) {
  if (metric < best_ * (1.0 - threshold_) || best_ == std::numeric_limits<double>::infinity()) {
    best_ = metric;
    bad_ = 0;
    return lr;
  }
  if (++bad_ > patience_) {
    bad_ = 0;
    return std::max(min_lr_, lr * factor_);
  }
  return lr;
}

EarlyStopping::EarlyStopping(std::size_t patience, double min_delta)
    : patience_(patience), min_delta_(min_delta) {}

bool EarlyStopping::update(double metric) {
  if (metric < best_ - min_delta_) {
    best_ = metric;
    best_epoch_ = epoch_;
    bad_ = 0;
  } else {
    ++bad_;
  }
  ++epoch_;
  return bad_ >= patience_;
}

}  // namespace fscil
