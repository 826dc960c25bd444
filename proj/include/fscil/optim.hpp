#pragma once

#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "fscil/autodiff.hpp"

namespace fscil {

/// Parameters sharing a weight-decay coefficient. Biases and norm layers
/// usually sit in a group with zero decay.
struct ParamGroup {
  std::vector<Var> params;
  bool decay = true;
  double lr_scale = 1.0;  // multiplies the optimizer learning rate
};

enum class OptimizerKind { sgd, adam, adamw };

OptimizerKind parse_optimizer(const std::string& name);
std::string to_string(OptimizerKind kind);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adamw;
  double lr = 1e-3;
  double weight_decay = 0.0;
  double momentum = 0.9;  // sgd
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// SGD with momentum, Adam (L2 penalty folded into the gradient) or AdamW
/// (decoupled decay). Every registered parameter must be trainable; stepping
/// a frozen one is a ContractViolation.
class Optimizer {
 public:
  Optimizer(std::vector<ParamGroup> groups, OptimizerConfig config);

  void step();
  void zero_grad();

  double lr() const { return config_.lr; }
  void set_lr(double lr) { config_.lr = lr; }
  double weight_decay() const { return config_.weight_decay; }
  void set_weight_decay(double wd) { config_.weight_decay = wd; }
  std::size_t steps() const { return t_; }
  std::size_t parameter_count() const;

 private:
  struct Slot {
    Var param;
    bool decay;
    double lr_scale;
    std::vector<double> m;
    std::vector<double> v;
  };
  std::vector<Slot> slots_;
  OptimizerConfig config_;
  std::size_t t_ = 0;
};

/// Half-cosine from `start` (t = 0) to `end` (t = total).
double cosine_schedule(double start, double end, std::size_t t, std::size_t total);

/// Linear ramp from `from` to `to` over `steps`, then constant at `to`.
double linear_warmup(double from, double to, std::size_t t, std::size_t steps);

/// Multiplies the learning rate by `factor` after `patience` epochs without
/// improvement of a minimized metric.
class ReduceOnPlateau {
 public:
  ReduceOnPlateau(double factor = 0.5, std::size_t patience = 5, double min_lr = 1e-6,
                  double threshold = 1e-4);
  /// Returns the learning rate to use next.
  double update(double metric, double lr);

 private:
  double factor_, min_lr_, threshold_;
  std::size_t patience_, bad_ = 0;
  double best_ = std::numeric_limits<double>::infinity();
};

/// Stops when a minimized metric has not improved by `min_delta` for `patience` epochs.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience, double min_delta = 0.0);
  /// Records the metric; true once training should stop.
  bool update(double metric);
  double best() const { return best_; }
  std::size_t best_epoch() const { return best_epoch_; }

 private:
  std::size_t patience_;
  double min_delta_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t epoch_ = 0, best_epoch_ = 0, bad_ = 0;
};

}  // namespace fscil
