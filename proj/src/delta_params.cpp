#include "fscil/delta_params.hpp"

#include <cmath>

#include "fscil/errors.hpp"

namespace fscil {

PrefixSet PrefixSet::create(std::size_t layers, std::size_t length, std::size_t dim, double init,
                            SeededRng& rng) {
  if (length % 2 != 0) throw ArgumentError("prefix length must be even, got " + std::to_string(length));
  PrefixSet p;
  p.length = length;
  p.layers.resize(layers);
  if (length == 0) return p;
  for (auto& l : p.layers) {
    Tensor k(Shape{length / 2, dim}), v(Shape{length / 2, dim});
    for (double& x : k.values()) x = rng.uniform(-init, init);
    for (double& x : v.values()) x = rng.uniform(-init, init);
    l.key = parameter(std::move(k));
    l.value = parameter(std::move(v));
  }
  return p;
}

std::vector<Var> PrefixSet::parameters() const {
  std::vector<Var> out;
  for (const auto& l : layers) {
    if (!l.key.defined()) continue;
    out.push_back(l.key);
    out.push_back(l.value);
  }
  return out;
}

std::size_t PrefixSet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& v : parameters()) n += v.size();
  return n;
}

std::uint64_t PrefixSet::hash() const { return hash_values(parameters()); }

void PrefixSet::set_trainable(bool on) {
  for (auto& v : parameters()) v.set_requires_grad(on);
}

Var prefix_mhsa(const Var& h, EncoderBlock& block, std::size_t batch, std::size_t tokens,
                std::size_t heads, const LayerPrefix& prefix, AttentionMaps* maps) {
  return mhsa_forward(h, block, batch, tokens, heads, &prefix, maps);
}

namespace {

std::size_t check_block(const Dataset& data, const StochasticHead& head, std::size_t block) {
  if (data.size() == 0) throw ArgumentError("session has no training data");
  if (block >= head.blocks()) throw ArgumentError("head block " + std::to_string(block) + " does not exist");
  const auto& b = head.block(block);
  for (std::size_t l : data.labels) {
    if (l < b.first_class || l >= b.first_class + b.classes()) {
      throw ArgumentError("label " + std::to_string(l) + " is not a class of head block " + std::to_string(block));
    }
  }
  return b.first_class;
}

SessionTrainReport run(const Dataset& data, EncoderState& backbone, StochasticHead& head,
                       std::size_t block, PrefixSet* prefixes, const SessionConfig& cfg,
                       std::size_t epochs, bool stochastic, SeededRng& rng, std::size_t session,
                       EventLog* log) {
  const std::size_t first = check_block(data, head, block);
  const BlockRange range{block, block + 1};
  head.set_trainable(head.all(), false);
  head.set_trainable(range, true);

  std::vector<ParamGroup> groups;
  const double scale = cfg.lr / cfg.classifier_lr;
  if (prefixes) {
    for (const auto& v : backbone.parameters()) {
      if (v.requires_grad()) throw ContractViolation("session training requires a frozen backbone");
    }
    backbone.mode = Mode::eval;
    prefixes->set_trainable(true);
    groups.push_back({prefixes->parameters(), false, scale});
  } else {
    backbone.set_trainable(true);
    backbone.mode = Mode::eval;
    groups.push_back({backbone.parameters(), false, scale});
  }
  groups.push_back({head.parameters(range, stochastic), false, 1.0});

  SessionTrainReport report;
  for (const auto& g : groups) {
    for (const auto& v : g.params) report.trainable += v.size();
  }
  report.total = backbone.parameter_count() + (prefixes ? prefixes->parameter_count() : 0);
  for (const auto& v : head.parameters(head.all())) report.total += v.size();

  OptimizerConfig oc;
  oc.kind = cfg.optimizer;
  oc.lr = cfg.classifier_lr;
  oc.weight_decay = cfg.weight_decay;
  Optimizer opt(std::move(groups), oc);
  ReduceOnPlateau plateau(cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_min_lr);
  SeededRng order = rng.split(41), noise = rng.split(42);
  const std::vector<LayerPrefix>* layers = prefixes ? &prefixes->layers : nullptr;

  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    double sum = 0.0;
    std::size_t batches = 0;
    for (const auto& idx : minibatches(data.size(), cfg.batch_size, order)) {
      std::vector<std::size_t> y;
      for (std::size_t i : idx) y.push_back(data.labels[i] - first);
      Var z = encoder_forward(backbone, gather_rows(data.features, idx), layers);
      Var loss = ad::cross_entropy(head.logits(z, stochastic ? &noise : nullptr, range), y);
      opt.zero_grad();
      backward(loss);
      opt.step();
      sum += loss.value()[0];
      ++batches;
    }
    if (batches == 0) break;
    const double loss = sum / static_cast<double>(batches);
    if (!std::isfinite(loss)) throw NumericError("session loss diverged at epoch " + std::to_string(epoch));
    report.losses.push_back(loss);
    record(log, "session", session, epoch, "loss", loss);
    opt.set_lr(plateau.update(loss, opt.lr()));
  }
  head.set_trainable(range, false);
  if (prefixes) {
    prefixes->set_trainable(false);
  } else {
    backbone.set_trainable(false);
  }
  return report;
}

}  // namespace

SessionTrainReport train_session(const Dataset& data, EncoderState& backbone, StochasticHead& head,
                                 std::size_t block, PrefixSet& prefixes, const SessionConfig& cfg,
                                 std::size_t epochs, bool stochastic, SeededRng& rng,
                                 std::size_t session, EventLog* log) {
  if (prefixes.layers.size() != backbone.blocks.size()) {
    throw ArgumentError("prefix set depth does not match the backbone");
  }
  return run(data, backbone, head, block, &prefixes, cfg, epochs, stochastic, rng, session, log);
}

SessionTrainReport finetune_session(const Dataset& data, EncoderState& backbone, StochasticHead& head,
                                    std::size_t block, const SessionConfig& cfg, std::size_t epochs,
                                    bool stochastic, SeededRng& rng, std::size_t session,
                                    EventLog* log) {
  return run(data, backbone, head, block, nullptr, cfg, epochs, stochastic, rng, session, log);
}

}  // namespace fscil
