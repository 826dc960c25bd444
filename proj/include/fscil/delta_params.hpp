#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "fscil/backbone.hpp"
#include "fscil/config.hpp"
#include "fscil/data.hpp"
#include "fscil/events.hpp"
#include "fscil/stochastic_head.hpp"

namespace fscil {

/// Per-session prefixes: for every layer, length/2 key rows and length/2 value rows.
struct PrefixSet {
  std::size_t length = 0;  // L_p, even
  std::vector<LayerPrefix> layers;

  /// Uniform(-init, init) entries. length 0 yields empty prefixes.
  static PrefixSet create(std::size_t layers, std::size_t length, std::size_t dim, double init,
                          SeededRng& rng);
  std::vector<Var> parameters() const;
  std::size_t parameter_count() const;
  std::uint64_t hash() const;
  void set_trainable(bool on);
};

/// Attention with the layer's prefix prepended to keys and values.
Var prefix_mhsa(const Var& h, EncoderBlock& block, std::size_t batch, std::size_t tokens,
                std::size_t heads, const LayerPrefix& prefix, AttentionMaps* maps = nullptr);

struct SessionTrainReport {
  std::vector<double> losses;
  std::size_t trainable = 0;  // parameters updated in this session
  std::size_t total = 0;      // backbone + head + this prefix set
  double trainable_fraction() const {
    return total ? static_cast<double>(trainable) / static_cast<double>(total) : 0.0;
  }
};

/// Trains the prefixes and head block `block` on one session's data. The
/// backbone must be frozen (every parameter non-trainable), else
/// ContractViolation; it stays in eval mode. Earlier head blocks are frozen.
SessionTrainReport train_session(const Dataset& data, EncoderState& backbone, StochasticHead& head,
                                 std::size_t block, PrefixSet& prefixes, const SessionConfig& cfg,
                                 std::size_t epochs, bool stochastic, SeededRng& rng,
                                 std::size_t session = 0, EventLog* log = nullptr);

/// Ablation without prefixes: the backbone is fine-tuned in train mode
/// together with head block `block`.
SessionTrainReport finetune_session(const Dataset& data, EncoderState& backbone, StochasticHead& head,
                                    std::size_t block, const SessionConfig& cfg, std::size_t epochs,
                                    bool stochastic, SeededRng& rng, std::size_t session = 0,
                                    EventLog* log = nullptr);

}  // namespace fscil
