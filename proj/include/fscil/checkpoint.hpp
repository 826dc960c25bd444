#pragma once

#include <filesystem>
#include <map>
#include <string>

#include <json.hpp>

#include "fscil/backbone.hpp"
#include "fscil/delta_params.hpp"
#include "fscil/rectification.hpp"
#include "fscil/stochastic_head.hpp"
#include "fscil/task_inference.hpp"

namespace fscil {

/// Canonical name -> tensor. On disk: {"format": "fscil-tensors", "version": 1,
/// "tensors": {name: {"shape": [...], "values": [...]}}}.
using TensorMap = std::map<std::string, Tensor>;

nlohmann::json tensors_to_json(const TensorMap& tensors);
TensorMap tensors_from_json(const nlohmann::json& j);

TensorMap encoder_tensors(const EncoderState& encoder);
TensorMap head_tensors(const StochasticHead& head);
TensorMap prefix_tensors(const PrefixSet& prefixes);
TensorMap prediction_net_tensors(const PredictionNet& net);

/// Copies values into an existing encoder; names and shapes must match exactly.
void load_encoder_tensors(EncoderState& encoder, const TensorMap& tensors);

nlohmann::json stats_to_json(const SessionStats& stats);
SessionStats stats_from_json(const nlohmann::json& j);

void write_json(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json read_json(const std::filesystem::path& path);

}  // namespace fscil
