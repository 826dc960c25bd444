#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fscil/backbone.hpp"
#include "fscil/checkpoint.hpp"
#include "fscil/config.hpp"
#include "fscil/data.hpp"
#include "fscil/delta_params.hpp"
#include "fscil/events.hpp"
#include "fscil/metrics.hpp"
#include "fscil/rectification.hpp"
#include "fscil/stochastic_head.hpp"
#include "fscil/task_inference.hpp"

namespace fscil {

/// What each session leaves behind.
struct SessionArtifacts {
  std::size_t session = 0;
  std::vector<std::size_t> classes;
  PrefixSet prefixes;                 // empty when delta parameters are disabled
  SessionStats stats;                 // routing statistics after refinement
  std::optional<PredictionNet> net;   // absent when rectification is disabled
  std::size_t pseudo_labeled = 0;     // pool samples added to this session's statistics
  std::size_t trainable = 0;
  std::size_t total = 0;
};

struct RunRecord {
  RunConfig config;
  std::uint64_t seed = 0;
  std::vector<SessionPredictions> predictions;  // one per session, on the cumulative pool
  std::vector<std::vector<std::size_t>> session_classes;
  Metrics metrics;
  EventLog events;
  std::vector<SessionArtifacts> sessions;
  TensorMap checkpoint;          // encoder + head after the final session
  std::uint64_t model_hash = 0;
  std::string started;           // ISO-8601 timestamps, excluded from hash()
  std::string finished;

  /// Everything except timestamps.
  nlohmann::json to_json() const;
  std::uint64_t hash() const;
};

struct DataBundle {
  Dataset train;
  Dataset test;
  std::vector<SessionSpec> specs;
  double bayes_accuracy = -1.0;  // blobs only
};

/// Builds the dataset named in the config; the blob seed is offset by the run seed.
DataBundle prepare_data(const RunConfig& cfg, std::uint64_t seed);

/// Base training, then per session: statistics, optional pseudo-labelling,
/// prediction net and refinement, head extension, prefix training, covariance
/// accumulation and evaluation on the cumulative pool. Errors are rethrown
/// with the session index prefixed.
RunRecord run_protocol(const Dataset& train, const Dataset& test, const std::vector<SessionSpec>& specs,
                       const RunConfig& cfg, std::uint64_t seed);

RunRecord run_config(const RunConfig& cfg, std::uint64_t seed);

/// config.json, metrics.json, events.jsonl, predictions.json, checkpoint.json
/// and session_<k>/{prefixes,stats,prediction_net}.json.
void write_run(const RunRecord& record, const std::filesystem::path& dir);

/// Recomputes metrics from a run directory's predictions.
Metrics read_run_metrics(const std::filesystem::path& dir);

/// Switches a component off; names: ssl, prediction_net, stochastic_head, delta_params.
RunConfig without(const RunConfig& cfg, const std::string& toggle);

struct AblationRow {
  std::string name;  // "full" or the disabled component
  Metrics metrics;
  std::uint64_t hash = 0;
};

struct AblationReport {
  std::vector<AblationRow> rows;
  std::string table() const;
};

AblationReport run_ablation(const RunConfig& cfg, const std::vector<std::string>& toggles, std::uint64_t seed);

struct SeedSummary {
  std::vector<RunRecord> runs;
  Summary average_accuracy;
  Summary forgetting;
  Summary macro_f1;
  Summary final_accuracy;
};

SeedSummary run_seeds(const RunConfig& cfg, std::size_t seeds, std::uint64_t first_seed = 0);

}  // namespace fscil
