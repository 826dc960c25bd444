#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "fscil/backbone.hpp"
#include "fscil/data.hpp"
#include "fscil/optim.hpp"

namespace fscil {

/// Self-distillation phase of base training.
struct SslConfig {
  bool enabled = true;
  std::size_t epochs = 500;
  std::size_t patience = 30;
  std::size_t batch_size = 70;
  double lr = 2.5e-4;
  double lr_end = 1e-6;
  double weight_decay = 0.04;
  double weight_decay_end = 0.4;
  double teacher_momentum = 0.996;
  double center_momentum = 0.9;
  double teacher_temp = 0.07;
  double warmup_teacher_temp = 0.04;
  double warmup_fraction = 0.1;
  double student_temp = 0.1;
  std::size_t projection_hidden = 256;
  std::size_t projection_dim = 256;
  std::size_t global_crops = 2;
  std::size_t local_crops = 4;
  double global_scale_min = 0.6;
  double global_scale_max = 1.0;
  double local_scale_min = 0.2;
  double local_scale_max = 0.5;
};

/// Supervised cross-entropy phase of base training.
struct SupervisedConfig {
  std::size_t epochs = 1000;
  std::size_t patience = 30;
  std::size_t batch_size = 230;
  double lr = 1e-5;             // backbone
  double classifier_lr = 0.01;  // head
  double weight_decay = 3e-6;
  OptimizerKind optimizer = OptimizerKind::adamw;
  double plateau_factor = 0.25;
  std::size_t plateau_patience = 10;
  double plateau_min_lr = 3e-5;
};

struct HeadConfig {
  double temperature = 16.0;
  double offset = 4.0;
  double spread_init = 4.0;
  bool stochastic = true;
  bool eval_noise = false;
};

/// Per-session prefix training.
struct SessionConfig {
  std::size_t prefix_length = 16;  // even; half for keys, half for values
  double prefix_init = 0.02;
  std::size_t base_epochs = 4;
  std::size_t incremental_epochs = 15;
  std::size_t batch_size = 200;
  double lr = 0.01;
  double classifier_lr = 0.01;
  double weight_decay = 0.0;
  OptimizerKind optimizer = OptimizerKind::adamw;
  double plateau_factor = 0.25;
  std::size_t plateau_patience = 5;
  double plateau_min_lr = 0.0;
};

enum class Metric { automatic, mahalanobis, euclidean };
Metric parse_metric(const std::string& name);
std::string to_string(Metric m);

struct RoutingConfig {
  Metric metric = Metric::automatic;  // euclidean for 1-shot sessions, mahalanobis otherwise
  double regularization = 1e-6;       // times trace(A)/D
};

struct RectificationConfig {
  bool enabled = true;
  bool linear = false;  // single linear layer instead of two layers
  double lr = 1e-3;
  std::size_t epochs = 300;
  std::size_t batch_size = 100;
  std::size_t base_outliers = 5;
  std::size_t incremental_outliers = 1;
  bool pseudo_label = true;         // enrich session statistics from the unlabeled test pool
  bool pseudo_pairs = true;         // pseudo-labeled samples also become net inputs (incremental sessions)
};

enum class EvalScope { session, all };

struct EvalConfig {
  EvalScope scope = EvalScope::session;  // head restricted to the routed session's classes
};

struct DataConfig {
  std::string kind = "blobs";  // blobs | idx
  BlobSpec blobs;
  std::string train_images, train_labels, test_images, test_labels;
  std::size_t base_classes = 60;
  std::size_t ways = 5;
  std::size_t shots = 5;
  std::size_t sessions = 8;
};

/// Components that can be switched off for ablations.
struct Components {
  bool ssl = true;
  bool prediction_net = true;
  bool stochastic_head = true;
  bool delta_params = true;
};

struct RunConfig {
  std::string profile = "full";
  std::uint64_t seed = 0;
  std::size_t seeds = 5;
  BackboneConfig backbone;
  SslConfig ssl;
  SupervisedConfig supervised;
  HeadConfig head;
  SessionConfig session;
  RoutingConfig routing;
  RectificationConfig rectification;
  EvalConfig eval;
  DataConfig data;
  Components components;

  void validate() const;
};

/// Table-level defaults at full scale (d = 384, 14 layers, 224 px inputs).
RunConfig full_profile();
/// Blob-sized profile that runs in seconds.
RunConfig desk_profile();
RunConfig profile_by_name(const std::string& name);

nlohmann::json to_json(const RunConfig& c);
/// Starts from the profile named in "profile" (default "full") and applies
/// every other key on top. Unknown keys are an ArgumentError.
RunConfig config_from_json(const nlohmann::json& j);
RunConfig load_config(const std::string& path);

}  // namespace fscil
