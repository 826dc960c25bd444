#pragma once

#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

#include "fscil/backbone.hpp"
#include "fscil/config.hpp"
#include "fscil/data.hpp"
#include "fscil/events.hpp"
#include "fscil/stochastic_head.hpp"

namespace fscil {

/// Two-layer projection (linear, GELU, linear) on top of the pooled feature.
/// Two layers: GELU hidden layer, then cosine of the normalized hidden vector
/// against unit-norm output rows.
struct ProjectionHead {
  Var w1, b1;
  Var w2;  // out x hidden

  static ProjectionHead create(std::size_t in, std::size_t hidden, std::size_t out, SeededRng& rng);
  Var forward(const Var& z) const;
  std::vector<std::pair<std::string, Var>> named_parameters() const;
  ProjectionHead clone() const;
  std::size_t out_dim() const { return w2.rows(); }
};

/// Encoder plus projection; used for both student and teacher.
struct DinoNetwork {
  EncoderState encoder;
  ProjectionHead head;

  Var forward(const Tensor& images);
  std::vector<std::pair<std::string, Var>> named_parameters() const;
  std::vector<Var> parameters() const;
  DinoNetwork clone() const;
  std::uint64_t hash() const;
};

struct TeacherState {
  DinoNetwork net;
  Tensor center;  // projection_dim
  double momentum = 0.996;
  double center_momentum = 0.9;
  double temperature = 0.07;
  double warmup_temperature = 0.04;
};

/// Square crop in pixel coordinates.
struct CropBox {
  std::size_t top = 0;
  std::size_t left = 0;
  std::size_t side = 0;
};

/// Views of one batch: the first `global` entries are global crops. Every
/// view has the same shape as the input batch.
struct CropSet {
  std::vector<Tensor> views;
  std::size_t global = 0;
  std::size_t size() const { return views.size(); }
};

/// Area fraction drawn uniformly from [scale_min, scale_max], square, placed uniformly.
CropBox sample_crop_box(std::size_t image_size, double scale_min, double scale_max, SeededRng& rng);

/// Bilinear resize of one crop back to the full image size (channel-last row).
std::vector<double> crop_resize(std::span<const double> image, std::size_t image_size,
                                std::size_t channels, const CropBox& box);

CropSet multi_crop(const Tensor& images, std::size_t image_size, std::size_t channels,
                   std::size_t global_crops, std::size_t local_crops, const SslConfig& cfg,
                   SeededRng& rng);

/// (teacher view, student view) pairs with distinct views; teacher views are
/// the first `global` ones.
std::vector<std::pair<std::size_t, std::size_t>> dino_pairs(std::size_t global, std::size_t views);

/// Sum over pairs of the batch-mean cross-entropy between the centered,
/// sharpened teacher distribution and the student log-softmax. A pair with
/// equal indices is a ContractViolation.
Var dino_objective(const std::vector<Var>& student_out, const std::vector<Tensor>& teacher_out,
                   const Tensor& center, double teacher_temp, double student_temp,
                   std::span<const std::pair<std::size_t, std::size_t>> pairs);

struct DinoLoss {
  Var loss;
  std::size_t terms = 0;
  Tensor teacher_out;       // raw teacher outputs of all global views, stacked
  double teacher_entropy = 0.0;  // mean entropy of the sharpened teacher targets
};

/// Student in its current mode, teacher forced to eval mode. No gradient
/// reaches the teacher.
DinoLoss dino_loss(DinoNetwork& student, TeacherState& teacher, const CropSet& crops,
                   double teacher_temp, double student_temp);

/// c <- m c + (1 - m) mean(rows of teacher_out).
void update_center(TeacherState& teacher, const Tensor& teacher_out);

/// theta_t <- m theta_t + (1 - m) theta_s over parameters and running statistics.
void ema_update(DinoNetwork& teacher, const DinoNetwork& student, double momentum);

struct SslResult {
  TeacherState teacher;
  std::vector<double> losses;           // per epoch
  std::vector<double> teacher_entropy;  // per epoch
  std::size_t steps = 0;
};

SslResult run_ssl(const Dataset& data, const BackboneConfig& backbone, const SslConfig& cfg,
                  SeededRng& rng, EventLog* log = nullptr);

/// Supervised cross-entropy through the head; backbone and the head's last
/// block are trained. Returns per-epoch losses.
std::vector<double> train_supervised(EncoderState& encoder, StochasticHead& head, const Dataset& data,
                                     const SupervisedConfig& cfg, bool stochastic, SeededRng& rng,
                                     EventLog* log = nullptr);

/// Class means of features (rows) by label over classes [first, first + count).
Tensor class_prototypes(const Tensor& features, std::span<const std::size_t> labels,
                        std::size_t first, std::size_t count);

struct BaseTrainResult {
  EncoderState encoder;  // backbone for the incremental phase
  StochasticHead head;
  SslResult ssl;
  std::vector<double> supervised_losses;
  std::size_t ssl_steps_before_supervised = 0;
  bool ssl_ran = false;
};

/// Self-distillation to completion, then supervised training of a backbone
/// initialised from the teacher with a head initialised from class prototypes.
BaseTrainResult train_base(const Dataset& data, const RunConfig& cfg, SeededRng& rng,
                           EventLog* log = nullptr);

struct ProbeResult {
  double accuracy = 0.0;  // percent, on the evaluation set
  Tensor weights;         // D x classes
  Tensor bias;
};

struct ProbeConfig {
  double lr = 1e-3;
  std::size_t batch_size = 100;
  std::size_t epochs = 200;
  std::size_t patience = 10;
};

/// Linear classifier on frozen encoder features.
ProbeResult linear_probe(EncoderState& frozen, const Dataset& train, const Dataset& eval,
                         const ProbeConfig& cfg, SeededRng& rng);

}  // namespace fscil
