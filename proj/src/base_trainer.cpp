#include "fscil/base_trainer.hpp"

#include <algorithm>
#include <cmath>

#include "fscil/errors.hpp"
#include "fscil/ops.hpp"

namespace fscil {

ProjectionHead ProjectionHead::create(std::size_t in, std::size_t hidden, std::size_t out,
                                      SeededRng& rng) {
  ProjectionHead h;
  h.w1 = truncated_normal({in, hidden}, 0.02, rng);
  h.b1 = parameter(Tensor(Shape{hidden}, 0.0));
  h.w2 = truncated_normal({out, hidden}, 0.02, rng);
  return h;
}

Var ProjectionHead::forward(const Var& z) const {
  Var h = ad::gelu(ad::add_bias(ad::matmul(z, w1), b1));
  return ad::matmul(ad::l2_normalize_rows(h), ad::l2_normalize_rows(w2), false, true);
}

std::vector<std::pair<std::string, Var>> ProjectionHead::named_parameters() const {
  return {{"projection.w1", w1}, {"projection.b1", b1}, {"projection.w2", w2}};
}

ProjectionHead ProjectionHead::clone() const {
  return {clone_leaf(w1), clone_leaf(b1), clone_leaf(w2)};
}

Var DinoNetwork::forward(const Tensor& images) { return head.forward(encoder_forward(encoder, images)); }

std::vector<std::pair<std::string, Var>> DinoNetwork::named_parameters() const {
  auto out = encoder.named_parameters();
  for (auto& p : head.named_parameters()) out.push_back(p);
  return out;
}

std::vector<Var> DinoNetwork::parameters() const {
  std::vector<Var> out;
  for (auto& [n, v] : named_parameters()) out.push_back(v);
  return out;
}

DinoNetwork DinoNetwork::clone() const { return {encoder.clone(), head.clone()}; }

std::uint64_t DinoNetwork::hash() const {
  std::uint64_t h = encoder.hash();
  for (auto& [name, v] : head.named_parameters()) h = hash_tensor(v.value(), h);
  return h;
}

// ---- crops ----------------------------------------------------------------

CropBox sample_crop_box(std::size_t image_size, double scale_min, double scale_max, SeededRng& rng) {
  if (image_size == 0) throw ArgumentError("cannot crop an empty image");
  if (!(scale_min > 0.0) || scale_min > scale_max || scale_max > 1.0) {
    throw ArgumentError("crop scale range must satisfy 0 < min <= max <= 1");
  }
  const double s = rng.uniform(scale_min, scale_max);
  auto side = static_cast<std::size_t>(std::lround(std::sqrt(s) * static_cast<double>(image_size)));
  side = std::clamp<std::size_t>(side, 1, image_size);
  CropBox b;
  b.side = side;
  b.top = rng.index(image_size - side + 1);
  b.left = rng.index(image_size - side + 1);
  return b;
}

std::vector<double> crop_resize(std::span<const double> image, std::size_t image_size,
                                std::size_t channels, const CropBox& box) {
  if (image.size() != image_size * image_size * channels) throw ArgumentError("crop_resize: image size mismatch");
  if (box.side == 0 || box.top + box.side > image_size || box.left + box.side > image_size) {
    throw ArgumentError("crop box outside the image");
  }
  std::vector<double> out(image.size());
  const double ratio = static_cast<double>(box.side) / static_cast<double>(image_size);
  const double last = static_cast<double>(box.side - 1);
  auto px = [&](std::size_t y, std::size_t x, std::size_t c) {
    return image[((box.top + y) * image_size + box.left + x) * channels + c];
  };
  for (std::size_t oy = 0; oy < image_size; ++oy) {
    const double sy = std::clamp((static_cast<double>(oy) + 0.5) * ratio - 0.5, 0.0, last);
    const auto y0 = static_cast<std::size_t>(sy);
    const std::size_t y1 = std::min(y0 + 1, box.side - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t ox = 0; ox < image_size; ++ox) {
      const double sx = std::clamp((static_cast<double>(ox) + 0.5) * ratio - 0.5, 0.0, last);
      const auto x0 = static_cast<std::size_t>(sx);
      const std::size_t x1 = std::min(x0 + 1, box.side - 1);
      const double fx = sx - static_cast<double>(x0);
      for (std::size_t c = 0; c < channels; ++c) {
        const double top = (1.0 - fx) * px(y0, x0, c) + fx * px(y0, x1, c);
        const double bot = (1.0 - fx) * px(y1, x0, c) + fx * px(y1, x1, c);
        out[(oy * image_size + ox) * channels + c] = (1.0 - fy) * top + fy * bot;
      }
    }
  }
  return out;
}

CropSet multi_crop(const Tensor& images, std::size_t image_size, std::size_t channels,
                   std::size_t global_crops, std::size_t local_crops, const SslConfig& cfg,
                   SeededRng& rng) {
  if (images.rank() != 2 || images.cols() != image_size * image_size * channels) {
    throw ArgumentError("multi_crop: images must be [batch, " +
                        std::to_string(image_size * image_size * channels) + "]");
  }
  CropSet set;
  set.global = global_crops;
  const std::size_t n = images.rows();
  for (std::size_t v = 0; v < global_crops + local_crops; ++v) {
    const bool global = v < global_crops;
    const double lo = global ? cfg.global_scale_min : cfg.local_scale_min;
    const double hi = global ? cfg.global_scale_max : cfg.local_scale_max;
    Tensor view(images.shape());
    for (std::size_t i = 0; i < n; ++i) {
      const CropBox box = sample_crop_box(image_size, lo, hi, rng);
      const auto r = crop_resize(images.row(i), image_size, channels, box);
      std::copy(r.begin(), r.end(), view.row(i).begin());
    }
    set.views.push_back(std::move(view));
  }
  return set;
}

// ---- distillation ---------------------------------------------------------

std::vector<std::pair<std::size_t, std::size_t>> dino_pairs(std::size_t global, std::size_t views) {
  if (global > views) throw ArgumentError("more global views than views");
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i < global; ++i) {
    for (std::size_t v = 0; v < views; ++v) {
      if (v != i) pairs.emplace_back(i, v);
    }
  }
  return pairs;
}

namespace {

Tensor sharpen(const Tensor& t, const Tensor& center, double temp) {
  Tensor p(t.shape());
  const std::size_t c = t.cols();
  for (std::size_t r = 0; r < t.rows(); ++r) {
    for (std::size_t j = 0; j < c; ++j) p.at(r, j) = (t.at(r, j) - center[j]) / temp;
  }
  return softmax(p, 1);
}

}  // namespace

Var dino_objective(const std::vector<Var>& student_out, const std::vector<Tensor>& teacher_out,
                   const Tensor& center, double teacher_temp, double student_temp,
                   std::span<const std::pair<std::size_t, std::size_t>> pairs) {
  if (pairs.empty()) throw ArgumentError("distillation needs at least one view pair");
  std::vector<Tensor> targets;
  for (const auto& t : teacher_out) targets.push_back(sharpen(t, center, teacher_temp));
  Var total;
  for (const auto& [i, v] : pairs) {
    if (i == v) throw ContractViolation("distillation pair compares view " + std::to_string(i) + " with itself");
    if (i >= targets.size() || v >= student_out.size()) throw ArgumentError("view pair out of range");
    Var term = ad::soft_cross_entropy(targets[i], ad::scale(student_out[v], 1.0 / student_temp));
    total = total.defined() ? ad::add(total, term) : term;
  }
  return total;
}

DinoLoss dino_loss(DinoNetwork& student, TeacherState& teacher, const CropSet& crops,
                   double teacher_temp, double student_temp) {
  if (crops.global == 0 || crops.size() < 2) throw ArgumentError("need a global view and one other view");
  const std::size_t b = crops.views[0].rows();
  const std::size_t cols = crops.views[0].cols();

  auto stack = [&](std::size_t count) {
    std::vector<double> all;
    all.reserve(count * b * cols);
    for (std::size_t v = 0; v < count; ++v) {
      all.insert(all.end(), crops.views[v].storage().begin(), crops.views[v].storage().end());
    }
    return Tensor(Shape{count * b, cols}, std::move(all));
  };

  Var s_all = student.forward(stack(crops.size()));
  std::vector<Var> s_out;
  for (std::size_t v = 0; v < crops.size(); ++v) s_out.push_back(ad::slice_rows(s_all, v * b, b));

  // Teacher normalizes with batch statistics; its running buffers only follow the student.
  auto buffers = teacher.net.encoder.buffers();
  std::vector<Tensor> kept;
  for (auto& [name, t] : buffers) kept.push_back(*t);
  const Mode saved = teacher.net.encoder.mode;
  teacher.net.encoder.mode = Mode::train;
  Tensor t_all = teacher.net.forward(stack(crops.global)).value();
  teacher.net.encoder.mode = saved;
  for (std::size_t i = 0; i < buffers.size(); ++i) *buffers[i].second = kept[i];
  std::vector<Tensor> t_out;
  for (std::size_t v = 0; v < crops.global; ++v) t_out.push_back(slice_rows(t_all, v * b, b));

  const auto pairs = dino_pairs(crops.global, crops.size());
  DinoLoss out;
  out.loss = dino_objective(s_out, t_out, teacher.center, teacher_temp, student_temp, pairs);
  out.terms = pairs.size();
  const Tensor p = sharpen(t_all, teacher.center, teacher_temp);
  double h = 0.0;
  for (std::size_t r = 0; r < p.rows(); ++r) h += entropy(p.row(r));
  out.teacher_entropy = h / static_cast<double>(p.rows());
  out.teacher_out = std::move(t_all);
  return out;
}

void update_center(TeacherState& teacher, const Tensor& teacher_out) {
  if (teacher_out.rows() == 0) throw ArgumentError("center update needs a nonempty batch");
  const auto mean = row_mean(teacher_out);
  if (mean.size() != teacher.center.size()) throw ArgumentError("center width mismatch");
  const double m = teacher.center_momentum;
  for (std::size_t j = 0; j < mean.size(); ++j) teacher.center[j] = m * teacher.center[j] + (1.0 - m) * mean[j];
}

void ema_update(DinoNetwork& teacher, const DinoNetwork& student, double momentum) {
  auto tp = teacher.named_parameters();
  auto sp = student.named_parameters();
  if (tp.size() != sp.size()) throw ArgumentError("teacher and student differ in parameter count");
  auto blend = [momentum](Tensor& t, const Tensor& s, const std::string& name) {
    if (t.shape() != s.shape()) throw ArgumentError("ema_update: shape mismatch for " + name);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = momentum * t[i] + (1.0 - momentum) * s[i];
  };
  for (std::size_t i = 0; i < tp.size(); ++i) {
    blend(tp[i].second.mutable_value(), sp[i].second.value(), tp[i].first);
  }
  auto tb = teacher.encoder.buffers();
  auto sb = student.encoder.buffers();
  for (std::size_t i = 0; i < tb.size(); ++i) blend(*tb[i].second, *sb[i].second, tb[i].first);
}

namespace {

std::vector<ParamGroup> decay_groups(const std::vector<std::pair<std::string, Var>>& named,
                                     double no_decay_scale = 1.0) {
  ParamGroup decay{{}, true, 1.0}, plain{{}, false, no_decay_scale};
  for (const auto& [name, v] : named) {
    const bool is_norm_or_bias = name.ends_with(".gamma") || name.ends_with(".beta") ||
                                 name.ends_with(".b1") || name.ends_with(".b2");
    (is_norm_or_bias ? plain : decay).params.push_back(v);
  }
  return {decay, plain};
}

}  // namespace

SslResult run_ssl(const Dataset& data, const BackboneConfig& backbone, const SslConfig& cfg,
                  SeededRng& rng, EventLog* log) {
  if (data.size() < 2) throw ArgumentError("self-distillation needs at least two samples");
  SeededRng init = rng.split(11), crop_rng = rng.split(12), order = rng.split(13);
  DinoNetwork student{EncoderState::create(backbone, init),
                      ProjectionHead::create(backbone.embed_dim, cfg.projection_hidden,
                                             cfg.projection_dim, init)};
  student.encoder.mode = Mode::train;
  SslResult res;
  res.teacher.net = student.clone();
  for (auto& v : res.teacher.net.parameters()) v.set_requires_grad(false);
  res.teacher.net.encoder.mode = Mode::eval;
  res.teacher.center = Tensor(Shape{cfg.projection_dim}, 0.0);
  res.teacher.momentum = cfg.teacher_momentum;
  res.teacher.center_momentum = cfg.center_momentum;
  res.teacher.temperature = cfg.teacher_temp;
  res.teacher.warmup_temperature = cfg.warmup_teacher_temp;

  OptimizerConfig oc;
  oc.kind = OptimizerKind::adamw;
  oc.lr = cfg.lr;
  oc.weight_decay = cfg.weight_decay;
  Optimizer opt(decay_groups(student.named_parameters()), oc);

  const std::size_t per_epoch = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = std::max<std::size_t>(1, cfg.epochs * per_epoch);
  const auto warm = static_cast<std::size_t>(std::lround(cfg.warmup_fraction * static_cast<double>(cfg.epochs)));
  EarlyStopping stopper(cfg.patience);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double tt = linear_warmup(cfg.warmup_teacher_temp, cfg.teacher_temp, epoch, warm);
    double loss_sum = 0.0, ent_sum = 0.0;
    std::size_t batches = 0;
    for (const auto& idx : minibatches(data.size(), cfg.batch_size, order)) {
      opt.set_lr(cosine_schedule(cfg.lr, cfg.lr_end, res.steps, total));
      opt.set_weight_decay(cosine_schedule(cfg.weight_decay, cfg.weight_decay_end, res.steps, total));
      const Tensor x = gather_rows(data.features, idx);
      const CropSet crops = multi_crop(x, backbone.image_size, backbone.channels, cfg.global_crops,
                                       cfg.local_crops, cfg, crop_rng);
      DinoLoss l = dino_loss(student, res.teacher, crops, tt, cfg.student_temp);
      opt.zero_grad();
      backward(l.loss);
      opt.step();
      ema_update(res.teacher.net, student, res.teacher.momentum);
      update_center(res.teacher, l.teacher_out);
      loss_sum += l.loss.value()[0];
      ent_sum += l.teacher_entropy;
      ++batches;
      ++res.steps;
    }
    const double loss = loss_sum / static_cast<double>(batches);
    const double ent = ent_sum / static_cast<double>(batches);
    if (!std::isfinite(loss)) throw NumericError("self-distillation loss diverged at epoch " + std::to_string(epoch));
    res.losses.push_back(loss);
    res.teacher_entropy.push_back(ent);
    record(log, "ssl", 0, epoch, "loss", loss);
    record(log, "ssl", 0, epoch, "teacher_entropy", ent);
    record(log, "ssl", 0, epoch, "lr", opt.lr());
    if (stopper.update(loss)) break;
  }
  return res;
}

Tensor class_prototypes(const Tensor& features, std::span<const std::size_t> labels,
                        std::size_t first, std::size_t count) {
  const std::size_t d = features.cols();
  Tensor out(Shape{count, d});
  std::vector<std::size_t> n(count, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < first || labels[i] >= first + count) continue;
    const std::size_t c = labels[i] - first;
    ++n[c];
    for (std::size_t j = 0; j < d; ++j) out.at(c, j) += features.at(i, j);
  }
  for (std::size_t c = 0; c < count; ++c) {
    if (n[c] == 0) throw ArgumentError("class " + std::to_string(first + c) + " has no samples");
    for (std::size_t j = 0; j < d; ++j) out.at(c, j) /= static_cast<double>(n[c]);
  }
  return out;
}

std::vector<double> train_supervised(EncoderState& encoder, StochasticHead& head, const Dataset& data,
                                     const SupervisedConfig& cfg, bool stochastic, SeededRng& rng,
                                     EventLog* log) {
  if (data.size() < 2) throw ArgumentError("supervised training needs at least two samples");
  if (head.blocks() == 0) throw ArgumentError("head has no classes");
  const std::size_t blk = head.blocks() - 1;
  const BlockRange range{blk, blk + 1};
  const std::size_t first = head.block(blk).first_class;
  const std::size_t count = head.block(blk).classes();
  for (std::size_t l : data.labels) {
    if (l < first || l >= first + count) throw ArgumentError("label outside the trained head block");
  }
  SeededRng order = rng.split(21), noise = rng.split(22);
  encoder.mode = Mode::train;
  encoder.set_trainable(true);
  head.set_trainable(range, true);

  auto groups = decay_groups(encoder.named_parameters(), cfg.lr / cfg.classifier_lr);
  groups[0].lr_scale = cfg.lr / cfg.classifier_lr;
  groups.push_back({head.parameters(range, stochastic), false, 1.0});
  OptimizerConfig oc;
  oc.kind = cfg.optimizer;
  oc.lr = cfg.classifier_lr;
  oc.weight_decay = cfg.weight_decay;
  Optimizer opt(std::move(groups), oc);
  ReduceOnPlateau plateau(cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_min_lr);
  EarlyStopping stopper(cfg.patience);

  std::vector<double> losses;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double sum = 0.0;
    std::size_t batches = 0;
    for (const auto& idx : minibatches(data.size(), cfg.batch_size, order)) {
      const Tensor x = gather_rows(data.features, idx);
      std::vector<std::size_t> y;
      for (std::size_t i : idx) y.push_back(data.labels[i] - first);
      Var z = encoder_forward(encoder, x);
      Var logits = head.logits(z, stochastic ? &noise : nullptr, range);
      Var loss = ad::cross_entropy(logits, y);
      opt.zero_grad();
      backward(loss);
      opt.step();
      sum += loss.value()[0];
      ++batches;
    }
    const double loss = sum / static_cast<double>(batches);
    if (!std::isfinite(loss)) throw NumericError("supervised loss diverged at epoch " + std::to_string(epoch));
    losses.push_back(loss);
    record(log, "supervised", 0, epoch, "loss", loss);
    record(log, "supervised", 0, epoch, "lr", opt.lr());
    opt.set_lr(plateau.update(loss, opt.lr()));
    if (stopper.update(loss)) break;
  }
  encoder.mode = Mode::eval;
  return losses;
}

BaseTrainResult train_base(const Dataset& data, const RunConfig& cfg, SeededRng& rng, EventLog* log) {
  if (data.size() == 0) throw ArgumentError("base session has no training data");
  std::size_t classes = 0;
  for (std::size_t l : data.labels) classes = std::max(classes, l + 1);
  if (classes < 2) throw ArgumentError("base session needs at least two classes");

  BaseTrainResult res{EncoderState{}, StochasticHead(cfg.backbone.embed_dim, cfg.head.temperature, cfg.head.offset),
                      SslResult{}, {}, 0, false};
  if (cfg.components.ssl && cfg.ssl.enabled) {
    SeededRng ssl_rng = rng.split(1);
    res.ssl = run_ssl(data, cfg.backbone, cfg.ssl, ssl_rng, log);
    res.ssl_ran = true;
    res.ssl_steps_before_supervised = res.ssl.steps;
    res.encoder = res.ssl.teacher.net.encoder.clone();
  } else {
    SeededRng init = rng.split(2);
    res.encoder = EncoderState::create(cfg.backbone, init);
  }
  res.encoder.set_trainable(true);

  const Tensor feats = embed(res.encoder, data.features);
  res.head.set_spread_init(cfg.head.spread_init);
  res.head.init_means_from_prototypes(class_prototypes(feats, data.labels, 0, classes));

  SeededRng sup = rng.split(3);
  const bool stochastic = cfg.components.stochastic_head && cfg.head.stochastic;
  res.supervised_losses = train_supervised(res.encoder, res.head, data, cfg.supervised, stochastic, sup, log);
  return res;
}

ProbeResult linear_probe(EncoderState& frozen, const Dataset& train, const Dataset& eval,
                         const ProbeConfig& cfg, SeededRng& rng) {
  if (train.size() == 0) throw ArgumentError("probe needs training data");
  std::size_t classes = 0;
  for (std::size_t l : train.labels) classes = std::max(classes, l + 1);
  for (std::size_t l : eval.labels) classes = std::max(classes, l + 1);
  const Tensor ftr = embed(frozen, train.features);
  const std::size_t d = ftr.cols();

  SeededRng init = rng.split(31), order = rng.split(32);
  Var w = truncated_normal({d, classes}, 0.02, init);
  Var b = parameter(Tensor(Shape{classes}, 0.0));
  OptimizerConfig oc;
  oc.kind = OptimizerKind::adam;
  oc.lr = cfg.lr;
  Optimizer opt({ParamGroup{{w, b}, false, 1.0}}, oc);
  EarlyStopping stopper(cfg.patience, 1e-6);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double sum = 0.0;
    std::size_t batches = 0;
    for (const auto& idx : minibatches(train.size(), cfg.batch_size, order)) {
      std::vector<std::size_t> y;
      for (std::size_t i : idx) y.push_back(train.labels[i]);
      Var logits = ad::add_bias(ad::matmul(constant(gather_rows(ftr, idx)), w), b);
      Var loss = ad::cross_entropy(logits, y);
      opt.zero_grad();
      backward(loss);
      opt.step();
      sum += loss.value()[0];
      ++batches;
    }
    if (stopper.update(sum / static_cast<double>(batches))) break;
  }

  ProbeResult res;
  res.weights = w.value();
  res.bias = b.value();
  const Dataset& target = eval.size() > 0 ? eval : train;
  const Tensor fe = embed(frozen, target.features);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    std::size_t best = 0;
    double best_v = -1e300;
    for (std::size_t c = 0; c < classes; ++c) {
      double v = res.bias[c];
      for (std::size_t j = 0; j < d; ++j) v += fe.at(i, j) * res.weights.at(j, c);
      if (v > best_v) {
        best_v = v;
        best = c;
      }
    }
    correct += best == target.labels[i];
  }
  res.accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(target.size());
  return res;
}

}  // namespace fscil
