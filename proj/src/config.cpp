#include "fscil/config.hpp"

#include <fstream>
#include <functional>
#include <map>

#include "fscil/errors.hpp"

namespace fscil {

using nlohmann::json;

Metric parse_metric(const std::string& name) {
  if (name == "auto") return Metric::automatic;
  if (name == "mahalanobis") return Metric::mahalanobis;
  if (name == "euclidean") return Metric::euclidean;
  throw ArgumentError("unknown metric '" + name + "' (expected auto, mahalanobis or euclidean)");
}

std::string to_string(Metric m) {
  switch (m) {
    case Metric::automatic: return "auto";
    case Metric::mahalanobis: return "mahalanobis";
    case Metric::euclidean: return "euclidean";
  }
  return "?";
}

namespace {

// Field lists shared by serialization and parsing.

template <typename V>
void fields(BackboneConfig& c, V&& v) {
  v("image_size", c.image_size);
  v("channels", c.channels);
  v("conv_layers", c.conv_layers);
  v("kernel", c.kernel);
  v("stride", c.stride);
  v("padding", c.padding);
  v("pool", c.pool);
  v("pool_kernel", c.pool_kernel);
  v("pool_stride", c.pool_stride);
  v("pool_padding", c.pool_padding);
  v("embed_dim", c.embed_dim);
  v("layers", c.layers);
  v("heads", c.heads);
  v("ffn_hidden", c.ffn_hidden);
  v("norm_placement", c.placement);
  v("prefix_capable", c.prefix_capable);
  v("init_std", c.init_std);
}

template <typename V>
void fields(SslConfig& c, V&& v) {
  v("enabled", c.enabled);
  v("epochs", c.epochs);
  v("patience", c.patience);
  v("batch_size", c.batch_size);
  v("lr", c.lr);
  v("lr_end", c.lr_end);
  v("weight_decay", c.weight_decay);
  v("weight_decay_end", c.weight_decay_end);
  v("teacher_momentum", c.teacher_momentum);
  v("center_momentum", c.center_momentum);
  v("teacher_temp", c.teacher_temp);
  v("warmup_teacher_temp", c.warmup_teacher_temp);
  v("warmup_fraction", c.warmup_fraction);
  v("student_temp", c.student_temp);
  v("projection_hidden", c.projection_hidden);
  v("projection_dim", c.projection_dim);
  v("global_crops", c.global_crops);
  v("local_crops", c.local_crops);
  v("global_scale_min", c.global_scale_min);
  v("global_scale_max", c.global_scale_max);
  v("local_scale_min", c.local_scale_min);
  v("local_scale_max", c.local_scale_max);
}

template <typename V>
void fields(SupervisedConfig& c, V&& v) {
  v("epochs", c.epochs);
  v("patience", c.patience);
  v("batch_size", c.batch_size);
  v("lr", c.lr);
  v("classifier_lr", c.classifier_lr);
  v("weight_decay", c.weight_decay);
  v("optimizer", c.optimizer);
  v("plateau_factor", c.plateau_factor);
  v("plateau_patience", c.plateau_patience);
  v("plateau_min_lr", c.plateau_min_lr);
}

template <typename V>
void fields(HeadConfig& c, V&& v) {
  v("temperature", c.temperature);
  v("offset", c.offset);
  v("spread_init", c.spread_init);
  v("stochastic", c.stochastic);
  v("eval_noise", c.eval_noise);
}

template <typename V>
void fields(SessionConfig& c, V&& v) {
  v("prefix_length", c.prefix_length);
  v("prefix_init", c.prefix_init);
  v("base_epochs", c.base_epochs);
  v("incremental_epochs", c.incremental_epochs);
  v("batch_size", c.batch_size);
  v("lr", c.lr);
  v("classifier_lr", c.classifier_lr);
  v("weight_decay", c.weight_decay);
  v("optimizer", c.optimizer);
  v("plateau_factor", c.plateau_factor);
  v("plateau_patience", c.plateau_patience);
  v("plateau_min_lr", c.plateau_min_lr);
}

template <typename V>
void fields(RoutingConfig& c, V&& v) {
  v("metric", c.metric);
  v("regularization", c.regularization);
}

template <typename V>
void fields(RectificationConfig& c, V&& v) {
  v("enabled", c.enabled);
  v("linear", c.linear);
  v("lr", c.lr);
  v("epochs", c.epochs);
  v("batch_size", c.batch_size);
  v("base_outliers", c.base_outliers);
  v("incremental_outliers", c.incremental_outliers);
  v("pseudo_label", c.pseudo_label);
  v("pseudo_pairs", c.pseudo_pairs);
}

template <typename V>
void fields(EvalConfig& c, V&& v) {
  v("scope", c.scope);
}

template <typename V>
void fields(BlobSpec& c, V&& v) {
  v("classes", c.classes);
  v("dim", c.dim);
  v("train_per_class", c.train_per_class);
  v("test_per_class", c.test_per_class);
  v("separation", c.separation);
  v("std", c.std);
  v("seed", c.seed);
}

template <typename V>
void fields(DataConfig& c, V&& v) {
  v("kind", c.kind);
  v("blobs", c.blobs);
  v("train_images", c.train_images);
  v("train_labels", c.train_labels);
  v("test_images", c.test_images);
  v("test_labels", c.test_labels);
  v("base_classes", c.base_classes);
  v("ways", c.ways);
  v("shots", c.shots);
  v("sessions", c.sessions);
}

template <typename V>
void fields(Components& c, V&& v) {
  v("ssl", c.ssl);
  v("prediction_net", c.prediction_net);
  v("stochastic_head", c.stochastic_head);
  v("delta_params", c.delta_params);
}

template <typename V>
void fields(RunConfig& c, V&& v) {
  v("profile", c.profile);
  v("seed", c.seed);
  v("seeds", c.seeds);
  v("backbone", c.backbone);
  v("ssl", c.ssl);
  v("supervised", c.supervised);
  v("head", c.head);
  v("session", c.session);
  v("routing", c.routing);
  v("rectification", c.rectification);
  v("eval", c.eval);
  v("data", c.data);
  v("components", c.components);
}

template <typename T>
concept Structured = requires(T& t) { fields(t, [](const char*, auto&) {}); };

json put(const NormPlacement& p) { return to_string(p); }
json put(const OptimizerKind& k) { return to_string(k); }
json put(const Metric& m) { return to_string(m); }
json put(const EvalScope& s) { return s == EvalScope::session ? "session" : "all"; }
template <typename T>
  requires(!Structured<T>)
json put(const T& v) {
  return json(v);
}
template <Structured T>
json put(const T& s) {
  json j = json::object();
  fields(const_cast<T&>(s), [&](const char* name, auto& f) { j[name] = put(f); });
  return j;
}

void get(const json& j, NormPlacement& p) { p = parse_placement(j.get<std::string>()); }
void get(const json& j, OptimizerKind& k) { k = parse_optimizer(j.get<std::string>()); }
void get(const json& j, Metric& m) { m = parse_metric(j.get<std::string>()); }
void get(const json& j, EvalScope& s) {
  const auto v = j.get<std::string>();
  if (v == "session") {
    s = EvalScope::session;
  } else if (v == "all") {
    s = EvalScope::all;
  } else {
    throw ArgumentError("unknown eval scope '" + v + "' (expected session or all)");
  }
}
template <typename T>
  requires(!Structured<T>)
void get(const json& j, T& v) {
  v = j.get<T>();
}
template <Structured T>
void get(const json& j, T& s, const std::string& path = "") {
  if (!j.is_object()) throw ArgumentError("config: '" + path + "' must be an object");
  std::map<std::string, std::function<void(const json&)>> setters;
  fields(s, [&](const char* name, auto& f) {
    setters[name] = [&f, name, &path](const json& value) {
      using F = std::remove_reference_t<decltype(f)>;
      if constexpr (Structured<F>) {
        get(value, f, path + name + ".");
      } else {
        try {
          get(value, f);
        } catch (const json::exception& e) {
          throw ArgumentError("config: bad value for '" + path + name + "': " + e.what());
        }
      }
    };
  });
  for (auto it = j.begin(); it != j.end(); ++it) {
    auto found = setters.find(it.key());
    if (found == setters.end()) throw ArgumentError("config: unknown key '" + path + it.key() + "'");
    found->second(it.value());
  }
}

}  // namespace

void RunConfig::validate() const {
  backbone.validate();
  if (session.prefix_length % 2 != 0) throw ArgumentError("prefix_length must be even");
  if (head.temperature <= 0.0) throw ArgumentError("head temperature must be positive");
  if (ssl.global_crops < 1) throw ArgumentError("need at least one global crop");
  if (ssl.teacher_temp <= 0.0 || ssl.warmup_teacher_temp <= 0.0 || ssl.student_temp <= 0.0) {
    throw ArgumentError("distillation temperatures must be positive");
  }
  if (ssl.global_scale_min <= 0.0 || ssl.global_scale_min > ssl.global_scale_max ||
      ssl.global_scale_max > 1.0 || ssl.local_scale_min <= 0.0 ||
      ssl.local_scale_min > ssl.local_scale_max || ssl.local_scale_max > 1.0) {
    throw ArgumentError("crop scales must satisfy 0 < min <= max <= 1");
  }
  if (data.kind != "blobs" && data.kind != "idx") {
    throw ArgumentError("data.kind must be blobs or idx, got '" + data.kind + "'");
  }
  if (data.kind == "blobs") {
    const std::size_t side = backbone.image_size;
    if (side * side * backbone.channels != data.blobs.dim) {
      throw ArgumentError("blob dim " + std::to_string(data.blobs.dim) +
                          " does not match backbone image " + std::to_string(side) + "x" +
                          std::to_string(side) + "x" + std::to_string(backbone.channels));
    }
  }
}

RunConfig full_profile() {
  RunConfig c;
  c.profile = "full";
  auto& b = c.backbone;
  b.image_size = 224;
  b.channels = 3;
  b.conv_layers = 2;
  b.kernel = 7;
  b.stride = 2;
  b.padding = 3;
  b.pool = true;
  b.pool_kernel = 3;
  b.pool_stride = 2;
  b.pool_padding = 1;
  b.embed_dim = 384;
  b.layers = 14;
  b.heads = 6;
  b.ffn_hidden = 1152;
  c.data.kind = "idx";
  c.data.base_classes = 60;
  c.data.ways = 5;
  c.data.shots = 5;
  c.data.sessions = 8;
  return c;
}

RunConfig desk_profile() {
  RunConfig c;
  c.profile = "desk";
  auto& b = c.backbone;
  b.image_size = 4;
  b.channels = 1;
  b.conv_layers = 1;
  b.kernel = 2;
  b.stride = 2;
  b.padding = 0;
  b.pool = false;
  b.embed_dim = 32;
  b.layers = 2;
  b.heads = 2;
  b.ffn_hidden = 64;

  c.data.kind = "blobs";
  c.data.blobs = BlobSpec{18, 16, 40, 40, 8.0, 1.0, 0};
  c.data.base_classes = 10;
  c.data.ways = 2;
  c.data.shots = 5;
  c.data.sessions = 4;

  c.ssl.epochs = 10;
  c.ssl.patience = 30;
  c.ssl.batch_size = 64;
  c.ssl.lr = 1e-3;
  c.ssl.projection_hidden = 64;
  c.ssl.projection_dim = 32;

  c.supervised.epochs = 30;
  c.supervised.patience = 30;
  c.supervised.batch_size = 64;
  c.supervised.lr = 1e-3;
  c.supervised.classifier_lr = 0.01;
  c.supervised.plateau_patience = 5;
  c.supervised.plateau_min_lr = 1e-5;

  c.session.prefix_length = 4;
  c.session.batch_size = 64;

  c.rectification.epochs = 100;
  return c;
}

RunConfig profile_by_name(const std::string& name) {
  if (name == "full") return full_profile();
  if (name == "desk") return desk_profile();
  throw ArgumentError("unknown profile '" + name + "' (expected full or desk)");
}

json to_json(const RunConfig& c) { return put(c); }

RunConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ArgumentError("config must be a JSON object");
  RunConfig c = profile_by_name(j.value("profile", std::string("full")));
  get(j, c, "");
  c.validate();
  return c;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ArgumentError("cannot open config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("config is not valid JSON: ") + e.what(), e.byte);
  }
  return config_from_json(j);
}

}  // namespace fscil
