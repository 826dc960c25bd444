#include "fscil/checkpoint.hpp"

#include <fstream>

#include "fscil/errors.hpp"

namespace fscil {

using nlohmann::json;

json tensors_to_json(const TensorMap& tensors) {
  json t = json::object();
  for (const auto& [name, v] : tensors) {
    t[name] = {{"shape", v.shape()}, {"values", v.storage()}};
  }
  return {{"format", "fscil-tensors"}, {"version", 1}, {"tensors", t}};
}

TensorMap tensors_from_json(const json& j) {
  if (j.value("format", std::string()) != "fscil-tensors") {
    throw FormatError("not an fscil tensor file", 0);
  }
  TensorMap out;
  for (const auto& [name, v] : j.at("tensors").items()) {
    try {
      out.emplace(name, Tensor(v.at("shape").get<Shape>(), v.at("values").get<std::vector<double>>()));
    } catch (const ArgumentError& e) {
      throw FormatError("tensor '" + name + "': " + e.what(), 0);
    }
  }
  return out;
}

TensorMap encoder_tensors(const EncoderState& encoder) {
  TensorMap out;
  for (const auto& [name, v] : encoder.named_parameters()) out.emplace(name, v.value());
  for (const auto& [name, t] : encoder.buffers()) out.emplace(name, *t);
  return out;
}

TensorMap head_tensors(const StochasticHead& head) {
  TensorMap out;
  for (std::size_t b = 0; b < head.blocks(); ++b) {
    const std::string p = "head.block" + std::to_string(b) + ".";
    out.emplace(p + "mean", head.block(b).mean.value());
    out.emplace(p + "spread", head.block(b).spread.value());
  }
  return out;
}

TensorMap prefix_tensors(const PrefixSet& prefixes) {
  TensorMap out;
  for (std::size_t l = 0; l < prefixes.layers.size(); ++l) {
    const auto& p = prefixes.layers[l];
    if (!p.key.defined()) continue;
    out.emplace("layer" + std::to_string(l) + ".key", p.key.value());
    out.emplace("layer" + std::to_string(l) + ".value", p.value.value());
  }
  return out;
}

TensorMap prediction_net_tensors(const PredictionNet& net) {
  TensorMap out;
  for (const auto& [name, v] : net.named_parameters()) out.emplace(name, v.value());
  return out;
}

void load_encoder_tensors(EncoderState& encoder, const TensorMap& tensors) {
  std::size_t used = 0;
  auto assign = [&](const std::string& name, Tensor& dst) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw FormatError("checkpoint is missing '" + name + "'", 0);
    if (it->second.shape() != dst.shape()) {
      throw FormatError("checkpoint tensor '" + name + "' has shape " + shape_string(it->second.shape()) +
                            ", expected " + shape_string(dst.shape()),
                        0);
    }
    std::copy(it->second.storage().begin(), it->second.storage().end(), dst.storage().begin());
    ++used;
  };
  for (auto& [name, v] : encoder.named_parameters()) {
    Var w = v;
    assign(name, w.mutable_value());
  }
  for (auto& [name, t] : encoder.buffers()) assign(name, *t);
  if (used != tensors.size()) throw FormatError("checkpoint has tensors the encoder does not", 0);
}

json stats_to_json(const SessionStats& stats) {
  json classes = json::array();
  for (const auto& g : stats.classes) {
    classes.push_back({{"class", g.cls}, {"session", g.session}, {"count", g.count}, {"mean", g.mean}});
  }
  return {{"session", stats.session},
          {"samples", stats.samples},
          {"classes", classes},
          {"scatter", {{"shape", stats.scatter.shape()}, {"values", stats.scatter.storage()}}}};
}

SessionStats stats_from_json(const json& j) {
  SessionStats s;
  s.session = j.at("session").get<std::size_t>();
  s.samples = j.at("samples").get<std::size_t>();
  for (const auto& c : j.at("classes")) {
    s.classes.push_back({c.at("class").get<std::size_t>(), c.at("session").get<std::size_t>(),
                         c.at("mean").get<std::vector<double>>(), c.at("count").get<std::size_t>()});
  }
  s.scatter = Tensor(j.at("scatter").at("shape").get<Shape>(),
                     j.at("scatter").at("values").get<std::vector<double>>());
  return s;
}

void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw ArgumentError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ArgumentError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + " is not valid JSON", e.byte);
  }
}

}  // namespace fscil
