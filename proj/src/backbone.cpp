#include "fscil/backbone.hpp"

#include <algorithm>

#include "fscil/errors.hpp"

namespace fscil {

NormPlacement parse_placement(const std::string& name) {
  if (name == "between") return NormPlacement::between;
  if (name == "before") return NormPlacement::before;
  throw ArgumentError("unknown norm placement '" + name + "' (expected between or before)");
}

std::string to_string(NormPlacement p) {
  return p == NormPlacement::between ? "between" : "before";
}

void BackboneConfig::validate() const {
  if (conv_layers < 1 || conv_layers > 3) throw ArgumentError("conv_layers must be 1..3");
  if (image_size == 0 || channels == 0) throw ArgumentError("image size and channels must be positive");
  if (embed_dim == 0 || heads == 0 || ffn_hidden == 0) throw ArgumentError("widths must be positive");
  if (embed_dim % heads != 0) {
    throw ArgumentError("embed_dim " + std::to_string(embed_dim) + " is not divisible by heads " +
                        std::to_string(heads));
  }
  (void)grid_side();
}

std::size_t BackboneConfig::grid_side() const {
  std::size_t side = image_size;
  const Geometry conv{kernel, stride, padding};
  const Geometry mp{pool_kernel, pool_stride, pool_padding};
  for (std::size_t i = 0; i < conv_layers; ++i) {
    side = conv.output_size(side);
    if (pool) side = mp.output_size(side);
  }
  return side;
}

std::size_t encoder_macs(const BackboneConfig& cfg, std::size_t prefix_rows) {
  const std::size_t n = cfg.tokens();
  const std::size_t d = cfg.embed_dim;
  std::size_t macs = 0;
  std::size_t side = cfg.image_size, cin = cfg.channels;
  const Geometry conv{cfg.kernel, cfg.stride, cfg.padding};
  const Geometry mp{cfg.pool_kernel, cfg.pool_stride, cfg.pool_padding};
  for (std::size_t i = 0; i < cfg.conv_layers; ++i) {
    side = conv.output_size(side);
    macs += side * side * cfg.kernel * cfg.kernel * cin * d;
    cin = d;
    if (cfg.pool) side = mp.output_size(side);
  }
  const std::size_t keys = n + prefix_rows;
  const std::size_t per_layer = 4 * n * d * d   // q, k, v, out projections
                                + 2 * n * keys * d  // scores and weighted values
                                + 2 * n * d * cfg.ffn_hidden;
  macs += cfg.layers * per_layer + n * d;
  return macs;
}

Tensor slice_rows(const Tensor& m, std::size_t begin, std::size_t count) {
  const std::size_t c = m.cols();
  if (begin + count > m.rows()) throw ArgumentError("slice_rows out of range");
  std::vector<double> v(m.storage().begin() + static_cast<std::ptrdiff_t>(begin * c),
                        m.storage().begin() + static_cast<std::ptrdiff_t>((begin + count) * c));
  return Tensor(Shape{count, c}, std::move(v));
}

Tensor gather_rows(const Tensor& m, std::span<const std::size_t> index) {
  const std::size_t c = m.cols();
  std::vector<double> v;
  v.reserve(index.size() * c);
  for (std::size_t i : index) {
    if (i >= m.rows()) throw ArgumentError("gather_rows index out of range");
    auto r = m.row(i);
    v.insert(v.end(), r.begin(), r.end());
  }
  return Tensor(Shape{index.size(), c}, std::move(v));
}

Var truncated_normal(Shape shape, double std, SeededRng& rng) {
  Tensor t(std::move(shape));
  for (double& x : t.values()) {
    double z;
    do {
      z = rng.normal();
    } while (z < -2.0 || z > 2.0);
    x = z * std;
  }
  return parameter(std::move(t));
}

EncoderState EncoderState::create(const BackboneConfig& config, SeededRng& rng) {
  config.validate();
  EncoderState s;
  s.config = config;
  const std::size_t d = config.embed_dim, h = config.ffn_hidden;
  s.pixel_norm = BatchNormLayer::make(config.channels);
  std::size_t cin = config.channels;
  for (std::size_t i = 0; i < config.conv_layers; ++i) {
    s.conv.push_back(truncated_normal({config.kernel * config.kernel * cin, d}, config.init_std, rng));
    cin = d;
  }
  for (std::size_t l = 0; l < config.layers; ++l) {
    EncoderBlock b;
    b.attn_norm = BatchNormLayer::make(d);
    b.query = truncated_normal({d, d}, config.init_std, rng);
    b.key = truncated_normal({d, d}, config.init_std, rng);
    b.value = truncated_normal({d, d}, config.init_std, rng);
    b.out = truncated_normal({d, d}, config.init_std, rng);
    b.ffn_in = truncated_normal({d, h}, config.init_std, rng);
    b.ffn_out = truncated_normal({h, d}, config.init_std, rng);
    b.ffn_norm = BatchNormLayer::make(config.placement == NormPlacement::between ? h : d);
    s.blocks.push_back(std::move(b));
  }
  s.final_norm = BatchNormLayer::make(d);
  s.pool_score = truncated_normal({d, 1}, config.init_std, rng);
  return s;
}

std::vector<std::pair<std::string, Var>> EncoderState::named_parameters() const {
  std::vector<std::pair<std::string, Var>> out;
  auto norm = [&](const std::string& name, const BatchNormLayer& n) {
    out.emplace_back(name + ".gamma", n.gamma);
    out.emplace_back(name + ".beta", n.beta);
  };
  norm("tokenizer.norm", pixel_norm);
  for (std::size_t i = 0; i < conv.size(); ++i) {
    out.emplace_back("tokenizer.conv" + std::to_string(i) + ".weight", conv[i]);
  }
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const auto& b = blocks[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    norm(p + "attn_norm", b.attn_norm);
    out.emplace_back(p + "attn.query", b.query);
    out.emplace_back(p + "attn.key", b.key);
    out.emplace_back(p + "attn.value", b.value);
    out.emplace_back(p + "attn.out", b.out);
    out.emplace_back(p + "ffn.in", b.ffn_in);
    norm(p + "ffn.norm", b.ffn_norm);
    out.emplace_back(p + "ffn.out", b.ffn_out);
  }
  norm("final_norm", final_norm);
  out.emplace_back("pool.score", pool_score);
  return out;
}

std::vector<Var> EncoderState::parameters() const {
  std::vector<Var> out;
  for (auto& [name, v] : named_parameters()) out.push_back(v);
  return out;
}

std::vector<std::pair<std::string, Tensor*>> EncoderState::buffers() {
  std::vector<std::pair<std::string, Tensor*>> out;
  auto norm = [&](const std::string& name, BatchNormLayer& n) {
    out.emplace_back(name + ".running_mean", &n.running_mean);
    out.emplace_back(name + ".running_var", &n.running_var);
  };
  norm("tokenizer.norm", pixel_norm);
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    norm(p + "attn_norm", blocks[l].attn_norm);
    norm(p + "ffn.norm", blocks[l].ffn_norm);
  }
  norm("final_norm", final_norm);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> EncoderState::buffers() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (auto& [name, t] : const_cast<EncoderState*>(this)->buffers()) out.emplace_back(name, t);
  return out;
}

EncoderState EncoderState::clone() const {
  EncoderState c = *this;
  auto copy_norm = [](BatchNormLayer& n) {
    n.gamma = clone_leaf(n.gamma);
    n.beta = clone_leaf(n.beta);
  };
  copy_norm(c.pixel_norm);
  for (auto& w : c.conv) w = clone_leaf(w);
  for (auto& b : c.blocks) {
    copy_norm(b.attn_norm);
    copy_norm(b.ffn_norm);
    for (Var* v : {&b.query, &b.key, &b.value, &b.out, &b.ffn_in, &b.ffn_out}) *v = clone_leaf(*v);
  }
  copy_norm(c.final_norm);
  c.pool_score = clone_leaf(c.pool_score);
  return c;
}

void EncoderState::set_trainable(bool on) {
  for (auto& v : parameters()) v.set_requires_grad(on);
}

std::size_t EncoderState::parameter_count() const {
  std::size_t n = 0;
  for (const auto& v : parameters()) n += v.size();
  return n;
}

std::uint64_t EncoderState::hash() const {
  std::uint64_t h = hash_values(parameters());
  for (auto& [name, t] : buffers()) h = hash_tensor(*t, h);
  return h;
}

Var conv_tokenize(EncoderState& state, const Tensor& images) {
  const auto& cfg = state.config;
  if (images.rank() != 2 || images.cols() != cfg.pixels()) {
    throw ArgumentError("conv_tokenize: expected images of shape [batch, " +
                        std::to_string(cfg.pixels()) + "], got " + shape_string(images.shape()));
  }
  const std::size_t batch = images.rows();
  std::size_t side = cfg.image_size;
  Var x = constant(images.reshaped({batch * side * side, cfg.channels}));
  x = ad::batch_norm(x, state.pixel_norm, state.mode);
  const Geometry conv{cfg.kernel, cfg.stride, cfg.padding};
  const Geometry mp{cfg.pool_kernel, cfg.pool_stride, cfg.pool_padding};
  for (const Var& w : state.conv) {
    x = ad::conv2d(x, w, batch, side, side, conv);
    side = conv.output_size(side);
    x = ad::relu(x);
    if (cfg.pool) {
      x = ad::max_pool(x, batch, side, side, mp);
      side = mp.output_size(side);
    }
  }
  return x;
}

Var mhsa_forward(const Var& x, EncoderBlock& block, std::size_t batch, std::size_t tokens,
                 std::size_t heads, const LayerPrefix* prefix, AttentionMaps* maps) {
  const std::size_t d = block.query.rows();
  if (x.cols() != d) {
    throw ArgumentError("mhsa_forward: token width " + std::to_string(x.cols()) +
                        " does not match block width " + std::to_string(d));
  }
  Var q = ad::matmul(x, block.query);
  Var k = ad::matmul(x, block.key);
  Var v = ad::matmul(x, block.value);
  Var pk, pv;
  if (prefix && prefix->rows() > 0) {
    pk = prefix->key;
    pv = prefix->value;
  }
  Var a = ad::attention(q, k, v, pk, pv, batch, tokens, heads, maps);
  return ad::matmul(a, block.out);
}

Var ffn_forward(const Var& x, EncoderBlock& block, NormPlacement placement, Mode mode) {
  if (placement == NormPlacement::between) {
    Var h = ad::matmul(x, block.ffn_in);
    h = ad::batch_norm(h, block.ffn_norm, mode);
    return ad::matmul(ad::gelu(h), block.ffn_out);
  }
  Var h = ad::batch_norm(x, block.ffn_norm, mode);
  h = ad::gelu(ad::matmul(h, block.ffn_in));
  return ad::matmul(h, block.ffn_out);
}

Var encoder_forward(EncoderState& state, const Tensor& images,
                    const std::vector<LayerPrefix>* prefixes, std::vector<AttentionMaps>* maps) {
  const auto& cfg = state.config;
  if (prefixes) {
    if (!cfg.prefix_capable) throw ArgumentError("backbone is not configured for prefixes");
    if (prefixes->size() != state.blocks.size()) {
      throw ArgumentError("prefix set has " + std::to_string(prefixes->size()) +
                          " layers, encoder has " + std::to_string(state.blocks.size()));
    }
  }
  const std::size_t batch = images.rows();
  const std::size_t tokens = cfg.tokens();
  Var x = conv_tokenize(state, images);
  if (maps) maps->assign(state.blocks.size(), AttentionMaps{});
  for (std::size_t l = 0; l < state.blocks.size(); ++l) {
    auto& b = state.blocks[l];
    Var h = ad::batch_norm(x, b.attn_norm, state.mode);
    const LayerPrefix* p = prefixes ? &(*prefixes)[l] : nullptr;
    x = ad::add(x, mhsa_forward(h, b, batch, tokens, cfg.heads, p, maps ? &(*maps)[l] : nullptr));
    x = ad::add(x, ffn_forward(x, b, cfg.placement, state.mode));
  }
  x = ad::batch_norm(x, state.final_norm, state.mode);
  return ad::sequence_pool(x, state.pool_score, batch, tokens);
}

Tensor embed(EncoderState& state, const Tensor& images, const std::vector<LayerPrefix>* prefixes,
             std::size_t chunk) {
  const Mode saved = state.mode;
  state.mode = Mode::eval;
  const std::size_t n = images.rows();
  const std::size_t d = state.config.embed_dim;
  Tensor out(Shape{std::max<std::size_t>(n, 1), d});
  if (n == 0) {
    state.mode = saved;
    return Tensor();
  }
  for (std::size_t b = 0; b < n; b += chunk) {
    const std::size_t c = std::min(chunk, n - b);
    Var z = encoder_forward(state, slice_rows(images, b, c), prefixes);
    std::copy(z.value().storage().begin(), z.value().storage().end(),
              out.storage().begin() + static_cast<std::ptrdiff_t>(b * d));
  }
  state.mode = saved;
  return out;
}

}  // namespace fscil
