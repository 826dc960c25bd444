#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fscil/layers.hpp"
#include "fscil/rng.hpp"

namespace fscil {

/// Where the FFN batch norm sits: between the two linear layers, or in front of both.
enum class NormPlacement { between, before };

NormPlacement parse_placement(const std::string& name);
std::string to_string(NormPlacement p);

struct BackboneConfig {
  std::size_t image_size = 28;  // square images
  std::size_t channels = 1;
  std::size_t conv_layers = 1;  // 1..3
  std::size_t kernel = 7;
  std::size_t stride = 2;
  std::size_t padding = 1;
  bool pool = true;
  std::size_t pool_kernel = 2;
  std::size_t pool_stride = 2;
  std::size_t pool_padding = 0;
  std::size_t embed_dim = 64;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t ffn_hidden = 128;
  NormPlacement placement = NormPlacement::between;
  bool prefix_capable = true;
  double init_std = 0.02;

  /// Throws ArgumentError on inconsistent geometry or widths.
  void validate() const;
  std::size_t pixels() const { return image_size * image_size * channels; }
  /// Side length of the token grid after every conv/pool stage.
  std::size_t grid_side() const;
  std::size_t tokens() const { return grid_side() * grid_side(); }
  std::size_t head_dim() const { return embed_dim / heads; }
};

/// Multiply-accumulate count of one forward pass for a single image.
std::size_t encoder_macs(const BackboneConfig& cfg, std::size_t prefix_rows = 0);

/// Key/value rows prepended to one attention layer.
struct LayerPrefix {
  Var key;
  Var value;
  std::size_t rows() const { return key.defined() ? key.rows() : 0; }
};

struct EncoderBlock {
  BatchNormLayer attn_norm;
  Var query, key, value, out;  // d x d each; heads split the columns
  Var ffn_in;                  // d x d'
  Var ffn_out;                 // d' x d
  BatchNormLayer ffn_norm;     // d' (between) or d (before) features
};

struct EncoderState {
  BackboneConfig config;
  Mode mode = Mode::train;
  BatchNormLayer pixel_norm;
  std::vector<Var> conv;  // (k*k*c_in) x d per stage
  std::vector<EncoderBlock> blocks;
  BatchNormLayer final_norm;
  Var pool_score;  // d x 1

  static EncoderState create(const BackboneConfig& config, SeededRng& rng);

  std::vector<std::pair<std::string, Var>> named_parameters() const;
  std::vector<Var> parameters() const;
  /// Running statistics of every norm layer, by canonical name.
  std::vector<std::pair<std::string, Tensor*>> buffers();
  std::vector<std::pair<std::string, const Tensor*>> buffers() const;

  EncoderState clone() const;
  void set_trainable(bool on);
  std::size_t parameter_count() const;
  /// Hash over parameter values and running statistics.
  std::uint64_t hash() const;
};

/// Images are (batch x pixels), channel-last. Returns (batch*tokens) x d.
Var conv_tokenize(EncoderState& state, const Tensor& images);

/// Projections, (prefixed) attention and output projection; no norm or residual.
Var mhsa_forward(const Var& x, EncoderBlock& block, std::size_t batch, std::size_t tokens,
                 std::size_t heads, const LayerPrefix* prefix = nullptr,
                 AttentionMaps* maps = nullptr);

Var ffn_forward(const Var& x, EncoderBlock& block, NormPlacement placement, Mode mode);

/// Full encoder: tokenize, blocks with residuals, final norm, sequence pool.
/// `prefixes`, when given, has one entry per layer. Returns batch x d.
Var encoder_forward(EncoderState& state, const Tensor& images,
                    const std::vector<LayerPrefix>* prefixes = nullptr,
                    std::vector<AttentionMaps>* maps = nullptr);

/// Eval-mode features without graph retention, processed in chunks.
Tensor embed(EncoderState& state, const Tensor& images,
             const std::vector<LayerPrefix>* prefixes = nullptr, std::size_t chunk = 256);

/// Rows [begin, begin+count) of a matrix.
Tensor slice_rows(const Tensor& m, std::size_t begin, std::size_t count);
/// Rows picked by index.
Tensor gather_rows(const Tensor& m, std::span<const std::size_t> index);

/// Truncated normal (|x| <= 2 std) initialised parameter.
Var truncated_normal(Shape shape, double std, SeededRng& rng);

}  // namespace fscil
