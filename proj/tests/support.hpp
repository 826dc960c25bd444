// Shared fixtures for unit and acceptance tests.
#pragma once

#include <cmath>
#include <vector>

#include "fscil/backbone.hpp"
#include "fscil/config.hpp"
#include "fscil/rng.hpp"
#include "fscil/tensor.hpp"

namespace fscil::testing {

inline Tensor random_tensor(Shape shape, SeededRng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = scale * rng.normal();
  return t;
}

inline std::vector<double> random_vector(std::size_t n, SeededRng& rng, double scale = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Tiny encoder geometry used by gradient and equivalence tests.
inline BackboneConfig tiny_backbone(NormPlacement placement = NormPlacement::between) {
  BackboneConfig c;
  c.image_size = 4;
  c.channels = 1;
  c.conv_layers = 1;
  c.kernel = 2;
  c.stride = 2;
  c.padding = 0;
  c.pool = false;
  c.embed_dim = 4;
  c.layers = 1;
  c.heads = 2;
  c.ffn_hidden = 6;
  c.placement = placement;
  c.init_std = 0.5;
  return c;
}

}  // namespace fscil::testing
