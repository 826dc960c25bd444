#include "fscil/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "fscil/errors.hpp"

namespace fscil {

BatchNormLayer BatchNormLayer::make(std::size_t features) {
  BatchNormLayer l;
  l.gamma = parameter(Tensor(Shape{features}, 1.0));
  l.beta = parameter(Tensor(Shape{features}, 0.0));
  l.running_mean = Tensor(Shape{features}, 0.0);
  l.running_var = Tensor(Shape{features}, 1.0);
  return l;
}

std::size_t Geometry::output_size(std::size_t in) const {
  if (stride == 0 || kernel == 0) throw ArgumentError("kernel and stride must be positive");
  if (in + 2 * padding < kernel) {
    throw ArgumentError("input of size " + std::to_string(in) + " is smaller than kernel " +
                        std::to_string(kernel));
  }
  return (in + 2 * padding - kernel) / stride + 1;
}

namespace {

std::shared_ptr<Node> make_node(Tensor value, std::vector<std::shared_ptr<Node>> inputs) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  for (const auto& in : inputs) n->requires_grad = n->requires_grad || (in && in->requires_grad);
  n->inputs = std::move(inputs);
  return n;
}

std::span<double> in_grad(Node& self, std::size_t i) {
  if (!self.inputs[i]) return {};
  Node& in = *self.inputs[i];
  if (!in.requires_grad) return {};
  return in.value.ensure_grad();
}

}  // namespace

namespace ad {

Var batch_norm(const Var& x, BatchNormLayer& layer, Mode mode) {
  if (x.value().rank() != 2) throw ArgumentError("batch_norm expects a matrix");
  const std::size_t n = x.rows(), f = x.cols();
  if (layer.features() != f) {
    throw ArgumentError("batch_norm: layer has " + std::to_string(layer.features()) +
                        " features, input has " + std::to_string(f));
  }
  if (mode == Mode::train && n < 2) {
    throw UsageError("batch_norm in train mode needs a batch of at least 2");
  }
  const Tensor& X = x.value();
  const Tensor& G = layer.gamma.value();
  const Tensor& B = layer.beta.value();
  std::vector<double> mean(f), inv_std(f);
  if (mode == Mode::train) {
    for (std::size_t j = 0; j < f; ++j) {
      double m = 0.0;
      for (std::size_t i = 0; i < n; ++i) m += X[i * f + j];
      m /= static_cast<double>(n);
      double var = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double d = X[i * f + j] - m;
        var += d * d;
      }
      var /= static_cast<double>(n);
      mean[j] = m;
      inv_std[j] = 1.0 / std::sqrt(var + layer.eps);
      const double unbiased = var * static_cast<double>(n) / static_cast<double>(n - 1);
      layer.running_mean[j] = (1.0 - layer.momentum) * layer.running_mean[j] + layer.momentum * m;
      layer.running_var[j] = (1.0 - layer.momentum) * layer.running_var[j] + layer.momentum * unbiased;
    }
  } else {
    for (std::size_t j = 0; j < f; ++j) {
      mean[j] = layer.running_mean[j];
      inv_std[j] = 1.0 / std::sqrt(layer.running_var[j] + layer.eps);
    }
  }
  Tensor xhat(Shape{n, f});
  Tensor out(Shape{n, f});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < f; ++j) {
      const double h = (X[i * f + j] - mean[j]) * inv_std[j];
      xhat[i * f + j] = h;
      out[i * f + j] = G[j] * h + B[j];
    }
  }
  auto node = make_node(std::move(out), {x.shared(), layer.gamma.shared(), layer.beta.shared()});
  const bool train = mode == Mode::train;
  node->backward = [n, f, train, inv_std = std::move(inv_std), xhat = std::move(xhat)](Node& self) {
    auto g = self.value.grad();
    const Tensor& Gm = self.inputs[1]->value;
    if (auto gg = in_grad(self, 1); !gg.empty())
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < f; ++j) gg[j] += g[i * f + j] * xhat[i * f + j];
    if (auto gb = in_grad(self, 2); !gb.empty())
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < f; ++j) gb[j] += g[i * f + j];
    if (auto gx = in_grad(self, 0); !gx.empty()) {
      for (std::size_t j = 0; j < f; ++j) {
        const double k = Gm[j] * inv_std[j];
        if (!train) {
          for (std::size_t i = 0; i < n; ++i) gx[i * f + j] += k * g[i * f + j];
          continue;
        }
        double sg = 0.0, sgx = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          sg += g[i * f + j];
          sgx += g[i * f + j] * xhat[i * f + j];
        }
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
          gx[i * f + j] += k * (g[i * f + j] - inv_n * sg - xhat[i * f + j] * inv_n * sgx);
        }
      }
    }
  };
  return Var(node);
}

Var attention(const Var& q, const Var& k, const Var& v, const Var& prefix_k, const Var& prefix_v,
              std::size_t batch, std::size_t tokens, std::size_t heads, AttentionMaps* maps) {
  const std::size_t d = q.cols();
  if (heads == 0 || d % heads != 0) throw ArgumentError("attention: heads must divide the width");
  if (q.rows() != batch * tokens || k.shape() != q.shape() || v.shape() != q.shape()) {
    throw ArgumentError("attention: q/k/v must all be (batch*tokens) x d");
  }
  if (prefix_k.defined() != prefix_v.defined()) {
    throw ArgumentError("attention: prefix keys and values must be given together");
  }
  std::size_t m = 0;
  if (prefix_k.defined()) {
    if (prefix_k.cols() != d || prefix_v.shape() != prefix_k.shape()) {
      throw ArgumentError("attention: prefix width " + std::to_string(prefix_k.cols()) +
                          " does not match model width " + std::to_string(d));
    }
    m = prefix_k.rows();
  }
  const std::size_t dk = d / heads;
  const std::size_t nk = m + tokens;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

  const Tensor& Q = q.value();
  const Tensor& K = k.value();
  const Tensor& V = v.value();
  const double* PK = m ? prefix_k.value().data() : nullptr;
  const double* PV = m ? prefix_v.value().data() : nullptr;

  // key/value row r of sequence b: prefix row r for r < m, token row r - m otherwise
  auto krow = [&](std::size_t b, std::size_t r) -> const double* {
    return r < m ? PK + r * d : K.data() + (b * tokens + r - m) * d;
  };
  auto vrow = [&](std::size_t b, std::size_t r) -> const double* {
    return r < m ? PV + r * d : V.data() + (b * tokens + r - m) * d;
  };

  std::vector<double> probs(batch * heads * tokens * nk);
  Tensor out(Shape{batch * tokens, d});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dk;
      for (std::size_t i = 0; i < tokens; ++i) {
        double* p = probs.data() + ((b * heads + h) * tokens + i) * nk;
        const double* qi = Q.data() + (b * tokens + i) * d + off;
        for (std::size_t r = 0; r < nk; ++r) {
          const double* kr = krow(b, r) + off;
          double s = 0.0;
          for (std::size_t c = 0; c < dk; ++c) s += qi[c] * kr[c];
          p[r] = s * scale;
        }
        softmax_inplace(std::span<double>(p, nk));
        double* o = out.data() + (b * tokens + i) * d + off;
        for (std::size_t r = 0; r < nk; ++r) {
          const double* vr = vrow(b, r) + off;
          for (std::size_t c = 0; c < dk; ++c) o[c] += p[r] * vr[c];
        }
      }
    }
  }
  if (maps) {
    maps->batch = batch;
    maps->heads = heads;
    maps->queries = tokens;
    maps->keys = nk;
    maps->weights = probs;
  }

  auto node = make_node(std::move(out), {q.shared(), k.shared(), v.shared(),
                                         m ? prefix_k.shared() : nullptr,
                                         m ? prefix_v.shared() : nullptr});
  node->backward = [batch, tokens, heads, d, dk, m, nk, scale,
                    probs = std::move(probs)](Node& self) {
    auto g = self.value.grad();
    const Tensor& Q = self.inputs[0]->value;
    const Tensor& K = self.inputs[1]->value;
    const Tensor& V = self.inputs[2]->value;
    const double* PK = m ? self.inputs[3]->value.data() : nullptr;
    const double* PV = m ? self.inputs[4]->value.data() : nullptr;
    auto gq = in_grad(self, 0);
    auto gk = in_grad(self, 1);
    auto gv = in_grad(self, 2);
    std::span<double> gpk = m ? in_grad(self, 3) : std::span<double>{};
    std::span<double> gpv = m ? in_grad(self, 4) : std::span<double>{};
    std::vector<double> dp(nk);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * dk;
        for (std::size_t i = 0; i < tokens; ++i) {
          const double* p = probs.data() + ((b * heads + h) * tokens + i) * nk;
          const double* go = g.data() + (b * tokens + i) * d + off;
          const double* qi = Q.data() + (b * tokens + i) * d + off;
          double dot_pg = 0.0;
          for (std::size_t r = 0; r < nk; ++r) {
            const double* vr = (r < m ? PV + r * d : V.data() + (b * tokens + r - m) * d) + off;
            double s = 0.0;
            for (std::size_t c = 0; c < dk; ++c) s += go[c] * vr[c];
            dp[r] = s;
            dot_pg += s * p[r];
            // dV_r += p_r * dO_i
            double* gvr = nullptr;
            if (r < m) {
              if (!gpv.empty()) gvr = gpv.data() + r * d + off;
            } else if (!gv.empty()) {
              gvr = gv.data() + (b * tokens + r - m) * d + off;
            }
            if (gvr)
              for (std::size_t c = 0; c < dk; ++c) gvr[c] += p[r] * go[c];
          }
          for (std::size_t r = 0; r < nk; ++r) {
            const double ds = p[r] * (dp[r] - dot_pg) * scale;
            if (ds == 0.0) continue;
            const double* kr = (r < m ? PK + r * d : K.data() + (b * tokens + r - m) * d) + off;
            if (!gq.empty()) {
              double* gqi = gq.data() + (b * tokens + i) * d + off;
              for (std::size_t c = 0; c < dk; ++c) gqi[c] += ds * kr[c];
            }
            double* gkr = nullptr;
            if (r < m) {
              if (!gpk.empty()) gkr = gpk.data() + r * d + off;
            } else if (!gk.empty()) {
              gkr = gk.data() + (b * tokens + r - m) * d + off;
            }
            if (gkr)
              for (std::size_t c = 0; c < dk; ++c) gkr[c] += ds * qi[c];
          }
        }
      }
    }
  };
  return Var(node);
}

Var sequence_pool(const Var& x, const Var& w, std::size_t batch, std::size_t tokens) {
  if (tokens == 0) throw ArgumentError("sequence_pool over an empty sequence");
  const std::size_t d = x.cols();
  if (x.rows() != batch * tokens) throw ArgumentError("sequence_pool: rows != batch*tokens");
  if (w.size() != d) throw ArgumentError("sequence_pool: score weights must have length d");
  const Tensor& X = x.value();
  const Tensor& W = w.value();
  std::vector<double> a(batch * tokens);
  Tensor out(Shape{batch, d});
  for (std::size_t b = 0; b < batch; ++b) {
    double* ab = a.data() + b * tokens;
    for (std::size_t t = 0; t < tokens; ++t) {
      const double* xr = X.data() + (b * tokens + t) * d;
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += xr[c] * W[c];
      ab[t] = s;
    }
    softmax_inplace(std::span<double>(ab, tokens));
    double* o = out.data() + b * d;
    for (std::size_t t = 0; t < tokens; ++t) {
      const double* xr = X.data() + (b * tokens + t) * d;
      for (std::size_t c = 0; c < d; ++c) o[c] += ab[t] * xr[c];
    }
  }
  auto node = make_node(std::move(out), {x.shared(), w.shared()});
  node->backward = [batch, tokens, d, a = std::move(a)](Node& self) {
    auto g = self.value.grad();
    const Tensor& X = self.inputs[0]->value;
    const Tensor& W = self.inputs[1]->value;
    auto gx = in_grad(self, 0);
    auto gw = in_grad(self, 1);
    std::vector<double> da(tokens);
    for (std::size_t b = 0; b < batch; ++b) {
      const double* gb = g.data() + b * d;
      const double* ab = a.data() + b * tokens;
      double s = 0.0;
      for (std::size_t t = 0; t < tokens; ++t) {
        const double* xr = X.data() + (b * tokens + t) * d;
        double v = 0.0;
        for (std::size_t c = 0; c < d; ++c) v += gb[c] * xr[c];
        da[t] = v;
        s += v * ab[t];
      }
      for (std::size_t t = 0; t < tokens; ++t) {
        const double ds = ab[t] * (da[t] - s);
        const double* xr = X.data() + (b * tokens + t) * d;
        if (!gx.empty()) {
          double* gxr = gx.data() + (b * tokens + t) * d;
          for (std::size_t c = 0; c < d; ++c) gxr[c] += ab[t] * gb[c] + ds * W[c];
        }
        if (!gw.empty())
          for (std::size_t c = 0; c < d; ++c) gw[c] += ds * xr[c];
      }
    }
  };
  return Var(node);
}

Var conv2d(const Var& x, const Var& weight, std::size_t batch, std::size_t height,
           std::size_t width, const Geometry& geo) {
  const std::size_t cin = x.cols();
  if (x.rows() != batch * height * width) throw ArgumentError("conv2d: rows != batch*height*width");
  const std::size_t patch = geo.kernel * geo.kernel * cin;
  if (weight.rows() != patch) {
    throw ArgumentError("conv2d: weight has " + std::to_string(weight.rows()) +
                        " rows, expected kernel*kernel*channels = " + std::to_string(patch));
  }
  const std::size_t cout = weight.cols();
  const std::size_t oh = geo.output_size(height), ow = geo.output_size(width);
  const std::size_t rows = batch * oh * ow;

  // im2col: -1 marks a padded position
  std::vector<long> src(rows * geo.kernel * geo.kernel, -1);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const std::size_t r = (b * oh + oy) * ow + ox;
        for (std::size_t ky = 0; ky < geo.kernel; ++ky)
          for (std::size_t kx = 0; kx < geo.kernel; ++kx) {
            const long iy = static_cast<long>(oy * geo.stride + ky) - static_cast<long>(geo.padding);
            const long ix = static_cast<long>(ox * geo.stride + kx) - static_cast<long>(geo.padding);
            if (iy < 0 || ix < 0 || iy >= static_cast<long>(height) || ix >= static_cast<long>(width))
              continue;
            src[r * geo.kernel * geo.kernel + ky * geo.kernel + kx] =
                static_cast<long>((b * height + iy) * width + ix);
          }
      }
  const std::size_t kk = geo.kernel * geo.kernel;
  const Tensor& X = x.value();
  const Tensor& Wt = weight.value();
  Tensor out(Shape{rows, cout});
  for (std::size_t r = 0; r < rows; ++r) {
    double* o = out.data() + r * cout;
    for (std::size_t p = 0; p < kk; ++p) {
      const long s = src[r * kk + p];
      if (s < 0) continue;
      const double* xr = X.data() + static_cast<std::size_t>(s) * cin;
      for (std::size_t c = 0; c < cin; ++c) {
        const double xv = xr[c];
        const double* wr = Wt.data() + (p * cin + c) * cout;
        for (std::size_t o2 = 0; o2 < cout; ++o2) o[o2] += xv * wr[o2];
      }
    }
  }
  auto node = make_node(std::move(out), {x.shared(), weight.shared()});
  node->backward = [rows, kk, cin, cout, src = std::move(src)](Node& self) {
    auto g = self.value.grad();
    const Tensor& X = self.inputs[0]->value;
    const Tensor& Wt = self.inputs[1]->value;
    auto gx = in_grad(self, 0);
    auto gw = in_grad(self, 1);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* gr = g.data() + r * cout;
      for (std::size_t p = 0; p < kk; ++p) {
        const long s = src[r * kk + p];
        if (s < 0) continue;
        const std::size_t su = static_cast<std::size_t>(s);
        for (std::size_t c = 0; c < cin; ++c) {
          const double* wr = Wt.data() + (p * cin + c) * cout;
          if (!gx.empty()) {
            double acc = 0.0;
            for (std::size_t o = 0; o < cout; ++o) acc += gr[o] * wr[o];
            gx[su * cin + c] += acc;
          }
          if (!gw.empty()) {
            const double xv = X[su * cin + c];
            double* gwr = gw.data() + (p * cin + c) * cout;
            for (std::size_t o = 0; o < cout; ++o) gwr[o] += xv * gr[o];
          }
        }
      }
    }
  };
  return Var(node);
}

Var max_pool(const Var& x, std::size_t batch, std::size_t height, std::size_t width,
             const Geometry& geo) {
  const std::size_t c = x.cols();
  if (x.rows() != batch * height * width) throw ArgumentError("max_pool: rows != batch*height*width");
  const std::size_t oh = geo.output_size(height), ow = geo.output_size(width);
  const std::size_t rows = batch * oh * ow;
  Tensor out(Shape{rows, c});
  std::vector<std::size_t> arg(rows * c);
  const Tensor& X = x.value();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const std::size_t r = (b * oh + oy) * ow + ox;
        for (std::size_t ch = 0; ch < c; ++ch) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t best_i = 0;
          bool found = false;
          for (std::size_t ky = 0; ky < geo.kernel; ++ky)
            for (std::size_t kx = 0; kx < geo.kernel; ++kx) {
              const long iy = static_cast<long>(oy * geo.stride + ky) - static_cast<long>(geo.padding);
              const long ix = static_cast<long>(ox * geo.stride + kx) - static_cast<long>(geo.padding);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(height) || ix >= static_cast<long>(width))
                continue;
              const std::size_t s = (b * height + static_cast<std::size_t>(iy)) * width +
                                    static_cast<std::size_t>(ix);
              const double v = X[s * c + ch];
              if (!found || v > best) {
                best = v;
                best_i = s;
                found = true;
              }
            }
          if (!found) throw ArgumentError("max_pool window covers only padding");
          out[r * c + ch] = best;
          arg[r * c + ch] = best_i;
        }
      }
  auto node = make_node(std::move(out), {x.shared()});
  node->backward = [rows, c, arg = std::move(arg)](Node& self) {
    auto g = self.value.grad();
    if (auto gx = in_grad(self, 0); !gx.empty())
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t ch = 0; ch < c; ++ch) gx[arg[r * c + ch] * c + ch] += g[r * c + ch];
  };
  return Var(node);
}

}  // namespace ad
}  // namespace fscil
