#include "fscil/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

#include "fscil/autodiff.hpp"
#include "fscil/errors.hpp"
#include "fscil/rng.hpp"

namespace fscil {

Dataset Dataset::subset(std::span<const std::size_t> index) const {
  Dataset out;
  out.classes = classes;
  out.image_size = image_size;
  out.channels = channels;
  if (index.empty()) return out;
  const std::size_t c = pixels();
  std::vector<double> v;
  v.reserve(index.size() * c);
  for (std::size_t i : index) {
    if (i >= size()) throw ArgumentError("dataset index " + std::to_string(i) + " out of range");
    auto r = features.row(i);
    v.insert(v.end(), r.begin(), r.end());
    out.labels.push_back(labels[i]);
  }
  out.features = Tensor(Shape{index.size(), c}, std::move(v));
  return out;
}

std::uint64_t Dataset::hash() const {
  std::uint64_t h = features.empty() ? 1469598103934665603ULL : hash_tensor(features);
  for (std::size_t l : labels) {
    h ^= l;
    h *= 1099511628211ULL;
  }
  return h;
}

namespace {

std::size_t square_side(std::size_t dim) {
  const auto s = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(dim))));
  if (s * s != dim) throw ArgumentError("blob dimension " + std::to_string(dim) + " is not a perfect square");
  return s;
}

Dataset draw(const Tensor& means, std::size_t per_class, double std, std::size_t side,
             SeededRng& rng) {
  const std::size_t k = means.rows(), d = means.cols();
  Dataset ds;
  ds.classes = k;
  ds.image_size = side;
  ds.channels = 1;
  if (per_class == 0) return ds;
  Tensor x(Shape{k * per_class, d});
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t i = 0; i < per_class; ++i) {
      const std::size_t r = c * per_class + i;
      for (std::size_t j = 0; j < d; ++j) x.at(r, j) = means.at(c, j) + std * rng.normal();
      ds.labels.push_back(c);
    }
  }
  ds.features = std::move(x);
  return ds;
}

}  // namespace

double bayes_accuracy_estimate(const Tensor& means, double std, std::size_t samples_per_class,
                               std::uint64_t seed) {
  SeededRng rng(seed, 0xBA7E5);
  const std::size_t k = means.rows(), d = means.cols();
  std::size_t correct = 0;
  std::vector<double> x(d);
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t i = 0; i < samples_per_class; ++i) {
      for (std::size_t j = 0; j < d; ++j) x[j] = means.at(c, j) + std * rng.normal();
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t m = 0; m < k; ++m) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += (x[j] - means.at(m, j)) * (x[j] - means.at(m, j));
        if (s < best_d) {
          best_d = s;
          best = m;
        }
      }
      correct += best == c;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(k * samples_per_class);
}

Blobs generate_blobs(const BlobSpec& spec) {
  if (!(spec.separation > 0.0)) throw ArgumentError("blob separation must be positive");
  if (!(spec.std > 0.0)) throw ArgumentError("blob std must be positive");
  if (spec.classes == 0) throw ArgumentError("need at least one blob class");
  const std::size_t side = square_side(spec.dim);
  SeededRng rng(spec.seed, 0xB10B);
  const double min_dist = spec.separation * spec.std;
  // Typical distance between two N(0, a^2 I) draws is a*sqrt(2 dim).
  double spread = 1.3 * min_dist / std::sqrt(2.0 * static_cast<double>(spec.dim));
  Tensor means(Shape{spec.classes, spec.dim});
  for (std::size_t c = 0; c < spec.classes; ++c) {
    for (std::size_t attempt = 0;; ++attempt) {
      if (attempt > 0 && attempt % 200 == 0) spread *= 1.1;
      for (std::size_t j = 0; j < spec.dim; ++j) means.at(c, j) = spread * rng.normal();
      bool ok = true;
      for (std::size_t m = 0; m < c && ok; ++m) {
        double s = 0.0;
        for (std::size_t j = 0; j < spec.dim; ++j) {
          const double t = means.at(c, j) - means.at(m, j);
          s += t * t;
        }
        ok = std::sqrt(s) >= min_dist;
      }
      if (ok) break;
    }
  }
  SeededRng train_rng = rng.split(1), test_rng = rng.split(2);
  Blobs b{draw(means, spec.train_per_class, spec.std, side, train_rng),
          draw(means, spec.test_per_class, spec.std, side, test_rng), means, 0.0};
  b.bayes_accuracy = bayes_accuracy_estimate(means, spec.std, 2000, spec.seed);
  return b;
}

// ---- IDX ------------------------------------------------------------------

namespace {

std::size_t element_size(IdxType t) { return t == IdxType::u8 ? 1 : 8; }

}  // namespace

IdxArray parse_idx(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw FormatError("IDX header truncated", bytes.size());
  if (bytes[0] != 0 || bytes[1] != 0) throw FormatError("bad IDX magic", 0);
  IdxArray a;
  if (bytes[2] == 0x08) {
    a.type = IdxType::u8;
  } else if (bytes[2] == 0x0E) {
    a.type = IdxType::f64;
  } else {
    throw FormatError("unsupported IDX element type " + std::to_string(bytes[2]), 2);
  }
  const std::size_t rank = bytes[3];
  if (rank == 0) throw FormatError("IDX rank must be positive", 3);
  std::size_t off = 4;
  std::size_t count = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    if (off + 4 > bytes.size()) throw FormatError("IDX dimension table truncated", bytes.size());
    const std::uint32_t d = (std::uint32_t{bytes[off]} << 24) | (std::uint32_t{bytes[off + 1]} << 16) |
                            (std::uint32_t{bytes[off + 2]} << 8) | std::uint32_t{bytes[off + 3]};
    a.dims.push_back(d);
    count *= d;
    off += 4;
  }
  const std::size_t es = element_size(a.type);
  if (bytes.size() < off + count * es) {
    // Offset of the first element that is not fully present.
    const std::size_t complete = (bytes.size() - off) / es;
    throw FormatError("IDX payload truncated: expected " + std::to_string(count) + " elements, found " +
                          std::to_string(complete),
                      off + complete * es);
  }
  a.values.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    if (a.type == IdxType::u8) {
      a.values[i] = bytes[off + i];
    } else {
      std::uint64_t u = 0;
      for (std::size_t b = 0; b < 8; ++b) u = (u << 8) | bytes[off + i * 8 + b];
      a.values[i] = std::bit_cast<double>(u);
    }
  }
  return a;
}

std::vector<std::uint8_t> serialize_idx(const IdxArray& a) {
  if (a.dims.empty() || a.dims.size() > 255) throw ArgumentError("IDX rank must be 1..255");
  std::size_t count = 1;
  for (auto d : a.dims) count *= d;
  if (count != a.values.size()) throw ArgumentError("IDX dims do not match the value count");
  std::vector<std::uint8_t> out{0, 0, static_cast<std::uint8_t>(a.type),
                                static_cast<std::uint8_t>(a.dims.size())};
  for (auto d : a.dims) {
    for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(d >> s));
  }
  for (double v : a.values) {
    if (a.type == IdxType::u8) {
      if (v < 0.0 || v > 255.0 || v != std::floor(v)) throw ArgumentError("IDX byte value out of range");
      out.push_back(static_cast<std::uint8_t>(v));
    } else {
      const auto u = std::bit_cast<std::uint64_t>(v);
      for (int s = 56; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(u >> s));
    }
  }
  return out;
}

IdxArray read_idx(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArgumentError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_idx(bytes);
}

void write_idx(const std::filesystem::path& path, const IdxArray& array) {
  const auto bytes = serialize_idx(array);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ArgumentError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Dataset load_idx_images(const std::filesystem::path& images, const std::filesystem::path& labels) {
  IdxArray img = read_idx(images);
  IdxArray lab = read_idx(labels);
  if (img.dims.size() != 3 && img.dims.size() != 4) {
    throw FormatError("image file must have rank 3 or 4 (magic 0x00000803)", 3);
  }
  if (lab.dims.size() != 1) throw FormatError("label file must have rank 1 (magic 0x00000801)", 3);
  if (lab.type != IdxType::u8) throw FormatError("labels must be unsigned bytes", 2);
  if (img.dims[1] != img.dims[2]) throw ArgumentError("only square images are supported");
  if (img.dims[0] != lab.dims[0]) {
    throw ArgumentError("image count " + std::to_string(img.dims[0]) + " differs from label count " +
                        std::to_string(lab.dims[0]));
  }
  Dataset ds;
  ds.image_size = img.dims[1];
  ds.channels = img.dims.size() == 4 ? img.dims[3] : 1;
  const std::size_t n = img.dims[0];
  for (double l : lab.values) {
    ds.labels.push_back(static_cast<std::size_t>(l));
    ds.classes = std::max(ds.classes, static_cast<std::size_t>(l) + 1);
  }
  if (n == 0) return ds;
  if (img.type == IdxType::u8) {
    for (double& v : img.values) v /= 255.0;
  }
  ds.features = Tensor(Shape{n, ds.pixels()}, std::move(img.values));
  return ds;
}

void save_idx_images(const Dataset& data, const std::filesystem::path& images,
                     const std::filesystem::path& labels) {
  IdxArray img;
  img.type = IdxType::f64;
  img.dims = {static_cast<std::uint32_t>(data.size()), static_cast<std::uint32_t>(data.image_size),
              static_cast<std::uint32_t>(data.image_size)};
  if (data.channels != 1) img.dims.push_back(static_cast<std::uint32_t>(data.channels));
  if (data.size() > 0) img.values = data.features.storage();
  IdxArray lab;
  lab.type = IdxType::u8;
  lab.dims = {static_cast<std::uint32_t>(data.size())};
  for (std::size_t l : data.labels) lab.values.push_back(static_cast<double>(l));
  write_idx(images, img);
  write_idx(labels, lab);
}

// ---- splits ---------------------------------------------------------------

std::vector<SessionSpec> build_fscil_splits(const DatasetMeta& meta, std::size_t base_classes,
                                            std::size_t ways, std::size_t shots,
                                            std::uint64_t seed, std::size_t sessions) {
  if (base_classes == 0) throw ArgumentError("base session needs at least one class");
  if (ways == 0 || shots == 0) throw ArgumentError("ways and shots must be positive");
  if (base_classes > meta.classes) throw ArgumentError("more base classes than classes in the dataset");
  if (sessions == 0) sessions = (meta.classes - base_classes) / ways;
  if (base_classes + ways * sessions > meta.classes) {
    throw ArgumentError("infeasible split: " + std::to_string(base_classes) + " base + " +
                        std::to_string(sessions) + " x " + std::to_string(ways) + "-way exceeds " +
                        std::to_string(meta.classes) + " classes");
  }
  std::vector<std::vector<std::size_t>> train_by(meta.classes), test_by(meta.classes);
  for (std::size_t i = 0; i < meta.train_labels.size(); ++i) {
    if (meta.train_labels[i] >= meta.classes) throw ArgumentError("train label out of range");
    train_by[meta.train_labels[i]].push_back(i);
  }
  for (std::size_t i = 0; i < meta.test_labels.size(); ++i) {
    if (meta.test_labels[i] >= meta.classes) throw ArgumentError("test label out of range");
    test_by[meta.test_labels[i]].push_back(i);
  }
  SeededRng rng(seed, 0x5E55);
  std::vector<SessionSpec> out;
  std::vector<std::size_t> pool;
  auto add_test = [&](std::size_t c) { pool.insert(pool.end(), test_by[c].begin(), test_by[c].end()); };

  SessionSpec base;
  base.index = 0;
  base.ways = base_classes;
  for (std::size_t c = 0; c < base_classes; ++c) {
    if (train_by[c].empty()) throw ArgumentError("base class " + std::to_string(c) + " has no samples");
    base.classes.push_back(c);
    base.train.insert(base.train.end(), train_by[c].begin(), train_by[c].end());
    add_test(c);
  }
  std::sort(pool.begin(), pool.end());
  base.test = pool;
  out.push_back(std::move(base));

  for (std::size_t s = 1; s <= sessions; ++s) {
    SessionSpec spec;
    spec.index = s;
    spec.ways = ways;
    spec.shots = shots;
    for (std::size_t w = 0; w < ways; ++w) {
      const std::size_t c = base_classes + (s - 1) * ways + w;
      auto cand = train_by[c];
      if (cand.size() < shots) {
        throw ArgumentError("class " + std::to_string(c) + " has " + std::to_string(cand.size()) +
                            " samples, fewer than " + std::to_string(shots) + " shots");
      }
      rng.shuffle(std::span<std::size_t>(cand));
      cand.resize(shots);
      std::sort(cand.begin(), cand.end());
      spec.classes.push_back(c);
      spec.train.insert(spec.train.end(), cand.begin(), cand.end());
      add_test(c);
    }
    std::sort(pool.begin(), pool.end());
    spec.test = pool;
    out.push_back(std::move(spec));
  }
  return out;
}

SessionDataStream::SessionDataStream(const Dataset& train, const std::vector<SessionSpec>& specs) {
  for (const auto& s : specs) pending_.emplace_back(train.subset(s.train));
}

SessionView SessionDataStream::acquire(std::size_t session) {
  if (session >= pending_.size()) {
    throw ArgumentError("session " + std::to_string(session) + " does not exist");
  }
  if (session < next_) {
    throw ContractViolation("training data of session " + std::to_string(session) +
                            " was discarded after the session ended");
  }
  if (session > next_) {
    throw ContractViolation("session " + std::to_string(session) + " requested before session " +
                            std::to_string(next_));
  }
  SessionView view(session, std::move(*pending_[session]));
  pending_[session].reset();
  next_ = session + 1;
  return view;
}

}  // namespace fscil

namespace fscil {

std::vector<std::vector<std::size_t>> minibatches(std::size_t n, std::size_t batch_size,
                                                  SeededRng& rng) {
  if (batch_size == 0) throw ArgumentError("batch size must be positive");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(std::span<std::size_t>(order));
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t b = 0; b < n; b += batch_size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, b + batch_size)));
  }
  if (out.size() > 1 && out.back().size() == 1) {
    out[out.size() - 2].push_back(out.back()[0]);
    out.pop_back();
  }
  return out;
}

}  // namespace fscil
