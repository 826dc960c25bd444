// One PASS/FAIL line per acceptance criterion; nonzero exit if any fails.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "fscil/backbone.hpp"
#include "fscil/base_trainer.hpp"
#include "fscil/data.hpp"
#include "fscil/delta_params.hpp"
#include "fscil/errors.hpp"
#include "fscil/grad_check.hpp"
#include "fscil/metrics.hpp"
#include "fscil/ops.hpp"
#include "fscil/protocol.hpp"
#include "fscil/rectification.hpp"
#include "fscil/stochastic_head.hpp"
#include "fscil/task_inference.hpp"
#include "metric_oracle.hpp"
#include "planted_bias.hpp"
#include "routing_oracle.hpp"
#include "split_fixtures.hpp"
#include "support.hpp"

using namespace fscil;
using namespace fscil::testing;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

Var weighted(const Var& y) {
  Tensor r(y.shape());
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = std::sin(0.5 + 0.9 * static_cast<double>(i));
  return ad::sum(ad::mul_const(y, r));
}

// Restores every running statistic before each loss evaluation so train-mode
// norms see the same state at every perturbation.
std::function<Var()> with_buffers_reset(EncoderState& s, std::function<Var()> loss) {
  auto bufs = s.buffers();
  std::vector<Tensor> saved;
  for (auto& [name, t] : bufs) saved.push_back(*t);
  return [bufs, saved, loss]() {
    for (std::size_t i = 0; i < bufs.size(); ++i) *bufs[i].second = saved[i];
    return loss();
  };
}

// ---------------------------------------------------------------------------

void gradient_integrity(Outcome& o) {
  const auto t0 = Clock::now();
  SeededRng rng(101);
  std::vector<std::pair<std::string, double>> worst;
  auto record = [&](const std::string& name, const GradReport& r) {
    worst.emplace_back(name, r.max_rel_error);
    o.require(r.max_rel_error <= 1e-4, name);
  };

  for (std::size_t heads : {1u, 2u}) {
    BackboneConfig cfg = tiny_backbone();
    cfg.heads = heads;
    auto s = EncoderState::create(cfg, rng);
    const Tensor x = random_tensor(Shape{3 * cfg.tokens(), cfg.embed_dim}, rng);
    auto& b = s.blocks[0];
    record("mhsa input", grad_check([&](const Var& v) { return weighted(mhsa_forward(v, b, 3, cfg.tokens(), heads)); }, x));
    const std::vector<Var> proj{b.query, b.key, b.value, b.out};
    const Var xv = constant(x);
    record("mhsa weights", grad_check([&]() { return weighted(mhsa_forward(xv, b, 3, cfg.tokens(), heads)); }, proj));
  }

  for (NormPlacement p : {NormPlacement::between, NormPlacement::before}) {
    auto s = EncoderState::create(tiny_backbone(p), rng);
    auto& b = s.blocks[0];
    const Tensor x = random_tensor(Shape{8, 4}, rng);
    const std::string tag = "ffn " + to_string(p);
    record(tag + " input", grad_check([&](const Var& v) { return weighted(ffn_forward(v, b, p, Mode::train)); }, x));
    const Var xv = constant(x);
    const std::vector<Var> wrt{b.ffn_in, b.ffn_out, b.ffn_norm.gamma, b.ffn_norm.beta};
    record(tag + " weights",
           grad_check(with_buffers_reset(s, [&]() { return weighted(ffn_forward(xv, b, p, Mode::train)); }), wrt));
    const Tensor img = random_tensor(Shape{8, 16}, rng);
    record("encoder " + to_string(p),
           grad_check(with_buffers_reset(s, [&]() { return weighted(encoder_forward(s, img)); }), s.parameters()));
  }

  {
    const Tensor x = random_tensor(Shape{12, 5}, rng);
    const Var w = parameter(random_tensor(Shape{5, 1}, rng));
    record("sequence pool input", grad_check([&](const Var& v) { return weighted(ad::sequence_pool(v, w, 3, 4)); }, x));
    const Var xv = constant(x);
    record("sequence pool score", grad_check([&]() { return weighted(ad::sequence_pool(xv, w, 3, 4)); }, std::vector<Var>{w}));
  }

  {
    StochasticHead h(4, 16.0);
    h.init_means_from_prototypes(random_tensor(Shape{3, 4}, rng));
    h.init_means_from_prototypes(random_tensor(Shape{2, 4}, rng));
    for (std::size_t blk = 0; blk < 2; ++blk)
      for (double& v : h.block(blk).spread.mutable_value().values()) v = 4.0 + rng.normal();
    const std::vector<Tensor> eps{random_tensor(Shape{3, 4}, rng), random_tensor(Shape{2, 4}, rng)};
    const Tensor z = random_tensor(Shape{6, 4}, rng);
    const std::vector<std::size_t> y{0, 4, 2, 1, 3, 0};
    const Var zv = constant(z);
    record("stochastic head", grad_check([&]() { return ad::cross_entropy(h.logits_with_noise(zv, eps, h.all()), y); },
                                         h.parameters(h.all())));
    record("stochastic head input",
           grad_check([&](const Var& v) { return ad::cross_entropy(h.logits_with_noise(v, eps, h.all()), y); }, z));
  }

  {
    BackboneConfig cfg = tiny_backbone();
    auto s = EncoderState::create(cfg, rng);
    s.set_trainable(false);
    PrefixSet p = PrefixSet::create(1, 4, cfg.embed_dim, 0.5, rng);
    const Tensor x = random_tensor(Shape{2 * cfg.tokens(), cfg.embed_dim}, rng);
    const Var xv = constant(x);
    record("prefix attention", grad_check([&]() {
             return weighted(prefix_mhsa(xv, s.blocks[0], 2, cfg.tokens(), cfg.heads, p.layers[0]));
           }, p.parameters()));
    s.mode = Mode::eval;
    const Tensor img = random_tensor(Shape{3, 16}, rng);
    record("prefixed encoder", grad_check([&]() { return weighted(encoder_forward(s, img, &p.layers)); }, p.parameters()));
  }

  {
    const ProjectionHead head = ProjectionHead::create(4, 6, 5, rng);
    const Var zv = constant(random_tensor(Shape{3, 4}, rng, 3.0));
    std::vector<Var> wrt;
    for (auto& [name, v] : head.named_parameters()) wrt.push_back(v);
    record("projection head", grad_check([&]() { return weighted(head.forward(zv)); }, wrt));
  }

  for (bool linear : {false, true}) {
    PredictionNet net = PredictionNet::create(5, linear, rng);
    const Tensor x = random_tensor(Shape{4, 5}, rng), y = random_tensor(Shape{4, 5}, rng);
    record(linear ? "prediction net linear" : "prediction net",
           grad_check([&]() { return ad::mse(net.forward(constant(x)), y); }, net.parameters()));
  }

  double max_err = 0;
  for (auto& [n, e] : worst) max_err = std::max(max_err, e);
  const double secs = seconds_since(t0);
  o.require(secs < 120.0, "runtime");
  o.detail << worst.size() << " checks, max relative error " << max_err << ", " << secs << " s";
}

void prefix_equivalence(Outcome& o) {
  SeededRng rng(202);
  std::size_t cases = 0, mismatches = 0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t heads = 1 + rng.index(3);
    const std::size_t dim = heads * (1 + rng.index(3));
    const std::size_t tokens = 1 + rng.index(6), batch = 1 + rng.index(3);
    BackboneConfig cfg = tiny_backbone();
    cfg.embed_dim = dim;
    cfg.heads = heads;
    auto s = EncoderState::create(cfg, rng);
    const Var x = constant(random_tensor(Shape{batch * tokens, dim}, rng));
    const LayerPrefix none;
    const PrefixSet empty = PrefixSet::create(1, 0, dim, 0.1, rng);
    const auto plain = mhsa_forward(x, s.blocks[0], batch, tokens, heads).value().storage();
    mismatches += prefix_mhsa(x, s.blocks[0], batch, tokens, heads, none).value().storage() != plain;
    mismatches += prefix_mhsa(x, s.blocks[0], batch, tokens, heads, empty.layers[0]).value().storage() != plain;
    ++cases;
  }
  for (int t = 0; t < 50; ++t) {
    BackboneConfig cfg = tiny_backbone(t % 2 ? NormPlacement::before : NormPlacement::between);
    cfg.layers = 2;
    auto s = EncoderState::create(cfg, rng);
    s.mode = Mode::eval;
    const PrefixSet empty = PrefixSet::create(2, 0, cfg.embed_dim, 0.1, rng);
    const Tensor img = random_tensor(Shape{3, 16}, rng);
    mismatches += encoder_forward(s, img, &empty.layers).value().storage() != encoder_forward(s, img).value().storage();
  }
  o.require(mismatches == 0, "bitwise equality");
  o.detail << cases << " attention cases + 50 encoder cases, " << mismatches << " mismatches";
}

void routing_oracle(Outcome& o) {
  SeededRng rng(303);
  std::size_t agree = 0, euclid = 0;
  const int n = 1000;
  for (int t = 0; t < n; ++t) {
    const std::size_t classes = 1 + rng.index(10), d = 1 + rng.index(8);
    const auto g = random_gaussians(classes, d, rng);
    const Tensor a = random_spd(d, rng);
    const auto h = random_vector(d, rng, 2.0);
    agree += select_class(h, g, a, Metric::mahalanobis).index == brute_force_route(h, g, a);
    euclid += select_class(h, g, Tensor(), Metric::euclidean).index == select_class(h, g, eye(d), Metric::mahalanobis).index;
  }
  o.require(agree == n, "Mahalanobis agreement");
  o.require(euclid == n, "Euclidean equals identity covariance");
  o.detail << "Mahalanobis " << agree << "/" << n << ", Euclidean vs identity " << euclid << "/" << n;
}

void rectification_algebra(Outcome& o) {
  SeededRng rng(404);
  double worst = 0;
  for (int t = 0; t < 1000; ++t) {
    PredictionNet net = PredictionNet::create(6, t % 2 == 1, rng);
    const auto mu = random_vector(6, rng, 3.0);
    const auto p = net.apply(mu);
    const auto r = rectify_prototype(net, mu);
    for (std::size_t j = 0; j < 6; ++j) worst = std::max(worst, std::abs(r[j] - (p[j] + mu[j]) / 2));
  }
  o.require(worst <= 1e-12, "midpoint");
  bool fixed = true;
  for (int t = 0; t < 100; ++t) {
    const auto mu = random_vector(6, rng, 3.0);
    fixed &= rectify_prototype(PredictionNet::identity(6), mu) == mu;
  }
  o.require(fixed, "identity fixed point");
  int improved = 0;
  for (std::uint64_t s = 0; s < 500; ++s) improved += planted_bias_trial(s, 3, 4, 5, 30, 3000).improved();
  o.require(improved >= 400, "planted bias");
  o.detail << "midpoint error " << worst << ", identity fixed point " << (fixed ? "exact" : "broken")
           << ", planted bias reduced in " << improved << "/500 trials";
}

void distillation_mechanics(Outcome& o) {
  SeededRng rng(505);
  BackboneConfig cfg = tiny_backbone();
  auto net = [&](std::size_t proj) {
    return DinoNetwork{EncoderState::create(cfg, rng), ProjectionHead::create(cfg.embed_dim, 6, proj, rng)};
  };

  double entropy_gap = 0;
  for (int t = 0; t < 20; ++t) {
    DinoNetwork student = net(5);
    student.encoder.mode = Mode::train;
    TeacherState teacher;
    teacher.net = student.clone();
    teacher.center = Tensor(Shape{5}, 0.0);
    const Tensor x = random_tensor(Shape{4, 16}, rng);
    const std::size_t views = 2 + rng.index(5);
    CropSet crops;
    crops.global = 2;
    for (std::size_t v = 0; v < views; ++v) crops.views.push_back(x);
    const double temp = 0.1 + rng.uniform();
    const DinoLoss l = dino_loss(student, teacher, crops, temp, temp);
    teacher.net.encoder.mode = Mode::train;
    const Tensor out = teacher.net.forward(x).value();
    double h = 0;
    for (std::size_t r = 0; r < out.rows(); ++r) {
      std::vector<double> p(out.row(r).begin(), out.row(r).end());
      for (double& v : p) v /= temp;
      softmax_inplace(p);
      for (double q : p) h -= q * std::log(q);
    }
    h /= static_cast<double>(out.rows());
    entropy_gap = std::max(entropy_gap, std::abs(l.loss.value()[0] - static_cast<double>(l.terms) * h));
    o.require(l.terms == 2 * (views - 1), "pair count in loss");
  }
  o.require(entropy_gap <= 1e-9, "entropy identity");

  bool pairs_ok = true;
  for (std::size_t v = 2; v <= 12; ++v) pairs_ok &= dino_pairs(2, v).size() == 2 * (v - 1);
  o.require(pairs_ok, "pair count");

  auto dist = [](const DinoNetwork& a, const DinoNetwork& b) {
    double s = 0;
    const auto pa = a.named_parameters(), pb = b.named_parameters();
    for (std::size_t i = 0; i < pa.size(); ++i)
      for (std::size_t j = 0; j < pa[i].second.size(); ++j) {
        const double d = pa[i].second.value()[j] - pb[i].second.value()[j];
        s += d * d;
      }
    return std::sqrt(s);
  };
  double ema_gap = 0;
  for (double m : {0.9, 0.99, 0.996}) {
    DinoNetwork student = net(5), teacher = net(5);
    double d = dist(teacher, student);
    for (int k = 0; k < 10; ++k) {
      ema_update(teacher, student, m);
      const double nd = dist(teacher, student);
      ema_gap = std::max(ema_gap, std::abs(nd / d - m));
      d = nd;
    }
  }
  o.require(ema_gap <= 1e-9, "EMA factor");

  RunConfig rc = desk_profile();
  rc.ssl.epochs = 50;
  rc.ssl.patience = 1000;
  BlobSpec spec = rc.data.blobs;
  spec.classes = rc.data.base_classes;
  const Dataset data = generate_blobs(spec).train;
  SeededRng ssl_rng(506);
  const SslResult r = run_ssl(data, rc.backbone, rc.ssl, ssl_rng);
  const double floor = 0.1 * std::log(static_cast<double>(rc.ssl.projection_dim));
  double lowest = 1e300;
  for (double h : r.teacher_entropy) lowest = std::min(lowest, h);
  o.require(r.teacher_entropy.size() == 50, "50 epochs");
  o.require(lowest > floor, "no collapse");
  o.detail << "entropy identity gap " << entropy_gap << ", EMA factor gap " << ema_gap << ", lowest teacher entropy "
           << lowest << ", final " << r.teacher_entropy.back() << " over " << r.teacher_entropy.size()
           << " epochs (floor " << floor << ", uniform " << std::log(static_cast<double>(rc.ssl.projection_dim)) << ")";
}

struct ToyRuns {
  std::vector<RunRecord> full;
  std::vector<Metrics> no_delta;
  double seconds = 0;
};

void end_to_end(Outcome& o, ToyRuns& runs) {
  const RunConfig cfg = desk_profile();
  const auto t0 = Clock::now();
  double worst_acc = 1e300, worst_forget = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    runs.full.push_back(run_config(cfg, seed));
    const Metrics& m = runs.full.back().metrics;
    worst_acc = std::min(worst_acc, m.average_accuracy);
    worst_forget = std::max(worst_forget, m.forgetting);
  }
  runs.seconds = seconds_since(t0);
  std::vector<double> acc, forget;
  for (const auto& r : runs.full) acc.push_back(r.metrics.average_accuracy), forget.push_back(r.metrics.forgetting);
  const Summary sa = summarize(acc), sf = summarize(forget);
  o.require(worst_acc >= 85.0, "average accuracy");
  o.require(worst_forget <= 10.0, "forgetting");
  o.require(runs.seconds <= 300.0, "runtime");
  o.detail << "average accuracy " << sa.mean << " +- " << sa.std << " (lowest " << worst_acc << "), forgetting "
           << sf.mean << " +- " << sf.std << " (highest " << worst_forget << "), " << runs.seconds << " s for 5 seeds";
}

void protocol_fidelity(Outcome& o) {
  const DatasetMeta mi = uniform_meta(100, 600, 100);
  for (auto [base, ways] : {std::pair<std::size_t, std::size_t>{60, 5}, {20, 10}}) {
    const auto specs = build_fscil_splits(mi, base, ways, 5, 9);
    o.require(check_split(specs, mi, ways, 5).empty(), "100-class split");
    for (const auto& s : specs) o.require(s.test.size() == 100 * (base + s.index * ways), "100 x learned classes");
  }
  for (std::size_t shots : {1u, 5u}) {
    const DatasetMeta cub = cub_meta();
    const auto a = build_fscil_splits(cub, 100, 10, shots, 9);
    const auto b = build_fscil_splits(cub, 50, 15, shots, 9);
    o.require(check_split(a, cub, 10, shots).empty() && check_split(b, cub, 15, shots).empty(), "CUB split");
    o.require(a.size() == 11 && b.size() == 11, "CUB session count");
    for (std::size_t k = 0; k < a.size() && k < 11; ++k) {
      o.require(a[k].test.size() == cub_sizes_100_10()[k], "CUB 100+10 pool size");
      o.require(b[k].test.size() == cub_sizes_50_15()[k], "CUB 50+15 pool size");
    }
  }
  BlobSpec spec;
  spec.classes = 8;
  const Blobs blobs = generate_blobs(spec);
  const auto specs = build_fscil_splits(DatasetMeta{8, blobs.train.labels, blobs.test.labels}, 4, 2, 5, 0);
  SessionDataStream stream(blobs.train, specs);
  int guarded = 0;
  auto expect_violation = [&](std::size_t k) {
    try {
      stream.acquire(k);
    } catch (const ContractViolation&) {
      ++guarded;
    }
  };
  expect_violation(1);
  { SessionView v = stream.acquire(0); }
  { SessionView v = stream.acquire(1); }
  expect_violation(0);
  expect_violation(1);
  { SessionView v = stream.acquire(2); }
  expect_violation(1);
  o.require(guarded == 4, "access guard");
  o.detail << "MI/CIFAR and CUB (2864 ... 5794, 1389 ... 5794) pool sizes exact, 4/4 past or future accesses rejected";
}

void ablation_direction(Outcome& o, ToyRuns& runs) {
  const RunConfig cfg = without(desk_profile(), "delta_params");
  int both = 0;
  std::ostringstream per_seed;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    runs.no_delta.push_back(run_config(cfg, seed).metrics);
    const Metrics& full = runs.full[seed].metrics;
    const Metrics& ab = runs.no_delta.back();
    const bool ok = ab.average_accuracy < full.average_accuracy && ab.forgetting > full.forgetting;
    both += ok;
    per_seed << " seed " << seed << ": " << full.average_accuracy << "/" << full.forgetting << " vs "
             << ab.average_accuracy << "/" << ab.forgetting << ";";
  }
  o.require(both >= 4, "direction");
  o.detail << both << "/5 seeds worse on both (full avg/forgetting vs without delta parameters:" << per_seed.str()
           << ")";
}

void metric_oracle(Outcome& o) {
  SeededRng rng(909);
  int same = 0;
  for (int t = 0; t < 1000; ++t) {
    const Trace tr = random_trace(rng);
    same += same_metrics(compute_metrics(tr.evals, tr.session_classes), reference_metrics(tr));
  }
  o.require(same == 1000, "exact agreement");
  o.detail << same << "/1000 traces match exactly";
}

void determinism(Outcome& o, const ToyRuns& runs) {
  const RunConfig cfg = desk_profile();
  const RunRecord a = run_config(cfg, 0);
  const RunRecord b = run_config(cfg, 0);
  o.require(a.hash() == b.hash(), "record hash");
  o.require(a.model_hash == b.model_hash, "model hash");
  o.require(a.hash() == runs.full[0].hash(), "hash across the whole binary");
  char buf[40];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(a.hash()));
  o.detail << "record hash " << buf << " reproduced three times";
}

}  // namespace

int main() {
  ToyRuns runs;
  struct Criterion {
    int id;
    const char* name;
    std::function<void(Outcome&)> check;
  };
  const std::vector<Criterion> criteria{
      {1, "gradient integrity", gradient_integrity},
      {2, "prefix equivalence", prefix_equivalence},
      {3, "routing oracle", routing_oracle},
      {4, "rectification algebra", rectification_algebra},
      {5, "distillation mechanics", distillation_mechanics},
      {6, "end-to-end toy run", [&](Outcome& o) { end_to_end(o, runs); }},
      {7, "protocol fidelity", protocol_fidelity},
      {8, "ablation direction", [&](Outcome& o) { ablation_direction(o, runs); }},
      {9, "metric oracle", metric_oracle},
      {10, "determinism", [&](Outcome& o) { determinism(o, runs); }},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    Outcome o;
    const auto t0 = Clock::now();
    try {
      c.check(o);
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << " [exception: " << e.what() << "]";
    }
    failed += !o.pass;
    std::printf("%s %2d %s: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.str().c_str(),
                seconds_since(t0));
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
