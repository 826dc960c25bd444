#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fscil/data.hpp"
#include "fscil/errors.hpp"
#include "fscil/grad_check.hpp"
#include "fscil/rectification.hpp"
#include "planted_bias.hpp"
#include "support.hpp"

using namespace fscil;
using fscil::testing::random_tensor;
using fscil::testing::random_vector;

TEST_CASE("intra-class bias") {
  SeededRng rng(1);
  const Tensor full = random_tensor(Shape{7, 3}, rng);
  for (double v : estimate_intra_class_bias(full, full)) CHECK(std::abs(v) < 1e-15);
  const auto b = estimate_intra_class_bias(Tensor::matrix({{2, 0}, {0, 2}}), Tensor::matrix({{1, -1}, {-1, 1}}));
  CHECK(b == std::vector<double>{1.0, 1.0});
  CHECK_THROWS_AS(estimate_intra_class_bias(full, Tensor(Shape{0, 3})), ArgumentError);
}

TEST_CASE("bias shrinks as the few-shot subset grows") {
  SeededRng rng(2);
  const std::size_t d = 6;
  std::vector<double> norms;
  for (std::size_t k : {1u, 5u, 25u}) {
    double acc = 0;
    for (int t = 0; t < 400; ++t) {
      const Tensor full = random_tensor(Shape{200, d}, rng);
      std::vector<std::size_t> idx(200);
      std::iota(idx.begin(), idx.end(), 0);
      rng.shuffle(std::span<std::size_t>(idx));
      idx.resize(k);
      const auto b = estimate_intra_class_bias(full, gather_rows(full, idx));
      double n = 0;
      for (double v : b) n += v * v;
      acc += std::sqrt(n);
    }
    norms.push_back(acc / 400);
  }
  CHECK(norms[0] > norms[1]);
  CHECK(norms[1] > norms[2]);
}

TEST_CASE("outlier pairs rank by distance") {
  SeededRng rng(3);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 1 + rng.index(12), d = 1 + rng.index(5);
    const Tensor x = random_tensor(Shape{n, d}, rng);
    const auto proto = random_vector(d, rng, 0.3);
    const std::size_t count = 1 + rng.index(n);
    std::vector<std::pair<double, std::size_t>> oracle;
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < d; ++j) s += (x.at(i, j) - proto[j]) * (x.at(i, j) - proto[j]);
      oracle.emplace_back(-s, i);
    }
    std::sort(oracle.begin(), oracle.end());
    const OutlierPairs p = select_outlier_pairs(x, proto, count);
    REQUIRE(p.size() == count);
    for (std::size_t r = 0; r < count; ++r) {
      CHECK(p.source[r] == oracle[r].second);
      for (std::size_t j = 0; j < d; ++j) {
        CHECK(p.inputs.at(r, j) == x.at(p.source[r], j));
        CHECK(p.targets.at(r, j) == proto[j]);
      }
    }
  }
  const Tensor x = Tensor::matrix({{0, 0}, {3, 0}, {1, 1}});
  CHECK(select_outlier_pairs(x, std::vector<double>{0, 0}, 1).source == std::vector<std::size_t>{1});
  CHECK_THROWS_AS(select_outlier_pairs(x, std::vector<double>{0, 0}, 4), ArgumentError);
  CHECK(select_outlier_pairs(x, std::vector<double>{0, 0}, 4, true).size() == 3);
  const OutlierPairs merged = merge_pairs({select_outlier_pairs(x, std::vector<double>{0, 0}, 2),
                                           OutlierPairs{}, select_outlier_pairs(x, std::vector<double>{1, 1}, 1)});
  CHECK(merged.size() == 3);
  CHECK(merged.targets.at(2, 0) == 1.0);
}

TEST_CASE("pseudo-labels follow the router") {
  TaskRouter router(2);
  router.add_session(fit_class_stats(Tensor::matrix({{0, 0}, {1, 0}, {10, 10}, {11, 10}}),
                                     std::vector<std::size_t>{0, 0, 1, 1}, 0));
  const auto at_mean = pseudo_label(Tensor::matrix({{10.5, 10}, {0.5, 0}}), router, Metric::euclidean);
  CHECK(at_mean.cls == std::vector<std::size_t>{1, 0});
  CHECK(pseudo_label(Tensor(), router, Metric::euclidean).index.empty());

  BlobSpec spec;
  spec.classes = 5;
  spec.separation = 12.0;
  spec.train_per_class = 20;
  spec.test_per_class = 40;
  spec.seed = 4;
  const Blobs b = generate_blobs(spec);
  TaskRouter blob_router(spec.dim);
  blob_router.add_session(fit_class_stats(b.train.features, b.train.labels, 0));
  for (Metric m : {Metric::euclidean, Metric::mahalanobis}) {
    const auto p = pseudo_label(b.test.features, blob_router, m);
    REQUIRE(p.index.size() == b.test.size());
    for (std::size_t i = 0; i < p.index.size(); ++i) CHECK(p.cls[i] == b.test.labels[p.index[i]]);
  }
}

TEST_CASE("prediction net gradients pass finite differences") {
  SeededRng rng(5);
  for (bool linear : {false, true}) {
    PredictionNet net = PredictionNet::create(5, linear, rng);
    const Tensor x = random_tensor(Shape{4, 5}, rng), y = random_tensor(Shape{4, 5}, rng);
    auto loss = [&]() { return ad::mse(net.forward(constant(x)), y); };
    CHECK(grad_check(loss, net.parameters()).max_rel_error <= 1e-4);
  }
}

TEST_CASE("prediction net fits the identity") {
  SeededRng rng(6);
  const Tensor x = random_tensor(Shape{64, 6}, rng);
  OutlierPairs p;
  p.inputs = x;
  p.targets = x;
  p.source.resize(64);
  RectificationConfig cfg;
  cfg.epochs = 3000;
  cfg.batch_size = 64;
  PredictionNet lin = PredictionNet::create(6, true, rng);
  CHECK(train_prediction_net(lin, p, cfg, rng).back() < 1e-4);
  CHECK(cfg.lr == 1e-3);
}

TEST_CASE("a single pair is memorized") {
  SeededRng rng(7);
  OutlierPairs p;
  p.inputs = random_tensor(Shape{1, 5}, rng);
  p.targets = random_tensor(Shape{1, 5}, rng);
  p.source = {0};
  RectificationConfig cfg;
  cfg.epochs = 4000;
  PredictionNet net = PredictionNet::create(5, false, rng);
  const auto losses = train_prediction_net(net, p, cfg, rng);
  CHECK(losses.back() < 1e-6);
  for (const auto& v : net.parameters()) CHECK_FALSE(v.requires_grad());
  CHECK_THROWS_AS(train_prediction_net(net, OutlierPairs{}, cfg, rng), ArgumentError);
}

TEST_CASE("rectified prototype is the midpoint") {
  SeededRng rng(8);
  const auto id = PredictionNet::identity(4);
  const auto mu = random_vector(4, rng);
  CHECK(rectify_prototype(id, mu) == mu);

  PredictionNet shift = PredictionNet::identity(4);
  const auto b = random_vector(4, rng);
  for (std::size_t j = 0; j < 4; ++j) shift.b1.mutable_value()[j] = 2 * b[j];
  const auto r = rectify_prototype(shift, mu);
  for (std::size_t j = 0; j < 4; ++j) CHECK(std::abs(r[j] - (mu[j] + b[j])) < 1e-12);

  for (int t = 0; t < 200; ++t) {
    PredictionNet net = PredictionNet::create(4, t % 2 == 0, rng);
    const auto m = random_vector(4, rng, 3.0);
    const auto p = net.apply(m);
    const auto out = rectify_prototype(net, m);
    for (std::size_t j = 0; j < 4; ++j) CHECK(std::abs(out[j] - (p[j] + m[j]) / 2) <= 1e-12);
  }
}

TEST_CASE("refined statistics") {
  SeededRng rng(9);
  const Tensor x = random_tensor(Shape{9, 3}, rng);
  const std::vector<std::size_t> y{0, 1, 2, 0, 1, 2, 0, 1, 2};
  const SessionStats raw = fit_class_stats(x, y, 1);
  const SessionStats same = refine_gaussian_stats(PredictionNet::identity(3), x, y, raw);
  for (std::size_t c = 0; c < 3; ++c) CHECK(same.classes[c].mean == raw.classes[c].mean);
  for (std::size_t i = 0; i < 9; ++i) CHECK(std::abs(same.scatter.values()[i] - raw.scatter.values()[i]) < 1e-14);

  // Two points of one class through P(h) = 2h: mean (1,1) -> (3/2)(1,1), deviations of 2h around it.
  PredictionNet twice = PredictionNet::identity(2);
  twice.w1.mutable_value().at(0, 0) = 2.0;
  twice.w1.mutable_value().at(1, 1) = 2.0;
  const Tensor pts = Tensor::matrix({{0, 0}, {2, 2}});
  const std::vector<std::size_t> one{3, 3};
  const SessionStats r = refine_gaussian_stats(twice, pts, one, fit_class_stats(pts, one, 0));
  CHECK(std::abs(r.classes[0].mean[0] - 1.5) < 1e-12);
  CHECK(std::abs(r.classes[0].mean[1] - 1.5) < 1e-12);
  // deviations: (-1.5,-1.5) and (2.5,2.5); pooled over 2 samples
  const double e = (1.5 * 1.5 + 2.5 * 2.5) / 2;
  for (double v : r.scatter.values()) CHECK(std::abs(v - e) < 1e-10);
  CHECK_THROWS_AS(refine_gaussian_stats(twice, pts, std::vector<std::size_t>{3, 4}, fit_class_stats(pts, one, 0)),
                  ArgumentError);
}

TEST_CASE("training one session's net leaves earlier nets untouched") {
  SeededRng rng(10);
  PredictionNet first = PredictionNet::create(4, false, rng, 0);
  PredictionNet second = PredictionNet::create(4, false, rng, 1);
  const auto h0 = first.hash();
  OutlierPairs p;
  p.inputs = random_tensor(Shape{6, 4}, rng);
  p.targets = random_tensor(Shape{6, 4}, rng);
  p.source.resize(6);
  RectificationConfig cfg;
  cfg.epochs = 20;
  const auto h1 = second.hash();
  train_prediction_net(second, p, cfg, rng);
  CHECK(first.hash() == h0);
  CHECK(second.hash() != h1);
}

TEST_CASE("planted bias is reduced in most trials") {
  int improved = 0;
  for (std::uint64_t s = 0; s < 40; ++s) improved += fscil::testing::planted_bias_trial(s, 3, 4, 5, 30, 3000).improved();
  MESSAGE("improved " << improved << " of 40");
  CHECK(improved >= 32);
}
