#include <doctest.h>

#include <cmath>
#include <numbers>

#include "fscil/autodiff.hpp"
#include "fscil/errors.hpp"
#include "fscil/grad_check.hpp"
#include "fscil/ops.hpp"
#include "fscil/optim.hpp"
#include "support.hpp"

using namespace fscil;
using fscil::testing::random_tensor;
using fscil::testing::random_vector;

TEST_CASE("tensor shape and storage") {
  Tensor t(Shape{2, 3}, 1.5);
  CHECK(t.size() == 6);
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  t.at(1, 2) = 4.0;
  CHECK(t.row(1)[2] == 4.0);
  CHECK_THROWS_AS(Tensor(Shape{2, 0}), ArgumentError);
  CHECK_THROWS_AS(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), ArgumentError);
  CHECK_THROWS_AS(t.reshaped(Shape{4}), ArgumentError);
  CHECK_FALSE(t.has_grad());
  CHECK_THROWS_AS(t.grad(), UsageError);
  t.ensure_grad();
  CHECK(t.grad().size() == t.size());
}

TEST_CASE("seeded streams are reproducible and independent") {
  SeededRng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    CHECK(x == b.next_u64());
    differs |= x != c.next_u64();
  }
  CHECK(differs);
  SeededRng s1 = a.split(7), s2 = a.split(7), s3 = a.split(8);
  CHECK(s1.next_u64() == s2.next_u64());
  CHECK(s1.next_u64() != s3.next_u64());
}

TEST_CASE("normal draws have unit moments") {
  SeededRng rng(5);
  const int n = 200000;
  double m = 0, v = 0;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    m += x;
    v += x * x;
  }
  m /= n;
  v = v / n - m * m;
  CHECK(std::abs(m) < 0.01);
  CHECK(std::abs(v - 1.0) < 0.01);
}

TEST_CASE("softmax") {
  const Tensor u = softmax(Tensor::vector({0, 0, 0}), 0);
  for (double p : u.values()) CHECK(p == doctest::Approx(1.0 / 3).epsilon(1e-15));
  const Tensor r = softmax(Tensor::vector({0, std::log(2.0)}), 0);
  CHECK(std::abs(r[0] - 1.0 / 3) < 1e-15);
  CHECK(std::abs(r[1] - 2.0 / 3) < 1e-15);
  CHECK_THROWS_AS(softmax(Tensor::vector({1, 2}), 1), ArgumentError);

  SeededRng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor x = random_tensor(Shape{3, 4}, rng, 20.0);
    const Tensor rows = softmax(x, 1), cols = softmax(x, 0);
    for (std::size_t i = 0; i < 3; ++i) {
      double s = 0, z = 0;
      for (std::size_t j = 0; j < 4; ++j) z += std::exp(x.at(i, j));
      for (std::size_t j = 0; j < 4; ++j) {
        CHECK(rows.at(i, j) >= 0.0);
        s += rows.at(i, j);
        CHECK(std::abs(rows.at(i, j) - std::exp(x.at(i, j)) / z) < 1e-12);
      }
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
    for (std::size_t j = 0; j < 4; ++j) {
      double s = 0;
      for (std::size_t i = 0; i < 3; ++i) s += cols.at(i, j);
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  }
  const Tensor big = softmax(Tensor::vector({1000, 1000}), 0);
  CHECK(big.all_finite());
  CHECK(big[0] == doctest::Approx(0.5));
}

TEST_CASE("gelu") {
  CHECK(gelu(0.0) == 0.0);
  CHECK(std::abs(gelu(100.0) - 100.0) < 1e-9);
  const double phi1 = 0.5 * (1.0 + std::erf(1.0 / std::numbers::sqrt2));
  CHECK(std::abs(gelu(1.0) - phi1) < 1e-12);
  CHECK(std::abs(gelu(1.0) - 0.841345) < 1e-6);
  double prev = 0.0;
  for (double x = 0.0; x < 10.0; x += 0.01) {
    CHECK(gelu(x) >= prev);
    prev = gelu(x);
  }
  for (double x = -4; x < 4; x += 0.37) {
    const double fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
    CHECK(std::abs(gelu_grad(x) - fd) < 1e-8);
  }
}

TEST_CASE("softplus") {
  CHECK(std::abs(softplus(0.0) - std::log(2.0)) < 1e-15);
  CHECK(std::abs(softplus(50.0) - 50.0) < 1e-9);
  CHECK(softplus(-700.0) > 0.0);
  CHECK(std::isfinite(softplus(800.0)));
  for (double x = -30; x < 30; x += 0.7) CHECK(std::abs(softplus(x) - std::log1p(std::exp(x))) < 1e-12);
}

TEST_CASE("batch norm forward") {
  auto p = BatchNormParams::identity(2);
  const Tensor x = Tensor::matrix({{3, -1}, {3, 1}});
  const Tensor y = batch_norm(x, p, Mode::train);
  CHECK(y.at(0, 0) == 0.0);
  CHECK(y.at(1, 0) == 0.0);
  CHECK(std::abs(y.at(0, 1) + 1.0 / std::sqrt(1.0 + 1e-5)) < 1e-9);
  CHECK(std::abs(y.at(1, 1) - 1.0 / std::sqrt(1.0 + 1e-5)) < 1e-9);
  // running stats: momentum 0.1 toward the batch mean and unbiased variance
  CHECK(std::abs(p.running_mean[0] - 0.3) < 1e-12);
  CHECK(std::abs(p.running_var[1] - (0.9 + 0.1 * 2.0)) < 1e-12);

  auto e = BatchNormParams::identity(3);
  SeededRng rng(2);
  const Tensor z = random_tensor(Shape{5, 3}, rng);
  const Tensor ze = batch_norm(z, e, Mode::eval);
  for (std::size_t i = 0; i < z.size(); ++i) CHECK(std::abs(ze[i] - z[i] / std::sqrt(1 + 1e-5)) < 1e-9);

  CHECK_THROWS_AS(batch_norm(Tensor::matrix({{1, 2}}), p, Mode::train), UsageError);
}

TEST_CASE("batch norm train statistics") {
  SeededRng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    auto p = BatchNormParams::identity(4);
    const std::size_t n = 8 + rng.index(24);
    const Tensor x = random_tensor(Shape{n, 4}, rng, 1.0 + 3.0 * rng.uniform());
    const Tensor y = batch_norm(x, p, Mode::train);
    for (std::size_t f = 0; f < 4; ++f) {
      double m = 0, v = 0, raw_m = 0, raw_v = 0;
      for (std::size_t i = 0; i < n; ++i) raw_m += x.at(i, f);
      raw_m /= n;
      for (std::size_t i = 0; i < n; ++i) raw_v += (x.at(i, f) - raw_m) * (x.at(i, f) - raw_m);
      raw_v /= n;
      for (std::size_t i = 0; i < n; ++i) m += y.at(i, f);
      m /= n;
      for (std::size_t i = 0; i < n; ++i) v += (y.at(i, f) - m) * (y.at(i, f) - m);
      v /= n;
      CHECK(std::abs(m) <= 1e-9);
      CHECK(std::abs(v - raw_v / (raw_v + 1e-5)) <= 1e-6);
    }
  }
}

TEST_CASE("cosine similarity") {
  const std::vector<double> u{1, -2, 3};
  const std::vector<double> u3{3, -6, 9};
  CHECK(std::abs(cosine_similarity(u, u3) - 1.0) < 1e-15);
  CHECK(cosine_similarity(std::vector<double>{1, 0}, std::vector<double>{0, 1}) == 0.0);
  CHECK_THROWS_AS(cosine_similarity(std::vector<double>{0, 0}, std::vector<double>{0, 1}), DomainError);
  CHECK_THROWS_AS(cosine_similarity(std::vector<double>{1}, std::vector<double>{0, 1}), ArgumentError);
  SeededRng rng(4);
  for (int t = 0; t < 500; ++t) {
    auto a = random_vector(6, rng), b = random_vector(6, rng);
    double d = 0, na = 0, nb = 0;
    for (int i = 0; i < 6; ++i) {
      d += a[i] * b[i];
      na += a[i] * a[i];
      nb += b[i] * b[i];
    }
    const double c = cosine_similarity(a, b);
    CHECK(std::abs(c - d / std::sqrt(na * nb)) < 1e-12);
    CHECK(c <= 1.0);
    CHECK(c >= -1.0);
    const double alpha = 0.01 + 100 * rng.uniform(), beta = 0.01 + 100 * rng.uniform();
    auto as = a, bs = b;
    for (auto& x : as) x *= alpha;
    for (auto& x : bs) x *= beta;
    CHECK(std::abs(cosine_similarity(as, bs) - c) < 1e-12);
  }
}

TEST_CASE("grad_check basics") {
  auto sq = [](const Var& x) { return ad::sum(ad::mul(x, x)); };
  const GradReport r = grad_check(sq, Tensor::vector({1, 2}));
  CHECK(r.passed());
  CHECK(r.analytic == std::vector<double>{2, 4});
  CHECK(std::abs(r.numeric[0] - 2) < 1e-7);
  CHECK(std::abs(r.numeric[1] - 4) < 1e-7);

  auto constant = [](const Var& x) { return ad::add_scalar(ad::scale(ad::sum(x), 0.0), 3.0); };
  const GradReport c = grad_check(constant, Tensor::vector({1, 2, 3}));
  for (double g : c.analytic) CHECK(g == 0.0);
  for (double g : c.numeric) CHECK(g == 0.0);

  int calls = 0;
  auto flaky = [&calls](const Var& x) { return ad::add_scalar(ad::sum(x), 1e-3 * (calls++)); };
  CHECK_THROWS_AS(grad_check(flaky, Tensor::vector({1.0})), UsageError);
}

TEST_CASE("every autodiff op passes finite differences") {
  SeededRng rng(11);
  const Tensor b = random_tensor(Shape{3, 4}, rng);
  const Tensor w = random_tensor(Shape{4, 2}, rng);
  const Tensor bias = random_tensor(Shape{4}, rng);
  const Tensor target = random_tensor(Shape{3, 4}, rng);
  const Tensor probs = softmax(random_tensor(Shape{3, 4}, rng), 1);
  const std::vector<std::size_t> labels{0, 3, 1};
  const Tensor weights = random_tensor(Shape{3, 4}, rng);
  // A weighted sum exposes every output coordinate to the check.
  auto reduce = [&](const Var& y) {
    Tensor r(y.shape());
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = std::sin(1.0 + 0.7 * static_cast<double>(i));
    return ad::sum(ad::mul_const(y, r));
  };
  std::vector<std::pair<const char*, std::function<Var(const Var&)>>> cases = {
      {"matmul", [&](const Var& x) { return reduce(ad::matmul(x, constant(w))); }},
      {"matmul_ta", [&](const Var& x) { return reduce(ad::matmul(x, constant(b), true, false)); }},
      {"matmul_tb", [&](const Var& x) { return reduce(ad::matmul(constant(b), x, false, true)); }},
      {"add", [&](const Var& x) { return reduce(ad::add(x, ad::mul(x, x))); }},
      {"sub", [&](const Var& x) { return reduce(ad::sub(constant(b), ad::mul(x, x))); }},
      {"add_bias", [&](const Var& x) { return reduce(ad::add_bias(x, constant(bias))); }},
      {"scale", [&](const Var& x) { return reduce(ad::scale(x, -2.5)); }},
      {"gelu", [&](const Var& x) { return reduce(ad::gelu(x)); }},
      {"relu", [&](const Var& x) { return reduce(ad::relu(ad::add_scalar(x, 0.013))); }},
      {"softplus", [&](const Var& x) { return reduce(ad::softplus(x)); }},
      {"softmax_rows", [&](const Var& x) { return reduce(ad::softmax_rows(x)); }},
      {"log_softmax_rows", [&](const Var& x) { return reduce(ad::log_softmax_rows(x)); }},
      {"l2_normalize_rows", [&](const Var& x) { return reduce(ad::l2_normalize_rows(x)); }},
      {"mean", [&](const Var& x) { return ad::mean(ad::mul(x, x)); }},
      {"cross_entropy", [&](const Var& x) { return ad::cross_entropy(x, labels); }},
      {"soft_cross_entropy", [&](const Var& x) { return ad::soft_cross_entropy(probs, x); }},
      {"mse", [&](const Var& x) { return ad::mse(x, target); }},
      {"concat_rows",
       [&](const Var& x) {
         std::vector<Var> parts{x, ad::scale(x, 2.0)};
         Tensor r(Shape{6, 4});
         for (std::size_t i = 0; i < r.size(); ++i) r[i] = std::cos(0.3 * static_cast<double>(i));
         return ad::sum(ad::mul_const(ad::concat_rows(parts), r));
       }},
      {"slice_rows", [&](const Var& x) { return ad::sum(ad::mul(ad::slice_rows(x, 1, 2), ad::slice_rows(x, 0, 2))); }},
      {"gather_rows",
       [&](const Var& x) {
         const std::vector<std::size_t> idx{2, 0, 2};
         return reduce(ad::gather_rows(x, idx));
       }},
      {"mul_weights", [&](const Var& x) { return reduce(ad::mul(x, constant(weights))); }},
  };
  for (const auto& [name, f] : cases) {
    CAPTURE(name);
    const GradReport r = grad_check(f, random_tensor(Shape{3, 4}, rng));
    CHECK(r.max_rel_error <= 1e-4);
  }
}

TEST_CASE("optimizers move toward the minimum and respect freezing") {
  for (OptimizerKind kind : {OptimizerKind::sgd, OptimizerKind::adam, OptimizerKind::adamw}) {
    Var p = parameter(Tensor::vector({3.0, -2.0}));
    OptimizerConfig oc;
    oc.kind = kind;
    oc.lr = kind == OptimizerKind::sgd ? 0.05 : 0.05;
    Optimizer opt({{{p}, true, 1.0}}, oc);
    for (int i = 0; i < 400; ++i) {
      opt.zero_grad();
      backward(ad::sum(ad::mul(p, p)));
      opt.step();
    }
    CHECK(std::abs(p.value()[0]) < 0.05);
    CHECK(std::abs(p.value()[1]) < 0.05);
  }
  Var frozen = constant(Tensor::vector({1.0}));
  CHECK_THROWS_AS(Optimizer({{{frozen}, true, 1.0}}, OptimizerConfig{}).step(), ContractViolation);
  CHECK(parse_optimizer("adamw") == OptimizerKind::adamw);
  CHECK_THROWS_AS(parse_optimizer("lion"), ArgumentError);
}

TEST_CASE("decoupled weight decay shrinks a gradient-free parameter") {
  Var p = parameter(Tensor::vector({1.0}));
  OptimizerConfig oc;
  oc.kind = OptimizerKind::adamw;
  oc.lr = 0.1;
  oc.weight_decay = 0.5;
  Optimizer opt({{{p}, true, 1.0}}, oc);
  opt.zero_grad();
  p.node()->value.ensure_grad();
  opt.step();
  CHECK(std::abs(p.value()[0] - (1.0 - 0.1 * 0.5)) < 1e-12);
}

TEST_CASE("schedules") {
  CHECK(cosine_schedule(1.0, 0.0, 0, 10) == doctest::Approx(1.0));
  CHECK(cosine_schedule(1.0, 0.0, 5, 10) == doctest::Approx(0.5));
  CHECK(cosine_schedule(0.04, 0.4, 10, 10) == doctest::Approx(0.4));
  CHECK(linear_warmup(0.04, 0.07, 0, 10) == doctest::Approx(0.04));
  CHECK(linear_warmup(0.04, 0.07, 5, 10) == doctest::Approx(0.055));
  CHECK(linear_warmup(0.04, 0.07, 50, 10) == doctest::Approx(0.07));

  ReduceOnPlateau plateau(0.25, 2, 1e-3);
  double lr = 0.1;
  lr = plateau.update(1.0, lr);
  lr = plateau.update(1.0, lr);
  lr = plateau.update(1.0, lr);
  CHECK(lr == doctest::Approx(0.1));  // reduction once bad epochs exceed the patience
  lr = plateau.update(1.0, lr);
  CHECK(lr == doctest::Approx(0.025));
  for (int i = 0; i < 30; ++i) lr = plateau.update(1.0, lr);
  CHECK(lr == doctest::Approx(1e-3));

  EarlyStopping stop(3);
  CHECK_FALSE(stop.update(5.0));
  CHECK_FALSE(stop.update(4.0));
  CHECK_FALSE(stop.update(4.5));
  CHECK_FALSE(stop.update(4.5));
  CHECK(stop.update(4.5));
  CHECK(stop.best() == 4.0);
  CHECK(stop.best_epoch() == 1);
}

TEST_CASE("backward rejects non-scalar roots") {
  Var x = parameter(Tensor::vector({1, 2}));
  CHECK_THROWS_AS(backward(x), UsageError);
  CHECK_THROWS_AS(backward(Var{}), UsageError);
}

TEST_CASE("forward ops stay finite on finite inputs") {
  SeededRng rng(8);
  for (int t = 0; t < 100; ++t) {
    Var x = parameter(random_tensor(Shape{4, 5}, rng, 50.0));
    CHECK(ad::softmax_rows(x).value().all_finite());
    CHECK(ad::log_softmax_rows(x).value().all_finite());
    CHECK(ad::softplus(x).value().all_finite());
    CHECK(ad::gelu(x).value().all_finite());
    CHECK(ad::l2_normalize_rows(x).value().all_finite());
  }
}
