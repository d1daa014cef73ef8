#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "xbridge/errors.hpp"
#include "xbridge/kernels.hpp"
#include "xbridge/ops.hpp"
#include "xbridge/reference.hpp"
#include "xbridge/rng.hpp"
#include "xbridge/tensor.hpp"

using namespace xbridge;

namespace {

Tensor f64_randn(Shape shape, std::uint64_t seed, double stddev = 1.0) {
  Rng rng(seed);
  return Tensor::randn(std::move(shape), rng, DType::f64, stddev);
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.dtype() != b.dtype()) return false;
  auto ab = a.bytes();
  auto bb = b.bytes();
  for (std::size_t i = 0; i < ab.size(); ++i) {
    if (ab[i] != bb[i]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("rng: deterministic streams and derived seeds") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  Rng u(7);
  for (int i = 0; i < 1000; ++i) {
    double v = u.uniform();
    CHECK(v >= 0.0);
    CHECK(v < 1.0);
  }

  // same (base, tag, index) -> same seed; any component changed -> different
  CHECK(derive_seed(1, "noise", 3) == derive_seed(1, "noise", 3));
  CHECK(derive_seed(1, "noise", 3) != derive_seed(1, "noise", 4));
  CHECK(derive_seed(1, "noise", 3) != derive_seed(2, "noise", 3));
  CHECK(derive_seed(1, "noise", 3) != derive_seed(1, "init", 3));

  Rng n(123);
  double sum = 0.0, sq = 0.0;
  const int draws = 20000;
  for (int i = 0; i < draws; ++i) {
    double v = n.normal();
    sum += v;
    sq += v * v;
  }
  CHECK(std::abs(sum / draws) < 0.05);
  CHECK(std::abs(sq / draws - 1.0) < 0.05);
}

TEST_CASE("tensor: construction and invariants") {
  Tensor z = Tensor::zeros({2, 3}, DType::f32);
  CHECK(z.numel() == 6);
  for (double v : z.to_vector()) CHECK(v == 0.0);

  CHECK_THROWS_AS(Tensor::zeros({2, 0}, DType::f32), std::invalid_argument);
  CHECK_THROWS_AS(Tensor::from_vector({1.0, 2.0}, {3}, DType::f64), std::invalid_argument);

  Tensor s = Tensor::scalar(2.5, DType::f64);
  CHECK(s.item() == 2.5);
  CHECK_THROWS_AS(z.item(), std::invalid_argument);

  // grad buffers match value shape; absent grad reads as zeros
  Tensor x = Tensor::from_vector({1, 2, 3}, {3}, DType::f64);
  CHECK_FALSE(x.has_grad());
  CHECK(x.grad().shape() == x.shape());
  CHECK(x.grad().to_vector() == std::vector<double>{0, 0, 0});
}

TEST_CASE("matmul: frozen oracle values") {
  // [[1,2],[3,4]] x [[5],[6]] = [[17],[39]]
  Tensor a = Tensor::from_vector({1, 2, 3, 4}, {2, 2}, DType::f64);
  Tensor b = Tensor::from_vector({5, 6}, {2, 1}, DType::f64);
  Tensor c = ops::matmul(a, b);
  CHECK(c.shape() == Shape{2, 1});
  CHECK(c.value_at(0) == 17.0);
  CHECK(c.value_at(1) == 39.0);

  // identity passthrough
  Tensor eye = Tensor::from_vector({1, 0, 0, 1}, {2, 2}, DType::f64);
  Tensor m = f64_randn({2, 2}, 11);
  CHECK(bitwise_equal(ops::matmul(eye, m), ops::reshape(m, {2, 2})));

  // zero annihilator
  Tensor zero = Tensor::zeros({2, 2}, DType::f64);
  for (double v : ops::matmul(zero, m).to_vector()) CHECK(v == 0.0);
}

TEST_CASE("matmul: batched and transposed against triple-loop oracle") {
  Rng rng(99);
  for (int trial = 0; trial < 8; ++trial) {
    const std::int64_t g = 1 + rng.below(3), m = 1 + rng.below(4), k = 1 + rng.below(4),
                       n = 1 + rng.below(4);
    const bool ta = rng.below(2) == 1, tb = rng.below(2) == 1;
    Shape sa = ta ? Shape{g, k, m} : Shape{g, m, k};
    Shape sb = tb ? Shape{g, n, k} : Shape{g, k, n};
    Tensor a = Tensor::randn(sa, rng, DType::f64);
    Tensor b = Tensor::randn(sb, rng, DType::f64);
    Tensor c = ops::matmul(a, b, ta, tb);
    REQUIRE(c.shape() == Shape{g, m, n});
    auto av = a.data<double>();
    auto bv = b.data<double>();
    for (std::int64_t gi = 0; gi < g; ++gi) {
      for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) {
          double acc = 0.0;
          for (std::int64_t l = 0; l < k; ++l) {
            const double va = ta ? av[gi * k * m + l * m + i] : av[gi * m * k + i * k + l];
            const double vb = tb ? bv[gi * n * k + j * k + l] : bv[gi * k * n + l * n + j];
            acc += va * vb;
          }
          CHECK(c.value_at(gi * m * n + i * n + j) ==
                doctest::Approx(acc).epsilon(1e-12));
        }
      }
    }
  }
}

TEST_CASE("matmul: broadcast batch and shape errors") {
  Tensor a = f64_randn({3, 2, 4}, 5);
  Tensor w = f64_randn({4, 5}, 6);
  Tensor c = ops::matmul(a, w);
  CHECK(c.shape() == Shape{3, 2, 5});
  // each batch slice equals the rank-2 product
  for (std::int64_t g = 0; g < 3; ++g) {
    Tensor slice = ops::slice(a, 0, g, 1);
    Tensor ref = ops::matmul(ops::reshape(slice, {2, 4}), w);
    for (std::int64_t i = 0; i < 10; ++i)
      CHECK(c.value_at(g * 10 + i) == ref.value_at(i));
  }

  CHECK_THROWS_AS(ops::matmul(f64_randn({2, 3}, 1), f64_randn({4, 2}, 2)),
                  std::invalid_argument);
  CHECK_THROWS_AS(ops::matmul(f64_randn({2, 2, 3}, 1), f64_randn({3, 3, 2}, 2)),
                  std::invalid_argument);
  CHECK_THROWS_AS(ops::matmul(f64_randn({4}, 1), f64_randn({4, 2}, 2)), std::invalid_argument);
}

TEST_CASE("softmax: frozen oracle, shift invariance, row sums") {
  // [0, ln 3] -> [1/4, 3/4]
  Tensor x = Tensor::from_vector({0.0, 1.0986122886681098}, {2}, DType::f64);
  Tensor y = ops::softmax(x, 0);
  CHECK(y.value_at(0) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(y.value_at(1) == doctest::Approx(0.75).epsilon(1e-12));

  // uniform input -> uniform probabilities
  Tensor u = ops::softmax(Tensor::full({5}, 1.7, DType::f64), 0);
  for (double v : u.to_vector()) CHECK(v == doctest::Approx(0.2).epsilon(1e-12));

  // shift invariance
  Tensor r = f64_randn({4, 6}, 13);
  Tensor shifted = ops::add_scalar(r, 3.25);
  Tensor p1 = ops::softmax(r, 1);
  Tensor p2 = ops::softmax(shifted, 1);
  for (std::int64_t i = 0; i < r.numel(); ++i)
    CHECK(p1.value_at(i) == doctest::Approx(p2.value_at(i)).epsilon(1e-12));

  // sums along the axis: 1e-12 in f64, 1e-6 in f32
  Tensor rf = r.astype(DType::f32);
  Tensor pf = ops::softmax(rf, 1);
  for (std::int64_t row = 0; row < 4; ++row) {
    double s64 = 0.0, s32 = 0.0;
    for (std::int64_t jcol = 0; jcol < 6; ++jcol) {
      s64 += p1.value_at(row * 6 + jcol);
      s32 += pf.value_at(row * 6 + jcol);
    }
    CHECK(std::abs(s64 - 1.0) < 1e-12);
    CHECK(std::abs(s32 - 1.0) < 1e-6);
  }

  // entries positive, middle-axis reduction shape preserved
  Tensor mid = ops::softmax(f64_randn({2, 3, 4}, 17), 1);
  CHECK(mid.shape() == Shape{2, 3, 4});
  for (double v : mid.to_vector()) CHECK(v > 0.0);

  Tensor bad = Tensor::full({3}, std::numeric_limits<double>::infinity(), DType::f64);
  CHECK_THROWS_AS(ops::softmax(bad, 0), std::runtime_error);
  CHECK_THROWS_AS(ops::softmax(x, 2), std::invalid_argument);
}

TEST_CASE("layer_norm: frozen oracle and statistics") {
  // [1,2,3], eps=0 -> [-sqrt(1.5), 0, sqrt(1.5)]
  Tensor x = Tensor::from_vector({1, 2, 3}, {3}, DType::f64);
  Tensor y = ops::layer_norm(x, 0, 0.0);
  CHECK(y.value_at(0) == doctest::Approx(-1.224744871391589).epsilon(1e-12));
  CHECK(y.value_at(1) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(y.value_at(2) == doctest::Approx(1.224744871391589).epsilon(1e-12));

  // standardized slice is a fixed point
  Tensor fp = ops::layer_norm(y, 0, 0.0);
  for (std::int64_t i = 0; i < 3; ++i)
    CHECK(fp.value_at(i) == doctest::Approx(y.value_at(i)).epsilon(1e-5));

  // constant slice -> zeros via the eps floor
  Tensor c = ops::layer_norm(Tensor::full({4}, 5.0, DType::f64), 0, 1e-6);
  for (double v : c.to_vector()) CHECK(v == 0.0);

  // per-slice mean within 1e-5 of 0, variance near 1
  Tensor r = f64_randn({3, 8}, 23, 2.0);
  Tensor n = ops::layer_norm(r, 1, 1e-6);
  for (std::int64_t row = 0; row < 3; ++row) {
    double mean = 0.0, var = 0.0;
    for (std::int64_t k = 0; k < 8; ++k) mean += n.value_at(row * 8 + k);
    mean /= 8.0;
    for (std::int64_t k = 0; k < 8; ++k) {
      double d = n.value_at(row * 8 + k) - mean;
      var += d * d;
    }
    var /= 8.0;
    CHECK(std::abs(mean) < 1e-5);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
  }

  CHECK_THROWS_AS(ops::layer_norm(Tensor::scalar(1.0, DType::f64), 0, 1e-6),
                  std::invalid_argument);
}

TEST_CASE("silu and linear: oracle values") {
  Tensor z = ops::silu(Tensor::scalar(0.0, DType::f64));
  CHECK(z.item() == 0.0);

  Tensor big = ops::silu(Tensor::scalar(10.0, DType::f64));
  CHECK(big.item() == doctest::Approx(9.999546021312975).epsilon(1e-12));

  // linear with identity weights and zero bias is a passthrough
  Tensor eye = Tensor::from_vector({1, 0, 0, 0, 1, 0, 0, 0, 1}, {3, 3}, DType::f64);
  Tensor b0 = Tensor::zeros({3}, DType::f64);
  Tensor x = f64_randn({4, 3}, 31);
  Tensor y = ops::linear(x, eye, b0);
  for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(y.value_at(i) == x.value_at(i));

  CHECK_THROWS_AS(ops::linear(x, f64_randn({4, 2}, 1), Tensor::zeros({2}, DType::f64)),
                  std::invalid_argument);
  CHECK_THROWS_AS(ops::linear(x, eye, Tensor::zeros({4}, DType::f64)), std::invalid_argument);
}

TEST_CASE("conv_layers: weighted-sum semantics") {
  Rng rng(47);
  const std::int64_t b = 2, m = 3, s = 4, z = 5;
  Tensor h = Tensor::randn({b, m, s, z}, rng, DType::f64);

  SUBCASE("k=m, p=0 matches the explicit per-layer sum bitwise") {
    Tensor kern = Tensor::from_vector({0.3, -1.2, 0.8}, {3}, DType::f64);
    Tensor out = ops::conv_layers(h, kern, 3, 0);
    REQUIRE(out.shape() == Shape{b, 1, s, z});
    auto hv = h.data<double>();
    auto kv = kern.data<double>();
    for (std::int64_t bi = 0; bi < b; ++bi) {
      for (std::int64_t c = 0; c < s * z; ++c) {
        double acc = 0.0;
        for (std::int64_t l = 0; l < m; ++l) acc += (kv[l] / 1.0) * hv[(bi * m + l) * s * z + c];
        CHECK(out.value_at(bi * s * z + c) == acc);
      }
    }
  }

  SUBCASE("k=1 reduces to an equal-weight sum bitwise") {
    Tensor kern = Tensor::from_vector({0.7}, {1}, DType::f64);
    Tensor out = ops::conv_layers(h, kern, 1, 0);
    const double w = 0.7 / static_cast<double>(m);
    auto hv = h.data<double>();
    for (std::int64_t bi = 0; bi < b; ++bi) {
      for (std::int64_t c = 0; c < s * z; ++c) {
        double acc = 0.0;
        for (std::int64_t l = 0; l < m; ++l) acc += w * hv[(bi * m + l) * s * z + c];
        CHECK(out.value_at(bi * s * z + c) == acc);
      }
    }
  }

  SUBCASE("one-hot kernel selects a single layer") {
    Tensor kern = Tensor::from_vector({0.0, 1.0, 0.0}, {3}, DType::f64);
    Tensor out = ops::conv_layers(h, kern, 3, 0);
    Tensor layer1 = ops::slice(h, 1, 1, 1);
    CHECK(bitwise_equal(out, layer1));
  }

  SUBCASE("configuration and usage errors") {
    Tensor kern = Tensor::from_vector({1, 1, 1, 1}, {4}, DType::f64);
    CHECK_THROWS_AS(ops::conv_layers(h, kern, 4, 0), ConfigError);
    CHECK_THROWS_AS(ops::conv_layers(h, kern, 3, 0), std::invalid_argument);
    CHECK_THROWS_AS(ops::conv_layers(ops::reshape(h, {b, m, s * z}), kern, 4, 0),
                    std::invalid_argument);
  }
}

TEST_CASE("backward: analytic gradients and pruning") {
  SUBCASE("loss = sum(x) gives ones") {
    Tensor x = f64_randn({2, 3}, 3);
    x.set_requires_grad(true);
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = ops::sum(x);
    tape.backward(loss);
    for (double v : x.grad().to_vector()) CHECK(v == 1.0);
  }

  SUBCASE("loss = sum(x*x) at [1,2] gives [2,4]") {
    Tensor x = Tensor::from_vector({1, 2}, {2}, DType::f64);
    x.set_requires_grad(true);
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = ops::sum(ops::mul(x, x));
    tape.backward(loss);
    CHECK(x.grad().value_at(0) == 2.0);
    CHECK(x.grad().value_at(1) == 4.0);
  }

  SUBCASE("leaves off the path keep zero gradients") {
    Tensor x = f64_randn({3}, 4);
    Tensor y = f64_randn({3}, 5);
    x.set_requires_grad(true);
    y.set_requires_grad(true);
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = ops::sum(x);
    tape.backward(loss);
    CHECK_FALSE(y.has_grad());
    for (double v : y.grad().to_vector()) CHECK(v == 0.0);
  }

  SUBCASE("misuse raises usage errors") {
    Tensor x = f64_randn({3}, 6);
    x.set_requires_grad(true);
    Tape tape;
    TapeScope scope(tape);
    Tensor y = ops::mul(x, x);
    CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);  // non-scalar
    Tensor detached = Tensor::scalar(1.0, DType::f64);
    CHECK_THROWS_AS(tape.backward(detached), std::invalid_argument);  // unreachable
  }

  SUBCASE("gradients accumulate across reuse of a tensor") {
    Tensor x = Tensor::from_vector({3.0}, {1}, DType::f64);
    x.set_requires_grad(true);
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = ops::sum(ops::add(ops::mul(x, x), x));  // x^2 + x -> 2x + 1 = 7
    tape.backward(loss);
    CHECK(x.grad().item() == 7.0);
  }
}

TEST_CASE("grad_check: every primitive under 20+ seeds") {
  const double tol = 1e-4;
  const double h = 1e-5;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);
    const std::int64_t a = 2 + rng.below(2), b = 2 + rng.below(3);
    Tensor x = Tensor::randn({a, b}, rng, DType::f64);
    Tensor other = Tensor::randn({a, b}, rng, DType::f64);
    Tensor w = Tensor::randn({b, 3}, rng, DType::f64);
    Tensor bias = Tensor::randn({3}, rng, DType::f64);

    CHECK(ops::grad_check([&](const Tensor& t) { return ops::sum(ops::add(t, other)); }, x, h) <
          tol);
    CHECK(ops::grad_check([&](const Tensor& t) { return ops::sum(ops::sub(other, t)); }, x, h) <
          tol);
    CHECK(ops::grad_check([&](const Tensor& t) { return ops::sum(ops::mul(t, other)); }, x, h) <
          tol);
    CHECK(ops::grad_check([&](const Tensor& t) { return ops::mean(ops::mul(t, t)); }, x, h) <
          tol);
    CHECK(ops::grad_check([&](const Tensor& t) { return ops::sum(ops::neg(t)); }, x, h) < tol);
    CHECK(ops::grad_check([&](const Tensor& t) { return ops::sum(ops::scale(t, -1.7)); }, x, h) <
          tol);
    CHECK(ops::grad_check([&](const Tensor& t) { return ops::sum(ops::silu(t)); }, x, h) < tol);
    CHECK(ops::grad_check(
              [&](const Tensor& t) {
                return ops::sum(ops::mul(ops::softmax(t, 1), other));
              },
              x, h) < tol);
    CHECK(ops::grad_check(
              [&](const Tensor& t) {
                return ops::sum(ops::mul(ops::softmax(t, 0), other));
              },
              x, h) < tol);
    CHECK(ops::grad_check(
              [&](const Tensor& t) {
                return ops::sum(ops::mul(ops::layer_norm(t, 1, 1e-6), other));
              },
              x, h) < tol);
    CHECK(ops::grad_check([&](const Tensor& t) { return ops::sum(ops::linear(t, w, bias)); }, x,
                          h) < tol);
    CHECK(ops::grad_check(
              [&](const Tensor& t) { return ops::sum(ops::matmul(t, w)); }, x, h) < tol);
    CHECK(ops::grad_check(
              [&](const Tensor& t) { return ops::sum(ops::matmul(t, other, false, true)); }, x,
              h) < tol);
    CHECK(ops::grad_check(
              [&](const Tensor& t) { return ops::sum(ops::matmul(t, other, true, false)); }, x,
              h) < tol);
    CHECK(ops::grad_check(
              [&](const Tensor& t) { return ops::sum(ops::matmul(w, t, true, true)); }, x,
              h) < tol);

    // log over positive inputs
    Tensor pos = Tensor::rand_uniform({a, b}, rng, DType::f64, 0.5, 2.0);
    CHECK(ops::grad_check([&](const Tensor& t) { return ops::sum(ops::log(t)); }, pos, h) < tol);

    // shape plumbing: reshape / permute / concat / slice / axis reductions
    CHECK(ops::grad_check(
              [&](const Tensor& t) {
                return ops::sum(ops::mul(ops::reshape(t, {b, a}), ops::reshape(other, {b, a})));
              },
              x, h) < tol);
    CHECK(ops::grad_check(
              [&](const Tensor& t) {
                return ops::sum(ops::mul(ops::permute(t, {1, 0}), ops::permute(other, {1, 0})));
              },
              x, h) < tol);
    CHECK(ops::grad_check(
              [&](const Tensor& t) {
                return ops::sum(ops::mul(ops::concat({t, other}, 0),
                                         ops::concat({other, t}, 0)));
              },
              x, h) < tol);
    CHECK(ops::grad_check(
              [&](const Tensor& t) { return ops::sum(ops::slice(t, 1, 1, b - 1)); }, x, h) < tol);
    CHECK(ops::grad_check(
              [&](const Tensor& t) { return ops::sum(ops::mul(ops::sum_axis(t, 0), ops::sum_axis(other, 0))); },
              x, h) < tol);
    CHECK(ops::grad_check(
              [&](const Tensor& t) { return ops::sum(ops::mul(ops::mean_axis(t, 1), ops::mean_axis(other, 1))); },
              x, h) < tol);

    // broadcasting binary ops: [a,b] against [b] and [a,1]
    Tensor row = Tensor::randn({b}, rng, DType::f64);
    Tensor col = Tensor::randn({a, 1}, rng, DType::f64);
    CHECK(ops::grad_check(
              [&](const Tensor& t) { return ops::sum(ops::mul(t, row)); }, x, h) < tol);
    CHECK(ops::grad_check(
              [&](const Tensor& t) { return ops::sum(ops::mul(ops::add(t, col), col)); }, x, h) <
          tol);
    CHECK(ops::grad_check(
              [&](const Tensor& t) { return ops::sum(ops::mul(x, ops::add(t, row))); }, row, h) <
          tol);

    // conv_layers over h and over the kernel
    Tensor hh = Tensor::randn({2, 3, 2, 2}, rng, DType::f64);
    Tensor kern = Tensor::randn({3}, rng, DType::f64);
    CHECK(ops::grad_check(
              [&](const Tensor& t) { return ops::sum(ops::conv_layers(t, kern, 3, 0)); }, hh, h) <
          tol);
    CHECK(ops::grad_check(
              [&](const Tensor& t) { return ops::sum(ops::conv_layers(hh, t, 3, 0)); }, kern, h) <
          tol);
    CHECK(ops::grad_check(
              [&](const Tensor& t) { return ops::sum(ops::conv_layers(t, kern, 3, 1)); }, hh, h) <
          tol);

    // conv2d over input, weight, and bias
    Tensor img = Tensor::randn({1, 2, 4, 4}, rng, DType::f64);
    Tensor cw = Tensor::randn({3, 2, 3, 3}, rng, DType::f64, 0.5);
    Tensor cb = Tensor::randn({3}, rng, DType::f64);
    CHECK(ops::grad_check(
              [&](const Tensor& t) { return ops::sum(ops::conv2d(t, cw, cb, 1, 1)); }, img, h) <
          tol);
    CHECK(ops::grad_check(
              [&](const Tensor& t) { return ops::sum(ops::conv2d(img, t, cb, 1, 1)); }, cw, h) <
          tol);
    CHECK(ops::grad_check(
              [&](const Tensor& t) { return ops::sum(ops::conv2d(img, cw, t, 2, 1)); }, cb, h) <
          tol);
  }
}

TEST_CASE("grad_check: linear maps are exact") {
  Tensor x = f64_randn({3, 4}, 71);
  CHECK(ops::grad_check([](const Tensor& t) { return ops::sum(ops::scale(t, 2.5)); }, x) < 1e-10);
  CHECK(ops::grad_check([](const Tensor& t) { return ops::mean(t); }, x) < 1e-10);
}

TEST_CASE("grad_check: softmax cross-entropy toy") {
  Tensor logits = f64_randn({4}, 101);
  Tensor target = ops::softmax(f64_randn({4}, 102), 0);  // fixed soft target
  double err = ops::grad_check(
      [&](const Tensor& t) {
        Tensor p = ops::add_scalar(ops::softmax(t, 0), 1e-8);
        return ops::neg(ops::sum(ops::mul(target, ops::log(p))));
      },
      logits, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("forward determinism: identical inputs give bitwise-identical outputs") {
  Tensor x = f64_randn({5, 7}, 201);
  Tensor w = f64_randn({7, 3}, 202);
  Tensor b = f64_randn({3}, 203);
  Tensor y1 = ops::silu(ops::linear(x, w, b));
  Tensor y2 = ops::silu(ops::linear(x, w, b));
  CHECK(bitwise_equal(y1, y2));
  CHECK(bitwise_equal(ops::softmax(x, 1), ops::softmax(x, 1)));
  CHECK(bitwise_equal(ops::layer_norm(x, 1, 1e-6), ops::layer_norm(x, 1, 1e-6)));
}

TEST_CASE("parallel kernels match the serial reference bitwise") {
  Rng rng(301);
  for (int trial = 0; trial < 6; ++trial) {
    const std::int64_t g = 1 + rng.below(3), m = 1 + rng.below(6), n = 1 + rng.below(6),
                       k = 1 + rng.below(6);
    Tensor a = Tensor::randn({g, m, k}, rng, DType::f64);
    Tensor b = Tensor::randn({g, k, n}, rng, DType::f64);
    Tensor c1 = Tensor::empty({g, m, n}, DType::f64);
    Tensor c2 = Tensor::empty({g, m, n}, DType::f64);
    kernels::matmul(a.data<double>().data(), b.data<double>().data(), c1.data<double>().data(), g,
                    m, n, k, m * k, k * n, false, false, false);
    reference::matmul(a.data<double>().data(), b.data<double>().data(), c2.data<double>().data(),
                      g, m, n, k, m * k, k * n, false, false, false);
    CHECK(bitwise_equal(c1, c2));

    const std::int64_t outer = 1 + rng.below(4), mid = 2 + rng.below(6),
                       inner = 1 + rng.below(4);
    Tensor x = Tensor::randn({outer, mid, inner}, rng, DType::f32);
    Tensor s1 = Tensor::empty(x.shape(), DType::f32);
    Tensor s2 = Tensor::empty(x.shape(), DType::f32);
    kernels::softmax(x.data<float>().data(), s1.data<float>().data(), outer, mid, inner);
    reference::softmax(x.data<float>().data(), s2.data<float>().data(), outer, mid, inner);
    CHECK(bitwise_equal(s1, s2));

    Tensor l1 = Tensor::empty(x.shape(), DType::f32);
    Tensor l2 = Tensor::empty(x.shape(), DType::f32);
    Tensor mu1 = Tensor::empty({outer * inner}, DType::f32);
    Tensor mu2 = Tensor::empty({outer * inner}, DType::f32);
    Tensor rs1 = Tensor::empty({outer * inner}, DType::f32);
    Tensor rs2 = Tensor::empty({outer * inner}, DType::f32);
    kernels::layer_norm(x.data<float>().data(), l1.data<float>().data(),
                        mu1.data<float>().data(), rs1.data<float>().data(), outer, mid, inner,
                        1e-6f);
    reference::layer_norm(x.data<float>().data(), l2.data<float>().data(),
                          mu2.data<float>().data(), rs2.data<float>().data(), outer, mid, inner,
                          1e-6f);
    CHECK(bitwise_equal(l1, l2));
    CHECK(bitwise_equal(mu1, mu2));

    Tensor v1 = Tensor::empty(x.shape(), DType::f32);
    Tensor v2 = Tensor::empty(x.shape(), DType::f32);
    kernels::silu(x.data<float>().data(), v1.data<float>().data(), x.numel());
    reference::silu(x.data<float>().data(), v2.data<float>().data(), x.numel());
    CHECK(bitwise_equal(v1, v2));

    const std::int64_t cb = 1 + rng.below(2), cm = 1 + rng.below(5), cols = 1 + rng.below(8);
    const std::int64_t ck = 1 + rng.below(cm), cp = rng.below(2);
    Tensor ch = Tensor::randn({cb, cm, cols}, rng, DType::f64);
    Tensor ckern = Tensor::randn({ck}, rng, DType::f64);
    Tensor o1 = Tensor::empty({cb, cols}, DType::f64);
    Tensor o2 = Tensor::empty({cb, cols}, DType::f64);
    kernels::conv_layers(ch.data<double>().data(), ckern.data<double>().data(),
                         o1.data<double>().data(), cb, cm, cols, ck, cp);
    reference::conv_layers(ch.data<double>().data(), ckern.data<double>().data(),
                           o2.data<double>().data(), cb, cm, cols, ck, cp);
    CHECK(bitwise_equal(o1, o2));

    Tensor img = Tensor::randn({1, 2, 5, 5}, rng, DType::f32);
    Tensor cw = Tensor::randn({3, 2, 3, 3}, rng, DType::f32);
    Tensor cbias = Tensor::randn({3}, rng, DType::f32);
    Tensor y1 = Tensor::empty({1, 3, 5, 5}, DType::f32);
    Tensor y2 = Tensor::empty({1, 3, 5, 5}, DType::f32);
    kernels::conv2d(img.data<float>().data(), cw.data<float>().data(),
                    cbias.data<float>().data(), y1.data<float>().data(), 1, 2, 5, 5, 3, 3, 3, 1,
                    1, 5, 5);
    reference::conv2d(img.data<float>().data(), cw.data<float>().data(),
                      cbias.data<float>().data(), y2.data<float>().data(), 1, 2, 5, 5, 3, 3, 3, 1,
                      1, 5, 5);
    CHECK(bitwise_equal(y1, y2));
  }
}
