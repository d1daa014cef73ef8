#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "xbridge/alignnet.hpp"
#include "xbridge/errors.hpp"
#include "xbridge/ops.hpp"
#include "xbridge/rng.hpp"

using namespace xbridge;

namespace {

// Small config so gradient probes stay cheap.
EncoderConfig tiny_enc() {
  EncoderConfig e;
  e.z = 8;
  e.d_c = 5;
  e.d_p = 4;
  e.m = 4;
  e.max_seq = 6;
  e.heads = 1;
  return e;
}

double at(const Tensor& t, const std::vector<std::int64_t>& idx) {
  std::int64_t flat = 0;
  for (std::size_t d = 0; d < idx.size(); ++d) flat = flat * t.shape()[d] + idx[d];
  return t.value_at(flat);
}

void set_at(Tensor& t, const std::vector<std::int64_t>& idx, double v) {
  std::int64_t flat = 0;
  for (std::size_t d = 0; d < idx.size(); ++d) flat = flat * t.shape()[d] + idx[d];
  t.set_value_at(flat, v);
}

Tensor randn64(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  return Tensor::randn(std::move(shape), rng, DType::f64, 1.0);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  auto av = a.to_vector(), bv = b.to_vector();
  REQUIRE(av.size() == bv.size());
  double m = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) m = std::max(m, std::abs(av[i] - bv[i]));
  return m;
}

bool all_zero(const Tensor& t) {
  for (double v : t.to_vector()) {
    if (v != 0.0) return false;
  }
  return true;
}

AlignNet make_net(const char* strategy, const EncoderConfig& enc, std::uint64_t seed,
                  std::int64_t k = 0, std::int64_t p = 0) {
  AlignNetConfig cfg;
  cfg.strategy = strategy;
  cfg.k = k;
  cfg.p = p;
  cfg.hidden = 7;
  return AlignNet(cfg, enc, seed, DType::f64);
}

}  // namespace

TEST_CASE("parameter count matches the closed form at reference scale") {
  EncoderConfig enc;  // z=48, d_c=64, d_p=32, m=6
  AlignNetConfig cfg;
  cfg.strategy = "CNN";
  cfg.k = 3;
  cfg.hidden = 96;
  AlignNet net(cfg, enc, 1);

  const std::int64_t head_y = enc.z * cfg.hidden + cfg.hidden + cfg.hidden * enc.d_c + enc.d_c;
  const std::int64_t head_p = enc.z * cfg.hidden + cfg.hidden + cfg.hidden * enc.d_p + enc.d_p;
  CHECK(net.parameter_count() == cfg.k + head_y + head_p);
  CHECK(net.parameter_count() == 18723);

  SUBCASE("every parameter is trainable") {
    auto params = net.parameters();
    CHECK(params.size() == 9);  // kernel + 2 x (w1,b1,w2,b2)
    for (const auto& [name, t] : params) {
      CHECK(t.requires_grad());
    }
  }
}

TEST_CASE("fresh heads emit exactly zero") {
  EncoderConfig enc = tiny_enc();
  for (const char* strategy : {"A1", "A3_mean", "ADA", "CNN"}) {
    CAPTURE(strategy);
    AlignNet net = make_net(strategy, enc, 3);
    HiddenStateStack stack{randn64({2, enc.m, enc.max_seq, enc.z}, 77),
                           Tensor::full({2, enc.max_seq}, 1.0, DType::f64)};
    auto cond = net.forward(stack);
    CHECK(cond.seq.shape() == Shape{2, enc.max_seq, enc.d_c});
    CHECK(cond.pooled.shape() == Shape{2, enc.d_p});
    CHECK(all_zero(cond.seq));
    CHECK(all_zero(cond.pooled));
  }
}

TEST_CASE("fuse strategies match their hand-built oracles") {
  EncoderConfig enc = tiny_enc();
  const std::int64_t b = 2, m = enc.m, s = enc.max_seq, z = enc.z;
  Tensor h = randn64({b, m, s, z}, 123);

  auto layer = [&](std::int64_t l, std::int64_t i, std::int64_t j, std::int64_t c) {
    return at(h, {i, l, j, c});
  };

  SUBCASE("A1 is the last layer verbatim") {
    Tensor fused = make_net("A1", enc, 3).fuse(h);
    for (std::int64_t i = 0; i < b; ++i)
      for (std::int64_t j = 0; j < s; ++j)
        for (std::int64_t c = 0; c < z; ++c)
          CHECK(at(fused, {i, j, c}) == layer(m - 1, i, j, c));
  }

  SUBCASE("A3_mean averages first and last two layers") {
    Tensor fused = make_net("A3_mean", enc, 3).fuse(h);
    for (std::int64_t i = 0; i < b; ++i)
      for (std::int64_t j = 0; j < s; ++j)
        for (std::int64_t c = 0; c < z; ++c) {
          const double want =
              (layer(0, i, j, c) + layer(m - 2, i, j, c) + layer(m - 1, i, j, c)) / 3.0;
          CHECK(at(fused, {i, j, c}) == doctest::Approx(want).epsilon(1e-14));
        }
  }

  SUBCASE("ADA at zero logits is the arithmetic layer mean") {
    AlignNet net = make_net("ADA", enc, 3);
    auto w = net.ada_weights();
    REQUIRE(w.size() == static_cast<std::size_t>(m));
    for (double wi : w) CHECK(wi == doctest::Approx(1.0 / m).epsilon(1e-15));

    Tensor fused = net.fuse(h);
    for (std::int64_t i = 0; i < b; ++i)
      for (std::int64_t j = 0; j < s; ++j)
        for (std::int64_t c = 0; c < z; ++c) {
          double want = 0.0;
          for (std::int64_t l = 0; l < m; ++l) want += layer(l, i, j, c);
          want /= static_cast<double>(m);
          CHECK(at(fused, {i, j, c}) == doctest::Approx(want).epsilon(1e-13));
        }
  }

  SUBCASE("single-tap CNN kernel reduces to an equal-weight layer sum") {
    AlignNet net = make_net("CNN", enc, 3, /*k=*/1);
    // kernel initializes to 1/k = 1; each layer's effective weight is 1/m.
    Tensor fused = net.fuse(h);
    for (std::int64_t i = 0; i < b; ++i)
      for (std::int64_t j = 0; j < s; ++j)
        for (std::int64_t c = 0; c < z; ++c) {
          double want = 0.0;
          for (std::int64_t l = 0; l < m; ++l) {
            want += layer(l, i, j, c) * (1.0 / static_cast<double>(m));
          }
          CHECK(at(fused, {i, j, c}) == doctest::Approx(want).epsilon(1e-13));
        }
  }

  SUBCASE("full-width CNN kernel is an explicit weighted sum") {
    AlignNet net = make_net("CNN", enc, 3, /*k=*/m);
    auto params = net.parameters();
    auto it = std::find_if(params.begin(), params.end(),
                           [](const auto& p) { return p.first == "fuse.kernel"; });
    REQUIRE(it != params.end());
    Tensor kernel = it->second;
    REQUIRE(kernel.numel() == m);
    // Overwrite with distinct taps so the sum is observable.
    for (std::int64_t l = 0; l < m; ++l) set_at(kernel, {l}, 0.25 * double(l) - 0.3);

    Tensor fused = net.fuse(h);
    for (std::int64_t i = 0; i < b; ++i)
      for (std::int64_t j = 0; j < s; ++j)
        for (std::int64_t c = 0; c < z; ++c) {
          double want = 0.0;
          for (std::int64_t l = 0; l < m; ++l) {
            want += layer(l, i, j, c) * at(kernel, {l});
          }
          CHECK(at(fused, {i, j, c}) == doctest::Approx(want).epsilon(1e-13));
        }
  }
}

TEST_CASE("fuse is linear in the hidden stack") {
  EncoderConfig enc = tiny_enc();
  Tensor h1 = randn64({1, enc.m, enc.max_seq, enc.z}, 5);
  Tensor h2 = randn64({1, enc.m, enc.max_seq, enc.z}, 6);
  const double a = 1.7, bb = -0.4;

  for (const char* strategy : {"A1", "A3_mean", "ADA", "CNN"}) {
    CAPTURE(strategy);
    AlignNet net = make_net(strategy, enc, 9);
    Tensor mix = ops::add(ops::scale(h1, a), ops::scale(h2, bb));
    Tensor lhs = net.fuse(mix);
    Tensor rhs = ops::add(ops::scale(net.fuse(h1), a), ops::scale(net.fuse(h2), bb));
    CHECK(max_abs_diff(lhs, rhs) < 1e-10);
  }
}

TEST_CASE("pooled head ignores masked positions; sequence head is position-wise") {
  EncoderConfig enc = tiny_enc();
  AlignNet net = make_net("A1", enc, 13);
  // Give the zero-initialized final layers real values so outputs move.
  for (auto& [name, t] : net.parameters()) {
    if (name == "head_y.l2.w" || name == "head_p.l2.w") {
      Rng rng(derive_seed(99, name, 0));
      for (std::int64_t i = 0; i < t.numel(); ++i) {
        set_at(t, {i / t.shape()[1], i % t.shape()[1]}, rng.normal());
      }
    }
  }

  Tensor fused = randn64({1, enc.max_seq, enc.z}, 21);
  Tensor mask = Tensor::zeros({1, enc.max_seq}, DType::f64);
  const std::int64_t n_real = 3;
  for (std::int64_t j = 0; j < n_real; ++j) set_at(mask, {0, j}, 1.0);

  auto base = net.project(fused, mask);

  // Scribble over a masked position.
  Tensor scribbled = fused.clone();
  for (std::int64_t c = 0; c < enc.z; ++c) set_at(scribbled, {0, 4, c}, 1e3);
  auto moved = net.project(scribbled, mask);

  CHECK(max_abs_diff(base.pooled, moved.pooled) == 0.0);
  // The sequence head changes only at the scribbled row.
  for (std::int64_t j = 0; j < enc.max_seq; ++j) {
    double row_diff = 0.0;
    for (std::int64_t c = 0; c < enc.d_c; ++c) {
      row_diff = std::max(row_diff,
                          std::abs(at(base.seq, {0, j, c}) - at(moved.seq, {0, j, c})));
    }
    if (j == 4) {
      CHECK(row_diff > 0.0);
    } else {
      CHECK(row_diff == 0.0);
    }
  }
}

TEST_CASE("gradients reach every trainable parameter and match finite differences") {
  EncoderConfig enc = tiny_enc();
  for (const char* strategy : {"ADA", "CNN"}) {
    CAPTURE(strategy);
    AlignNet net = make_net(strategy, enc, 17);
    HiddenStateStack stack{randn64({1, enc.m, enc.max_seq, enc.z}, 31),
                           Tensor::full({1, enc.max_seq}, 1.0, DType::f64)};
    // Random direction tensors make the scalar loss sensitive everywhere.
    Tensor dir_seq = randn64({1, enc.max_seq, enc.d_c}, 32);
    Tensor dir_pool = randn64({1, enc.d_p}, 33);

    auto loss_value = [&]() {
      auto cond = net.forward(stack);
      return ops::add(ops::sum(ops::mul(cond.seq, dir_seq)),
                      ops::sum(ops::mul(cond.pooled, dir_pool)))
          .item();
    };

    Tape tape;
    {
      TapeScope scope(tape);
      auto cond = net.forward(stack);
      Tensor loss = ops::add(ops::sum(ops::mul(cond.seq, dir_seq)),
                             ops::sum(ops::mul(cond.pooled, dir_pool)));
      CHECK(cond.seq.on_grad_path());
      CHECK_FALSE(stack.h.on_grad_path());  // encoder output is frozen input
      tape.backward(loss);
    }

    const double h_step = 1e-6;
    for (auto& [name, t] : net.parameters()) {
      CAPTURE(name);
      Tensor grad = t.grad();
      // Probe a handful of entries per parameter.
      Rng pick(derive_seed(55, name, 0));
      const std::int64_t probes = std::min<std::int64_t>(4, t.numel());
      for (std::int64_t q = 0; q < probes; ++q) {
        const std::int64_t flat = pick.below(t.numel());
        std::vector<std::int64_t> idx(t.shape().size());
        std::int64_t rem = flat;
        for (std::size_t d = t.shape().size(); d-- > 0;) {
          idx[d] = rem % t.shape()[d];
          rem /= t.shape()[d];
        }
        const double orig = at(t, idx);
        set_at(t, idx, orig + h_step);
        const double up = loss_value();
        set_at(t, idx, orig - h_step);
        const double down = loss_value();
        set_at(t, idx, orig);
        const double numeric = (up - down) / (2.0 * h_step);
        const double analytic = at(grad, idx);
        const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
        CHECK(std::abs(numeric - analytic) / denom < 1e-4);
      }
    }
  }
}

TEST_CASE("invalid configurations are rejected") {
  EncoderConfig enc = tiny_enc();

  AlignNetConfig bad;
  bad.strategy = "A7";
  CHECK_THROWS_AS(AlignNet(bad, enc, 1), ConfigError);

  AlignNetConfig wide;
  wide.strategy = "CNN";
  wide.k = enc.m + 1;  // exceeds m + 2p with p = 0
  CHECK_THROWS_AS(AlignNet(wide, enc, 1), ConfigError);
  wide.p = 1;  // now m + 2 taps fit
  CHECK_NOTHROW(AlignNet(wide, enc, 1));

  AlignNetConfig dup;
  dup.strategy = "ADA";
  dup.layer_subset = {0, 0, 1};
  CHECK_THROWS_AS(AlignNet(dup, enc, 1), ConfigError);

  AlignNetConfig oob;
  oob.strategy = "A3_mean";
  oob.layer_subset = {0, enc.m};
  CHECK_THROWS_AS(AlignNet(oob, enc, 1), ConfigError);

  AlignNet net = make_net("A1", enc, 1);
  CHECK_THROWS_AS(net.fuse(Tensor::zeros({2, enc.m + 1, 4, enc.z}, DType::f64)),
                  std::invalid_argument);
  CHECK_THROWS_AS(net.ada_weights(), std::invalid_argument);
}

TEST_CASE("deep mapper adds a hidden stage but keeps the zero start") {
  EncoderConfig enc = tiny_enc();
  AlignNetConfig cfg;
  cfg.strategy = "A1";
  cfg.hidden = 7;
  cfg.deep_mapper = true;
  AlignNet net(cfg, enc, 19, DType::f64);

  const std::int64_t base = (enc.z * 7 + 7 + 7 * enc.d_c + enc.d_c) +
                            (enc.z * 7 + 7 + 7 * enc.d_p + enc.d_p);
  const std::int64_t mids = 2 * (7 * 7 + 7);
  CHECK(net.parameter_count() == base + mids);

  HiddenStateStack stack{randn64({1, enc.m, enc.max_seq, enc.z}, 41),
                         Tensor::full({1, enc.max_seq}, 1.0, DType::f64)};
  auto cond = net.forward(stack);
  CHECK(all_zero(cond.seq));
  CHECK(all_zero(cond.pooled));
}
