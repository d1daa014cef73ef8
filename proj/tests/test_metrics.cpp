#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>
#include <vector>

#include "xbridge/metrics.hpp"
#include "xbridge/rng.hpp"
#include "xbridge/tensor.hpp"

using namespace xbridge;
using metrics::MetricSpec;

namespace {

Tensor randn64(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  return Tensor::randn(std::move(shape), rng, DType::f64, 1.0);
}

Tensor image64(const std::vector<double>& v, std::int64_t h, std::int64_t w) {
  return Tensor::from_vector(v, {h, w}, DType::f64);
}

// Direct-formula reference: uncentered moments E[XY] - E[X]E[Y] instead of
// the two-pass centered sums the library uses.
double ref_ssim(const std::vector<double>& xs, const std::vector<double>& ys, std::int64_t h,
                std::int64_t w, double range) {
  const std::int64_t k = 7;
  std::vector<double> win(k * k);
  double total = 0.0;
  for (std::int64_t i = 0; i < k; ++i) {
    for (std::int64_t j = 0; j < k; ++j) {
      const double di = static_cast<double>(i - 3), dj = static_cast<double>(j - 3);
      win[i * k + j] = std::exp(-(di * di + dj * dj) / (2.0 * 1.5 * 1.5));
      total += win[i * k + j];
    }
  }
  for (double& g : win) g /= total;

  const double c1 = 0.01 * range * 0.01 * range;
  const double c2 = 0.03 * range * 0.03 * range;
  double acc = 0.0;
  std::int64_t count = 0;
  for (std::int64_t i0 = 0; i0 + k <= h; ++i0) {
    for (std::int64_t j0 = 0; j0 + k <= w; ++j0) {
      double mx = 0.0, my = 0.0, ex2 = 0.0, ey2 = 0.0, exy = 0.0;
      for (std::int64_t i = 0; i < k; ++i) {
        for (std::int64_t j = 0; j < k; ++j) {
          const double g = win[i * k + j];
          const double x = xs[(i0 + i) * w + (j0 + j)];
          const double y = ys[(i0 + i) * w + (j0 + j)];
          mx += g * x;
          my += g * y;
          ex2 += g * x * x;
          ey2 += g * y * y;
          exy += g * x * y;
        }
      }
      const double vx = ex2 - mx * mx;
      const double vy = ey2 - my * my;
      const double cov = exy - mx * my;
      acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) /
             ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  }
  return acc / static_cast<double>(count);
}

}  // namespace

TEST_CASE("pr_metric identity is exactly one hundred percent") {
  const std::vector<MetricSpec> specs{{"clip", 0.0, 1.0}, {"fid", 0.0, 100.0}, {"vqa", 0.0, 5.0}};
  const std::vector<double> vals{0.31, 42.0, 3.7};
  CHECK(metrics::pr_metric(vals, vals, specs) == 100.0);
}

TEST_CASE("pr_metric averages per-metric ratios") {
  const std::vector<MetricSpec> specs{{"a", 0.0, 1.0}, {"b", 0.0, 1.0}};
  CHECK(metrics::pr_metric({0.5, 1.0}, {1.0, 1.0}, specs) == 75.0);
}

TEST_CASE("pr_metric normalizes by the declared range") {
  // A 1-5 scale value of 3.0 normalizes to 0.5; with the teacher at the top
  // of the scale the ratio is read off directly.
  const std::vector<MetricSpec> specs{{"faith", 1.0, 5.0}};
  CHECK(metrics::pr_metric({3.0}, {5.0}, specs) == 50.0);
}

TEST_CASE("pr_metric clamps out-of-range values") {
  const std::vector<MetricSpec> specs{{"a", 0.0, 1.0}};
  CHECK(metrics::pr_metric({1.4, }, {0.5}, specs) == 200.0);  // student clamps to 1.0
  CHECK(metrics::pr_metric({-0.3}, {0.5}, specs) == 0.0);     // student clamps to 0.0
}

TEST_CASE("pr_metric skips metrics whose teacher normalizes to zero") {
  const std::vector<MetricSpec> specs{{"zeroed", 0.0, 1.0}, {"kept", 0.0, 1.0}};
  CHECK(metrics::pr_metric({0.9, 0.4}, {0.0, 0.4}, specs) == 100.0);
  CHECK_THROWS_AS(metrics::pr_metric({0.9}, {0.0}, {{"only", 0.0, 1.0}}), std::runtime_error);
}

TEST_CASE("pr_metric input validation") {
  CHECK_THROWS_AS(metrics::pr_metric({0.5}, {0.5, 0.6}, {{"a", 0.0, 1.0}}),
                  std::invalid_argument);
  CHECK_THROWS_AS(metrics::pr_metric({}, {}, {}), std::invalid_argument);
  CHECK_THROWS_AS(metrics::pr_metric({0.5}, {0.5}, {{"a", 1.0, 1.0}}), std::invalid_argument);
  CHECK_THROWS_AS(metrics::pr_metric({0.5}, {0.5}, {{"a", 2.0, 1.0}}), std::invalid_argument);
}

TEST_CASE("ssim of an image with itself is exactly one") {
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    Tensor a = randn64({9, 11}, seed);
    CHECK(metrics::ssim(a, a, 2.0) == 1.0);
  }
}

TEST_CASE("ssim matches the direct-formula reference") {
  // Fixed 8x8 pair: smooth deterministic fields, four valid window positions.
  std::vector<double> xs(64), ys(64);
  for (std::int64_t i = 0; i < 64; ++i) {
    xs[i] = std::sin(0.7 * static_cast<double>(i)) + 0.5 * std::cos(1.3 * static_cast<double>(i));
    ys[i] = 0.8 * xs[i] + 0.3 * std::sin(2.1 * static_cast<double>(i) + 0.5);
  }
  const double got = metrics::ssim(image64(xs, 8, 8), image64(ys, 8, 8), 4.0);
  const double want = ref_ssim(xs, ys, 8, 8, 4.0);
  CHECK(std::abs(got - want) < 1e-8);
  CHECK(got < 1.0);  // the two fields genuinely differ
}

TEST_CASE("ssim is symmetric in its arguments") {
  Tensor a = randn64({10, 9}, 11);
  Tensor b = randn64({10, 9}, 12);
  CHECK(metrics::ssim(a, b, 3.0) == metrics::ssim(b, a, 3.0));
}

TEST_CASE("ssim drops under perturbation") {
  Tensor a = randn64({8, 8}, 21);
  auto v = a.to_vector();
  for (double& x : v) x += 0.7;  // uniform brightness shift: luminance term < 1
  CHECK(metrics::ssim(a, image64(v, 8, 8), 4.0) < 1.0);
  for (std::size_t i = 0; i < v.size(); i += 3) v[i] = -v[i];
  CHECK(metrics::ssim(a, image64(v, 8, 8), 4.0) <
        metrics::ssim(a, a, 4.0));
}

TEST_CASE("ssim input validation") {
  Tensor ok = randn64({8, 8}, 1);
  CHECK_THROWS_AS(metrics::ssim(ok, randn64({8, 9}, 2), 1.0), std::invalid_argument);
  CHECK_THROWS_AS(metrics::ssim(randn64({64}, 3), randn64({64}, 4), 1.0), std::invalid_argument);
  CHECK_THROWS_AS(metrics::ssim(randn64({6, 8}, 5), randn64({6, 8}, 6), 1.0),
                  std::invalid_argument);
  CHECK_THROWS_AS(metrics::ssim(ok, ok, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(metrics::ssim(ok, ok, -1.0), std::invalid_argument);
  CHECK_THROWS_AS(metrics::ssim(ok, ok, std::numeric_limits<double>::infinity()),
                  std::invalid_argument);
}

TEST_CASE("latent_ssim averages per-channel planes") {
  Tensor a = randn64({3, 8, 8}, 31);
  Tensor b = randn64({3, 8, 8}, 32);
  CHECK(metrics::latent_ssim(a, a, 4.0) == 1.0);

  double manual = 0.0;
  const auto av = a.to_vector();
  const auto bv = b.to_vector();
  for (std::int64_t c = 0; c < 3; ++c) {
    std::vector<double> ap(av.begin() + c * 64, av.begin() + (c + 1) * 64);
    std::vector<double> bp(bv.begin() + c * 64, bv.begin() + (c + 1) * 64);
    manual += metrics::ssim(image64(ap, 8, 8), image64(bp, 8, 8), 4.0);
  }
  CHECK(metrics::latent_ssim(a, b, 4.0) == doctest::Approx(manual / 3.0).epsilon(1e-15));

  CHECK_THROWS_AS(metrics::latent_ssim(randn64({8, 8}, 1), randn64({8, 8}, 2), 1.0),
                  std::invalid_argument);
  CHECK_THROWS_AS(metrics::latent_ssim(a, randn64({2, 8, 8}, 33), 1.0), std::invalid_argument);
}

TEST_CASE("cosine similarity") {
  Tensor a = randn64({17}, 41);
  CHECK(metrics::cosine(a, a) == 1.0);  // exact, by the equal-input path

  Tensor b = Tensor::from_vector({1.0, 0.0, 0.0}, {3}, DType::f64);
  Tensor c = Tensor::from_vector({0.0, 1.0, 0.0}, {3}, DType::f64);
  CHECK(metrics::cosine(b, c) == 0.0);

  auto scaled = a.to_vector();
  for (double& x : scaled) x *= 2.0;
  CHECK(metrics::cosine(a, Tensor::from_vector(scaled, {17}, DType::f64)) ==
        doctest::Approx(1.0).epsilon(1e-12));
  for (double& x : scaled) x = -x;
  CHECK(metrics::cosine(a, Tensor::from_vector(scaled, {17}, DType::f64)) ==
        doctest::Approx(-1.0).epsilon(1e-12));

  Tensor zero = Tensor::zeros({17}, DType::f64);
  CHECK(metrics::cosine(zero, a) == 0.0);
  CHECK(metrics::cosine(a, zero) == 0.0);
  CHECK(metrics::cosine(zero, zero) == 0.0);

  CHECK_THROWS_AS(metrics::cosine(a, b), std::invalid_argument);
}

TEST_CASE("fnv1a matches the published test vectors") {
  CHECK(metrics::fnv1a(nullptr, 0) == 0xcbf29ce484222325ull);
  CHECK(metrics::fnv1a("a", 1) == 0xaf63dc4c8601ec8cull);
  CHECK(metrics::fnv1a("foobar", 6) == 0x85944171f73967e8ull);
}

TEST_CASE("fnv1a chains across split buffers") {
  const char* msg = "split anywhere";
  const std::size_t n = std::strlen(msg);
  const std::uint64_t whole = metrics::fnv1a(msg, n);
  for (std::size_t cut = 0; cut <= n; ++cut) {
    CHECK(metrics::fnv1a(msg + cut, n - cut, metrics::fnv1a(msg, cut)) == whole);
  }
  CHECK(metrics::fnv1a("ab", 2) != metrics::fnv1a("ba", 2));
}
