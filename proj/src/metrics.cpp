#include "xbridge/metrics.hpp"

#include <array>
#include <cmath>
#include <iostream>
#include <stdexcept>

namespace xbridge::metrics {

namespace {

double clamp01(double v, const char* side, const MetricSpec& spec) {
  if (v < 0.0 || v > 1.0) {
    std::cerr << "warning: pr_metric: " << side << " value for '" << spec.name
              << "' outside [" << spec.lo << ", " << spec.hi << "], clamped\n";
    return v < 0.0 ? 0.0 : 1.0;
  }
  return v;
}

}  // namespace

double pr_metric(const std::vector<double>& student, const std::vector<double>& teacher,
                 const std::vector<MetricSpec>& specs) {
  if (student.size() != teacher.size() || student.size() != specs.size()) {
    throw std::invalid_argument("pr_metric: value lists and specs must have equal length");
  }
  if (specs.empty()) throw std::invalid_argument("pr_metric: no metrics");

  double acc = 0.0;
  std::size_t used = 0;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const MetricSpec& spec = specs[i];
    if (!(spec.hi > spec.lo)) {
      throw std::invalid_argument("pr_metric: spec '" + spec.name + "' needs hi > lo");
    }
    const double width = spec.hi - spec.lo;
    const double ns = clamp01((student[i] - spec.lo) / width, "student", spec);
    const double nt = clamp01((teacher[i] - spec.lo) / width, "teacher", spec);
    if (nt == 0.0) {
      std::cerr << "warning: pr_metric: teacher normalizes to zero for '" << spec.name
                << "', metric skipped\n";
      continue;
    }
    acc += ns / nt;
    ++used;
  }
  if (used == 0) throw std::runtime_error("pr_metric: every metric was skipped");
  return 100.0 * acc / static_cast<double>(used);
}

namespace {

constexpr std::int64_t kWin = 7;
constexpr double kSigma = 1.5;

// Normalized 7x7 Gaussian weights, identical for every call.
const double* window() {
  static const auto w = [] {
    std::array<double, kWin * kWin> v{};
    double total = 0.0;
    for (std::int64_t i = 0; i < kWin; ++i) {
      for (std::int64_t j = 0; j < kWin; ++j) {
        const double di = static_cast<double>(i - kWin / 2);
        const double dj = static_cast<double>(j - kWin / 2);
        v[i * kWin + j] = std::exp(-(di * di + dj * dj) / (2.0 * kSigma * kSigma));
        total += v[i * kWin + j];
      }
    }
    for (double& x : v) x /= total;
    return v;
  }();
  return w.data();
}

}  // namespace

double ssim(const Tensor& a, const Tensor& b, double range) {
  if (a.shape() != b.shape()) throw std::invalid_argument("ssim: shapes disagree");
  if (a.shape().size() != 2) throw std::invalid_argument("ssim: expected rank-2 images");
  if (!(range > 0.0) || !std::isfinite(range)) {
    throw std::invalid_argument("ssim: dynamic range must be finite positive");
  }
  const std::int64_t h = a.shape()[0], w = a.shape()[1];
  if (h < kWin || w < kWin) {
    throw std::invalid_argument("ssim: image smaller than the 7x7 window");
  }

  const auto xs = a.to_vector();
  const auto ys = b.to_vector();
  const double* win = window();
  const double c1 = (0.01 * range) * (0.01 * range);
  const double c2 = (0.03 * range) * (0.03 * range);

  double acc = 0.0;
  std::int64_t count = 0;
  for (std::int64_t i0 = 0; i0 + kWin <= h; ++i0) {
    for (std::int64_t j0 = 0; j0 + kWin <= w; ++j0) {
      double mx = 0.0, my = 0.0;
      for (std::int64_t i = 0; i < kWin; ++i) {
        for (std::int64_t j = 0; j < kWin; ++j) {
          const double g = win[i * kWin + j];
          mx += g * xs[(i0 + i) * w + (j0 + j)];
          my += g * ys[(i0 + i) * w + (j0 + j)];
        }
      }
      double vx = 0.0, vy = 0.0, cov = 0.0;
      for (std::int64_t i = 0; i < kWin; ++i) {
        for (std::int64_t j = 0; j < kWin; ++j) {
          const double g = win[i * kWin + j];
          const double dx = xs[(i0 + i) * w + (j0 + j)] - mx;
          const double dy = ys[(i0 + i) * w + (j0 + j)] - my;
          vx += g * (dx * dx);
          vy += g * (dy * dy);
          // Grouping keeps the accumulation symmetric in the two images.
          cov += g * (dx * dy);
        }
      }
      acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) /
             ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  }
  return acc / static_cast<double>(count);
}

double latent_ssim(const Tensor& a, const Tensor& b, double range) {
  if (a.shape() != b.shape()) throw std::invalid_argument("latent_ssim: shapes disagree");
  if (a.shape().size() != 3) throw std::invalid_argument("latent_ssim: expected [c, h, w]");
  const std::int64_t c = a.shape()[0];
  double acc = 0.0;
  for (std::int64_t i = 0; i < c; ++i) {
    Shape plane{a.shape()[1], a.shape()[2]};
    // Channels are contiguous planes, so a flat-offset copy slices them out.
    auto copy_plane = [&](const Tensor& t) {
      auto v = t.to_vector();
      const std::int64_t n = plane[0] * plane[1];
      return Tensor::from_vector(
          std::vector<double>(v.begin() + i * n, v.begin() + (i + 1) * n), plane,
          DType::f64);
    };
    acc += ssim(copy_plane(a), copy_plane(b), range);
  }
  return acc / static_cast<double>(c);
}

double cosine(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) throw std::invalid_argument("cosine: sizes disagree");
  const auto av = a.to_vector();
  const auto bv = b.to_vector();
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    dot += av[i] * bv[i];
    na += av[i] * av[i];
    nb += bv[i] * bv[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  // Equal inputs have cosine exactly 1; the quotient below can round it off.
  if (av == bv) return 1.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t hash) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    hash ^= p[i];
    hash *= 0x100000001b3ull;
  }
  return hash;
}

}  // namespace xbridge::metrics
