#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "xbridge/tensor.hpp"

namespace xbridge::metrics {

// One evaluation metric and the range that normalizes it to [0, 1].
struct MetricSpec {
  std::string name;
  double lo = 0.0;
  double hi = 1.0;
};

// Performance Ratio: normalize every metric by its spec range, average the
// per-metric student/teacher ratios, return the mean as a percentage.
// Out-of-range values are clamped and metrics whose teacher normalizes to
// zero are skipped, both with a warning line on stderr.
double pr_metric(const std::vector<double>& student, const std::vector<double>& teacher,
                 const std::vector<MetricSpec>& specs);

// Structural similarity between two rank-2 images over the declared dynamic
// range: 7x7 Gaussian window (sigma 1.5), C1=(0.01L)^2, C2=(0.03L)^2,
// averaged over fully interior window positions. ssim(x, x) == 1 exactly.
double ssim(const Tensor& a, const Tensor& b, double range);

// Mean per-channel ssim for [c, h, w] latents.
double latent_ssim(const Tensor& a, const Tensor& b, double range);

// Cosine similarity of two flattened tensors; 0 when either is all zero.
double cosine(const Tensor& a, const Tensor& b);

// FNV-1a over raw bytes; the checkpoint/log content hash.
std::uint64_t fnv1a(const void* data, std::size_t n,
                    std::uint64_t hash = 0xcbf29ce484222325ull);

}  // namespace xbridge::metrics
