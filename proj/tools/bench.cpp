// Wall-time comparison of the OpenMP kernels against the serial reference,
// plus a bitwise-equality column: the parallel kernels keep every reduction
// serial per output element, so the two must agree to the last bit at any
// thread count. Usage: bench [reps]   (default 5, median reported).

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "xbridge/kernels.hpp"
#include "xbridge/reference.hpp"
#include "xbridge/rng.hpp"
#include "xbridge/tensor.hpp"

using xbridge::DType;
using xbridge::Rng;
using xbridge::Tensor;

namespace {

template <typename F>
double median_ms(F&& fn, int reps) {
  fn();  // warm the caches before timing
  std::vector<double> times;
  times.reserve(static_cast<std::size_t>(reps));
  for (int r = 0; r < reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  std::sort(times.begin(), times.end());
  return times[times.size() / 2];
}

struct Row {
  std::string kernel;
  std::string shape;
  double serial_ms = 0.0;
  double parallel_ms = 0.0;
  bool bitwise = false;
};

std::vector<Row> g_rows;

template <typename FSerial, typename FParallel>
void bench_pair(const std::string& kernel, const std::string& shape, const Tensor& out_serial,
                const Tensor& out_parallel, FSerial&& serial, FParallel&& parallel, int reps) {
  Row row{kernel, shape, 0.0, 0.0, false};
  row.serial_ms = median_ms(serial, reps);
  row.parallel_ms = median_ms(parallel, reps);
  row.bitwise = out_serial.bytes().size() == out_parallel.bytes().size() &&
                std::memcmp(out_serial.bytes().data(), out_parallel.bytes().data(),
                            out_serial.bytes().size()) == 0;
  g_rows.push_back(row);
}

void bench_matmul(Rng& rng, int reps) {
  const std::int64_t batch = 4, m = 192, n = 192, k = 192;
  auto a = Tensor::randn({batch, m, k}, rng, DType::f32);
  auto b = Tensor::randn({batch, k, n}, rng, DType::f32);
  auto ys = Tensor::zeros({batch, m, n}, DType::f32);
  auto yp = Tensor::zeros({batch, m, n}, DType::f32);
  const auto* pa = a.data<float>().data();
  const auto* pb = b.data<float>().data();
  bench_pair(
      "matmul", "4x[192x192 @ 192x192] f32", ys, yp,
      [&] {
        xbridge::reference::matmul(pa, pb, ys.data<float>().data(), batch, m, n, k, m * k, k * n,
                                   false, false, false);
      },
      [&] {
        xbridge::kernels::matmul(pa, pb, yp.data<float>().data(), batch, m, n, k, m * k, k * n,
                                 false, false, false);
      },
      reps);
}

void bench_softmax(Rng& rng, int reps) {
  const std::int64_t outer = 8192, n = 256, inner = 1;
  auto x = Tensor::randn({outer, n}, rng, DType::f32);
  auto ys = Tensor::zeros({outer, n}, DType::f32);
  auto yp = Tensor::zeros({outer, n}, DType::f32);
  const auto* px = x.data<float>().data();
  bench_pair(
      "softmax", "8192 rows of 256 f32", ys, yp,
      [&] { xbridge::reference::softmax(px, ys.data<float>().data(), outer, n, inner); },
      [&] { xbridge::kernels::softmax(px, yp.data<float>().data(), outer, n, inner); }, reps);
}

void bench_layer_norm(Rng& rng, int reps) {
  const std::int64_t outer = 8192, n = 256, inner = 1;
  auto x = Tensor::randn({outer, n}, rng, DType::f32);
  auto ys = Tensor::zeros({outer, n}, DType::f32);
  auto yp = Tensor::zeros({outer, n}, DType::f32);
  auto mean_s = Tensor::zeros({outer}, DType::f32);
  auto rstd_s = Tensor::zeros({outer}, DType::f32);
  auto mean_p = Tensor::zeros({outer}, DType::f32);
  auto rstd_p = Tensor::zeros({outer}, DType::f32);
  const auto* px = x.data<float>().data();
  bench_pair(
      "layer_norm", "8192 rows of 256 f32", ys, yp,
      [&] {
        xbridge::reference::layer_norm(px, ys.data<float>().data(), mean_s.data<float>().data(),
                                       rstd_s.data<float>().data(), outer, n, inner, 1e-6f);
      },
      [&] {
        xbridge::kernels::layer_norm(px, yp.data<float>().data(), mean_p.data<float>().data(),
                                     rstd_p.data<float>().data(), outer, n, inner, 1e-6f);
      },
      reps);
}

void bench_silu(Rng& rng, int reps) {
  const std::int64_t n = 1 << 22;
  auto x = Tensor::randn({n}, rng, DType::f32);
  auto ys = Tensor::zeros({n}, DType::f32);
  auto yp = Tensor::zeros({n}, DType::f32);
  const auto* px = x.data<float>().data();
  bench_pair(
      "silu", "4M elements f32", ys, yp,
      [&] { xbridge::reference::silu(px, ys.data<float>().data(), n); },
      [&] { xbridge::kernels::silu(px, yp.data<float>().data(), n); }, reps);
}

void bench_conv_layers(Rng& rng, int reps) {
  const std::int64_t b = 64, m = 6, cols = 4096, k = 3, p = 1;
  auto h = Tensor::randn({b, m, cols}, rng, DType::f32);
  auto kern = Tensor::randn({k}, rng, DType::f32);
  auto ys = Tensor::zeros({b, cols}, DType::f32);
  auto yp = Tensor::zeros({b, cols}, DType::f32);
  const auto* ph = h.data<float>().data();
  const auto* pk = kern.data<float>().data();
  bench_pair(
      "conv_layers", "64x[6x4096] k=3 p=1 f32", ys, yp,
      [&] { xbridge::reference::conv_layers(ph, pk, ys.data<float>().data(), b, m, cols, k, p); },
      [&] { xbridge::kernels::conv_layers(ph, pk, yp.data<float>().data(), b, m, cols, k, p); },
      reps);
}

void bench_conv2d(Rng& rng, int reps) {
  const std::int64_t b = 8, ci = 16, hw = 48, co = 32, kk = 3, stride = 1, pad = 1;
  const std::int64_t ho = (hw + 2 * pad - kk) / stride + 1;
  auto x = Tensor::randn({b, ci, hw, hw}, rng, DType::f32);
  auto w = Tensor::randn({co, ci, kk, kk}, rng, DType::f32);
  auto bias = Tensor::randn({co}, rng, DType::f32);
  auto ys = Tensor::zeros({b, co, ho, ho}, DType::f32);
  auto yp = Tensor::zeros({b, co, ho, ho}, DType::f32);
  const auto* px = x.data<float>().data();
  const auto* pw = w.data<float>().data();
  const auto* pbias = bias.data<float>().data();
  bench_pair(
      "conv2d", "8x16x48x48 -> 32ch 3x3 f32", ys, yp,
      [&] {
        xbridge::reference::conv2d(px, pw, pbias, ys.data<float>().data(), b, ci, hw, hw, co, kk,
                                   kk, stride, pad, ho, ho);
      },
      [&] {
        xbridge::kernels::conv2d(px, pw, pbias, yp.data<float>().data(), b, ci, hw, hw, co, kk, kk,
                                 stride, pad, ho, ho);
      },
      reps);
}

}  // namespace

int main(int argc, char** argv) {
  int reps = 5;
  if (argc > 1) reps = std::max(1, std::atoi(argv[1]));

  Rng rng(2024);
  bench_matmul(rng, reps);
  bench_softmax(rng, reps);
  bench_layer_norm(rng, reps);
  bench_silu(rng, reps);
  bench_conv_layers(rng, reps);
  bench_conv2d(rng, reps);

  std::printf("%-12s  %-28s  %10s  %10s  %8s  %8s\n", "kernel", "shape", "serial ms",
              "parallel", "speedup", "bitwise");
  bool all_bitwise = true;
  for (const auto& r : g_rows) {
    std::printf("%-12s  %-28s  %10.3f  %10.3f  %7.2fx  %8s\n", r.kernel.c_str(), r.shape.c_str(),
                r.serial_ms, r.parallel_ms,
                r.parallel_ms > 0.0 ? r.serial_ms / r.parallel_ms : 0.0,
                r.bitwise ? "yes" : "NO");
    all_bitwise = all_bitwise && r.bitwise;
  }
  if (!all_bitwise) {
    std::fprintf(stderr, "bench: parallel kernels diverged from the serial reference\n");
    return 1;
  }
  return 0;
}
