#include "xbridge/ops.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "xbridge/errors.hpp"
#include "xbridge/kernels.hpp"

namespace xbridge::ops {

namespace {

int normalize_axis(int axis, int rank, const char* op) {
  int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw std::invalid_argument(std::string(op) + ": axis " + std::to_string(axis) +
                                " out of range for rank " + std::to_string(rank));
  }
  return a;
}

void check_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) {
    throw std::invalid_argument(std::string(op) + ": dtype mismatch, " + dtype_name(a.dtype()) +
                                " vs " + dtype_name(b.dtype()));
  }
}

struct View3 {
  std::int64_t outer = 1, n = 1, inner = 1;
};

View3 axis_view(const Shape& s, int axis) {
  View3 v;
  for (int d = 0; d < axis; ++d) v.outer *= s[static_cast<std::size_t>(d)];
  v.n = s[static_cast<std::size_t>(axis)];
  for (int d = axis + 1; d < static_cast<int>(s.size()); ++d)
    v.inner *= s[static_cast<std::size_t>(d)];
  return v;
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::int64_t ea = i < a.size() ? a[a.size() - 1 - i] : 1;
    const std::int64_t eb = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (ea != eb && ea != 1 && eb != 1) {
      throw std::invalid_argument(std::string(op) + ": shapes not broadcastable, " + shape_str(a) +
                                  " vs " + shape_str(b));
    }
    out[r - 1 - i] = std::max(ea, eb);
  }
  return out;
}

// Row-major strides of `in` right-aligned against `out`, with 0 where the
// input extent is 1 (broadcast) or the axis is absent.
std::vector<std::int64_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::int64_t> st(out.size(), 0);
  std::int64_t stride = 1;
  for (std::size_t i = 0; i < in.size(); ++i) {
    const std::size_t d_in = in.size() - 1 - i;
    const std::size_t d_out = out.size() - 1 - i;
    st[d_out] = (in[d_in] == 1) ? 0 : stride;
    stride *= in[d_in];
  }
  return st;
}

// Walks `out_shape` in row-major order, handing f the output linear index and
// the two input offsets.
template <typename F>
void for_each_broadcast(const Shape& out_shape, const std::vector<std::int64_t>& as,
                        const std::vector<std::int64_t>& bs, F&& f) {
  const std::size_t r = out_shape.size();
  const std::int64_t total = shape_numel(out_shape);
  std::vector<std::int64_t> coord(r, 0);
  std::int64_t a_off = 0, b_off = 0;
  for (std::int64_t lin = 0; lin < total; ++lin) {
    f(lin, a_off, b_off);
    for (std::size_t i = r; i-- > 0;) {
      coord[i] += 1;
      a_off += as[i];
      b_off += bs[i];
      if (coord[i] < out_shape[i]) break;
      a_off -= coord[i] * as[i];
      b_off -= coord[i] * bs[i];
      coord[i] = 0;
    }
  }
}

// Sums g over leading axes and broadcast (extent-1) axes to produce a
// target-shaped gradient; returns g itself when shapes already match.
Tensor reduce_to_shape(const Tensor& g, const Shape& target) {
  if (g.shape() == target) return g;
  Tensor out = Tensor::zeros(target, g.dtype());
  const std::vector<std::int64_t> ts = broadcast_strides(target, g.shape());
  dispatch_dtype(g.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = g.data<T>();
    auto dst = out.data<T>();
    const Shape& gs = g.shape();
    const std::size_t r = gs.size();
    std::vector<std::int64_t> coord(r, 0);
    std::int64_t t_off = 0;
    for (std::int64_t lin = 0; lin < g.numel(); ++lin) {
      dst[static_cast<std::size_t>(t_off)] += src[static_cast<std::size_t>(lin)];
      for (std::size_t i = r; i-- > 0;) {
        coord[i] += 1;
        t_off += ts[i];
        if (coord[i] < gs[i]) break;
        t_off -= coord[i] * ts[i];
        coord[i] = 0;
      }
    }
  });
  return out;
}

void maybe_accumulate(const Tensor& input, const Tensor& delta) {
  if (input.on_grad_path()) accumulate_grad(*input.impl(), delta);
}

Tensor grad_of(const Tensor& out) {
  return out.impl()->grad ? Tensor::wrap(out.impl()->grad) : Tensor();
}

enum class BinKind { Add, Sub, Mul };

Tensor binary_op(const char* name, BinKind kind, const Tensor& a, const Tensor& b) {
  check_same_dtype(a, b, name);
  const Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
  Tensor out = Tensor::empty(out_shape, a.dtype());
  const auto as = broadcast_strides(a.shape(), out_shape);
  const auto bs = broadcast_strides(b.shape(), out_shape);
  dispatch_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto av = a.data<T>();
    auto bv = b.data<T>();
    auto ov = out.data<T>();
    for_each_broadcast(out_shape, as, bs, [&](std::int64_t lin, std::int64_t ao, std::int64_t bo) {
      const T x = av[static_cast<std::size_t>(ao)];
      const T y = bv[static_cast<std::size_t>(bo)];
      ov[static_cast<std::size_t>(lin)] =
          kind == BinKind::Add ? x + y : (kind == BinKind::Sub ? x - y : x * y);
    });
  });
  if (recording_needed({&a, &b})) {
    out.impl()->on_grad_path = true;
    Tensor ac = a, bc = b, oc = out;
    Tape::active()->record(name, [name, kind, ac, bc, oc, as, bs, out_shape]() {
      Tensor dy = grad_of(oc);
      if (!dy.defined()) return;
      if (kind == BinKind::Add) {
        maybe_accumulate(ac, reduce_to_shape(dy, ac.shape()));
        maybe_accumulate(bc, reduce_to_shape(dy, bc.shape()));
        return;
      }
      if (kind == BinKind::Sub) {
        maybe_accumulate(ac, reduce_to_shape(dy, ac.shape()));
        Tensor nb = Tensor::empty(dy.shape(), dy.dtype());
        dispatch_dtype(dy.dtype(), [&](auto tag) {
          using T = decltype(tag);
          auto s = dy.data<T>();
          auto d = nb.data<T>();
          for (std::size_t i = 0; i < d.size(); ++i) d[i] = -s[i];
        });
        maybe_accumulate(bc, reduce_to_shape(nb, bc.shape()));
        return;
      }
      // Mul: d a = dy * b, d b = dy * a, each reduced to its operand's shape.
      dispatch_dtype(dy.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto dyv = dy.data<T>();
        auto av = ac.data<T>();
        auto bv = bc.data<T>();
        if (ac.on_grad_path()) {
          Tensor da_full = Tensor::empty(out_shape, dy.dtype());
          auto d = da_full.data<T>();
          for_each_broadcast(out_shape, as, bs,
                             [&](std::int64_t lin, std::int64_t, std::int64_t bo) {
                               d[static_cast<std::size_t>(lin)] =
                                   dyv[static_cast<std::size_t>(lin)] *
                                   bv[static_cast<std::size_t>(bo)];
                             });
          accumulate_grad(*ac.impl(), reduce_to_shape(da_full, ac.shape()));
        }
        if (bc.on_grad_path()) {
          Tensor db_full = Tensor::empty(out_shape, dy.dtype());
          auto d = db_full.data<T>();
          for_each_broadcast(out_shape, as, bs,
                             [&](std::int64_t lin, std::int64_t ao, std::int64_t) {
                               d[static_cast<std::size_t>(lin)] =
                                   dyv[static_cast<std::size_t>(lin)] *
                                   av[static_cast<std::size_t>(ao)];
                             });
          accumulate_grad(*bc.impl(), reduce_to_shape(db_full, bc.shape()));
        }
      });
    });
  }
  return out;
}

// Elementwise unary helper: fwd(x) and dfdx(x, y) evaluated per element.
template <typename Fwd, typename Bwd>
Tensor unary_op(const char* name, const Tensor& x, Fwd&& fwd, Bwd&& make_backward) {
  Tensor out = Tensor::empty(x.shape(), x.dtype());
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xv = x.data<T>();
    auto ov = out.data<T>();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = fwd(xv[i]);
  });
  if (recording_needed({&x})) {
    out.impl()->on_grad_path = true;
    Tape::active()->record(name, make_backward(x, out));
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op("add", BinKind::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op("sub", BinKind::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op("mul", BinKind::Mul, a, b); }

Tensor neg(const Tensor& x) {
  return unary_op(
      "neg", x, [](auto v) { return -v; },
      [](const Tensor& xc, const Tensor& oc) {
        return [xc, oc]() {
          Tensor dy = grad_of(oc);
          if (!dy.defined()) return;
          Tensor dx = Tensor::empty(dy.shape(), dy.dtype());
          dispatch_dtype(dy.dtype(), [&](auto tag) {
            using T = decltype(tag);
            auto s = dy.data<T>();
            auto d = dx.data<T>();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] = -s[i];
          });
          maybe_accumulate(xc, dx);
        };
      });
}

Tensor scale(const Tensor& x, double s) {
  return unary_op(
      "scale", x,
      [s](auto v) {
        using T = decltype(v);
        return static_cast<T>(v * static_cast<T>(s));
      },
      [s](const Tensor& xc, const Tensor& oc) {
        return [xc, oc, s]() {
          Tensor dy = grad_of(oc);
          if (!dy.defined()) return;
          Tensor dx = Tensor::empty(dy.shape(), dy.dtype());
          dispatch_dtype(dy.dtype(), [&](auto tag) {
            using T = decltype(tag);
            auto sv = dy.data<T>();
            auto d = dx.data<T>();
            const T f = static_cast<T>(s);
            for (std::size_t i = 0; i < d.size(); ++i) d[i] = sv[i] * f;
          });
          maybe_accumulate(xc, dx);
        };
      });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary_op(
      "add_scalar", x,
      [s](auto v) {
        using T = decltype(v);
        return static_cast<T>(v + static_cast<T>(s));
      },
      [](const Tensor& xc, const Tensor& oc) {
        return [xc, oc]() {
          Tensor dy = grad_of(oc);
          if (!dy.defined()) return;
          maybe_accumulate(xc, dy);
        };
      });
}

Tensor silu(const Tensor& x) {
  Tensor out = Tensor::empty(x.shape(), x.dtype());
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    kernels::silu(x.data<T>().data(), out.data<T>().data(), x.numel());
  });
  if (recording_needed({&x})) {
    out.impl()->on_grad_path = true;
    Tensor xc = x, oc = out;
    Tape::active()->record("silu", [xc, oc]() {
      Tensor dy = grad_of(oc);
      if (!dy.defined() || !xc.on_grad_path()) return;
      Tensor dx = Tensor::empty(xc.shape(), xc.dtype());
      dispatch_dtype(xc.dtype(), [&](auto tag) {
        using T = decltype(tag);
        kernels::silu_backward(xc.data<T>().data(), dy.data<T>().data(), dx.data<T>().data(),
                               xc.numel());
      });
      accumulate_grad(*xc.impl(), dx);
    });
  }
  return out;
}

Tensor log(const Tensor& x) {
  return unary_op(
      "log", x,
      [](auto v) {
        using T = decltype(v);
        return static_cast<T>(std::log(v));
      },
      [](const Tensor& xc, const Tensor& oc) {
        return [xc, oc]() {
          Tensor dy = grad_of(oc);
          if (!dy.defined() || !xc.on_grad_path()) return;
          Tensor dx = Tensor::empty(xc.shape(), xc.dtype());
          dispatch_dtype(xc.dtype(), [&](auto tag) {
            using T = decltype(tag);
            auto xv = xc.data<T>();
            auto dyv = dy.data<T>();
            auto d = dx.data<T>();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] = dyv[i] / xv[i];
          });
          accumulate_grad(*xc.impl(), dx);
        };
      });
}

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  check_same_dtype(a, b, "matmul");
  if (a.rank() < 2 || b.rank() < 2) {
    throw std::invalid_argument("matmul: need rank >= 2, got " + shape_str(a.shape()) + " and " +
                                shape_str(b.shape()));
  }
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const std::int64_t ap = sa[sa.size() - 2], aq = sa[sa.size() - 1];
  const std::int64_t bp = sb[sb.size() - 2], bq = sb[sb.size() - 1];
  const std::int64_t m = trans_a ? aq : ap;
  const std::int64_t ka = trans_a ? ap : aq;
  const std::int64_t kb = trans_b ? bq : bp;
  const std::int64_t n = trans_b ? bp : bq;
  if (ka != kb) {
    throw std::invalid_argument("matmul: inner extents disagree, " + shape_str(sa) +
                                (trans_a ? "^T" : "") + " x " + shape_str(sb) +
                                (trans_b ? "^T" : ""));
  }
  Shape lead_a(sa.begin(), sa.end() - 2);
  Shape lead_b(sb.begin(), sb.end() - 2);
  const std::int64_t batch_a = shape_numel(lead_a);
  const std::int64_t batch_b = shape_numel(lead_b);
  Shape lead;
  std::int64_t batch;
  if (batch_a == batch_b) {
    if (lead_a != lead_b && batch_a != 1) {
      throw std::invalid_argument("matmul: batch extents disagree, " + shape_str(sa) + " x " +
                                  shape_str(sb));
    }
    lead = lead_a;
    batch = batch_a;
  } else if (batch_a == 1) {
    lead = lead_b;
    batch = batch_b;
  } else if (batch_b == 1) {
    lead = lead_a;
    batch = batch_a;
  } else {
    throw std::invalid_argument("matmul: batch extents disagree, " + shape_str(sa) + " x " +
                                shape_str(sb));
  }
  const std::int64_t a_bs = batch_a == batch ? ap * aq : 0;
  const std::int64_t b_bs = batch_b == batch ? bp * bq : 0;

  Shape out_shape = lead;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor out = Tensor::empty(out_shape, a.dtype());
  dispatch_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    kernels::matmul(a.data<T>().data(), b.data<T>().data(), out.data<T>().data(), batch, m, n, ka,
                    a_bs, b_bs, trans_a, trans_b, false);
  });

  if (recording_needed({&a, &b})) {
    out.impl()->on_grad_path = true;
    Tensor ac = a, bc = b, oc = out;
    const std::int64_t k = ka;
    Tape::active()->record("matmul", [ac, bc, oc, trans_a, trans_b, batch, m, n, k, a_bs, b_bs,
                                      ap, aq, bp, bq]() {
      Tensor dy = grad_of(oc);
      if (!dy.defined()) return;
      dispatch_dtype(ac.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* A = ac.data<T>().data();
        const T* B = bc.data<T>().data();
        const T* dC = dy.data<T>().data();
        // Per-batch single products accumulate serially so a broadcast operand
        // sums its gradient across the batch deterministically.
        if (ac.on_grad_path()) {
          Tensor da = Tensor::zeros(ac.shape(), ac.dtype());
          T* dA = da.data<T>().data();
          for (std::int64_t g = 0; g < batch; ++g) {
            const T* dCg = dC + g * m * n;
            const T* Bg = B + g * b_bs;
            T* dAg = dA + g * a_bs;
            if (!trans_a) {
              // dA[m,k] = dC . opB^T
              kernels::matmul(dCg, Bg, dAg, 1, ap, aq, n, 0, 0, false, !trans_b, true);
            } else if (!trans_b) {
              // dA[k,m] = B . dC^T
              kernels::matmul(Bg, dCg, dAg, 1, ap, aq, n, 0, 0, false, true, true);
            } else {
              // dA[k,m] = B^T . dC^T
              kernels::matmul(Bg, dCg, dAg, 1, ap, aq, n, 0, 0, true, true, true);
            }
          }
          accumulate_grad(*ac.impl(), da);
        }
        if (bc.on_grad_path()) {
          Tensor db = Tensor::zeros(bc.shape(), bc.dtype());
          T* dB = db.data<T>().data();
          for (std::int64_t g = 0; g < batch; ++g) {
            const T* dCg = dC + g * m * n;
            const T* Ag = A + g * a_bs;
            T* dBg = dB + g * b_bs;
            if (!trans_b) {
              // dB[k,n] = opA^T . dC
              kernels::matmul(Ag, dCg, dBg, 1, bp, bq, m, 0, 0, !trans_a, false, true);
            } else if (!trans_a) {
              // dB[n,k] = dC^T . A
              kernels::matmul(dCg, Ag, dBg, 1, bp, bq, m, 0, 0, true, false, true);
            } else {
              // dB[n,k] = dC^T . A^T
              kernels::matmul(dCg, Ag, dBg, 1, bp, bq, m, 0, 0, true, true, true);
            }
          }
          accumulate_grad(*bc.impl(), db);
        }
      });
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  check_same_dtype(x, w, "linear");
  check_same_dtype(x, b, "linear");
  if (w.rank() != 2 || b.rank() != 1) {
    throw std::invalid_argument("linear: want w [in,out] and b [out], got " +
                                shape_str(w.shape()) + " and " + shape_str(b.shape()));
  }
  const std::int64_t in = w.extent(0), out_dim = w.extent(1);
  if (x.extent(x.rank() - 1) != in || b.extent(0) != out_dim) {
    throw std::invalid_argument("linear: shapes disagree, x " + shape_str(x.shape()) + ", w " +
                                shape_str(w.shape()) + ", b " + shape_str(b.shape()));
  }
  const std::int64_t rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out_dim;
  Tensor out = Tensor::empty(out_shape, x.dtype());
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    kernels::matmul(x.data<T>().data(), w.data<T>().data(), out.data<T>().data(), 1, rows, out_dim,
                    in, 0, 0, false, false, false);
    auto ov = out.data<T>();
    auto bv = b.data<T>();
    for (std::int64_t r = 0; r < rows; ++r) {
      T* row = ov.data() + r * out_dim;
      for (std::int64_t j = 0; j < out_dim; ++j) row[j] += bv[static_cast<std::size_t>(j)];
    }
  });
  if (recording_needed({&x, &w, &b})) {
    out.impl()->on_grad_path = true;
    Tensor xc = x, wc = w, bcap = b, oc = out;
    Tape::active()->record("linear", [xc, wc, bcap, oc, rows, in, out_dim]() {
      Tensor dy = grad_of(oc);
      if (!dy.defined()) return;
      dispatch_dtype(xc.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* dY = dy.data<T>().data();
        if (xc.on_grad_path()) {
          Tensor dx = Tensor::empty(xc.shape(), xc.dtype());
          // dx = dy . w^T
          kernels::matmul(dY, wc.data<T>().data(), dx.data<T>().data(), 1, rows, in, out_dim, 0, 0,
                          false, true, false);
          accumulate_grad(*xc.impl(), dx);
        }
        if (wc.on_grad_path()) {
          Tensor dw = Tensor::empty(wc.shape(), wc.dtype());
          // dw = x^T . dy
          kernels::matmul(xc.data<T>().data(), dY, dw.data<T>().data(), 1, in, out_dim, rows, 0, 0,
                          true, false, false);
          accumulate_grad(*wc.impl(), dw);
        }
        if (bcap.on_grad_path()) {
          Tensor db = Tensor::zeros(bcap.shape(), bcap.dtype());
          auto d = db.data<T>();
          for (std::int64_t r = 0; r < rows; ++r) {
            const T* row = dY + r * out_dim;
            for (std::int64_t j = 0; j < out_dim; ++j) d[static_cast<std::size_t>(j)] += row[j];
          }
          accumulate_grad(*bcap.impl(), db);
        }
      });
    });
  }
  return out;
}

Tensor softmax(const Tensor& x, int axis) {
  const int a = normalize_axis(axis, x.rank(), "softmax");
  bool finite = true;
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    for (T v : x.data<T>()) {
      if (!std::isfinite(static_cast<double>(v))) {
        finite = false;
        break;
      }
    }
  });
  if (!finite) throw std::runtime_error("softmax: non-finite input");
  const View3 v = axis_view(x.shape(), a);
  Tensor out = Tensor::empty(x.shape(), x.dtype());
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    kernels::softmax(x.data<T>().data(), out.data<T>().data(), v.outer, v.n, v.inner);
  });
  if (recording_needed({&x})) {
    out.impl()->on_grad_path = true;
    Tensor xc = x, oc = out;
    Tape::active()->record("softmax", [xc, oc, v]() {
      Tensor dy = grad_of(oc);
      if (!dy.defined() || !xc.on_grad_path()) return;
      Tensor dx = Tensor::empty(xc.shape(), xc.dtype());
      dispatch_dtype(xc.dtype(), [&](auto tag) {
        using T = decltype(tag);
        kernels::softmax_backward(oc.data<T>().data(), dy.data<T>().data(), dx.data<T>().data(),
                                  v.outer, v.n, v.inner);
      });
      accumulate_grad(*xc.impl(), dx);
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, int axis, double eps) {
  const int a = normalize_axis(axis, x.rank(), "layer_norm");
  if (x.extent(a) < 2) {
    throw std::invalid_argument("layer_norm: axis extent " + std::to_string(x.extent(a)) +
                                " < 2 has no meaningful variance");
  }
  if (eps < 0) throw std::invalid_argument("layer_norm: negative eps");
  const View3 v = axis_view(x.shape(), a);
  Tensor out = Tensor::empty(x.shape(), x.dtype());
  Tensor mean = Tensor::empty({v.outer * v.inner}, x.dtype());
  Tensor rstd = Tensor::empty({v.outer * v.inner}, x.dtype());
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    kernels::layer_norm(x.data<T>().data(), out.data<T>().data(), mean.data<T>().data(),
                        rstd.data<T>().data(), v.outer, v.n, v.inner, static_cast<T>(eps));
  });
  if (recording_needed({&x})) {
    out.impl()->on_grad_path = true;
    Tensor xc = x, oc = out;
    Tape::active()->record("layer_norm", [xc, oc, mean, rstd, v]() {
      Tensor dy = grad_of(oc);
      if (!dy.defined() || !xc.on_grad_path()) return;
      Tensor dx = Tensor::empty(xc.shape(), xc.dtype());
      dispatch_dtype(xc.dtype(), [&](auto tag) {
        using T = decltype(tag);
        kernels::layer_norm_backward(xc.data<T>().data(), dy.data<T>().data(),
                                     mean.data<T>().data(), rstd.data<T>().data(),
                                     dx.data<T>().data(), v.outer, v.n, v.inner);
      });
      accumulate_grad(*xc.impl(), dx);
    });
  }
  return out;
}

Tensor conv_layers(const Tensor& h, const Tensor& kernel, std::int64_t k, std::int64_t p) {
  check_same_dtype(h, kernel, "conv_layers");
  if (h.rank() != 4) {
    throw std::invalid_argument("conv_layers: want h [b,m,s,z], got " + shape_str(h.shape()));
  }
  if (kernel.rank() != 1 || kernel.extent(0) != k) {
    throw std::invalid_argument("conv_layers: kernel shape " + shape_str(kernel.shape()) +
                                " does not hold k=" + std::to_string(k) + " taps");
  }
  if (k < 1 || p < 0) throw ConfigError("conv_layers: need k >= 1 and p >= 0");
  const std::int64_t b = h.extent(0), m = h.extent(1), s = h.extent(2), z = h.extent(3);
  if (k > m + 2 * p) {
    throw ConfigError("conv_layers: kernel size k=" + std::to_string(k) +
                      " exceeds padded layer extent m+2p=" + std::to_string(m + 2 * p));
  }
  const std::int64_t cols = s * z;
  Tensor out = Tensor::empty({b, 1, s, z}, h.dtype());
  dispatch_dtype(h.dtype(), [&](auto tag) {
    using T = decltype(tag);
    kernels::conv_layers(h.data<T>().data(), kernel.data<T>().data(), out.data<T>().data(), b, m,
                         cols, k, p);
  });
  if (recording_needed({&h, &kernel})) {
    out.impl()->on_grad_path = true;
    Tensor hc = h, kc = kernel, oc = out;
    Tape::active()->record("conv_layers", [hc, kc, oc, b, m, cols, k, p]() {
      Tensor dy = grad_of(oc);
      if (!dy.defined()) return;
      dispatch_dtype(hc.dtype(), [&](auto tag) {
        using T = decltype(tag);
        if (hc.on_grad_path()) {
          Tensor dh = Tensor::empty(hc.shape(), hc.dtype());
          kernels::conv_layers_backward_input(kc.data<T>().data(), dy.data<T>().data(),
                                              dh.data<T>().data(), b, m, cols, k, p);
          accumulate_grad(*hc.impl(), dh);
        }
        if (kc.on_grad_path()) {
          Tensor dk = Tensor::empty(kc.shape(), kc.dtype());
          kernels::conv_layers_backward_kernel(hc.data<T>().data(), dy.data<T>().data(),
                                               dk.data<T>().data(), b, m, cols, k, p);
          accumulate_grad(*kc.impl(), dk);
        }
      });
    });
  }
  return out;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::int64_t stride,
              std::int64_t pad) {
  check_same_dtype(x, w, "conv2d");
  if (x.rank() != 4 || w.rank() != 4) {
    throw std::invalid_argument("conv2d: want x [b,ci,h,w] and w [co,ci,kh,kw], got " +
                                shape_str(x.shape()) + " and " + shape_str(w.shape()));
  }
  const std::int64_t b = x.extent(0), ci = x.extent(1), h = x.extent(2), wd = x.extent(3);
  const std::int64_t co = w.extent(0), kh = w.extent(2), kw = w.extent(3);
  if (w.extent(1) != ci) {
    throw std::invalid_argument("conv2d: channel extents disagree, x " + shape_str(x.shape()) +
                                " vs w " + shape_str(w.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.extent(0) != co)) {
    throw std::invalid_argument("conv2d: bias shape " + shape_str(bias.shape()) +
                                " does not match " + std::to_string(co) + " channels");
  }
  if (stride < 1 || pad < 0) throw std::invalid_argument("conv2d: need stride >= 1 and pad >= 0");
  const std::int64_t ho = (h + 2 * pad - kh) / stride + 1;
  const std::int64_t wo = (wd + 2 * pad - kw) / stride + 1;
  if (ho < 1 || wo < 1) {
    throw std::invalid_argument("conv2d: kernel does not fit input of shape " +
                                shape_str(x.shape()));
  }
  Tensor out = Tensor::empty({b, co, ho, wo}, x.dtype());
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* bp = bias.defined() ? bias.data<T>().data() : nullptr;
    kernels::conv2d(x.data<T>().data(), w.data<T>().data(), bp, out.data<T>().data(), b, ci, h, wd,
                    co, kh, kw, stride, pad, ho, wo);
  });
  const bool rec = bias.defined() ? recording_needed({&x, &w, &bias}) : recording_needed({&x, &w});
  if (rec) {
    out.impl()->on_grad_path = true;
    Tensor xc = x, wc = w, bc = bias, oc = out;
    Tape::active()->record("conv2d", [xc, wc, bc, oc, b, ci, h, wd, co, kh, kw, stride, pad, ho,
                                      wo]() {
      Tensor dy = grad_of(oc);
      if (!dy.defined()) return;
      dispatch_dtype(xc.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* dY = dy.data<T>().data();
        if (xc.on_grad_path()) {
          Tensor dx = Tensor::empty(xc.shape(), xc.dtype());
          kernels::conv2d_backward_input(wc.data<T>().data(), dY, dx.data<T>().data(), b, ci, h,
                                         wd, co, kh, kw, stride, pad, ho, wo);
          accumulate_grad(*xc.impl(), dx);
        }
        const bool need_w = wc.on_grad_path();
        const bool need_b = bc.defined() && bc.on_grad_path();
        if (need_w || need_b) {
          Tensor dw = Tensor::empty(wc.shape(), wc.dtype());
          Tensor db = need_b ? Tensor::empty(bc.shape(), bc.dtype()) : Tensor();
          kernels::conv2d_backward_weight(xc.data<T>().data(), dY, dw.data<T>().data(),
                                          need_b ? db.data<T>().data() : nullptr, b, ci, h, wd, co,
                                          kh, kw, stride, pad, ho, wo);
          if (need_w) accumulate_grad(*wc.impl(), dw);
          if (need_b) accumulate_grad(*bc.impl(), db);
        }
      });
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " +
                                shape_str(shape));
  }
  Tensor out = Tensor::empty(shape, x.dtype());
  std::copy(x.bytes().begin(), x.bytes().end(), out.bytes_mut().begin());
  if (recording_needed({&x})) {
    out.impl()->on_grad_path = true;
    Tensor xc = x, oc = out;
    Tape::active()->record("reshape", [xc, oc]() {
      Tensor dy = grad_of(oc);
      if (!dy.defined() || !xc.on_grad_path()) return;
      Tensor dx = Tensor::empty(xc.shape(), xc.dtype());
      std::copy(dy.bytes().begin(), dy.bytes().end(), dx.bytes_mut().begin());
      accumulate_grad(*xc.impl(), dx);
    });
  }
  return out;
}

namespace {

// out[coord[axes[d]]...] = x[coord...]; used forward and (with the inverse
// permutation) backward.
Tensor permute_data(const Tensor& x, const std::vector<int>& axes) {
  const int r = x.rank();
  Shape out_shape(static_cast<std::size_t>(r));
  for (int d = 0; d < r; ++d)
    out_shape[static_cast<std::size_t>(d)] = x.extent(axes[static_cast<std::size_t>(d)]);
  Tensor out = Tensor::empty(out_shape, x.dtype());
  std::vector<std::int64_t> x_strides(static_cast<std::size_t>(r), 1);
  for (int d = r - 2; d >= 0; --d)
    x_strides[static_cast<std::size_t>(d)] =
        x_strides[static_cast<std::size_t>(d + 1)] * x.extent(d + 1);
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xv = x.data<T>();
    auto ov = out.data<T>();
    std::vector<std::int64_t> coord(static_cast<std::size_t>(r), 0);
    for (std::int64_t lin = 0; lin < out.numel(); ++lin) {
      std::int64_t src = 0;
      for (int d = 0; d < r; ++d)
        src += coord[static_cast<std::size_t>(d)] *
               x_strides[static_cast<std::size_t>(axes[static_cast<std::size_t>(d)])];
      ov[static_cast<std::size_t>(lin)] = xv[static_cast<std::size_t>(src)];
      for (int d = r - 1; d >= 0; --d) {
        auto& c = coord[static_cast<std::size_t>(d)];
        if (++c < out_shape[static_cast<std::size_t>(d)]) break;
        c = 0;
      }
    }
  });
  return out;
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<int>& axes) {
  const int r = x.rank();
  if (static_cast<int>(axes.size()) != r) {
    throw std::invalid_argument("permute: got " + std::to_string(axes.size()) +
                                " axes for rank " + std::to_string(r));
  }
  std::vector<bool> seen(static_cast<std::size_t>(r), false);
  for (int a : axes) {
    if (a < 0 || a >= r || seen[static_cast<std::size_t>(a)]) {
      throw std::invalid_argument("permute: axes are not a permutation of 0.." +
                                  std::to_string(r - 1));
    }
    seen[static_cast<std::size_t>(a)] = true;
  }
  Tensor out = permute_data(x, axes);
  if (recording_needed({&x})) {
    out.impl()->on_grad_path = true;
    std::vector<int> inverse(axes.size());
    for (int d = 0; d < r; ++d) inverse[static_cast<std::size_t>(axes[static_cast<std::size_t>(d)])] = d;
    Tensor xc = x, oc = out;
    Tape::active()->record("permute", [xc, oc, inverse]() {
      Tensor dy = grad_of(oc);
      if (!dy.defined() || !xc.on_grad_path()) return;
      accumulate_grad(*xc.impl(), permute_data(dy, inverse));
    });
  }
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const int a = normalize_axis(axis, parts[0].rank(), "concat");
  Shape out_shape = parts[0].shape();
  std::int64_t total = 0;
  for (const Tensor& t : parts) {
    check_same_dtype(parts[0], t, "concat");
    if (t.rank() != parts[0].rank()) {
      throw std::invalid_argument("concat: rank mismatch, " + shape_str(parts[0].shape()) +
                                  " vs " + shape_str(t.shape()));
    }
    for (int d = 0; d < t.rank(); ++d) {
      if (d != a && t.extent(d) != out_shape[static_cast<std::size_t>(d)]) {
        throw std::invalid_argument("concat: extents disagree off-axis, " +
                                    shape_str(parts[0].shape()) + " vs " + shape_str(t.shape()));
      }
    }
    total += t.extent(a);
  }
  out_shape[static_cast<std::size_t>(a)] = total;
  Tensor out = Tensor::empty(out_shape, parts[0].dtype());
  const View3 vo = axis_view(out_shape, a);
  dispatch_dtype(out.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto ov = out.data<T>();
    std::int64_t n_off = 0;
    for (const Tensor& t : parts) {
      const View3 vt = axis_view(t.shape(), a);
      auto tv = t.data<T>();
      for (std::int64_t o = 0; o < vt.outer; ++o) {
        const T* src = tv.data() + o * vt.n * vt.inner;
        T* dst = ov.data() + (o * vo.n + n_off) * vo.inner;
        std::copy(src, src + vt.n * vt.inner, dst);
      }
      n_off += vt.n;
    }
  });
  bool rec = false;
  for (const Tensor& t : parts) {
    if (recording_needed({&t})) rec = true;
  }
  if (rec) {
    out.impl()->on_grad_path = true;
    std::vector<Tensor> caps = parts;
    Tensor oc = out;
    const int ax = a;
    Tape::active()->record("concat", [caps, oc, ax]() {
      Tensor dy = grad_of(oc);
      if (!dy.defined()) return;
      const View3 vo = axis_view(oc.shape(), ax);
      std::int64_t n_off = 0;
      for (const Tensor& t : caps) {
        const View3 vt = axis_view(t.shape(), ax);
        if (t.on_grad_path()) {
          Tensor dt = Tensor::empty(t.shape(), t.dtype());
          dispatch_dtype(t.dtype(), [&](auto tag) {
            using T = decltype(tag);
            auto dyv = dy.data<T>();
            auto dv = dt.data<T>();
            for (std::int64_t o = 0; o < vt.outer; ++o) {
              const T* src = dyv.data() + (o * vo.n + n_off) * vo.inner;
              T* dst = dv.data() + o * vt.n * vt.inner;
              std::copy(src, src + vt.n * vt.inner, dst);
            }
          });
          accumulate_grad(*t.impl(), dt);
        }
        n_off += vt.n;
      }
    });
  }
  return out;
}

Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t len) {
  const int a = normalize_axis(axis, x.rank(), "slice");
  if (start < 0 || len < 1 || start + len > x.extent(a)) {
    throw std::invalid_argument("slice: [" + std::to_string(start) + ", " +
                                std::to_string(start + len) + ") out of range for axis extent " +
                                std::to_string(x.extent(a)));
  }
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(a)] = len;
  Tensor out = Tensor::empty(out_shape, x.dtype());
  const View3 vx = axis_view(x.shape(), a);
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xv = x.data<T>();
    auto ov = out.data<T>();
    for (std::int64_t o = 0; o < vx.outer; ++o) {
      const T* src = xv.data() + (o * vx.n + start) * vx.inner;
      T* dst = ov.data() + o * len * vx.inner;
      std::copy(src, src + len * vx.inner, dst);
    }
  });
  if (recording_needed({&x})) {
    out.impl()->on_grad_path = true;
    Tensor xc = x, oc = out;
    const int ax = a;
    Tape::active()->record("slice", [xc, oc, ax, start, len]() {
      Tensor dy = grad_of(oc);
      if (!dy.defined() || !xc.on_grad_path()) return;
      Tensor dx = Tensor::zeros(xc.shape(), xc.dtype());
      const View3 vx = axis_view(xc.shape(), ax);
      dispatch_dtype(xc.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto dyv = dy.data<T>();
        auto dv = dx.data<T>();
        for (std::int64_t o = 0; o < vx.outer; ++o) {
          const T* src = dyv.data() + o * len * vx.inner;
          T* dst = dv.data() + (o * vx.n + start) * vx.inner;
          std::copy(src, src + len * vx.inner, dst);
        }
      });
      accumulate_grad(*xc.impl(), dx);
    });
  }
  return out;
}

namespace {

Tensor reduce_full(const Tensor& x, bool take_mean, const char* name) {
  Tensor out = Tensor::empty({1}, x.dtype());
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xv = x.data<T>();
    T acc = T(0);
    for (T v : xv) acc += v;  // fixed left-to-right order
    if (take_mean) acc /= static_cast<T>(x.numel());
    out.data<T>()[0] = acc;
  });
  if (recording_needed({&x})) {
    out.impl()->on_grad_path = true;
    Tensor xc = x, oc = out;
    const double factor = take_mean ? 1.0 / static_cast<double>(x.numel()) : 1.0;
    Tape::active()->record(name, [xc, oc, factor]() {
      Tensor dy = grad_of(oc);
      if (!dy.defined() || !xc.on_grad_path()) return;
      accumulate_grad(*xc.impl(), Tensor::full(xc.shape(), dy.item() * factor, xc.dtype()));
    });
  }
  return out;
}

Tensor reduce_axis(const Tensor& x, int axis, bool take_mean, const char* name) {
  const int a = normalize_axis(axis, x.rank(), name);
  const View3 v = axis_view(x.shape(), a);
  Shape out_shape;
  for (int d = 0; d < x.rank(); ++d) {
    if (d != a) out_shape.push_back(x.extent(d));
  }
  if (out_shape.empty()) out_shape = {1};
  Tensor out = Tensor::empty(out_shape, x.dtype());
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xv = x.data<T>();
    auto ov = out.data<T>();
    for (std::int64_t o = 0; o < v.outer; ++o) {
      for (std::int64_t in = 0; in < v.inner; ++in) {
        T acc = T(0);
        for (std::int64_t i = 0; i < v.n; ++i)
          acc += xv[static_cast<std::size_t>((o * v.n + i) * v.inner + in)];
        if (take_mean) acc /= static_cast<T>(v.n);
        ov[static_cast<std::size_t>(o * v.inner + in)] = acc;
      }
    }
  });
  if (recording_needed({&x})) {
    out.impl()->on_grad_path = true;
    Tensor xc = x, oc = out;
    const double factor = take_mean ? 1.0 / static_cast<double>(v.n) : 1.0;
    Tape::active()->record(name, [xc, oc, v, factor]() {
      Tensor dy = grad_of(oc);
      if (!dy.defined() || !xc.on_grad_path()) return;
      Tensor dx = Tensor::empty(xc.shape(), xc.dtype());
      dispatch_dtype(xc.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto dyv = dy.data<T>();
        auto dv = dx.data<T>();
        const T f = static_cast<T>(factor);
        for (std::int64_t o = 0; o < v.outer; ++o) {
          for (std::int64_t i = 0; i < v.n; ++i) {
            for (std::int64_t in = 0; in < v.inner; ++in) {
              dv[static_cast<std::size_t>((o * v.n + i) * v.inner + in)] =
                  dyv[static_cast<std::size_t>(o * v.inner + in)] * f;
            }
          }
        }
      });
      accumulate_grad(*xc.impl(), dx);
    });
  }
  return out;
}

}  // namespace

Tensor sum(const Tensor& x) { return reduce_full(x, false, "sum"); }
Tensor mean(const Tensor& x) { return reduce_full(x, true, "mean"); }
Tensor sum_axis(const Tensor& x, int axis) { return reduce_axis(x, axis, false, "sum_axis"); }
Tensor mean_axis(const Tensor& x, int axis) { return reduce_axis(x, axis, true, "mean_axis"); }

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h) {
  if (x.dtype() != DType::f64) throw std::invalid_argument("grad_check: x must be f64");
  Tensor leaf = x.clone();
  leaf.set_requires_grad(true);
  Tensor analytic;
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor y = f(leaf);
    if (y.numel() != 1) {
      throw std::invalid_argument("grad_check: f must be scalar-valued, got " +
                                  shape_str(y.shape()));
    }
    tape.backward(y);
    analytic = leaf.grad();
  }
  double max_rel = 0.0;
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    Tensor xp = x.clone();
    xp.set_value_at(i, xp.value_at(i) + h);
    Tensor xm = x.clone();
    xm.set_value_at(i, xm.value_at(i) - h);
    const double numeric = (f(xp).item() - f(xm).item()) / (2.0 * h);
    const double a = analytic.value_at(i);
    const double rel =
        std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace xbridge::ops
