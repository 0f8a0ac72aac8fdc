// SPDX-License-Identifier: Apache-2.0
#include "scob/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "scob/error.hpp"

namespace scob::ops {

namespace {

using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::Matrix<Real, Eigen::Dynamic, 1>>;
using ConstVecMap = Eigen::Map<const Eigen::Matrix<Real, Eigen::Dynamic, 1>>;

void check_finite(const Tensor& t, const char* prim) {
  if (!t.defined()) throw ContractError(std::string(prim) + ": undefined input tensor");
  for (Real v : t.values()) {
    if (!std::isfinite(v)) throw NumericError(std::string(prim) + ": non-finite input value");
  }
}

bool needs_record(std::initializer_list<const Tensor*> inputs) {
  if (Tape::active() == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

// Wraps freshly computed values in an output tensor and, when required,
// records the backward closure. `fn` receives the output impl.
template <typename Fn>
Tensor emit(const char* prim, Shape shape, std::vector<Real> values, std::initializer_list<const Tensor*> inputs,
            Fn&& fn) {
  Tensor out = Tensor::from(std::move(shape), std::move(values));
  if (needs_record(inputs)) {
    TensorImpl* o = out.impl();
    o->requires_grad = true;
    o->is_leaf = false;
    Tape::Record rec;
    rec.primitive = prim;
    for (const Tensor* t : inputs) {
      if (t->defined()) rec.inputs.push_back(t->impl_ptr());
    }
    rec.output = out.impl_ptr();
    rec.backward = [o, fn = std::forward<Fn>(fn)]() { fn(*o); };
    Tape::active()->push(std::move(rec));
  }
  return out;
}

bool wants_grad(const Tensor& t) { return t.defined() && t.requires_grad(); }

int normalize_axis(int axis, std::size_t rank, const char* prim) {
  int r = static_cast<int>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw DimensionError(std::string(prim) + ": axis out of range");
  return axis;
}

std::vector<std::int64_t> strides_of(const Shape& s) {
  std::vector<std::int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

// ---- broadcasting -------------------------------------------------------

struct Broadcast {
  Shape out;
  std::vector<std::int64_t> stride_a, stride_b;  // per output axis, 0 on broadcast axes
  bool same = false;
};

Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* prim) {
  Broadcast p;
  if (a == b) {
    p.out = a;
    p.same = true;
    return p;
  }
  const std::size_t r = std::max(a.size(), b.size());
  Shape pa(r, 1), pb(r, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(r - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(r - b.size()));
  p.out.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) {
      throw DimensionError(std::string(prim) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    p.out[i] = std::max(pa[i], pb[i]);
  }
  auto sa = strides_of(pa), sb = strides_of(pb);
  p.stride_a.resize(r);
  p.stride_b.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    p.stride_a[i] = pa[i] == 1 ? 0 : sa[i];
    p.stride_b[i] = pb[i] == 1 ? 0 : sb[i];
  }
  return p;
}

// Calls f(out_index, a_index, b_index) over every output element.
template <typename F>
void for_each_broadcast(const Broadcast& p, F&& f) {
  const std::int64_t n = shape_numel(p.out);
  if (p.same) {
    for (std::int64_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  const std::size_t r = p.out.size();
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t ia = 0, ib = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    f(i, ia, ib);
    for (int k = static_cast<int>(r) - 1; k >= 0; --k) {
      ++idx[k];
      ia += p.stride_a[k];
      ib += p.stride_b[k];
      if (idx[k] < p.out[k]) break;
      ia -= p.stride_a[k] * p.out[k];
      ib -= p.stride_b[k] * p.out[k];
      idx[k] = 0;
    }
  }
}

enum class BinOp { Add, Sub, Mul };

Tensor binary(const Tensor& a, const Tensor& b, BinOp op, const char* prim) {
  check_finite(a, prim);
  check_finite(b, prim);
  Broadcast p = plan_broadcast(a.shape(), b.shape(), prim);
  std::vector<Real> out(static_cast<std::size_t>(shape_numel(p.out)));
  auto av = a.values();
  auto bv = b.values();
  for_each_broadcast(p, [&](std::int64_t i, std::int64_t ia, std::int64_t ib) {
    switch (op) {
      case BinOp::Add: out[i] = av[ia] + bv[ib]; break;
      case BinOp::Sub: out[i] = av[ia] - bv[ib]; break;
      case BinOp::Mul: out[i] = av[ia] * bv[ib]; break;
    }
  });
  TensorImpl* ai = a.impl();
  TensorImpl* bi = b.impl();
  bool ga = wants_grad(a), gb = wants_grad(b);
  return emit(prim, p.out, std::move(out), {&a, &b}, [ai, bi, ga, gb, p, op](TensorImpl& o) {
    const auto& g = o.grad;
    if (ga) {
      auto& da = grad_buffer(*ai);
      for_each_broadcast(p, [&](std::int64_t i, std::int64_t ia, std::int64_t ib) {
        da[ia] += op == BinOp::Mul ? g[i] * bi->value[ib] : g[i];
      });
    }
    if (gb) {
      auto& db = grad_buffer(*bi);
      for_each_broadcast(p, [&](std::int64_t i, std::int64_t ia, std::int64_t ib) {
        switch (op) {
          case BinOp::Add: db[ib] += g[i]; break;
          case BinOp::Sub: db[ib] -= g[i]; break;
          case BinOp::Mul: db[ib] += g[i] * ai->value[ia]; break;
        }
      });
    }
  });
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, const char* prim, Fwd&& fwd, Deriv&& deriv) {
  check_finite(x, prim);
  auto xv = x.values();
  std::vector<Real> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  TensorImpl* xi = x.impl();
  return emit(prim, x.shape(), std::move(out), {&x}, [xi, deriv](TensorImpl& o) {
    auto& dx = grad_buffer(*xi);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += o.grad[i] * deriv(xi->value[i], o.value[i]);
  });
}

// Splits a shape around `axis` into (outer, extent, inner).
struct AxisSplit {
  std::int64_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, int axis) {
  AxisSplit r;
  for (int i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Mul, "mul"); }

Tensor scale(const Tensor& x, Real s) {
  return unary(
      x, "scale", [s](Real v) { return v * s; }, [s](Real, Real) { return s; });
}

Tensor add_scalar(const Tensor& x, Real s) {
  return unary(
      x, "add_scalar", [s](Real v) { return v + s; }, [](Real, Real) { return Real(1); });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, "relu", [](Real v) { return v > 0 ? v : Real(0); }, [](Real v, Real) { return v > 0 ? Real(1) : Real(0); });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, "sigmoid",
      [](Real v) {
        if (v >= 0) return Real(1) / (Real(1) + std::exp(-v));
        Real e = std::exp(v);
        return e / (Real(1) + e);
      },
      [](Real, Real y) { return y * (Real(1) - y); });
}

Tensor exp(const Tensor& x) {
  Tensor out = unary(
      x, "exp", [](Real v) { return std::exp(v); }, [](Real, Real y) { return y; });
  for (Real v : out.values()) {
    if (!std::isfinite(v)) throw NumericError("exp: overflow");
  }
  return out;
}

Tensor log(const Tensor& x) {
  for (Real v : x.values()) {
    if (!(v > 0)) throw NumericError("log: non-positive input");
  }
  return unary(
      x, "log", [](Real v) { return std::log(v); }, [](Real v, Real) { return Real(1) / v; });
}

Tensor clamp(const Tensor& x, Real lo, Real hi) {
  if (!(lo <= hi)) throw ContractError("clamp: lo must not exceed hi");
  return unary(
      x, "clamp", [lo, hi](Real v) { return std::clamp(v, lo, hi); },
      [lo, hi](Real v, Real) { return (v > lo && v < hi) ? Real(1) : Real(0); });
}

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_b) {
  check_finite(a, "matmul");
  check_finite(b, "matmul");
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2) throw DimensionError("matmul: operands need rank >= 2");
  const std::int64_t M = as[as.size() - 2], K = as.back();
  const std::int64_t bk = trans_b ? bs.back() : bs[bs.size() - 2];
  const std::int64_t N = trans_b ? bs[bs.size() - 2] : bs.back();
  if (bk != K) {
    throw DimensionError("matmul: inner extents differ: " + shape_str(as) + " x " + shape_str(bs) +
                         (trans_b ? "^T" : ""));
  }
  std::int64_t batch = 1;
  for (std::size_t i = 0; i + 2 < as.size(); ++i) batch *= as[i];
  const bool shared = bs.size() == 2;
  if (!shared) {
    if (bs.size() != as.size() || !std::equal(as.begin(), as.end() - 2, bs.begin())) {
      throw DimensionError("matmul: batch extents differ: " + shape_str(as) + " x " + shape_str(bs));
    }
  }
  Shape out_shape(as.begin(), as.end() - 1);
  out_shape.push_back(N);
  std::vector<Real> out(static_cast<std::size_t>(batch * M * N));

  auto b_mat = [trans_b, K, N](const Real* p) {
    return trans_b ? ConstMatMap(p, N, K) : ConstMatMap(p, K, N);
  };

  if (shared) {
    ConstMatMap A(a.values().data(), batch * M, K);
    MatMap C(out.data(), batch * M, N);
    if (trans_b) {
      C.noalias() = A * b_mat(b.values().data()).transpose();
    } else {
      C.noalias() = A * b_mat(b.values().data());
    }
  } else {
    for (std::int64_t i = 0; i < batch; ++i) {
      ConstMatMap A(a.values().data() + i * M * K, M, K);
      MatMap C(out.data() + i * M * N, M, N);
      const Real* bp = b.values().data() + i * K * N;
      if (trans_b) {
        C.noalias() = A * b_mat(bp).transpose();
      } else {
        C.noalias() = A * b_mat(bp);
      }
    }
  }

  TensorImpl* ai = a.impl();
  TensorImpl* bi = b.impl();
  bool ga = wants_grad(a), gb = wants_grad(b);
  return emit("matmul", out_shape, std::move(out), {&a, &b},
              [ai, bi, ga, gb, shared, trans_b, batch, M, K, N](TensorImpl& o) {
                const std::int64_t nb = shared ? 1 : batch;
                const std::int64_t rows = shared ? batch * M : M;
                for (std::int64_t i = 0; i < nb; ++i) {
                  ConstMatMap G(o.grad.data() + i * rows * N, rows, N);
                  const Real* bp = bi->value.data() + i * K * N;
                  if (ga) {
                    MatMap dA(grad_buffer(*ai).data() + i * rows * K, rows, K);
                    if (trans_b) {
                      dA.noalias() += G * ConstMatMap(bp, N, K);
                    } else {
                      dA.noalias() += G * ConstMatMap(bp, K, N).transpose();
                    }
                  }
                  if (gb) {
                    ConstMatMap A(ai->value.data() + i * rows * K, rows, K);
                    Real* dbp = grad_buffer(*bi).data() + i * K * N;
                    if (trans_b) {
                      MatMap dB(dbp, N, K);
                      dB.noalias() += G.transpose() * A;
                    } else {
                      MatMap dB(dbp, K, N);
                      dB.noalias() += A.transpose() * G;
                    }
                  }
                }
              });
}

namespace {

// Column buffer for one image: rows index (c, ky, kx), columns index output pixels.
void im2col(const Real* img, std::int64_t C, std::int64_t H, std::int64_t W, int stride, std::int64_t Ho,
            std::int64_t Wo, Real* cols) {
  for (std::int64_t c = 0; c < C; ++c) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        Real* row = cols + ((c * 3 + ky) * 3 + kx) * Ho * Wo;
        for (std::int64_t oy = 0; oy < Ho; ++oy) {
          const std::int64_t iy = oy * stride + ky - 1;
          for (std::int64_t ox = 0; ox < Wo; ++ox) {
            const std::int64_t ix = ox * stride + kx - 1;
            row[oy * Wo + ox] = (iy >= 0 && iy < H && ix >= 0 && ix < W) ? img[(c * H + iy) * W + ix] : Real(0);
          }
        }
      }
    }
  }
}

void col2im_add(const Real* cols, std::int64_t C, std::int64_t H, std::int64_t W, int stride, std::int64_t Ho,
                std::int64_t Wo, Real* img) {
  for (std::int64_t c = 0; c < C; ++c) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const Real* row = cols + ((c * 3 + ky) * 3 + kx) * Ho * Wo;
        for (std::int64_t oy = 0; oy < Ho; ++oy) {
          const std::int64_t iy = oy * stride + ky - 1;
          if (iy < 0 || iy >= H) continue;
          for (std::int64_t ox = 0; ox < Wo; ++ox) {
            const std::int64_t ix = ox * stride + kx - 1;
            if (ix >= 0 && ix < W) img[(c * H + iy) * W + ix] += row[oy * Wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride) {
  check_finite(x, "conv2d");
  check_finite(w, "conv2d");
  if (bias.defined()) check_finite(bias, "conv2d");
  if (stride != 1 && stride != 2) throw ContractError("conv2d: stride must be 1 or 2");
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() != 4) throw DimensionError("conv2d: input must be [N, C, H, W], got " + shape_str(xs));
  if (ws.size() != 4 || ws[2] != 3 || ws[3] != 3 || ws[1] != xs[1]) {
    throw DimensionError("conv2d: weight must be [O, C, 3, 3] matching input channels, got " + shape_str(ws));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != ws[0])) throw DimensionError("conv2d: bias must be [O]");
  const std::int64_t N = xs[0], C = xs[1], H = xs[2], W = xs[3], O = ws[0];
  const std::int64_t Ho = (H - 1) / stride + 1, Wo = (W - 1) / stride + 1;
  const std::int64_t P = Ho * Wo, CK = C * 9;

  std::vector<Real> out(static_cast<std::size_t>(N * O * P));
  std::vector<Real> cols(static_cast<std::size_t>(CK * P));
  ConstMatMap Wm(w.values().data(), O, CK);
  for (std::int64_t n = 0; n < N; ++n) {
    im2col(x.values().data() + n * C * H * W, C, H, W, stride, Ho, Wo, cols.data());
    MatMap Y(out.data() + n * O * P, O, P);
    Y.noalias() = Wm * ConstMatMap(cols.data(), CK, P);
    if (bias.defined()) Y.colwise() += ConstVecMap(bias.values().data(), O);
  }

  TensorImpl* xi = x.impl();
  TensorImpl* wi = w.impl();
  TensorImpl* bi = bias.defined() ? bias.impl() : nullptr;
  bool gx = wants_grad(x), gw = wants_grad(w), gbias = bias.defined() && bias.requires_grad();
  return emit("conv2d", Shape{N, O, Ho, Wo}, std::move(out), {&x, &w, &bias},
              [=](TensorImpl& o) {
                std::vector<Real> cbuf(static_cast<std::size_t>(CK * P));
                ConstMatMap Wm2(wi->value.data(), O, CK);
                for (std::int64_t n = 0; n < N; ++n) {
                  ConstMatMap G(o.grad.data() + n * O * P, O, P);
                  if (gw) {
                    im2col(xi->value.data() + n * C * H * W, C, H, W, stride, Ho, Wo, cbuf.data());
                    MatMap dW(grad_buffer(*wi).data(), O, CK);
                    dW.noalias() += G * ConstMatMap(cbuf.data(), CK, P).transpose();
                  }
                  if (gbias) {
                    VecMap db(grad_buffer(*bi).data(), O);
                    db += G.rowwise().sum();
                  }
                  if (gx) {
                    MatMap dcols(cbuf.data(), CK, P);
                    dcols.noalias() = Wm2.transpose() * G;
                    col2im_add(cbuf.data(), C, H, W, stride, Ho, Wo, grad_buffer(*xi).data() + n * C * H * W);
                  }
                }
              });
}

Tensor softmax(const Tensor& x, int axis) {
  check_finite(x, "softmax");
  axis = normalize_axis(axis, x.rank(), "softmax");
  AxisSplit s = split_axis(x.shape(), axis);
  auto xv = x.values();
  std::vector<Real> out(xv.size());
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t in = 0; in < s.inner; ++in) {
      const std::int64_t base = o * s.extent * s.inner + in;
      Real mx = xv[base];
      for (std::int64_t k = 1; k < s.extent; ++k) mx = std::max(mx, xv[base + k * s.inner]);
      Real z = 0;
      for (std::int64_t k = 0; k < s.extent; ++k) {
        Real e = std::exp(xv[base + k * s.inner] - mx);
        out[base + k * s.inner] = e;
        z += e;
      }
      for (std::int64_t k = 0; k < s.extent; ++k) out[base + k * s.inner] /= z;
    }
  }
  TensorImpl* xi = x.impl();
  return emit("softmax", x.shape(), std::move(out), {&x}, [xi, s](TensorImpl& o) {
    auto& dx = grad_buffer(*xi);
    for (std::int64_t a = 0; a < s.outer; ++a) {
      for (std::int64_t in = 0; in < s.inner; ++in) {
        const std::int64_t base = a * s.extent * s.inner + in;
        Real dot = 0;
        for (std::int64_t k = 0; k < s.extent; ++k) dot += o.grad[base + k * s.inner] * o.value[base + k * s.inner];
        for (std::int64_t k = 0; k < s.extent; ++k) {
          const std::int64_t i = base + k * s.inner;
          dx[i] += o.value[i] * (o.grad[i] - dot);
        }
      }
    }
  });
}

Tensor log_softmax(const Tensor& x, int axis) {
  check_finite(x, "log_softmax");
  axis = normalize_axis(axis, x.rank(), "log_softmax");
  AxisSplit s = split_axis(x.shape(), axis);
  auto xv = x.values();
  std::vector<Real> out(xv.size());
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t in = 0; in < s.inner; ++in) {
      const std::int64_t base = o * s.extent * s.inner + in;
      Real mx = xv[base];
      for (std::int64_t k = 1; k < s.extent; ++k) mx = std::max(mx, xv[base + k * s.inner]);
      Real z = 0;
      for (std::int64_t k = 0; k < s.extent; ++k) z += std::exp(xv[base + k * s.inner] - mx);
      const Real lz = mx + std::log(z);
      for (std::int64_t k = 0; k < s.extent; ++k) out[base + k * s.inner] = xv[base + k * s.inner] - lz;
    }
  }
  TensorImpl* xi = x.impl();
  return emit("log_softmax", x.shape(), std::move(out), {&x}, [xi, s](TensorImpl& o) {
    auto& dx = grad_buffer(*xi);
    for (std::int64_t a = 0; a < s.outer; ++a) {
      for (std::int64_t in = 0; in < s.inner; ++in) {
        const std::int64_t base = a * s.extent * s.inner + in;
        Real gsum = 0;
        for (std::int64_t k = 0; k < s.extent; ++k) gsum += o.grad[base + k * s.inner];
        for (std::int64_t k = 0; k < s.extent; ++k) {
          const std::int64_t i = base + k * s.inner;
          dx[i] += o.grad[i] - std::exp(o.value[i]) * gsum;
        }
      }
    }
  });
}

namespace {

// Maps every input element to its slot in the reduced output.
std::vector<std::int64_t> reduction_index(const Shape& in, const std::vector<bool>& reduced, Shape& out_shape) {
  out_shape.clear();
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (!reduced[i]) out_shape.push_back(in[i]);
  }
  if (out_shape.empty()) out_shape.push_back(1);
  std::vector<std::int64_t> ostride(in.size(), 0);
  std::int64_t acc = 1;
  for (int i = static_cast<int>(in.size()) - 1; i >= 0; --i) {
    if (!reduced[i]) {
      ostride[i] = acc;
      acc *= in[i];
    }
  }
  const std::int64_t n = shape_numel(in);
  std::vector<std::int64_t> map(static_cast<std::size_t>(n));
  std::vector<std::int64_t> idx(in.size(), 0);
  std::int64_t off = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    map[i] = off;
    for (int k = static_cast<int>(in.size()) - 1; k >= 0; --k) {
      ++idx[k];
      off += ostride[k];
      if (idx[k] < in[k]) break;
      off -= ostride[k] * in[k];
      idx[k] = 0;
    }
  }
  return map;
}

Tensor reduce(const Tensor& x, std::vector<int> axes, bool average, const char* prim) {
  check_finite(x, prim);
  std::vector<bool> reduced(x.rank(), false);
  std::int64_t count = 1;
  for (int a : axes) {
    int ax = normalize_axis(a, x.rank(), prim);
    if (reduced[ax]) throw ContractError(std::string(prim) + ": repeated axis");
    reduced[ax] = true;
    count *= x.dim(ax);
  }
  Shape out_shape;
  auto map = reduction_index(x.shape(), reduced, out_shape);
  std::vector<Real> out(static_cast<std::size_t>(shape_numel(out_shape)), Real(0));
  auto xv = x.values();
  for (std::size_t i = 0; i < xv.size(); ++i) out[map[i]] += xv[i];
  const Real factor = average ? Real(1) / static_cast<Real>(count) : Real(1);
  if (average) {
    for (auto& v : out) v *= factor;
  }
  TensorImpl* xi = x.impl();
  return emit(prim, out_shape, std::move(out), {&x}, [xi, map = std::move(map), factor](TensorImpl& o) {
    auto& dx = grad_buffer(*xi);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += o.grad[map[i]] * factor;
  });
}

std::vector<int> all_axes(const Tensor& x) {
  std::vector<int> a(x.rank());
  std::iota(a.begin(), a.end(), 0);
  return a;
}

}  // namespace

Tensor sum(const Tensor& x, std::vector<int> axes) { return reduce(x, std::move(axes), false, "sum"); }
Tensor mean(const Tensor& x, std::vector<int> axes) { return reduce(x, std::move(axes), true, "mean"); }
Tensor sum_all(const Tensor& x) { return reduce(x, all_axes(x), false, "sum"); }
Tensor mean_all(const Tensor& x) { return reduce(x, all_axes(x), true, "mean"); }

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  axis = normalize_axis(axis, s0.size(), "concat");
  std::int64_t total = 0;
  for (const auto& p : parts) {
    check_finite(p, "concat");
    const Shape& s = p.shape();
    if (s.size() != s0.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (static_cast<int>(i) != axis && s[i] != s0[i]) throw DimensionError("concat: extent mismatch off-axis");
    }
    total += s[axis];
  }
  Shape out_shape = s0;
  out_shape[axis] = total;
  AxisSplit os = split_axis(out_shape, axis);
  std::vector<Real> out(static_cast<std::size_t>(shape_numel(out_shape)));
  std::vector<std::int64_t> offsets;
  std::int64_t off = 0;
  for (const auto& p : parts) {
    const std::int64_t e = p.dim(axis);
    auto pv = p.values();
    for (std::int64_t o = 0; o < os.outer; ++o) {
      std::copy_n(pv.begin() + o * e * os.inner, e * os.inner, out.begin() + (o * total + off) * os.inner);
    }
    offsets.push_back(off);
    off += e;
  }

  Tensor result = Tensor::from(out_shape, std::move(out));
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (Tape::active() != nullptr && any) {
    TensorImpl* o = result.impl();
    o->requires_grad = true;
    o->is_leaf = false;
    Tape::Record rec;
    rec.primitive = "concat";
    std::vector<TensorImpl*> ins;
    std::vector<std::int64_t> extents;
    for (const auto& p : parts) {
      rec.inputs.push_back(p.impl_ptr());
      ins.push_back(p.requires_grad() ? p.impl() : nullptr);
      extents.push_back(p.dim(axis));
    }
    rec.output = result.impl_ptr();
    rec.backward = [o, ins, extents, offsets, os, total]() {
      for (std::size_t k = 0; k < ins.size(); ++k) {
        if (!ins[k]) continue;
        auto& d = grad_buffer(*ins[k]);
        const std::int64_t e = extents[k];
        for (std::int64_t a = 0; a < os.outer; ++a) {
          const Real* src = o->grad.data() + (a * total + offsets[k]) * os.inner;
          Real* dst = d.data() + a * e * os.inner;
          for (std::int64_t i = 0; i < e * os.inner; ++i) dst[i] += src[i];
        }
      }
    };
    Tape::active()->push(std::move(rec));
  }
  return result;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) + " changes element count");
  }
  std::vector<Real> out(x.values().begin(), x.values().end());
  TensorImpl* xi = x.impl();
  return emit("reshape", std::move(shape), std::move(out), {&x}, [xi](TensorImpl& o) {
    accumulate_grad(*xi, o.grad);
  });
}

Tensor permute(const Tensor& x, std::vector<int> order) {
  const Shape& s = x.shape();
  if (order.size() != s.size()) throw DimensionError("permute: order rank mismatch");
  std::vector<bool> seen(s.size(), false);
  for (int a : order) {
    if (a < 0 || a >= static_cast<int>(s.size()) || seen[a]) throw DimensionError("permute: invalid order");
    seen[a] = true;
  }
  Shape out_shape(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) out_shape[i] = s[order[i]];
  auto in_stride = strides_of(s);
  std::vector<std::int64_t> st(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) st[i] = in_stride[order[i]];
  const std::int64_t n = x.numel();
  std::vector<std::int64_t> map(static_cast<std::size_t>(n));  // out index -> in index
  std::vector<std::int64_t> idx(s.size(), 0);
  std::int64_t off = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    map[i] = off;
    for (int k = static_cast<int>(s.size()) - 1; k >= 0; --k) {
      ++idx[k];
      off += st[k];
      if (idx[k] < out_shape[k]) break;
      off -= st[k] * out_shape[k];
      idx[k] = 0;
    }
  }
  std::vector<Real> out(static_cast<std::size_t>(n));
  auto xv = x.values();
  for (std::int64_t i = 0; i < n; ++i) out[i] = xv[map[i]];
  TensorImpl* xi = x.impl();
  return emit("permute", out_shape, std::move(out), {&x}, [xi, map = std::move(map)](TensorImpl& o) {
    auto& dx = grad_buffer(*xi);
    for (std::size_t i = 0; i < map.size(); ++i) dx[map[i]] += o.grad[i];
  });
}

Tensor stop_gradient(const Tensor& x) {
  check_finite(x, "stop_gradient");
  return Tensor::from(x.shape(), std::vector<Real>(x.values().begin(), x.values().end()));
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Real eps) {
  check_finite(x, "layer_norm");
  check_finite(gamma, "layer_norm");
  check_finite(beta, "layer_norm");
  const std::int64_t D = x.shape().back();
  if (gamma.numel() != D || beta.numel() != D) throw DimensionError("layer_norm: gamma/beta extent mismatch");
  const std::int64_t rows = x.numel() / D;
  auto xv = x.values();
  auto gv = gamma.values();
  auto bv = beta.values();
  std::vector<Real> out(xv.size()), xhat(xv.size()), rstd(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const Real* p = xv.data() + r * D;
    Real mu = 0;
    for (std::int64_t k = 0; k < D; ++k) mu += p[k];
    mu /= static_cast<Real>(D);
    Real var = 0;
    for (std::int64_t k = 0; k < D; ++k) var += (p[k] - mu) * (p[k] - mu);
    var /= static_cast<Real>(D);
    const Real rs = Real(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::int64_t k = 0; k < D; ++k) {
      const Real h = (p[k] - mu) * rs;
      xhat[r * D + k] = h;
      out[r * D + k] = h * gv[k] + bv[k];
    }
  }
  TensorImpl* xi = x.impl();
  TensorImpl* gi = gamma.impl();
  TensorImpl* bi = beta.impl();
  bool gx = wants_grad(x), gg = wants_grad(gamma), gb = wants_grad(beta);
  return emit("layer_norm", x.shape(), std::move(out), {&x, &gamma, &beta},
              [=, xhat = std::move(xhat), rstd = std::move(rstd)](TensorImpl& o) {
                for (std::int64_t r = 0; r < rows; ++r) {
                  const Real* g = o.grad.data() + r * D;
                  const Real* h = xhat.data() + r * D;
                  if (gg) {
                    auto& dg = grad_buffer(*gi);
                    for (std::int64_t k = 0; k < D; ++k) dg[k] += g[k] * h[k];
                  }
                  if (gb) {
                    auto& db = grad_buffer(*bi);
                    for (std::int64_t k = 0; k < D; ++k) db[k] += g[k];
                  }
                  if (gx) {
                    Real m1 = 0, m2 = 0;
                    for (std::int64_t k = 0; k < D; ++k) {
                      const Real dh = g[k] * gi->value[k];
                      m1 += dh;
                      m2 += dh * h[k];
                    }
                    m1 /= static_cast<Real>(D);
                    m2 /= static_cast<Real>(D);
                    auto& dx = grad_buffer(*xi);
                    for (std::int64_t k = 0; k < D; ++k) {
                      const Real dh = g[k] * gi->value[k];
                      dx[r * D + k] += rstd[r] * (dh - m1 - h[k] * m2);
                    }
                  }
                }
              });
}

Tensor l2_normalize(const Tensor& x, Real eps) {
  check_finite(x, "l2_normalize");
  const std::int64_t D = x.shape().back();
  const std::int64_t rows = x.numel() / D;
  auto xv = x.values();
  std::vector<Real> out(xv.size()), norms(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    Real s = 0;
    for (std::int64_t k = 0; k < D; ++k) s += xv[r * D + k] * xv[r * D + k];
    const Real n = std::sqrt(s + eps);
    norms[r] = n;
    for (std::int64_t k = 0; k < D; ++k) out[r * D + k] = xv[r * D + k] / n;
  }
  TensorImpl* xi = x.impl();
  return emit("l2_normalize", x.shape(), std::move(out), {&x}, [xi, D, rows, norms = std::move(norms)](TensorImpl& o) {
    auto& dx = grad_buffer(*xi);
    for (std::int64_t r = 0; r < rows; ++r) {
      Real dot = 0;
      for (std::int64_t k = 0; k < D; ++k) dot += o.grad[r * D + k] * o.value[r * D + k];
      for (std::int64_t k = 0; k < D; ++k) {
        dx[r * D + k] += (o.grad[r * D + k] - o.value[r * D + k] * dot) / norms[r];
      }
    }
  });
}

Tensor apply_primitive(std::string_view name, std::span<const Tensor> in) {
  auto need = [&](std::size_t n) {
    if (in.size() != n) {
      throw ContractError("primitive '" + std::string(name) + "' expects " + std::to_string(n) + " inputs");
    }
  };
  if (name == "add") { need(2); return add(in[0], in[1]); }
  if (name == "sub") { need(2); return sub(in[0], in[1]); }
  if (name == "mul") { need(2); return mul(in[0], in[1]); }
  if (name == "matmul") { need(2); return matmul(in[0], in[1]); }
  if (name == "relu") { need(1); return relu(in[0]); }
  if (name == "sigmoid") { need(1); return sigmoid(in[0]); }
  if (name == "exp") { need(1); return exp(in[0]); }
  if (name == "log") { need(1); return log(in[0]); }
  if (name == "softmax") { need(1); return softmax(in[0], -1); }
  if (name == "log_softmax") { need(1); return log_softmax(in[0], -1); }
  if (name == "sum") { need(1); return sum_all(in[0]); }
  if (name == "mean") { need(1); return mean_all(in[0]); }
  if (name == "concat") return concat(in, 0);
  if (name == "stop_gradient") { need(1); return stop_gradient(in[0]); }
  throw ContractError("unknown primitive '" + std::string(name) + "'");
}

}  // namespace scob::ops
