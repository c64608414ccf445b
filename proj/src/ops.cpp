#include "bts/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "bts/common.hpp"
#include "bts/rng.hpp"

namespace bts::ad {

namespace {

Tape* tape_of(std::initializer_list<const Tensor*> ts) {
  for (const Tensor* t : ts) {
    if (t->tracked()) return t->tape();
  }
  return nullptr;
}

// Dot product with four independent double accumulators: deterministic,
// fixed association order, and wide enough for gcc to vectorize.
double dot_f32(const float* a, const float* b, int64_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  int64_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    s1 += static_cast<double>(a[i + 1]) * static_cast<double>(b[i + 1]);
    s2 += static_cast<double>(a[i + 2]) * static_cast<double>(b[i + 2]);
    s3 += static_cast<double>(a[i + 3]) * static_cast<double>(b[i + 3]);
  }
  double s = (s0 + s1) + (s2 + s3);
  for (; i < n; ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

struct AxisSpan {
  int64_t outer = 1;  // product of dims before axis
  int64_t axis = 1;
  int64_t inner = 1;  // product of dims after axis
};

AxisSpan axis_span(const Shape& s, int axis) {
  AxisSpan sp;
  for (int i = 0; i < static_cast<int>(s.size()); ++i) {
    if (i < axis) sp.outer *= s[static_cast<size_t>(i)];
    else if (i == axis) sp.axis = s[static_cast<size_t>(i)];
    else sp.inner *= s[static_cast<size_t>(i)];
  }
  return sp;
}

int normalize_axis(const Tensor& x, int axis, const char* op) {
  int nd = x.ndim();
  if (axis < 0) axis += nd;
  require(axis >= 0 && axis < nd,
          std::string(op) + ": axis out of range for shape " + shape_str(x.shape()));
  return axis;
}

}  // namespace

namespace kernels {

void transpose(const float* in, int64_t rows, int64_t cols, float* out) {
  for (int64_t i = 0; i < rows; ++i) {
    const float* src = in + i * cols;
    for (int64_t j = 0; j < cols; ++j) out[j * rows + i] = src[j];
  }
}

void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, const float* a,
          const float* b, float* c, double alpha, double beta) {
  // Normalise to: rows of A_eff (m,k) dotted with rows of Bt_eff (n,k).
  std::vector<float> a_scratch, b_scratch;
  const float* a_eff = a;
  if (trans_a) {  // stored A is (k, m)
    a_scratch.resize(static_cast<size_t>(m * k));
    transpose(a, k, m, a_scratch.data());
    a_eff = a_scratch.data();
  }
  const float* bt_eff = b;  // want (n, k) rows
  if (!trans_b) {           // stored B is (k, n)
    b_scratch.resize(static_cast<size_t>(n * k));
    transpose(b, k, n, b_scratch.data());
    bt_eff = b_scratch.data();
  }
  for (int64_t i = 0; i < m; ++i) {
    const float* arow = a_eff + i * k;
    float* crow = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      double v = alpha * dot_f32(arow, bt_eff + j * k, k);
      crow[j] = static_cast<float>(beta == 0.0 ? v : beta * crow[j] + v);
    }
  }
}

}  // namespace kernels

// ---------------- elementwise ----------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  const int64_t n = a.numel();
  std::vector<float> out(static_cast<size_t>(n));
  const float* pa = a.data();
  const float* pb = b.data();
  for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = pa[i] + pb[i];
  Tape* tp = tape_of({&a, &b});
  if (!tp) return Tensor(a.shape(), std::move(out));
  return tp->record(a.shape(), std::move(out), {&a, &b},
                    [n](const float* dy, const std::vector<float*>& dp) {
                      if (dp[0]) for (int64_t i = 0; i < n; ++i) dp[0][i] += dy[i];
                      if (dp[1]) for (int64_t i = 0; i < n; ++i) dp[1][i] += dy[i];
                    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  const int64_t n = a.numel();
  std::vector<float> out(static_cast<size_t>(n));
  const float* pa = a.data();
  const float* pb = b.data();
  for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = pa[i] - pb[i];
  Tape* tp = tape_of({&a, &b});
  if (!tp) return Tensor(a.shape(), std::move(out));
  return tp->record(a.shape(), std::move(out), {&a, &b},
                    [n](const float* dy, const std::vector<float*>& dp) {
                      if (dp[0]) for (int64_t i = 0; i < n; ++i) dp[0][i] += dy[i];
                      if (dp[1]) for (int64_t i = 0; i < n; ++i) dp[1][i] -= dy[i];
                    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  const int64_t n = a.numel();
  std::vector<float> out(static_cast<size_t>(n));
  const float* pa = a.data();
  const float* pb = b.data();
  for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = pa[i] * pb[i];
  Tape* tp = tape_of({&a, &b});
  if (!tp) return Tensor(a.shape(), std::move(out));
  auto sa = a.storage();
  auto sb = b.storage();
  return tp->record(a.shape(), std::move(out), {&a, &b},
                    [n, sa, sb](const float* dy, const std::vector<float*>& dp) {
                      if (dp[0]) for (int64_t i = 0; i < n; ++i) dp[0][i] += dy[i] * (*sb)[static_cast<size_t>(i)];
                      if (dp[1]) for (int64_t i = 0; i < n; ++i) dp[1][i] += dy[i] * (*sa)[static_cast<size_t>(i)];
                    });
}

Tensor scale(const Tensor& a, double c) {
  const int64_t n = a.numel();
  std::vector<float> out(static_cast<size_t>(n));
  const float* pa = a.data();
  const float fc = static_cast<float>(c);
  for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = pa[i] * fc;
  Tape* tp = tape_of({&a});
  if (!tp) return Tensor(a.shape(), std::move(out));
  return tp->record(a.shape(), std::move(out), {&a},
                    [n, fc](const float* dy, const std::vector<float*>& dp) {
                      if (dp[0]) for (int64_t i = 0; i < n; ++i) dp[0][i] += dy[i] * fc;
                    });
}

Tensor add_scalar(const Tensor& a, double c) {
  const int64_t n = a.numel();
  std::vector<float> out(static_cast<size_t>(n));
  const float* pa = a.data();
  const float fc = static_cast<float>(c);
  for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = pa[i] + fc;
  Tape* tp = tape_of({&a});
  if (!tp) return Tensor(a.shape(), std::move(out));
  return tp->record(a.shape(), std::move(out), {&a},
                    [n](const float* dy, const std::vector<float*>& dp) {
                      if (dp[0]) for (int64_t i = 0; i < n; ++i) dp[0][i] += dy[i];
                    });
}

// ---------------- matmul / conv ----------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.ndim() == 2 && b.ndim() == 2, "matmul expects rank-2 tensors, got " +
                                              shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  require(k == k2, "matmul inner dims differ: " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
  std::vector<float> out(static_cast<size_t>(m * n));
  kernels::gemm(false, false, m, n, k, a.data(), b.data(), out.data(), 1.0, 0.0);
  Shape os{static_cast<int>(m), static_cast<int>(n)};
  Tape* tp = tape_of({&a, &b});
  if (!tp) return Tensor(std::move(os), std::move(out));
  auto sa = a.storage();
  auto sb = b.storage();
  return tp->record(std::move(os), std::move(out), {&a, &b},
                    [m, n, k, sa, sb](const float* dy, const std::vector<float*>& dp) {
                      // dA += dY @ B^T ; dB += A^T @ dY
                      if (dp[0]) kernels::gemm(false, true, m, k, n, dy, sb->data(), dp[0], 1.0, 1.0);
                      if (dp[1]) kernels::gemm(true, false, k, n, m, sa->data(), dy, dp[1], 1.0, 1.0);
                    });
}

namespace {

// Gathers the strided conv windows: cols is (Cin*K, Lout).
void im2col(const float* x, int64_t cin, int64_t len, int64_t k, int64_t stride, int64_t pad_left,
            int64_t lout, float* cols) {
  for (int64_t c = 0; c < cin; ++c) {
    const float* xc = x + c * len;
    for (int64_t kk = 0; kk < k; ++kk) {
      float* row = cols + (c * k + kk) * lout;
      for (int64_t t = 0; t < lout; ++t) {
        int64_t pos = t * stride + kk - pad_left;
        row[t] = (pos >= 0 && pos < len) ? xc[pos] : 0.0f;
      }
    }
  }
}

}  // namespace

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad_left,
              int pad_right) {
  require(x.ndim() == 3, "conv1d input must be (B, Cin, L), got " + shape_str(x.shape()));
  require(w.ndim() == 3, "conv1d weight must be (Cout, Cin, K), got " + shape_str(w.shape()));
  require(bias.ndim() == 1 && bias.dim(0) == w.dim(0),
          "conv1d bias must be (Cout), got " + shape_str(bias.shape()));
  require(stride >= 1, "conv1d stride must be >= 1");
  require(pad_left >= 0 && pad_right >= 0, "conv1d padding must be >= 0");
  const int64_t batch = x.dim(0), cin = x.dim(1), len = x.dim(2);
  const int64_t cout = w.dim(0), k = w.dim(2);
  require(w.dim(1) == cin, "conv1d channel mismatch: input " + shape_str(x.shape()) +
                               " vs weight " + shape_str(w.shape()));
  const int64_t padded = len + pad_left + pad_right;
  require(padded >= k, "conv1d kernel longer than padded input");
  require((padded - k) % stride == 0,
          "conv1d geometry does not tile: (L + pads - K) must be divisible by stride");
  const int64_t lout = (padded - k) / stride + 1;

  std::vector<float> out(static_cast<size_t>(batch * cout * lout));
  std::vector<float> cols(static_cast<size_t>(cin * k * lout));
  for (int64_t b = 0; b < batch; ++b) {
    im2col(x.data() + b * cin * len, cin, len, k, stride, pad_left, lout, cols.data());
    float* yb = out.data() + b * cout * lout;
    kernels::gemm(false, false, cout, lout, cin * k, w.data(), cols.data(), yb, 1.0, 0.0);
    for (int64_t co = 0; co < cout; ++co) {
      const float bv = bias.data()[co];
      float* yrow = yb + co * lout;
      for (int64_t t = 0; t < lout; ++t) yrow[t] += bv;
    }
  }
  Shape os{static_cast<int>(batch), static_cast<int>(cout), static_cast<int>(lout)};
  Tape* tp = tape_of({&x, &w, &bias});
  if (!tp) return Tensor(std::move(os), std::move(out));
  auto sx = x.storage();
  auto sw = w.storage();
  return tp->record(
      std::move(os), std::move(out), {&x, &w, &bias},
      [batch, cin, len, cout, k, stride, pad_left, lout, sx, sw](
          const float* dy, const std::vector<float*>& dp) {
        std::vector<float> cols(static_cast<size_t>(cin * k * lout));
        std::vector<float> dcols;
        if (dp[0]) dcols.resize(static_cast<size_t>(cin * k * lout));
        for (int64_t b = 0; b < batch; ++b) {
          const float* dyb = dy + b * cout * lout;
          if (dp[1]) {  // dW += dY_b @ cols^T
            im2col(sx->data() + b * cin * len, cin, len, k, stride, pad_left, lout, cols.data());
            kernels::gemm(false, true, cout, cin * k, lout, dyb, cols.data(), dp[1], 1.0, 1.0);
          }
          if (dp[2]) {
            for (int64_t co = 0; co < cout; ++co) {
              double s = 0.0;
              const float* dyrow = dyb + co * lout;
              for (int64_t t = 0; t < lout; ++t) s += dyrow[t];
              dp[2][co] += static_cast<float>(s);
            }
          }
          if (dp[0]) {  // dcols = W^T @ dY_b, scattered back through the windows
            kernels::gemm(true, false, cin * k, lout, cout, sw->data(), dyb, dcols.data(), 1.0,
                          0.0);
            float* dxb = dp[0] + b * cin * len;
            for (int64_t c = 0; c < cin; ++c) {
              for (int64_t kk = 0; kk < k; ++kk) {
                const float* drow = dcols.data() + (c * k + kk) * lout;
                for (int64_t t = 0; t < lout; ++t) {
                  int64_t pos = t * stride + kk - pad_left;
                  if (pos >= 0 && pos < len) dxb[c * len + pos] += drow[t];
                }
              }
            }
          }
        }
      });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require(bias.ndim() == 1, "add_bias expects rank-1 bias, got " + shape_str(bias.shape()));
  const int64_t n = bias.dim(0);
  require(x.ndim() >= 1 && x.dim(-1) == static_cast<int>(n),
          "add_bias: last dim of " + shape_str(x.shape()) + " must match bias " +
              shape_str(bias.shape()));
  const int64_t rows = x.numel() / n;
  std::vector<float> out(static_cast<size_t>(x.numel()));
  const float* px = x.data();
  const float* pb = bias.data();
  for (int64_t r = 0; r < rows; ++r) {
    const float* xr = px + r * n;
    float* yr = out.data() + r * n;
    for (int64_t j = 0; j < n; ++j) yr[j] = xr[j] + pb[j];
  }
  Tape* tp = tape_of({&x, &bias});
  if (!tp) return Tensor(x.shape(), std::move(out));
  return tp->record(x.shape(), std::move(out), {&x, &bias},
                    [rows, n](const float* dy, const std::vector<float*>& dp) {
                      if (dp[0]) {
                        for (int64_t i = 0; i < rows * n; ++i) dp[0][i] += dy[i];
                      }
                      if (dp[1]) {
                        for (int64_t j = 0; j < n; ++j) {
                          double s = 0.0;
                          for (int64_t r = 0; r < rows; ++r) s += dy[r * n + j];
                          dp[1][j] += static_cast<float>(s);
                        }
                      }
                    });
}

// ---------------- shape ops ----------------

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  require(!xs.empty(), "concat needs at least one input");
  const int ax = normalize_axis(xs[0], axis, "concat");
  Shape os = xs[0].shape();
  int64_t total_axis = 0;
  for (const Tensor& t : xs) {
    require(t.ndim() == xs[0].ndim(), "concat rank mismatch");
    for (int d = 0; d < t.ndim(); ++d) {
      if (d != ax)
        require(t.shape()[static_cast<size_t>(d)] == os[static_cast<size_t>(d)],
                "concat shapes differ outside the axis: " + shape_str(t.shape()) + " vs " +
                    shape_str(xs[0].shape()));
    }
    total_axis += t.dim(ax);
  }
  os[static_cast<size_t>(ax)] = static_cast<int>(total_axis);
  AxisSpan sp = axis_span(os, ax);
  std::vector<float> out(static_cast<size_t>(shape_numel(os)));
  std::vector<int64_t> axdims, offsets;
  int64_t off = 0;
  for (const Tensor& t : xs) {
    const int64_t ad = t.dim(ax);
    const float* src = t.data();
    for (int64_t o = 0; o < sp.outer; ++o) {
      std::memcpy(out.data() + (o * total_axis + off) * sp.inner, src + o * ad * sp.inner,
                  static_cast<size_t>(ad * sp.inner) * sizeof(float));
    }
    axdims.push_back(ad);
    offsets.push_back(off);
    off += ad;
  }
  bool tracked = false;
  std::vector<const Tensor*> ins;
  for (const Tensor& t : xs) {
    ins.push_back(&t);
    tracked = tracked || t.tracked();
  }
  if (!tracked) return Tensor(std::move(os), std::move(out));
  Tape* tp = nullptr;
  for (const Tensor& t : xs)
    if (t.tracked()) { tp = t.tape(); break; }
  const int64_t outer = sp.outer, inner = sp.inner;
  return tp->record(std::move(os), std::move(out), ins,
                    [outer, inner, total_axis, axdims, offsets](
                        const float* dy, const std::vector<float*>& dp) {
                      for (size_t p = 0; p < dp.size(); ++p) {
                        if (!dp[p]) continue;
                        const int64_t ad = axdims[p], o0 = offsets[p];
                        for (int64_t o = 0; o < outer; ++o) {
                          const float* src = dy + (o * total_axis + o0) * inner;
                          float* dst = dp[p] + o * ad * inner;
                          for (int64_t i = 0; i < ad * inner; ++i) dst[i] += src[i];
                        }
                      }
                    });
}

Tensor slice(const Tensor& x, int axis, int start, int len) {
  const int ax = normalize_axis(x, axis, "slice");
  const int64_t ad = x.dim(ax);
  require(start >= 0 && len > 0 && start + len <= ad,
          "slice [" + std::to_string(start) + ", " + std::to_string(start + len) +
              ") out of range for axis " + std::to_string(ax) + " of " + shape_str(x.shape()));
  Shape os = x.shape();
  os[static_cast<size_t>(ax)] = len;
  AxisSpan sp = axis_span(x.shape(), ax);
  std::vector<float> out(static_cast<size_t>(shape_numel(os)));
  const float* src = x.data();
  for (int64_t o = 0; o < sp.outer; ++o) {
    std::memcpy(out.data() + o * len * sp.inner, src + (o * ad + start) * sp.inner,
                static_cast<size_t>(len * sp.inner) * sizeof(float));
  }
  Tape* tp = tape_of({&x});
  if (!tp) return Tensor(std::move(os), std::move(out));
  const int64_t outer = sp.outer, inner = sp.inner;
  return tp->record(std::move(os), std::move(out), {&x},
                    [outer, inner, ad, start, len](const float* dy, const std::vector<float*>& dp) {
                      if (!dp[0]) return;
                      for (int64_t o = 0; o < outer; ++o) {
                        const float* src = dy + o * len * inner;
                        float* dst = dp[0] + (o * ad + start) * inner;
                        for (int64_t i = 0; i < static_cast<int64_t>(len) * inner; ++i)
                          dst[i] += src[i];
                      }
                    });
}

Tensor reshape(const Tensor& x, Shape target) {
  require(shape_numel(target) == x.numel(), "reshape " + shape_str(x.shape()) + " -> " +
                                                shape_str(target) + " changes element count");
  Tape* tp = tape_of({&x});
  if (!tp) {
    // Share the buffer without a tape node.
    return Tensor(std::move(target), *x.storage());
  }
  const int64_t n = x.numel();
  return tp->record_shared(std::move(target), x.storage(), {&x},
                           [n](const float* dy, const std::vector<float*>& dp) {
                             if (dp[0]) for (int64_t i = 0; i < n; ++i) dp[0][i] += dy[i];
                           });
}

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
  const int nd = x.ndim();
  require(static_cast<int>(perm.size()) == nd,
          "permute order " + seq_str(perm) + " does not match rank of " + shape_str(x.shape()));
  std::vector<bool> seen(static_cast<size_t>(nd), false);
  for (int p : perm) {
    require(p >= 0 && p < nd && !seen[static_cast<size_t>(p)],
            "permute order " + seq_str(perm) + " is not a permutation");
    seen[static_cast<size_t>(p)] = true;
  }
  Shape os(static_cast<size_t>(nd));
  for (int i = 0; i < nd; ++i) os[static_cast<size_t>(i)] = x.dim(perm[static_cast<size_t>(i)]);
  // in_stride[d] = stride of input dim d; walk output linearly.
  std::vector<int64_t> in_stride(static_cast<size_t>(nd), 1);
  for (int d = nd - 2; d >= 0; --d)
    in_stride[static_cast<size_t>(d)] =
        in_stride[static_cast<size_t>(d + 1)] * x.dim(d + 1);
  std::vector<int64_t> step(static_cast<size_t>(nd));
  for (int i = 0; i < nd; ++i)
    step[static_cast<size_t>(i)] = in_stride[static_cast<size_t>(perm[static_cast<size_t>(i)])];
  const int64_t n = x.numel();
  std::vector<float> out(static_cast<size_t>(n));
  std::vector<int64_t> idx(static_cast<size_t>(nd), 0);
  const float* src = x.data();
  int64_t in_off = 0;
  for (int64_t o = 0; o < n; ++o) {
    out[static_cast<size_t>(o)] = src[in_off];
    for (int d = nd - 1; d >= 0; --d) {
      idx[static_cast<size_t>(d)]++;
      in_off += step[static_cast<size_t>(d)];
      if (idx[static_cast<size_t>(d)] < os[static_cast<size_t>(d)]) break;
      in_off -= step[static_cast<size_t>(d)] * os[static_cast<size_t>(d)];
      idx[static_cast<size_t>(d)] = 0;
    }
  }
  Tape* tp = tape_of({&x});
  if (!tp) return Tensor(std::move(os), std::move(out));
  Shape os_copy = os;
  return tp->record(std::move(os), std::move(out), {&x},
                    [n, nd, step, os_copy](const float* dy, const std::vector<float*>& dp) {
                      if (!dp[0]) return;
                      std::vector<int64_t> idx(static_cast<size_t>(nd), 0);
                      int64_t in_off = 0;
                      for (int64_t o = 0; o < n; ++o) {
                        dp[0][in_off] += dy[o];
                        for (int d = nd - 1; d >= 0; --d) {
                          idx[static_cast<size_t>(d)]++;
                          in_off += step[static_cast<size_t>(d)];
                          if (idx[static_cast<size_t>(d)] < os_copy[static_cast<size_t>(d)]) break;
                          in_off -= step[static_cast<size_t>(d)] * os_copy[static_cast<size_t>(d)];
                          idx[static_cast<size_t>(d)] = 0;
                        }
                      }
                    });
}

Tensor flip(const Tensor& x, int axis) {
  const int ax = normalize_axis(x, axis, "flip");
  AxisSpan sp = axis_span(x.shape(), ax);
  const int64_t ad = sp.axis;
  std::vector<float> out(static_cast<size_t>(x.numel()));
  const float* src = x.data();
  for (int64_t o = 0; o < sp.outer; ++o) {
    for (int64_t a = 0; a < ad; ++a) {
      std::memcpy(out.data() + (o * ad + a) * sp.inner, src + (o * ad + (ad - 1 - a)) * sp.inner,
                  static_cast<size_t>(sp.inner) * sizeof(float));
    }
  }
  Tape* tp = tape_of({&x});
  if (!tp) return Tensor(x.shape(), std::move(out));
  const int64_t outer = sp.outer, inner = sp.inner;
  return tp->record(x.shape(), std::move(out), {&x},
                    [outer, inner, ad](const float* dy, const std::vector<float*>& dp) {
                      if (!dp[0]) return;
                      for (int64_t o = 0; o < outer; ++o)
                        for (int64_t a = 0; a < ad; ++a) {
                          const float* src = dy + (o * ad + a) * inner;
                          float* dst = dp[0] + (o * ad + (ad - 1 - a)) * inner;
                          for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
                        }
                    });
}

// ---------------- reductions ----------------

Tensor sum(const Tensor& x) {
  const int64_t n = x.numel();
  double s = 0.0;
  const float* px = x.data();
  for (int64_t i = 0; i < n; ++i) s += px[i];
  Tape* tp = tape_of({&x});
  std::vector<float> out{static_cast<float>(s)};
  if (!tp) return Tensor({1}, std::move(out));
  return tp->record({1}, std::move(out), {&x},
                    [n](const float* dy, const std::vector<float*>& dp) {
                      if (dp[0]) for (int64_t i = 0; i < n; ++i) dp[0][i] += dy[0];
                    });
}

Tensor mean(const Tensor& x) {
  const int64_t n = x.numel();
  require(n > 0, "mean of an empty tensor");
  double s = 0.0;
  const float* px = x.data();
  for (int64_t i = 0; i < n; ++i) s += px[i];
  const double inv = 1.0 / static_cast<double>(n);
  Tape* tp = tape_of({&x});
  std::vector<float> out{static_cast<float>(s * inv)};
  if (!tp) return Tensor({1}, std::move(out));
  return tp->record({1}, std::move(out), {&x},
                    [n, inv](const float* dy, const std::vector<float*>& dp) {
                      if (!dp[0]) return;
                      const float g = static_cast<float>(dy[0] * inv);
                      for (int64_t i = 0; i < n; ++i) dp[0][i] += g;
                    });
}

// ---------------- pointwise nonlinearities ----------------

Tensor log(const Tensor& x) {
  const int64_t n = x.numel();
  std::vector<float> out(static_cast<size_t>(n));
  const float* px = x.data();
  for (int64_t i = 0; i < n; ++i) {
    require(px[i] > 0.0f, "log: input element " + std::to_string(i) + " is not positive (" +
                              std::to_string(px[i]) + ")");
    out[static_cast<size_t>(i)] = std::log(px[i]);
  }
  Tape* tp = tape_of({&x});
  if (!tp) return Tensor(x.shape(), std::move(out));
  auto sx = x.storage();
  return tp->record(x.shape(), std::move(out), {&x},
                    [n, sx](const float* dy, const std::vector<float*>& dp) {
                      if (dp[0])
                        for (int64_t i = 0; i < n; ++i)
                          dp[0][i] += dy[i] / (*sx)[static_cast<size_t>(i)];
                    });
}

namespace {

template <typename Fwd, typename Bwd>
Tensor pointwise_from_output(const Tensor& x, Fwd fwd, Bwd bwd) {
  const int64_t n = x.numel();
  auto out = std::make_shared<std::vector<float>>(static_cast<size_t>(n));
  const float* px = x.data();
  for (int64_t i = 0; i < n; ++i) (*out)[static_cast<size_t>(i)] = fwd(px[i]);
  Tape* tp = tape_of({&x});
  if (!tp) {
    Tensor plain(x.shape(), *out);
    return plain;
  }
  auto sy = out;
  return tp->record_shared(x.shape(), std::move(out), {&x},
                           [n, sy, bwd](const float* dy, const std::vector<float*>& dp) {
                             if (!dp[0]) return;
                             for (int64_t i = 0; i < n; ++i)
                               dp[0][i] += dy[i] * bwd((*sy)[static_cast<size_t>(i)]);
                           });
}

}  // namespace

Tensor exp(const Tensor& x) {
  return pointwise_from_output(
      x, [](float v) { return std::exp(v); }, [](float y) { return y; });
}

Tensor tanh(const Tensor& x) {
  return pointwise_from_output(
      x, [](float v) { return std::tanh(v); }, [](float y) { return 1.0f - y * y; });
}

Tensor sigmoid(const Tensor& x) {
  return pointwise_from_output(
      x, [](float v) { return 1.0f / (1.0f + std::exp(-v)); },
      [](float y) { return y * (1.0f - y); });
}

Tensor prelu(const Tensor& x, const Tensor& slope) {
  require(slope.numel() == 1, "prelu slope must be a single element, got " +
                                  shape_str(slope.shape()));
  const int64_t n = x.numel();
  const float a = slope.data()[0];
  std::vector<float> out(static_cast<size_t>(n));
  const float* px = x.data();
  for (int64_t i = 0; i < n; ++i) {
    const float v = px[i];
    out[static_cast<size_t>(i)] = v >= 0.0f ? v : a * v;
  }
  Tape* tp = tape_of({&x, &slope});
  if (!tp) return Tensor(x.shape(), std::move(out));
  auto sx = x.storage();
  return tp->record(x.shape(), std::move(out), {&x, &slope},
                    [n, a, sx](const float* dy, const std::vector<float*>& dp) {
                      const float* px = sx->data();
                      if (dp[0]) {
                        for (int64_t i = 0; i < n; ++i)
                          dp[0][i] += dy[i] * (px[i] >= 0.0f ? 1.0f : a);
                      }
                      if (dp[1]) {
                        double s = 0.0;
                        for (int64_t i = 0; i < n; ++i)
                          if (px[i] < 0.0f) s += static_cast<double>(dy[i]) * px[i];
                        dp[1][0] += static_cast<float>(s);
                      }
                    });
}

// ---------------- row-wise softmax family ----------------

Tensor softmax(const Tensor& x) {
  const int64_t k = x.dim(-1);
  const int64_t rows = x.numel() / k;
  auto out = std::make_shared<std::vector<float>>(static_cast<size_t>(x.numel()));
  const float* px = x.data();
  for (int64_t r = 0; r < rows; ++r) {
    const float* xr = px + r * k;
    float* yr = out->data() + r * k;
    float mx = xr[0];
    for (int64_t j = 1; j < k; ++j) mx = std::max(mx, xr[j]);
    double denom = 0.0;
    for (int64_t j = 0; j < k; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      denom += yr[j];
    }
    const float inv = static_cast<float>(1.0 / denom);
    for (int64_t j = 0; j < k; ++j) yr[j] *= inv;
  }
  Tape* tp = tape_of({&x});
  if (!tp) return Tensor(x.shape(), *out);
  auto sy = out;
  return tp->record_shared(x.shape(), std::move(out), {&x},
                           [rows, k, sy](const float* dy, const std::vector<float*>& dp) {
                             if (!dp[0]) return;
                             for (int64_t r = 0; r < rows; ++r) {
                               const float* yr = sy->data() + r * k;
                               const float* dyr = dy + r * k;
                               double dot = 0.0;
                               for (int64_t j = 0; j < k; ++j)
                                 dot += static_cast<double>(dyr[j]) * yr[j];
                               float* dxr = dp[0] + r * k;
                               for (int64_t j = 0; j < k; ++j)
                                 dxr[j] += (dyr[j] - static_cast<float>(dot)) * yr[j];
                             }
                           });
}

Tensor log_softmax(const Tensor& x) {
  const int64_t k = x.dim(-1);
  const int64_t rows = x.numel() / k;
  auto out = std::make_shared<std::vector<float>>(static_cast<size_t>(x.numel()));
  const float* px = x.data();
  for (int64_t r = 0; r < rows; ++r) {
    const float* xr = px + r * k;
    float* yr = out->data() + r * k;
    float mx = xr[0];
    for (int64_t j = 1; j < k; ++j) mx = std::max(mx, xr[j]);
    double denom = 0.0;
    for (int64_t j = 0; j < k; ++j) denom += std::exp(static_cast<double>(xr[j]) - mx);
    const float lse = mx + static_cast<float>(std::log(denom));
    for (int64_t j = 0; j < k; ++j) yr[j] = xr[j] - lse;
  }
  Tape* tp = tape_of({&x});
  if (!tp) return Tensor(x.shape(), *out);
  auto sy = out;
  return tp->record_shared(x.shape(), std::move(out), {&x},
                           [rows, k, sy](const float* dy, const std::vector<float*>& dp) {
                             if (!dp[0]) return;
                             for (int64_t r = 0; r < rows; ++r) {
                               const float* yr = sy->data() + r * k;
                               const float* dyr = dy + r * k;
                               double tot = 0.0;
                               for (int64_t j = 0; j < k; ++j) tot += dyr[j];
                               float* dxr = dp[0] + r * k;
                               for (int64_t j = 0; j < k; ++j)
                                 dxr[j] += dyr[j] - static_cast<float>(tot) * std::exp(yr[j]);
                             }
                           });
}

// ---------------- normalizations ----------------

Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int groups,
                  double eps) {
  require(x.ndim() == 3, "group_norm input must be (B, C, L), got " + shape_str(x.shape()));
  const int64_t batch = x.dim(0), ch = x.dim(1), len = x.dim(2);
  require(groups > 0 && ch % groups == 0,
          "group_norm: channels " + std::to_string(ch) + " not divisible by groups " +
              std::to_string(groups));
  require(gamma.ndim() == 1 && gamma.dim(0) == ch && beta.ndim() == 1 && beta.dim(0) == ch,
          "group_norm affine params must be (C)");
  const int64_t cs = ch / groups;        // channels per group
  const int64_t gsz = cs * len;          // elements per (batch, group)
  auto xhat = std::make_shared<std::vector<float>>(static_cast<size_t>(x.numel()));
  auto inv_std = std::make_shared<std::vector<float>>(static_cast<size_t>(batch * groups));
  std::vector<float> out(static_cast<size_t>(x.numel()));
  const float* px = x.data();
  const float* pg = gamma.data();
  const float* pb = beta.data();
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t g = 0; g < groups; ++g) {
      const int64_t base = (b * ch + g * cs) * len;
      double m = 0.0;
      for (int64_t i = 0; i < gsz; ++i) m += px[base + i];
      m /= static_cast<double>(gsz);
      double v = 0.0;
      for (int64_t i = 0; i < gsz; ++i) {
        const double d = px[base + i] - m;
        v += d * d;
      }
      v /= static_cast<double>(gsz);
      const double inv = 1.0 / std::sqrt(v + eps);
      (*inv_std)[static_cast<size_t>(b * groups + g)] = static_cast<float>(inv);
      for (int64_t c = 0; c < cs; ++c) {
        const int64_t ci = g * cs + c;
        const float gc = pg[ci], bc = pb[ci];
        for (int64_t t = 0; t < len; ++t) {
          const int64_t i = base + c * len + t;
          const float xh = static_cast<float>((px[i] - m) * inv);
          (*xhat)[static_cast<size_t>(i)] = xh;
          out[static_cast<size_t>(i)] = gc * xh + bc;
        }
      }
    }
  }
  Tape* tp = tape_of({&x, &gamma, &beta});
  if (!tp) return Tensor(x.shape(), std::move(out));
  auto sg = gamma.storage();
  return tp->record(
      x.shape(), std::move(out), {&x, &gamma, &beta},
      [batch, ch, len, groups, cs, gsz, xhat, inv_std, sg](const float* dy,
                                                           const std::vector<float*>& dp) {
        const float* pg = sg->data();
        for (int64_t b = 0; b < batch; ++b) {
          for (int64_t g = 0; g < groups; ++g) {
            const int64_t base = (b * ch + g * cs) * len;
            if (dp[0]) {
              double m1 = 0.0, m2 = 0.0;
              for (int64_t c = 0; c < cs; ++c) {
                const float gc = pg[g * cs + c];
                for (int64_t t = 0; t < len; ++t) {
                  const int64_t i = base + c * len + t;
                  const double dyg = static_cast<double>(dy[i]) * gc;
                  m1 += dyg;
                  m2 += dyg * (*xhat)[static_cast<size_t>(i)];
                }
              }
              m1 /= static_cast<double>(gsz);
              m2 /= static_cast<double>(gsz);
              const double inv = (*inv_std)[static_cast<size_t>(b * groups + g)];
              for (int64_t c = 0; c < cs; ++c) {
                const float gc = pg[g * cs + c];
                for (int64_t t = 0; t < len; ++t) {
                  const int64_t i = base + c * len + t;
                  const double dyg = static_cast<double>(dy[i]) * gc;
                  dp[0][i] += static_cast<float>(
                      inv * (dyg - m1 - (*xhat)[static_cast<size_t>(i)] * m2));
                }
              }
            }
            if (dp[1] || dp[2]) {
              for (int64_t c = 0; c < cs; ++c) {
                const int64_t ci = g * cs + c;
                double sg_acc = 0.0, sb_acc = 0.0;
                for (int64_t t = 0; t < len; ++t) {
                  const int64_t i = base + c * len + t;
                  sg_acc += static_cast<double>(dy[i]) * (*xhat)[static_cast<size_t>(i)];
                  sb_acc += dy[i];
                }
                if (dp[1]) dp[1][ci] += static_cast<float>(sg_acc);
                if (dp[2]) dp[2][ci] += static_cast<float>(sb_acc);
              }
            }
          }
        }
      });
}

Tensor weight_standardize(const Tensor& w, double eps) {
  require(w.ndim() == 3, "weight_standardize expects (Cout, Cin, K), got " + shape_str(w.shape()));
  const int64_t rows = w.dim(0);
  const int64_t fanin = static_cast<int64_t>(w.dim(1)) * w.dim(2);
  auto xhat = std::make_shared<std::vector<float>>(static_cast<size_t>(w.numel()));
  auto inv_std = std::make_shared<std::vector<float>>(static_cast<size_t>(rows));
  std::vector<float> out(static_cast<size_t>(w.numel()));
  const float* pw = w.data();
  for (int64_t r = 0; r < rows; ++r) {
    const int64_t base = r * fanin;
    double m = 0.0;
    for (int64_t i = 0; i < fanin; ++i) m += pw[base + i];
    m /= static_cast<double>(fanin);
    double v = 0.0;
    for (int64_t i = 0; i < fanin; ++i) {
      const double d = pw[base + i] - m;
      v += d * d;
    }
    v /= static_cast<double>(fanin);
    const double inv = 1.0 / std::sqrt(v + eps);
    (*inv_std)[static_cast<size_t>(r)] = static_cast<float>(inv);
    for (int64_t i = 0; i < fanin; ++i) {
      const float xh = static_cast<float>((pw[base + i] - m) * inv);
      (*xhat)[static_cast<size_t>(base + i)] = xh;
      out[static_cast<size_t>(base + i)] = xh;
    }
  }
  Tape* tp = tape_of({&w});
  if (!tp) return Tensor(w.shape(), std::move(out));
  return tp->record(w.shape(), std::move(out), {&w},
                    [rows, fanin, xhat, inv_std](const float* dy, const std::vector<float*>& dp) {
                      if (!dp[0]) return;
                      for (int64_t r = 0; r < rows; ++r) {
                        const int64_t base = r * fanin;
                        double m1 = 0.0, m2 = 0.0;
                        for (int64_t i = 0; i < fanin; ++i) {
                          m1 += dy[base + i];
                          m2 += static_cast<double>(dy[base + i]) *
                                (*xhat)[static_cast<size_t>(base + i)];
                        }
                        m1 /= static_cast<double>(fanin);
                        m2 /= static_cast<double>(fanin);
                        const double inv = (*inv_std)[static_cast<size_t>(r)];
                        for (int64_t i = 0; i < fanin; ++i) {
                          dp[0][base + i] += static_cast<float>(
                              inv * (dy[base + i] - m1 -
                                     (*xhat)[static_cast<size_t>(base + i)] * m2));
                        }
                      }
                    });
}

Tensor dropout(const Tensor& x, double rate, bool train, uint64_t seed) {
  require(rate >= 0.0 && rate < 1.0, "dropout rate must be in [0, 1), got " + std::to_string(rate));
  if (!train || rate == 0.0) return x;
  const int64_t n = x.numel();
  Rng rng(seed);
  const float keep_scale = static_cast<float>(1.0 / (1.0 - rate));
  auto mask = std::make_shared<std::vector<float>>(static_cast<size_t>(n));
  std::vector<float> out(static_cast<size_t>(n));
  const float* px = x.data();
  for (int64_t i = 0; i < n; ++i) {
    const float mv = rng.uniform() >= rate ? keep_scale : 0.0f;
    (*mask)[static_cast<size_t>(i)] = mv;
    out[static_cast<size_t>(i)] = px[i] * mv;
  }
  Tape* tp = tape_of({&x});
  if (!tp) return Tensor(x.shape(), std::move(out));
  return tp->record(x.shape(), std::move(out), {&x},
                    [n, mask](const float* dy, const std::vector<float*>& dp) {
                      if (dp[0])
                        for (int64_t i = 0; i < n; ++i)
                          dp[0][i] += dy[i] * (*mask)[static_cast<size_t>(i)];
                    });
}

Tensor take_per_row(const Tensor& x, const std::vector<int>& idx) {
  require(x.ndim() == 2, "take_per_row expects (T, K), got " + shape_str(x.shape()));
  const int64_t t = x.dim(0), k = x.dim(1);
  require(static_cast<int64_t>(idx.size()) == t,
          "take_per_row index count " + std::to_string(idx.size()) + " != rows " +
              std::to_string(t));
  std::vector<float> out(static_cast<size_t>(t));
  const float* px = x.data();
  for (int64_t r = 0; r < t; ++r) {
    const int j = idx[static_cast<size_t>(r)];
    require(j >= 0 && j < k, "take_per_row index " + std::to_string(j) + " out of range [0, " +
                                 std::to_string(k) + ") at row " + std::to_string(r));
    out[static_cast<size_t>(r)] = px[r * k + j];
  }
  Tape* tp = tape_of({&x});
  Shape os{static_cast<int>(t)};
  if (!tp) return Tensor(std::move(os), std::move(out));
  auto idx_copy = idx;
  return tp->record(std::move(os), std::move(out), {&x},
                    [t, k, idx_copy](const float* dy, const std::vector<float*>& dp) {
                      if (!dp[0]) return;
                      for (int64_t r = 0; r < t; ++r)
                        dp[0][r * k + idx_copy[static_cast<size_t>(r)]] += dy[r];
                    });
}

}  // namespace bts::ad
