#pragma once

#include <cstdint>
#include <vector>

#include "bts/tensor.hpp"

namespace bts::ad {

// Elementwise ops require identical shapes (no implicit broadcasting; the
// few broadcast patterns the model needs have dedicated ops below).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);

// (m,k) @ (k,n) -> (m,n). Accumulates every dot product in double.
Tensor matmul(const Tensor& a, const Tensor& b);

// x: (B, Cin, L), w: (Cout, Cin, K), bias: (Cout) -> (B, Cout, Lout) where
// Lout = (L + pad_left + pad_right - K) / stride + 1 (must divide exactly).
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad_left,
              int pad_right);

// bias (n) added to every row of x (..., n).
Tensor add_bias(const Tensor& x, const Tensor& bias);

Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor slice(const Tensor& x, int axis, int start, int len);
// Same element count; shares the underlying buffer.
Tensor reshape(const Tensor& x, Shape target);
Tensor permute(const Tensor& x, const std::vector<int>& perm);
Tensor flip(const Tensor& x, int axis);

// Full reductions to a scalar tensor (double accumulation).
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);

// PReLU with a single learned slope (numel == 1) shared by all elements.
Tensor prelu(const Tensor& x, const Tensor& slope);

// Row-wise over the last axis.
Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);

// x: (B, C, L) split into `groups` contiguous channel groups; per (batch,
// group) standardization, then per-channel affine gamma/beta (each (C)).
Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int groups,
                  double eps);

// w: (Cout, Cin, K); standardizes each output filter over its Cin*K fan-in.
Tensor weight_standardize(const Tensor& w, double eps);

// Inverted dropout: scales kept activations by 1/(1-rate). Identity when
// train is false or rate == 0. Mask is a pure function of `seed`.
Tensor dropout(const Tensor& x, double rate, bool train, uint64_t seed);

// x: (T, K), idx: T indices in [0, K) -> (T) with out[t] = x[t, idx[t]].
Tensor take_per_row(const Tensor& x, const std::vector<int>& idx);

// ---- Raw float kernels (shared by op forwards and backwards) ----
namespace kernels {

// C = alpha * op(A) @ op(B) + beta * C with op = transpose when the flag is
// set. A is (m,k) after op, B is (k,n) after op, C is (m,n). Row-major.
void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, const float* a,
          const float* b, float* c, double alpha, double beta);

// out[j * rows + i] = in[i * cols + j]
void transpose(const float* in, int64_t rows, int64_t cols, float* out);

}  // namespace kernels

}  // namespace bts::ad
