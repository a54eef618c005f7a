#pragma once

#include <cstdint>
#include <vector>

#include "comal/ndgrad/tensor.hpp"

namespace comal::nd {

// Elementwise arithmetic with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& a);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator+(double s, const Tensor& a) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add_scalar(a, -s); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }

// Lower clamp applied inside log(). Default 1e-12; 0 disables clamping and
// makes log of a non-positive value an error.
double log_clamp();
void set_log_clamp(double eps);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor pow(const Tensor& a, double exponent);

/// [..., k] x [k, n] -> [..., n]. Leading dimensions of `a` are flattened.
Tensor matmul(const Tensor& a, const Tensor& b);

/// Direct 2-D cross-correlation, stride 1.
/// x: [B, Cin, H, W], w: [Cout, Cin, K, K], bias: [Cout] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
              std::size_t padding);

Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, int axis, bool keepdim = false);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, int axis, bool keepdim = false);
Tensor max(const Tensor& a, int axis, bool keepdim = false);

Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);
Tensor transpose(const Tensor& a);  // rank-2 only
Tensor slice(const Tensor& a, int axis, std::size_t begin, std::size_t end);
Tensor concat(const std::vector<Tensor>& parts, int axis);
/// Picks entries `indices` along `axis` (repeats allowed).
Tensor index_select(const Tensor& a, int axis,
                    const std::vector<std::size_t>& indices);
/// out[i] = a[i, indices[i]] over the last axis; output drops that axis.
Tensor gather(const Tensor& a, const std::vector<std::size_t>& indices);

/// Normalized exponential along `axis`.
Tensor softmax(const Tensor& a, int axis);
Tensor log_softmax(const Tensor& a, int axis);

/// Per-query key gate for attention: `allowed[b][i*n + j] != 0` lets query
/// i of batch item b attend to key j.
struct AttentionGate {
  std::size_t tokens = 0;
  std::vector<std::vector<std::uint8_t>> allowed;
};

/// Multi-head scaled dot-product attention with a hard key gate.
/// q, k, v: [B, N, D] with D divisible by `heads`. Weights of gated-out keys
/// are exactly zero. Every query must have at least one allowed key.
Tensor gated_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                       std::size_t heads, const AttentionGate& gate);

}  // namespace comal::nd
