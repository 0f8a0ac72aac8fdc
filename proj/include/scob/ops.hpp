// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "scob/tensor.hpp"

// Differentiable primitives. Every function validates shapes and finiteness of
// its inputs and records itself on the active tape when any input requires grad.
namespace scob::ops {

// Elementwise binary ops with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, Real s);
Tensor add_scalar(const Tensor& x, Real s);

/// a: [..., M, K]. b: [K, N] shared across the leading dims of a, or
/// [..., K, N] with the same leading dims. trans_b reads b as its transpose.
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_b = false);

/// x: [N, C, H, W], w: [O, C, 3, 3], bias: [O] or undefined. Zero padding 1,
/// stride 1 or 2.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
/// Gradient passes only where lo < x < hi.
Tensor clamp(const Tensor& x, Real lo, Real hi);

Tensor softmax(const Tensor& x, int axis);
Tensor log_softmax(const Tensor& x, int axis);

Tensor sum(const Tensor& x, std::vector<int> axes);
Tensor mean(const Tensor& x, std::vector<int> axes);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

Tensor concat(std::span<const Tensor> parts, int axis);
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, std::vector<int> order);

/// Value copy detached from the tape: no gradient flows through the output.
Tensor stop_gradient(const Tensor& x);

/// Normalizes over the last axis, then applies gamma/beta of that extent.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Real eps = 1e-5);
/// x / sqrt(|x|^2 + eps) over the last axis.
Tensor l2_normalize(const Tensor& x, Real eps = 1e-12);

/// Name-based dispatch over the parameter-free primitives, for tooling and
/// bindings: add, sub, mul, matmul, relu, sigmoid, exp, log, softmax (last
/// axis), log_softmax (last axis), sum, mean, concat (axis 0), stop_gradient.
Tensor apply_primitive(std::string_view name, std::span<const Tensor> inputs);

}  // namespace scob::ops
