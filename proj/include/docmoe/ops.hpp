#pragma once

#include <vector>

#include "docmoe/autograd.hpp"

// Differentiable tensor operations on the reverse-mode tape. All image
// tensors are NCHW. Instantiated for float (training) and double (gradient
// oracles).
namespace docmoe::ops {

using ag::Var;

/// Zero-padded 2-D convolution. w: [O, C, k, k]; b: [O] or undefined.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad);

/// Transposed convolution (the adjoint of conv2d). w: [C_in, O, k, k].
/// Output size: (H - 1) * stride - 2 * pad + k + output_pad.
template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad, int output_pad);

/// Mirror padding without repeating the edge sample; requires pad < H, W.
template <typename T>
Var<T> reflect_pad(const Var<T>& x, int pad);

/// Per-sample, per-channel normalization over H x W; no affine terms.
template <typename T>
Var<T> instance_norm(const Var<T>& x, T eps = T(1e-5));

/// Batch normalization over (N, H, W) per channel. In training mode the
/// running statistics are updated in place.
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                  Tensor<T>& running_var, bool training, T momentum = T(0.1), T eps = T(1e-5));

template <typename T>
Var<T> relu(const Var<T>& x);
template <typename T>
Var<T> leaky_relu(const Var<T>& x, T slope);
template <typename T>
Var<T> tanh(const Var<T>& x);
template <typename T>
Var<T> sigmoid(const Var<T>& x);

/// x: [N, C, H, W], g: [N, C]; out[n, c] = g[n, c] * x[n, c].
template <typename T>
Var<T> channel_scale(const Var<T>& x, const Var<T>& g);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> scale(const Var<T>& x, T s);

/// x: [N, D], w: [O, D], b: [O] -> [N, O].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);

/// [N, C, H, W] -> [N, C].
template <typename T>
Var<T> global_avg_pool(const Var<T>& x);

// ---- scalar reductions -------------------------------------------------

/// Mean over the batch of -log softmax(logits)[label]. logits: [N, K].
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, const std::vector<int>& labels);

/// mean((x - target)^2)
template <typename T>
Var<T> mse_to_constant(const Var<T>& x, T target);

/// mean(|a - b|)
template <typename T>
Var<T> mean_abs_diff(const Var<T>& a, const Var<T>& b);

/// (1 / N) * sum |x| for x with leading batch dim N.
template <typename T>
Var<T> batch_mean_l1(const Var<T>& x);

/// mean(log(max(x, floor)))
template <typename T>
Var<T> mean_log(const Var<T>& x, T floor = T(1e-12));

/// mean(log(max(1 - x, floor)))
template <typename T>
Var<T> mean_log1m(const Var<T>& x, T floor = T(1e-12));

template <typename T>
Var<T> mean(const Var<T>& x);

/// sum_i x_i * weights_i for scalar inputs.
template <typename T>
Var<T> weighted_sum(const std::vector<Var<T>>& xs, const std::vector<T>& weights);

/// sum(x * r) for a constant r of the same shape. Handy for projecting
/// a tensor output onto a scalar when checking gradients.
template <typename T>
Var<T> dot_constant(const Var<T>& x, const Tensor<T>& r);

// ---- non-differentiable helpers ------------------------------------------

/// Row-wise softmax of [N, K] logits.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits);

}  // namespace docmoe::ops
