#pragma once

#include <vector>

#include "longiseg/tensor.hpp"

namespace longiseg {

/// Differentiable primitives over 5-D feature tensors shaped N×C×D×H×W
/// (last axis fastest in memory). Every op validates shapes up front
/// (ShapeError with expected vs actual), computes the forward value, and —
/// while grad mode is on and an input requires grad — records an analytic
/// backward closure into the graph.

/// 3-D cross-correlation. x: N×C_in×D×H×W, w: C_out×C_in×k×k×k, b: C_out
/// (pass an undefined tensor for no bias). Output spatial extent is
/// floor((D + 2p − k)/stride) + 1.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                 int padding);

/// Transposed 3-D convolution (the adjoint of conv3d in its spatial map).
/// x: N×C_in×D×H×W, w: C_in×C_out×k×k×k, b: C_out or undefined. Output
/// spatial extent is (D−1)·stride − 2p + k. With the same w, the identity
/// ⟨conv3d(x,w), y⟩ = ⟨x, conv_transpose3d(y,w)⟩ holds.
template <typename T>
Tensor<T> conv_transpose3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                           int padding);

/// Per-(sample, channel) normalization over the spatial dims with learnable
/// gamma/beta (shape C). Statistics are accumulated in double; variance is
/// the population form.
template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                        double eps = 1e-5);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);

/// Softmax over the channel axis (axis 1), max-subtracted for stability.
template <typename T>
Tensor<T> softmax_channel(const Tensor<T>& x);

/// Spatial average pooling; padded positions are excluded from the count
/// (count_include_pad = false).
template <typename T>
Tensor<T> avgpool_s(const Tensor<T>& x, int k, int stride, int padding);

/// Spatial max pooling over the window intersected with the volume. Ties
/// resolve to the first element in scan order.
template <typename T>
Tensor<T> maxpool_s(const Tensor<T>& x, int k, int stride, int padding);

/// Global spatial pools: N×C×D×H×W → N×C×1×1×1.
template <typename T>
Tensor<T> global_avgpool_s(const Tensor<T>& x);
template <typename T>
Tensor<T> global_maxpool_s(const Tensor<T>& x);

/// Channel-axis pools: N×C×D×H×W → N×1×D×H×W.
template <typename T>
Tensor<T> avgpool_c(const Tensor<T>& x);
template <typename T>
Tensor<T> maxpool_c(const Tensor<T>& x);

/// Fully connected layer. x: N×F_in, w: F_out×F_in, b: F_out or undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

/// Concatenation along `axis`; all other extents must match.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis);

template <typename T>
Tensor<T> add(const Tensor<T>& x, const Tensor<T>& y);

/// Elementwise product of same-shape tensors.
template <typename T>
Tensor<T> mul(const Tensor<T>& x, const Tensor<T>& y);

/// F: N×C×D×H×W scaled per channel by a: N×C×1×1×1 (⊗_c).
template <typename T>
Tensor<T> mul_channelwise(const Tensor<T>& f, const Tensor<T>& a);

/// F: N×C×D×H×W scaled per voxel by a: N×1×D×H×W broadcast over C (⊗_s).
template <typename T>
Tensor<T> mul_spatialwise(const Tensor<T>& f, const Tensor<T>& a);

/// Same data, new shape (element count preserved).
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

/// x * c for a compile-time-constant scalar c.
template <typename T>
Tensor<T> scale(const Tensor<T>& x, double c);

/// Sum of all elements → scalar tensor (double accumulation).
template <typename T>
Tensor<T> sum_all(const Tensor<T>& x);

}  // namespace longiseg
