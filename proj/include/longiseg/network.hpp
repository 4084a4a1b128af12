#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "longiseg/tensor.hpp"

namespace longiseg {

/// Architecture hyperparameters. The default layout is the full-scale
/// segmentation backbone; tests and desk-scale runs shrink init_filters or
/// n_levels through the same code path.
struct NetworkConfig {
    int in_channels = 1;  // 3 when prior masks ride along as input channels
    int n_classes = 3;
    int init_filters = 32;  // channel width at level 1; doubles per level
    std::vector<int> blocks_per_level = {1, 2, 2, 4, 4, 4};
    int n_levels = 6;
    int deep_supervision_levels = 4;  // heads at resolutions 1, 1/2, ... of the input
    bool attention_enabled = false;   // mask-aware attention after each encoder level
    int mlp_reduction_ratio = 8;      // channel-attention MLP bottleneck divisor
    int spatial_attention_kernel = 7;

    /// Channel width at 1-based level l.
    std::int64_t channels_at(int level) const {
        return std::int64_t(init_filters) << (level - 1);
    }
    /// Every input spatial dim must be divisible by this.
    std::int64_t spatial_divisor() const { return std::int64_t(1) << (n_levels - 1); }

    void validate() const;  // ConfigError on inconsistencies
};

template <typename T>
struct ConvParams {
    Tensor<T> w, b;
};

template <typename T>
struct NormParams {
    Tensor<T> gamma, beta;
};

/// Pre-activation residual block: two (instance_norm -> ReLU -> 3x3x3 conv)
/// units plus the identity skip. Channel count and spatial dims pass through.
template <typename T>
struct ResBlockParams {
    NormParams<T> n1;
    ConvParams<T> c1;
    NormParams<T> n2;
    ConvParams<T> c2;
};

/// Mask-aware attention for one encoder level: a shared two-layer MLP drives
/// channel attention; a 7x7x7 conv over [channel-pooled features, pooled prior
/// masks] drives spatial attention.
template <typename T>
struct AttentionParams {
    Tensor<T> mlp_w1, mlp_b1;  // C -> C/r
    Tensor<T> mlp_w2, mlp_b2;  // C/r -> C
    ConvParams<T> spatial;     // 6 -> 1, k = spatial_attention_kernel
};

template <typename T>
struct EncoderLevel {
    std::optional<ConvParams<T>> down;  // stride-2 3x3x3 conv; absent at level 1
    std::vector<ResBlockParams<T>> blocks;
    std::optional<AttentionParams<T>> attention;
};

template <typename T>
struct DecoderLevel {
    ConvParams<T> up;  // transposed conv k=2 s=2, halves channels
    ResBlockParams<T> block;
};

template <typename T>
struct Network {
    NetworkConfig config;
    ConvParams<T> stem;  // in_channels -> init_filters, 3x3x3
    std::vector<EncoderLevel<T>> encoder;  // levels 1..n_levels
    std::vector<DecoderLevel<T>> decoder;  // index l-1 holds the level-l decoder
    std::vector<ConvParams<T>> heads;      // 1x1x1 convs; index 0 = full resolution

    /// Every parameter in registration order with its stable name; the tensors
    /// are shared with the structured fields above, so mutating one mutates
    /// the network.
    std::vector<std::pair<std::string, Tensor<T>>> named;

    std::vector<Tensor<T>> parameters() const;
    std::int64_t parameter_count() const;
    /// Lookup by name; throws ConfigError when absent.
    const Tensor<T>& param(const std::string& name) const;
};

using NetworkF = Network<float>;
using NetworkD = Network<double>;

/// Deterministic build: He fan-in normal init for conv/linear weights drawn in
/// f64 from mt19937_64(seed) (so f32 and f64 builds share draws), zero biases,
/// unit gamma / zero beta norms.
template <typename T>
Network<T> build(const NetworkConfig& config, std::uint64_t seed);

/// Channel attention: A_c = sigmoid(MLP(gap(F)) + MLP(gmp(F))), shared MLP;
/// returns (A_c of shape {N,C,1,1,1}, F' = A_c broadcast-multiplied into F).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> channel_attention(const Tensor<T>& F,
                                                  const AttentionParams<T>& mod);

/// `iterations` successive (k=3, s=2, p=1) average / max poolings of a
/// {N,1,D,H,W} mask; iterations = level-1 aligns the mask with that encoder
/// level's feature grid. Returns (avg-pooled, max-pooled).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> pool_masks(const Tensor<T>& mask, int iterations);

/// Spatial attention at 1-based encoder `level`: concat channel-pooled F' with
/// the four pooled prior-mask maps, 7^3 conv to one channel, sigmoid; returns
/// (A_s of shape {N,1,d,h,w}, F'' = A_s broadcast-multiplied into F').
template <typename T>
std::pair<Tensor<T>, Tensor<T>> spatial_attention(const Tensor<T>& f_prime,
                                                  const Tensor<T>& prior_gtvp,
                                                  const Tensor<T>& prior_gtvn,
                                                  const AttentionParams<T>& mod, int level);

/// Full attention module: F + F'' with F'' from the chained channel and
/// spatial attentions. Priors are full-resolution {N,1,D,H,W} masks.
template <typename T>
Tensor<T> mask_attention_apply(const Tensor<T>& F, const Tensor<T>& prior_gtvp,
                               const Tensor<T>& prior_gtvn, const AttentionParams<T>& mod,
                               int level);

/// Everything the forward pass produces: encoder outputs per level, decoder
/// outputs (index 0 = full resolution), and per-head logits plus softmax
/// probability maps. heads[k] lives at 1/2^k of the input resolution.
template <typename T>
struct ForwardTrace {
    std::vector<Tensor<T>> encoder;
    std::vector<Tensor<T>> decoder;
    std::vector<Tensor<T>> logits;
    std::vector<Tensor<T>> heads;
};

template <typename T>
ForwardTrace<T> forward_trace(const Network<T>& net, const Tensor<T>& x,
                              const Tensor<T>& prior_gtvp = Tensor<T>(),
                              const Tensor<T>& prior_gtvn = Tensor<T>());

/// Softmax probability maps from each deep-supervision head, full resolution
/// first. Priors are required (zero masks are fine) when attention is on.
template <typename T>
std::vector<Tensor<T>> forward(const Network<T>& net, const Tensor<T>& x,
                               const Tensor<T>& prior_gtvp = Tensor<T>(),
                               const Tensor<T>& prior_gtvn = Tensor<T>());

}  // namespace longiseg
