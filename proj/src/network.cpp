#include "longiseg/network.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "longiseg/error.hpp"
#include "longiseg/ops.hpp"
#include "longiseg/random.hpp"

namespace longiseg {

void NetworkConfig::validate() const {
    if (in_channels < 1)
        throw ConfigError("network: in_channels must be >= 1, got " + std::to_string(in_channels));
    if (n_classes < 2)
        throw ConfigError("network: n_classes must be >= 2, got " + std::to_string(n_classes));
    if (init_filters < 1)
        throw ConfigError("network: init_filters must be >= 1");
    if (n_levels < 2)
        throw ConfigError("network: n_levels must be >= 2, got " + std::to_string(n_levels));
    if (std::int64_t(blocks_per_level.size()) != n_levels)
        throw ConfigError("network: blocks_per_level has " +
                          std::to_string(blocks_per_level.size()) + " entries for " +
                          std::to_string(n_levels) + " levels");
    for (int b : blocks_per_level)
        if (b < 1)
            throw ConfigError("network: blocks_per_level entries must be >= 1");
    if (deep_supervision_levels < 1 || deep_supervision_levels > n_levels - 1)
        throw ConfigError("network: deep_supervision_levels must be in [1, n_levels-1], got " +
                          std::to_string(deep_supervision_levels));
    if (mlp_reduction_ratio < 1)
        throw ConfigError("network: mlp_reduction_ratio must be >= 1");
    if (spatial_attention_kernel < 1 || spatial_attention_kernel % 2 == 0)
        throw ConfigError("network: spatial_attention_kernel must be odd and >= 1, got " +
                          std::to_string(spatial_attention_kernel));
}

namespace {

/// Builds parameters in a fixed registration order, drawing every random
/// weight in f64 so f32 and f64 builds from one seed agree to rounding.
template <typename T>
class ParamFactory {
  public:
    ParamFactory(Network<T>& net, std::mt19937_64& rng) : net_(net), rng_(rng) {}

    ConvParams<T> conv(const std::string& name, std::int64_t c_out, std::int64_t c_in,
                       std::int64_t k) {
        ConvParams<T> p;
        p.w = he_normal(name + ".w", {c_out, c_in, k, k, k}, c_in * k * k * k);
        p.b = constant(name + ".b", {c_out}, 0.0);
        return p;
    }

    // Transposed conv weights are {C_in, C_out, k, k, k}.
    ConvParams<T> conv_transpose(const std::string& name, std::int64_t c_in, std::int64_t c_out,
                                 std::int64_t k) {
        ConvParams<T> p;
        p.w = he_normal(name + ".w", {c_in, c_out, k, k, k}, c_in * k * k * k);
        p.b = constant(name + ".b", {c_out}, 0.0);
        return p;
    }

    NormParams<T> norm(const std::string& name, std::int64_t c) {
        NormParams<T> p;
        p.gamma = constant(name + ".gamma", {c}, 1.0);
        p.beta = constant(name + ".beta", {c}, 0.0);
        return p;
    }

    ResBlockParams<T> res_block(const std::string& name, std::int64_t c) {
        ResBlockParams<T> p;
        p.n1 = norm(name + ".norm1", c);
        p.c1 = conv(name + ".conv1", c, c, 3);
        p.n2 = norm(name + ".norm2", c);
        p.c2 = conv(name + ".conv2", c, c, 3);
        return p;
    }

    Tensor<T> linear(const std::string& name, std::int64_t out_f, std::int64_t in_f) {
        return he_normal(name, {out_f, in_f}, in_f);
    }

    Tensor<T> constant(const std::string& name, Shape shape, double value) {
        auto t = Tensor<T>::full(std::move(shape), T(value), true);
        net_.named.emplace_back(name, t);
        return t;
    }

    Tensor<T> he_normal(const std::string& name, Shape shape, std::int64_t fan_in) {
        const double stddev = std::sqrt(2.0 / double(fan_in));
        std::vector<T> data(std::size_t(shape_numel(shape)));
        for (auto& v : data)
            v = T(stddev * normal_sample(rng_));
        auto t = Tensor<T>::from_data(std::move(shape), std::move(data), true);
        net_.named.emplace_back(name, t);
        return t;
    }

  private:
    Network<T>& net_;
    std::mt19937_64& rng_;
};

template <typename T>
AttentionParams<T> make_attention(ParamFactory<T>& f, const std::string& name, std::int64_t c,
                                  int reduction, int kernel) {
    AttentionParams<T> p;
    const std::int64_t hidden = std::max<std::int64_t>(1, c / reduction);
    p.mlp_w1 = f.linear(name + ".mlp1.w", hidden, c);
    p.mlp_b1 = f.constant(name + ".mlp1.b", {hidden}, 0.0);
    p.mlp_w2 = f.linear(name + ".mlp2.w", c, hidden);
    p.mlp_b2 = f.constant(name + ".mlp2.b", {c}, 0.0);
    p.spatial = f.conv(name + ".spatial", 1, 6, kernel);
    return p;
}

template <typename T>
Tensor<T> apply_res_block(const Tensor<T>& x, const ResBlockParams<T>& p) {
    auto t = conv3d(relu(instance_norm(x, p.n1.gamma, p.n1.beta)), p.c1.w, p.c1.b, 1, 1);
    t = conv3d(relu(instance_norm(t, p.n2.gamma, p.n2.beta)), p.c2.w, p.c2.b, 1, 1);
    return add(x, t);
}

template <typename T>
void check_prior(const char* which, const Tensor<T>& prior, const Tensor<T>& x) {
    if (!prior.defined())
        throw UsageError(std::string("forward: attention is enabled but the ") + which +
                         " prior mask is missing (pass an all-zero mask when none exists)");
    if (prior.shape() != Shape{x.dim(0), 1, x.dim(2), x.dim(3), x.dim(4)})
        throw ShapeError(std::string("forward: ") + which + " prior has shape " +
                         shape_str(prior.shape()) + ", expected (" + std::to_string(x.dim(0)) +
                         ", 1, " + std::to_string(x.dim(2)) + ", " + std::to_string(x.dim(3)) +
                         ", " + std::to_string(x.dim(4)) + ")");
}

}  // namespace

template <typename T>
std::vector<Tensor<T>> Network<T>::parameters() const {
    std::vector<Tensor<T>> out;
    out.reserve(named.size());
    for (const auto& [name, t] : named)
        out.push_back(t);
    return out;
}

template <typename T>
std::int64_t Network<T>::parameter_count() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : named)
        n += t.numel();
    return n;
}

template <typename T>
const Tensor<T>& Network<T>::param(const std::string& name) const {
    for (const auto& [n, t] : named)
        if (n == name)
            return t;
    throw ConfigError("network has no parameter named '" + name + "'");
}

template <typename T>
Network<T> build(const NetworkConfig& config, std::uint64_t seed) {
    config.validate();
    Network<T> net;
    net.config = config;
    std::mt19937_64 rng(seed);
    ParamFactory<T> f(net, rng);

    net.stem = f.conv("stem", config.channels_at(1), config.in_channels, 3);

    for (int l = 1; l <= config.n_levels; ++l) {
        EncoderLevel<T> level;
        const std::int64_t c = config.channels_at(l);
        const std::string base = "enc" + std::to_string(l);
        if (l > 1)
            level.down = f.conv(base + ".down", c, config.channels_at(l - 1), 3);
        for (int b = 0; b < config.blocks_per_level[std::size_t(l - 1)]; ++b)
            level.blocks.push_back(f.res_block(base + ".block" + std::to_string(b), c));
        if (config.attention_enabled)
            level.attention = make_attention(f, base + ".attn", c, config.mlp_reduction_ratio,
                                             config.spatial_attention_kernel);
        net.encoder.push_back(std::move(level));
    }

    net.decoder.resize(std::size_t(config.n_levels - 1));
    for (int l = config.n_levels - 1; l >= 1; --l) {
        DecoderLevel<T> level;
        const std::string base = "dec" + std::to_string(l);
        level.up = f.conv_transpose(base + ".up", config.channels_at(l + 1), config.channels_at(l),
                                    2);
        level.block = f.res_block(base + ".res", config.channels_at(l));
        net.decoder[std::size_t(l - 1)] = std::move(level);
    }

    for (int k = 0; k < config.deep_supervision_levels; ++k)
        net.heads.push_back(
            f.conv("head" + std::to_string(k), config.n_classes, config.channels_at(k + 1), 1));

    return net;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> channel_attention(const Tensor<T>& F,
                                                  const AttentionParams<T>& mod) {
    if (!F.defined() || F.shape().size() != 5)
        throw ShapeError("channel_attention: expected a rank-5 feature tensor");
    const std::int64_t N = F.dim(0), C = F.dim(1);
    if (mod.mlp_w1.dim(1) != C)
        throw ShapeError("channel_attention: features have " + std::to_string(C) +
                         " channels but the MLP expects " + std::to_string(mod.mlp_w1.dim(1)));

    auto mlp = [&](const Tensor<T>& pooled) {
        auto v = reshape(pooled, {N, C});
        return linear(relu(linear(v, mod.mlp_w1, mod.mlp_b1)), mod.mlp_w2, mod.mlp_b2);
    };
    auto logits = add(mlp(global_avgpool_s(F)), mlp(global_maxpool_s(F)));
    auto a_c = reshape(sigmoid(logits), {N, C, 1, 1, 1});
    return {a_c, mul_channelwise(F, a_c)};
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> pool_masks(const Tensor<T>& mask, int iterations) {
    if (iterations < 0)
        throw ConfigError("pool_masks: iterations must be >= 0, got " +
                          std::to_string(iterations));
    if (!mask.defined() || mask.shape().size() != 5 || mask.dim(1) != 1)
        throw ShapeError("pool_masks: expected a {N,1,D,H,W} mask tensor, got " +
                         (mask.defined() ? shape_str(mask.shape()) : std::string("undefined")));
    Tensor<T> avg = mask, mx = mask;
    for (int i = 0; i < iterations; ++i) {
        avg = avgpool_s(avg, 3, 2, 1);
        mx = maxpool_s(mx, 3, 2, 1);
    }
    return {avg, mx};
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> spatial_attention(const Tensor<T>& f_prime,
                                                  const Tensor<T>& prior_gtvp,
                                                  const Tensor<T>& prior_gtvn,
                                                  const AttentionParams<T>& mod, int level) {
    if (level < 1)
        throw ConfigError("spatial_attention: level is 1-based, got " + std::to_string(level));
    auto [p_avg, p_max] = pool_masks(prior_gtvp, level - 1);
    auto [n_avg, n_max] = pool_masks(prior_gtvn, level - 1);
    for (const auto* m : {&p_avg, &n_avg}) {
        if (m->dim(2) != f_prime.dim(2) || m->dim(3) != f_prime.dim(3) ||
            m->dim(4) != f_prime.dim(4))
            throw ShapeError("spatial_attention: pooled mask " + shape_str(m->shape()) +
                             " does not match feature grid " + shape_str(f_prime.shape()) +
                             " at level " + std::to_string(level));
    }
    auto stacked = concat(std::vector<Tensor<T>>{avgpool_c(f_prime), maxpool_c(f_prime), p_avg,
                                                 p_max, n_avg, n_max},
                          1);
    const int pad = int(mod.spatial.w.dim(2)) / 2;
    auto a_s = sigmoid(conv3d(stacked, mod.spatial.w, mod.spatial.b, 1, pad));
    return {a_s, mul_spatialwise(f_prime, a_s)};
}

template <typename T>
Tensor<T> mask_attention_apply(const Tensor<T>& F, const Tensor<T>& prior_gtvp,
                               const Tensor<T>& prior_gtvn, const AttentionParams<T>& mod,
                               int level) {
    auto f_prime = channel_attention(F, mod).second;
    auto f_second = spatial_attention(f_prime, prior_gtvp, prior_gtvn, mod, level).second;
    return add(F, f_second);
}

template <typename T>
ForwardTrace<T> forward_trace(const Network<T>& net, const Tensor<T>& x,
                              const Tensor<T>& prior_gtvp, const Tensor<T>& prior_gtvn) {
    const NetworkConfig& cfg = net.config;
    if (!x.defined() || x.shape().size() != 5)
        throw ShapeError("forward: expected a {N,C,D,H,W} input tensor");
    if (x.dim(1) != cfg.in_channels)
        throw ShapeError("forward: input has " + std::to_string(x.dim(1)) +
                         " channels, network expects " + std::to_string(cfg.in_channels));
    const std::int64_t divisor = cfg.spatial_divisor();
    for (int a = 2; a < 5; ++a)
        if (x.dim(a) % divisor != 0 || x.dim(a) < divisor)
            throw UsageError("forward: input spatial dims (" + std::to_string(x.dim(2)) + ", " +
                             std::to_string(x.dim(3)) + ", " + std::to_string(x.dim(4)) +
                             ") must be divisible by " + std::to_string(divisor));
    if (cfg.attention_enabled) {
        check_prior("GTVp", prior_gtvp, x);
        check_prior("GTVn", prior_gtvn, x);
    }

    ForwardTrace<T> trace;
    auto f = conv3d(x, net.stem.w, net.stem.b, 1, 1);
    for (int l = 1; l <= cfg.n_levels; ++l) {
        const EncoderLevel<T>& level = net.encoder[std::size_t(l - 1)];
        if (level.down)
            f = conv3d(f, level.down->w, level.down->b, 2, 1);
        for (const auto& block : level.blocks)
            f = apply_res_block(f, block);
        if (level.attention)
            f = mask_attention_apply(f, prior_gtvp, prior_gtvn, *level.attention, l);
        trace.encoder.push_back(f);
    }

    trace.decoder.resize(std::size_t(cfg.n_levels - 1));
    auto g = trace.encoder.back();
    for (int l = cfg.n_levels - 1; l >= 1; --l) {
        const DecoderLevel<T>& level = net.decoder[std::size_t(l - 1)];
        g = conv_transpose3d(g, level.up.w, level.up.b, 2, 0);
        g = add(g, trace.encoder[std::size_t(l - 1)]);
        g = apply_res_block(g, level.block);
        trace.decoder[std::size_t(l - 1)] = g;
    }

    for (int k = 0; k < cfg.deep_supervision_levels; ++k) {
        const auto& head = net.heads[std::size_t(k)];
        auto logits = conv3d(trace.decoder[std::size_t(k)], head.w, head.b, 1, 0);
        trace.logits.push_back(logits);
        trace.heads.push_back(softmax_channel(logits));
    }
    return trace;
}

template <typename T>
std::vector<Tensor<T>> forward(const Network<T>& net, const Tensor<T>& x,
                               const Tensor<T>& prior_gtvp, const Tensor<T>& prior_gtvn) {
    return forward_trace(net, x, prior_gtvp, prior_gtvn).heads;
}

#define LONGISEG_INSTANTIATE_NETWORK(T)                                                          \
    template struct Network<T>;                                                                  \
    template Network<T> build<T>(const NetworkConfig&, std::uint64_t);                           \
    template std::pair<Tensor<T>, Tensor<T>> channel_attention<T>(const Tensor<T>&,             \
                                                                  const AttentionParams<T>&);    \
    template std::pair<Tensor<T>, Tensor<T>> pool_masks<T>(const Tensor<T>&, int);              \
    template std::pair<Tensor<T>, Tensor<T>> spatial_attention<T>(                              \
        const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const AttentionParams<T>&, int);  \
    template Tensor<T> mask_attention_apply<T>(const Tensor<T>&, const Tensor<T>&,              \
                                               const Tensor<T>&, const AttentionParams<T>&,     \
                                               int);                                            \
    template ForwardTrace<T> forward_trace<T>(const Network<T>&, const Tensor<T>&,              \
                                              const Tensor<T>&, const Tensor<T>&);              \
    template std::vector<Tensor<T>> forward<T>(const Network<T>&, const Tensor<T>&,             \
                                               const Tensor<T>&, const Tensor<T>&);

LONGISEG_INSTANTIATE_NETWORK(float)
LONGISEG_INSTANTIATE_NETWORK(double)

#undef LONGISEG_INSTANTIATE_NETWORK

}  // namespace longiseg
