#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <vector>

#include "gradcheck.hpp"
#include "longiseg/error.hpp"
#include "longiseg/network.hpp"
#include "longiseg/ops.hpp"
#include "longiseg/random.hpp"
#include "longiseg/weights.hpp"
#include "testutil.hpp"

using namespace longiseg;

namespace {

template <typename T>
Tensor<T> random_t(Shape shape, std::mt19937_64& g, double lo = -1.0, double hi = 1.0) {
    std::vector<T> data(std::size_t(shape_numel(shape)));
    for (auto& v : data)
        v = T(uniform_range(g, lo, hi));
    return Tensor<T>::from_data(std::move(shape), std::move(data));
}

template <typename T>
Tensor<T> random_binary(Shape shape, std::mt19937_64& g, double p = 0.3) {
    std::vector<T> data(std::size_t(shape_numel(shape)));
    for (auto& v : data)
        v = uniform_double(g) < p ? T(1) : T(0);
    return Tensor<T>::from_data(std::move(shape), std::move(data));
}

NetworkConfig micro_config(bool attention) {
    NetworkConfig cfg;
    cfg.in_channels = 1;
    cfg.init_filters = 2;
    cfg.blocks_per_level = {1, 1, 1};
    cfg.n_levels = 3;
    cfg.deep_supervision_levels = 2;
    cfg.attention_enabled = attention;
    cfg.mlp_reduction_ratio = 2;
    cfg.spatial_attention_kernel = 3;
    return cfg;
}

/// Parameter count derived from the layer list alone, independent of the
/// builder's registration logic.
std::int64_t expected_param_count(const NetworkConfig& c) {
    auto C = [&](int l) { return std::int64_t(c.init_filters) << (l - 1); };
    auto res_block = [&](std::int64_t ch) { return 4 * ch + 2 * (ch * ch * 27 + ch); };
    std::int64_t total = std::int64_t(c.in_channels) * C(1) * 27 + C(1);  // stem
    for (int l = 1; l <= c.n_levels; ++l) {
        if (l > 1)
            total += C(l - 1) * C(l) * 27 + C(l);  // stride-2 downsample conv
        total += c.blocks_per_level[std::size_t(l - 1)] * res_block(C(l));
        if (c.attention_enabled) {
            const std::int64_t h = std::max<std::int64_t>(1, C(l) / c.mlp_reduction_ratio);
            const std::int64_t k = c.spatial_attention_kernel;
            total += h * C(l) + h + C(l) * h + C(l);  // shared MLP
            total += 6 * k * k * k + 1;               // 6->1 spatial conv
        }
    }
    for (int l = 1; l <= c.n_levels - 1; ++l)
        total += C(l + 1) * C(l) * 8 + C(l) + res_block(C(l));  // up conv + fusion block
    for (int k = 1; k <= c.deep_supervision_levels; ++k)
        total += C(k) * c.n_classes + c.n_classes;  // 1x1x1 head
    return total;
}

}  // namespace

TEST_CASE("network config validation rejects inconsistencies") {
    NetworkConfig ok = micro_config(false);
    CHECK_NOTHROW(ok.validate());

    auto broken = ok;
    broken.blocks_per_level = {1, 1};
    CHECK_THROWS_AS(broken.validate(), ConfigError);
    broken = ok;
    broken.deep_supervision_levels = 3;  // only n_levels-1 decoder outputs exist
    CHECK_THROWS_AS(broken.validate(), ConfigError);
    broken = ok;
    broken.spatial_attention_kernel = 4;
    CHECK_THROWS_AS(broken.validate(), ConfigError);
    broken = ok;
    broken.init_filters = 0;
    CHECK_THROWS_AS(broken.validate(), ConfigError);
    CHECK_THROWS_AS(build<float>(broken, 1), ConfigError);
}

TEST_CASE("full-depth network produces the documented shapes") {
    NetworkConfig cfg;
    cfg.init_filters = 4;
    auto net = build<float>(cfg, 42);

    auto g = testutil::rng(400);
    auto x = random_t<float>({1, 1, 32, 32, 32}, g);
    NoGradGuard ng;
    auto trace = forward_trace(net, x);

    REQUIRE(trace.encoder.size() == 6);
    CHECK(trace.encoder.back().shape() == Shape{1, 128, 1, 1, 1});  // bottleneck
    REQUIRE(trace.heads.size() == 4);
    CHECK(trace.heads[0].shape() == Shape{1, 3, 32, 32, 32});
    CHECK(trace.heads[1].shape() == Shape{1, 3, 16, 16, 16});
    CHECK(trace.heads[2].shape() == Shape{1, 3, 8, 8, 8});
    CHECK(trace.heads[3].shape() == Shape{1, 3, 4, 4, 4});
}

TEST_CASE("head probabilities sum to one at every voxel") {
    auto net = build<float>(micro_config(false), 7);
    auto g = testutil::rng(401);
    auto x = random_t<float>({2, 1, 8, 8, 8}, g);
    NoGradGuard ng;
    auto heads = forward(net, x);
    REQUIRE(heads.size() == 2);
    for (const auto& h : heads) {
        const std::int64_t n = h.dim(0), spatial = h.dim(2) * h.dim(3) * h.dim(4);
        for (std::int64_t b = 0; b < n; ++b)
            for (std::int64_t i = 0; i < spatial; ++i) {
                double sum = 0.0;
                for (std::int64_t c = 0; c < 3; ++c)
                    sum += double(h.data()[std::size_t((b * 3 + c) * spatial + i)]);
                CHECK(std::fabs(sum - 1.0) < 1e-5);
            }
    }
}

TEST_CASE("builds are deterministic and forward is reproducible") {
    auto cfg = micro_config(true);
    auto a = build<float>(cfg, 123);
    auto b = build<float>(cfg, 123);
    REQUIRE(a.named.size() == b.named.size());
    for (std::size_t i = 0; i < a.named.size(); ++i) {
        CHECK(a.named[i].first == b.named[i].first);
        CHECK(a.named[i].second.data() == b.named[i].second.data());
    }
    auto c = build<float>(cfg, 124);
    CHECK(a.named[0].second.data() != c.named[0].second.data());

    auto g = testutil::rng(402);
    auto x = random_t<float>({1, 1, 8, 8, 8}, g);
    auto zp = TensorF::zeros({1, 1, 8, 8, 8});
    auto zn = TensorF::zeros({1, 1, 8, 8, 8});
    NoGradGuard ng;
    auto h1 = forward(a, x, zp, zn);
    auto h2 = forward(a, x, zp, zn);
    for (std::size_t k = 0; k < h1.size(); ++k)
        CHECK(h1[k].data() == h2[k].data());
}

TEST_CASE("parameter count matches the closed-form layer inventory") {
    for (bool attention : {false, true}) {
        auto cfg = micro_config(attention);
        auto net = build<float>(cfg, 1);
        CHECK(net.parameter_count() == expected_param_count(cfg));
    }
    NetworkConfig full;
    full.init_filters = 4;
    auto net = build<float>(full, 1);
    CHECK(net.parameter_count() == expected_param_count(full));
    NetworkConfig ma = full;
    ma.attention_enabled = true;
    ma.in_channels = 3;
    CHECK(build<float>(ma, 1).parameter_count() == expected_param_count(ma));
}

TEST_CASE("channel attention: zero MLP gives a flat 0.5 gate") {
    AttentionParams<float> mod;
    mod.mlp_w1 = TensorF::zeros({2, 4});
    mod.mlp_b1 = TensorF::zeros({2});
    mod.mlp_w2 = TensorF::zeros({4, 2});
    mod.mlp_b2 = TensorF::zeros({4});
    mod.spatial.w = TensorF::zeros({1, 6, 3, 3, 3});
    mod.spatial.b = TensorF::zeros({1});

    auto g = testutil::rng(403);
    auto F = random_t<float>({2, 4, 3, 3, 3}, g);
    auto [a_c, f_prime] = channel_attention(F, mod);
    REQUIRE(a_c.shape() == Shape{2, 4, 1, 1, 1});
    for (float v : a_c.data())
        CHECK(v == 0.5f);
    for (std::size_t i = 0; i < F.data().size(); ++i)
        CHECK(f_prime.data()[i] == 0.5f * F.data()[i]);

    auto zero = TensorF::zeros({2, 4, 3, 3, 3});
    auto f0 = channel_attention(zero, mod).second;
    for (float v : f0.data())
        CHECK(v == 0.0f);

    auto bad = random_t<float>({2, 5, 3, 3, 3}, g);
    CHECK_THROWS_AS(channel_attention(bad, mod), ShapeError);
}

TEST_CASE("channel attention matches a dense reimplementation") {
    auto net = build<float>(micro_config(true), 31);
    const auto& mod = *net.encoder[1].attention;  // level 2: C=4, hidden=2
    auto g = testutil::rng(404);
    auto F = random_t<float>({2, 4, 3, 3, 3}, g, -2.0, 2.0);
    auto [a_c, f_prime] = channel_attention(F, mod);

    const std::int64_t N = 2, C = 4, H = 2, M = 27;
    for (std::int64_t n = 0; n < N; ++n) {
        // Direct pooling, MLP, sigmoid with plain loops.
        std::vector<double> gap(C, 0.0), gmp(C, -1e30);
        for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t i = 0; i < M; ++i) {
                const double v = double(F.data()[std::size_t((n * C + c) * M + i)]);
                gap[std::size_t(c)] += v / double(M);
                gmp[std::size_t(c)] = std::max(gmp[std::size_t(c)], v);
            }
        auto mlp = [&](const std::vector<double>& in) {
            std::vector<double> hid(H, 0.0), out(C, 0.0);
            for (std::int64_t h = 0; h < H; ++h) {
                double acc = double(mod.mlp_b1.data()[std::size_t(h)]);
                for (std::int64_t c = 0; c < C; ++c)
                    acc += double(mod.mlp_w1.data()[std::size_t(h * C + c)]) * in[std::size_t(c)];
                hid[std::size_t(h)] = std::max(0.0, acc);
            }
            for (std::int64_t c = 0; c < C; ++c) {
                double acc = double(mod.mlp_b2.data()[std::size_t(c)]);
                for (std::int64_t h = 0; h < H; ++h)
                    acc += double(mod.mlp_w2.data()[std::size_t(c * H + h)]) * hid[std::size_t(h)];
                out[std::size_t(c)] = acc;
            }
            return out;
        };
        const auto oa = mlp(gap), om = mlp(gmp);
        for (std::int64_t c = 0; c < C; ++c) {
            const double expect = 1.0 / (1.0 + std::exp(-(oa[std::size_t(c)] + om[std::size_t(c)])));
            const double got = double(a_c.data()[std::size_t(n * C + c)]);
            CHECK(std::fabs(got - expect) < 1e-5);
            CHECK(got > 0.0);
            CHECK(got < 1.0);
            for (std::int64_t i = 0; i < M; ++i) {
                const std::size_t idx = std::size_t((n * C + c) * M + i);
                CHECK(std::fabs(double(f_prime.data()[idx]) -
                                expect * double(F.data()[idx])) < 1e-5);
            }
        }
    }
}

TEST_CASE("pool_masks geometry and constant behavior") {
    auto g = testutil::rng(405);
    auto mask = random_binary<float>({1, 1, 16, 16, 16}, g);

    auto [a0, m0] = pool_masks(mask, 0);
    CHECK(a0.data() == mask.data());
    CHECK(m0.data() == mask.data());

    auto ones = TensorF::full({1, 1, 16, 16, 16}, 1.0f);
    auto [a2, m2] = pool_masks(ones, 2);
    REQUIRE(a2.shape() == Shape{1, 1, 4, 4, 4});
    for (float v : m2.data())
        CHECK(v == 1.0f);
    // Average pooling dips below 1 only where a window touched the padding;
    // interior voxels stay exactly 1.
    for (std::int64_t z = 1; z < 3; ++z)
        for (std::int64_t y = 1; y < 3; ++y)
            for (std::int64_t x = 1; x < 3; ++x)
                CHECK(a2.data()[std::size_t((z * 4 + y) * 4 + x)] == 1.0f);

    auto [a3, m3] = pool_masks(random_binary<float>({1, 1, 32, 32, 32}, g), 3);
    CHECK(a3.shape() == Shape{1, 1, 4, 4, 4});
    CHECK(m3.shape() == Shape{1, 1, 4, 4, 4});
    for (float v : m3.data())
        CHECK((v == 0.0f || v == 1.0f));

    CHECK_THROWS_AS(pool_masks(mask, -1), ConfigError);
    CHECK_THROWS_AS(pool_masks(random_t<float>({1, 2, 8, 8, 8}, g), 1), ShapeError);
}

TEST_CASE("spatial attention: zero conv gives a flat 0.5 gate and zero priors work") {
    auto net = build<float>(micro_config(true), 57);
    auto mod = *net.encoder[0].attention;  // level 1: C=2
    auto g = testutil::rng(406);
    auto fp = random_t<float>({1, 2, 8, 8, 8}, g);
    auto zp = TensorF::zeros({1, 1, 8, 8, 8});
    auto zn = TensorF::zeros({1, 1, 8, 8, 8});

    AttentionParams<float> zeroed = mod;
    zeroed.spatial.w = TensorF::zeros(mod.spatial.w.shape());
    zeroed.spatial.b = TensorF::zeros({1});
    auto [a_s0, f20] = spatial_attention(fp, zp, zn, zeroed, 1);
    for (float v : a_s0.data())
        CHECK(v == 0.5f);
    for (std::size_t i = 0; i < fp.data().size(); ++i)
        CHECK(f20.data()[i] == 0.5f * fp.data()[i]);

    // Zero priors with real weights: still well-defined, gate strictly inside (0,1).
    auto [a_s, f2] = spatial_attention(fp, zp, zn, mod, 1);
    REQUIRE(a_s.shape() == Shape{1, 1, 8, 8, 8});
    for (float v : a_s.data()) {
        CHECK(v > 0.0f);
        CHECK(v < 1.0f);
    }
    for (float v : f2.data())
        CHECK(std::isfinite(v));

    // Pooled priors must land on the feature grid: wrong level → mismatch.
    CHECK_THROWS_AS(spatial_attention(fp, zp, zn, mod, 2), ShapeError);
}

TEST_CASE("spatial attention matches a brute-force reimplementation") {
    auto net = build<float>(micro_config(true), 58);
    const auto& mod = *net.encoder[1].attention;  // level 2, k=3 spatial conv
    auto g = testutil::rng(407);
    const std::int64_t C = 4, D = 4;
    auto fp = random_t<float>({1, C, D, D, D}, g, -2.0, 2.0);
    auto gtvp = random_binary<float>({1, 1, 8, 8, 8}, g);
    auto gtvn = random_binary<float>({1, 1, 8, 8, 8}, g);
    auto [a_s, f2] = spatial_attention(fp, gtvp, gtvn, mod, 2);

    // Reference: pool the masks once (k=3, s=2, p=1; average excludes padding),
    // channel-pool the features, run the 3^3 conv and sigmoid by hand.
    const std::int64_t M = D * D * D;
    auto pool_ref = [&](const TensorF& m, bool is_max) {
        std::vector<double> out(std::size_t(M), 0.0);
        for (std::int64_t z = 0; z < D; ++z)
            for (std::int64_t y = 0; y < D; ++y)
                for (std::int64_t x = 0; x < D; ++x) {
                    double acc = 0.0, best = -1e30;
                    int count = 0;
                    for (int dz = -1; dz <= 1; ++dz)
                        for (int dy = -1; dy <= 1; ++dy)
                            for (int dx = -1; dx <= 1; ++dx) {
                                const std::int64_t iz = 2 * z + dz, iy = 2 * y + dy,
                                                   ix = 2 * x + dx;
                                if (iz < 0 || iz >= 8 || iy < 0 || iy >= 8 || ix < 0 || ix >= 8)
                                    continue;
                                const double v =
                                    double(m.data()[std::size_t((iz * 8 + iy) * 8 + ix)]);
                                acc += v;
                                best = std::max(best, v);
                                ++count;
                            }
                    out[std::size_t((z * D + y) * D + x)] = is_max ? best : acc / count;
                }
        return out;
    };
    std::vector<std::vector<double>> chan(6, std::vector<double>(std::size_t(M), 0.0));
    for (std::int64_t i = 0; i < M; ++i) {
        double acc = 0.0, best = -1e30;
        for (std::int64_t c = 0; c < C; ++c) {
            const double v = double(fp.data()[std::size_t(c * M + i)]);
            acc += v;
            best = std::max(best, v);
        }
        chan[0][std::size_t(i)] = acc / double(C);
        chan[1][std::size_t(i)] = best;
    }
    chan[2] = pool_ref(gtvp, false);
    chan[3] = pool_ref(gtvp, true);
    chan[4] = pool_ref(gtvn, false);
    chan[5] = pool_ref(gtvn, true);

    for (std::int64_t z = 0; z < D; ++z)
        for (std::int64_t y = 0; y < D; ++y)
            for (std::int64_t x = 0; x < D; ++x) {
                double acc = double(mod.spatial.b.data()[0]);
                for (int ci = 0; ci < 6; ++ci)
                    for (int dz = -1; dz <= 1; ++dz)
                        for (int dy = -1; dy <= 1; ++dy)
                            for (int dx = -1; dx <= 1; ++dx) {
                                const std::int64_t iz = z + dz, iy = y + dy, ix = x + dx;
                                if (iz < 0 || iz >= D || iy < 0 || iy >= D || ix < 0 || ix >= D)
                                    continue;
                                const double wv = double(
                                    mod.spatial.w.data()[std::size_t(
                                        ((std::int64_t(ci) * 3 + dz + 1) * 3 + dy + 1) * 3 + dx +
                                        1)]);
                                acc += wv *
                                       chan[std::size_t(ci)][std::size_t((iz * D + iy) * D + ix)];
                            }
                const double expect = 1.0 / (1.0 + std::exp(-acc));
                const std::size_t o = std::size_t((z * D + y) * D + x);
                CHECK(std::fabs(double(a_s.data()[o]) - expect) < 1e-5);
                for (std::int64_t c = 0; c < C; ++c)
                    CHECK(std::fabs(double(f2.data()[std::size_t(c * M + o)]) -
                                    expect * double(fp.data()[std::size_t(c * M + o)])) < 1e-5);
            }
}

TEST_CASE("mask attention preserves shape and fixes zero features") {
    auto net = build<float>(micro_config(true), 59);
    const auto& mod = *net.encoder[0].attention;
    auto zp = TensorF::zeros({1, 1, 8, 8, 8});
    auto zn = TensorF::zeros({1, 1, 8, 8, 8});

    auto zero = TensorF::zeros({1, 2, 8, 8, 8});
    auto out = mask_attention_apply(zero, zp, zn, mod, 1);
    CHECK(out.shape() == zero.shape());
    for (float v : out.data())
        CHECK(v == 0.0f);

    auto g = testutil::rng(408);
    auto F = random_t<float>({1, 2, 8, 8, 8}, g);
    auto out2 = mask_attention_apply(F, zp, zn, mod, 1);
    CHECK(out2.shape() == F.shape());
    for (float v : out2.data())
        CHECK(std::isfinite(v));
}

TEST_CASE("attention-enabled forward requires priors") {
    auto net = build<float>(micro_config(true), 60);
    auto g = testutil::rng(409);
    auto x = random_t<float>({1, 1, 8, 8, 8}, g);
    NoGradGuard ng;
    CHECK_THROWS_AS(forward(net, x), UsageError);
    auto zp = TensorF::zeros({1, 1, 8, 8, 8});
    CHECK_THROWS_AS(forward(net, x, zp, TensorF()), UsageError);
    CHECK_THROWS_AS(forward(net, x, zp, TensorF::zeros({1, 1, 4, 8, 8})), ShapeError);
    CHECK_NOTHROW(forward(net, x, zp, TensorF::zeros({1, 1, 8, 8, 8})));

    // Spatial dims not divisible by 2^(levels-1).
    CHECK_THROWS_AS(forward(net, random_t<float>({1, 1, 6, 8, 8}, g), zp, zp), UsageError);
}

TEST_CASE("f32 and f64 networks from one seed agree on forward outputs") {
    auto cfg = micro_config(true);
    auto nf = build<float>(cfg, 77);
    auto nd = build<double>(cfg, 77);

    // Same draws, different rounding: f32 parameters are the rounded f64 ones.
    REQUIRE(nf.named.size() == nd.named.size());
    for (std::size_t i = 0; i < nf.named.size(); ++i)
        for (std::size_t j = 0; j < nf.named[i].second.data().size(); ++j)
            CHECK(nf.named[i].second.data()[j] ==
                  doctest::Approx(nd.named[i].second.data()[j]).epsilon(1e-6));

    auto g = testutil::rng(410);
    auto xf = random_t<float>({1, 1, 8, 8, 8}, g, -2.0, 2.0);
    std::vector<double> xd_data(xf.data().begin(), xf.data().end());
    auto xd = TensorD::from_data({1, 1, 8, 8, 8}, std::move(xd_data));
    auto zpf = TensorF::zeros({1, 1, 8, 8, 8}), znf = TensorF::zeros({1, 1, 8, 8, 8});
    auto zpd = TensorD::zeros({1, 1, 8, 8, 8}), znd = TensorD::zeros({1, 1, 8, 8, 8});

    NoGradGuard ng;
    auto hf = forward(nf, xf, zpf, znf);
    auto hd = forward(nd, xd, zpd, znd);
    REQUIRE(hf.size() == hd.size());
    for (std::size_t k = 0; k < hf.size(); ++k)
        for (std::size_t i = 0; i < hf[k].data().size(); ++i)
            CHECK(testutil::rel_err(double(hf[k].data()[i]), hd[k].data()[i]) < 1e-3);
}

TEST_CASE("whole-network gradients match finite differences") {
    NetworkConfig cfg;
    cfg.in_channels = 1;
    cfg.init_filters = 2;
    cfg.blocks_per_level = {1, 1};
    cfg.n_levels = 2;
    cfg.deep_supervision_levels = 1;
    cfg.attention_enabled = true;
    cfg.mlp_reduction_ratio = 2;
    cfg.spatial_attention_kernel = 3;
    auto net = build<double>(cfg, 99);

    auto g = testutil::rng(411);
    auto x = random_t<double>({1, 1, 8, 8, 8}, g, -1.0, 1.0);
    auto gtvp = random_binary<double>({1, 1, 8, 8, 8}, g);
    auto gtvn = random_binary<double>({1, 1, 8, 8, 8}, g);
    auto r = random_t<double>({1, 3, 8, 8, 8}, g);

    // One parameter tensor from every distinct layer kind.
    std::vector<TensorD> subset = {
        net.param("stem.w"),          net.param("enc1.block0.norm1.gamma"),
        net.param("enc1.block0.conv1.b"), net.param("enc1.attn.mlp1.w"),
        net.param("enc1.attn.mlp2.b"), net.param("enc2.attn.spatial.w"),
        net.param("enc2.down.b"),     net.param("dec1.up.w"),
        net.param("head0.w"),         net.param("head0.b"),
    };
    // eps below the default: a stem-weight step of 1e-4 can push a downstream
    // ReLU preactivation across zero, which corrupts the difference quotient
    // without saying anything about the analytic gradient.
    const double err = testutil::max_grad_rel_err(
        subset, [&]() { return sum_all(mul(forward(net, x, gtvp, gtvn)[0], r)); }, 1e-5);
    CHECK(err < 1e-4);
}

TEST_CASE("weight files round-trip bitwise and validate hard") {
    testutil::TempDir dir("weights");
    auto cfg = micro_config(true);
    auto net = build<float>(cfg, 2024);
    const std::string path = dir.file("net.lsw");
    save_weights(net, path);

    auto loaded = load_weights<float>(path, cfg);
    REQUIRE(loaded.named.size() == net.named.size());
    for (std::size_t i = 0; i < net.named.size(); ++i) {
        CHECK(loaded.named[i].first == net.named[i].first);
        CHECK(loaded.named[i].second.data() == net.named[i].second.data());
    }

    SUBCASE("truncated payload fails the extent check") {
        std::ifstream in(path, std::ios::binary | std::ios::ate);
        const std::streamsize size = in.tellg();
        in.seekg(0);
        std::vector<char> bytes(std::size_t(size) - 64);
        in.read(bytes.data(), std::streamsize(bytes.size()));
        const std::string cut = dir.file("cut.lsw");
        std::ofstream(cut, std::ios::binary).write(bytes.data(), std::streamsize(bytes.size()));
        CHECK_THROWS_AS(load_weights<float>(cut, cfg), FormatError);
    }

    SUBCASE("corrupted payload fails its parameter checksum") {
        std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
        f.seekp(-6, std::ios::end);
        const char junk = 0x5A;
        f.write(&junk, 1);
        f.close();
        CHECK_THROWS_WITH_AS(load_weights<float>(path, cfg),
                             doctest::Contains("checksum mismatch"), FormatError);
    }

    SUBCASE("narrower config reports the first shape conflict by name") {
        auto narrow = cfg;
        narrow.init_filters = 4;  // same names, different widths
        CHECK_THROWS_AS(load_weights<float>(path, narrow), ShapeError);
    }

    SUBCASE("attention-free config rejects the extra attention parameters") {
        auto plain = cfg;
        plain.attention_enabled = false;
        CHECK_THROWS_WITH_AS(load_weights<float>(path, plain),
                             doctest::Contains("unexpected parameter"), FormatError);
    }

    SUBCASE("file without attention parameters fails a mask-aware config") {
        auto plain = cfg;
        plain.attention_enabled = false;
        const std::string p2 = dir.file("plain.lsw");
        save_weights(build<float>(plain, 5), p2);
        CHECK_THROWS_WITH_AS(load_weights<float>(p2, cfg),
                             doctest::Contains("missing parameter"), FormatError);
    }

    SUBCASE("not a weight file") {
        const std::string p3 = dir.file("junk.lsw");
        std::ofstream(p3, std::ios::binary) << "definitely not weights";
        CHECK_THROWS_AS(load_weights<float>(p3, cfg), FormatError);
    }
}
