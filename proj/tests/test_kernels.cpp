#include <doctest.h>

#include <atomic>
#include <cmath>
#include <cstdint>
#include <vector>

#include "longiseg/error.hpp"
#include "longiseg/kernels.hpp"
#include "longiseg/threading.hpp"
#include "testutil.hpp"

using namespace longiseg;
namespace lk = longiseg::kernels;
using testutil::rel_err;

namespace {

// Lengths that exercise every SIMD remainder path (widths 4 and 8) plus a
// few larger sizes where accumulation order matters.
const std::vector<size_t> kLengths = {0,  1,  2,  3,  4,  5,  6,  7,  8,   9,
                                      15, 16, 17, 31, 32, 33, 100, 255, 1003};

struct BackendGuard {
    lk::Backend saved = lk::active();
    ~BackendGuard() { lk::set_active(saved); }
};

}  // namespace

TEST_CASE("backend dispatch basics") {
    BackendGuard guard;
    CHECK(lk::available(lk::Backend::scalar));
    CHECK(std::string(lk::name(lk::Backend::scalar)) == "scalar");
    CHECK(std::string(lk::name(lk::Backend::avx2)) == "avx2");

    auto avail = lk::all_available();
    CHECK(avail.size() >= 1);
    CHECK(avail[0] == lk::Backend::scalar);

    lk::set_active(lk::Backend::scalar);
    CHECK(lk::active() == lk::Backend::scalar);

    if (lk::available(lk::Backend::avx2)) {
        lk::set_active(lk::Backend::avx2);
        CHECK(lk::active() == lk::Backend::avx2);
    } else {
        CHECK_THROWS_AS(lk::set_active(lk::Backend::avx2), UnsupportedError);
    }
}

// Every kernel must agree with a plain double-precision reference, whichever
// backend is active. Runs the whole battery once per available backend.
TEST_CASE("kernel correctness against double reference") {
    BackendGuard guard;
    for (lk::Backend backend : lk::all_available()) {
        lk::set_active(backend);
        INFO("backend = ", lk::name(backend));
        auto g = testutil::rng(42);

        for (size_t n : kLengths) {
            auto a = testutil::random_floats(g, n, -2.0f, 2.0f);
            auto b = testutil::random_floats(g, n, -2.0f, 2.0f);
            auto c = testutil::random_floats(g, n, -2.0f, 2.0f);
            const float alpha = 0.37f;

            // axpy
            {
                auto dst = c;
                lk::axpy(dst.data(), a.data(), alpha, n);
                for (size_t i = 0; i < n; ++i)
                    CHECK(rel_err(dst[i], double(c[i]) + double(alpha) * double(a[i])) < 1e-6);
            }
            // dot
            {
                double ref = 0.0;
                for (size_t i = 0; i < n; ++i) ref += double(a[i]) * double(b[i]);
                CHECK(rel_err(lk::dot(a.data(), b.data(), n), ref) < 2e-4);
            }
            // sum (double accumulator contract)
            {
                double ref = 0.0;
                for (size_t i = 0; i < n; ++i) ref += double(a[i]);
                CHECK(rel_err(lk::sum(a.data(), n), ref) < 1e-12);
            }
            // sumsq_diff
            {
                const double mean = 0.25;
                double ref = 0.0;
                for (size_t i = 0; i < n; ++i) ref += (double(a[i]) - mean) * (double(a[i]) - mean);
                CHECK(rel_err(lk::sumsq_diff(a.data(), mean, n), ref) < 1e-12);
            }
            // add / mul / madd / scale
            {
                std::vector<float> dst(n);
                lk::add(dst.data(), a.data(), b.data(), n);
                for (size_t i = 0; i < n; ++i) CHECK(dst[i] == a[i] + b[i]);
                lk::mul(dst.data(), a.data(), b.data(), n);
                for (size_t i = 0; i < n; ++i) CHECK(dst[i] == a[i] * b[i]);
                dst = c;
                lk::madd(dst.data(), a.data(), b.data(), n);
                for (size_t i = 0; i < n; ++i)
                    CHECK(rel_err(dst[i], double(c[i]) + double(a[i]) * double(b[i])) < 1e-6);
                dst = a;
                lk::scale(dst.data(), alpha, n);
                for (size_t i = 0; i < n; ++i) CHECK(dst[i] == a[i] * alpha);
            }
            // relu / relu_backward
            {
                std::vector<float> dst(n);
                lk::relu(dst.data(), a.data(), n);
                for (size_t i = 0; i < n; ++i) CHECK(dst[i] == (a[i] > 0.0f ? a[i] : 0.0f));
                auto dx = c;
                lk::relu_backward(dx.data(), a.data(), b.data(), n);
                for (size_t i = 0; i < n; ++i)
                    CHECK(dx[i] == (a[i] > 0.0f ? c[i] + b[i] : c[i]));
            }
        }
    }
}

TEST_CASE("kernel correctness, double precision lane") {
    BackendGuard guard;
    for (lk::Backend backend : lk::all_available()) {
        lk::set_active(backend);
        INFO("backend = ", lk::name(backend));
        auto g = testutil::rng(43);

        for (size_t n : std::vector<size_t>{0, 1, 3, 4, 5, 7, 8, 9, 501}) {
            auto a = testutil::random_doubles(g, n);
            auto b = testutil::random_doubles(g, n);
            auto c = testutil::random_doubles(g, n);

            auto dst = c;
            lk::axpy(dst.data(), a.data(), 0.37, n);
            for (size_t i = 0; i < n; ++i) CHECK(rel_err(dst[i], c[i] + 0.37 * a[i]) < 1e-15);

            double ref = 0.0;
            for (size_t i = 0; i < n; ++i) ref += a[i] * b[i];
            CHECK(rel_err(lk::dot(a.data(), b.data(), n), ref) < 1e-13);

            ref = 0.0;
            for (size_t i = 0; i < n; ++i) ref += a[i];
            CHECK(rel_err(lk::sum(a.data(), n), ref) < 1e-13);

            ref = 0.0;
            for (size_t i = 0; i < n; ++i) ref += (a[i] - 0.1) * (a[i] - 0.1);
            CHECK(rel_err(lk::sumsq_diff(a.data(), 0.1, n), ref) < 1e-13);

            std::vector<double> out(n);
            lk::add(out.data(), a.data(), b.data(), n);
            for (size_t i = 0; i < n; ++i) CHECK(out[i] == a[i] + b[i]);
            lk::mul(out.data(), a.data(), b.data(), n);
            for (size_t i = 0; i < n; ++i) CHECK(out[i] == a[i] * b[i]);
            out = c;
            lk::madd(out.data(), a.data(), b.data(), n);
            for (size_t i = 0; i < n; ++i) CHECK(rel_err(out[i], c[i] + a[i] * b[i]) < 1e-15);
            out = a;
            lk::scale(out.data(), 0.37, n);
            for (size_t i = 0; i < n; ++i) CHECK(out[i] == a[i] * 0.37);
            lk::relu(out.data(), a.data(), n);
            for (size_t i = 0; i < n; ++i) CHECK(out[i] == (a[i] > 0.0 ? a[i] : 0.0));
            out = c;
            lk::relu_backward(out.data(), a.data(), b.data(), n);
            for (size_t i = 0; i < n; ++i) CHECK(out[i] == (a[i] > 0.0 ? c[i] + b[i] : c[i]));
        }
    }
}

// The two backends must agree within floating-point reassociation slack:
// bitwise for pure elementwise ops, small relative error where FMA or
// accumulation order differs.
TEST_CASE("scalar and avx2 backends are equivalent") {
    if (!lk::available(lk::Backend::avx2)) {
        MESSAGE("avx2 not available on this host; skipping equivalence battery");
        return;
    }
    BackendGuard guard;
    auto g = testutil::rng(44);

    for (size_t n : kLengths) {
        auto a = testutil::random_floats(g, n, -3.0f, 3.0f);
        auto b = testutil::random_floats(g, n, -3.0f, 3.0f);
        auto c = testutil::random_floats(g, n, -3.0f, 3.0f);
        const float alpha = -1.618f;

        auto run_f32 = [&](lk::Backend be) {
            lk::set_active(be);
            struct Out {
                std::vector<float> axpy, add, mul, madd, scale, relu, relu_bwd;
                float dot;
                double sum, ssd;
            } o;
            o.axpy = c;
            lk::axpy(o.axpy.data(), a.data(), alpha, n);
            o.add.resize(n);
            lk::add(o.add.data(), a.data(), b.data(), n);
            o.mul.resize(n);
            lk::mul(o.mul.data(), a.data(), b.data(), n);
            o.madd = c;
            lk::madd(o.madd.data(), a.data(), b.data(), n);
            o.scale = a;
            lk::scale(o.scale.data(), alpha, n);
            o.relu.resize(n);
            lk::relu(o.relu.data(), a.data(), n);
            o.relu_bwd = c;
            lk::relu_backward(o.relu_bwd.data(), a.data(), b.data(), n);
            o.dot = lk::dot(a.data(), b.data(), n);
            o.sum = lk::sum(a.data(), n);
            o.ssd = lk::sumsq_diff(a.data(), 0.125, n);
            return o;
        };

        auto s = run_f32(lk::Backend::scalar);
        auto v = run_f32(lk::Backend::avx2);

        // Elementwise ops with one rounding per lane: bitwise identical.
        CHECK(s.add == v.add);
        CHECK(s.mul == v.mul);
        CHECK(s.scale == v.scale);
        CHECK(s.relu == v.relu);
        CHECK(s.relu_bwd == v.relu_bwd);
        // FMA contraction differs by at most one rounding per element.
        for (size_t i = 0; i < n; ++i) {
            CHECK(rel_err(s.axpy[i], v.axpy[i]) < 1e-6);
            CHECK(rel_err(s.madd[i], v.madd[i]) < 1e-6);
        }
        // Reductions reassociate across lanes.
        CHECK(rel_err(s.dot, v.dot) < 2e-4);
        CHECK(rel_err(s.sum, v.sum) < 1e-12);
        CHECK(rel_err(s.ssd, v.ssd) < 1e-12);
    }

    // Double lane equivalence (axpy/dot/sum/sumsq_diff have avx2 variants).
    for (size_t n : std::vector<size_t>{1, 3, 4, 5, 8, 9, 501}) {
        auto a = testutil::random_doubles(g, n);
        auto b = testutil::random_doubles(g, n);
        auto c = testutil::random_doubles(g, n);

        lk::set_active(lk::Backend::scalar);
        auto d1 = c;
        lk::axpy(d1.data(), a.data(), 0.7, n);
        double dot1 = lk::dot(a.data(), b.data(), n);
        double sum1 = lk::sum(a.data(), n);
        double ssd1 = lk::sumsq_diff(a.data(), 0.3, n);

        lk::set_active(lk::Backend::avx2);
        auto d2 = c;
        lk::axpy(d2.data(), a.data(), 0.7, n);
        double dot2 = lk::dot(a.data(), b.data(), n);
        double sum2 = lk::sum(a.data(), n);
        double ssd2 = lk::sumsq_diff(a.data(), 0.3, n);

        for (size_t i = 0; i < n; ++i) CHECK(rel_err(d1[i], d2[i]) < 1e-15);
        CHECK(rel_err(dot1, dot2) < 1e-13);
        CHECK(rel_err(sum1, sum2) < 1e-13);
        CHECK(rel_err(ssd1, ssd2) < 1e-13);
    }
}

TEST_CASE("parallel_for covers the range exactly once at any worker count") {
    const int saved = thread_count();
    for (int workers : {1, 2, 3, 7}) {
        set_thread_count(workers);
        CHECK(thread_count() == workers);
        const int64_t n = 1001;
        std::vector<std::atomic<int>> hits(n);
        for (auto& h : hits) h.store(0);
        parallel_for(n, [&](int64_t b, int64_t e) {
            CHECK(b <= e);
            for (int64_t i = b; i < e; ++i) hits[size_t(i)].fetch_add(1);
        });
        for (int64_t i = 0; i < n; ++i) CHECK(hits[size_t(i)].load() == 1);
    }
    // Empty range is a no-op.
    parallel_for(0, [&](int64_t, int64_t) { CHECK(false); });
    set_thread_count(saved);
}
