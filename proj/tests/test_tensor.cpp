#include <doctest.h>

#include <cmath>
#include <vector>

#include "gradcheck.hpp"
#include "longiseg/error.hpp"
#include "longiseg/ops.hpp"
#include "longiseg/tensor.hpp"
#include "testutil.hpp"

using namespace longiseg;

namespace {

TensorD random_tensor(Shape shape, std::mt19937_64& g, bool requires_grad = true) {
    auto data = testutil::random_doubles(g, std::size_t(shape_numel(shape)));
    return TensorD::from_data(std::move(shape), std::move(data), requires_grad);
}

}  // namespace

TEST_CASE("tensor construction and invariants") {
    auto t = TensorF::zeros({2, 3, 4});
    CHECK(t.numel() == 24);
    CHECK(t.shape() == Shape{2, 3, 4});
    CHECK(!t.requires_grad());

    auto f = TensorF::full({2, 2}, 1.5f, true);
    CHECK(f.requires_grad());
    for (float v : f.data())
        CHECK(v == 1.5f);

    CHECK_THROWS_AS(TensorF::from_data({2, 2}, {1.0f, 2.0f, 3.0f}), ShapeError);

    auto s = TensorF::full({1}, 42.0f);
    CHECK(s.item() == 42.0f);
    CHECK_THROWS_AS(t.item(), UsageError);
}

TEST_CASE("backward: sum gives all-ones gradient") {
    auto g = testutil::rng(100);
    auto x = random_tensor({3, 4}, g);
    auto loss = sum_all(x);
    loss.backward();
    for (double v : x.grad())
        CHECK(v == 1.0);
}

TEST_CASE("backward: product rule gives the other factor") {
    auto g = testutil::rng(101);
    auto x = random_tensor({2, 5}, g);
    auto y = random_tensor({2, 5}, g);
    sum_all(mul(x, y)).backward();
    for (std::size_t i = 0; i < x.data().size(); ++i) {
        CHECK(x.grad()[i] == doctest::Approx(y.data()[i]).epsilon(1e-12));
        CHECK(y.grad()[i] == doctest::Approx(x.data()[i]).epsilon(1e-12));
    }
}

TEST_CASE("backward requires a scalar loss") {
    auto x = TensorF::full({2, 2}, 1.0f, true);
    CHECK_THROWS_AS(x.backward(), UsageError);
}

TEST_CASE("a tensor used twice accumulates both branch gradients") {
    auto g = testutil::rng(102);
    // loss = sum(x*x) + sum(x)  =>  dloss/dx = 2x + 1
    auto x = random_tensor({4, 4}, g);
    auto loss = add(sum_all(mul(x, x)), sum_all(x));
    loss.backward();
    for (std::size_t i = 0; i < x.data().size(); ++i)
        CHECK(x.grad()[i] == doctest::Approx(2.0 * x.data()[i] + 1.0).epsilon(1e-12));

    // Same property against finite differences.
    auto x2 = random_tensor({3, 3}, g);
    const double err = testutil::max_grad_rel_err(
        {x2}, [&]() { return add(sum_all(mul(x2, x2)), sum_all(x2)); });
    CHECK(err < 1e-9);
}

TEST_CASE("shared subexpressions run their backward exactly once") {
    // z = y + y with y = 3x: dz/dx = 6. A double-visited node would give 12.
    auto x = TensorD::full({5}, 2.0, true);
    auto y = scale(x, 3.0);
    sum_all(add(y, y)).backward();
    for (double v : x.grad())
        CHECK(v == 6.0);
}

TEST_CASE("NoGradGuard suppresses graph recording") {
    auto x = TensorD::full({3}, 1.0, true);
    {
        NoGradGuard ng;
        auto y = scale(x, 2.0);
        CHECK(!y.requires_grad());
        CHECK(y.raw()->parents.empty());
        // Guards nest.
        {
            NoGradGuard inner;
            CHECK(!grad_enabled());
        }
        CHECK(!grad_enabled());
    }
    CHECK(grad_enabled());

    auto y = scale(x, 2.0);
    CHECK(y.requires_grad());
}

TEST_CASE("detach cuts the graph") {
    auto x = TensorD::full({3}, 2.0, true);
    auto y = scale(x, 5.0).detach();
    CHECK(!y.requires_grad());
    CHECK(y.data() == std::vector<double>{10.0, 10.0, 10.0});
    sum_all(mul(y, y)).backward();  // no parameter reachable: no-op
    CHECK(!x.has_grad());
}

TEST_CASE("zero_grad clears accumulated gradients") {
    auto x = TensorD::full({2}, 1.0, true);
    sum_all(x).backward();
    CHECK(x.grad()[0] == 1.0);
    sum_all(x).backward();
    CHECK(x.grad()[0] == 2.0);  // accumulation across backward calls
    x.zero_grad();
    CHECK(x.grad()[0] == 0.0);
}

TEST_CASE("debug checks surface non-finite values at op boundaries") {
    set_debug_checks(true);
    auto x = TensorD::full({2}, 1e200, true);
    CHECK_THROWS_AS(mul(x, x), NumericError);  // overflows to inf
    set_debug_checks(false);
    CHECK_NOTHROW(mul(x, x));
}

TEST_CASE("reshape, scale, concat semantics and gradients") {
    auto g = testutil::rng(103);

    auto x = random_tensor({2, 6}, g);
    auto r = reshape(x, {3, 4});
    CHECK(r.shape() == Shape{3, 4});
    CHECK(r.data() == x.data());
    CHECK_THROWS_AS(reshape(x, Shape{5, 5}), ShapeError);

    auto s = scale(x, -2.5);
    for (std::size_t i = 0; i < x.data().size(); ++i)
        CHECK(s.data()[i] == doctest::Approx(-2.5 * x.data()[i]));

    auto a = random_tensor({2, 2, 3}, g);
    auto b = random_tensor({2, 1, 3}, g);
    auto c = random_tensor({2, 4, 3}, g);
    auto cat = concat<double>({a, b, c}, 1);
    CHECK(cat.shape() == Shape{2, 7, 3});
    // Block layout: for each outer slice, tensors appear in order.
    CHECK(cat.data()[0] == a.data()[0]);
    CHECK(cat.data()[2 * 3] == b.data()[0]);
    CHECK(cat.data()[3 * 3] == c.data()[0]);

    Shape bad{2, 2, 4};
    CHECK_THROWS_AS(concat<double>({a, random_tensor(bad, g)}, 1), ShapeError);

    const double err = testutil::max_grad_rel_err({a, b, c, x}, [&]() {
        auto joined = concat<double>({a, b, c}, 1);
        auto flat = reshape(joined, {42});
        auto xs = reshape(scale(x, 1.5), {12});
        return add(sum_all(mul(flat, flat)), sum_all(mul(xs, xs)));
    });
    CHECK(err < 1e-8);
}

TEST_CASE("add and mul validate shapes with both shapes in the message") {
    auto x = TensorD::zeros({2, 3});
    auto y = TensorD::zeros({3, 2});
    CHECK_THROWS_WITH_AS(add(x, y), doctest::Contains("(2, 3)"), ShapeError);
    CHECK_THROWS_WITH_AS(mul(x, y), doctest::Contains("(3, 2)"), ShapeError);
}
