#include <cmath>
#include <vector>

#include "doctest.h"
#include "test_util.hpp"

using namespace cnx;
using cnx::testing::project;
using cnx::testing::randn;

namespace {

// Independent broadcasting oracle: unravel every output index and map it
// back into each operand by hand.
std::vector<double> broadcast_loop(const Tensor<double>& a, const Tensor<double>& b, ElementwiseOp op, Shape& out) {
    const std::size_t nd = std::max(a.ndim(), b.ndim());
    out.assign(nd, 1);
    auto dim_of = [nd](const Shape& s, std::size_t i) { return i < nd - s.size() ? 1 : s[i - (nd - s.size())]; };
    for (std::size_t i = 0; i < nd; ++i) out[i] = std::max(dim_of(a.shape(), i), dim_of(b.shape(), i));
    std::vector<double> res(numel_of(out));
    std::vector<std::size_t> idx(nd);
    for (std::size_t flat = 0; flat < res.size(); ++flat) {
        std::size_t rem = flat;
        for (std::size_t i = nd; i-- > 0;) {
            idx[i] = rem % out[i];
            rem /= out[i];
        }
        auto offset = [&](const Shape& s) {
            std::size_t o = 0;
            for (std::size_t i = 0; i < nd; ++i) {
                const std::size_t d = dim_of(s, i);
                o = o * d + (d == 1 ? 0 : idx[i]);
            }
            return o;
        };
        const double x = a[offset(a.shape())], y = b[offset(b.shape())];
        switch (op) {
            case ElementwiseOp::add: res[flat] = x + y; break;
            case ElementwiseOp::sub: res[flat] = x - y; break;
            case ElementwiseOp::mul: res[flat] = x * y; break;
            case ElementwiseOp::div: res[flat] = x / y; break;
        }
    }
    return res;
}

Shape random_shape(Rng& rng, std::size_t max_nd) {
    Shape s(1 + rng.below(max_nd));
    for (auto& d : s) d = 1 + rng.below(4);
    return s;
}

// Derives a shape broadcast-compatible with s by dropping leading axes and
// collapsing some extents to 1.
Shape compatible_shape(const Shape& s, Rng& rng) {
    const std::size_t drop = rng.below(s.size());
    Shape t(s.begin() + static_cast<long>(drop), s.end());
    for (auto& d : t)
        if (rng.bernoulli(0.3)) d = 1;
    return t;
}

}  // namespace

TEST_CASE("tensor storage invariants") {
    Tensor<float> t({2, 3, 4});
    CHECK(t.numel() == 24);
    CHECK(t.numel() == numel_of(t.shape()));
    Tensor<float> alias = t;
    alias[0] = 5.0f;
    CHECK(t[0] == 5.0f);
    Tensor<float> deep = t.clone();
    deep[0] = 1.0f;
    CHECK(t[0] == 5.0f);
    CHECK_THROWS_AS(t.reshaped({5, 5}), ShapeError);
    CHECK_THROWS_AS(Tensor<float>({2, 2}, {1.0f, 2.0f}), ShapeError);
    CHECK(Tensor<double>::scalar(3.0).item() == 3.0);
}

TEST_CASE("allocator tracks live and peak bytes") {
    memory::reset_peak();
    const auto before = memory::stats();
    {
        Tensor<float> t({1024});
        const auto during = memory::stats();
        CHECK(during.live_bytes >= before.live_bytes + 4096);
        CHECK(during.peak_bytes >= during.live_bytes);
    }
    CHECK(memory::stats().live_bytes == before.live_bytes);
}

TEST_CASE("elementwise examples") {
    Var<double> a(Tensor<double>({2}, {1, 2}));
    Var<double> b(Tensor<double>({2}, {3, 4}));
    const auto s = add(a, b).value();
    CHECK(s[0] == 4);
    CHECK(s[1] == 6);

    Rng rng(1);
    Var<double> x(randn({3, 4}, rng));
    const auto z = mul(x, Var<double>(Tensor<double>::scalar(0.0))).value();
    CHECK(z.shape() == Shape{3, 4});
    for (std::size_t i = 0; i < z.numel(); ++i) CHECK(z[i] == 0.0);

    CHECK_THROWS_AS(add(Var<double>(Tensor<double>({2, 3})), Var<double>(Tensor<double>({2}))), ShapeError);
    try {
        add(Var<double>(Tensor<double>({2, 3})), Var<double>(Tensor<double>({4})));
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("(2,3)") != std::string::npos);
        CHECK(msg.find("(4)") != std::string::npos);
    }
}

TEST_CASE("broadcasting matches scalar-loop oracle for extents up to 4") {
    Rng rng(7);
    const ElementwiseOp ops[] = {ElementwiseOp::add, ElementwiseOp::sub, ElementwiseOp::mul, ElementwiseOp::div};
    for (int trial = 0; trial < 300; ++trial) {
        Shape sa = random_shape(rng, 4);
        Shape sb = compatible_shape(sa, rng);
        if (rng.bernoulli(0.5)) std::swap(sa, sb);
        const auto a = randn(sa, rng);
        auto b = randn(sb, rng);
        for (std::size_t i = 0; i < b.numel(); ++i) b[i] += b[i] >= 0 ? 0.5 : -0.5;
        for (auto op : ops) {
            Shape expected_shape;
            const auto expected = broadcast_loop(a, b, op, expected_shape);
            const auto got = elementwise(op, Var<double>(a), Var<double>(b)).value();
            REQUIRE(got.shape() == expected_shape);
            for (std::size_t i = 0; i < expected.size(); ++i) CHECK(got[i] == doctest::Approx(expected[i]).epsilon(1e-12));
        }
    }
}

TEST_CASE("reduce examples and oracle") {
    Var<double> v(Tensor<double>({2}, {3, 4}));
    CHECK(reduce(ReduceOp::l2_norm, v, {0}, false).value().item() == doctest::Approx(5.0));
    CHECK(reduce_all(ReduceOp::mean, Var<double>(Tensor<double>({2, 2}))).value().item() == 0.0);

    Rng rng(3);
    const auto x = randn({5, 4, 3}, rng);
    const auto g = reduce(ReduceOp::l2_norm, Var<double>(x), {0, 1}, true).value();
    REQUIRE(g.shape() == Shape{1, 1, 3});
    for (std::size_t c = 0; c < 3; ++c) {
        double s = 0;
        for (std::size_t i = 0; i < 20; ++i) s += x[i * 3 + c] * x[i * 3 + c];
        CHECK(g[c] == doctest::Approx(std::sqrt(s)).epsilon(1e-12));
    }
    const auto l1 = reduce(ReduceOp::l1_norm, Var<double>(x), {2}, false).value();
    REQUIRE(l1.shape() == Shape{5, 4});
    CHECK(l1[0] == doctest::Approx(std::abs(x[0]) + std::abs(x[1]) + std::abs(x[2])));
    const auto mx = reduce(ReduceOp::max, Var<double>(x), {1}, false).value();
    REQUIRE(mx.shape() == Shape{5, 3});
    CHECK(mx[0] == std::max({x[0], x[3], x[6], x[9]}));

    CHECK_THROWS_AS(reduce(ReduceOp::sum, Var<double>(x), {3}, false), ShapeError);
}

TEST_CASE("backward basics") {
    Rng rng(5);
    Param<double> w("w", randn({4}, rng));
    Param<double> unused("unused", randn({2}, rng));
    const auto x = randn({4}, rng);
    {
        Tape<double> tape;
        ParamBinder<double> bind(&tape);
        auto loss = sum_all(mul(bind(w), Var<double>(x)));
        bind(unused);
        tape.backward(loss);
        CHECK_THROWS_AS(tape.backward(loss), TapeError);
        CHECK(tape.consumed());
        CHECK_THROWS_AS(tape.leaf(x), TapeError);
    }
    for (std::size_t i = 0; i < 4; ++i) CHECK(w.grad[i] == x[i]);
    for (std::size_t i = 0; i < 2; ++i) CHECK(unused.grad[i] == 0.0);

    // A second pass accumulates.
    {
        Tape<double> tape;
        auto loss = sum_all(mul(tape.param(w), Var<double>(x)));
        tape.backward(loss);
    }
    for (std::size_t i = 0; i < 4; ++i) CHECK(w.grad[i] == 2 * x[i]);
    w.zero_grad();
    CHECK(w.grad[0] == 0.0);

    Tape<double> tape;
    auto y = mul(tape.param(w), Var<double>(x));
    CHECK_THROWS_AS(tape.backward(y), TapeError);
}

TEST_CASE("constants are never recorded") {
    Tape<double> tape;
    Var<double> a(Tensor<double>({3}, 1.0));
    auto b = add(a, a);
    CHECK_FALSE(b.requires_grad());
    CHECK(tape.size() == 0);
}

TEST_CASE("grad_check examples") {
    Rng rng(11);
    const auto x = randn({3, 4}, rng);
    auto sq = [](Tape<double>&, const Var<double>& v) { return sum_all(square(v)); };
    CHECK(grad_check<double>(sq, x).max_rel_error < 1e-6);
    auto constant = [](Tape<double>&, const Var<double>&) { return Var<double>(Tensor<double>::scalar(2.0)); };
    CHECK(grad_check<double>(constant, x).max_rel_error == 0.0);
    auto blowup = [](Tape<double>&, const Var<double>& v) { return sum_all(div(v, Var<double>(Tensor<double>::scalar(0.0)))); };
    CHECK_THROWS_AS(grad_check<double>(blowup, x), NonFiniteError);
}

TEST_CASE("every tensor op passes grad_check") {
    Rng rng(13);
    const auto a = randn({3, 4}, rng);
    const auto b_row = randn({4}, rng);
    auto b_pos = randn({3, 1}, rng);
    for (std::size_t i = 0; i < b_pos.numel(); ++i) b_pos[i] = 1.0 + std::abs(b_pos[i]);

    using F = std::function<Var<double>(Tape<double>&, const Var<double>&)>;
    std::vector<std::pair<const char*, F>> cases = {
        {"add broadcast", [&](Tape<double>&, const Var<double>& x) { return project(add(x, Var<double>(b_row))); }},
        {"sub broadcast", [&](Tape<double>&, const Var<double>& x) { return project(sub(Var<double>(b_row), x)); }},
        {"mul broadcast", [&](Tape<double>&, const Var<double>& x) { return project(mul(x, Var<double>(b_pos))); }},
        {"div numerator", [&](Tape<double>&, const Var<double>& x) { return project(div(x, Var<double>(b_pos))); }},
        {"div denominator",
         [&](Tape<double>&, const Var<double>& x) { return project(div(Var<double>(a), add_scalar(square(x), 1.0))); }},
        {"scalar_mul", [&](Tape<double>&, const Var<double>& x) { return project(scalar_mul(x, -2.5)); }},
        {"sum axis", [&](Tape<double>&, const Var<double>& x) { return project(reduce(ReduceOp::sum, x, {0}, false)); }},
        {"mean keepdims",
         [&](Tape<double>&, const Var<double>& x) { return project(reduce(ReduceOp::mean, x, {1}, true)); }},
        {"l2 norm", [&](Tape<double>&, const Var<double>& x) { return project(reduce(ReduceOp::l2_norm, x, {1}, false)); }},
        {"l1 norm", [&](Tape<double>&, const Var<double>& x) { return project(reduce(ReduceOp::l1_norm, x, {0}, false)); }},
        {"max", [&](Tape<double>&, const Var<double>& x) { return project(reduce(ReduceOp::max, x, {1}, false)); }},
        {"reshape", [&](Tape<double>&, const Var<double>& x) { return project(reshape(x, {2, 6})); }},
        {"matmul left", [&](Tape<double>&, const Var<double>& x) { return project(matmul(x, Var<double>(a.reshaped({4, 3})))); }},
        {"matmul right", [&](Tape<double>&, const Var<double>& x) { return project(matmul(Var<double>(a.reshaped({4, 3})), x)); }},
    };
    for (const auto& [name, f] : cases) {
        CAPTURE(name);
        CHECK(grad_check<double>(f, a).max_rel_error < 1e-4);
    }
}

TEST_CASE("forward is bit-identical across repeated invocations") {
    Rng rng(17);
    const auto a = randn<float>({8, 16}, rng);
    const auto b = randn<float>({16, 8}, rng);
    const auto y1 = matmul(Var<float>(a), Var<float>(b)).value();
    const auto y2 = matmul(Var<float>(a), Var<float>(b)).value();
    CHECK(cnx::testing::bit_equal(y1, y2));
}

TEST_CASE("rng is portable and unbiased in range") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng r(1);
    std::vector<int> hist(5, 0);
    for (int i = 0; i < 50000; ++i) ++hist[r.below(5)];
    for (int h : hist) CHECK(std::abs(h - 10000) < 400);
    double m = 0, v = 0;
    for (int i = 0; i < 20000; ++i) {
        const double x = r.normal();
        m += x;
        v += x * x;
    }
    CHECK(std::abs(m / 20000) < 0.03);
    CHECK(std::abs(v / 20000 - 1.0) < 0.05);
    for (int i = 0; i < 1000; ++i) CHECK(std::abs(r.trunc_normal(0.02)) <= 0.04);
}
