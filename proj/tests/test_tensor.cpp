#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "cdnpg/gradcheck.hpp"
#include "cdnpg/tensor.hpp"

#include <cmath>
#include <random>

using namespace cdnpg;

namespace {

std::vector<double> rand_vec(std::size_t n, std::mt19937& rng, double lo = -2.0, double hi = 2.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(n);
    for (auto& x : v) x = u(rng);
    return v;
}

// Scalar loss used by most gradient checks: weighted sum keeps grads non-trivial.
TensorD weighted_sum(const TensorD& y, const std::vector<double>& w) {
    auto wt = TensorD::from_data(y.shape(), w);
    return sum_all(mul(y, wt));
}

}  // namespace

TEST_CASE("elementwise forward values") {
    auto x = TensorD::from_data({3}, {-0.3, 0.0, 1.5});
    CHECK(maximum(x, 0.0).at(0) == 0.0);           // max(0, -0.3) = 0
    CHECK(minimum(x, 1.0).at(2) == 1.0);           // min(1, 1.5) = 1
    CHECK(sigmoid(TensorD::scalar(0.0)).item() == doctest::Approx(0.5));
    CHECK(sigmoid(TensorD::scalar(std::log(3.0))).item() == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(relu(TensorD::scalar(-2.0)).item() == 0.0);
    CHECK(relu(TensorD::scalar(2.0)).item() == 2.0);
    CHECK(powt(TensorD::scalar(2.0), 3.0).item() == doctest::Approx(8.0));
    CHECK(pow_base(2.0, TensorD::scalar(3.0)).item() == doctest::Approx(8.0));
    CHECK(clamp(TensorD::from_data({3}, {-1.0, 0.4, 2.0}), 0.0, 1.0).data() ==
          std::vector<double>{0.0, 0.4, 1.0});
}

TEST_CASE("broadcasting: trailing dims and size-1 expansion") {
    auto a = TensorD::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    auto r = TensorD::from_data({3}, {10, 20, 30});
    auto s = add(a, r);
    CHECK(s.data() == std::vector<double>{11, 22, 33, 14, 25, 36});

    auto col = TensorD::from_data({2, 1}, {1, 2});
    auto row = TensorD::from_data({1, 3}, {10, 20, 30});
    auto outer = add(col, row);
    CHECK(outer.shape() == Shape{2, 3});
    CHECK(outer.data() == std::vector<double>{11, 21, 31, 12, 22, 32});

    auto bad = TensorD::zeros({2, 3});
    auto bad2 = TensorD::zeros({4, 3});
    CHECK_THROWS_WITH_AS(add(bad, bad2), doctest::Contains("[2, 3]"), std::runtime_error);
    CHECK_THROWS_WITH_AS(add(bad, bad2), doctest::Contains("[4, 3]"), std::runtime_error);
}

TEST_CASE("broadcast backward sum-reduces over expanded dims") {
    auto a = TensorD::from_data({2, 1}, {1, 2}, true);
    auto b = TensorD::from_data({1, 3}, {4, 5, 6}, true);
    sum_all(add(a, b)).backward();
    CHECK(a.grad() == std::vector<double>{3, 3});
    CHECK(b.grad() == std::vector<double>{2, 2, 2});
}

TEST_CASE("matmul forward oracle values") {
    auto a = TensorD::from_data({2, 2}, {1, 2, 3, 4});
    auto ones_col = TensorD::from_data({2, 1}, {1, 1});
    CHECK(matmul(a, ones_col).data() == std::vector<double>{3, 7});

    auto eye = TensorD::from_data({2, 2}, {1, 0, 0, 1});
    CHECK(matmul(a, eye).data() == a.data());

    auto zero = TensorD::zeros({2, 2});
    CHECK(matmul(a, zero).data() == std::vector<double>{0, 0, 0, 0});

    CHECK_THROWS_WITH_AS(matmul(TensorD::zeros({2, 3}), TensorD::zeros({4, 2})),
                         doctest::Contains("inner dimensions"), std::runtime_error);
}

TEST_CASE("matmul associativity on small integers") {
    std::mt19937 rng(7);
    std::uniform_int_distribution<int> u(-3, 3);
    std::vector<double> av(6), bv(6), cv(4);
    for (auto& x : av) x = u(rng);
    for (auto& x : bv) x = u(rng);
    for (auto& x : cv) x = u(rng);
    auto A = TensorD::from_data({2, 3}, av);
    auto B = TensorD::from_data({3, 2}, bv);
    auto C = TensorD::from_data({2, 2}, cv);
    CHECK(matmul(matmul(A, B), C).data() == matmul(A, matmul(B, C)).data());
}

TEST_CASE("matmul batch broadcast") {
    // a: [2,2,2], b: [2,1] broadcast over the batch
    auto a = TensorD::from_data({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8}, true);
    auto b = TensorD::from_data({2, 1}, {1, 1}, true);
    auto c = matmul(a, b);
    CHECK(c.shape() == Shape{2, 2, 1});
    CHECK(c.data() == std::vector<double>{3, 7, 11, 15});
    sum_all(c).backward();
    // each b entry participates in both batches and both output rows
    CHECK(b.grad() == std::vector<double>{1 + 3 + 5 + 7, 2 + 4 + 6 + 8});
}

TEST_CASE("softmax oracle values") {
    CHECK(softmax(TensorD::from_data({2}, {0, 0})).data() == std::vector<double>{0.5, 0.5});
    auto big = softmax(TensorD::from_data({2}, {1000, 1000}));
    CHECK(big.at(0) == doctest::Approx(0.5));
    auto sm = softmax(TensorD::from_data({2}, {0.0, std::log(3.0)}));
    CHECK(sm.at(0) == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(sm.at(1) == doctest::Approx(0.75).epsilon(1e-12));

    // additive mask sentinel gets ~zero weight
    auto masked = softmax(TensorD::from_data({3}, {1.0, 2.0, -1e9}));
    CHECK(masked.at(2) < 1e-30);

    // rows sum to 1, entries in (0,1), for random input
    std::mt19937 rng(11);
    auto x = TensorD::from_data({4, 7}, rand_vec(28, rng, -5, 5));
    auto y = softmax(x, -1);
    for (std::size_t r = 0; r < 4; ++r) {
        double s = 0;
        for (std::size_t c = 0; c < 7; ++c) {
            CHECK(y.at(r, c) > 0.0);
            CHECK(y.at(r, c) < 1.0);
            s += y.at(r, c);
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }

    // axis 0 on a matrix normalizes columns
    auto cols = softmax(TensorD::from_data({2, 2}, {0, 0, 0, std::log(3.0)}), 0);
    CHECK(cols.at(0, 1) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("softmax checked mode flags non-finite input") {
    auto x = TensorD::from_data({2}, {1.0, std::numeric_limits<double>::quiet_NaN()});
    CHECK_NOTHROW(softmax(x));
    set_finite_checks(true);
    CHECK_THROWS_WITH_AS(softmax(x), doctest::Contains("non-finite"), std::runtime_error);
    set_finite_checks(false);
}

TEST_CASE("layer_norm oracle values") {
    auto g = TensorD::ones({4});
    auto b = TensorD::zeros({4});
    auto c = layer_norm(TensorD::filled({1, 4}, 3.25), g, b);
    for (std::size_t j = 0; j < 4; ++j) CHECK(c.at(0, j) == doctest::Approx(0.0));

    auto bias = TensorD::from_data({4}, {7, 7, 7, 7});
    auto cb = layer_norm(TensorD::filled({1, 4}, 3.25), g, bias);
    CHECK(cb.at(0, 2) == doctest::Approx(7.0));

    auto pm = layer_norm(TensorD::from_data({1, 2}, {1.0, -1.0}), TensorD::ones({2}),
                         TensorD::zeros({2}));
    CHECK(pm.at(0, 0) == doctest::Approx(1.0).epsilon(1e-4));
    CHECK(pm.at(0, 1) == doctest::Approx(-1.0).epsilon(1e-4));

    CHECK_THROWS_WITH_AS(layer_norm(TensorD::zeros({2, 4}), TensorD::ones({3}), TensorD::zeros({4})),
                         doctest::Contains("gain/bias"), std::runtime_error);
}

TEST_CASE("backward basics: sum and quadratic") {
    auto x = TensorD::from_data({3}, {1, 2, 3}, true);
    sum_all(x).backward();
    CHECK(x.grad() == std::vector<double>{1, 1, 1});

    x.zero_grad();
    sum_all(mul(x, x)).backward();
    CHECK(x.grad() == std::vector<double>{2, 4, 6});
}

TEST_CASE("repeated backward accumulates into leaf grads until zeroed") {
    auto x = TensorD::from_data({2}, {1, 2}, true);
    auto loss = sum_all(mul(x, x));
    loss.backward();
    loss.backward();
    CHECK(x.grad() == std::vector<double>{4, 8});
    x.zero_grad();
    loss.backward();
    CHECK(x.grad() == std::vector<double>{2, 4});
}

TEST_CASE("backward requires scalar") {
    auto x = TensorD::from_data({2}, {1, 2}, true);
    auto y = mul(x, x);
    CHECK_THROWS_WITH_AS(y.backward(), doctest::Contains("scalar"), std::runtime_error);
}

TEST_CASE("min/max ties route gradient to the first operand") {
    auto a = TensorD::from_data({2}, {1.0, 5.0}, true);
    auto b = TensorD::from_data({2}, {1.0, 3.0}, true);
    sum_all(maximum(a, b)).backward();
    CHECK(a.grad() == std::vector<double>{1, 1});  // tie at index 0 selects a
    CHECK(b.grad() == std::vector<double>{0, 0});

    a.zero_grad();
    b.zero_grad();
    sum_all(minimum(a, b)).backward();
    CHECK(a.grad() == std::vector<double>{1, 0});  // tie selects a; min picks b at index 1
    CHECK(b.grad() == std::vector<double>{0, 1});
}

TEST_CASE("finite_difference_grad oracle on closed-form cases") {
    auto x = TensorD::from_data({2}, {1, 2});
    auto fd = finite_difference_grad<double>([&] { return sum_all(mul(x, x)).item(); }, x);
    CHECK(fd[0] == doctest::Approx(2.0).epsilon(1e-9));
    CHECK(fd[1] == doctest::Approx(4.0).epsilon(1e-9));

    auto z = TensorD::scalar(1.0);
    auto fs = finite_difference_grad<double>([&] { return sum_all(sigmoid(z)).item(); }, z);
    const double s1 = 1.0 / (1.0 + std::exp(-1.0));
    CHECK(fs[0] == doctest::Approx(s1 * (1.0 - s1)).epsilon(1e-9));
}

TEST_CASE("gradient check: every differentiable op vs central differences") {
    std::mt19937 rng(42);
    const double tol = 1e-4;

    auto check_grad = [&](TensorD& x, auto forward) {
        auto loss = forward();
        loss.backward();
        std::vector<double> analytic = x.grad();
        auto fd = finite_difference_grad<double>([&] { return forward().item(); }, x);
        CHECK(max_rel_err(analytic, fd) < tol);
    };

    SUBCASE("add/sub/mul/div composite") {
        auto x = TensorD::from_data({2, 3}, rand_vec(6, rng), true);
        auto c = TensorD::from_data({2, 3}, rand_vec(6, rng, 0.5, 2.0));
        check_grad(x, [&] { return sum_all(div(mul(add(x, c), sub(x, c)), c)); });
    }
    SUBCASE("sigmoid/relu/pow composite") {
        auto x = TensorD::from_data({5}, rand_vec(5, rng, 0.2, 2.0), true);
        check_grad(x, [&] { return sum_all(add(sigmoid(x), powt(relu(x), 2.0))); });
    }
    SUBCASE("pow_base and clamp") {
        auto x = TensorD::from_data({4}, {0.1, 0.4, 0.6, 0.9}, true);
        check_grad(x, [&] { return sum_all(add(pow_base(3.0, x), clamp(x, 0.2, 0.8))); });
    }
    SUBCASE("min/max vs tensor") {
        auto x = TensorD::from_data({4}, {-1.2, 0.7, 1.4, -0.3}, true);
        auto y = TensorD::from_data({4}, {0.5, -0.6, 1.1, 0.8});
        check_grad(x, [&] { return sum_all(add(maximum(x, y), minimum(x, 0.25))); });
    }
    SUBCASE("softmax") {
        auto x = TensorD::from_data({3, 4}, rand_vec(12, rng), true);
        auto w = rand_vec(12, rng);
        check_grad(x, [&] { return weighted_sum(softmax(x, -1), w); });
    }
    SUBCASE("layer_norm wrt input, gain, bias") {
        auto x = TensorD::from_data({3, 5}, rand_vec(15, rng), true);
        auto g = TensorD::from_data({5}, rand_vec(5, rng, 0.5, 1.5), true);
        auto b = TensorD::from_data({5}, rand_vec(5, rng), true);
        auto w = rand_vec(15, rng);
        auto fwd = [&] { return weighted_sum(layer_norm(x, g, b), w); };
        check_grad(x, fwd);
        g.zero_grad();
        auto loss = fwd();
        loss.backward();
        std::vector<double> ag = g.grad();
        auto fdg = finite_difference_grad<double>([&] { return fwd().item(); }, g);
        CHECK(max_rel_err(ag, fdg) < tol);
        b.zero_grad();
        loss = fwd();
        loss.backward();
        std::vector<double> ab = b.grad();
        auto fdb = finite_difference_grad<double>([&] { return fwd().item(); }, b);
        CHECK(max_rel_err(ab, fdb) < tol);
    }
    SUBCASE("matmul wrt both operands") {
        auto a = TensorD::from_data({3, 4}, rand_vec(12, rng), true);
        auto b = TensorD::from_data({4, 2}, rand_vec(8, rng), true);
        auto w = rand_vec(6, rng);
        check_grad(a, [&] { return weighted_sum(matmul(a, b), w); });
        b.zero_grad();
        auto loss = weighted_sum(matmul(a, b), w);
        loss.backward();
        std::vector<double> bb = b.grad();
        auto fdb = finite_difference_grad<double>(
            [&] { return weighted_sum(matmul(a, b), w).item(); }, b);
        CHECK(max_rel_err(bb, fdb) < tol);
    }
    SUBCASE("transpose, slice, concat") {
        auto x = TensorD::from_data({3, 4}, rand_vec(12, rng), true);
        auto w = rand_vec(12, rng);
        check_grad(x, [&] {
            auto t = transpose_last(x);  // [4,3]
            auto s1 = slice_cols(x, 0, 2);
            auto s2 = slice_cols(x, 2, 2);
            auto back = concat_cols<double>({s1, s2});
            return add(weighted_sum(back, w), sum_all(t));
        });
    }
    SUBCASE("sum_axis") {
        auto x = TensorD::from_data({2, 3, 2}, rand_vec(12, rng), true);
        auto w = rand_vec(2, rng);  // [2,3,2] -> sum axis 1 -> [2,2] -> sum last keepdim -> [2,1]
        check_grad(x, [&] { return weighted_sum(sum_axis(sum_axis(x, 1, false), -1, true), w); });
    }
    SUBCASE("embedding wrt table") {
        auto table = TensorD::from_data({5, 3}, rand_vec(15, rng), true);
        std::vector<int> ids{2, 0, 2, 4};
        auto w = rand_vec(12, rng);
        check_grad(table, [&] { return weighted_sum(embedding_lookup(table, ids), w); });
    }
    SUBCASE("broadcast binary ops") {
        auto x = TensorD::from_data({4, 1}, rand_vec(4, rng), true);
        auto y = TensorD::from_data({1, 5}, rand_vec(5, rng));
        auto w = rand_vec(20, rng);
        check_grad(x, [&] { return weighted_sum(mul(add(x, y), sub(x, y)), w); });
    }
}

TEST_CASE("transpose_last values") {
    auto x = TensorD::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    auto t = transpose_last(x);
    CHECK(t.shape() == Shape{3, 2});
    CHECK(t.data() == std::vector<double>{1, 4, 2, 5, 3, 6});
}

TEST_CASE("slice/concat roundtrip") {
    auto x = TensorD::from_data({2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
    auto a = slice_cols(x, 0, 1);
    auto b = slice_cols(x, 1, 3);
    auto r = concat_cols<double>({a, b});
    CHECK(r.data() == x.data());
    CHECK_THROWS_AS(slice_cols(x, 3, 2), std::runtime_error);
}

TEST_CASE("embedding lookup semantics") {
    auto table = TensorD::from_data({3, 2}, {0, 1, 10, 11, 20, 21}, true);
    auto e = embedding_lookup(table, {2, 0, 2});
    CHECK(e.data() == std::vector<double>{20, 21, 0, 1, 20, 21});
    sum_all(e).backward();
    CHECK(table.grad() == std::vector<double>{1, 1, 0, 0, 2, 2});
    CHECK_THROWS_WITH_AS(embedding_lookup(table, {3}), doctest::Contains("out of range"),
                         std::runtime_error);
}

TEST_CASE("dropout") {
    std::mt19937 rng(123);
    auto x = TensorD::filled({100}, 1.0, true);
    SUBCASE("p=0 is the identity") {
        auto y = dropout(x, 0.0, rng);
        CHECK(y.data() == x.data());
    }
    SUBCASE("kept entries are scaled by 1/(1-p), dropped are 0; grad mirrors the mask") {
        auto y = dropout(x, 0.5, rng);
        std::size_t kept = 0;
        for (double v : y.data()) {
            CHECK((v == 0.0 || v == 2.0));
            kept += v != 0.0;
        }
        CHECK(kept > 20);
        CHECK(kept < 80);
        sum_all(y).backward();
        for (std::size_t i = 0; i < 100; ++i) CHECK(x.grad()[i] == y.data()[i]);
    }
    SUBCASE("rejects p outside [0,1)") {
        CHECK_THROWS_AS(dropout(x, 1.0, rng), std::runtime_error);
        CHECK_THROWS_AS(dropout(x, -0.1, rng), std::runtime_error);
    }
}

TEST_CASE("NoGradGuard suppresses tape construction") {
    auto x = TensorD::from_data({2}, {1, 2}, true);
    NoGradGuard ng;
    auto y = mul(x, x);
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("tensor error contracts") {
    CHECK_THROWS_AS(TensorD::from_data({2, 2}, {1, 2, 3}), std::runtime_error);
    CHECK_THROWS_AS(TensorD::zeros({0, 3}), std::runtime_error);
    auto x = TensorD::from_data({2}, {1, 2});
    CHECK_THROWS_AS(x.item(), std::runtime_error);
    CHECK_THROWS_AS(x.grad(), std::runtime_error);
    CHECK(all_finite(x));
    auto bad = TensorD::from_data({1}, {std::numeric_limits<double>::infinity()});
    CHECK_FALSE(all_finite(bad));
}

TEST_CASE("float32 is the default-width instantiation") {
    auto x = TensorF::from_data({2}, {1.5f, 2.5f}, true);
    sum_all(mul(x, x)).backward();
    CHECK(x.grad() == std::vector<float>{3.0f, 5.0f});
}
