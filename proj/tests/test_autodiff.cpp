#include <doctest.h>

#include <cmath>
#include <vector>

#include "todynet/adam.hpp"
#include "todynet/gradcheck.hpp"
#include "todynet/graph_ops.hpp"
#include "todynet/ops.hpp"
#include "todynet/tape.hpp"

using namespace todynet;
namespace op = todynet::ops;

namespace {

DenseArray<double> rand_array(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    Rng rng(seed);
    return DenseArray<double>::uniform(std::move(s), rng, lo, hi);
}

// Random values bounded away from zero (for kinked ops like relu).
DenseArray<double> rand_array_offzero(Shape s, std::uint64_t seed) {
    Rng rng(seed);
    DenseArray<double> a(std::move(s));
    for (double& v : a.data) {
        const double u = rng.uniform();
        const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
        v = sign * (0.1 + 0.9 * u);
    }
    return a;
}

}  // namespace

TEST_SUITE("matmul") {
    TEST_CASE("identity times any matrix") {
        Tape<double> t;
        DenseArray<double> eye(Shape{3, 3});
        for (int i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
        DenseArray<double> b = rand_array({3, 3}, 11);
        Var out = op::matmul(t, t.leaf(eye), t.leaf(b));
        for (std::size_t i = 0; i < 9; ++i) CHECK(t.value(out)[i] == doctest::Approx(b[i]));
    }

    TEST_CASE("small product against hand result") {
        Tape<double> t;
        Var a = t.leaf(DenseArray<double>({2, 2}, {1, 2, 3, 4}));
        Var b = t.leaf(DenseArray<double>({2, 1}, {0, 1}));
        Var c = op::matmul(t, a, b);
        CHECK(t.value(c)[0] == 2.0);
        CHECK(t.value(c)[1] == 4.0);
    }

    TEST_CASE("inner dimension mismatch names both shapes") {
        Tape<double> t;
        Var a = t.leaf(DenseArray<double>(Shape{2, 3}));
        Var b = t.leaf(DenseArray<double>(Shape{2, 3}));
        CHECK_THROWS_WITH_AS(op::matmul(t, a, b),
                             doctest::Contains("[2x3]"), Error);
    }
}

TEST_SUITE("conv1d_same") {
    TEST_CASE("identity kernel") {
        Tape<double> t;
        Var x = t.leaf(DenseArray<double>({1, 1, 3}, {1, 2, 3}));
        Var w = t.leaf(DenseArray<double>({1, 1, 1}, {1}));
        Var b = t.leaf(DenseArray<double>({1}, {0}));
        Var y = op::conv1d_same(t, x, w, b);
        CHECK(t.value(y).data == std::vector<double>{1, 2, 3});
    }

    TEST_CASE("centered delta kernel") {
        Tape<double> t;
        Var x = t.leaf(DenseArray<double>({1, 1, 3}, {1, 2, 3}));
        Var w = t.leaf(DenseArray<double>({1, 1, 3}, {0, 1, 0}));
        Var b = t.leaf(DenseArray<double>({1}, {0}));
        Var y = op::conv1d_same(t, x, w, b);
        CHECK(t.value(y).data == std::vector<double>{1, 2, 3});
    }

    TEST_CASE("box kernel with zero padding") {
        Tape<double> t;
        Var x = t.leaf(DenseArray<double>({1, 1, 3}, {1, 2, 3}));
        Var w = t.leaf(DenseArray<double>({1, 1, 3}, {1, 1, 1}));
        Var b = t.leaf(DenseArray<double>({1}, {0}));
        Var y = op::conv1d_same(t, x, w, b);
        CHECK(t.value(y).data == std::vector<double>{3, 6, 5});
    }

    TEST_CASE("even kernel size rejected") {
        Tape<double> t;
        Var x = t.leaf(DenseArray<double>(Shape{1, 1, 4}));
        Var w = t.leaf(DenseArray<double>(Shape{1, 1, 2}));
        Var b = t.leaf(DenseArray<double>(Shape{1}));
        CHECK_THROWS_AS(op::conv1d_same(t, x, w, b), Error);
    }

    TEST_CASE("length preserved for odd kernels") {
        for (std::size_t k : {1u, 3u, 5u, 7u, 11u}) {
            Tape<double> t;
            Var x = t.leaf(rand_array({2, 3, 17}, 100 + k));
            Var w = t.leaf(rand_array({4, 3, k}, 200 + k));
            Var b = t.leaf(rand_array({4}, 300 + k));
            Var y = op::conv1d_same(t, x, w, b);
            CHECK(t.value(y).shape == Shape{2, 4, 17});
        }
    }
}

TEST_SUITE("conv2d_valid") {
    TEST_CASE("1x1 kernel is identity") {
        Tape<double> t;
        DenseArray<double> xv = rand_array({1, 1, 2, 3}, 7);
        Var x = t.leaf(xv);
        Var w = t.leaf(DenseArray<double>({1, 1, 1, 1}, {1}));
        Var b = t.leaf(DenseArray<double>({1}, {0}));
        Var y = op::conv2d_valid(t, x, w, b);
        CHECK(t.value(y).shape == Shape{1, 1, 2, 3});
        for (std::size_t i = 0; i < xv.numel(); ++i) CHECK(t.value(y)[i] == xv[i]);
    }

    TEST_CASE("row filter against hand result") {
        Tape<double> t;
        Var x = t.leaf(DenseArray<double>({1, 1, 1, 3}, {1, 2, 3}));
        Var w = t.leaf(DenseArray<double>({1, 1, 1, 3}, {1, 0, -1}));
        Var b = t.leaf(DenseArray<double>({1}, {0}));
        Var y = op::conv2d_valid(t, x, w, b);
        CHECK(t.value(y).shape == Shape{1, 1, 1, 1});
        CHECK(t.value(y)[0] == -2.0);
    }

    TEST_CASE("kernel taller than input rejected") {
        Tape<double> t;
        Var x = t.leaf(DenseArray<double>(Shape{1, 1, 1, 3}));
        Var w = t.leaf(DenseArray<double>(Shape{1, 1, 2, 1}));
        Var b = t.leaf(DenseArray<double>(Shape{1}));
        CHECK_THROWS_AS(op::conv2d_valid(t, x, w, b), Error);
    }
}

TEST_SUITE("elementwise") {
    TEST_CASE("relu gates by sign") {
        Tape<double> t;
        Var x = t.leaf(DenseArray<double>({3}, {-1, 0, 2}));
        Var y = op::relu(t, x);
        CHECK(t.value(y).data == std::vector<double>{0, 0, 2});
    }

    TEST_CASE("add with zeros is identity") {
        Tape<double> t;
        DenseArray<double> xv = rand_array({4}, 5);
        Var x = t.leaf(xv);
        Var z = t.leaf(DenseArray<double>(Shape{4}, 0.0));
        Var y = op::add(t, x, z);
        CHECK(t.value(y).data == xv.data);
    }

    TEST_CASE("scalar multiply") {
        Tape<double> t;
        Var x = t.leaf(DenseArray<double>({2}, {1, 2}));
        Var y = op::scale(t, x, 3.0);
        CHECK(t.value(y).data == std::vector<double>{3, 6});
    }

    TEST_CASE("add shape mismatch throws") {
        Tape<double> t;
        Var a = t.leaf(DenseArray<double>(Shape{2}));
        Var b = t.leaf(DenseArray<double>(Shape{3}));
        CHECK_THROWS_AS(op::add(t, a, b), Error);
    }
}

TEST_SUITE("softmax_cross_entropy") {
    TEST_CASE("uniform logits give log C") {
        Tape<double> t;
        Var logits = t.leaf(DenseArray<double>(Shape{1, 4}, 0.25));
        Var loss = op::softmax_cross_entropy(t, logits, {2});
        CHECK(t.value(loss)[0] == doctest::Approx(std::log(4.0)).epsilon(1e-12));
    }

    TEST_CASE("confident correct prediction") {
        Tape<double> t;
        Var logits = t.leaf(DenseArray<double>({1, 2}, {10, -10}));
        Var loss = op::softmax_cross_entropy(t, logits, {0});
        CHECK(t.value(loss)[0] == doctest::Approx(std::log1p(std::exp(-20.0))).epsilon(1e-9));
        CHECK(t.value(loss)[0] == doctest::Approx(2.061e-9).epsilon(1e-3));
    }

    TEST_CASE("out of range label names the sample") {
        Tape<double> t;
        Var logits = t.leaf(DenseArray<double>(Shape{2, 3}, 0.0));
        CHECK_THROWS_WITH_AS(op::softmax_cross_entropy(t, logits, {0, 3}),
                             doctest::Contains("sample 1"), Error);
    }
}

TEST_SUITE("backward") {
    TEST_CASE("sum of squares gradient") {
        Parameter<double> p("x", DenseArray<double>({2}, {1, 2}));
        Tape<double> t;
        Var x = t.param(p);
        Var loss = op::sum(t, op::mul(t, x, x));
        t.backward(loss);
        CHECK(p.grad[0] == doctest::Approx(2.0));
        CHECK(p.grad[1] == doctest::Approx(4.0));
        CHECK(t.size() == 0);  // tape cleared after the sweep
    }

    TEST_CASE("detached parameter keeps zero gradient") {
        Parameter<double> used("a", DenseArray<double>({2}, {1, 1}));
        Parameter<double> unused("b", DenseArray<double>({2}, {5, 5}));
        Tape<double> t;
        Var x = t.param(used);
        t.param(unused);
        Var loss = op::sum(t, x);
        t.backward(loss);
        CHECK(used.grad[0] == 1.0);
        CHECK(unused.grad[0] == 0.0);
        CHECK(unused.grad[1] == 0.0);
    }

    TEST_CASE("identity chain of any depth has unit gradient") {
        Parameter<double> p("x", rand_array({5}, 3));
        Tape<double> t;
        Var x = t.param(p);
        for (int i = 0; i < 17; ++i) {
            x = op::add(t, x, t.leaf(DenseArray<double>(Shape{5}, 0.0)));
        }
        t.backward(op::sum(t, x));
        for (std::size_t i = 0; i < 5; ++i) CHECK(p.grad[i] == 1.0);
    }

    TEST_CASE("non-scalar root rejected") {
        Tape<double> t;
        Var x = t.leaf(DenseArray<double>(Shape{3}, 1.0));
        CHECK_THROWS_AS(t.backward(x), Error);
    }

    TEST_CASE("replay of the same graph is bit-identical") {
        auto build = [] {
            Rng rng(42);
            Tape<double> t;
            Var x = t.leaf(DenseArray<double>::uniform({3, 3}, rng, -1, 1));
            Var w = t.leaf(DenseArray<double>::uniform({3, 3}, rng, -1, 1));
            Var y = op::relu(t, op::matmul(t, x, w));
            return t.value(y).data;
        };
        CHECK(build() == build());
    }
}

// Per-op finite-difference checks: 5 seeds each, max relative error < 1e-5.
TEST_SUITE("finite differences") {
    constexpr double kTol = 1e-5;

    void check_program(const FdProgram& f, const std::function<DenseArray<double>(std::uint64_t)>& gen) {
        for (std::uint64_t seed = 1; seed <= 5; ++seed) {
            const double err = finite_difference_check(f, gen(seed));
            CHECK_MESSAGE(err < kTol, "seed ", seed, " rel err ", err);
        }
    }

    TEST_CASE("quadratic is exact up to roundoff") {
        FdProgram f = [](Tape<double>& t, Var x) { return op::sum(t, op::mul(t, x, x)); };
        const double err = finite_difference_check(f, rand_array({6}, 9));
        CHECK(err < 1e-7);
    }

    TEST_CASE("constant program has zero gradient and zero error") {
        FdProgram f = [](Tape<double>& t, Var) {
            return op::sum(t, t.leaf(DenseArray<double>(Shape{1}, 3.0)));
        };
        CHECK(finite_difference_check(f, rand_array({4}, 10)) == 0.0);
    }

    TEST_CASE("add/mul/scale/add_const") {
        FdProgram f = [](Tape<double>& t, Var x) {
            Var c = t.leaf(rand_array({8}, 77));
            Var y = op::add(t, op::scale(t, x, 1.7), op::mul(t, x, c));
            return op::sum(t, op::mul(t, op::add_const(t, y, 0.3), c));
        };
        check_program(f, [](std::uint64_t s) { return rand_array({8}, s); });
    }

    TEST_CASE("scale_by scalar variable") {
        FdProgram f = [](Tape<double>& t, Var x) {
            // x[0] scales a constant tensor; remaining coords pass through.
            Var s = op::sum(t, op::mul(t, x, t.leaf(DenseArray<double>({3}, {1, 0, 0}))));
            Var c = t.leaf(rand_array({4}, 55));
            Var scaled = op::scale_by(t, op::reshape(t, s, {1}), c);
            return op::add(t, op::sum(t, op::mul(t, scaled, scaled)), op::sum(t, x));
        };
        check_program(f, [](std::uint64_t s) { return rand_array({3}, s); });
    }

    TEST_CASE("relu away from the kink") {
        FdProgram f = [](Tape<double>& t, Var x) {
            Var w = t.leaf(rand_array({10}, 31));
            return op::sum(t, op::mul(t, op::relu(t, x), w));
        };
        check_program(f, [](std::uint64_t s) { return rand_array_offzero({10}, s); });
    }

    TEST_CASE("matmul both operands") {
        FdProgram fa = [](Tape<double>& t, Var x) {
            Var b = t.leaf(rand_array({4, 3}, 21));
            Var w = t.leaf(rand_array({2, 3}, 22));
            return op::sum(t, op::mul(t, op::matmul(t, x, b), w));
        };
        check_program(fa, [](std::uint64_t s) { return rand_array({2, 4}, s); });
        FdProgram fb = [](Tape<double>& t, Var x) {
            Var a = t.leaf(rand_array({3, 2}, 23));
            Var w = t.leaf(rand_array({3, 5}, 24));
            return op::sum(t, op::mul(t, op::matmul(t, a, x), w));
        };
        check_program(fb, [](std::uint64_t s) { return rand_array({2, 5}, s); });
    }

    TEST_CASE("conv1d_same all operands") {
        FdProgram fx = [](Tape<double>& t, Var x) {
            Var w = t.leaf(rand_array({2, 3, 3}, 41));
            Var b = t.leaf(rand_array({2}, 42));
            Var ww = t.leaf(rand_array({2, 2, 7}, 43));
            return op::sum(t, op::mul(t, op::conv1d_same(t, x, w, b), ww));
        };
        check_program(fx, [](std::uint64_t s) { return rand_array({2, 3, 7}, s); });
        FdProgram fw = [](Tape<double>& t, Var w) {
            Var x = t.leaf(rand_array({2, 3, 7}, 44));
            Var b = t.leaf(rand_array({2}, 45));
            Var ww = t.leaf(rand_array({2, 2, 7}, 46));
            return op::sum(t, op::mul(t, op::conv1d_same(t, x, w, b), ww));
        };
        check_program(fw, [](std::uint64_t s) { return rand_array({2, 3, 3}, s); });
        FdProgram fb = [](Tape<double>& t, Var b) {
            Var x = t.leaf(rand_array({2, 3, 7}, 47));
            Var w = t.leaf(rand_array({2, 3, 5}, 48));
            Var ww = t.leaf(rand_array({2, 2, 7}, 49));
            return op::sum(t, op::mul(t, op::conv1d_same(t, x, w, b), ww));
        };
        check_program(fb, [](std::uint64_t s) { return rand_array({2}, s); });
    }

    TEST_CASE("conv2d_valid all operands") {
        FdProgram fx = [](Tape<double>& t, Var x) {
            Var w = t.leaf(rand_array({2, 2, 2, 3}, 51));
            Var b = t.leaf(rand_array({2}, 52));
            Var ww = t.leaf(rand_array({2, 2, 3, 3}, 53));
            return op::sum(t, op::mul(t, op::conv2d_valid(t, x, w, b), ww));
        };
        check_program(fx, [](std::uint64_t s) { return rand_array({2, 2, 4, 5}, s); });
        FdProgram fw = [](Tape<double>& t, Var w) {
            Var x = t.leaf(rand_array({2, 2, 4, 5}, 54));
            Var b = t.leaf(rand_array({2}, 55));
            Var ww = t.leaf(rand_array({2, 2, 3, 3}, 56));
            return op::sum(t, op::mul(t, op::conv2d_valid(t, x, w, b), ww));
        };
        check_program(fw, [](std::uint64_t s) { return rand_array({2, 2, 2, 3}, s); });
    }

    TEST_CASE("softmax cross entropy") {
        FdProgram f = [](Tape<double>& t, Var x) {
            return op::softmax_cross_entropy(t, x, {1, 0, 2});
        };
        check_program(f, [](std::uint64_t s) { return rand_array({3, 3}, s, -2, 2); });
    }

    TEST_CASE("reshape and permute") {
        FdProgram f = [](Tape<double>& t, Var x) {
            Var y = op::permute(t, op::reshape(t, x, {2, 3, 4}), {2, 0, 1});
            Var w = t.leaf(rand_array({4, 2, 3}, 61));
            return op::sum(t, op::mul(t, y, w));
        };
        check_program(f, [](std::uint64_t s) { return rand_array({24}, s); });
    }

    TEST_CASE("row_bias_add and concat_cols") {
        FdProgram f = [](Tape<double>& t, Var x) {
            Var m = op::reshape(t, x, {3, 2});
            Var b = t.leaf(rand_array({2}, 71));
            Var y = op::row_bias_add(t, m, b);
            Var z = op::concat_cols(t, {y, op::mul(t, y, y)});
            Var w = t.leaf(rand_array({3, 4}, 72));
            return op::sum(t, op::mul(t, z, w));
        };
        check_program(f, [](std::uint64_t s) { return rand_array({6}, s); });
    }
}

TEST_SUITE("adam") {
    TEST_CASE("zero gradient is a fixed point") {
        Parameter<double> p("w", DenseArray<double>({3}, {1, -2, 0.5}));
        AdamOptimizer<double> adam(1e-2);
        adam.step({&p});
        CHECK(p.value.data == std::vector<double>{1, -2, 0.5});
    }

    TEST_CASE("first step with unit gradient moves by about lr") {
        Parameter<double> p("w", DenseArray<double>({1}, {0.0}));
        p.grad[0] = 1.0;
        AdamOptimizer<double> adam(1e-3);
        adam.step({&p});
        // bias-corrected m-hat = v-hat = 1 on step one => delta = lr / (1 + eps)
        CHECK(p.value[0] == doctest::Approx(-1e-3).epsilon(1e-6));
    }

    TEST_CASE("identical sequences stay identical") {
        auto run = [] {
            Parameter<double> p("w", DenseArray<double>({2}, {0.3, -0.7}));
            AdamOptimizer<double> adam(1e-3);
            for (int i = 0; i < 25; ++i) {
                p.zero_grad();
                p.grad[0] = 0.1 * (i + 1);
                p.grad[1] = -0.05 * (i + 1);
                adam.step({&p});
            }
            return p.value.data;
        };
        CHECK(run() == run());
    }

    TEST_CASE("non-trainable parameters are skipped") {
        Parameter<double> p("stat", DenseArray<double>({1}, {2.0}), false);
        p.grad[0] = 5.0;
        AdamOptimizer<double> adam(1e-1);
        adam.step({&p});
        CHECK(p.value[0] == 2.0);
    }

    TEST_CASE("zero_grad leaves an exactly zero gradient") {
        Parameter<double> p("w", DenseArray<double>({3}, {1, 2, 3}));
        p.grad.data = {0.5, -0.25, 1e-17};
        p.zero_grad();
        CHECK(p.grad.data == std::vector<double>{0, 0, 0});
    }
}
