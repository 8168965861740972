#include <doctest.h>

#include <cmath>

#include "support/testutil.hpp"
#include "todynet/gradcheck.hpp"
#include "todynet/graph.hpp"

using namespace todynet;
namespace op = todynet::ops;
using testutil::rand_array;
using testutil::rand_array_offzero;

namespace {

// Dense eigenvalue oracle: power iteration bound on the spectral radius of a
// symmetric matrix, via the shifted operators I+A and I-A.
double spectral_radius_oracle(const DenseArray<double>& m) {
    const std::size_t n = m.dim(0);
    auto dominant = [&](double shift_sign) {
        std::vector<double> v(n, 1.0 / std::sqrt(static_cast<double>(n))), w(n);
        double norm = 0.0;
        for (int it = 0; it < 2000; ++it) {
            for (std::size_t i = 0; i < n; ++i) {
                double acc = v[i];  // I*v
                for (std::size_t j = 0; j < n; ++j) acc += shift_sign * m[i * n + j] * v[j];
                w[i] = acc;
            }
            norm = 0.0;
            for (double x : w) norm += x * x;
            norm = std::sqrt(norm);
            if (norm == 0.0) return 0.0;
            for (std::size_t i = 0; i < n; ++i) v[i] = w[i] / norm;
        }
        return norm;  // 1 + max eig of (shift_sign * A)
    };
    // eig(A) in [-r, r] <=> dominant(I+A) <= 1+r and dominant(I-A) <= 1+r
    return std::max(dominant(1.0), dominant(-1.0)) - 1.0;
}

DenseArray<double> separated_positive(Shape s, std::uint64_t seed) {
    // Distinct positive values with gaps far above the FD step size.
    std::vector<double> vals(shape_numel(s));
    for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = 0.05 * static_cast<double>(i + 1);
    Rng rng(seed);
    rng.shuffle(vals);
    return DenseArray<double>(std::move(s), std::move(vals));
}

}  // namespace

TEST_SUITE("construct_adjacency") {
    TEST_CASE("outer product with rectification") {
        Tape<double> t;
        Var th = t.leaf(DenseArray<double>({1, 2}, {1, 0}));
        Var ps = t.leaf(DenseArray<double>({1, 2}, {0, 1}));
        Var a = op::construct_adjacency(t, th, ps);
        CHECK(t.value(a).data == std::vector<double>{0, 1, 0, 0});
    }

    TEST_CASE("zero source annihilates the graph") {
        Tape<double> t;
        Var th = t.leaf(DenseArray<double>(Shape{2, 3}, 0.0));
        Var ps = t.leaf(rand_array({2, 3}, 5));
        Var a = op::construct_adjacency(t, th, ps);
        for (double v : t.value(a).data) CHECK(v == 0.0);
    }

    TEST_CASE("negative products clamp to zero") {
        Tape<double> t;
        Var th = t.leaf(DenseArray<double>({1, 2}, {1, -1}));
        Var ps = t.leaf(DenseArray<double>({1, 2}, {1, 1}));
        Var a = op::construct_adjacency(t, th, ps);
        // row 2 = -1 * [1,1] -> clamped
        CHECK(t.value(a).data == std::vector<double>{1, 1, 0, 0});
    }
}

TEST_SUITE("topk_sparsify") {
    TEST_CASE("k = n-1 only zeroes the diagonal") {
        Tape<double> t;
        DenseArray<double> a = rand_array({2, 3, 3}, 9, 0.0, 1.0);
        Var out = op::topk_sparsify(t, t.leaf(a), 2);
        for (std::size_t s = 0; s < 2; ++s)
            for (std::size_t i = 0; i < 3; ++i)
                for (std::size_t j = 0; j < 3; ++j) {
                    const double got = t.value(out)[(s * 3 + i) * 3 + j];
                    CHECK(got == (i == j ? 0.0 : a[(s * 3 + i) * 3 + j]));
                }
    }

    TEST_CASE("row scan with diagonal excluded") {
        Tape<double> t;
        Var a = t.leaf(DenseArray<double>({1, 3, 3},
                                          {.9, .2, .5, .1, .8, .3, .4, .6, .7}));
        Var out = op::topk_sparsify(t, a, 1);
        CHECK(t.value(out).data ==
              std::vector<double>{0, 0, .5, 0, 0, .3, 0, .6, 0});
    }

    TEST_CASE("ties retain the smaller column index") {
        Tape<double> t;
        Var a = t.leaf(DenseArray<double>({1, 3, 3}, {.5, .5, .5, .5, .5, .5, .5, .5, .5}));
        Var out = op::topk_sparsify(t, a, 1);
        // per row, the smallest non-diagonal column wins the tie
        CHECK(t.value(out).data ==
              std::vector<double>{0, .5, 0, .5, 0, 0, .5, 0, 0});
    }

    TEST_CASE("k out of range is a configuration error") {
        Tape<double> t;
        Var a = t.leaf(DenseArray<double>(Shape{1, 3, 3}, 1.0));
        CHECK_THROWS_AS(op::topk_sparsify(t, a, 0), Error);
        CHECK_THROWS_AS(op::topk_sparsify(t, a, 3), Error);
    }

    TEST_CASE("sparsity and nonnegativity invariants over random graphs") {
        for (std::uint64_t seed = 1; seed <= 8; ++seed) {
            Rng rng(seed);
            const std::size_t n = 3 + rng.below(6);
            const std::size_t S = 1 + rng.below(4);
            const std::size_t k = 1 + rng.below(n - 1);
            Tape<double> t;
            Var th = t.leaf(rand_array({S, n}, seed * 31, -1.0, 1.0));
            Var ps = t.leaf(rand_array({S, n}, seed * 37, -1.0, 1.0));
            Var a = op::topk_sparsify(t, op::construct_adjacency(t, th, ps), k);
            const DenseArray<double>& av = t.value(a);
            for (std::size_t s = 0; s < S; ++s)
                for (std::size_t i = 0; i < n; ++i) {
                    CHECK(av[(s * n + i) * n + i] == 0.0);
                    std::size_t nnz = 0;
                    for (std::size_t j = 0; j < n; ++j) {
                        CHECK(av[(s * n + i) * n + j] >= 0.0);
                        if (j != i && av[(s * n + i) * n + j] != 0.0) ++nnz;
                    }
                    CHECK(nnz <= k);
                }
        }
    }

    TEST_CASE("gradients flow only through retained entries") {
        Parameter<double> pa("a", separated_positive({1, 4, 4}, 3));
        Tape<double> t;
        Var a = t.param(pa);
        Var kept = op::topk_sparsify(t, a, 2);
        Var w = t.leaf(rand_array({1, 4, 4}, 8, 0.5, 1.5));
        t.backward(op::sum(t, op::mul(t, kept, w)));
        // tape cleared; recompute the retained set from a fresh forward
        Tape<double> t2;
        Var kept2 = op::topk_sparsify(t2, t2.leaf(pa.value), 2);
        for (std::size_t i = 0; i < pa.grad.numel(); ++i) {
            if (t2.value(kept2)[i] == 0.0) CHECK(pa.grad[i] == 0.0);
            else CHECK(pa.grad[i] != 0.0);
        }
    }
}

TEST_SUITE("normalize_adjacency") {
    TEST_CASE("unit degrees are a fixed point") {
        Tape<double> t;
        Var a = t.leaf(DenseArray<double>({1, 2, 2}, {0, 1, 1, 0}));
        Var out = op::normalize_adjacency(t, a);
        CHECK(t.value(out).data == std::vector<double>{0, 1, 1, 0});
    }

    TEST_CASE("degree two halves the weights") {
        Tape<double> t;
        Var a = t.leaf(DenseArray<double>({1, 2, 2}, {0, 2, 2, 0}));
        Var out = op::normalize_adjacency(t, a);
        CHECK(t.value(out)[1] == doctest::Approx(1.0).epsilon(1e-14));
        CHECK(t.value(out)[2] == doctest::Approx(1.0).epsilon(1e-14));
    }

    TEST_CASE("isolated node stays exactly zero") {
        Tape<double> t;
        Var a = t.leaf(DenseArray<double>({1, 3, 3}, {0, 1, 0, 1, 0, 0, 0, 0, 0}));
        Var out = op::normalize_adjacency(t, a);
        const DenseArray<double>& o = t.value(out);
        for (std::size_t j = 0; j < 3; ++j) {
            CHECK(o[2 * 3 + j] == 0.0);
            CHECK(o[j * 3 + 2] == 0.0);
        }
        CHECK(o.all_finite());
    }

    TEST_CASE("negative entries are a contract error") {
        Tape<double> t;
        Var a = t.leaf(DenseArray<double>({1, 2, 2}, {0, -1, 1, 0}));
        CHECK_THROWS_AS(op::normalize_adjacency(t, a), Error);
    }

    TEST_CASE("spectral radius at most one for symmetric graphs") {
        for (std::uint64_t seed = 1; seed <= 10; ++seed) {
            DenseArray<double> a = rand_array({1, 5, 5}, seed * 101, 0.05, 1.0);
            for (std::size_t i = 0; i < 5; ++i)
                for (std::size_t j = 0; j < i; ++j)
                    a[i * 5 + j] = a[j * 5 + i];  // symmetrize
            Tape<double> t;
            Var out = op::normalize_adjacency(t, t.leaf(a));
            DenseArray<double> slot(Shape{5, 5});
            for (std::size_t i = 0; i < 25; ++i) slot[i] = t.value(out)[i];
            CHECK(spectral_radius_oracle(slot) <= 1.0 + 1e-9);
        }
    }
}

TEST_SUITE("graph finite differences") {
    constexpr double kTol = 1e-5;

    void fd_over_seeds(const FdProgram& f,
                       const std::function<DenseArray<double>(std::uint64_t)>& gen,
                       double tol = kTol) {
        for (std::uint64_t seed = 1; seed <= 5; ++seed) {
            const double err = finite_difference_check(f, gen(seed));
            CHECK_MESSAGE(err < tol, "seed ", seed, " rel err ", err);
        }
    }

    TEST_CASE("outer_slot") {
        FdProgram f = [](Tape<double>& t, Var x) {
            Var ps = t.leaf(rand_array({2, 3}, 71));
            Var w = t.leaf(rand_array({2, 3, 3}, 72));
            return op::sum(t, op::mul(t, op::outer_slot(t, x, ps), w));
        };
        fd_over_seeds(f, [](std::uint64_t s) { return rand_array({2, 3}, s); });
    }

    TEST_CASE("topk_sparsify with separated values") {
        FdProgram f = [](Tape<double>& t, Var x) {
            Var w = t.leaf(rand_array({2, 4, 4}, 73, 0.5, 1.5));
            return op::sum(t, op::mul(t, op::topk_sparsify(t, x, 2), w));
        };
        fd_over_seeds(f, [](std::uint64_t s) { return separated_positive({2, 4, 4}, s); });
    }

    TEST_CASE("zero_diag") {
        FdProgram f = [](Tape<double>& t, Var x) {
            Var w = t.leaf(rand_array({2, 3, 3}, 74));
            return op::sum(t, op::mul(t, op::zero_diag(t, x), w));
        };
        fd_over_seeds(f, [](std::uint64_t s) { return rand_array({2, 3, 3}, s); });
    }

    TEST_CASE("normalize_adjacency differentiates through the degrees") {
        FdProgram f = [](Tape<double>& t, Var x) {
            Var w = t.leaf(rand_array({2, 4, 4}, 75));
            return op::sum(t, op::mul(t, op::normalize_adjacency(t, x), w));
        };
        fd_over_seeds(f, [](std::uint64_t s) { return rand_array({2, 4, 4}, s, 0.05, 1.0); });
    }

    TEST_CASE("pool_adjacency both operands") {
        FdProgram fm = [](Tape<double>& t, Var m) {
            Var a = t.leaf(rand_array({2, 4, 4}, 76, 0.0, 1.0));
            Var w = t.leaf(rand_array({2, 2, 2}, 77));
            return op::sum(t, op::mul(t, op::pool_adjacency(t, m, a), w));
        };
        fd_over_seeds(fm, [](std::uint64_t s) { return rand_array({2, 4}, s); });
        FdProgram fa = [](Tape<double>& t, Var a) {
            Var m = t.leaf(rand_array({2, 4}, 78));
            Var w = t.leaf(rand_array({2, 2, 2}, 79));
            return op::sum(t, op::mul(t, op::pool_adjacency(t, m, a), w));
        };
        fd_over_seeds(fa, [](std::uint64_t s) { return rand_array({2, 4, 4}, s); });
    }

    TEST_CASE("contract_kernel both operands") {
        FdProgram fw = [](Tape<double>& t, Var w) {
            Var v = t.leaf(rand_array({1, 3}, 80));
            Var ww = t.leaf(rand_array({2, 4}, 81));
            return op::sum(t, op::mul(t, op::contract_kernel(t, w, v), ww));
        };
        fd_over_seeds(fw, [](std::uint64_t s) { return rand_array({2, 4, 1, 3}, s); });
        FdProgram fv = [](Tape<double>& t, Var v) {
            Var w = t.leaf(rand_array({2, 4, 1, 3}, 82));
            Var ww = t.leaf(rand_array({2, 4}, 83));
            return op::sum(t, op::mul(t, op::contract_kernel(t, w, v), ww));
        };
        fd_over_seeds(fv, [](std::uint64_t s) { return rand_array({1, 3}, s); });
    }

    TEST_CASE("graph_apply both operands") {
        FdProgram fa = [](Tape<double>& t, Var a) {
            Var x = t.leaf(rand_array({2, 3, 2, 2, 3}, 84));
            Var w = t.leaf(rand_array({2, 3, 2, 2, 3}, 85));
            return op::sum(t, op::mul(t, op::graph_apply(t, a, x), w));
        };
        fd_over_seeds(fa, [](std::uint64_t s) { return rand_array({2, 3, 3}, s); });
        FdProgram fx = [](Tape<double>& t, Var x) {
            Var a = t.leaf(rand_array({2, 3, 3}, 86));
            Var w = t.leaf(rand_array({2, 3, 2, 2, 3}, 87));
            return op::sum(t, op::mul(t, op::graph_apply(t, a, x), w));
        };
        fd_over_seeds(fx, [](std::uint64_t s) { return rand_array({2, 3, 2, 2, 3}, s); });
    }

    TEST_CASE("slot_prev and slot_split") {
        FdProgram fp = [](Tape<double>& t, Var x) {
            Var w = t.leaf(rand_array({2, 2, 3, 2, 2}, 88));
            return op::sum(t, op::mul(t, op::slot_prev(t, x), w));
        };
        fd_over_seeds(fp, [](std::uint64_t s) { return rand_array({2, 2, 3, 2, 2}, s); });
        FdProgram fs = [](Tape<double>& t, Var x) {
            const SlotPartition part = partition_slots(10, 4);
            Var w = t.leaf(rand_array({2, 2, 4, 3, 3}, 89));
            return op::sum(t, op::mul(t, op::slot_split(t, x, part), w));
        };
        fd_over_seeds(fs, [](std::uint64_t s) { return rand_array({2, 2, 3, 10}, s); });
    }

    TEST_CASE("masked_mean and mean_nodes_time") {
        FdProgram fm = [](Tape<double>& t, Var x) {
            SlotMask mask = SlotMask::full(3, 4);
            mask.valid = {4, 2, 3};
            Var w = t.leaf(rand_array({2, 5}, 90));
            return op::sum(t, op::mul(t, op::masked_mean(t, x, mask), w));
        };
        fd_over_seeds(fm, [](std::uint64_t s) { return rand_array({2, 2, 3, 5, 4}, s); });
        FdProgram fn = [](Tape<double>& t, Var x) {
            Var w = t.leaf(rand_array({2, 5}, 91));
            return op::sum(t, op::mul(t, op::mean_nodes_time(t, x), w));
        };
        fd_over_seeds(fn, [](std::uint64_t s) { return rand_array({2, 3, 5, 4}, s); });
    }

    TEST_CASE("channel_linear all operands") {
        FdProgram fx = [](Tape<double>& t, Var x) {
            Var w = t.leaf(rand_array({4, 3}, 92));
            Var b = t.leaf(rand_array({4}, 93));
            Var ww = t.leaf(rand_array({2, 2, 2, 4, 3}, 94));
            return op::sum(t, op::mul(t, op::channel_linear(t, x, w, b), ww));
        };
        fd_over_seeds(fx, [](std::uint64_t s) { return rand_array({2, 2, 2, 3, 3}, s); });
        FdProgram fw = [](Tape<double>& t, Var w) {
            Var x = t.leaf(rand_array({2, 2, 2, 3, 3}, 95));
            Var b = t.leaf(rand_array({4}, 96));
            Var ww = t.leaf(rand_array({2, 2, 2, 4, 3}, 97));
            return op::sum(t, op::mul(t, op::channel_linear(t, x, w, b), ww));
        };
        fd_over_seeds(fw, [](std::uint64_t s) { return rand_array({4, 3}, s); });
    }

    TEST_CASE("batchnorm training and eval modes") {
        FdProgram ftrain = [](Tape<double>& t, Var x) {
            Var gamma = t.leaf(rand_array({3}, 98, 0.5, 1.5));
            Var beta = t.leaf(rand_array({3}, 99));
            DenseArray<double> rm(Shape{3}, 0.0), rv(Shape{3}, 1.0);
            Var w = t.leaf(rand_array({2, 2, 2, 3, 2}, 100));
            Var y = op::batchnorm_channel(t, x, gamma, beta, 3, rm, rv, true);
            return op::sum(t, op::mul(t, y, w));
        };
        fd_over_seeds(ftrain, [](std::uint64_t s) { return rand_array({2, 2, 2, 3, 2}, s); });
        FdProgram feval = [](Tape<double>& t, Var x) {
            Var gamma = t.leaf(rand_array({3}, 101, 0.5, 1.5));
            Var beta = t.leaf(rand_array({3}, 102));
            DenseArray<double> rm = rand_array({3}, 103);
            DenseArray<double> rv = rand_array({3}, 104, 0.5, 2.0);
            Var w = t.leaf(rand_array({2, 2, 2, 3, 2}, 105));
            Var y = op::batchnorm_channel(t, x, gamma, beta, 3, rm, rv, false);
            return op::sum(t, op::mul(t, y, w));
        };
        fd_over_seeds(feval, [](std::uint64_t s) { return rand_array({2, 2, 2, 3, 2}, s); });
    }

    TEST_CASE("theta gradient reaches only retained entries") {
        // Full chain construct -> topk -> normalize; compare against FD.
        FdProgram f = [](Tape<double>& t, Var theta) {
            Var ps = t.leaf(rand_array({2, 4}, 107, 0.2, 1.0));
            Var a = op::construct_adjacency(t, theta, ps);
            Var norm = op::normalize_adjacency(t, op::topk_sparsify(t, a, 2));
            Var w = t.leaf(rand_array({2, 4, 4}, 108));
            return op::sum(t, op::mul(t, norm, w));
        };
        fd_over_seeds(f, [](std::uint64_t s) { return rand_array({2, 4}, s * 13 + 1, 0.2, 1.0); },
                      1e-4);
    }
}

TEST_SUITE("graph misc") {
    TEST_CASE("seeded embeddings are bit-identical across runs") {
        Rng r1(99), r2(99);
        auto e1 = NodeEmbeddingPair<double>::seeded(4, 6, r1);
        auto e2 = NodeEmbeddingPair<double>::seeded(4, 6, r2);
        CHECK(e1.theta.value.data == e2.theta.value.data);
        CHECK(e1.psi.value.data == e2.psi.value.data);
        for (double v : e1.theta.value.data) {
            CHECK(v >= 0.0);
            CHECK(v < 1.0);
        }
    }

    TEST_CASE("edge list text lists nonzero entries with 1-based slots") {
        DenseArray<double> a({1, 2, 2}, {0, 0.5, 0, 0});
        const std::string text = edge_list_text(a);
        CHECK(text == "# slot\tsrc\tdst\tweight\n1\t0\t1\t0.5\n");
    }
}
