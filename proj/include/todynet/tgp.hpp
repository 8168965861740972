#pragma once

// Temporal graph pooling: a valid 2-D convolution with nodes as channels
// clusters nodes, and the assignment matrix contracted from the same
// convolution weights coarsens the adjacency.

#include <cmath>
#include <string>
#include <vector>

#include "todynet/graph_ops.hpp"
#include "todynet/tape.hpp"

namespace todynet {

inline std::size_t pooled_node_count(std::size_t n_in, double ratio) {
    if (!(ratio > 0.0) || ratio > 1.0) {
        throw_config("pool ratio must lie in (0, 1], got " + std::to_string(ratio));
    }
    if (n_in < 1) throw_config("pooled_node_count: need at least one node");
    // The small slack keeps exact products like 0.2*5 from ceiling up a step.
    const double scaled = ratio * static_cast<double>(n_in) - 1e-9;
    const std::size_t n = static_cast<std::size_t>(std::ceil(scaled));
    return n < 1 ? 1 : n;
}

template <typename R>
struct TgpLayer {
    Parameter<R> w;  // [P, N, 1, K] pooling convolution weights
    Parameter<R> b;  // [P]
    Parameter<R> v;  // [1, K] contraction vector

    static TgpLayer seeded(std::size_t n_in, std::size_t n_out, std::size_t k, Rng& rng,
                           const std::string& prefix) {
        if (n_out < 1 || n_out > n_in) {
            throw_config("tgp: need 1 <= out_nodes <= in_nodes, got " + std::to_string(n_out) +
                         " of " + std::to_string(n_in));
        }
        TgpLayer l;
        const double a = 1.0 / std::sqrt(static_cast<double>(n_in * k));
        l.w = Parameter<R>(prefix + ".w",
                           DenseArray<R>::uniform(Shape{n_out, n_in, 1, k}, rng, -a, a));
        l.b = Parameter<R>(prefix + ".b", DenseArray<R>::uniform(Shape{n_out}, rng, -a, a));
        const double av = 1.0 / std::sqrt(static_cast<double>(k));
        l.v = Parameter<R>(prefix + ".v", DenseArray<R>::uniform(Shape{1, k}, rng, -av, av));
        return l;
    }

    std::size_t in_nodes() const { return w.value.dim(1); }
    std::size_t out_nodes() const { return w.value.dim(0); }
    std::size_t kernel() const { return w.value.dim(3); }

    struct Out {
        Var features;    // [B, P, S, C, T-K+1]
        Var assignment;  // [P, N]
    };

    // x: [B, N, S, C, T]. The valid convolution shrinks the within-slot axis
    // by K-1; channels and slots ride along as spatial/batch axes.
    Out forward(Tape<R>& t, Var x) {
        const Shape& s = t.value(x).shape;
        if (s.size() != 5) throw_shape("tgp: expected [B,N,S,C,T], got " + shape_str(s));
        const std::size_t B = s[0], N = s[1], S = s[2], C = s[3], T = s[4];
        if (N != in_nodes()) {
            throw_shape("tgp: layer built for " + std::to_string(in_nodes()) +
                        " nodes, features carry " + std::to_string(N));
        }
        Var wv = t.param(w);
        // [B,N,S,C,T] -> [B,S,N,C,T] -> [B*S, N, C, T] (nodes as channels)
        Var folded = ops::reshape(t, ops::permute(t, x, {0, 2, 1, 3, 4}), Shape{B * S, N, C, T});
        Var conv = ops::conv2d_valid(t, folded, wv, t.param(b));
        const std::size_t Tout = T - kernel() + 1;
        Var feats = ops::permute(
            t, ops::reshape(t, conv, Shape{B, S, out_nodes(), C, Tout}), {0, 2, 1, 3, 4});
        return Out{feats, ops::contract_kernel(t, wv, t.param(v))};
    }

    std::vector<Parameter<R>*> parameters() { return {&w, &b, &v}; }
};

}  // namespace todynet
