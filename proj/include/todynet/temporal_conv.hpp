#pragma once

// Temporal feature extractor: length-preserving 1-D convolution stages with
// rectified activations, shared across nodes. No dilation, no residuals.

#include <cmath>
#include <string>
#include <vector>

#include "todynet/graph_ops.hpp"
#include "todynet/tape.hpp"

namespace todynet {

template <typename R>
struct TcStage {
    Parameter<R> w;  // [Cout, Cin, K], K odd
    Parameter<R> b;  // [Cout]

    static TcStage seeded(std::size_t cin, std::size_t cout, std::size_t k, Rng& rng,
                          const std::string& prefix) {
        if (k % 2 == 0) {
            throw_config("temporal conv: kernel size must be odd, got " + std::to_string(k));
        }
        TcStage s;
        const double a = 1.0 / std::sqrt(static_cast<double>(cin * k));
        s.w = Parameter<R>(prefix + ".w", DenseArray<R>::uniform(Shape{cout, cin, k}, rng, -a, a));
        s.b = Parameter<R>(prefix + ".b", DenseArray<R>::uniform(Shape{cout}, rng, -a, a));
        return s;
    }

    std::size_t kernel() const { return w.value.dim(2); }
    std::size_t in_channels() const { return w.value.dim(1); }
    std::size_t out_channels() const { return w.value.dim(0); }

    // [B', Cin, L] -> [B', Cout, L]
    Var forward3(Tape<R>& t, Var x) {
        return ops::relu(t, ops::conv1d_same(t, x, t.param(w), t.param(b)));
    }

    // Per-node application with node-shared weights: [B, N, Cin, L] -> [B, N, Cout, L].
    Var forward_nodes(Tape<R>& t, Var x) {
        const Shape& s = t.value(x).shape;
        if (s.size() != 4) throw_shape("tc_forward: expected [B,N,Cin,L], got " + shape_str(s));
        const std::size_t B = s[0], N = s[1], L = s[3];
        Var folded = ops::reshape(t, x, Shape{B * N, s[2], L});
        Var y = forward3(t, folded);
        return ops::reshape(t, y, Shape{B, N, out_channels(), L});
    }

    // Within-slot application: [B, N, S, Cin, T] -> [B, N, S, Cout, T].
    Var forward_slots(Tape<R>& t, Var x) {
        const Shape& s = t.value(x).shape;
        if (s.size() != 5) throw_shape("tc_forward: expected [B,N,S,Cin,T], got " + shape_str(s));
        const std::size_t B = s[0], N = s[1], S = s[2], T = s[4];
        Var folded = ops::reshape(t, x, Shape{B * N * S, s[3], T});
        Var y = forward3(t, folded);
        return ops::reshape(t, y, Shape{B, N, S, out_channels(), T});
    }

    std::vector<Parameter<R>*> parameters() { return {&w, &b}; }
};

}  // namespace todynet
