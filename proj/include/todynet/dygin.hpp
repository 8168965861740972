#pragma once

// Dynamic graph isomorphism layer: per-slot GIN aggregation with a learnable
// self-term scale, the previous-slot connection, and a shared MLP
// (linear -> per-channel batch normalization -> rectifier). A plain
// node-by-node reference implementation serves as the oracle for the
// vectorized form.

#include <cmath>
#include <string>
#include <vector>

#include "todynet/graph_ops.hpp"
#include "todynet/tape.hpp"

namespace todynet {

namespace ops {

// Pre-MLP aggregation: (1+eps)*H_t + H_{t-1} (when enabled) + A_t*H_t per slot.
template <typename R>
Var dygin_aggregate(Tape<R>& t, Var h, Var a_norm, Var eps, bool use_dgt) {
    Var self_term = scale_by(t, add_const(t, eps, R(1)), h);
    Var agg = add(t, self_term, graph_apply(t, a_norm, h));
    if (use_dgt) agg = add(t, agg, slot_prev(t, h));
    return agg;
}

}  // namespace ops

template <typename R>
struct GinLayer {
    Parameter<R> eps;    // [1], shared across slots
    Parameter<R> w;      // [Cout, Cin]; no linear bias, the normalization's
                         // beta provides the shift
    Parameter<R> gamma;  // [Cout]
    Parameter<R> beta;   // [Cout]
    DenseArray<R> running_mean;  // [Cout], frozen statistics for evaluation
    DenseArray<R> running_var;

    static GinLayer seeded(std::size_t cin, std::size_t cout, Rng& rng,
                           const std::string& prefix) {
        GinLayer l;
        const double a = 1.0 / std::sqrt(static_cast<double>(cin));
        l.eps = Parameter<R>(prefix + ".eps", DenseArray<R>(Shape{1}, R(0)));
        l.w = Parameter<R>(prefix + ".w", DenseArray<R>::uniform(Shape{cout, cin}, rng, -a, a));
        l.gamma = Parameter<R>(prefix + ".gamma", DenseArray<R>(Shape{cout}, R(1)));
        l.beta = Parameter<R>(prefix + ".beta", DenseArray<R>(Shape{cout}, R(0)));
        l.running_mean = DenseArray<R>(Shape{cout}, R(0));
        l.running_var = DenseArray<R>(Shape{cout}, R(1));
        return l;
    }

    Var mlp(Tape<R>& t, Var x, bool training) {
        Var lin = ops::channel_linear(t, x, t.param(w),
                                      t.leaf(DenseArray<R>(Shape{w.value.dim(0)}, R(0))));
        Var norm = ops::batchnorm_channel(t, lin, t.param(gamma), t.param(beta), 3,
                                          running_mean, running_var, training);
        return ops::relu(t, norm);
    }

    // h: [B,N,S,Cin,T], a_norm: [S,N,N] -> [B,N,S,Cout,T]
    Var forward(Tape<R>& t, Var h, Var a_norm, bool use_dgt, bool training) {
        return mlp(t, ops::dygin_aggregate(t, h, a_norm, t.param(eps), use_dgt), training);
    }

    std::vector<Parameter<R>*> parameters() { return {&eps, &w, &gamma, &beta}; }
};

// ---------------------------------------------------------------------------
// Node-wise reference (oracle). Plain loops over nodes, slots and positions,
// independent of the tape kernels. 64-bit only, forward only.
// ---------------------------------------------------------------------------

struct GinReferenceParams {
    double eps = 0.0;
    DenseArray<double> w;      // [Cout, Cin]
    DenseArray<double> gamma;  // [Cout]
    DenseArray<double> beta;   // [Cout]
    bool training = true;
    DenseArray<double> running_mean;  // used when !training
    DenseArray<double> running_var;
    double bn_eps = 1e-5;
};

// Aggregation only: out[v,t-slot] = (1+eps)*h_v^t + [t>=2] h_v^{t-1}
//                                   + sum_u w(v,u) h_u^t
inline DenseArray<double> dygin_aggregate_reference(const DenseArray<double>& h,
                                                    const DenseArray<double>& a_norm,
                                                    double eps, bool use_dgt) {
    const std::size_t B = h.dim(0), N = h.dim(1), S = h.dim(2), C = h.dim(3), T = h.dim(4);
    if (a_norm.dim(0) != S || a_norm.dim(1) != N || a_norm.dim(2) != N) {
        throw_shape("dygin_aggregate_reference: node/slot mismatch between " +
                    shape_str(h.shape) + " and " + shape_str(a_norm.shape));
    }
    DenseArray<double> out(h.shape, 0.0);
    auto hat = [&](std::size_t bb, std::size_t nn, std::size_t ss, std::size_t cc,
                   std::size_t tt) -> double {
        return h[(((bb * N + nn) * S + ss) * C + cc) * T + tt];
    };
    for (std::size_t bb = 0; bb < B; ++bb)
        for (std::size_t v = 0; v < N; ++v)
            for (std::size_t ss = 0; ss < S; ++ss)
                for (std::size_t cc = 0; cc < C; ++cc)
                    for (std::size_t tt = 0; tt < T; ++tt) {
                        double acc = (1.0 + eps) * hat(bb, v, ss, cc, tt);
                        if (use_dgt && ss >= 1) acc += hat(bb, v, ss - 1, cc, tt);
                        for (std::size_t u = 0; u < N; ++u) {
                            const double wgt = a_norm[(ss * N + v) * N + u];
                            if (wgt != 0.0) acc += wgt * hat(bb, u, ss, cc, tt);
                        }
                        out[(((bb * N + v) * S + ss) * C + cc) * T + tt] = acc;
                    }
    return out;
}

// MLP of the reference path: linear over channels, batch statistics
// normalization per output channel, rectifier.
inline DenseArray<double> gin_mlp_reference(const DenseArray<double>& x,
                                            const GinReferenceParams& p) {
    const std::size_t B = x.dim(0), N = x.dim(1), S = x.dim(2), Ci = x.dim(3), T = x.dim(4);
    const std::size_t Co = p.w.dim(0);
    DenseArray<double> lin(Shape{B, N, S, Co, T}, 0.0);
    for (std::size_t bb = 0; bb < B; ++bb)
        for (std::size_t nn = 0; nn < N; ++nn)
            for (std::size_t ss = 0; ss < S; ++ss)
                for (std::size_t o = 0; o < Co; ++o)
                    for (std::size_t tt = 0; tt < T; ++tt) {
                        double acc = 0.0;
                        for (std::size_t c = 0; c < Ci; ++c)
                            acc += p.w[o * Ci + c] *
                                   x[(((bb * N + nn) * S + ss) * Ci + c) * T + tt];
                        lin[(((bb * N + nn) * S + ss) * Co + o) * T + tt] = acc;
                    }
    const std::size_t n_red = B * N * S * T;
    std::vector<double> mean(Co, 0.0), var(Co, 0.0);
    if (p.training) {
        for (std::size_t o = 0; o < Co; ++o) {
            double sum = 0;
            for (std::size_t bb = 0; bb < B; ++bb)
                for (std::size_t nn = 0; nn < N; ++nn)
                    for (std::size_t ss = 0; ss < S; ++ss)
                        for (std::size_t tt = 0; tt < T; ++tt)
                            sum += lin[(((bb * N + nn) * S + ss) * Co + o) * T + tt];
            mean[o] = sum / static_cast<double>(n_red);
            double sq = 0;
            for (std::size_t bb = 0; bb < B; ++bb)
                for (std::size_t nn = 0; nn < N; ++nn)
                    for (std::size_t ss = 0; ss < S; ++ss)
                        for (std::size_t tt = 0; tt < T; ++tt) {
                            const double d =
                                lin[(((bb * N + nn) * S + ss) * Co + o) * T + tt] - mean[o];
                            sq += d * d;
                        }
            var[o] = sq / static_cast<double>(n_red);
        }
    } else {
        for (std::size_t o = 0; o < Co; ++o) {
            mean[o] = p.running_mean[o];
            var[o] = p.running_var[o];
        }
    }
    DenseArray<double> out(lin.shape);
    for (std::size_t i = 0; i < lin.numel(); ++i) {
        const std::size_t o = (i / T) % Co;
        const double xh = (lin[i] - mean[o]) / std::sqrt(var[o] + p.bn_eps);
        const double y = p.gamma[o] * xh + p.beta[o];
        out[i] = y > 0 ? y : 0.0;
    }
    return out;
}

inline DenseArray<double> dygin_node_reference(const DenseArray<double>& h,
                                               const DenseArray<double>& a_norm,
                                               const GinReferenceParams& p, bool use_dgt) {
    return gin_mlp_reference(dygin_aggregate_reference(h, a_norm, p.eps, use_dgt), p);
}

}  // namespace todynet
