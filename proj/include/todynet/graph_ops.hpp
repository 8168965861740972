#pragma once

// Kernels specific to the slot-structured feature tensors and per-slot
// adjacency stacks. Layouts:
//   slot features   [batch, nodes, slots, channels, tau]
//   adjacency stack [slots, nodes, nodes]
//   assignment      [out_nodes, in_nodes]

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "todynet/ops.hpp"
#include "todynet/slots.hpp"

namespace todynet {
namespace ops {

// Per-slot outer product of source and target node embeddings:
// theta, psi: [S, N] -> A[s,i,j] = theta[s,i] * psi[s,j].
template <typename R>
Var outer_slot(Tape<R>& t, Var theta, Var psi) {
    const DenseArray<R>& th = t.value(theta);
    const DenseArray<R>& ps = t.value(psi);
    require_same_shape(th, ps, "outer_slot");
    if (th.rank() != 2) throw_shape("outer_slot: embeddings must be [S,N]");
    const std::size_t S = th.dim(0), N = th.dim(1);
    DenseArray<R> out(Shape{S, N, N});
    for (std::size_t s = 0; s < S; ++s)
        for (std::size_t i = 0; i < N; ++i) {
            const R a = th[s * N + i];
            R* row = out.ptr() + (s * N + i) * N;
            const R* prow = ps.ptr() + s * N;
            for (std::size_t j = 0; j < N; ++j) row[j] = a * prow[j];
        }
    const int tid = theta.id, pid = psi.id;
    return t.record(std::move(out), {theta, psi},
                    [tid, pid, S, N](Tape<R>& tp, const DenseArray<R>& g) {
                        const DenseArray<R>& th2 = tp.value(Var{tid});
                        const DenseArray<R>& ps2 = tp.value(Var{pid});
                        if (tp.needs_grad(Var{tid})) {
                            DenseArray<R>& dt = tp.grad_buffer(tid);
                            for (std::size_t s = 0; s < S; ++s)
                                for (std::size_t i = 0; i < N; ++i) {
                                    const R* grow = g.ptr() + (s * N + i) * N;
                                    const R* prow = ps2.ptr() + s * N;
                                    R acc = 0;
                                    for (std::size_t j = 0; j < N; ++j) acc += grow[j] * prow[j];
                                    dt[s * N + i] += acc;
                                }
                        }
                        if (tp.needs_grad(Var{pid})) {
                            DenseArray<R>& dp = tp.grad_buffer(pid);
                            for (std::size_t s = 0; s < S; ++s)
                                for (std::size_t i = 0; i < N; ++i) {
                                    const R a = th2[s * N + i];
                                    const R* grow = g.ptr() + (s * N + i) * N;
                                    R* dprow = dp.ptr() + s * N;
                                    for (std::size_t j = 0; j < N; ++j) dprow[j] += a * grow[j];
                                }
                        }
                    });
}

// Zeroes the diagonal and keeps, per row, only the k largest off-diagonal
// entries (ties go to the smaller column index). Gradients flow only through
// retained entries. A: [S, N, N], 1 <= k <= N-1.
template <typename R>
Var topk_sparsify(Tape<R>& t, Var a, std::size_t k) {
    const DenseArray<R>& av = t.value(a);
    if (av.rank() != 3 || av.dim(1) != av.dim(2)) {
        throw_shape("topk_sparsify: adjacency stack must be [S,N,N], got " + shape_str(av.shape));
    }
    const std::size_t S = av.dim(0), N = av.dim(1);
    if (k < 1 || k > N - 1) {
        throw_config("topk_sparsify: need 1 <= k <= nodes-1, got k=" + std::to_string(k) +
                     " nodes=" + std::to_string(N));
    }
    std::vector<std::uint8_t> mask(av.numel(), 0);
    std::vector<std::pair<R, std::size_t>> cand;
    cand.reserve(N - 1);
    for (std::size_t s = 0; s < S; ++s)
        for (std::size_t i = 0; i < N; ++i) {
            cand.clear();
            const R* row = av.ptr() + (s * N + i) * N;
            for (std::size_t j = 0; j < N; ++j)
                if (j != i) cand.emplace_back(row[j], j);
            std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k),
                              cand.end(), [](const auto& x, const auto& y) {
                                  return x.first > y.first ||
                                         (x.first == y.first && x.second < y.second);
                              });
            for (std::size_t c = 0; c < k; ++c) mask[(s * N + i) * N + cand[c].second] = 1;
        }
    DenseArray<R> out(av.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = mask[i] ? av[i] : R(0);
    const int aid = a.id;
    return t.record(std::move(out), {a},
                    [aid, mask](Tape<R>& tp, const DenseArray<R>& g) {
                        DenseArray<R>& da = tp.grad_buffer(aid);
                        for (std::size_t i = 0; i < g.numel(); ++i)
                            if (mask[i]) da[i] += g[i];
                    });
}

template <typename R>
Var zero_diag(Tape<R>& t, Var a) {
    const DenseArray<R>& av = t.value(a);
    if (av.rank() != 3 || av.dim(1) != av.dim(2)) {
        throw_shape("zero_diag: adjacency stack must be [S,N,N], got " + shape_str(av.shape));
    }
    const std::size_t S = av.dim(0), N = av.dim(1);
    DenseArray<R> out = av;
    for (std::size_t s = 0; s < S; ++s)
        for (std::size_t i = 0; i < N; ++i) out[(s * N + i) * N + i] = R(0);
    const int aid = a.id;
    return t.record(std::move(out), {a},
                    [aid, S, N](Tape<R>& tp, const DenseArray<R>& g) {
                        DenseArray<R>& da = tp.grad_buffer(aid);
                        for (std::size_t s = 0; s < S; ++s)
                            for (std::size_t i = 0; i < N; ++i)
                                for (std::size_t j = 0; j < N; ++j)
                                    if (i != j) da[(s * N + i) * N + j] += g[(s * N + i) * N + j];
                    });
}

// Symmetric degree normalization per slot: out = D^{-1/2} A D^{-1/2} with
// D_ii the row sum of A; zero-degree rows keep scale 1. Entries must be
// nonnegative. Differentiable through the degrees.
template <typename R>
Var normalize_adjacency(Tape<R>& t, Var a) {
    const DenseArray<R>& av = t.value(a);
    if (av.rank() != 3 || av.dim(1) != av.dim(2)) {
        throw_shape("normalize_adjacency: adjacency stack must be [S,N,N], got " +
                    shape_str(av.shape));
    }
    const std::size_t S = av.dim(0), N = av.dim(1);
    // scale[s,i] = d^{-1/2}, dscale[s,i] = d(scale)/d(degree)
    std::vector<R> scalev(S * N), dscalev(S * N);
    for (std::size_t s = 0; s < S; ++s)
        for (std::size_t i = 0; i < N; ++i) {
            const R* row = av.ptr() + (s * N + i) * N;
            double d = 0;
            for (std::size_t j = 0; j < N; ++j) {
                if (row[j] < R(0)) {
                    throw_contract("normalize_adjacency: negative entry at slot " +
                                   std::to_string(s) + " (" + std::to_string(i) + "," +
                                   std::to_string(j) + ")");
                }
                d += static_cast<double>(row[j]);
            }
            if (d > 0) {
                scalev[s * N + i] = static_cast<R>(1.0 / std::sqrt(d));
                dscalev[s * N + i] = static_cast<R>(-0.5 / (d * std::sqrt(d)));
            } else {
                scalev[s * N + i] = R(1);
                dscalev[s * N + i] = R(0);
            }
        }
    DenseArray<R> out(av.shape);
    for (std::size_t s = 0; s < S; ++s)
        for (std::size_t i = 0; i < N; ++i) {
            const R si = scalev[s * N + i];
            const R* row = av.ptr() + (s * N + i) * N;
            R* orow = out.ptr() + (s * N + i) * N;
            for (std::size_t j = 0; j < N; ++j) orow[j] = si * row[j] * scalev[s * N + j];
        }
    const int aid = a.id;
    return t.record(
        std::move(out), {a},
        [aid, scalev, dscalev, S, N](Tape<R>& tp, const DenseArray<R>& g) {
            const DenseArray<R>& av2 = tp.value(Var{aid});
            DenseArray<R>& da = tp.grad_buffer(aid);
            std::vector<R> rowacc(N), colacc(N);
            for (std::size_t s = 0; s < S; ++s) {
                const R* A = av2.ptr() + s * N * N;
                const R* G = g.ptr() + s * N * N;
                R* dA = da.ptr() + s * N * N;
                const R* sc = scalev.data() + s * N;
                const R* dsc = dscalev.data() + s * N;
                // rowacc[i] = sum_j G_ij A_ij s_j ; colacc[j] = sum_i G_ij A_ij s_i
                std::fill(rowacc.begin(), rowacc.end(), R(0));
                std::fill(colacc.begin(), colacc.end(), R(0));
                for (std::size_t i = 0; i < N; ++i)
                    for (std::size_t j = 0; j < N; ++j) {
                        const R ga = G[i * N + j] * A[i * N + j];
                        rowacc[i] += ga * sc[j];
                        colacc[j] += ga * sc[i];
                    }
                for (std::size_t i = 0; i < N; ++i) {
                    const R corr = dsc[i] * (rowacc[i] + colacc[i]);
                    for (std::size_t j = 0; j < N; ++j) {
                        dA[i * N + j] += G[i * N + j] * sc[i] * sc[j] + corr;
                    }
                }
            }
        });
}

// Coarsens every slot's adjacency with the assignment matrix:
// out[s] = M A[s] M^T, M: [P, N], A: [S, N, N] -> [S, P, P].
template <typename R>
Var pool_adjacency(Tape<R>& t, Var m, Var a) {
    const DenseArray<R>& mv = t.value(m);
    const DenseArray<R>& av = t.value(a);
    if (mv.rank() != 2 || av.rank() != 3 || av.dim(1) != av.dim(2) || mv.dim(1) != av.dim(1)) {
        throw_shape("pool_adjacency: expected M[P,N], A[S,N,N]; got " + shape_str(mv.shape) +
                    ", " + shape_str(av.shape));
    }
    const std::size_t P = mv.dim(0), N = mv.dim(1), S = av.dim(0);
    DenseArray<R> out(Shape{S, P, P});
    std::vector<R> tmp(P * N);  // M * A[s]
    for (std::size_t s = 0; s < S; ++s) {
        const R* A = av.ptr() + s * N * N;
        std::fill(tmp.begin(), tmp.end(), R(0));
        for (std::size_t p = 0; p < P; ++p)
            for (std::size_t i = 0; i < N; ++i) {
                const R coef = mv[p * N + i];
                if (coef == R(0)) continue;
                const R* arow = A + i * N;
                R* trow = tmp.data() + p * N;
                for (std::size_t j = 0; j < N; ++j) trow[j] += coef * arow[j];
            }
        R* O = out.ptr() + s * P * P;
        for (std::size_t p = 0; p < P; ++p)
            for (std::size_t q = 0; q < P; ++q) {
                const R* trow = tmp.data() + p * N;
                const R* mrow = mv.ptr() + q * N;
                R acc = 0;
                for (std::size_t j = 0; j < N; ++j) acc += trow[j] * mrow[j];
                O[p * P + q] = acc;
            }
    }
    const int mid = m.id, aid = a.id;
    return t.record(
        std::move(out), {m, a},
        [mid, aid, P, N, S](Tape<R>& tp, const DenseArray<R>& g) {
            const DenseArray<R>& mv2 = tp.value(Var{mid});
            const DenseArray<R>& av2 = tp.value(Var{aid});
            // dM += G M A^T + G^T M A (summed over slots); dA[s] += M^T G[s] M
            if (tp.needs_grad(Var{mid})) {
                DenseArray<R>& dm = tp.grad_buffer(mid);
                std::vector<R> ma(P * N), mat(P * N);
                for (std::size_t s = 0; s < S; ++s) {
                    const R* A = av2.ptr() + s * N * N;
                    const R* G = g.ptr() + s * P * P;
                    std::fill(ma.begin(), ma.end(), R(0));   // M A
                    std::fill(mat.begin(), mat.end(), R(0)); // M A^T
                    for (std::size_t q = 0; q < P; ++q)
                        for (std::size_t i = 0; i < N; ++i) {
                            const R coef = mv2[q * N + i];
                            if (coef == R(0)) continue;
                            const R* arow = A + i * N;
                            R* marow = ma.data() + q * N;
                            for (std::size_t j = 0; j < N; ++j) marow[j] += coef * arow[j];
                        }
                    for (std::size_t q = 0; q < P; ++q)
                        for (std::size_t j = 0; j < N; ++j) {
                            R acc = 0;
                            for (std::size_t i = 0; i < N; ++i)
                                acc += mv2[q * N + i] * A[j * N + i];
                            mat[q * N + j] = acc;
                        }
                    for (std::size_t p = 0; p < P; ++p)
                        for (std::size_t q = 0; q < P; ++q) {
                            const R gpq = G[p * P + q];
                            const R gqp = G[q * P + p];
                            if (gpq == R(0) && gqp == R(0)) continue;
                            R* dmrow = dm.ptr() + p * N;
                            const R* matrow = mat.data() + q * N;
                            const R* marow = ma.data() + q * N;
                            for (std::size_t j = 0; j < N; ++j)
                                dmrow[j] += gpq * matrow[j] + gqp * marow[j];
                        }
                }
            }
            if (tp.needs_grad(Var{aid})) {
                DenseArray<R>& da = tp.grad_buffer(aid);
                std::vector<R> mg(N * P);  // M^T G[s]
                for (std::size_t s = 0; s < S; ++s) {
                    const R* G = g.ptr() + s * P * P;
                    R* dA = da.ptr() + s * N * N;
                    std::fill(mg.begin(), mg.end(), R(0));
                    for (std::size_t p = 0; p < P; ++p)
                        for (std::size_t i = 0; i < N; ++i) {
                            const R coef = mv2[p * N + i];
                            if (coef == R(0)) continue;
                            const R* grow = G + p * P;
                            R* mgrow = mg.data() + i * P;
                            for (std::size_t q = 0; q < P; ++q) mgrow[q] += coef * grow[q];
                        }
                    for (std::size_t i = 0; i < N; ++i)
                        for (std::size_t j = 0; j < N; ++j) {
                            const R* mgrow = mg.data() + i * P;
                            R acc = 0;
                            for (std::size_t q = 0; q < P; ++q)
                                acc += mgrow[q] * mv2[q * N + j];
                            dA[i * N + j] += acc;
                        }
                }
            }
        });
}

// Contracts the pooling convolution's kernel axis against the learnable
// vector: W[P,N,1,K] . V[1,K] -> M[P,N].
template <typename R>
Var contract_kernel(Tape<R>& t, Var w, Var v) {
    const DenseArray<R>& wv = t.value(w);
    const DenseArray<R>& vv = t.value(v);
    if (wv.rank() != 4 || wv.dim(2) != 1 || vv.rank() != 2 || vv.dim(0) != 1 ||
        vv.dim(1) != wv.dim(3)) {
        throw_shape("contract_kernel: expected W[P,N,1,K], V[1,K]; got " + shape_str(wv.shape) +
                    ", " + shape_str(vv.shape));
    }
    const std::size_t P = wv.dim(0), N = wv.dim(1), K = wv.dim(3);
    DenseArray<R> out(Shape{P, N});
    for (std::size_t p = 0; p < P; ++p)
        for (std::size_t n = 0; n < N; ++n) {
            const R* wrow = wv.ptr() + (p * N + n) * K;
            R acc = 0;
            for (std::size_t k = 0; k < K; ++k) acc += wrow[k] * vv[k];
            out[p * N + n] = acc;
        }
    const int wid = w.id, vid = v.id;
    return t.record(std::move(out), {w, v},
                    [wid, vid, P, N, K](Tape<R>& tp, const DenseArray<R>& g) {
                        const DenseArray<R>& wv2 = tp.value(Var{wid});
                        const DenseArray<R>& vv2 = tp.value(Var{vid});
                        if (tp.needs_grad(Var{wid})) {
                            DenseArray<R>& dw = tp.grad_buffer(wid);
                            for (std::size_t p = 0; p < P; ++p)
                                for (std::size_t n = 0; n < N; ++n) {
                                    const R gv = g[p * N + n];
                                    R* dwrow = dw.ptr() + (p * N + n) * K;
                                    for (std::size_t k = 0; k < K; ++k) dwrow[k] += gv * vv2[k];
                                }
                        }
                        if (tp.needs_grad(Var{vid})) {
                            DenseArray<R>& dv = tp.grad_buffer(vid);
                            for (std::size_t p = 0; p < P; ++p)
                                for (std::size_t n = 0; n < N; ++n) {
                                    const R gv = g[p * N + n];
                                    const R* wrow = wv2.ptr() + (p * N + n) * K;
                                    for (std::size_t k = 0; k < K; ++k) dv[k] += gv * wrow[k];
                                }
                        }
                    });
}

// Applies each slot's adjacency to that slot's node features:
// out[b,v,s,:,:] = sum_u A[s,v,u] * x[b,u,s,:,:].
template <typename R>
Var graph_apply(Tape<R>& t, Var a, Var x) {
    const DenseArray<R>& av = t.value(a);
    const DenseArray<R>& xv = t.value(x);
    if (av.rank() != 3 || xv.rank() != 5 || av.dim(1) != av.dim(2)) {
        throw_shape("graph_apply: expected A[S,N,N], x[B,N,S,C,T]; got " + shape_str(av.shape) +
                    ", " + shape_str(xv.shape));
    }
    const std::size_t S = av.dim(0), N = av.dim(1);
    const std::size_t B = xv.dim(0), C = xv.dim(3), T = xv.dim(4);
    if (xv.dim(1) != N || xv.dim(2) != S) {
        throw_shape("graph_apply: node/slot mismatch between " + shape_str(av.shape) + " and " +
                    shape_str(xv.shape));
    }
    const std::size_t CT = C * T;
    DenseArray<R> out(xv.shape);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t s = 0; s < S; ++s) {
            const R* A = av.ptr() + s * N * N;
            for (std::size_t v = 0; v < N; ++v) {
                R* oblk = out.ptr() + ((b * N + v) * S + s) * CT;
                for (std::size_t u = 0; u < N; ++u) {
                    const R coef = A[v * N + u];
                    if (coef == R(0)) continue;
                    const R* xblk = xv.ptr() + ((b * N + u) * S + s) * CT;
                    for (std::size_t i = 0; i < CT; ++i) oblk[i] += coef * xblk[i];
                }
            }
        }
    const int aid = a.id, xid = x.id;
    return t.record(
        std::move(out), {a, x},
        [aid, xid, S, N, B, CT](Tape<R>& tp, const DenseArray<R>& g) {
            const DenseArray<R>& av2 = tp.value(Var{aid});
            const DenseArray<R>& xv2 = tp.value(Var{xid});
            if (tp.needs_grad(Var{aid})) {
                DenseArray<R>& da = tp.grad_buffer(aid);
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t s = 0; s < S; ++s) {
                        R* dA = da.ptr() + s * N * N;
                        for (std::size_t v = 0; v < N; ++v) {
                            const R* gblk = g.ptr() + ((b * N + v) * S + s) * CT;
                            for (std::size_t u = 0; u < N; ++u) {
                                const R* xblk = xv2.ptr() + ((b * N + u) * S + s) * CT;
                                R acc = 0;
                                for (std::size_t i = 0; i < CT; ++i) acc += gblk[i] * xblk[i];
                                dA[v * N + u] += acc;
                            }
                        }
                    }
            }
            if (tp.needs_grad(Var{xid})) {
                DenseArray<R>& dx = tp.grad_buffer(xid);
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t s = 0; s < S; ++s) {
                        const R* A = av2.ptr() + s * N * N;
                        for (std::size_t u = 0; u < N; ++u) {
                            R* dxblk = dx.ptr() + ((b * N + u) * S + s) * CT;
                            for (std::size_t v = 0; v < N; ++v) {
                                const R coef = A[v * N + u];
                                if (coef == R(0)) continue;
                                const R* gblk = g.ptr() + ((b * N + v) * S + s) * CT;
                                for (std::size_t i = 0; i < CT; ++i) dxblk[i] += coef * gblk[i];
                            }
                        }
                    }
            }
        });
}

// Shifts features one slot forward: out slot s holds input slot s-1, slot 0
// is zero. Realizes the directed previous-slot edge when added to the input.
template <typename R>
Var slot_prev(Tape<R>& t, Var x) {
    const DenseArray<R>& xv = t.value(x);
    if (xv.rank() != 5) throw_shape("slot_prev: expected [B,N,S,C,T], got " + shape_str(xv.shape));
    const std::size_t B = xv.dim(0), N = xv.dim(1), S = xv.dim(2);
    const std::size_t CT = xv.dim(3) * xv.dim(4);
    DenseArray<R> out(xv.shape, R(0));
    for (std::size_t bn = 0; bn < B * N; ++bn)
        for (std::size_t s = 1; s < S; ++s) {
            const R* src = xv.ptr() + (bn * S + s - 1) * CT;
            R* dst = out.ptr() + (bn * S + s) * CT;
            std::copy(src, src + CT, dst);
        }
    const int xid = x.id;
    return t.record(std::move(out), {x},
                    [xid, B, N, S, CT](Tape<R>& tp, const DenseArray<R>& g) {
                        DenseArray<R>& dx = tp.grad_buffer(xid);
                        for (std::size_t bn = 0; bn < B * N; ++bn)
                            for (std::size_t s = 1; s < S; ++s) {
                                const R* gsrc = g.ptr() + (bn * S + s) * CT;
                                R* ddst = dx.ptr() + (bn * S + s - 1) * CT;
                                for (std::size_t i = 0; i < CT; ++i) ddst[i] += gsrc[i];
                            }
                    });
}

// Carves the time axis into slots: x[B,N,C,L] -> [B,N,S,C,T] where T is the
// longest slot; shorter slots are right-padded with zeros.
template <typename R>
Var slot_split(Tape<R>& t, Var x, const SlotPartition& part) {
    const DenseArray<R>& xv = t.value(x);
    if (xv.rank() != 4) throw_shape("slot_split: expected [B,N,C,L], got " + shape_str(xv.shape));
    const std::size_t B = xv.dim(0), N = xv.dim(1), C = xv.dim(2), L = xv.dim(3);
    if (part.length() != L) {
        throw_shape("slot_split: partition covers " + std::to_string(part.length()) +
                    " but length is " + std::to_string(L));
    }
    const std::size_t S = part.slots, T = part.max_slot_len();
    DenseArray<R> out(Shape{B, N, S, C, T}, R(0));
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t s = 0; s < S; ++s) {
                const std::size_t off = part.boundaries[s], len = part.slot_len(s);
                for (std::size_t c = 0; c < C; ++c) {
                    const R* src = xv.ptr() + ((b * N + n) * C + c) * L + off;
                    R* dst = out.ptr() + (((b * N + n) * S + s) * C + c) * T;
                    std::copy(src, src + len, dst);
                }
            }
    const int xid = x.id;
    const std::vector<std::size_t> bounds = part.boundaries;
    return t.record(std::move(out), {x},
                    [xid, bounds, B, N, C, L, S, T](Tape<R>& tp, const DenseArray<R>& g) {
                        DenseArray<R>& dx = tp.grad_buffer(xid);
                        for (std::size_t b = 0; b < B; ++b)
                            for (std::size_t n = 0; n < N; ++n)
                                for (std::size_t s = 0; s < S; ++s) {
                                    const std::size_t off = bounds[s];
                                    const std::size_t len = bounds[s + 1] - bounds[s];
                                    for (std::size_t c = 0; c < C; ++c) {
                                        const R* gsrc =
                                            g.ptr() + (((b * N + n) * S + s) * C + c) * T;
                                        R* ddst = dx.ptr() + ((b * N + n) * C + c) * L + off;
                                        for (std::size_t i = 0; i < len; ++i) ddst[i] += gsrc[i];
                                    }
                                }
                    });
}

// Mean over nodes, slots, and valid within-slot positions: [B,N,S,C,T] -> [B,C].
template <typename R>
Var masked_mean(Tape<R>& t, Var x, const SlotMask& mask) {
    const DenseArray<R>& xv = t.value(x);
    if (xv.rank() != 5) throw_shape("masked_mean: expected [B,N,S,C,T], got " + shape_str(xv.shape));
    const std::size_t B = xv.dim(0), N = xv.dim(1), S = xv.dim(2), C = xv.dim(3), T = xv.dim(4);
    if (mask.slots != S || mask.tau != T) {
        throw_shape("masked_mean: mask (" + std::to_string(mask.slots) + "," +
                    std::to_string(mask.tau) + ") does not match tensor " + shape_str(xv.shape));
    }
    const std::size_t total = N * mask.total_valid();
    if (total == 0) throw_contract("masked_mean: mask leaves no valid positions");
    const R inv = R(1) / static_cast<R>(total);
    DenseArray<R> out(Shape{B, C}, R(0));
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t s = 0; s < S; ++s) {
                const std::size_t len = mask.valid[s];
                for (std::size_t c = 0; c < C; ++c) {
                    const R* row = xv.ptr() + (((b * N + n) * S + s) * C + c) * T;
                    R acc = 0;
                    for (std::size_t i = 0; i < len; ++i) acc += row[i];
                    out[b * C + c] += acc * inv;
                }
            }
    const int xid = x.id;
    const std::vector<std::size_t> valid = mask.valid;
    return t.record(std::move(out), {x},
                    [xid, valid, inv, B, N, S, C, T](Tape<R>& tp, const DenseArray<R>& g) {
                        DenseArray<R>& dx = tp.grad_buffer(xid);
                        for (std::size_t b = 0; b < B; ++b)
                            for (std::size_t n = 0; n < N; ++n)
                                for (std::size_t s = 0; s < S; ++s) {
                                    const std::size_t len = valid[s];
                                    for (std::size_t c = 0; c < C; ++c) {
                                        const R gv = g[b * C + c] * inv;
                                        R* drow =
                                            dx.ptr() + (((b * N + n) * S + s) * C + c) * T;
                                        for (std::size_t i = 0; i < len; ++i) drow[i] += gv;
                                    }
                                }
                    });
}

// Mean over nodes and the full time axis: [B,N,C,L] -> [B,C].
template <typename R>
Var mean_nodes_time(Tape<R>& t, Var x) {
    const DenseArray<R>& xv = t.value(x);
    if (xv.rank() != 4) throw_shape("mean_nodes_time: expected [B,N,C,L], got " +
                                    shape_str(xv.shape));
    const std::size_t B = xv.dim(0), N = xv.dim(1), C = xv.dim(2), L = xv.dim(3);
    const R inv = R(1) / static_cast<R>(N * L);
    DenseArray<R> out(Shape{B, C}, R(0));
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c) {
                const R* row = xv.ptr() + ((b * N + n) * C + c) * L;
                R acc = 0;
                for (std::size_t i = 0; i < L; ++i) acc += row[i];
                out[b * C + c] += acc * inv;
            }
    const int xid = x.id;
    return t.record(std::move(out), {x},
                    [xid, inv, B, N, C, L](Tape<R>& tp, const DenseArray<R>& g) {
                        DenseArray<R>& dx = tp.grad_buffer(xid);
                        for (std::size_t b = 0; b < B; ++b)
                            for (std::size_t n = 0; n < N; ++n)
                                for (std::size_t c = 0; c < C; ++c) {
                                    const R gv = g[b * C + c] * inv;
                                    R* drow = dx.ptr() + ((b * N + n) * C + c) * L;
                                    for (std::size_t i = 0; i < L; ++i) drow[i] += gv;
                                }
                    });
}

// Linear map over the channel axis of slot features:
// x[B,N,S,Cin,T], w[Cout,Cin], b[Cout] -> [B,N,S,Cout,T].
template <typename R>
Var channel_linear(Tape<R>& t, Var x, Var w, Var bias) {
    const DenseArray<R>& xv = t.value(x);
    const DenseArray<R>& wv = t.value(w);
    const DenseArray<R>& bv = t.value(bias);
    if (xv.rank() != 5 || wv.rank() != 2 || bv.rank() != 1 || wv.dim(1) != xv.dim(3) ||
        bv.dim(0) != wv.dim(0)) {
        throw_shape("channel_linear: expected x[B,N,S,Cin,T], w[Cout,Cin], b[Cout]; got " +
                    shape_str(xv.shape) + ", " + shape_str(wv.shape) + ", " + shape_str(bv.shape));
    }
    const std::size_t outer = xv.dim(0) * xv.dim(1) * xv.dim(2);
    const std::size_t Ci = xv.dim(3), T = xv.dim(4), Co = wv.dim(0);
    // GEMM-shaped contraction; the reduced axis runs in blocks of four so a
    // pass over the short time axis retires four rows at once.
    DenseArray<R> out(Shape{xv.dim(0), xv.dim(1), xv.dim(2), Co, T});
    const std::size_t c4 = Ci - Ci % 4;
    for (std::size_t u = 0; u < outer; ++u) {
        const R* xblk = xv.ptr() + u * Ci * T;
        R* oblk = out.ptr() + u * Co * T;
        for (std::size_t o = 0; o < Co; ++o) {
            R* __restrict__ orow = oblk + o * T;
            const R bval = bv[o];
            for (std::size_t i = 0; i < T; ++i) orow[i] = bval;
            const R* wrow = wv.ptr() + o * Ci;
            std::size_t c = 0;
            for (; c < c4; c += 4) {
                const R w0 = wrow[c], w1 = wrow[c + 1], w2 = wrow[c + 2], w3 = wrow[c + 3];
                const R* __restrict__ x0 = xblk + c * T;
                const R* __restrict__ x1 = x0 + T;
                const R* __restrict__ x2 = x1 + T;
                const R* __restrict__ x3 = x2 + T;
                for (std::size_t i = 0; i < T; ++i)
                    orow[i] += w0 * x0[i] + w1 * x1[i] + w2 * x2[i] + w3 * x3[i];
            }
            for (; c < Ci; ++c) {
                const R coef = wrow[c];
                const R* __restrict__ xrow = xblk + c * T;
                for (std::size_t i = 0; i < T; ++i) orow[i] += coef * xrow[i];
            }
        }
    }
    const int xid = x.id, wid = w.id, bid = bias.id;
    return t.record(
        std::move(out), {x, w, bias},
        [xid, wid, bid, outer, Ci, Co, T](Tape<R>& tp, const DenseArray<R>& g) {
            const DenseArray<R>& xv2 = tp.value(Var{xid});
            const DenseArray<R>& wv2 = tp.value(Var{wid});
            const std::size_t o4 = Co - Co % 4;
            if (tp.needs_grad(Var{xid})) {
                DenseArray<R>& dx = tp.grad_buffer(xid);
                for (std::size_t u = 0; u < outer; ++u) {
                    const R* gblk = g.ptr() + u * Co * T;
                    R* dxblk = dx.ptr() + u * Ci * T;
                    for (std::size_t c = 0; c < Ci; ++c) {
                        R* __restrict__ dxrow = dxblk + c * T;
                        std::size_t o = 0;
                        for (; o < o4; o += 4) {
                            const R w0 = wv2[o * Ci + c], w1 = wv2[(o + 1) * Ci + c];
                            const R w2 = wv2[(o + 2) * Ci + c], w3 = wv2[(o + 3) * Ci + c];
                            const R* __restrict__ g0 = gblk + o * T;
                            const R* __restrict__ g1 = g0 + T;
                            const R* __restrict__ g2 = g1 + T;
                            const R* __restrict__ g3 = g2 + T;
                            for (std::size_t i = 0; i < T; ++i)
                                dxrow[i] += w0 * g0[i] + w1 * g1[i] + w2 * g2[i] + w3 * g3[i];
                        }
                        for (; o < Co; ++o) {
                            const R coef = wv2[o * Ci + c];
                            const R* __restrict__ grow = gblk + o * T;
                            for (std::size_t i = 0; i < T; ++i) dxrow[i] += coef * grow[i];
                        }
                    }
                }
            }
            if (tp.needs_grad(Var{wid})) {
                DenseArray<R>& dw = tp.grad_buffer(wid);
                const std::size_t ci4 = Ci - Ci % 4;
                for (std::size_t u = 0; u < outer; ++u) {
                    const R* gblk = g.ptr() + u * Co * T;
                    const R* xblk = xv2.ptr() + u * Ci * T;
                    for (std::size_t o = 0; o < Co; ++o) {
                        const R* __restrict__ grow = gblk + o * T;
                        R* dwrow = dw.ptr() + o * Ci;
                        std::size_t c = 0;
                        for (; c < ci4; c += 4) {
                            const R* __restrict__ x0 = xblk + c * T;
                            const R* __restrict__ x1 = x0 + T;
                            const R* __restrict__ x2 = x1 + T;
                            const R* __restrict__ x3 = x2 + T;
                            R a0 = 0, a1 = 0, a2 = 0, a3 = 0;
                            for (std::size_t i = 0; i < T; ++i) {
                                a0 += grow[i] * x0[i];
                                a1 += grow[i] * x1[i];
                                a2 += grow[i] * x2[i];
                                a3 += grow[i] * x3[i];
                            }
                            dwrow[c] += a0;
                            dwrow[c + 1] += a1;
                            dwrow[c + 2] += a2;
                            dwrow[c + 3] += a3;
                        }
                        for (; c < Ci; ++c) {
                            const R* __restrict__ xrow = xblk + c * T;
                            R acc = 0;
                            for (std::size_t i = 0; i < T; ++i) acc += grow[i] * xrow[i];
                            dwrow[c] += acc;
                        }
                    }
                }
            }
            if (tp.needs_grad(Var{bid})) {
                DenseArray<R>& db = tp.grad_buffer(bid);
                for (std::size_t u = 0; u < outer; ++u) {
                    const R* gblk = g.ptr() + u * Co * T;
                    for (std::size_t o = 0; o < Co; ++o) {
                        const R* grow = gblk + o * T;
                        R acc = 0;
                        for (std::size_t i = 0; i < T; ++i) acc += grow[i];
                        db[o] += acc;
                    }
                }
            }
        });
}

// Per-channel batch statistic normalization with learnable affine. The
// channel axis is given by index; statistics reduce over all other axes.
// Training mode uses batch statistics and updates the running buffers;
// evaluation mode uses the (frozen) running buffers.
template <typename R>
Var batchnorm_channel(Tape<R>& t, Var x, Var gamma, Var beta, std::size_t channel_axis,
                      DenseArray<R>& running_mean, DenseArray<R>& running_var, bool training,
                      double momentum = 0.1, double eps = 1e-5) {
    const DenseArray<R>& xv = t.value(x);
    if (channel_axis >= xv.rank()) throw_shape("batchnorm_channel: axis out of range");
    const std::size_t C = xv.dim(channel_axis);
    const DenseArray<R>& gv = t.value(gamma);
    const DenseArray<R>& bv = t.value(beta);
    if (gv.rank() != 1 || gv.dim(0) != C || bv.rank() != 1 || bv.dim(0) != C ||
        running_mean.numel() != C || running_var.numel() != C) {
        throw_shape("batchnorm_channel: affine/running buffers must be [C] with C=" +
                    std::to_string(C));
    }
    std::size_t stride = 1;
    for (std::size_t i = channel_axis + 1; i < xv.rank(); ++i) stride *= xv.dim(i);
    const std::size_t n_total = xv.numel();
    const std::size_t n_red = n_total / C;

    std::vector<R> mean(C), istd(C);
    if (training) {
        std::vector<double> sums(C, 0.0), sqs(C, 0.0);
        for (std::size_t i = 0; i < n_total; ++i) {
            sums[(i / stride) % C] += static_cast<double>(xv[i]);
        }
        for (std::size_t c = 0; c < C; ++c) sums[c] /= static_cast<double>(n_red);
        for (std::size_t i = 0; i < n_total; ++i) {
            const std::size_t c = (i / stride) % C;
            const double d = static_cast<double>(xv[i]) - sums[c];
            sqs[c] += d * d;
        }
        for (std::size_t c = 0; c < C; ++c) {
            const double m = sums[c];
            const double var = sqs[c] / static_cast<double>(n_red);
            mean[c] = static_cast<R>(m);
            istd[c] = static_cast<R>(1.0 / std::sqrt(var + eps));
            running_mean[c] = static_cast<R>((1.0 - momentum) *
                                             static_cast<double>(running_mean[c]) + momentum * m);
            running_var[c] = static_cast<R>((1.0 - momentum) *
                                            static_cast<double>(running_var[c]) + momentum * var);
        }
    } else {
        for (std::size_t c = 0; c < C; ++c) {
            mean[c] = running_mean[c];
            istd[c] = static_cast<R>(1.0 / std::sqrt(static_cast<double>(running_var[c]) + eps));
        }
    }

    DenseArray<R> out(xv.shape);
    for (std::size_t i = 0; i < n_total; ++i) {
        const std::size_t c = (i / stride) % C;
        out[i] = gv[c] * (xv[i] - mean[c]) * istd[c] + bv[c];
    }
    const int xid = x.id, gid = gamma.id, bid = beta.id;
    return t.record(
        std::move(out), {x, gamma, beta},
        [xid, gid, bid, mean, istd, stride, C, n_total, n_red, training](
            Tape<R>& tp, const DenseArray<R>& g) {
            const DenseArray<R>& xv2 = tp.value(Var{xid});
            const DenseArray<R>& gv2 = tp.value(Var{gid});
            std::vector<R> sum_g(C, R(0)), sum_gx(C, R(0));
            for (std::size_t i = 0; i < n_total; ++i) {
                const std::size_t c = (i / stride) % C;
                const R xh = (xv2[i] - mean[c]) * istd[c];
                sum_g[c] += g[i];
                sum_gx[c] += g[i] * xh;
            }
            if (tp.needs_grad(Var{gid})) {
                DenseArray<R>& dg = tp.grad_buffer(gid);
                for (std::size_t c = 0; c < C; ++c) dg[c] += sum_gx[c];
            }
            if (tp.needs_grad(Var{bid})) {
                DenseArray<R>& db = tp.grad_buffer(bid);
                for (std::size_t c = 0; c < C; ++c) db[c] += sum_g[c];
            }
            if (tp.needs_grad(Var{xid})) {
                DenseArray<R>& dx = tp.grad_buffer(xid);
                if (training) {
                    const R invn = R(1) / static_cast<R>(n_red);
                    for (std::size_t i = 0; i < n_total; ++i) {
                        const std::size_t c = (i / stride) % C;
                        const R xh = (xv2[i] - mean[c]) * istd[c];
                        dx[i] += gv2[c] * istd[c] *
                                 (g[i] - sum_g[c] * invn - xh * sum_gx[c] * invn);
                    }
                } else {
                    for (std::size_t i = 0; i < n_total; ++i) {
                        const std::size_t c = (i / stride) % C;
                        dx[i] += g[i] * gv2[c] * istd[c];
                    }
                }
            }
        });
}

}  // namespace ops
}  // namespace todynet
