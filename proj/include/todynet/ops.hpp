#pragma once

// Differentiable kernels recorded on the tape. Layout conventions:
//   matrix            [rows, cols]
//   batched signal    [batch, channels, length]
//   batched image     [batch, channels, height, width]
// Adjoints accumulate; a kernel skips an input's adjoint when that input
// does not require a gradient.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "todynet/array.hpp"
#include "todynet/tape.hpp"

namespace todynet {
namespace ops {

template <typename R>
Var add(Tape<R>& t, Var a, Var b) {
    const DenseArray<R>& av = t.value(a);
    const DenseArray<R>& bv = t.value(b);
    require_same_shape(av, bv, "add");
    DenseArray<R> out(av.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] + bv[i];
    const int aid = a.id, bid = b.id;
    return t.record(std::move(out), {a, b}, [aid, bid](Tape<R>& tp, const DenseArray<R>& g) {
        if (tp.needs_grad(Var{aid})) tp.add_grad(aid, g);
        if (tp.needs_grad(Var{bid})) tp.add_grad(bid, g);
    });
}

template <typename R>
Var mul(Tape<R>& t, Var a, Var b) {
    const DenseArray<R>& av = t.value(a);
    const DenseArray<R>& bv = t.value(b);
    require_same_shape(av, bv, "mul");
    DenseArray<R> out(av.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] * bv[i];
    const int aid = a.id, bid = b.id;
    return t.record(std::move(out), {a, b}, [aid, bid](Tape<R>& tp, const DenseArray<R>& g) {
        if (tp.needs_grad(Var{aid})) {
            const DenseArray<R>& bv2 = tp.value(Var{bid});
            DenseArray<R>& da = tp.grad_buffer(aid);
            for (std::size_t i = 0; i < g.numel(); ++i) da[i] += g[i] * bv2[i];
        }
        if (tp.needs_grad(Var{bid})) {
            const DenseArray<R>& av2 = tp.value(Var{aid});
            DenseArray<R>& db = tp.grad_buffer(bid);
            for (std::size_t i = 0; i < g.numel(); ++i) db[i] += g[i] * av2[i];
        }
    });
}

template <typename R>
Var scale(Tape<R>& t, Var a, R s) {
    const DenseArray<R>& av = t.value(a);
    DenseArray<R> out(av.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] * s;
    const int aid = a.id;
    return t.record(std::move(out), {a}, [aid, s](Tape<R>& tp, const DenseArray<R>& g) {
        DenseArray<R>& da = tp.grad_buffer(aid);
        for (std::size_t i = 0; i < g.numel(); ++i) da[i] += g[i] * s;
    });
}

template <typename R>
Var add_const(Tape<R>& t, Var a, R c) {
    const DenseArray<R>& av = t.value(a);
    DenseArray<R> out(av.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] + c;
    const int aid = a.id;
    return t.record(std::move(out), {a}, [aid](Tape<R>& tp, const DenseArray<R>& g) {
        tp.add_grad(aid, g);
    });
}

// Multiplies a tensor by a one-element tensor (used for learnable scalars).
template <typename R>
Var scale_by(Tape<R>& t, Var s, Var a) {
    const DenseArray<R>& sv = t.value(s);
    if (sv.numel() != 1) throw_shape("scale_by: scale operand must have one element");
    const DenseArray<R>& av = t.value(a);
    DenseArray<R> out(av.shape);
    const R sval = sv[0];
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] * sval;
    const int sid = s.id, aid = a.id;
    return t.record(std::move(out), {s, a}, [sid, aid](Tape<R>& tp, const DenseArray<R>& g) {
        if (tp.needs_grad(Var{aid})) {
            const R sval2 = tp.value(Var{sid})[0];
            DenseArray<R>& da = tp.grad_buffer(aid);
            for (std::size_t i = 0; i < g.numel(); ++i) da[i] += g[i] * sval2;
        }
        if (tp.needs_grad(Var{sid})) {
            const DenseArray<R>& av2 = tp.value(Var{aid});
            R acc = 0;
            for (std::size_t i = 0; i < g.numel(); ++i) acc += g[i] * av2[i];
            tp.grad_buffer(sid)[0] += acc;
        }
    });
}

// Rectifier; the subgradient at exactly 0 is 0.
template <typename R>
Var relu(Tape<R>& t, Var a) {
    const DenseArray<R>& av = t.value(a);
    DenseArray<R> out(av.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] > R(0) ? av[i] : R(0);
    const int aid = a.id;
    return t.record(std::move(out), {a}, [aid](Tape<R>& tp, const DenseArray<R>& g) {
        const DenseArray<R>& av2 = tp.value(Var{aid});
        DenseArray<R>& da = tp.grad_buffer(aid);
        for (std::size_t i = 0; i < g.numel(); ++i) {
            if (av2[i] > R(0)) da[i] += g[i];
        }
    });
}

template <typename R>
Var sum(Tape<R>& t, Var a) {
    const DenseArray<R>& av = t.value(a);
    R acc = 0;
    for (std::size_t i = 0; i < av.numel(); ++i) acc += av[i];
    const int aid = a.id;
    return t.record(DenseArray<R>::scalar(acc), {a},
                    [aid](Tape<R>& tp, const DenseArray<R>& g) {
                        DenseArray<R>& da = tp.grad_buffer(aid);
                        for (std::size_t i = 0; i < da.numel(); ++i) da[i] += g[0];
                    });
}

template <typename R>
Var matmul(Tape<R>& t, Var a, Var b) {
    const DenseArray<R>& av = t.value(a);
    const DenseArray<R>& bv = t.value(b);
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
        throw_shape("matmul: incompatible shapes " + shape_str(av.shape) + " vs " +
                    shape_str(bv.shape));
    }
    const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    DenseArray<R> out(Shape{m, n});
    for (std::size_t i = 0; i < m; ++i) {
        R* orow = out.ptr() + i * n;
        const R* arow = av.ptr() + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const R coef = arow[p];
            if (coef == R(0)) continue;
            const R* brow = bv.ptr() + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += coef * brow[j];
        }
    }
    const int aid = a.id, bid = b.id;
    return t.record(std::move(out), {a, b}, [aid, bid, m, k, n](Tape<R>& tp,
                                                                const DenseArray<R>& g) {
        const DenseArray<R>& av2 = tp.value(Var{aid});
        const DenseArray<R>& bv2 = tp.value(Var{bid});
        if (tp.needs_grad(Var{aid})) {
            DenseArray<R>& da = tp.grad_buffer(aid);
            for (std::size_t i = 0; i < m; ++i) {
                const R* grow = g.ptr() + i * n;
                R* darow = da.ptr() + i * k;
                for (std::size_t p = 0; p < k; ++p) {
                    const R* brow = bv2.ptr() + p * n;
                    R acc = 0;
                    for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                    darow[p] += acc;
                }
            }
        }
        if (tp.needs_grad(Var{bid})) {
            DenseArray<R>& db = tp.grad_buffer(bid);
            for (std::size_t i = 0; i < m; ++i) {
                const R* grow = g.ptr() + i * n;
                const R* arow = av2.ptr() + i * k;
                for (std::size_t p = 0; p < k; ++p) {
                    const R coef = arow[p];
                    if (coef == R(0)) continue;
                    R* dbrow = db.ptr() + p * n;
                    for (std::size_t j = 0; j < n; ++j) dbrow[j] += coef * grow[j];
                }
            }
        }
    });
}

// Adds a bias row vector [C] to every row of [B, C].
template <typename R>
Var row_bias_add(Tape<R>& t, Var m, Var bias) {
    const DenseArray<R>& mv = t.value(m);
    const DenseArray<R>& bv = t.value(bias);
    if (mv.rank() != 2 || bv.rank() != 1 || mv.dim(1) != bv.dim(0)) {
        throw_shape("row_bias_add: incompatible shapes " + shape_str(mv.shape) + " vs " +
                    shape_str(bv.shape));
    }
    const std::size_t rows = mv.dim(0), cols = mv.dim(1);
    DenseArray<R> out(mv.shape);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = mv[i * cols + j] + bv[j];
    const int mid = m.id, bid = bias.id;
    return t.record(std::move(out), {m, bias},
                    [mid, bid, rows, cols](Tape<R>& tp, const DenseArray<R>& g) {
                        if (tp.needs_grad(Var{mid})) tp.add_grad(mid, g);
                        if (tp.needs_grad(Var{bid})) {
                            DenseArray<R>& db = tp.grad_buffer(bid);
                            for (std::size_t i = 0; i < rows; ++i)
                                for (std::size_t j = 0; j < cols; ++j) db[j] += g[i * cols + j];
                        }
                    });
}

namespace detail {

template <typename R, std::size_t... I>
inline R stencil_taps(const R* __restrict__ x, const R* __restrict__ w,
                      std::index_sequence<I...>) {
    return ((w[I] * x[I]) + ...);
}

// One (output-row, input-row, kernel-row) contribution of a same-padded
// correlation: out[t] += sum_k w[k] * x[t + k - P]. The interior runs
// branch-free with the kernel unrolled at compile time.
template <typename R, int K>
inline void corr1d_row(R* __restrict__ out, const R* __restrict__ xrow,
                       const R* __restrict__ wrow, std::ptrdiff_t len) {
    constexpr std::ptrdiff_t P = K / 2;
    const std::ptrdiff_t lo = std::min<std::ptrdiff_t>(P, len);
    const std::ptrdiff_t hi = std::max<std::ptrdiff_t>(lo, len - P);
    for (std::ptrdiff_t tt = 0; tt < lo; ++tt) {
        R acc = 0;
        for (std::ptrdiff_t k = P - tt; k < K && tt + k - P < len; ++k)
            acc += wrow[k] * xrow[tt + k - P];
        out[tt] += acc;
    }
    for (std::ptrdiff_t tt = lo; tt < hi; ++tt) {
        out[tt] += stencil_taps(xrow + tt - P, wrow, std::make_index_sequence<K>{});
    }
    for (std::ptrdiff_t tt = hi; tt < len; ++tt) {
        R acc = 0;
        for (std::ptrdiff_t k = 0; k < K && tt + k - P < len; ++k) {
            if (tt + k - P >= 0) acc += wrow[k] * xrow[tt + k - P];
        }
        out[tt] += acc;
    }
}

template <typename R>
void corr1d_row_generic(R* __restrict__ out, const R* __restrict__ xrow,
                        const R* __restrict__ wrow, std::ptrdiff_t len, std::ptrdiff_t K) {
    const std::ptrdiff_t P = K / 2;
    for (std::ptrdiff_t tt = 0; tt < len; ++tt) {
        const std::ptrdiff_t k0 = std::max<std::ptrdiff_t>(0, P - tt);
        const std::ptrdiff_t k1 = std::min<std::ptrdiff_t>(K, len + P - tt);
        R acc = 0;
        for (std::ptrdiff_t k = k0; k < k1; ++k) acc += wrow[k] * xrow[tt + k - P];
        out[tt] += acc;
    }
}

template <typename R>
void corr1d_dispatch(R* out, const R* xrow, const R* wrow, std::ptrdiff_t len, std::ptrdiff_t K) {
    switch (K) {
        case 1: corr1d_row<R, 1>(out, xrow, wrow, len); break;
        case 3: corr1d_row<R, 3>(out, xrow, wrow, len); break;
        case 5: corr1d_row<R, 5>(out, xrow, wrow, len); break;
        case 7: corr1d_row<R, 7>(out, xrow, wrow, len); break;
        case 9: corr1d_row<R, 9>(out, xrow, wrow, len); break;
        case 11: corr1d_row<R, 11>(out, xrow, wrow, len); break;
        default: corr1d_row_generic(out, xrow, wrow, len, K); break;
    }
}

}  // namespace detail

// Same-length 1-D cross-correlation with zero padding (k-1)/2 on each side.
// x: [B, Cin, L], w: [Cout, Cin, K] with K odd, b: [Cout] -> [B, Cout, L].
template <typename R>
Var conv1d_same(Tape<R>& t, Var x, Var w, Var bias) {
    const DenseArray<R>& xv = t.value(x);
    const DenseArray<R>& wv = t.value(w);
    const DenseArray<R>& bv = t.value(bias);
    if (xv.rank() != 3 || wv.rank() != 3 || bv.rank() != 1) {
        throw_shape("conv1d_same: expected x[B,Cin,L], w[Cout,Cin,K], b[Cout]; got " +
                    shape_str(xv.shape) + ", " + shape_str(wv.shape) + ", " + shape_str(bv.shape));
    }
    const std::size_t B = xv.dim(0), Ci = xv.dim(1), L = xv.dim(2);
    const std::size_t Co = wv.dim(0), K = wv.dim(2);
    if (wv.dim(1) != Ci || bv.dim(0) != Co) {
        throw_shape("conv1d_same: channel mismatch " + shape_str(xv.shape) + " vs " +
                    shape_str(wv.shape));
    }
    if (K % 2 == 0) throw_config("conv1d_same: kernel size must be odd, got " + std::to_string(K));
    const std::ptrdiff_t P = static_cast<std::ptrdiff_t>(K / 2);
    const std::ptrdiff_t len = static_cast<std::ptrdiff_t>(L);

    DenseArray<R> out(Shape{B, Co, L});
    for (std::size_t n = 0; n < B; ++n) {
        for (std::size_t o = 0; o < Co; ++o) {
            R* orow = out.ptr() + (n * Co + o) * L;
            const R bval = bv[o];
            for (std::size_t tpos = 0; tpos < L; ++tpos) orow[tpos] = bval;
            for (std::size_t c = 0; c < Ci; ++c) {
                const R* xrow = xv.ptr() + (n * Ci + c) * L;
                const R* wrow = wv.ptr() + (o * Ci + c) * K;
                detail::corr1d_dispatch(orow, xrow, wrow, len, static_cast<std::ptrdiff_t>(K));
            }
        }
    }
    const int xid = x.id, wid = w.id, bid = bias.id;
    return t.record(
        std::move(out), {x, w, bias},
        [xid, wid, bid, B, Ci, Co, K, L, P, len](Tape<R>& tp, const DenseArray<R>& g) {
            const DenseArray<R>& xv2 = tp.value(Var{xid});
            const DenseArray<R>& wv2 = tp.value(Var{wid});
            if (tp.needs_grad(Var{xid})) {
                // dx is the correlation of g with the flipped kernel
                DenseArray<R>& dx = tp.grad_buffer(xid);
                R wflip[16];
                for (std::size_t n = 0; n < B; ++n) {
                    for (std::size_t c = 0; c < Ci; ++c) {
                        R* dxrow = dx.ptr() + (n * Ci + c) * L;
                        for (std::size_t o = 0; o < Co; ++o) {
                            const R* grow = g.ptr() + (n * Co + o) * L;
                            const R* wrow = wv2.ptr() + (o * Ci + c) * K;
                            if (K <= 16) {
                                for (std::size_t kk = 0; kk < K; ++kk)
                                    wflip[kk] = wrow[K - 1 - kk];
                                detail::corr1d_dispatch(dxrow, grow, wflip, len,
                                                        static_cast<std::ptrdiff_t>(K));
                            } else {
                                std::vector<R> wf(K);
                                for (std::size_t kk = 0; kk < K; ++kk) wf[kk] = wrow[K - 1 - kk];
                                detail::corr1d_dispatch(dxrow, grow, wf.data(), len,
                                                        static_cast<std::ptrdiff_t>(K));
                            }
                        }
                    }
                }
            }
            if (tp.needs_grad(Var{wid})) {
                DenseArray<R>& dw = tp.grad_buffer(wid);
                for (std::size_t n = 0; n < B; ++n) {
                    for (std::size_t o = 0; o < Co; ++o) {
                        const R* grow = g.ptr() + (n * Co + o) * L;
                        for (std::size_t c = 0; c < Ci; ++c) {
                            const R* xrow = xv2.ptr() + (n * Ci + c) * L;
                            R* dwrow = dw.ptr() + (o * Ci + c) * K;
                            for (std::size_t kk = 0; kk < K; ++kk) {
                                const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(kk) - P;
                                const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -off);
                                const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(len, len - off);
                                R acc = 0;
                                for (std::ptrdiff_t tt = lo; tt < hi; ++tt)
                                    acc += grow[tt] * xrow[tt + off];
                                dwrow[kk] += acc;
                            }
                        }
                    }
                }
            }
            if (tp.needs_grad(Var{bid})) {
                DenseArray<R>& db = tp.grad_buffer(bid);
                for (std::size_t n = 0; n < B; ++n)
                    for (std::size_t o = 0; o < Co; ++o) {
                        const R* grow = g.ptr() + (n * Co + o) * L;
                        R acc = 0;
                        for (std::size_t tt = 0; tt < L; ++tt) acc += grow[tt];
                        db[o] += acc;
                    }
            }
        });
}

// Valid (no padding) 2-D cross-correlation.
// x: [B, Cin, H, W], w: [Cout, Cin, KH, KW], b: [Cout] -> [B, Cout, H', W'].
template <typename R>
Var conv2d_valid(Tape<R>& t, Var x, Var w, Var bias) {
    const DenseArray<R>& xv = t.value(x);
    const DenseArray<R>& wv = t.value(w);
    const DenseArray<R>& bv = t.value(bias);
    if (xv.rank() != 4 || wv.rank() != 4 || bv.rank() != 1) {
        throw_shape("conv2d_valid: expected x[B,Cin,H,W], w[Cout,Cin,KH,KW], b[Cout]; got " +
                    shape_str(xv.shape) + ", " + shape_str(wv.shape) + ", " + shape_str(bv.shape));
    }
    const std::size_t B = xv.dim(0), Ci = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const std::size_t Co = wv.dim(0), KH = wv.dim(2), KW = wv.dim(3);
    if (wv.dim(1) != Ci || bv.dim(0) != Co) {
        throw_shape("conv2d_valid: channel mismatch " + shape_str(xv.shape) + " vs " +
                    shape_str(wv.shape));
    }
    if (KH > H || KW > W) {
        throw_shape("conv2d_valid: kernel " + shape_str(wv.shape) + " larger than input " +
                    shape_str(xv.shape));
    }
    const std::size_t OH = H - KH + 1, OW = W - KW + 1;

    DenseArray<R> out(Shape{B, Co, OH, OW});
    for (std::size_t n = 0; n < B; ++n) {
        for (std::size_t o = 0; o < Co; ++o) {
            R* oplane = out.ptr() + (n * Co + o) * OH * OW;
            const R bval = bv[o];
            for (std::size_t i = 0; i < OH * OW; ++i) oplane[i] = bval;
            for (std::size_t c = 0; c < Ci; ++c) {
                const R* xplane = xv.ptr() + (n * Ci + c) * H * W;
                const R* wplane = wv.ptr() + (o * Ci + c) * KH * KW;
                for (std::size_t p = 0; p < KH; ++p) {
                    for (std::size_t q = 0; q < KW; ++q) {
                        const R coef = wplane[p * KW + q];
                        if (coef == R(0)) continue;
                        for (std::size_t i = 0; i < OH; ++i) {
                            R* orow = oplane + i * OW;
                            const R* xrow = xplane + (i + p) * W + q;
                            for (std::size_t j = 0; j < OW; ++j) orow[j] += coef * xrow[j];
                        }
                    }
                }
            }
        }
    }
    const int xid = x.id, wid = w.id, bid = bias.id;
    return t.record(
        std::move(out), {x, w, bias},
        [xid, wid, bid, B, Ci, Co, H, W, KH, KW, OH, OW](Tape<R>& tp, const DenseArray<R>& g) {
            const DenseArray<R>& xv2 = tp.value(Var{xid});
            const DenseArray<R>& wv2 = tp.value(Var{wid});
            if (tp.needs_grad(Var{xid})) {
                DenseArray<R>& dx = tp.grad_buffer(xid);
                for (std::size_t n = 0; n < B; ++n)
                    for (std::size_t o = 0; o < Co; ++o) {
                        const R* gplane = g.ptr() + (n * Co + o) * OH * OW;
                        for (std::size_t c = 0; c < Ci; ++c) {
                            R* dxplane = dx.ptr() + (n * Ci + c) * H * W;
                            const R* wplane = wv2.ptr() + (o * Ci + c) * KH * KW;
                            for (std::size_t p = 0; p < KH; ++p)
                                for (std::size_t q = 0; q < KW; ++q) {
                                    const R coef = wplane[p * KW + q];
                                    if (coef == R(0)) continue;
                                    for (std::size_t i = 0; i < OH; ++i) {
                                        const R* grow = gplane + i * OW;
                                        R* dxrow = dxplane + (i + p) * W + q;
                                        for (std::size_t j = 0; j < OW; ++j)
                                            dxrow[j] += coef * grow[j];
                                    }
                                }
                        }
                    }
            }
            if (tp.needs_grad(Var{wid})) {
                DenseArray<R>& dw = tp.grad_buffer(wid);
                for (std::size_t n = 0; n < B; ++n)
                    for (std::size_t o = 0; o < Co; ++o) {
                        const R* gplane = g.ptr() + (n * Co + o) * OH * OW;
                        for (std::size_t c = 0; c < Ci; ++c) {
                            const R* xplane = xv2.ptr() + (n * Ci + c) * H * W;
                            R* dwplane = dw.ptr() + (o * Ci + c) * KH * KW;
                            for (std::size_t p = 0; p < KH; ++p)
                                for (std::size_t q = 0; q < KW; ++q) {
                                    R acc = 0;
                                    for (std::size_t i = 0; i < OH; ++i) {
                                        const R* grow = gplane + i * OW;
                                        const R* xrow = xplane + (i + p) * W + q;
                                        for (std::size_t j = 0; j < OW; ++j) acc += grow[j] * xrow[j];
                                    }
                                    dwplane[p * KW + q] += acc;
                                }
                        }
                    }
            }
            if (tp.needs_grad(Var{bid})) {
                DenseArray<R>& db = tp.grad_buffer(bid);
                for (std::size_t n = 0; n < B; ++n)
                    for (std::size_t o = 0; o < Co; ++o) {
                        const R* gplane = g.ptr() + (n * Co + o) * OH * OW;
                        R acc = 0;
                        for (std::size_t i = 0; i < OH * OW; ++i) acc += gplane[i];
                        db[o] += acc;
                    }
            }
        });
}

// Mean over the batch of -log softmax(logits)[label]; stabilized by max
// subtraction. logits: [B, C]; labels: class indices in [0, C).
template <typename R>
Var softmax_cross_entropy(Tape<R>& t, Var logits, const std::vector<int>& labels) {
    const DenseArray<R>& lv = t.value(logits);
    if (lv.rank() != 2) throw_shape("softmax_cross_entropy: logits must be [B,C], got " +
                                    shape_str(lv.shape));
    const std::size_t B = lv.dim(0), C = lv.dim(1);
    if (C < 2) throw_config("softmax_cross_entropy: need at least 2 classes, got " +
                            std::to_string(C));
    if (labels.size() != B) {
        throw_data("softmax_cross_entropy: got " + std::to_string(labels.size()) +
                   " labels for batch of " + std::to_string(B));
    }
    DenseArray<R> probs(Shape{B, C});
    double loss = 0;
    for (std::size_t i = 0; i < B; ++i) {
        const int y = labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= C) {
            throw_data("softmax_cross_entropy: label " + std::to_string(y) + " of sample " +
                       std::to_string(i) + " outside [0," + std::to_string(C) + ")");
        }
        const R* row = lv.ptr() + i * C;
        R mx = row[0];
        for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
        double denom = 0;
        for (std::size_t c = 0; c < C; ++c) denom += std::exp(static_cast<double>(row[c] - mx));
        const double logdenom = std::log(denom);
        for (std::size_t c = 0; c < C; ++c) {
            probs[i * C + c] =
                static_cast<R>(std::exp(static_cast<double>(row[c] - mx)) / denom);
        }
        loss += -(static_cast<double>(row[y] - mx) - logdenom);
    }
    loss /= static_cast<double>(B);
    const int lid = logits.id;
    return t.record(DenseArray<R>::scalar(static_cast<R>(loss)), {logits},
                    [lid, labels, probs, B, C](Tape<R>& tp, const DenseArray<R>& g) {
                        DenseArray<R>& dl = tp.grad_buffer(lid);
                        const R gs = g[0] / static_cast<R>(B);
                        for (std::size_t i = 0; i < B; ++i) {
                            for (std::size_t c = 0; c < C; ++c) {
                                R p = probs[i * C + c];
                                if (static_cast<std::size_t>(labels[i]) == c) p -= R(1);
                                dl[i * C + c] += gs * p;
                            }
                        }
                    });
}

template <typename R>
Var reshape(Tape<R>& t, Var a, Shape new_shape) {
    const DenseArray<R>& av = t.value(a);
    if (shape_numel(new_shape) != av.numel()) {
        throw_shape("reshape: cannot view " + shape_str(av.shape) + " as " +
                    shape_str(new_shape));
    }
    DenseArray<R> out;
    out.shape = new_shape;
    out.data = av.data;
    const int aid = a.id;
    return t.record(std::move(out), {a}, [aid](Tape<R>& tp, const DenseArray<R>& g) {
        DenseArray<R>& da = tp.grad_buffer(aid);
        for (std::size_t i = 0; i < g.numel(); ++i) da[i] += g[i];
    });
}

// General axis permutation: out axis i is input axis perm[i].
template <typename R>
Var permute(Tape<R>& t, Var a, std::vector<std::size_t> perm) {
    const DenseArray<R>& av = t.value(a);
    const std::size_t rank = av.rank();
    if (perm.size() != rank) throw_shape("permute: rank mismatch");
    std::vector<bool> seen(rank, false);
    for (std::size_t p : perm) {
        if (p >= rank || seen[p]) throw_shape("permute: invalid permutation");
        seen[p] = true;
    }
    Shape out_shape(rank);
    for (std::size_t i = 0; i < rank; ++i) out_shape[i] = av.shape[perm[i]];

    std::vector<std::size_t> in_strides(rank, 1), out_strides(rank, 1);
    for (std::size_t i = rank - 1; i-- > 0;) in_strides[i] = in_strides[i + 1] * av.shape[i + 1];
    for (std::size_t i = rank - 1; i-- > 0;) out_strides[i] = out_strides[i + 1] * out_shape[i + 1];

    // For each output position, the source linear index.
    std::vector<std::size_t> src(av.numel());
    std::vector<std::size_t> idx(rank, 0);
    for (std::size_t o = 0; o < av.numel(); ++o) {
        std::size_t s = 0;
        for (std::size_t i = 0; i < rank; ++i) s += idx[i] * in_strides[perm[i]];
        src[o] = s;
        for (std::size_t i = rank; i-- > 0;) {
            if (++idx[i] < out_shape[i]) break;
            idx[i] = 0;
        }
    }
    DenseArray<R> out(out_shape);
    for (std::size_t o = 0; o < out.numel(); ++o) out[o] = av[src[o]];
    const int aid = a.id;
    return t.record(std::move(out), {a},
                    [aid, src](Tape<R>& tp, const DenseArray<R>& g) {
                        DenseArray<R>& da = tp.grad_buffer(aid);
                        for (std::size_t o = 0; o < g.numel(); ++o) da[src[o]] += g[o];
                    });
}

// Concatenates [B, Ci] blocks along the column axis.
template <typename R>
Var concat_cols(Tape<R>& t, const std::vector<Var>& parts) {
    if (parts.empty()) throw_shape("concat_cols: no inputs");
    const std::size_t B = t.value(parts[0]).dim(0);
    std::size_t total = 0;
    for (Var p : parts) {
        const DenseArray<R>& pv = t.value(p);
        if (pv.rank() != 2 || pv.dim(0) != B) {
            throw_shape("concat_cols: every input must be [B,*] with matching B");
        }
        total += pv.dim(1);
    }
    DenseArray<R> out(Shape{B, total});
    std::vector<std::size_t> offsets;
    std::vector<std::size_t> widths;
    std::vector<int> ids;
    std::size_t off = 0;
    for (Var p : parts) {
        const DenseArray<R>& pv = t.value(p);
        const std::size_t w = pv.dim(1);
        for (std::size_t i = 0; i < B; ++i)
            std::memcpy(out.ptr() + i * total + off, pv.ptr() + i * w, w * sizeof(R));
        offsets.push_back(off);
        widths.push_back(w);
        ids.push_back(p.id);
        off += w;
    }
    return t.record(std::move(out), parts,
                    [ids, offsets, widths, B, total](Tape<R>& tp, const DenseArray<R>& g) {
                        for (std::size_t part = 0; part < ids.size(); ++part) {
                            if (!tp.needs_grad(Var{ids[part]})) continue;
                            DenseArray<R>& dp = tp.grad_buffer(ids[part]);
                            const std::size_t w = widths[part], o = offsets[part];
                            for (std::size_t i = 0; i < B; ++i)
                                for (std::size_t j = 0; j < w; ++j)
                                    dp[i * w + j] += g[i * total + o + j];
                        }
                    });
}

}  // namespace ops
}  // namespace todynet
