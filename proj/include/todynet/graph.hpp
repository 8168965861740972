#pragma once

// Learnable per-slot graph structure: source/target node embeddings, the
// rectified outer-product adjacency, and edge-list export.

#include <iomanip>
#include <sstream>
#include <string>

#include "todynet/graph_ops.hpp"
#include "todynet/tape.hpp"

namespace todynet {

// One embedding value per node per slot for each of the source and target
// roles; the slot's adjacency is the outer product of its two vectors.
template <typename R>
struct NodeEmbeddingPair {
    Parameter<R> theta;  // [S, N] source embeddings
    Parameter<R> psi;    // [S, N] target embeddings

    static NodeEmbeddingPair seeded(std::size_t slots, std::size_t nodes, Rng& rng,
                                    const std::string& prefix = "graph") {
        NodeEmbeddingPair e;
        e.theta = Parameter<R>(prefix + ".theta",
                               DenseArray<R>::uniform(Shape{slots, nodes}, rng, 0.0, 1.0));
        e.psi = Parameter<R>(prefix + ".psi",
                             DenseArray<R>::uniform(Shape{slots, nodes}, rng, 0.0, 1.0));
        return e;
    }

    std::size_t slots() const { return theta.value.dim(0); }
    std::size_t nodes() const { return theta.value.dim(1); }
};

namespace ops {

// Dense pre-sparsification adjacency: per slot, rectify(theta ⊗ psi).
// Negative products are clamped so degrees stay well defined downstream.
template <typename R>
Var construct_adjacency(Tape<R>& t, Var theta, Var psi) {
    return relu(t, outer_slot(t, theta, psi));
}

// Cleanup applied to pooled adjacencies before they feed the next layer:
// rectify, drop self-loops, renormalize.
template <typename R>
Var sanitize_adjacency(Tape<R>& t, Var a_raw) {
    return normalize_adjacency(t, zero_diag(t, relu(t, a_raw)));
}

}  // namespace ops

// Edge-list text for an adjacency stack [S,N,N]: one nonzero entry per line,
// tab-separated, slots reported 1-based.
template <typename R>
std::string edge_list_text(const DenseArray<R>& adj) {
    if (adj.rank() != 3 || adj.dim(1) != adj.dim(2)) {
        throw_shape("edge_list_text: expected [S,N,N], got " + shape_str(adj.shape));
    }
    const std::size_t S = adj.dim(0), N = adj.dim(1);
    std::ostringstream os;
    os << "# slot\tsrc\tdst\tweight\n";
    os << std::setprecision(17);
    for (std::size_t s = 0; s < S; ++s)
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t j = 0; j < N; ++j) {
                const R w = adj[(s * N + i) * N + j];
                if (w != R(0)) {
                    os << (s + 1) << '\t' << i << '\t' << j << '\t' << static_cast<double>(w)
                       << '\n';
                }
            }
    return os.str();
}

}  // namespace todynet
