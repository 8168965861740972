#pragma once

// Central-difference verification of tape gradients. Runs in 64-bit mode.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "todynet/tape.hpp"

namespace todynet {

// Program under test: stages the given input on the tape and returns a
// scalar loss node.
using FdProgram = std::function<Var(Tape<double>&, Var)>;

// Compares the tape gradient of `f` at `x` against central differences,
// coordinate by coordinate. Returns the max relative error with denominator
// max(|analytic|, 1e-8).
inline double finite_difference_check(const FdProgram& f, const DenseArray<double>& x,
                                      double h = 1e-5) {
    Parameter<double> px("fd_input", x);
    {
        Tape<double> tape;
        Var loss = f(tape, tape.param(px));
        tape.backward(loss);
    }
    auto eval = [&](const DenseArray<double>& point) {
        Tape<double> tape;
        Var loss = f(tape, tape.leaf(point));
        return tape.value(loss)[0];
    };
    DenseArray<double> probe = x;
    double max_rel = 0;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        probe[i] = x[i] + h;
        const double fp = eval(probe);
        probe[i] = x[i] - h;
        const double fm = eval(probe);
        probe[i] = x[i];
        const double fd = (fp - fm) / (2.0 * h);
        const double g = px.grad[i];
        const double rel = std::abs(fd - g) / std::max(std::abs(g), 1e-8);
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

// Same comparison for an already-computed analytic gradient of a model
// parameter, probing only the sampled coordinates. `forward` must rebuild
// the loss from current parameter values.
inline double fd_check_coords(const std::function<double()>& forward, DenseArray<double>& value,
                              const DenseArray<double>& analytic_grad,
                              const std::vector<std::size_t>& coords, double h = 1e-5) {
    double max_rel = 0;
    for (std::size_t i : coords) {
        const double keep = value[i];
        value[i] = keep + h;
        const double fp = forward();
        value[i] = keep - h;
        const double fm = forward();
        value[i] = keep;
        const double fd = (fp - fm) / (2.0 * h);
        const double g = analytic_grad[i];
        const double rel = std::abs(fd - g) / std::max(std::abs(g), 1e-8);
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

}  // namespace todynet
