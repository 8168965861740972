#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "todynet/error.hpp"
#include "todynet/rng.hpp"

namespace todynet {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

// Dense n-dimensional array, row-major, value semantics.
template <typename R>
struct DenseArray {
    Shape shape;
    std::vector<R> data;

    DenseArray() = default;

    explicit DenseArray(Shape s, R fill = R(0))
        : shape(std::move(s)), data(shape_numel(shape), fill) {}

    DenseArray(Shape s, std::vector<R> values) : shape(std::move(s)), data(std::move(values)) {
        if (shape_numel(shape) != data.size()) {
            throw_shape("array literal: shape " + shape_str(shape) + " wants " +
                        std::to_string(shape_numel(shape)) + " values, got " +
                        std::to_string(data.size()));
        }
    }

    std::size_t numel() const { return data.size(); }
    std::size_t dim(std::size_t i) const { return shape.at(i); }
    std::size_t rank() const { return shape.size(); }

    R* ptr() { return data.data(); }
    const R* ptr() const { return data.data(); }

    R& operator[](std::size_t i) { return data[i]; }
    const R& operator[](std::size_t i) const { return data[i]; }

    bool same_shape(const DenseArray& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (R v : data) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }

    void fill(R v) { std::fill(data.begin(), data.end(), v); }

    static DenseArray zeros(Shape s) { return DenseArray(std::move(s), R(0)); }

    static DenseArray full(Shape s, R v) { return DenseArray(std::move(s), v); }

    static DenseArray scalar(R v) { return DenseArray(Shape{1}, std::vector<R>{v}); }

    static DenseArray uniform(Shape s, Rng& rng, double lo, double hi) {
        DenseArray a(std::move(s));
        for (R& v : a.data) v = static_cast<R>(rng.uniform(lo, hi));
        return a;
    }

    template <typename R2>
    DenseArray<R2> cast() const {
        DenseArray<R2> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<R2>(data[i]);
        return out;
    }
};

template <typename R>
inline void require_same_shape(const DenseArray<R>& a, const DenseArray<R>& b, const char* op) {
    if (!a.same_shape(b)) {
        throw_shape(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                    shape_str(b.shape));
    }
}

}  // namespace todynet
