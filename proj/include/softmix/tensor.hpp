#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "softmix/common.hpp"

namespace softmix {

// Dense row-major matrix of doubles. Vectors are 1xN, scalars 1x1.
struct Tensor {
    int rows = 0;
    int cols = 0;
    std::vector<double> v;

    Tensor() = default;
    Tensor(int r, int c) : rows(r), cols(c), v(static_cast<size_t>(r) * c, 0.0) {}

    static Tensor scalar(double x) {
        Tensor t(1, 1);
        t.v[0] = x;
        return t;
    }

    size_t size() const { return v.size(); }
    bool empty() const { return v.empty(); }

    double& at(int r, int c) { return v[static_cast<size_t>(r) * cols + c]; }
    double at(int r, int c) const { return v[static_cast<size_t>(r) * cols + c]; }

    double* row(int r) { return v.data() + static_cast<size_t>(r) * cols; }
    const double* row(int r) const { return v.data() + static_cast<size_t>(r) * cols; }

    double item() const {
        if (rows != 1 || cols != 1) throw InternalError("Tensor::item on non-scalar");
        return v[0];
    }

    bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }

    void fill(double x) { std::fill(v.begin(), v.end(), x); }

    void add_(const Tensor& o) {
        if (!same_shape(o)) throw InternalError("Tensor::add_ shape mismatch");
        for (size_t i = 0; i < v.size(); ++i) v[i] += o.v[i];
    }

    void scale_(double c) {
        for (double& x : v) x *= c;
    }

    bool all_finite() const {
        for (double x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }

    double norm() const {
        double s = 0;
        for (double x : v) s += x * x;
        return std::sqrt(s);
    }
};

}  // namespace softmix
