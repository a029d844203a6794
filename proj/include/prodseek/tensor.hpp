#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace prodseek {

inline std::int64_t shape_numel(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int e : shape) n *= e;
    return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

// Dense row-major double tensor. `grad`, when present, matches `data` in length.
struct TensorF {
    std::vector<int> shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::optional<std::vector<double>> grad;

    TensorF() = default;

    explicit TensorF(std::vector<int> shape_, double fill = 0.0) : shape(std::move(shape_)) {
        validate_shape();
        data.assign(static_cast<std::size_t>(shape_numel(shape)), fill);
    }

    static TensorF from(std::vector<int> shape_, std::vector<double> values) {
        TensorF t;
        t.shape = std::move(shape_);
        t.validate_shape();
        if (static_cast<std::int64_t>(values.size()) != shape_numel(t.shape)) {
            throw std::invalid_argument("TensorF::from: " + std::to_string(values.size()) +
                                        " values for shape " + shape_str(t.shape));
        }
        t.data = std::move(values);
        return t;
    }

    static TensorF scalar(double v) { return from({1, 1}, {v}); }

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }

    int rows() const { return shape.size() == 2 ? shape[0] : throw_rank2("rows"); }
    int cols() const { return shape.size() == 2 ? shape[1] : throw_rank2("cols"); }

    double& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols() + c]; }
    double at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols() + c]; }

    // Allocates a zero grad buffer if absent.
    std::vector<double>& ensure_grad() {
        if (!grad) grad.emplace(data.size(), 0.0);
        return *grad;
    }

    bool all_finite() const {
        for (double v : data) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

private:
    void validate_shape() const {
        if (shape.empty()) throw std::invalid_argument("TensorF: empty shape");
        for (int e : shape) {
            if (e <= 0) throw std::invalid_argument("TensorF: non-positive extent in " + shape_str(shape));
        }
    }
    int throw_rank2(const char* what) const {
        throw std::invalid_argument(std::string("TensorF::") + what + ": tensor is not rank 2, shape " +
                                    shape_str(shape));
    }
};

}  // namespace prodseek
