#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace equate {

/// Row-major observation matrix.
struct DataMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;

    DataMatrix() = default;
    DataMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), values(r * c, 0.0) {}

    double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }

    std::span<const double> row(std::size_t r) const {
        return {values.data() + r * cols, cols};
    }
    std::span<double> row(std::size_t r) { return {values.data() + r * cols, cols}; }

    bool operator==(const DataMatrix&) const = default;
};

/// Features plus gold labels.
struct DataTable {
    DataMatrix x;
    std::vector<double> y;

    std::size_t rows() const { return x.rows; }
    std::size_t num_vars() const { return x.cols; }

    DataTable select(std::span<const std::size_t> indices) const {
        DataTable out;
        out.x = DataMatrix(indices.size(), x.cols);
        out.y.resize(indices.size());
        for (std::size_t i = 0; i < indices.size(); ++i) {
            auto src = x.row(indices[i]);
            auto dst = out.x.row(i);
            for (std::size_t c = 0; c < x.cols; ++c) dst[c] = src[c];
            out.y[i] = y[indices[i]];
        }
        return out;
    }

    bool operator==(const DataTable&) const = default;
};

}  // namespace equate
