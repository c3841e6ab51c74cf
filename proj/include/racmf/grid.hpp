#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "racmf/errors.hpp"

namespace racmf {

/// Dense row-major 2-D array.
template <typename T>
struct Grid {
    int rows = 0;
    int cols = 0;
    std::vector<T> data;

    Grid() = default;
    Grid(int r, int c, T fill = T{}) : rows(r), cols(c), data(static_cast<size_t>(r) * c, fill) {}

    size_t size() const noexcept { return data.size(); }
    bool empty() const noexcept { return data.empty(); }
    T& operator()(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    const T& operator()(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
    T& operator[](size_t i) { return data[i]; }
    const T& operator[](size_t i) const { return data[i]; }

    template <typename U>
    bool same_shape(const Grid<U>& o) const noexcept {
        return rows == o.rows && cols == o.cols;
    }

    bool operator==(const Grid&) const = default;
};

using Image = Grid<float>;
using Mask = Grid<std::uint8_t>;

inline std::string shape_str(int rows, int cols) {
    return std::to_string(rows) + "x" + std::to_string(cols);
}

template <typename A, typename B>
void require_same_shape(const Grid<A>& a, const Grid<B>& b, const char* what) {
    if (!a.same_shape(b)) {
        throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a.rows, a.cols) +
                             " vs " + shape_str(b.rows, b.cols));
    }
}

}  // namespace racmf
