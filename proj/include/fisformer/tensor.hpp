#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fisformer {

// Row-major so that row i is token i and data() is contiguous in (token, feature) order.
template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

using MatrixD = Matrix<double>;

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Bad user input: unknown config keys, unreadable files, malformed CSV.
struct ConfigError : Error {
    using Error::Error;
};

struct ShapeError : Error {
    using Error::Error;
};

/// NaN/Inf during training or a failed numerical tolerance.
struct NumericalError : Error {
    using Error::Error;
};

inline std::string shape_str(std::size_t rows, std::size_t cols) {
    return std::to_string(rows) + "x" + std::to_string(cols);
}

template <typename Derived>
std::string shape_str(const Eigen::DenseBase<Derived>& m) {
    return shape_str(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
}

template <typename A, typename B>
void require_same_shape(const Eigen::DenseBase<A>& a, const Eigen::DenseBase<B>& b, const char* what) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
    }
}

/// Dense (tokens, features, rules) array, rule index fastest.
template <typename T>
struct Tensor3 {
    std::size_t tokens = 0;
    std::size_t features = 0;
    std::size_t rules = 0;
    std::vector<T> data;

    Tensor3() = default;
    Tensor3(std::size_t t, std::size_t f, std::size_t r, T fill = T(0))
        : tokens(t), features(f), rules(r), data(t * f * r, fill) {}

    T& operator()(std::size_t i, std::size_t j, std::size_t r) { return data[(i * features + j) * rules + r]; }
    const T& operator()(std::size_t i, std::size_t j, std::size_t r) const {
        return data[(i * features + j) * rules + r];
    }

    std::span<T> slice(std::size_t i, std::size_t j) { return {data.data() + (i * features + j) * rules, rules}; }
    std::span<const T> slice(std::size_t i, std::size_t j) const {
        return {data.data() + (i * features + j) * rules, rules};
    }

    bool same_shape(const Tensor3& o) const {
        return tokens == o.tokens && features == o.features && rules == o.rules;
    }
    std::string shape() const {
        return std::to_string(tokens) + "x" + std::to_string(features) + "x" + std::to_string(rules);
    }
    void fill(T v) { std::fill(data.begin(), data.end(), v); }
};

template <typename T>
void require_same_shape(const Tensor3<T>& a, const Tensor3<T>& b, const char* what) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(what) + ": shape mismatch " + a.shape() + " vs " + b.shape());
    }
}

}  // namespace fisformer
