#pragma once

#include "fisformer/tensor.hpp"

#include <cmath>
#include <numbers>

namespace fisformer {

/// y = x W + b, one row per token.
template <typename T>
Matrix<T> linear(const Matrix<T>& x, const Matrix<T>& w, const RowVector<T>& b) {
    if (x.cols() != w.rows() || w.cols() != b.size()) {
        throw ShapeError("linear: input " + shape_str(x) + ", weight " + shape_str(w) + ", bias " +
                         std::to_string(b.size()));
    }
    Matrix<T> y = x * w;
    y.rowwise() += b;
    return y;
}

/// Accumulates dW, db and returns dx.
template <typename T>
Matrix<T> linear_backward(const Matrix<T>& x, const Matrix<T>& w, const Matrix<T>& d_y, Matrix<T>& d_w,
                          RowVector<T>& d_b) {
    d_w.noalias() += x.transpose() * d_y;
    d_b += d_y.colwise().sum();
    return d_y * w.transpose();
}

template <typename T>
struct LayerNormCache {
    Matrix<T> x_hat;
    Eigen::Matrix<T, Eigen::Dynamic, 1> rstd;
};

/// Row-wise layer norm with population variance.
template <typename T>
Matrix<T> layer_norm(const Matrix<T>& x, const RowVector<T>& gain, const RowVector<T>& bias, T eps,
                     LayerNormCache<T>* cache = nullptr) {
    const auto n = static_cast<T>(x.cols());
    Matrix<T> x_hat(x.rows(), x.cols());
    Eigen::Matrix<T, Eigen::Dynamic, 1> rstd(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const T mean = x.row(i).sum() / n;
        const T var = (x.row(i).array() - mean).square().sum() / n;
        rstd[i] = T(1) / std::sqrt(var + eps);
        x_hat.row(i) = (x.row(i).array() - mean) * rstd[i];
    }
    Matrix<T> y = x_hat.array().rowwise() * gain.array();
    y.rowwise() += bias;
    if (cache) {
        cache->x_hat = std::move(x_hat);
        cache->rstd = std::move(rstd);
    }
    return y;
}

template <typename T>
Matrix<T> layer_norm_backward(const LayerNormCache<T>& cache, const RowVector<T>& gain, const Matrix<T>& d_y,
                              RowVector<T>& d_gain, RowVector<T>& d_bias) {
    d_gain += d_y.cwiseProduct(cache.x_hat).colwise().sum();
    d_bias += d_y.colwise().sum();
    const Matrix<T> d_hat = d_y.array().rowwise() * gain.array();
    const auto n = static_cast<T>(d_y.cols());
    Matrix<T> d_x(d_y.rows(), d_y.cols());
    for (Eigen::Index i = 0; i < d_y.rows(); ++i) {
        const T m1 = d_hat.row(i).sum() / n;
        const T m2 = d_hat.row(i).dot(cache.x_hat.row(i)) / n;
        d_x.row(i) = cache.rstd[i] * (d_hat.row(i).array() - m1 - cache.x_hat.row(i).array() * m2);
    }
    return d_x;
}

// tanh approximation of GELU
template <typename T>
T gelu(T x) {
    constexpr T c = static_cast<T>(0.7978845608028654);  // sqrt(2 / pi)
    return T(0.5) * x * (T(1) + std::tanh(c * (x + T(0.044715) * x * x * x)));
}

template <typename T>
T gelu_grad(T x) {
    constexpr T c = static_cast<T>(0.7978845608028654);
    const T th = std::tanh(c * (x + T(0.044715) * x * x * x));
    return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * c * (T(1) + T(3) * T(0.044715) * x * x);
}

}  // namespace fisformer
