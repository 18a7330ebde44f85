#pragma once

// Scaled dot-product self-attention, the baseline interaction the FIS layer replaces.
// Cost is O(T^2 d).

#include "fisformer/fis.hpp"
#include "fisformer/tensor.hpp"

#include <cmath>

namespace fisformer {

template <typename T>
struct AttentionOutput {
    Matrix<T> out;
    Matrix<T> weights;  // T x T row-softmax of QK^T / sqrt(d)
};

template <typename T>
Matrix<T> row_softmax(const Matrix<T>& s) {
    Matrix<T> a(s.rows(), s.cols());
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        const T mx = s.row(i).maxCoeff();
        a.row(i) = (s.row(i).array() - mx).exp();
        a.row(i) /= a.row(i).sum();
    }
    return a;
}

template <typename T>
AttentionOutput<T> self_attention(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v) {
    require_same_shape(q, k, "self_attention(q, k)");
    if (v.rows() != q.rows()) throw ShapeError("self_attention: value rows " + shape_str(v) + " vs " + shape_str(q));
    const T scale = T(1) / std::sqrt(static_cast<T>(q.cols()));
    AttentionOutput<T> r;
    Matrix<T> scores = (q * k.transpose()) * scale;
    r.weights = row_softmax(scores);
    r.out = r.weights * v;
    return r;
}

template <typename T>
struct AttentionGrads {
    Matrix<T> q, k, v;
};

template <typename T>
AttentionGrads<T> self_attention_backward(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v,
                                          const Matrix<T>& weights, const Matrix<T>& d_out) {
    const T scale = T(1) / std::sqrt(static_cast<T>(q.cols()));
    AttentionGrads<T> g;
    g.v = weights.transpose() * d_out;
    const Matrix<T> d_w = d_out * v.transpose();
    Matrix<T> d_s(weights.rows(), weights.cols());
    for (Eigen::Index i = 0; i < weights.rows(); ++i) {
        const T dot = weights.row(i).dot(d_w.row(i));
        d_s.row(i) = weights.row(i).array() * (d_w.row(i).array() - dot);
    }
    d_s *= scale;
    g.q = d_s * k;
    g.k = d_s.transpose() * q;
    return g;
}

}  // namespace fisformer
