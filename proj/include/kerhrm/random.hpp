#pragma once

#include <cstdint>
#include <random>

#include <Eigen/Dense>

namespace kerhrm {

using Rng = std::mt19937_64;

inline Eigen::MatrixXd gaussian_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols,
                                       double sd = 1.0) {
    std::normal_distribution<double> dist(0.0, sd);
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j)
            m(i, j) = dist(rng);
    return m;
}

inline Eigen::VectorXd gaussian_vector(Rng& rng, Eigen::Index n, double sd = 1.0) {
    std::normal_distribution<double> dist(0.0, sd);
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = dist(rng);
    return v;
}

// Haar-ish random orthogonal matrix: QR of a Gaussian draw with the sign of
// R's diagonal fixed, so the result is deterministic per rng state.
inline Eigen::MatrixXd random_orthogonal(Rng& rng, Eigen::Index n) {
    Eigen::MatrixXd g = gaussian_matrix(rng, n, n);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ();
    Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (Eigen::Index j = 0; j < n; ++j)
        if (r(j, j) < 0.0) q.col(j) = -q.col(j);
    return q;
}

// k orthonormal columns in dimension d (k <= d).
inline Eigen::MatrixXd random_orthonormal_columns(Rng& rng, Eigen::Index d, Eigen::Index k) {
    Eigen::MatrixXd g = gaussian_matrix(rng, d, k);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(d, k);
    Eigen::MatrixXd r = qr.matrixQR().topRows(k).triangularView<Eigen::Upper>();
    for (Eigen::Index j = 0; j < k; ++j)
        if (r(j, j) < 0.0) q.col(j) = -q.col(j);
    return q;
}

} // namespace kerhrm
