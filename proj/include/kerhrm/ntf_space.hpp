#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "kerhrm/errors.hpp"

namespace kerhrm {

// Produces rows [begin, end) of a conceptual n x p feature matrix. Sources
// must be restartable: the gram builder asks for the same block more than
// once instead of holding the whole matrix.
using RowSource = std::function<Eigen::MatrixXd(Eigen::Index begin, Eigen::Index end)>;

inline RowSource dense_row_source(const Eigen::MatrixXd& m) {
    return [&m](Eigen::Index b, Eigen::Index e) -> Eigen::MatrixXd {
        return m.middleRows(b, e - b);
    };
}

/// Gram matrix G[i][j] = <phi(x_i), phi(x_j)> accumulated from streamed row
/// blocks, so peak memory stays at n^2 plus a couple of blocks even when the
/// feature dimension p is large.
inline Eigen::MatrixXd build_gram(const RowSource& rows, Eigen::Index n, Eigen::Index block) {
    if (block < 1) throw ConfigError("build_gram: block must be >= 1");
    if (n < 1) throw ShapeError("build_gram: need n >= 1");
    Eigen::MatrixXd gram(n, n);
    for (Eigen::Index bi = 0; bi < n; bi += block) {
        const Eigen::Index li = std::min(block, n - bi);
        Eigen::MatrixXd a = rows(bi, bi + li);
        if (a.rows() != li) throw ShapeError("build_gram: row source returned wrong block");
        if (!a.allFinite())
            throw NumericError("build_gram: non-finite feature entry in rows [" +
                               std::to_string(bi) + ", " + std::to_string(bi + li) + ")");
        Eigen::MatrixXd diag = a * a.transpose();
        gram.block(bi, bi, li, li) = 0.5 * (diag + diag.transpose());
        for (Eigen::Index bj = bi + li; bj < n; bj += block) {
            const Eigen::Index lj = std::min(block, n - bj);
            Eigen::MatrixXd b = rows(bj, bj + lj);
            if (!b.allFinite())
                throw NumericError("build_gram: non-finite feature entry in rows [" +
                                   std::to_string(bj) + ", " + std::to_string(bj + lj) + ")");
            Eigen::MatrixXd cross = a * b.transpose();
            gram.block(bi, bj, li, lj) = cross;
            gram.block(bj, bi, lj, li) = cross.transpose();
        }
    }
    return gram;
}

// Cross inner products between two row streams: out[i][j] = <a_i, b_j>.
inline Eigen::MatrixXd build_cross_gram(const RowSource& rows_a, Eigen::Index na,
                                        const RowSource& rows_b, Eigen::Index nb,
                                        Eigen::Index block) {
    if (block < 1) throw ConfigError("build_cross_gram: block must be >= 1");
    Eigen::MatrixXd out(na, nb);
    for (Eigen::Index bi = 0; bi < na; bi += block) {
        const Eigen::Index li = std::min(block, na - bi);
        Eigen::MatrixXd a = rows_a(bi, bi + li);
        if (!a.allFinite()) throw NumericError("build_cross_gram: non-finite feature entry");
        for (Eigen::Index bj = 0; bj < nb; bj += block) {
            const Eigen::Index lj = std::min(block, nb - bj);
            Eigen::MatrixXd b = rows_b(bj, bj + lj);
            if (!b.allFinite()) throw NumericError("build_cross_gram: non-finite feature entry");
            out.block(bi, bj, li, lj) = a * b.transpose();
        }
    }
    return out;
}

/// Rank-k spectral view of the feature matrix, recovered from its gram:
/// G = U diag(S^2) U^T, reduced features Psi = U diag(S). The right factor of
/// the underlying SVD is never formed; anything that would need it is
/// expressed through U and S.
struct NtfSpace {
    Eigen::MatrixXd U;    // n x k, orthonormal columns
    Eigen::VectorXd S;    // k positive singular values, non-increasing
    Eigen::MatrixXd Psi;  // n x k, U * diag(S)
    Eigen::Index k = 0;
    Eigen::Index n = 0;
    std::vector<std::string> warnings;
};

inline NtfSpace decompose(const Eigen::MatrixXd& gram, Eigen::Index k) {
    const Eigen::Index n = gram.rows();
    if (gram.cols() != n) throw ShapeError("decompose: gram must be square");
    if (k < 1 || k > n) throw ConfigError("decompose: need 1 <= k <= n");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (gram + gram.transpose()));
    if (es.info() != Eigen::Success) throw NumericError("decompose: eigensolver failed");
    const Eigen::VectorXd& evals = es.eigenvalues(); // ascending
    const double lam_max = evals[n - 1];
    if (!(lam_max > 0.0)) throw DegenerateError("decompose: matrix is numerically zero");
    // Numerical rank cutoff; requesting more than rank shrinks k.
    const double floor = lam_max * 1e-12;
    NtfSpace space;
    Eigen::Index kept = 0;
    while (kept < k && evals[n - 1 - kept] > floor) ++kept;
    if (kept < k)
        space.warnings.push_back("decompose: rank deficient, shrank k from " + std::to_string(k) +
                                 " to " + std::to_string(kept));
    space.k = kept;
    space.n = n;
    space.U.resize(n, kept);
    space.S.resize(kept);
    space.Psi.resize(n, kept);
    for (Eigen::Index j = 0; j < kept; ++j) {
        space.U.col(j) = es.eigenvectors().col(n - 1 - j);
        space.S[j] = std::sqrt(evals[n - 1 - j]);
        // entrywise product, so Psi(i, j) is exactly U(i, j) * S(j)
        space.Psi.col(j) = space.U.col(j) * space.S[j];
    }
    return space;
}

/// Map between prediction deltas over the training set and reduced
/// coordinates: apply(g) = S^-1 U^T g, adjoint is its transpose.
struct ReducedCoordsMap {
    Eigen::MatrixXd U;
    Eigen::VectorXd S;

    Eigen::VectorXd apply(const Eigen::VectorXd& g) const {
        return S.cwiseInverse().asDiagonal() * (U.transpose() * g);
    }
    Eigen::VectorXd adjoint(const Eigen::VectorXd& c) const {
        return U * (S.cwiseInverse().asDiagonal() * c);
    }
};

inline void require_invertible_scales(const Eigen::VectorXd& s) {
    for (Eigen::Index j = 0; j < s.size(); ++j)
        if (s[j] < 1e-12) throw NumericError("singular scale: S[" + std::to_string(j) + "] < 1e-12");
}

inline ReducedCoordsMap coords_map(const NtfSpace& space) {
    require_invertible_scales(space.S);
    return ReducedCoordsMap{space.U, space.S};
}

inline Eigen::VectorXd reduced_coords(const NtfSpace& space, const Eigen::VectorXd& delta_pred) {
    if (delta_pred.size() != space.n) throw ShapeError("reduced_coords: vector length != n");
    require_invertible_scales(space.S);
    return space.S.cwiseInverse().asDiagonal() * (space.U.transpose() * delta_pred);
}

// Reduced coordinates for points outside the training set, from their cross
// gram against the training rows (n x m): psi_new = cross^T U S^-1.
inline Eigen::MatrixXd project_new(const NtfSpace& space, const Eigen::MatrixXd& cross_gram) {
    if (cross_gram.rows() != space.n) throw ShapeError("project_new: cross gram rows != n");
    require_invertible_scales(space.S);
    return cross_gram.transpose() * space.U * space.S.cwiseInverse().asDiagonal();
}

/// State of the heterogeneity kernel: variant features PsiV, starting as Psi
/// and losing one invariant direction per update.
struct KernelState {
    Eigen::MatrixXd PsiV;
    int iteration = 0;
    std::vector<Eigen::VectorXd> theta_history; // unit vectors projected out
};

inline KernelState initial_kernel_state(const NtfSpace& space) {
    KernelState state;
    state.PsiV = space.Psi;
    return state;
}

inline double max_normalized_alignment(const Eigen::MatrixXd& psi_v, const Eigen::VectorXd& theta) {
    const double tn = theta.norm();
    double worst = 0.0;
    for (Eigen::Index i = 0; i < psi_v.rows(); ++i) {
        const double dot = std::abs(psi_v.row(i).dot(theta));
        if (dot == 0.0) continue;
        worst = std::max(worst, dot / (psi_v.row(i).norm() * tn + 1e-12));
    }
    return worst;
}

enum class UpdateMode { Fresh, Cumulative };

// Removes the invariant direction from the variant features. Fresh mode
// restarts from Psi each call; cumulative projects the current PsiV, so
// directions removed earlier stay removed.
inline KernelState orthogonal_update(const NtfSpace& space, const KernelState& state,
                                     const Eigen::VectorXd& theta_inv, UpdateMode mode) {
    if (theta_inv.size() != space.k) throw ShapeError("orthogonal_update: theta length != k");
    const double sq = theta_inv.squaredNorm();
    if (!(sq > 0.0)) throw DegenerateError("orthogonal_update: zero direction");
    KernelState next;
    const Eigen::MatrixXd& base = (mode == UpdateMode::Fresh) ? space.Psi : state.PsiV;
    // literal form <v, theta> theta / ||theta||^2: rows exactly parallel to
    // theta cancel exactly when the quotient is representable
    next.PsiV = base - ((base * theta_inv) / sq) * theta_inv.transpose();
    next.iteration = state.iteration + 1;
    next.theta_history = state.theta_history;
    next.theta_history.push_back(theta_inv / std::sqrt(sq));
    const double residual = max_normalized_alignment(next.PsiV, theta_inv);
    if (residual > 1e-8)
        throw NumericError("orthogonal_update: orthogonality residual " + std::to_string(residual));
    return next;
}

inline Eigen::MatrixXd kernel_matrix(const KernelState& state) {
    Eigen::MatrixXd k = state.PsiV * state.PsiV.transpose();
    return 0.5 * (k + k.transpose());
}

} // namespace kerhrm
