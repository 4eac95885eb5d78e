#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "kerhrm/errors.hpp"
#include "kerhrm/ntf_space.hpp"
#include "kerhrm/random.hpp"

namespace kerhrm {

enum class Activation { Relu, Tanh };

struct MlpConfig {
    Eigen::Index input_dim = 1;
    Eigen::Index hidden = 1024;
    Activation activation = Activation::Relu;
    std::uint64_t seed = 0;
};

/// Two-layer scalar-output perceptron. The flat parameter layout is
/// [vec(W1) column-major | b1 | W2 | b2] and the initial parameters are
/// snapshotted at construction; tangent features are always taken there.
class MlpState {
public:
    Eigen::MatrixXd W1; // hidden x input
    Eigen::VectorXd b1; // hidden
    Eigen::VectorXd W2; // hidden
    double b2 = 0.0;
    Activation activation = Activation::Relu;

    static MlpState init(const MlpConfig& cfg) {
        if (cfg.input_dim < 1 || cfg.hidden < 1)
            throw ConfigError("mlp: input_dim and hidden must be >= 1");
        Rng rng(cfg.seed);
        MlpState m;
        m.activation = cfg.activation;
        const double s1 = 1.0 / std::sqrt(static_cast<double>(cfg.input_dim));
        const double s2 = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
        m.W1 = gaussian_matrix(rng, cfg.hidden, cfg.input_dim, s1);
        m.b1 = gaussian_vector(rng, cfg.hidden, s1);
        m.W2 = gaussian_vector(rng, cfg.hidden, s2);
        m.b2 = std::normal_distribution<double>(0.0, s2)(rng);
        m.w0_ = m.flatten();
        return m;
    }

    static MlpState from_params(Eigen::MatrixXd w1, Eigen::VectorXd bias1, Eigen::VectorXd w2,
                                double bias2, Activation act) {
        if (w1.rows() != bias1.size() || w1.rows() != w2.size())
            throw ShapeError("mlp: inconsistent layer sizes");
        MlpState m;
        m.W1 = std::move(w1);
        m.b1 = std::move(bias1);
        m.W2 = std::move(w2);
        m.b2 = bias2;
        m.activation = act;
        m.w0_ = m.flatten();
        return m;
    }

    Eigen::Index input_dim() const { return W1.cols(); }
    Eigen::Index hidden() const { return W1.rows(); }
    Eigen::Index param_count() const { return W1.size() + b1.size() + W2.size() + 1; }
    const Eigen::VectorXd& w0() const { return w0_; }

    Eigen::VectorXd flatten() const {
        Eigen::VectorXd w(param_count());
        const Eigen::Index hd = W1.size(), h = b1.size();
        w.head(hd) = W1.reshaped();
        w.segment(hd, h) = b1;
        w.segment(hd + h, h) = W2;
        w[hd + 2 * h] = b2;
        return w;
    }

    void unflatten(const Eigen::VectorXd& w) {
        if (w.size() != param_count()) throw ShapeError("mlp: flat vector has wrong length");
        const Eigen::Index hd = W1.size(), h = b1.size();
        W1 = w.head(hd).reshaped(W1.rows(), W1.cols());
        b1 = w.segment(hd, h);
        W2 = w.segment(hd + h, h);
        b2 = w[hd + 2 * h];
    }

    // Copy with current parameters replaced by the initialization snapshot.
    MlpState at_w0() const {
        MlpState m = *this;
        m.unflatten(w0_);
        return m;
    }

private:
    Eigen::VectorXd w0_;
};

namespace detail {

inline Eigen::MatrixXd act_value(const Eigen::MatrixXd& z, Activation act) {
    if (act == Activation::Relu) return z.cwiseMax(0.0);
    return z.array().tanh();
}

// Derivative from pre-activations; for tanh callers may prefer from values.
inline Eigen::MatrixXd act_deriv(const Eigen::MatrixXd& z, Activation act) {
    if (act == Activation::Relu)
        return (z.array() > 0.0).cast<double>();
    Eigen::MatrixXd t = z.array().tanh();
    return 1.0 - t.array().square();
}

inline void check_input(const MlpState& m, const Eigen::MatrixXd& x) {
    if (x.cols() != m.input_dim())
        throw ShapeError("mlp: input has " + std::to_string(x.cols()) + " columns, model expects " +
                         std::to_string(m.input_dim()));
}

} // namespace detail

inline Eigen::VectorXd forward(const MlpState& m, const Eigen::MatrixXd& x) {
    detail::check_input(m, x);
    Eigen::MatrixXd z = (x * m.W1.transpose()).rowwise() + m.b1.transpose();
    return detail::act_value(z, m.activation) * m.W2 + Eigen::VectorXd::Constant(x.rows(), m.b2);
}

/// Neural tangent feature rows: row i is the parameter gradient of the
/// network output at x_i, evaluated at the initialization snapshot w0
/// regardless of the current parameters. Layout matches flatten().
inline Eigen::MatrixXd ntf_rows(const MlpState& model, const Eigen::MatrixXd& x) {
    detail::check_input(model, x);
    const MlpState m = model.at_w0();
    const Eigen::Index n = x.rows(), d = m.input_dim(), h = m.hidden();
    Eigen::MatrixXd z = (x * m.W1.transpose()).rowwise() + m.b1.transpose();
    Eigen::MatrixXd a = detail::act_value(z, m.activation);
    // dfdz(i, j) = W2_j * act'(z_ij)
    Eigen::MatrixXd dfdz = detail::act_deriv(z, m.activation).array().rowwise() *
                           m.W2.transpose().array();
    Eigen::MatrixXd out(n, h * d + 2 * h + 1);
    for (Eigen::Index j = 0; j < d; ++j)
        out.middleCols(j * h, h) = dfdz.array().colwise() * x.col(j).array();
    out.middleCols(h * d, h) = dfdz;
    out.middleCols(h * d + h, h) = a;
    out.col(h * d + 2 * h).setOnes();
    return out;
}

// Sum over rows of ||phi(x_i)||^2, closed form, no n x p intermediate. Used
// to bound the tangent gram spectrum when auto-picking learning rates.
inline double ntf_trace(const MlpState& model, const Eigen::MatrixXd& x) {
    detail::check_input(model, x);
    const MlpState m = model.at_w0();
    Eigen::MatrixXd z = (x * m.W1.transpose()).rowwise() + m.b1.transpose();
    Eigen::MatrixXd a = detail::act_value(z, m.activation);
    Eigen::MatrixXd dfdz = detail::act_deriv(z, m.activation).array().rowwise() *
                           m.W2.transpose().array();
    double total = 0.0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double g = dfdz.row(i).squaredNorm();
        total += g * (x.row(i).squaredNorm() + 1.0) + a.row(i).squaredNorm() + 1.0;
    }
    return total;
}

struct MlpGrads {
    Eigen::MatrixXd W1;
    Eigen::VectorXd b1;
    Eigen::VectorXd W2;
    double b2 = 0.0;

    Eigen::VectorXd flatten() const {
        Eigen::VectorXd w(W1.size() + 2 * b1.size() + 1);
        const Eigen::Index hd = W1.size(), h = b1.size();
        w.head(hd) = W1.reshaped();
        w.segment(hd, h) = b1;
        w.segment(hd + h, h) = W2;
        w[hd + 2 * h] = b2;
        return w;
    }
};

/// Alignment penalty of the composite objective: lambda * (1 - |cos|)
/// between theta_inv and the reduced coordinates of f_w(X) - f_w0(X). The
/// reduced delta is zero at w = w0; the penalty is defined as 0 there and
/// contributes no gradient.
struct FeedbackTerm {
    Eigen::VectorXd theta_inv;
    ReducedCoordsMap coords;
    double lambda = 0.0;
    Eigen::VectorXd f0; // forward(model at w0, X), precomputed
};

struct CompositeLoss {
    double total = 0.0;
    double empirical = 0.0;
    double penalty = 0.0; // lambda * (1 - |cos|)
    double abs_cos = 0.0; // 0 when the reduced delta is degenerate
};

// Loss and parameter gradient at the *current* parameters; the penalty part
// flows through the network outputs.
inline CompositeLoss composite_loss_grad(const MlpState& m, const Eigen::MatrixXd& x,
                                         const Eigen::VectorXd& y, const FeedbackTerm* fb,
                                         MlpGrads* grads) {
    detail::check_input(m, x);
    if (y.size() != x.rows()) throw ShapeError("mlp: target length != rows");
    const Eigen::Index n = x.rows();
    Eigen::MatrixXd z = (x * m.W1.transpose()).rowwise() + m.b1.transpose();
    Eigen::MatrixXd a = detail::act_value(z, m.activation);
    Eigen::VectorXd f = a * m.W2 + Eigen::VectorXd::Constant(n, m.b2);

    CompositeLoss loss;
    Eigen::VectorXd resid = f - y;
    loss.empirical = resid.squaredNorm() / static_cast<double>(n);
    Eigen::VectorXd e = (2.0 / static_cast<double>(n)) * resid; // d(loss)/df

    if (fb != nullptr && fb->lambda != 0.0) {
        const Eigen::VectorXd& theta = fb->theta_inv;
        const double tn = theta.norm();
        if (!(tn > 0.0)) throw DegenerateError("feedback: zero-norm invariant direction");
        Eigen::VectorXd c = fb->coords.apply(f - fb->f0);
        const double cn = c.norm();
        if (cn >= 1e-12) {
            const double dot = theta.dot(c);
            const double rho = dot / (tn * cn);
            loss.abs_cos = std::abs(rho);
            loss.penalty = fb->lambda * (1.0 - loss.abs_cos);
            const double sgn = (rho >= 0.0) ? 1.0 : -1.0;
            Eigen::VectorXd drho_dc = theta / (tn * cn) - (dot / (tn * cn * cn * cn)) * c;
            e += fb->coords.adjoint(-fb->lambda * sgn * drho_dc);
        }
    }
    loss.total = loss.empirical + loss.penalty;

    if (grads != nullptr) {
        Eigen::MatrixXd dz = detail::act_deriv(z, m.activation);
        // back(i, j) = e_i * W2_j * act'(z_ij)
        Eigen::MatrixXd back =
            dz.array() * (e * m.W2.transpose()).array();
        grads->W1 = back.transpose() * x;
        grads->b1 = back.colwise().sum();
        grads->W2 = a.transpose() * e;
        grads->b2 = e.sum();
    }
    return loss;
}

struct TrainResult {
    MlpState model;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    double final_abs_cos = 0.0;
    std::vector<double> loss_history;
    double lr_used = 0.0;
    bool converged = false; // final composite loss <= initial
    std::vector<std::string> warnings;
};

namespace detail {

inline TrainResult train_gd(MlpState model, const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                            const FeedbackTerm* fb, int epochs, double lr) {
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (lr <= 0.0) {
        // The squared-loss hessian spectrum is bounded by twice the tangent
        // gram trace over n; stay a factor 2 inside the stable step.
        const double trace = ntf_trace(model, x);
        lr = static_cast<double>(x.rows()) / (2.0 * std::max(trace, 1e-12));
    }
    TrainResult out;
    out.lr_used = lr;
    out.loss_history.reserve(static_cast<std::size_t>(epochs) + 1);
    MlpGrads g;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        CompositeLoss loss = composite_loss_grad(model, x, y, fb, &g);
        if (!std::isfinite(loss.total)) throw NumericError("train: loss diverged to non-finite");
        out.loss_history.push_back(loss.total);
        model.W1 -= lr * g.W1;
        model.b1 -= lr * g.b1;
        model.W2 -= lr * g.W2;
        model.b2 -= lr * g.b2;
    }
    CompositeLoss last = composite_loss_grad(model, x, y, fb, nullptr);
    out.loss_history.push_back(last.total);
    out.initial_loss = out.loss_history.front();
    out.final_loss = last.total;
    out.final_abs_cos = last.abs_cos;
    out.converged = last.total <= out.initial_loss + 1e-12 * (1.0 + std::abs(out.initial_loss));
    if (!out.converged)
        out.warnings.push_back("train: loss did not decrease (lr=" + std::to_string(lr) + ")");
    out.model = std::move(model);
    return out;
}

} // namespace detail

/// Full-batch gradient descent on empirical loss plus the invariant
/// alignment penalty. lr <= 0 picks a stable step from the tangent spectrum.
inline TrainResult train_feedback(const MlpState& model, const Eigen::MatrixXd& x,
                                  const Eigen::VectorXd& y, const Eigen::VectorXd& theta_inv,
                                  const ReducedCoordsMap& coords, double lambda, int epochs,
                                  double lr) {
    if (lambda < 0.0) throw ConfigError("train_feedback: lambda must be >= 0");
    if (!(theta_inv.norm() > 0.0))
        throw DegenerateError("train_feedback: zero-norm invariant direction");
    FeedbackTerm fb{theta_inv, coords, lambda, forward(model.at_w0(), x)};
    return detail::train_gd(model, x, y, &fb, epochs, lr);
}

inline TrainResult train_erm(const MlpState& model, const Eigen::MatrixXd& x,
                             const Eigen::VectorXd& y, int epochs, double lr) {
    return detail::train_gd(model, x, y, nullptr, epochs, lr);
}

} // namespace kerhrm
