#pragma once

#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "kerhrm/errors.hpp"

namespace kerhrm {

/// A single data source: features, targets, and (when the generator knows
/// them) the latent environment id and the spurious attribute used only for
/// diagnostics. Classification targets are encoded as +-1.
struct Dataset {
    Eigen::MatrixXd X;
    Eigen::VectorXd Y;
    std::optional<Eigen::VectorXi> latent_env;
    std::optional<Eigen::VectorXi> spurious_attr;

    Eigen::Index n() const { return X.rows(); }
    Eigen::Index dim() const { return X.cols(); }

    void validate() const {
        if (X.rows() < 1 || X.cols() < 1) throw ShapeError("dataset: need n >= 1 and d >= 1");
        if (Y.size() != X.rows()) throw ShapeError("dataset: Y length != feature rows");
        if (!X.allFinite() || !Y.allFinite()) throw NumericError("dataset: non-finite entries");
        if (latent_env && latent_env->size() != X.rows())
            throw ShapeError("dataset: latent_env length != n");
        if (spurious_attr && spurious_attr->size() != X.rows())
            throw ShapeError("dataset: spurious_attr length != n");
    }
};

// Concatenates environments into one pooled dataset. latent_env is filled
// with the source index when absent, so pooled data always supports purity
// scoring against the generating split. spurious_attr survives only when
// every part carries it.
inline Dataset pool(const std::vector<Dataset>& parts) {
    if (parts.empty()) throw ConfigError("pool: no datasets");
    Eigen::Index n = 0;
    const Eigen::Index d = parts.front().dim();
    bool all_spurious = true;
    for (const auto& p : parts) {
        if (p.dim() != d) throw ShapeError("pool: feature dimension mismatch");
        n += p.n();
        all_spurious = all_spurious && p.spurious_attr.has_value();
    }
    Dataset out;
    out.X.resize(n, d);
    out.Y.resize(n);
    Eigen::VectorXi env(n);
    Eigen::VectorXi spur = Eigen::VectorXi::Zero(n);
    Eigen::Index at = 0;
    for (std::size_t e = 0; e < parts.size(); ++e) {
        const auto& p = parts[e];
        out.X.middleRows(at, p.n()) = p.X;
        out.Y.segment(at, p.n()) = p.Y;
        if (p.latent_env)
            env.segment(at, p.n()) = *p.latent_env;
        else
            env.segment(at, p.n()).setConstant(static_cast<int>(e));
        if (all_spurious) spur.segment(at, p.n()) = *p.spurious_attr;
        at += p.n();
    }
    out.latent_env = env;
    if (all_spurious) out.spurious_attr = spur;
    return out;
}

// Index sets per label value; empty sets are dropped.
inline std::vector<std::vector<Eigen::Index>> env_index_sets(const Eigen::VectorXi& labels) {
    int max_label = -1;
    for (Eigen::Index i = 0; i < labels.size(); ++i) max_label = std::max(max_label, labels[i]);
    std::vector<std::vector<Eigen::Index>> sets(static_cast<std::size_t>(max_label + 1));
    for (Eigen::Index i = 0; i < labels.size(); ++i)
        if (labels[i] >= 0) sets[static_cast<std::size_t>(labels[i])].push_back(i);
    std::erase_if(sets, [](const auto& s) { return s.empty(); });
    return sets;
}

} // namespace kerhrm
