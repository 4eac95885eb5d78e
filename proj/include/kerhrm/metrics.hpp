#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "kerhrm/dataset.hpp"
#include "kerhrm/errors.hpp"

namespace kerhrm {

enum class TaskKind { Classification, Regression };

struct EnvMetric {
    Eigen::Index n = 0;
    double mse = 0.0;
    double accuracy = 0.0; // sign agreement; meaningful for classification
};

struct MetricRecord {
    TaskKind task = TaskKind::Regression;
    std::vector<EnvMetric> per_env;
    double mean_error = 0.0;              // mean of per-env MSE
    std::optional<double> std_error;      // sample sd over envs, absent for one env
    double mean_accuracy = 0.0;           // mean of per-env accuracy
};

inline double sign_label(double v) { return v >= 0.0 ? 1.0 : -1.0; }

inline MetricRecord metrics(const std::vector<Eigen::VectorXd>& preds,
                            const std::vector<Eigen::VectorXd>& targets, TaskKind task) {
    if (preds.empty() || preds.size() != targets.size())
        throw ConfigError("metrics: need >= 1 environment and matching lists");
    MetricRecord rec;
    rec.task = task;
    for (std::size_t e = 0; e < preds.size(); ++e) {
        if (preds[e].size() != targets[e].size())
            throw ShapeError("metrics: prediction/target length mismatch");
        if (preds[e].size() == 0) throw ShapeError("metrics: empty environment");
        EnvMetric m;
        m.n = preds[e].size();
        m.mse = (preds[e] - targets[e]).squaredNorm() / static_cast<double>(m.n);
        Eigen::Index hits = 0;
        for (Eigen::Index i = 0; i < m.n; ++i)
            if (sign_label(preds[e][i]) == sign_label(targets[e][i])) ++hits;
        m.accuracy = static_cast<double>(hits) / static_cast<double>(m.n);
        rec.per_env.push_back(m);
    }
    const double ecount = static_cast<double>(rec.per_env.size());
    for (const auto& m : rec.per_env) {
        rec.mean_error += m.mse / ecount;
        rec.mean_accuracy += m.accuracy / ecount;
    }
    if (rec.per_env.size() >= 2) {
        double acc = 0.0;
        for (const auto& m : rec.per_env) acc += (m.mse - rec.mean_error) * (m.mse - rec.mean_error);
        rec.std_error = std::sqrt(acc / (ecount - 1.0));
    }
    return rec;
}

struct DiagnosticRecord {
    std::optional<double> purity;          // needs latent_env
    std::optional<double> kl_between_envs; // needs spurious_attr
};

namespace detail {

inline double best_matching_purity(const Eigen::VectorXi& learned, const Eigen::VectorXi& truth) {
    std::map<int, int> cid, eid;
    for (Eigen::Index i = 0; i < learned.size(); ++i) {
        cid.emplace(learned[i], static_cast<int>(cid.size()));
        eid.emplace(truth[i], static_cast<int>(eid.size()));
    }
    const int kc = static_cast<int>(cid.size());
    const int ke = static_cast<int>(eid.size());
    const int m = std::max(kc, ke);
    Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(m, m);
    for (Eigen::Index i = 0; i < learned.size(); ++i)
        counts(cid[learned[i]], eid[truth[i]]) += 1.0;
    // One-to-one matching, exhaustive over permutations for small m; for
    // larger m fall back to per-cluster majority vote.
    double best = 0.0;
    if (m <= 8) {
        std::vector<int> perm(static_cast<std::size_t>(m));
        std::iota(perm.begin(), perm.end(), 0);
        do {
            double hit = 0.0;
            for (int c = 0; c < m; ++c) hit += counts(c, perm[static_cast<std::size_t>(c)]);
            best = std::max(best, hit);
        } while (std::next_permutation(perm.begin(), perm.end()));
    } else {
        for (int c = 0; c < m; ++c) best += counts.row(c).maxCoeff();
    }
    return best / static_cast<double>(learned.size());
}

inline double bernoulli_kl(double p, double q) {
    return p * std::log(p / q) + (1.0 - p) * std::log((1.0 - p) / (1.0 - q));
}

} // namespace detail

/// Diagnostics of a learned partition: best-matching purity against the
/// latent environments, and the average symmetrized KL between the empirical
/// Bernoulli P(Y=1 | C=c) of every learned-environment pair (Laplace
/// smoothing 1), averaged over spurious-attribute values c.
inline DiagnosticRecord env_diagnostics(const Eigen::VectorXi& learned, const Dataset& data) {
    if (learned.size() != data.n()) throw ShapeError("env_diagnostics: label length != n");
    DiagnosticRecord rec;
    if (data.latent_env) rec.purity = detail::best_matching_purity(learned, *data.latent_env);
    if (!data.spurious_attr) return rec;

    std::map<int, int> env_ids, attr_ids;
    for (Eigen::Index i = 0; i < learned.size(); ++i) {
        env_ids.emplace(learned[i], static_cast<int>(env_ids.size()));
        attr_ids.emplace((*data.spurious_attr)[i], static_cast<int>(attr_ids.size()));
    }
    const int ne = static_cast<int>(env_ids.size());
    const int na = static_cast<int>(attr_ids.size());
    if (ne < 2) {
        rec.kl_between_envs = 0.0;
        return rec;
    }
    Eigen::MatrixXd pos = Eigen::MatrixXd::Zero(ne, na), tot = Eigen::MatrixXd::Zero(ne, na);
    for (Eigen::Index i = 0; i < learned.size(); ++i) {
        const int e = env_ids[learned[i]];
        const int a = attr_ids[(*data.spurious_attr)[i]];
        tot(e, a) += 1.0;
        if (data.Y[i] > 0.0) pos(e, a) += 1.0;
    }
    double acc = 0.0;
    int terms = 0;
    for (int a = 0; a < na; ++a)
        for (int e1 = 0; e1 < ne; ++e1)
            for (int e2 = e1 + 1; e2 < ne; ++e2) {
                const double p1 = (pos(e1, a) + 1.0) / (tot(e1, a) + 2.0);
                const double p2 = (pos(e2, a) + 1.0) / (tot(e2, a) + 2.0);
                acc += detail::bernoulli_kl(p1, p2) + detail::bernoulli_kl(p2, p1);
                ++terms;
            }
    rec.kl_between_envs = acc / static_cast<double>(terms);
    return rec;
}

} // namespace kerhrm
