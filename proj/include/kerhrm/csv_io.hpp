#pragma once

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "kerhrm/dataset.hpp"
#include "kerhrm/errors.hpp"

namespace kerhrm {

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            cells.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    cells.push_back(cur);
    return cells;
}

inline double parse_cell(const std::string& cell, std::size_t row, std::size_t col) {
    const char* begin = cell.c_str();
    char* end = nullptr;
    const double v = std::strtod(begin, &end);
    if (end == begin || *end != '\0')
        throw ParseError("csv: non-numeric cell at row " + std::to_string(row) + ", column " +
                         std::to_string(col) + " ('" + cell + "')");
    return v;
}

} // namespace detail

struct CsvRegressionSpec {
    std::string path;
    std::string target_col;
    std::string env_col;
    std::vector<double> thresholds; // strictly increasing bucket edges
    int train_envs = 1;             // leading buckets used for standardization
};

/// Header CSV -> one dataset per environment bucket. Rows are bucketed by
/// env_col against the thresholds (bucket = number of edges <= value);
/// features exclude the target and env columns and are standardized with
/// statistics from the training buckets only.
inline std::vector<Dataset> load_csv_regression(const CsvRegressionSpec& spec,
                                                std::vector<std::string>* warnings = nullptr) {
    for (std::size_t i = 1; i < spec.thresholds.size(); ++i)
        if (!(spec.thresholds[i] > spec.thresholds[i - 1]))
            throw ConfigError("csv: thresholds must be strictly increasing");
    if (spec.train_envs < 1) throw ConfigError("csv: train_envs must be >= 1");
    std::ifstream in(spec.path);
    if (!in) throw IoError("cannot open " + spec.path);
    std::string line;
    if (!std::getline(in, line)) throw ParseError("csv: empty file " + spec.path);
    const auto header = detail::split_csv_line(line);
    Eigen::Index target_idx = -1, env_idx = -1;
    std::vector<Eigen::Index> feat_idx;
    for (std::size_t c = 0; c < header.size(); ++c) {
        if (header[c] == spec.target_col)
            target_idx = static_cast<Eigen::Index>(c);
        else if (header[c] == spec.env_col)
            env_idx = static_cast<Eigen::Index>(c);
        else
            feat_idx.push_back(static_cast<Eigen::Index>(c));
    }
    if (target_idx < 0) throw ParseError("csv: missing target column '" + spec.target_col + "'");
    if (env_idx < 0) throw ParseError("csv: missing env column '" + spec.env_col + "'");
    if (feat_idx.empty()) throw ParseError("csv: no feature columns left");

    const std::size_t buckets = spec.thresholds.size() + 1;
    std::vector<std::vector<Eigen::VectorXd>> feats(buckets);
    std::vector<std::vector<double>> targets(buckets);
    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty()) continue;
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != header.size())
            throw ParseError("csv: row " + std::to_string(row) + " has " +
                             std::to_string(cells.size()) + " cells, header has " +
                             std::to_string(header.size()));
        const double envv = detail::parse_cell(cells[static_cast<std::size_t>(env_idx)], row,
                                               static_cast<std::size_t>(env_idx));
        std::size_t bucket = 0;
        while (bucket < spec.thresholds.size() && envv >= spec.thresholds[bucket]) ++bucket;
        Eigen::VectorXd x(static_cast<Eigen::Index>(feat_idx.size()));
        for (std::size_t f = 0; f < feat_idx.size(); ++f)
            x[static_cast<Eigen::Index>(f)] =
                detail::parse_cell(cells[static_cast<std::size_t>(feat_idx[f])], row,
                                   static_cast<std::size_t>(feat_idx[f]));
        feats[bucket].push_back(std::move(x));
        targets[bucket].push_back(detail::parse_cell(cells[static_cast<std::size_t>(target_idx)],
                                                     row, static_cast<std::size_t>(target_idx)));
    }

    // Standardization statistics from the training buckets.
    const Eigen::Index d = static_cast<Eigen::Index>(feat_idx.size());
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(d), sq = Eigen::VectorXd::Zero(d);
    double count = 0.0;
    for (std::size_t b = 0; b < std::min<std::size_t>(buckets, static_cast<std::size_t>(spec.train_envs)); ++b)
        for (const auto& x : feats[b]) {
            mean += x;
            sq += x.cwiseProduct(x);
            count += 1.0;
        }
    if (count < 1.0) throw ParseError("csv: no rows in the training buckets");
    mean /= count;
    Eigen::VectorXd sd = (sq / count - mean.cwiseProduct(mean)).cwiseMax(0.0).cwiseSqrt();
    for (Eigen::Index j = 0; j < d; ++j)
        if (sd[j] < 1e-12) {
            sd[j] = 1.0;
            if (warnings) warnings->push_back("csv: feature column " + std::to_string(j) +
                                              " is constant on the training buckets");
        }

    std::vector<Dataset> out;
    for (std::size_t b = 0; b < buckets; ++b) {
        if (feats[b].empty()) {
            if (warnings) warnings->push_back("csv: empty environment bucket " + std::to_string(b));
            continue;
        }
        Dataset ds;
        const Eigen::Index n = static_cast<Eigen::Index>(feats[b].size());
        ds.X.resize(n, d);
        ds.Y.resize(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            ds.X.row(i) = ((feats[b][static_cast<std::size_t>(i)] - mean).array() / sd.array())
                              .transpose();
            ds.Y[i] = targets[b][static_cast<std::size_t>(i)];
        }
        ds.latent_env = Eigen::VectorXi::Constant(n, static_cast<int>(b));
        ds.validate();
        out.push_back(std::move(ds));
    }
    return out;
}

// CSV dump of generated environments, one row per sample: env, y, optional
// spurious attribute, then features.
inline void write_dataset_csv(const std::string& path, const std::vector<Dataset>& envs) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    const bool spur = !envs.empty() && envs.front().spurious_attr.has_value();
    out << "env,y";
    if (spur) out << ",spurious";
    for (Eigen::Index j = 0; j < envs.front().dim(); ++j) out << ",x" << j;
    out << "\n";
    out.precision(17);
    for (std::size_t e = 0; e < envs.size(); ++e) {
        const Dataset& ds = envs[e];
        for (Eigen::Index i = 0; i < ds.n(); ++i) {
            out << e << ',' << ds.Y[i];
            if (spur) out << ',' << (*ds.spurious_attr)[i];
            for (Eigen::Index j = 0; j < ds.dim(); ++j) out << ',' << ds.X(i, j);
            out << '\n';
        }
    }
    if (!out) throw IoError("write failed for " + path);
}

} // namespace kerhrm
