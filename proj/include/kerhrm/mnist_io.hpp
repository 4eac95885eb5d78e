#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "kerhrm/dataset.hpp"
#include "kerhrm/errors.hpp"
#include "kerhrm/random.hpp"

namespace kerhrm {

struct RawMnist {
    Eigen::MatrixXd images; // n x (rows*cols), scaled to [0, 1]
    Eigen::VectorXi labels;
    int rows = 0;
    int cols = 0;

    Eigen::Index n() const { return images.rows(); }
};

namespace detail {

inline std::uint32_t read_be32(std::istream& in, const std::string& path, std::size_t offset) {
    unsigned char buf[4];
    in.read(reinterpret_cast<char*>(buf), 4);
    if (in.gcount() != 4)
        throw FormatError(path + ": truncated at offset " + std::to_string(offset));
    return (std::uint32_t(buf[0]) << 24) | (std::uint32_t(buf[1]) << 16) |
           (std::uint32_t(buf[2]) << 8) | std::uint32_t(buf[3]);
}

} // namespace detail

/// Big-endian IDX reader. Image files carry magic 0x00000803 and
/// [count, rows, cols]; label files carry 0x00000801 and [count]. The two
/// counts must agree.
inline RawMnist load_mnist_idx(const std::string& image_path, const std::string& label_path) {
    std::ifstream img(image_path, std::ios::binary);
    if (!img) throw IoError("cannot open " + image_path);
    std::size_t off = 0;
    const std::uint32_t magic = detail::read_be32(img, image_path, off);
    off += 4;
    if (magic != 0x00000803u)
        throw FormatError(image_path + ": bad image magic at offset 0 (got 0x" +
                          [&] { char b[16]; std::snprintf(b, sizeof b, "%08x", magic); return std::string(b); }() +
                          ", want 0x00000803)");
    const std::uint32_t count = detail::read_be32(img, image_path, off); off += 4;
    const std::uint32_t rows = detail::read_be32(img, image_path, off); off += 4;
    const std::uint32_t cols = detail::read_be32(img, image_path, off); off += 4;
    RawMnist out;
    out.rows = static_cast<int>(rows);
    out.cols = static_cast<int>(cols);
    const std::size_t pix = std::size_t(rows) * cols;
    std::vector<unsigned char> buf(pix);
    out.images.resize(count, static_cast<Eigen::Index>(pix));
    for (std::uint32_t i = 0; i < count; ++i) {
        img.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(pix));
        if (static_cast<std::size_t>(img.gcount()) != pix)
            throw FormatError(image_path + ": truncated at offset " + std::to_string(off));
        for (std::size_t p = 0; p < pix; ++p)
            out.images(i, static_cast<Eigen::Index>(p)) = buf[p] / 255.0;
        off += pix;
    }

    std::ifstream lab(label_path, std::ios::binary);
    if (!lab) throw IoError("cannot open " + label_path);
    const std::uint32_t lmagic = detail::read_be32(lab, label_path, 0);
    if (lmagic != 0x00000801u)
        throw FormatError(label_path + ": bad label magic at offset 0 (got 0x" +
                          [&] { char b[16]; std::snprintf(b, sizeof b, "%08x", lmagic); return std::string(b); }() +
                          ", want 0x00000801)");
    const std::uint32_t lcount = detail::read_be32(lab, label_path, 4);
    if (lcount != count)
        throw FormatError(label_path + ": label count " + std::to_string(lcount) +
                          " != image count " + std::to_string(count));
    std::vector<unsigned char> lbuf(lcount);
    lab.read(reinterpret_cast<char*>(lbuf.data()), static_cast<std::streamsize>(lcount));
    if (static_cast<std::size_t>(lab.gcount()) != lcount)
        throw FormatError(label_path + ": truncated at offset 8");
    out.labels.resize(lcount);
    for (std::uint32_t i = 0; i < lcount; ++i) out.labels[i] = lbuf[i];
    return out;
}

/// Two-environment-plus-test color transform: Y = -1 for digits 0-4 and +1
/// for 5-9, flipped with the label-noise probability; the color id C flips Y
/// with the per-environment rate. Images are average-pooled and emitted as
/// two stacked channels with the non-color channel zeroed.
struct ColoredMnistConfig {
    std::vector<double> flip_e = {0.1, 0.2, 0.9};
    double label_noise = 0.2;
    Eigen::Index n_per_env = 2500;
    int down_rows = 14;
    int down_cols = 14;
    std::uint64_t seed = 0;

    void validate() const {
        if (flip_e.empty()) throw ConfigError("colored mnist: need at least one environment");
        for (double e : flip_e)
            if (e < 0.0 || e > 1.0) throw ConfigError("colored mnist: flip rate outside [0, 1]");
        if (label_noise < 0.0 || label_noise > 1.0)
            throw ConfigError("colored mnist: label noise outside [0, 1]");
        if (n_per_env < 1) throw ConfigError("colored mnist: n_per_env must be >= 1");
        if (down_rows < 1 || down_cols < 1) throw ConfigError("colored mnist: bad pool size");
    }
};

namespace detail {

inline Eigen::VectorXd average_pool(const Eigen::VectorXd& flat, int rows, int cols, int out_rows,
                                    int out_cols) {
    if (rows % out_rows != 0 || cols % out_cols != 0)
        throw ConfigError("colored mnist: pool size must divide the image size");
    const int fr = rows / out_rows, fc = cols / out_cols;
    Eigen::VectorXd out(static_cast<Eigen::Index>(out_rows) * out_cols);
    for (int r = 0; r < out_rows; ++r)
        for (int c = 0; c < out_cols; ++c) {
            double acc = 0.0;
            for (int i = 0; i < fr; ++i)
                for (int j = 0; j < fc; ++j) acc += flat[(r * fr + i) * cols + (c * fc + j)];
            out[r * out_cols + c] = acc / (fr * fc);
        }
    return out;
}

} // namespace detail

inline std::vector<Dataset> make_colored_mnist(const RawMnist& raw, const ColoredMnistConfig& cfg) {
    cfg.validate();
    const Eigen::Index need = cfg.n_per_env * static_cast<Eigen::Index>(cfg.flip_e.size());
    if (raw.n() < need)
        throw ShapeError("colored mnist: need " + std::to_string(need) + " raw samples, have " +
                         std::to_string(raw.n()));
    Rng rng(cfg.seed);
    std::vector<Eigen::Index> order(static_cast<std::size_t>(raw.n()));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::shuffle(order.begin(), order.end(), rng);
    std::uniform_real_distribution<double> uni(0.0, 1.0);

    const Eigen::Index hw = static_cast<Eigen::Index>(cfg.down_rows) * cfg.down_cols;
    std::vector<Dataset> out;
    Eigen::Index cursor = 0;
    for (std::size_t e = 0; e < cfg.flip_e.size(); ++e) {
        Dataset ds;
        ds.X = Eigen::MatrixXd::Zero(cfg.n_per_env, 2 * hw);
        ds.Y.resize(cfg.n_per_env);
        Eigen::VectorXi color(cfg.n_per_env);
        for (Eigen::Index i = 0; i < cfg.n_per_env; ++i, ++cursor) {
            const Eigen::Index at = order[static_cast<std::size_t>(cursor)];
            double y = raw.labels[at] >= 5 ? 1.0 : -1.0;
            if (uni(rng) < cfg.label_noise) y = -y;
            double c = y;
            if (uni(rng) < cfg.flip_e[e]) c = -c;
            Eigen::VectorXd img = detail::average_pool(raw.images.row(at).transpose(), raw.rows,
                                                       raw.cols, cfg.down_rows, cfg.down_cols);
            if (c > 0)
                ds.X.row(i).head(hw) = img;
            else
                ds.X.row(i).tail(hw) = img;
            ds.Y[i] = y;
            color[i] = static_cast<int>(c);
        }
        ds.latent_env = Eigen::VectorXi::Constant(cfg.n_per_env, static_cast<int>(e));
        ds.spurious_attr = color;
        ds.validate();
        out.push_back(std::move(ds));
    }
    return out;
}

} // namespace kerhrm
