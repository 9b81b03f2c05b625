#include "fedul/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "fedul/errors.hpp"

namespace fedul {

namespace {

void write_u32(std::ostream& out, std::uint32_t v) {
    char b[4];
    std::memcpy(b, &v, 4);
    out.write(b, 4);
}

void write_u64(std::ostream& out, std::uint64_t v) {
    char b[8];
    std::memcpy(b, &v, 8);
    out.write(b, 8);
}

std::uint32_t read_u32(std::istream& in, const std::string& what) {
    char b[4];
    if (!in.read(b, 4)) throw FormatError("truncated " + what);
    std::uint32_t v;
    std::memcpy(&v, b, 4);
    return v;
}

std::uint64_t read_u64(std::istream& in, const std::string& what) {
    char b[8];
    if (!in.read(b, 8)) throw FormatError("truncated " + what);
    std::uint64_t v;
    std::memcpy(&v, b, 8);
    return v;
}

std::uint32_t read_u32_be(std::istream& in, std::size_t offset, const std::string& path) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4))
        throw FormatError(path + ": truncated at byte " + std::to_string(offset));
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
           (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

}  // namespace

void Dataset::validate() const {
    if (labels.size() != features.rows()) throw ConfigError("dataset labels/features mismatch");
    for (int i = 0; i < labels.size(); ++i)
        if (labels[i] < 0 || labels[i] >= class_count)
            throw ConfigError("dataset label out of range at sample " + std::to_string(i));
    if (!features.allFinite()) throw NumericError("non-finite dataset features");
    if (image_shaped() && height * width * channels != dim())
        throw ConfigError("image shape does not match feature dim");
}

Dataset Dataset::subset(const std::vector<int>& indices) const {
    Dataset out;
    out.class_count = class_count;
    out.height = height;
    out.width = width;
    out.channels = channels;
    out.features.resize(static_cast<int>(indices.size()), features.cols());
    out.labels.resize(static_cast<int>(indices.size()));
    for (std::size_t i = 0; i < indices.size(); ++i) {
        out.features.row(static_cast<int>(i)) = features.row(indices[i]);
        out.labels[static_cast<int>(i)] = labels[indices[i]];
    }
    return out;
}

std::vector<int> Partition::samples_of(int participant) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < assignment.size(); ++i)
        if (assignment[i] == participant) out.push_back(static_cast<int>(i));
    return out;
}

Dataset gen_synthetic(const SyntheticConfig& cfg) {
    if (cfg.class_count < 2 || cfg.feature_dim < 1 || cfg.per_class < 1)
        throw ConfigError("synthetic generator needs positive counts and >= 2 classes");
    if (cfg.cluster_spread <= 0) throw ConfigError("cluster_spread must be > 0");
    Rng rng(stream_seed(cfg.seed, 0, stream::kData));
    Rng sample_rng(stream_seed(cfg.seed, cfg.sample_stream, stream::kData, 1));

    Dataset ds;
    ds.class_count = cfg.class_count;
    if (cfg.image_shape) {
        const int side = static_cast<int>(std::lround(std::sqrt(double(cfg.feature_dim))));
        if (side * side == cfg.feature_dim) {
            ds.height = side;
            ds.width = side;
            ds.channels = 1;
        }
    }
    const int n = cfg.class_count * cfg.per_class;
    ds.features.resize(n, cfg.feature_dim);
    ds.labels.resize(n);

    // Class means sit inside the unit box. Rare samples are singleton
    // sub-clusters: each one slides from its class mean toward a random other
    // class's mean (rare_shift is the interpolation weight, 0.5 = midpoint),
    // landing in contested empty space that only its owner's data resolves.
    MatrixXd means(cfg.class_count, cfg.feature_dim);
    for (int c = 0; c < cfg.class_count; ++c)
        for (int d = 0; d < cfg.feature_dim; ++d)
            means(c, d) = rng.uniform(0.5 - cfg.class_separation, 0.5 + cfg.class_separation);

    const int rare_per_class = static_cast<int>(std::lround(cfg.rare_cluster_fraction * cfg.per_class));
    int row = 0;
    for (int c = 0; c < cfg.class_count; ++c) {
        for (int k = 0; k < cfg.per_class; ++k, ++row) {
            const bool rare = k < rare_per_class && cfg.class_count > 1;
            const double spread = rare ? cfg.cluster_spread * 0.5 : cfg.cluster_spread;
            VectorXd mu = means.row(c).transpose();
            if (rare) {
                int other = static_cast<int>(sample_rng.below(static_cast<std::uint64_t>(cfg.class_count - 1)));
                if (other >= c) ++other;
                VectorXd axis = means.row(other).transpose() - mu;
                // Each rare sample gets its own pocket: slide along the class
                // pair's axis, then jitter orthogonally so no two rares share
                // a neighbourhood.
                VectorXd jitter(cfg.feature_dim);
                for (int d = 0; d < cfg.feature_dim; ++d) jitter[d] = sample_rng.normal();
                jitter -= jitter.dot(axis) / axis.squaredNorm() * axis;
                jitter.normalize();
                mu += cfg.rare_shift * axis + 0.35 * cfg.rare_shift * axis.norm() * jitter;
            }
            for (int d = 0; d < cfg.feature_dim; ++d)
                ds.features(row, d) = std::clamp(mu[d] + spread * sample_rng.normal(), 0.0, 1.0);
            ds.labels[row] = c;
        }
    }
    ds.validate();
    return ds;
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path, bool downscale) {
    std::ifstream imgs(images_path, std::ios::binary);
    if (!imgs) throw IoError("cannot open " + images_path);
    std::ifstream labs(labels_path, std::ios::binary);
    if (!labs) throw IoError("cannot open " + labels_path);

    const std::uint32_t img_magic = read_u32_be(imgs, 0, images_path);
    if (img_magic != 0x00000803u)
        throw FormatError(images_path + ": bad image magic at byte 0 (got " +
                          std::to_string(img_magic) + ")");
    const std::uint32_t count = read_u32_be(imgs, 4, images_path);
    const std::uint32_t rows = read_u32_be(imgs, 8, images_path);
    const std::uint32_t cols = read_u32_be(imgs, 12, images_path);

    const std::uint32_t lab_magic = read_u32_be(labs, 0, labels_path);
    if (lab_magic != 0x00000801u)
        throw FormatError(labels_path + ": bad label magic at byte 0 (got " +
                          std::to_string(lab_magic) + ")");
    const std::uint32_t lab_count = read_u32_be(labs, 4, labels_path);
    if (lab_count != count)
        throw FormatError("image/label count mismatch: " + std::to_string(count) + " vs " +
                          std::to_string(lab_count));

    const std::size_t pixels = std::size_t(rows) * cols;
    std::vector<unsigned char> buf(pixels);
    std::vector<unsigned char> raw_labels(count);
    if (!labs.read(reinterpret_cast<char*>(raw_labels.data()), count))
        throw FormatError(labels_path + ": truncated at byte " + std::to_string(8));

    const bool pool = downscale && rows % 2 == 0 && cols % 2 == 0;
    const int out_rows = pool ? static_cast<int>(rows) / 2 : static_cast<int>(rows);
    const int out_cols = pool ? static_cast<int>(cols) / 2 : static_cast<int>(cols);

    Dataset ds;
    ds.height = out_rows;
    ds.width = out_cols;
    ds.channels = 1;
    ds.features.resize(static_cast<int>(count), out_rows * out_cols);
    ds.labels.resize(static_cast<int>(count));

    int max_label = 0;
    for (std::uint32_t i = 0; i < count; ++i) {
        if (!imgs.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(pixels)))
            throw FormatError(images_path + ": truncated at byte " +
                              std::to_string(16 + std::size_t(i) * pixels));
        if (pool) {
            for (int r = 0; r < out_rows; ++r)
                for (int c = 0; c < out_cols; ++c) {
                    const double s = buf[(2 * r) * cols + 2 * c] + buf[(2 * r) * cols + 2 * c + 1] +
                                     buf[(2 * r + 1) * cols + 2 * c] + buf[(2 * r + 1) * cols + 2 * c + 1];
                    ds.features(static_cast<int>(i), r * out_cols + c) = s / (4.0 * 255.0);
                }
        } else {
            for (std::size_t p = 0; p < pixels; ++p)
                ds.features(static_cast<int>(i), static_cast<int>(p)) = buf[p] / 255.0;
        }
        ds.labels[static_cast<int>(i)] = raw_labels[i];
        max_label = std::max(max_label, static_cast<int>(raw_labels[i]));
    }
    ds.class_count = max_label + 1;
    ds.validate();
    return ds;
}

void save_cache(const Dataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out.write("VFDS1", 5);
    write_u32(out, static_cast<std::uint32_t>(ds.class_count));
    write_u32(out, static_cast<std::uint32_t>(ds.dim()));
    write_u64(out, static_cast<std::uint64_t>(ds.size()));
    write_u32(out, static_cast<std::uint32_t>(ds.height));
    write_u32(out, static_cast<std::uint32_t>(ds.width));
    write_u32(out, static_cast<std::uint32_t>(ds.channels));
    for (int i = 0; i < ds.size(); ++i) {
        out.write(reinterpret_cast<const char*>(ds.features.row(i).eval().data()),
                  static_cast<std::streamsize>(sizeof(double)) * ds.dim());
        write_u32(out, static_cast<std::uint32_t>(ds.labels[i]));
    }
    if (!out) throw IoError("write failed: " + path);
}

Dataset load_cache(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    char magic[5];
    if (!in.read(magic, 5) || std::memcmp(magic, "VFDS1", 5) != 0)
        throw FormatError(path + ": bad cache magic at byte 0");
    Dataset ds;
    ds.class_count = static_cast<int>(read_u32(in, "class count"));
    const int dim = static_cast<int>(read_u32(in, "feature dim"));
    const auto count = static_cast<int>(read_u64(in, "sample count"));
    ds.height = static_cast<int>(read_u32(in, "height"));
    ds.width = static_cast<int>(read_u32(in, "width"));
    ds.channels = static_cast<int>(read_u32(in, "channels"));
    ds.features.resize(count, dim);
    ds.labels.resize(count);
    std::vector<double> row(dim);
    for (int i = 0; i < count; ++i) {
        if (!in.read(reinterpret_cast<char*>(row.data()),
                     static_cast<std::streamsize>(sizeof(double)) * dim))
            throw FormatError(path + ": truncated sample " + std::to_string(i));
        for (int d = 0; d < dim; ++d) ds.features(i, d) = row[d];
        ds.labels[i] = static_cast<int>(read_u32(in, "label"));
    }
    ds.validate();
    return ds;
}

Partition partition_iid(const Dataset& ds, int participants, std::uint64_t seed) {
    if (participants <= 0) throw ConfigError("participant count must be positive");
    if (participants > ds.size()) throw ConfigError("more participants than samples");
    Rng rng(stream_seed(seed, 0, stream::kPartition));
    std::vector<int> order(ds.size());
    for (int i = 0; i < ds.size(); ++i) order[i] = i;
    rng.shuffle(order);

    Partition p;
    p.participants = participants;
    p.assignment.assign(ds.size(), -1);
    const int base = ds.size() / participants;
    const int extra = ds.size() % participants;
    int cursor = 0;
    for (int j = 0; j < participants; ++j) {
        const int take = base + (j < extra ? 1 : 0);
        for (int k = 0; k < take; ++k) p.assignment[order[cursor++]] = j;
    }
    return p;
}

Partition partition_dirichlet(const Dataset& ds, int participants, double alpha,
                              std::uint64_t seed) {
    if (participants <= 0) throw ConfigError("participant count must be positive");
    if (alpha <= 0) throw ConfigError("dirichlet alpha must be > 0");

    for (int attempt = 0; attempt < 100; ++attempt) {
        Rng rng(stream_seed(seed, static_cast<std::uint64_t>(attempt), stream::kPartition, 1));
        Partition p;
        p.participants = participants;
        p.assignment.assign(ds.size(), -1);
        for (int c = 0; c < ds.class_count; ++c) {
            // weights ~ Dirichlet(alpha * 1) as normalized gammas
            std::vector<double> w(participants);
            double total = 0.0;
            for (int j = 0; j < participants; ++j) {
                w[j] = rng.gamma(alpha);
                total += w[j];
            }
            for (int i = 0; i < ds.size(); ++i) {
                if (ds.labels[i] != c) continue;
                double u = rng.uniform() * total;
                int j = 0;
                for (; j < participants - 1; ++j) {
                    u -= w[j];
                    if (u <= 0) break;
                }
                p.assignment[i] = j;
            }
        }
        std::vector<int> counts(participants, 0);
        for (int a : p.assignment) ++counts[a];
        if (std::all_of(counts.begin(), counts.end(), [](int c) { return c > 0; })) return p;
    }
    throw NumericError("dirichlet partition kept producing empty participants");
}

VectorXd apply_trigger(const VectorXd& features, int height, int width, int channels,
                       const TriggerSpec& trigger) {
    if (height <= 0 || width <= 0 || channels <= 0)
        throw CapabilityError("trigger patching needs image-shaped data");
    if (trigger.size < 1 || trigger.size > height || trigger.size > width)
        throw ConfigError("trigger size " + std::to_string(trigger.size) +
                          " exceeds image bounds " + std::to_string(height) + "x" +
                          std::to_string(width));
    int r0 = 0, c0 = 0;
    switch (trigger.position) {
        case TriggerSpec::Position::kBottomRight: r0 = height - trigger.size; c0 = width - trigger.size; break;
        case TriggerSpec::Position::kBottomLeft: r0 = height - trigger.size; c0 = 0; break;
        case TriggerSpec::Position::kTopRight: r0 = 0; c0 = width - trigger.size; break;
        case TriggerSpec::Position::kTopLeft: r0 = 0; c0 = 0; break;
    }
    VectorXd out = features;
    for (int r = r0; r < r0 + trigger.size; ++r)
        for (int c = c0; c < c0 + trigger.size; ++c)
            for (int ch = 0; ch < channels; ++ch) {
                const int idx = (r * width + c) * channels + ch;
                out[idx] = (1.0 - trigger.transparency) * 1.0 + trigger.transparency * out[idx];
            }
    return out;
}

VectorXd apply_trigger(const Dataset& ds, const VectorXd& features, const TriggerSpec& trigger) {
    return apply_trigger(features, ds.height, ds.width, ds.channels, trigger);
}

}  // namespace fedul
