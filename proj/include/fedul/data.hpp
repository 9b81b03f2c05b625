#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "fedul/rng.hpp"

namespace fedul {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using Eigen::VectorXi;

// Feature matrix plus labels. For image-shaped data features are row-major
// flattened with the shape recorded; non-image data leaves the shape at zero.
struct Dataset {
    MatrixXd features;  // [count x dim]
    VectorXi labels;    // values in [0, class_count)
    int class_count = 0;
    int height = 0, width = 0, channels = 0;

    int size() const { return static_cast<int>(features.rows()); }
    int dim() const { return static_cast<int>(features.cols()); }
    bool image_shaped() const { return height > 0 && width > 0 && channels > 0; }
    void validate() const;

    Dataset subset(const std::vector<int>& indices) const;
};

// Sample-to-participant assignment. Every sample goes to exactly one owner.
struct Partition {
    std::vector<int> assignment;  // participant index per sample
    int participants = 0;

    std::vector<int> samples_of(int participant) const;
};

struct TriggerSpec {
    int size = 5;
    double transparency = 0.0;  // 0 = fully opaque patch
    enum class Position { kBottomRight, kBottomLeft, kTopRight, kTopLeft } position = Position::kBottomRight;
    int target_class = 0;
    double poison_ratio = 0.1;
};

struct SyntheticConfig {
    int class_count = 10;
    int feature_dim = 64;
    int per_class = 200;
    double cluster_spread = 0.1;
    // Class means land in 0.5 +/- class_separation per coordinate; shrinking
    // it pulls the classes together and creates genuinely confusable samples.
    double class_separation = 0.25;
    // Fraction of each class drawn from displaced singleton sub-clusters, so
    // hard, rarely-shared samples exist. Each rare sample slides toward a
    // random other class's mean; rare_shift is the interpolation weight
    // (0.5 lands halfway between the two classes).
    double rare_cluster_fraction = 0.05;
    double rare_shift = 0.5;
    std::uint64_t seed = 0;
    // Class means depend only on the seed; the sample stream picks which draw
    // sequence fills them, so train/test splits share the class geometry.
    std::uint64_t sample_stream = 0;
    // By default d = h*w and samples get an image shape so triggers apply.
    bool image_shape = true;
};

// Gaussian class clusters in [0,1]^d plus displaced rare sub-clusters.
// Pure function of the config (including the seed).
Dataset gen_synthetic(const SyntheticConfig& cfg);

// IDX (big-endian) reader; pixels scaled to [0,1]; optional 2x average-pool
// downscale. Errors carry the byte offset of the violation.
Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 bool downscale = false);

// Binary dataset cache, magic "VFDS1".
void save_cache(const Dataset& ds, const std::string& path);
Dataset load_cache(const std::string& path);

Partition partition_iid(const Dataset& ds, int participants, std::uint64_t seed);

// Per-class Dirichlet(alpha) allocation over participants. Degenerate draws
// (a participant with nothing) are resampled.
Partition partition_dirichlet(const Dataset& ds, int participants, double alpha,
                              std::uint64_t seed);

// Patch the trigger square into an image-shaped feature vector:
// pixel <- (1 - transparency) * 1.0 + transparency * pixel. Labels untouched.
VectorXd apply_trigger(const VectorXd& features, int height, int width, int channels,
                       const TriggerSpec& trigger);
VectorXd apply_trigger(const Dataset& ds, const VectorXd& features, const TriggerSpec& trigger);

}  // namespace fedul
