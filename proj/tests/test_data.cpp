#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>

#include "doctest.h"
#include "fedul/data.hpp"
#include "fedul/errors.hpp"
#include "fedul/nn.hpp"

using namespace fedul;

namespace {

std::string temp_path(const std::string& name) {
    return std::string("/tmp/fedul_test_") + name;
}

void write_idx_pair(const std::string& img_path, const std::string& lab_path,
                    const std::vector<std::vector<unsigned char>>& images, int rows, int cols,
                    const std::vector<unsigned char>& labels, std::uint32_t img_magic = 0x803,
                    std::uint32_t lab_magic = 0x801) {
    auto be = [](std::ofstream& out, std::uint32_t v) {
        unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
        out.write(reinterpret_cast<char*>(b), 4);
    };
    std::ofstream imgs(img_path, std::ios::binary);
    be(imgs, img_magic);
    be(imgs, static_cast<std::uint32_t>(images.size()));
    be(imgs, static_cast<std::uint32_t>(rows));
    be(imgs, static_cast<std::uint32_t>(cols));
    for (const auto& im : images) imgs.write(reinterpret_cast<const char*>(im.data()), im.size());
    std::ofstream labs(lab_path, std::ios::binary);
    be(labs, lab_magic);
    be(labs, static_cast<std::uint32_t>(labels.size()));
    labs.write(reinterpret_cast<const char*>(labels.data()), labels.size());
}

// Multiset equality of a partition with its dataset.
void check_partition_law(const Partition& p, int sample_count) {
    REQUIRE(static_cast<int>(p.assignment.size()) == sample_count);
    std::vector<int> seen(sample_count, 0);
    int total = 0;
    for (int j = 0; j < p.participants; ++j) {
        for (int idx : p.samples_of(j)) {
            ++seen[idx];
            ++total;
        }
    }
    CHECK(total == sample_count);
    for (int c : seen) CHECK(c == 1);
}

double tv_distance_from_global(const Dataset& ds, const Partition& p) {
    std::vector<double> global(ds.class_count, 0.0);
    for (int i = 0; i < ds.size(); ++i) global[ds.labels[i]] += 1.0;
    for (double& g : global) g /= ds.size();
    double mean_tv = 0.0;
    for (int j = 0; j < p.participants; ++j) {
        auto idx = p.samples_of(j);
        std::vector<double> local(ds.class_count, 0.0);
        for (int i : idx) local[ds.labels[i]] += 1.0;
        for (double& l : local) l /= std::max<std::size_t>(1, idx.size());
        double tv = 0.0;
        for (int c = 0; c < ds.class_count; ++c) tv += std::abs(local[c] - global[c]);
        mean_tv += 0.5 * tv;
    }
    return mean_tv / p.participants;
}

}  // namespace

TEST_CASE("synthetic: no rare clusters keeps samples within 6 sigma of their class mean") {
    SyntheticConfig cfg;
    cfg.class_count = 4;
    cfg.per_class = 100;
    cfg.feature_dim = 16;
    cfg.cluster_spread = 0.05;
    cfg.rare_cluster_fraction = 0.0;
    cfg.seed = 3;
    Dataset ds = gen_synthetic(cfg);
    // Recover empirical class means; every sample should hug its own mean.
    for (int c = 0; c < 4; ++c) {
        std::vector<int> idx;
        for (int i = 0; i < ds.size(); ++i)
            if (ds.labels[i] == c) idx.push_back(i);
        VectorXd mean = VectorXd::Zero(16);
        for (int i : idx) mean += ds.features.row(i).transpose();
        mean /= static_cast<double>(idx.size());
        for (int i : idx)
            CHECK((ds.features.row(i).transpose() - mean).cwiseAbs().maxCoeff() <
                  6.5 * cfg.cluster_spread);
    }
}

TEST_CASE("synthetic: same seed is bitwise identical, different seed is not") {
    SyntheticConfig cfg;
    cfg.seed = 11;
    cfg.per_class = 20;
    Dataset a = gen_synthetic(cfg);
    Dataset b = gen_synthetic(cfg);
    CHECK(a.features == b.features);
    CHECK(a.labels == b.labels);
    cfg.seed = 12;
    Dataset c = gen_synthetic(cfg);
    CHECK(a.features != c.features);
}

TEST_CASE("synthetic: two well-separated classes are linearly learnable to 0.99") {
    SyntheticConfig cfg;
    cfg.class_count = 2;
    cfg.feature_dim = 8;
    cfg.per_class = 150;
    cfg.cluster_spread = 0.02;
    cfg.rare_cluster_fraction = 0.0;
    cfg.seed = 4;
    cfg.image_shape = false;
    Dataset ds = gen_synthetic(cfg);

    ModelSpec spec;
    spec.layer_sizes = {8, 2};
    Rng rng(1);
    VectorXd params = init_params(spec, rng);
    Batch all{ds.features, ds.labels};
    for (int it = 0; it < 300; ++it) {
        params = sgd_step(params, loss_and_grad(spec, params, all).grad, 0.5);
    }
    MatrixXd probs = softmax_probs(forward(spec, params, all));
    int correct = 0;
    for (int i = 0; i < ds.size(); ++i) {
        int arg;
        probs.row(i).maxCoeff(&arg);
        if (arg == ds.labels[i]) ++correct;
    }
    CHECK(static_cast<double>(correct) / ds.size() >= 0.99);
}

TEST_CASE("idx: synthetic file round-trips exactly") {
    const std::string img = temp_path("idx_img"), lab = temp_path("idx_lab");
    std::vector<std::vector<unsigned char>> images = {
        std::vector<unsigned char>(4 * 4, 0), std::vector<unsigned char>(4 * 4, 255)};
    images[0][5] = 51;  // 51/255 = 0.2
    write_idx_pair(img, lab, images, 4, 4, {3, 7});
    Dataset ds = load_idx(img, lab);
    REQUIRE(ds.size() == 2);
    CHECK(ds.dim() == 16);
    CHECK(ds.height == 4);
    CHECK(ds.labels[0] == 3);
    CHECK(ds.labels[1] == 7);
    CHECK(ds.features(0, 5) == doctest::Approx(51.0 / 255.0));
    CHECK(ds.features(1, 0) == doctest::Approx(1.0));
    CHECK(ds.features(0, 0) == doctest::Approx(0.0));

    SUBCASE("2x average-pool downscale") {
        Dataset small = load_idx(img, lab, true);
        CHECK(small.dim() == 4);
        CHECK(small.height == 2);
        // flat index 5 is (row 1, col 1): the top-left 2x2 block holds the 51.
        CHECK(small.features(0, 0) == doctest::Approx(51.0 / (4 * 255.0)));
        CHECK(small.features(0, 1) == doctest::Approx(0.0));
    }
    std::remove(img.c_str());
    std::remove(lab.c_str());
}

TEST_CASE("idx: wrong magic and truncation are format errors") {
    const std::string img = temp_path("idx_badimg"), lab = temp_path("idx_badlab");
    write_idx_pair(img, lab, {std::vector<unsigned char>(4, 0)}, 2, 2, {1}, 0x801, 0x801);
    CHECK_THROWS_AS(load_idx(img, lab), FormatError);  // image magic is the label magic
    write_idx_pair(img, lab, {std::vector<unsigned char>(4, 0)}, 2, 2, {1}, 0x803, 0x803);
    CHECK_THROWS_AS(load_idx(img, lab), FormatError);  // label magic is the image magic

    write_idx_pair(img, lab, {std::vector<unsigned char>(2, 0)}, 2, 2, {1});  // short pixels
    CHECK_THROWS_AS(load_idx(img, lab), FormatError);
    std::remove(img.c_str());
    std::remove(lab.c_str());
}

TEST_CASE("idx: real MNIST when available") {
    const char* dir = std::getenv("FEDUL_MNIST_DIR");
    if (!dir) return;  // optional: needs the official files on disk
    Dataset ds = load_idx(std::string(dir) + "/train-images-idx3-ubyte",
                          std::string(dir) + "/train-labels-idx1-ubyte");
    CHECK(ds.size() == 60000);
    CHECK(ds.dim() == 784);
    CHECK(ds.class_count == 10);
}

TEST_CASE("dataset cache round-trips") {
    SyntheticConfig cfg;
    cfg.per_class = 10;
    cfg.seed = 2;
    Dataset ds = gen_synthetic(cfg);
    const std::string path = temp_path("cache.vfds");
    save_cache(ds, path);
    Dataset back = load_cache(path);
    CHECK(back.features == ds.features);
    CHECK(back.labels == ds.labels);
    CHECK(back.class_count == ds.class_count);
    CHECK(back.height == ds.height);
    std::remove(path.c_str());

    std::ofstream bad(path, std::ios::binary);
    bad << "NOPE!";
    bad.close();
    CHECK_THROWS_AS(load_cache(path), FormatError);
    std::remove(path.c_str());
}

TEST_CASE("iid partition: equal blocks, disjoint cover, multinomial histogram") {
    SyntheticConfig cfg;
    cfg.class_count = 5;
    cfg.per_class = 400;
    cfg.seed = 6;
    Dataset ds = gen_synthetic(cfg);

    Partition p = partition_iid(ds, 10, 123);
    check_partition_law(p, ds.size());
    for (int j = 0; j < 10; ++j) CHECK(p.samples_of(j).size() == 200);

    // Per-block class histogram within 3 sigma of the multinomial expectation.
    const double expect = 200.0 / 5;
    const double sigma = std::sqrt(200.0 * 0.2 * 0.8);
    for (int j = 0; j < 10; ++j) {
        std::vector<int> hist(5, 0);
        for (int i : p.samples_of(j)) ++hist[ds.labels[i]];
        for (int c = 0; c < 5; ++c) CHECK(std::abs(hist[c] - expect) <= 3.0 * sigma);
    }

    SUBCASE("sizes differ by at most one when uneven") {
        Partition q = partition_iid(ds, 7, 5);
        check_partition_law(q, ds.size());
        std::size_t lo = ds.size(), hi = 0;
        for (int j = 0; j < 7; ++j) {
            lo = std::min(lo, q.samples_of(j).size());
            hi = std::max(hi, q.samples_of(j).size());
        }
        CHECK(hi - lo <= 1);
    }
    CHECK_THROWS_AS(partition_iid(ds, 0, 1), ConfigError);
}

TEST_CASE("dirichlet partition: concentration limit, non-iid ordering, partition law") {
    SyntheticConfig cfg;
    cfg.class_count = 5;
    cfg.per_class = 300;
    cfg.seed = 9;
    Dataset ds = gen_synthetic(cfg);

    Partition huge = partition_dirichlet(ds, 5, 1e6, 7);
    check_partition_law(huge, ds.size());
    // alpha -> inf approaches the iid proportions.
    for (int j = 0; j < 5; ++j) {
        auto idx = huge.samples_of(j);
        std::vector<double> local(5, 0.0);
        for (int i : idx) local[ds.labels[i]] += 1.0;
        for (int c = 0; c < 5; ++c) CHECK(std::abs(local[c] / idx.size() - 0.2) < 0.05);
    }

    double tv_strict = 0.0, tv_mild = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        tv_strict += tv_distance_from_global(ds, partition_dirichlet(ds, 10, 0.5, seed));
        tv_mild += tv_distance_from_global(ds, partition_dirichlet(ds, 10, 0.9, seed));
    }
    CHECK(tv_strict / 20 > tv_mild / 20);  // smaller alpha = more skew

    CHECK_THROWS_AS(partition_dirichlet(ds, 3, 0.0, 1), ConfigError);
}

TEST_CASE("trigger: exact patch arithmetic") {
    Dataset ds;
    ds.height = 32;
    ds.width = 32;
    ds.channels = 1;
    ds.class_count = 2;
    ds.features = MatrixXd::Constant(1, 32 * 32, 0.5);
    ds.labels = VectorXi::Zero(1);

    TriggerSpec trig;
    trig.size = 5;
    trig.transparency = 0.0;
    VectorXd x = ds.features.row(0).transpose();
    VectorXd patched = apply_trigger(ds, x, trig);
    int changed = 0;
    for (int i = 0; i < patched.size(); ++i) {
        if (patched[i] != x[i]) {
            ++changed;
            CHECK(patched[i] == 1.0);
        }
    }
    CHECK(changed == 25);

    SUBCASE("fully transparent leaves the sample unchanged") {
        trig.transparency = 1.0;
        CHECK((apply_trigger(ds, x, trig) - x).norm() == 0.0);
    }
    SUBCASE("transparency 0.6 blends toward white") {
        trig.transparency = 0.6;
        VectorXd blended = apply_trigger(ds, x, trig);
        // patched pixel = 0.4 + 0.6 * 0.5
        const int last = 32 * 32 - 1;
        CHECK(blended[last] == doctest::Approx(0.4 + 0.6 * 0.5));
    }
    SUBCASE("opaque patching is idempotent") {
        trig.transparency = 0.0;
        VectorXd once = apply_trigger(ds, x, trig);
        VectorXd twice = apply_trigger(ds, once, trig);
        CHECK((once - twice).norm() == 0.0);
    }
    SUBCASE("trigger exceeding the image bounds is rejected") {
        trig.size = 40;
        CHECK_THROWS_AS(apply_trigger(ds, x, trig), ConfigError);
    }
    SUBCASE("non-image data is a capability error") {
        CHECK_THROWS_AS(apply_trigger(x, 0, 0, 0, trig), CapabilityError);
    }
}
