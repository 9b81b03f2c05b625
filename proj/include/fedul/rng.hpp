#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <utility>
#include <vector>

namespace fedul {

// Deterministic random streams. Everything randomized in the simulator is a
// pure function of (seed, round, purpose, id), so runs replay bit-exactly and
// sub-streams (per participant, per round) are independent of evaluation
// order. std::mt19937_64 output is fully specified by the standard; the
// distributions below are hand-rolled because the std:: distribution objects
// are implementation-defined.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform double in [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n) via rejection sampling.
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t x = engine_();
        while (x >= limit) x = engine_();
        return x % n;
    }

    int uniform_int(int lo, int hi) {  // inclusive bounds
        return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi - lo + 1)));
    }

    // Standard normal via Marsaglia's polar method (no trig calls).
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform() - 1.0;
            v = 2.0 * uniform() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double m = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * m;
        have_spare_ = true;
        return u * m;
    }

    double normal(double mean, double std) { return mean + std * normal(); }

    // Gamma(shape, 1) via Marsaglia-Tsang; shape < 1 handled with the boost
    // Gamma(a) = Gamma(a+1) * U^(1/a).
    double gamma(double shape) {
        if (shape < 1.0) {
            const double u = uniform();
            return gamma(shape + 1.0) * std::pow(u > 0 ? u : 0x1.0p-53, 1.0 / shape);
        }
        const double d = shape - 1.0 / 3.0;
        const double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x, v;
            do {
                x = normal();
                v = 1.0 + c * x;
            } while (v <= 0.0);
            v = v * v * v;
            const double u = uniform();
            if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
            if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
        }
    }

    // Fisher-Yates. Deterministic replacement for std::shuffle.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[below(i)]);
        }
    }

    // k distinct values from [0, n), in draw order.
    std::vector<int> sample_without_replacement(int n, int k);

private:
    std::mt19937_64 engine_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

inline std::vector<int> Rng::sample_without_replacement(int n, int k) {
    std::vector<int> pool(n);
    for (int i = 0; i < n; ++i) pool[i] = i;
    std::vector<int> out;
    out.reserve(k);
    for (int i = 0; i < k; ++i) {
        const std::size_t j = static_cast<std::size_t>(below(static_cast<std::uint64_t>(n - i)));
        out.push_back(pool[j]);
        std::swap(pool[j], pool[n - i - 1]);
    }
    return out;
}

// Mixes (seed, round, purpose, id) into an independent stream seed.
// splitmix64 finalizer; good enough to decorrelate neighbouring streams.
inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t round,
                                 std::uint64_t purpose, std::uint64_t id = 0) {
    std::uint64_t z = seed;
    for (std::uint64_t w : {round + 1, purpose + 1, id + 1}) {
        z += 0x9e3779b97f4a7c15ULL * w;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        z = z ^ (z >> 31);
    }
    return z;
}

// Stream purposes. Keep stable: changing an id changes every seeded run.
namespace stream {
constexpr std::uint64_t kInit = 1;
constexpr std::uint64_t kSelect = 2;
constexpr std::uint64_t kLocalTrain = 3;
constexpr std::uint64_t kData = 4;
constexpr std::uint64_t kPartition = 5;
constexpr std::uint64_t kMarking = 6;
constexpr std::uint64_t kUnlearn = 7;
constexpr std::uint64_t kReplay = 8;
}  // namespace stream

}  // namespace fedul
