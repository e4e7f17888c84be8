#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace kanmix {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

// Error with a process exit code attached. The code travels through the C API
// unchanged so the CLI can surface the documented exit codes.
class Error : public std::runtime_error {
public:
    enum Code {
        kGeneric = 1,
        kMissingInput = 2,
        kBadPairing = 3,
        kInvalidArgument = 64,
    };

    Error(Code code, const std::string& msg) : std::runtime_error(msg), code_(code) {}
    Code code() const { return code_; }

private:
    Code code_;
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(kInvalidArgument, msg) {}
};

// Malformed or missing input files (IDX/CIFAR decode, results trees).
struct FormatError : Error {
    explicit FormatError(const std::string& msg) : Error(kMissingInput, msg) {}
};

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Deterministic RNG. mt19937_64 is fully specified by the standard; the
// distributions below are hand-rolled because the std:: ones are
// implementation-defined and would break cross-platform reproducibility.
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

    uint64_t next_u64() { return engine_(); }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n), unbiased via rejection
    int64_t uniform_int(int64_t n) {
        const uint64_t un = static_cast<uint64_t>(n);
        const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return static_cast<int64_t>(x % un);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller
    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    template <typename V>
    void shuffle(V& v) {
        for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
            const int64_t j = uniform_int(i + 1);
            std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
        }
    }

    // Independent derived stream; same (seed, tag) always gives the same stream.
    Rng fork(uint64_t tag) const { return Rng(splitmix64(seed_ ^ splitmix64(tag ^ 0x5851f42d4c957f2dULL))); }

    uint64_t seed() const { return seed_; }

private:
    uint64_t seed_;
    std::mt19937_64 engine_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace kanmix
