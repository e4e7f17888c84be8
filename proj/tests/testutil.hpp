#pragma once

// Shared helpers for the test suites: scratch directories, synthetic
// datasets, and independent oracles re-deriving values the library must
// reproduce.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "kanmix/common.hpp"

namespace testutil {

// Materializes a span (Tensor::values()/grad()) for container comparisons.
template <typename S>
std::vector<typename S::value_type> vec(const S& s) {
    return std::vector<typename S::value_type>(s.begin(), s.end());
}

// Fresh scratch directory under the build tree.
inline std::string scratch_dir(const std::string& name) {
#ifdef KANMIX_TEST_TMP
    const std::string base = KANMIX_TEST_TMP;
#else
    const std::string base = std::filesystem::temp_directory_path().string() + "/kanmix_tests";
#endif
    const std::string dir = base + "/" + name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

// ---------------------------------------------------------------------------
// Synthetic images: ten visually distinct, easily learnable classes. Class k
// gets a bright block whose position and background level depend on k, plus
// per-instance uniform pixel noise.
// ---------------------------------------------------------------------------

inline uint8_t synth_pixel(int64_t klass, int64_t ch, int64_t y, int64_t x, int64_t h, int64_t w,
                           kanmix::Rng& rng) {
    const int64_t by = (klass % 4) * (h / 4);
    const int64_t bx = (klass / 4) * (w / 4);
    int v = 30 + static_cast<int>((klass * 17 + ch * 11) % 60);
    if (y >= by && y < by + h / 3 && x >= bx && x < bx + w / 3) v = 200 - static_cast<int>(klass * 6);
    v += static_cast<int>(rng.uniform(-18.0, 18.0));
    return static_cast<uint8_t>(std::clamp(v, 0, 255));
}

struct SynthImages {
    int64_t n, c, h, w;
    std::vector<uint8_t> pixels;
    std::vector<uint8_t> labels;
};

// Round-robin labels 0..9, so any prefix of the set is nearly balanced.
inline SynthImages make_synth(int64_t n, int64_t c, int64_t h, int64_t w, uint64_t seed) {
    SynthImages s{n, c, h, w, {}, {}};
    s.pixels.reserve(n * c * h * w);
    kanmix::Rng rng(seed);
    for (int64_t i = 0; i < n; ++i) {
        const int64_t klass = i % 10;
        s.labels.push_back(static_cast<uint8_t>(klass));
        for (int64_t ch = 0; ch < c; ++ch)
            for (int64_t y = 0; y < h; ++y)
                for (int64_t x = 0; x < w; ++x) s.pixels.push_back(synth_pixel(klass, ch, y, x, h, w, rng));
    }
    return s;
}

// ---------------------------------------------------------------------------
// On-disk dataset builders (plain files; the loaders treat plain and gzip
// alike, the gzip path gets its own coverage where zlib is linked).
// ---------------------------------------------------------------------------

inline void write_bytes(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline void be32_push(std::vector<uint8_t>& v, uint32_t x) {
    v.push_back(static_cast<uint8_t>(x >> 24));
    v.push_back(static_cast<uint8_t>(x >> 16));
    v.push_back(static_cast<uint8_t>(x >> 8));
    v.push_back(static_cast<uint8_t>(x));
}

inline std::vector<uint8_t> idx_images_bytes(const SynthImages& s) {
    std::vector<uint8_t> out;
    be32_push(out, 0x00000803);
    be32_push(out, static_cast<uint32_t>(s.n));
    be32_push(out, static_cast<uint32_t>(s.h));
    be32_push(out, static_cast<uint32_t>(s.w));
    out.insert(out.end(), s.pixels.begin(), s.pixels.end());
    return out;
}

inline std::vector<uint8_t> idx_labels_bytes(const SynthImages& s) {
    std::vector<uint8_t> out;
    be32_push(out, 0x00000801);
    be32_push(out, static_cast<uint32_t>(s.n));
    out.insert(out.end(), s.labels.begin(), s.labels.end());
    return out;
}

// One CIFAR-10 style batch: 3073-byte records, label then 3 colour planes.
inline std::vector<uint8_t> cifar_bytes(const SynthImages& s) {
    std::vector<uint8_t> out;
    const int64_t plane = s.h * s.w;
    for (int64_t i = 0; i < s.n; ++i) {
        out.push_back(s.labels[static_cast<size_t>(i)]);
        const uint8_t* img = s.pixels.data() + i * s.c * plane;
        out.insert(out.end(), img, img + s.c * plane);
    }
    return out;
}

// data_dir/fashion-mnist/{train,t10k}-{images-idx3,labels-idx1}-ubyte
inline void make_fashion_tree(const std::string& data_dir, int64_t n_train, int64_t n_test,
                              uint64_t seed) {
    const std::string dir = data_dir + "/fashion-mnist";
    std::filesystem::create_directories(dir);
    const SynthImages train = make_synth(n_train, 1, 28, 28, seed);
    const SynthImages test = make_synth(n_test, 1, 28, 28, seed + 1);
    write_bytes(dir + "/train-images-idx3-ubyte", idx_images_bytes(train));
    write_bytes(dir + "/train-labels-idx1-ubyte", idx_labels_bytes(train));
    write_bytes(dir + "/t10k-images-idx3-ubyte", idx_images_bytes(test));
    write_bytes(dir + "/t10k-labels-idx1-ubyte", idx_labels_bytes(test));
}

// data_dir/cifar-10-batches-bin/{data_batch_1..5,test_batch}.bin
inline void make_cifar_tree(const std::string& data_dir, int64_t n_per_batch, int64_t n_test,
                            uint64_t seed) {
    const std::string dir = data_dir + "/cifar-10-batches-bin";
    std::filesystem::create_directories(dir);
    for (int b = 1; b <= 5; ++b) {
        const SynthImages batch = make_synth(n_per_batch, 3, 32, 32, seed + static_cast<uint64_t>(b));
        write_bytes(dir + "/data_batch_" + std::to_string(b) + ".bin", cifar_bytes(batch));
    }
    const SynthImages test = make_synth(n_test, 3, 32, 32, seed + 99);
    write_bytes(dir + "/test_batch.bin", cifar_bytes(test));
}

// ---------------------------------------------------------------------------
// Independent Cox-de Boor oracle: textbook recursion, no shared code with
// the library's iterative evaluation.
// ---------------------------------------------------------------------------

inline double cox_de_boor(const std::vector<double>& t, int64_t i, int64_t d, double x) {
    if (d == 0) return x >= t[i] && x < t[i + 1] ? 1.0 : 0.0;
    double left = 0.0, right = 0.0;
    if (t[i + d] > t[i]) left = (x - t[i]) / (t[i + d] - t[i]) * cox_de_boor(t, i, d - 1, x);
    if (t[i + d + 1] > t[i + 1])
        right = (t[i + d + 1] - x) / (t[i + d + 1] - t[i + 1]) * cox_de_boor(t, i + 1, d - 1, x);
    return left + right;
}

inline double cox_de_boor_derivative(const std::vector<double>& t, int64_t i, int64_t d, double x) {
    double left = 0.0, right = 0.0;
    if (t[i + d] > t[i]) left = cox_de_boor(t, i, d - 1, x) / (t[i + d] - t[i]);
    if (t[i + d + 1] > t[i + 1]) right = cox_de_boor(t, i + 1, d - 1, x) / (t[i + d + 1] - t[i + 1]);
    return d * (left - right);
}

// ---------------------------------------------------------------------------
// Independent Wilcoxon oracle: the distribution of the positive-rank sum as a
// subset-sum polynomial product (ranks doubled so mid-ranks stay integral).
// ---------------------------------------------------------------------------

inline double wilcoxon_p_oracle(const std::vector<double>& ranks, double w_obs) {
    std::vector<uint64_t> dist{1};  // dist[s] = #assignments with doubled rank sum s
    for (double r : ranks) {
        const int64_t rr = llround(2.0 * r);
        std::vector<uint64_t> next(dist.size() + rr, 0);
        for (size_t s = 0; s < dist.size(); ++s) {
            next[s] += dist[s];
            next[s + rr] += dist[s];
        }
        dist.swap(next);
    }
    const int64_t cutoff = llround(2.0 * w_obs);
    uint64_t count = 0;
    for (int64_t s = 0; s <= cutoff && s < static_cast<int64_t>(dist.size()); ++s) count += dist[s];
    const double total = std::pow(2.0, static_cast<double>(ranks.size()));
    return std::min(1.0, 2.0 * static_cast<double>(count) / total);
}

}  // namespace testutil
