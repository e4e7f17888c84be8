#pragma once

// Dataset loading (IDX and CIFAR-10 binary, gzip or plain), pixel scaling,
// resizing, augmentation, k-fold splits and batching.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "kanmix/common.hpp"
#include "kanmix/tensor.hpp"

namespace kanmix {

// Decoded pixels as stored on disk, before any scaling.
struct RawImages {
    int64_t n = 0, c = 0, h = 0, w = 0;
    std::vector<uint8_t> pixels;  // [n, c, h, w]
    std::vector<int32_t> labels;  // [n], each in [0, 10)
};

// Implemented in data.cpp (zlib-backed, handles .gz and plain files alike).
RawImages load_idx(const std::string& images_path, const std::string& labels_path);
RawImages load_cifar10(const std::vector<std::string>& batch_files);

// Locates the standard files for `name` ("fashion-mnist" or "cifar10") under
// data_dir and loads the requested split ("train" or "test").
RawImages load_raw_dataset(const std::string& name, const std::string& data_dir,
                           const std::string& split);

template <typename T>
struct ImageDataset {
    std::string name;
    std::string split;
    int64_t n = 0, c = 0, h = 0, w = 0;
    std::vector<T> images;  // [n, c, h, w], scaled to [-1, 1]
    std::vector<int32_t> labels;

    int64_t image_size() const { return c * h * w; }
    const T* image(int64_t i) const { return images.data() + i * image_size(); }
};

// uint8 [0,255] -> [-1,1], matching the KAN grid range.
template <typename T>
ImageDataset<T> scale_images(const RawImages& raw, std::string name, std::string split) {
    ImageDataset<T> ds;
    ds.name = std::move(name);
    ds.split = std::move(split);
    ds.n = raw.n;
    ds.c = raw.c;
    ds.h = raw.h;
    ds.w = raw.w;
    ds.labels = raw.labels;
    ds.images.resize(raw.pixels.size());
    for (size_t i = 0; i < raw.pixels.size(); ++i)
        ds.images[i] = static_cast<T>(raw.pixels[i] / 127.5 - 1.0);
    return ds;
}

template <typename T>
ImageDataset<T> load_dataset(const std::string& name, const std::string& data_dir,
                             const std::string& split) {
    return scale_images<T>(load_raw_dataset(name, data_dir, split), name, split);
}

// Bilinear resize to size x size with half-pixel centers and edge clamping.
// Returns the input unchanged (bitwise) when already that size.
template <typename T>
ImageDataset<T> resize_to(const ImageDataset<T>& ds, int64_t size) {
    if (size < 1) throw Error(Error::kInvalidArgument, "resize_to needs a positive size");
    if (ds.h == size && ds.w == size) return ds;
    ImageDataset<T> out;
    out.name = ds.name;
    out.split = ds.split;
    out.n = ds.n;
    out.c = ds.c;
    out.h = size;
    out.w = size;
    out.labels = ds.labels;
    out.images.resize(ds.n * ds.c * size * size);
    const double sy = static_cast<double>(ds.h) / size;
    const double sx = static_cast<double>(ds.w) / size;
    for (int64_t i = 0; i < ds.n; ++i) {
        for (int64_t ch = 0; ch < ds.c; ++ch) {
            const T* src = ds.image(i) + ch * ds.h * ds.w;
            T* dst = out.images.data() + (i * ds.c + ch) * size * size;
            for (int64_t y = 0; y < size; ++y) {
                const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, ds.h - 1.0);
                const int64_t y0 = static_cast<int64_t>(fy);
                const int64_t y1 = std::min(y0 + 1, ds.h - 1);
                const double wy = fy - y0;
                for (int64_t x = 0; x < size; ++x) {
                    const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, ds.w - 1.0);
                    const int64_t x0 = static_cast<int64_t>(fx);
                    const int64_t x1 = std::min(x0 + 1, ds.w - 1);
                    const double wx = fx - x0;
                    const double top = src[y0 * ds.w + x0] * (1 - wx) + src[y0 * ds.w + x1] * wx;
                    const double bot = src[y1 * ds.w + x0] * (1 - wx) + src[y1 * ds.w + x1] * wx;
                    dst[y * size + x] = static_cast<T>(top * (1 - wy) + bot * wy);
                }
            }
        }
    }
    return out;
}

template <typename T>
ImageDataset<T> take_subset(const ImageDataset<T>& ds, int64_t count) {
    if (count <= 0 || count > ds.n)
        throw Error(Error::kInvalidArgument, "subset of " + std::to_string(count) +
                                                 " examples out of range for dataset of " +
                                                 std::to_string(ds.n));
    ImageDataset<T> out = ds;
    out.n = count;
    out.images.resize(count * ds.image_size());
    out.labels.resize(count);
    return out;
}

struct AugmentConfig {
    bool enabled = true;
    double hflip_prob = 0.5;
    double rotate_degrees = 10.0;
};

// Horizontal flip (probability hflip_prob), then rotation by a uniform angle
// in [-rotate_degrees, +rotate_degrees] about the image centre with bilinear
// sampling; pixels pulled from outside the frame take the background value -1.
template <typename T>
void augment_image(const T* src, T* dst, int64_t c, int64_t h, int64_t w,
                   const AugmentConfig& cfg, Rng& rng) {
    const bool flip = cfg.hflip_prob > 0.0 && rng.bernoulli(cfg.hflip_prob);
    const double theta =
        cfg.rotate_degrees > 0.0
            ? rng.uniform(-cfg.rotate_degrees, cfg.rotate_degrees) * (3.14159265358979323846 / 180.0)
            : 0.0;
    if (!flip && theta == 0.0) {
        std::copy(src, src + c * h * w, dst);
        return;
    }
    const double cos_t = std::cos(theta), sin_t = std::sin(theta);
    const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
    for (int64_t ch = 0; ch < c; ++ch) {
        const T* s = src + ch * h * w;
        T* d = dst + ch * h * w;
        auto at = [&](int64_t y, int64_t x) -> double {
            if (y < 0 || y >= h || x < 0 || x >= w) return -1.0;
            // flipped image's pixel (y, x) comes from the mirrored column
            return s[y * w + (flip ? w - 1 - x : x)];
        };
        for (int64_t y = 0; y < h; ++y) {
            for (int64_t x = 0; x < w; ++x) {
                // inverse-rotate the destination pixel into the flipped image
                const double dy = y - cy, dx = x - cx;
                const double sy = cy + dy * cos_t - dx * sin_t;
                const double sx = cx + dy * sin_t + dx * cos_t;
                const int64_t y0 = static_cast<int64_t>(std::floor(sy));
                const int64_t x0 = static_cast<int64_t>(std::floor(sx));
                const double wy = sy - y0, wx = sx - x0;
                const double top = at(y0, x0) * (1 - wx) + at(y0, x0 + 1) * wx;
                const double bot = at(y0 + 1, x0) * (1 - wx) + at(y0 + 1, x0 + 1) * wx;
                d[y * w + x] = static_cast<T>(top * (1 - wy) + bot * wy);
            }
        }
    }
}

// Shuffled k-fold partition: each entry is (train indices, validation
// indices). When n is not divisible by k the first n % k folds get the extra
// example.
inline std::vector<std::pair<std::vector<int64_t>, std::vector<int64_t>>> kfold_split(int64_t n,
                                                                                      int64_t k,
                                                                                      uint64_t seed) {
    if (k < 2 || k > n)
        throw Error(Error::kInvalidArgument,
                    "k-fold needs 2 <= k <= n (got k=" + std::to_string(k) + ", n=" + std::to_string(n) + ")");
    std::vector<int64_t> perm(n);
    for (int64_t i = 0; i < n; ++i) perm[i] = i;
    Rng rng(seed);
    rng.shuffle(perm);

    std::vector<std::pair<std::vector<int64_t>, std::vector<int64_t>>> folds;
    const int64_t base = n / k, extra = n % k;
    int64_t start = 0;
    for (int64_t f = 0; f < k; ++f) {
        const int64_t len = base + (f < extra ? 1 : 0);
        std::pair<std::vector<int64_t>, std::vector<int64_t>> fold;
        fold.second.assign(perm.begin() + start, perm.begin() + start + len);
        fold.first.reserve(n - len);
        fold.first.insert(fold.first.end(), perm.begin(), perm.begin() + start);
        fold.first.insert(fold.first.end(), perm.begin() + start + len, perm.end());
        folds.push_back(std::move(fold));
        start += len;
    }
    return folds;
}

// Chunks indices into batches of batch_size (last one may be short),
// optionally shuffling first. The input order is left untouched.
inline std::vector<std::vector<int64_t>> epoch_batches(std::vector<int64_t> indices,
                                                       int64_t batch_size, bool shuffle, Rng& rng) {
    if (batch_size < 1) throw Error(Error::kInvalidArgument, "batch_size must be >= 1");
    if (shuffle) rng.shuffle(indices);
    std::vector<std::vector<int64_t>> batches;
    for (size_t i = 0; i < indices.size(); i += batch_size) {
        const size_t end = std::min(indices.size(), i + batch_size);
        batches.emplace_back(indices.begin() + i, indices.begin() + end);
    }
    return batches;
}

// Gathers the indexed images into a [B, c, h, w] tensor (augmenting each when
// aug is given) together with their labels.
template <typename T>
std::pair<Tensor<T>, std::vector<int32_t>> make_batch(const ImageDataset<T>& ds,
                                                      const std::vector<int64_t>& idx,
                                                      const AugmentConfig* aug = nullptr,
                                                      Rng* rng = nullptr) {
    const int64_t b = static_cast<int64_t>(idx.size());
    Tensor<T> batch(Shape{b, ds.c, ds.h, ds.w});
    std::vector<int32_t> labels(b);
    for (int64_t i = 0; i < b; ++i) {
        if (idx[i] < 0 || idx[i] >= ds.n)
            throw Error(Error::kInvalidArgument, "batch index " + std::to_string(idx[i]) +
                                                     " out of range for dataset of " + std::to_string(ds.n));
        T* dst = batch.values().data() + i * ds.image_size();
        if (aug && aug->enabled)
            augment_image(ds.image(idx[i]), dst, ds.c, ds.h, ds.w, *aug, *rng);
        else
            std::copy(ds.image(idx[i]), ds.image(idx[i]) + ds.image_size(), dst);
        labels[i] = ds.labels[idx[i]];
    }
    return {std::move(batch), std::move(labels)};
}

}  // namespace kanmix
