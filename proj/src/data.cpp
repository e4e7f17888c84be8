// Raw dataset readers. Everything goes through zlib's gz* layer, which reads
// plain files transparently, so both compressed and uncompressed copies work.

#include "kanmix/data.hpp"

#include <zlib.h>

#include <cstdio>
#include <filesystem>

namespace kanmix {
namespace {

std::vector<uint8_t> read_all(const std::string& path) {
    gzFile f = gzopen(path.c_str(), "rb");
    if (!f) throw FormatError("cannot open " + path);
    std::vector<uint8_t> out;
    std::vector<uint8_t> buf(1 << 20);
    for (;;) {
        const int got = gzread(f, buf.data(), static_cast<unsigned>(buf.size()));
        if (got < 0) {
            int errnum = 0;
            const char* msg = gzerror(f, &errnum);
            std::string detail = errnum == Z_ERRNO ? "read error" : (msg ? msg : "decompression error");
            gzclose(f);
            throw FormatError(path + ": " + detail);
        }
        if (got == 0) break;
        out.insert(out.end(), buf.begin(), buf.begin() + got);
    }
    gzclose(f);
    return out;
}

uint32_t be32(const uint8_t* p) {
    return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

std::string hex32(uint32_t v) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "0x%08x", v);
    return buf;
}

void check_label(int32_t label, const std::string& where) {
    if (label < 0 || label > 9)
        throw FormatError(where + ": label " + std::to_string(label) + " out of range [0, 10)");
}

bool exists(const std::string& p) {
    std::error_code ec;
    return std::filesystem::exists(p, ec);
}

// Returns path or path.gz, whichever exists; empty string if neither does.
std::string with_gz_fallback(const std::string& path) {
    if (exists(path + ".gz")) return path + ".gz";
    if (exists(path)) return path;
    return "";
}

}  // namespace

RawImages load_idx(const std::string& images_path, const std::string& labels_path) {
    const std::vector<uint8_t> img = read_all(images_path);
    if (img.size() < 16) throw FormatError(images_path + ": truncated IDX header");
    const uint32_t magic = be32(img.data());
    if (magic != 0x00000803)
        throw FormatError(images_path + ": bad IDX magic " + hex32(magic) + " (expected 0x00000803)");
    const int64_t n = be32(img.data() + 4);
    const int64_t h = be32(img.data() + 8);
    const int64_t w = be32(img.data() + 12);
    const size_t want = 16 + size_t(n) * h * w;
    if (img.size() != want)
        throw FormatError(images_path + ": expected " + std::to_string(want) + " bytes for " +
                          std::to_string(n) + " images of " + std::to_string(h) + "x" + std::to_string(w) +
                          ", got " + std::to_string(img.size()));

    const std::vector<uint8_t> lab = read_all(labels_path);
    if (lab.size() < 8) throw FormatError(labels_path + ": truncated IDX header");
    const uint32_t lmagic = be32(lab.data());
    if (lmagic != 0x00000801)
        throw FormatError(labels_path + ": bad IDX magic " + hex32(lmagic) + " (expected 0x00000801)");
    const int64_t ln = be32(lab.data() + 4);
    if (ln != n)
        throw FormatError(labels_path + " holds " + std::to_string(ln) + " labels but " + images_path +
                          " holds " + std::to_string(n) + " images");
    if (lab.size() != 8 + size_t(n))
        throw FormatError(labels_path + ": expected " + std::to_string(8 + n) + " bytes, got " +
                          std::to_string(lab.size()));

    RawImages raw;
    raw.n = n;
    raw.c = 1;
    raw.h = h;
    raw.w = w;
    raw.pixels.assign(img.begin() + 16, img.end());
    raw.labels.resize(n);
    for (int64_t i = 0; i < n; ++i) {
        raw.labels[i] = lab[8 + i];
        check_label(raw.labels[i], labels_path + " entry " + std::to_string(i));
    }
    return raw;
}

RawImages load_cifar10(const std::vector<std::string>& batch_files) {
    constexpr int64_t kRecord = 3073;  // 1 label byte + 32*32 R + G + B planes
    RawImages raw;
    raw.c = 3;
    raw.h = 32;
    raw.w = 32;
    for (const auto& path : batch_files) {
        const std::vector<uint8_t> bytes = read_all(path);
        if (bytes.size() % kRecord != 0)
            throw FormatError(path + ": size " + std::to_string(bytes.size()) +
                              " is not a multiple of the " + std::to_string(kRecord) +
                              "-byte record (partial record at byte offset " +
                              std::to_string(bytes.size() - bytes.size() % kRecord) + ")");
        const int64_t records = bytes.size() / kRecord;
        for (int64_t r = 0; r < records; ++r) {
            const uint8_t* rec = bytes.data() + r * kRecord;
            const int32_t label = rec[0];
            check_label(label, path + " record " + std::to_string(r) + " (byte offset " +
                                   std::to_string(r * kRecord) + ")");
            raw.labels.push_back(label);
            raw.pixels.insert(raw.pixels.end(), rec + 1, rec + kRecord);
        }
        raw.n += records;
    }
    if (raw.n == 0) throw FormatError("cifar10: no records found");
    return raw;
}

RawImages load_raw_dataset(const std::string& name, const std::string& data_dir,
                           const std::string& split) {
    if (split != "train" && split != "test")
        throw Error(Error::kInvalidArgument, "unknown split '" + split + "' (expected train or test)");

    if (name == "fashion-mnist") {
        const std::string prefix = split == "train" ? "train" : "t10k";
        const std::vector<std::string> dirs = {data_dir + "/fashion-mnist/",
                                               data_dir + "/FashionMNIST/raw/", data_dir + "/"};
        for (const auto& dir : dirs) {
            const std::string images = with_gz_fallback(dir + prefix + "-images-idx3-ubyte");
            const std::string labels = with_gz_fallback(dir + prefix + "-labels-idx1-ubyte");
            if (!images.empty() && !labels.empty()) return load_idx(images, labels);
        }
        throw FormatError("fashion-mnist " + split + " split not found under " + data_dir +
                          " (tried fashion-mnist/, FashionMNIST/raw/ and the directory itself; run "
                          "scripts/fetch_data.sh to download it)");
    }

    if (name == "cifar10") {
        const std::vector<std::string> dirs = {data_dir + "/cifar-10-batches-bin/",
                                               data_dir + "/cifar10/", data_dir + "/"};
        const std::vector<std::string> names =
            split == "train"
                ? std::vector<std::string>{"data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin",
                                           "data_batch_4.bin", "data_batch_5.bin"}
                : std::vector<std::string>{"test_batch.bin"};
        for (const auto& dir : dirs) {
            if (with_gz_fallback(dir + names[0]).empty()) continue;
            std::vector<std::string> files;
            for (const auto& base : names) {
                const std::string p = with_gz_fallback(dir + base);
                if (p.empty()) throw FormatError("cifar10: missing " + dir + base);
                files.push_back(p);
            }
            return load_cifar10(files);
        }
        throw FormatError("cifar10 " + split + " split not found under " + data_dir +
                          " (tried cifar-10-batches-bin/, cifar10/ and the directory itself; run "
                          "scripts/fetch_data.sh to download it)");
    }

    throw Error(Error::kInvalidArgument,
                "unknown dataset '" + name + "' (expected fashion-mnist or cifar10)");
}

}  // namespace kanmix
