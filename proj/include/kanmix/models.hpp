#pragma once

// The KAN-Mixers architecture and its three comparison models (MLP-Mixer,
// MLP, KAN), plus bitwise-exact checkpointing.

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "kanmix/spline.hpp"
#include "kanmix/tensor.hpp"

namespace kanmix {

enum class ModelKind { kKanMixers, kMlpMixer, kMlp, kKan };

inline std::string to_string(ModelKind kind) {
    switch (kind) {
        case ModelKind::kKanMixers: return "kan-mixers";
        case ModelKind::kMlpMixer: return "mlp-mixer";
        case ModelKind::kMlp: return "mlp";
        case ModelKind::kKan: return "kan";
    }
    return "?";
}

inline ModelKind model_kind_from_string(const std::string& s) {
    if (s == "kan-mixers") return ModelKind::kKanMixers;
    if (s == "mlp-mixer") return ModelKind::kMlpMixer;
    if (s == "mlp") return ModelKind::kMlp;
    if (s == "kan") return ModelKind::kKan;
    throw Error(Error::kInvalidArgument, "unknown model kind '" + s +
                                             "' (expected kan-mixers, mlp-mixer, mlp or kan)");
}

struct KanOptions {
    int64_t grid_size = 5;
    int64_t degree = 3;
    double x_min = -1.0;
    double x_max = 1.0;
    double init_noise = 0.1;
};

struct MixerConfig {
    int64_t image_size = 32;
    int64_t in_channels = 1;
    int64_t patch_size = 4;
    int64_t dim = 256;
    int64_t depth = 8;
    int64_t token_hidden = 0;    // 0: resolved to the token count S
    int64_t channel_hidden = 0;  // 0: resolved to 2*dim
    double dropout_rate = 0.1;
    int64_t num_classes = 10;
    bool linear_patch_embed = false;  // ablation switch; default is a KAN embedding
    KanOptions kan;

    int64_t tokens() const {
        const int64_t g = image_size / patch_size;
        return g * g;
    }
    int64_t patch_dim() const { return patch_size * patch_size * in_channels; }

    void validate() const {
        if (patch_size < 1 || image_size < 1 || image_size % patch_size != 0)
            throw Error(Error::kInvalidArgument,
                        "image_size " + std::to_string(image_size) + " must be divisible by patch_size " +
                            std::to_string(patch_size));
        if (depth < 1 || dim < 1 || num_classes < 1 || in_channels < 1)
            throw Error(Error::kInvalidArgument, "mixer config extents must be positive");
        if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
            throw Error(Error::kInvalidArgument, "dropout_rate must be in [0,1)");
    }

    // Fill the derived defaults so a stored config rebuilds identically.
    MixerConfig resolved() const {
        validate();
        MixerConfig c = *this;
        if (c.token_hidden == 0) c.token_hidden = c.tokens();
        if (c.channel_hidden == 0) c.channel_hidden = 2 * c.dim;
        return c;
    }
};

inline void to_json(nlohmann::json& j, const KanOptions& k) {
    j = {{"grid_size", k.grid_size}, {"degree", k.degree}, {"x_min", k.x_min},
         {"x_max", k.x_max},         {"init_noise", k.init_noise}};
}
inline void from_json(const nlohmann::json& j, KanOptions& k) {
    k.grid_size = j.value("grid_size", k.grid_size);
    k.degree = j.value("degree", k.degree);
    k.x_min = j.value("x_min", k.x_min);
    k.x_max = j.value("x_max", k.x_max);
    k.init_noise = j.value("init_noise", k.init_noise);
}
inline void to_json(nlohmann::json& j, const MixerConfig& c) {
    j = {{"image_size", c.image_size},
         {"in_channels", c.in_channels},
         {"patch_size", c.patch_size},
         {"dim", c.dim},
         {"depth", c.depth},
         {"token_hidden", c.token_hidden},
         {"channel_hidden", c.channel_hidden},
         {"dropout_rate", c.dropout_rate},
         {"num_classes", c.num_classes},
         {"linear_patch_embed", c.linear_patch_embed},
         {"kan", c.kan}};
}
inline void from_json(const nlohmann::json& j, MixerConfig& c) {
    c.image_size = j.value("image_size", c.image_size);
    c.in_channels = j.value("in_channels", c.in_channels);
    c.patch_size = j.value("patch_size", c.patch_size);
    c.dim = j.value("dim", c.dim);
    c.depth = j.value("depth", c.depth);
    c.token_hidden = j.value("token_hidden", c.token_hidden);
    c.channel_hidden = j.value("channel_hidden", c.channel_hidden);
    c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
    c.num_classes = j.value("num_classes", c.num_classes);
    c.linear_patch_embed = j.value("linear_patch_embed", c.linear_patch_embed);
    if (j.contains("kan")) c.kan = j.at("kan").get<KanOptions>();
}

template <typename T>
SplineGrid<T> make_grid(const KanOptions& k) {
    return SplineGrid<T>::make(static_cast<T>(k.x_min), static_cast<T>(k.x_max), k.grid_size, k.degree);
}

// One dense unit: a KanLinear or a plain linear layer, chosen per model kind.
template <typename T>
struct DenseLayer {
    bool is_kan = true;
    KanLinear<T> kan;
    Tensor<T> weight;  // [out, in], linear case
    Tensor<T> bias;    // [out]

    Tensor<T> forward(const Tensor<T>& x) const {
        return is_kan ? kan_linear_forward(kan, x) : linear(x, weight, bias);
    }
    int64_t param_count() const {
        return is_kan ? kan.param_count() : weight.size() + bias.size();
    }
};

template <typename T>
DenseLayer<T> make_dense(bool is_kan, int64_t n_in, int64_t n_out, const KanOptions& opts, Rng& rng) {
    DenseLayer<T> d;
    d.is_kan = is_kan;
    if (is_kan) {
        d.kan = init_kan_linear<T>(n_in, n_out, make_grid<T>(opts), rng, opts.init_noise);
    } else {
        // U(-1/sqrt(fan_in), +1/sqrt(fan_in)) for weight and bias
        const double bound = 1.0 / std::sqrt(static_cast<double>(n_in));
        d.weight = Tensor<T>(Shape{n_out, n_in});
        for (auto& w : d.weight.values()) w = static_cast<T>(rng.uniform(-bound, bound));
        d.bias = Tensor<T>(Shape{n_out});
        for (auto& b : d.bias.values()) b = static_cast<T>(rng.uniform(-bound, bound));
    }
    return d;
}

template <typename T>
struct NormParams {
    Tensor<T> gamma;
    Tensor<T> beta;
};

template <typename T>
NormParams<T> make_norm(int64_t d) {
    return NormParams<T>{Tensor<T>(Shape{d}, T(1)), Tensor<T>(Shape{d}, T(0))};
}

template <typename T>
struct MixerBlock {
    NormParams<T> norm1, norm2;
    DenseLayer<T> token_in, token_out;      // S -> token_hidden -> S
    DenseLayer<T> channel_in, channel_out;  // C -> channel_hidden -> C
};

struct ForwardCtx {
    bool training = false;
    Rng* dropout_rng = nullptr;
};

namespace detail {
template <typename T>
Tensor<T> mix_pair(const DenseLayer<T>& in, const DenseLayer<T>& out, const Tensor<T>& x,
                   double dropout_rate, const ForwardCtx& ctx) {
    Tensor<T> h = in.forward(x);
    if (!in.is_kan) h = gelu(h);
    if (ctx.training && dropout_rate > 0.0)
        h = dropout(h, dropout_rate, true, *ctx.dropout_rng);
    return out.forward(h);
}
}  // namespace detail

// Token mixing on the transposed tokens, then channel mixing, each with a
// residual skip. Normalization runs over the channel axis before the
// transposition.
template <typename T>
Tensor<T> mixer_block_forward(const MixerBlock<T>& block, const Tensor<T>& x, double dropout_rate,
                              const ForwardCtx& ctx) {
    const int64_t b = x.dim(0), s = x.dim(1), c = x.dim(2);
    constexpr T kEps = T(1e-5);

    Tensor<T> t = transpose_tokens(layer_norm(x, block.norm1.gamma, block.norm1.beta, kEps));
    Tensor<T> h = detail::mix_pair(block.token_in, block.token_out,
                                   reshape(t, Shape{b * c, s}), dropout_rate, ctx);
    Tensor<T> u = add(x, transpose_tokens(reshape(h, Shape{b, c, s})));

    Tensor<T> v = layer_norm(u, block.norm2.gamma, block.norm2.beta, kEps);
    Tensor<T> h2 = detail::mix_pair(block.channel_in, block.channel_out,
                                    reshape(v, Shape{b * s, c}), dropout_rate, ctx);
    return add(u, reshape(h2, Shape{b, s, c}));
}

template <typename T>
struct NamedParam {
    std::string name;
    Tensor<T> tensor;
};

template <typename T>
struct Model {
    ModelKind kind = ModelKind::kKanMixers;
    MixerConfig config;  // resolved; flat baselines use image/channel/class fields
    uint64_t init_seed = 0;

    // mixer layout
    DenseLayer<T> embed;
    std::vector<MixerBlock<T>> blocks;
    DenseLayer<T> head;
    // flat baselines (mlp, kan): dense stack applied to the flattened image
    std::vector<DenseLayer<T>> stack;

    bool is_mixer() const { return kind == ModelKind::kKanMixers || kind == ModelKind::kMlpMixer; }

    Tensor<T> forward(const Tensor<T>& images, const ForwardCtx& ctx) const {
        const int64_t b = images.dim(0);
        if (is_mixer()) {
            const int64_t s = config.tokens();
            Tensor<T> tokens = patchify(images, config.patch_size);
            Tensor<T> h = embed.forward(reshape(tokens, Shape{b * s, config.patch_dim()}));
            h = reshape(h, Shape{b, s, config.dim});
            for (const auto& block : blocks)
                h = mixer_block_forward(block, h, config.dropout_rate, ctx);
            return head.forward(global_mean_pool(h));
        }
        Tensor<T> h = reshape(images, Shape{b, images.size() / b});
        for (size_t i = 0; i < stack.size(); ++i) {
            h = stack[i].forward(h);
            // plain-MLP hidden layers get a fixed nonlinearity; KAN layers do not
            if (kind == ModelKind::kMlp && i + 1 < stack.size()) h = relu(h);
        }
        return h;
    }

    std::vector<NamedParam<T>> params() const {
        std::vector<NamedParam<T>> out;
        auto add_dense = [&out](const std::string& prefix, const DenseLayer<T>& d) {
            if (d.is_kan) {
                out.push_back({prefix + ".base_weight", d.kan.base_weight});
                out.push_back({prefix + ".spline_weight", d.kan.spline_weight});
            } else {
                out.push_back({prefix + ".weight", d.weight});
                out.push_back({prefix + ".bias", d.bias});
            }
        };
        if (is_mixer()) {
            add_dense("embed", embed);
            for (size_t i = 0; i < blocks.size(); ++i) {
                const std::string p = "blocks." + std::to_string(i);
                out.push_back({p + ".norm1.gamma", blocks[i].norm1.gamma});
                out.push_back({p + ".norm1.beta", blocks[i].norm1.beta});
                add_dense(p + ".token_in", blocks[i].token_in);
                add_dense(p + ".token_out", blocks[i].token_out);
                out.push_back({p + ".norm2.gamma", blocks[i].norm2.gamma});
                out.push_back({p + ".norm2.beta", blocks[i].norm2.beta});
                add_dense(p + ".channel_in", blocks[i].channel_in);
                add_dense(p + ".channel_out", blocks[i].channel_out);
            }
            add_dense("head", head);
        } else {
            for (size_t i = 0; i < stack.size(); ++i) add_dense("stack." + std::to_string(i), stack[i]);
        }
        return out;
    }

    void set_requires_grad(bool v) {
        for (auto& p : params()) p.tensor.set_requires_grad(v);
    }
};

template <typename T>
int64_t count_params(const Model<T>& model) {
    int64_t n = 0;
    for (const auto& p : model.params()) n += p.tensor.size();
    return n;
}

// mlp: flatten -> 256 -> 128 -> classes (ReLU between); kan: flatten -> 64 ->
// classes with KanLinear layers; the mixers share one MixerConfig and differ
// only in layer kind.
template <typename T>
Model<T> build_model(ModelKind kind, const MixerConfig& config, uint64_t seed) {
    Model<T> model;
    model.kind = kind;
    model.config = config.resolved();
    model.init_seed = seed;
    Rng rng(seed);
    const MixerConfig& cfg = model.config;
    const bool kan_layers = kind == ModelKind::kKanMixers;

    switch (kind) {
        case ModelKind::kKanMixers:
        case ModelKind::kMlpMixer: {
            const int64_t s = cfg.tokens();
            model.embed = make_dense<T>(kan_layers && !cfg.linear_patch_embed, cfg.patch_dim(), cfg.dim,
                                        cfg.kan, rng);
            for (int64_t i = 0; i < cfg.depth; ++i) {
                MixerBlock<T> block;
                block.norm1 = make_norm<T>(cfg.dim);
                block.norm2 = make_norm<T>(cfg.dim);
                block.token_in = make_dense<T>(kan_layers, s, cfg.token_hidden, cfg.kan, rng);
                block.token_out = make_dense<T>(kan_layers, cfg.token_hidden, s, cfg.kan, rng);
                block.channel_in = make_dense<T>(kan_layers, cfg.dim, cfg.channel_hidden, cfg.kan, rng);
                block.channel_out = make_dense<T>(kan_layers, cfg.channel_hidden, cfg.dim, cfg.kan, rng);
                model.blocks.push_back(std::move(block));
            }
            model.head = make_dense<T>(kan_layers, cfg.dim, cfg.num_classes, cfg.kan, rng);
            break;
        }
        case ModelKind::kMlp: {
            const int64_t in = cfg.in_channels * cfg.image_size * cfg.image_size;
            model.stack.push_back(make_dense<T>(false, in, 256, cfg.kan, rng));
            model.stack.push_back(make_dense<T>(false, 256, 128, cfg.kan, rng));
            model.stack.push_back(make_dense<T>(false, 128, cfg.num_classes, cfg.kan, rng));
            break;
        }
        case ModelKind::kKan: {
            const int64_t in = cfg.in_channels * cfg.image_size * cfg.image_size;
            model.stack.push_back(make_dense<T>(true, in, 64, cfg.kan, rng));
            model.stack.push_back(make_dense<T>(true, 64, cfg.num_classes, cfg.kan, rng));
            break;
        }
    }
    return model;
}

// ---------------------------------------------------------------------------
// Checkpointing: <stem>.json manifest + <stem>.bin little-endian scalar blob.
// Round-trips bitwise.
// ---------------------------------------------------------------------------

template <typename T>
constexpr const char* precision_name() {
    return sizeof(T) == 4 ? "f32" : "f64";
}

template <typename T>
void save_checkpoint(const Model<T>& model, const std::string& stem) {
    nlohmann::json manifest;
    manifest["format"] = "kanmix-checkpoint";
    manifest["version"] = 1;
    manifest["model"] = to_string(model.kind);
    manifest["precision"] = precision_name<T>();
    manifest["seed"] = model.init_seed;
    manifest["byte_order"] = "little-endian";
    manifest["config"] = model.config;

    auto params = model.params();
    nlohmann::json plist = nlohmann::json::array();
    int64_t offset = 0;
    for (const auto& p : params) {
        plist.push_back({{"name", p.name},
                         {"shape", p.tensor.shape()},
                         {"offset_bytes", offset},
                         {"count", p.tensor.size()}});
        offset += p.tensor.size() * static_cast<int64_t>(sizeof(T));
    }
    manifest["params"] = plist;
    manifest["blob_bytes"] = offset;

    std::ofstream jf(stem + ".json");
    if (!jf) throw FormatError("cannot write checkpoint manifest " + stem + ".json");
    jf << manifest.dump(2) << "\n";

    std::ofstream bf(stem + ".bin", std::ios::binary);
    if (!bf) throw FormatError("cannot write checkpoint blob " + stem + ".bin");
    for (const auto& p : params)
        bf.write(reinterpret_cast<const char*>(p.tensor.values().data()),
                 static_cast<std::streamsize>(p.tensor.size() * sizeof(T)));
}

template <typename T>
Model<T> load_checkpoint(const std::string& stem) {
    std::ifstream jf(stem + ".json");
    if (!jf) throw FormatError("cannot open checkpoint manifest " + stem + ".json");
    nlohmann::json manifest = nlohmann::json::parse(jf, nullptr, /*allow_exceptions=*/false);
    if (manifest.is_discarded())
        throw FormatError("checkpoint manifest " + stem + ".json is not valid JSON");
    if (manifest.value("format", "") != "kanmix-checkpoint")
        throw FormatError("not a checkpoint manifest: " + stem + ".json");
    if (manifest.value("precision", "") != precision_name<T>())
        throw FormatError("checkpoint precision " + manifest.value("precision", std::string("?")) +
                          " does not match requested " + precision_name<T>());

    const ModelKind kind = model_kind_from_string(manifest.at("model").get<std::string>());
    const MixerConfig config = manifest.at("config").get<MixerConfig>();
    Model<T> model = build_model<T>(kind, config, manifest.value("seed", uint64_t{0}));

    std::ifstream bf(stem + ".bin", std::ios::binary);
    if (!bf) throw FormatError("cannot open checkpoint blob " + stem + ".bin");
    auto params = model.params();
    const auto& plist = manifest.at("params");
    if (plist.size() != params.size())
        throw FormatError("checkpoint lists " + std::to_string(plist.size()) + " parameters, model has " +
                          std::to_string(params.size()));
    for (size_t i = 0; i < params.size(); ++i) {
        const auto& entry = plist[i];
        if (entry.at("name").get<std::string>() != params[i].name)
            throw FormatError("checkpoint parameter order mismatch at '" + params[i].name + "'");
        const int64_t count = entry.at("count").get<int64_t>();
        if (count != params[i].tensor.size())
            throw FormatError("checkpoint parameter '" + params[i].name + "' extent mismatch");
        bf.seekg(entry.at("offset_bytes").get<int64_t>());
        bf.read(reinterpret_cast<char*>(params[i].tensor.values().data()),
                static_cast<std::streamsize>(count * sizeof(T)));
        if (!bf) throw FormatError("checkpoint blob " + stem + ".bin truncated at '" + params[i].name + "'");
    }
    return model;
}

}  // namespace kanmix
