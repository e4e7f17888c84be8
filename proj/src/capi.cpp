// The extern-C surface. Every entry point catches, records the message on
// the context, and maps kanmix::Error codes onto the CLI exit-code contract.

#include "kanmix.h"

#include <cmath>
#include <cstring>
#include <string>

#include "kanmix/data.hpp"
#include "kanmix/models.hpp"
#include "kanmix/runner.hpp"

using kanmix::Error;

struct kanmix_context {
    std::string last_error;
};

struct kanmix_dataset {
    kanmix::ImageDataset<float> data;
};

struct kanmix_model {
    kanmix::Model<float> model;
    std::string kind_name;
};

namespace {

int record(kanmix_context* ctx, const std::exception& e) {
    int code = KANMIX_ERR_RUNTIME;
    if (const auto* err = dynamic_cast<const Error*>(&e)) code = err->code();
    if (ctx) ctx->last_error = e.what();
    return code;
}

template <typename F>
int guarded(kanmix_context* ctx, F&& fn) {
    if (!ctx) return KANMIX_ERR_USAGE;
    try {
        ctx->last_error.clear();
        fn();
        return KANMIX_OK;
    } catch (const std::exception& e) {
        return record(ctx, e);
    } catch (...) {
        if (ctx) ctx->last_error = "unknown error";
        return KANMIX_ERR_RUNTIME;
    }
}

}  // namespace

extern "C" {

const char* kanmix_version(void) {
    static const std::string v = kanmix::version_string();
    return v.c_str();
}

kanmix_context* kanmix_context_new(void) { return new (std::nothrow) kanmix_context; }

void kanmix_context_free(kanmix_context* ctx) { delete ctx; }

const char* kanmix_last_error(const kanmix_context* ctx) {
    return ctx ? ctx->last_error.c_str() : "null context";
}

int kanmix_run(kanmix_context* ctx, const char* config_json) {
    return guarded(ctx, [&] {
        if (!config_json) throw Error(Error::kInvalidArgument, "config_json is null");
        nlohmann::json j = nlohmann::json::parse(config_json, nullptr, false);
        if (j.is_discarded()) throw Error(Error::kInvalidArgument, "config is not valid JSON");
        kanmix::RunConfig cfg = j.get<kanmix::RunConfig>();
        kanmix::run_command(cfg);
    });
}

kanmix_dataset* kanmix_dataset_open(kanmix_context* ctx, const char* name, const char* data_dir,
                                    const char* split) {
    kanmix_dataset* out = nullptr;
    guarded(ctx, [&] {
        if (!name || !data_dir || !split)
            throw Error(Error::kInvalidArgument, "dataset name, data_dir and split are required");
        auto ds = new kanmix_dataset;
        ds->data = kanmix::load_dataset<float>(name, data_dir, split);
        out = ds;
    });
    return out;
}

void kanmix_dataset_free(kanmix_dataset* ds) { delete ds; }

int64_t kanmix_dataset_size(const kanmix_dataset* ds) { return ds ? ds->data.n : 0; }

void kanmix_dataset_shape(const kanmix_dataset* ds, int64_t* channels, int64_t* height,
                          int64_t* width) {
    if (channels) *channels = ds ? ds->data.c : 0;
    if (height) *height = ds ? ds->data.h : 0;
    if (width) *width = ds ? ds->data.w : 0;
}

int32_t kanmix_dataset_label(const kanmix_dataset* ds, int64_t index) {
    if (!ds || index < 0 || index >= ds->data.n) return -1;
    return ds->data.labels[index];
}

int kanmix_dataset_image(kanmix_context* ctx, const kanmix_dataset* ds, int64_t index, float* out) {
    return guarded(ctx, [&] {
        if (!ds || !out) throw Error(Error::kInvalidArgument, "dataset and out buffer are required");
        if (index < 0 || index >= ds->data.n)
            throw Error(Error::kInvalidArgument, "index " + std::to_string(index) +
                                                     " out of range for dataset of " +
                                                     std::to_string(ds->data.n));
        std::memcpy(out, ds->data.image(index), sizeof(float) * ds->data.image_size());
    });
}

kanmix_model* kanmix_model_build(kanmix_context* ctx, const char* config_json) {
    kanmix_model* out = nullptr;
    guarded(ctx, [&] {
        if (!config_json) throw Error(Error::kInvalidArgument, "config_json is null");
        nlohmann::json j = nlohmann::json::parse(config_json, nullptr, false);
        if (j.is_discarded()) throw Error(Error::kInvalidArgument, "config is not valid JSON");
        const auto kind = kanmix::model_kind_from_string(j.value("model", std::string("kan-mixers")));
        kanmix::MixerConfig config;
        if (j.contains("config")) config = j.at("config").get<kanmix::MixerConfig>();
        const uint64_t seed = j.value("seed", uint64_t{42});
        auto m = new kanmix_model;
        m->model = kanmix::build_model<float>(kind, config, seed);
        m->kind_name = kanmix::to_string(kind);
        out = m;
    });
    return out;
}

kanmix_model* kanmix_model_load(kanmix_context* ctx, const char* stem) {
    kanmix_model* out = nullptr;
    guarded(ctx, [&] {
        if (!stem) throw Error(Error::kInvalidArgument, "checkpoint stem is null");
        auto m = new kanmix_model;
        m->model = kanmix::load_checkpoint<float>(stem);
        m->kind_name = kanmix::to_string(m->model.kind);
        out = m;
    });
    return out;
}

int kanmix_model_save(kanmix_context* ctx, const kanmix_model* model, const char* stem) {
    return guarded(ctx, [&] {
        if (!model || !stem) throw Error(Error::kInvalidArgument, "model and stem are required");
        kanmix::save_checkpoint(model->model, stem);
    });
}

void kanmix_model_free(kanmix_model* model) { delete model; }

int64_t kanmix_model_param_count(const kanmix_model* model) {
    return model ? kanmix::count_params(model->model) : 0;
}

const char* kanmix_model_kind(const kanmix_model* model) {
    return model ? model->kind_name.c_str() : "";
}

int kanmix_model_predict(kanmix_context* ctx, const kanmix_model* model, const float* images,
                         int64_t batch, int64_t channels, int64_t height, int64_t width,
                         float* probs_out) {
    return guarded(ctx, [&] {
        if (!model || !images || !probs_out)
            throw Error(Error::kInvalidArgument, "model, images and probs_out are required");
        if (batch < 1) throw Error(Error::kInvalidArgument, "batch must be >= 1");
        const auto& cfg = model->model.config;
        if (channels != cfg.in_channels || height != cfg.image_size || width != cfg.image_size)
            throw Error(Error::kInvalidArgument,
                        "input shape " + std::to_string(channels) + "x" + std::to_string(height) + "x" +
                            std::to_string(width) + " does not match model config " +
                            std::to_string(cfg.in_channels) + "x" + std::to_string(cfg.image_size) + "x" +
                            std::to_string(cfg.image_size));

        kanmix::GradPause<float> pause;
        kanmix::Tensor<float> x(kanmix::Shape{batch, channels, height, width},
                                std::vector<float>(images, images + batch * channels * height * width));
        kanmix::Rng unused(0);
        kanmix::Tensor<float> logits = model->model.forward(x, kanmix::ForwardCtx{false, &unused});
        const int64_t k = cfg.num_classes;
        for (int64_t i = 0; i < batch; ++i) {
            const float* row = logits.values().data() + i * k;
            float mx = row[0];
            for (int64_t c = 1; c < k; ++c) mx = std::max(mx, row[c]);
            double sum = 0.0;
            for (int64_t c = 0; c < k; ++c) sum += std::exp(double(row[c]) - mx);
            for (int64_t c = 0; c < k; ++c)
                probs_out[i * k + c] = static_cast<float>(std::exp(double(row[c]) - mx) / sum);
        }
    });
}

}  // extern "C"
