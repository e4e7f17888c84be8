/* Public C API of libkanmix.
 *
 * All entry points are exception-free. Functions taking a kanmix_context
 * report failures through their return value (NULL or a nonzero status) and
 * leave a message readable via kanmix_last_error until the next call on the
 * same context. Contexts and handles are not thread-safe individually; use
 * one context per thread.
 *
 * Status codes follow the CLI exit-code contract:
 *   0 success, 1 runtime failure, 2 missing/unreadable input,
 *   3 invalid pairing, 64 usage error.
 */
#ifndef KANMIX_H
#define KANMIX_H

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#define KANMIX_OK 0
#define KANMIX_ERR_RUNTIME 1
#define KANMIX_ERR_MISSING_INPUT 2
#define KANMIX_ERR_BAD_PAIRING 3
#define KANMIX_ERR_USAGE 64

typedef struct kanmix_context kanmix_context;
typedef struct kanmix_dataset kanmix_dataset;
typedef struct kanmix_model kanmix_model;

const char* kanmix_version(void);

kanmix_context* kanmix_context_new(void);
void kanmix_context_free(kanmix_context* ctx);
/* Message for the most recent failing call on ctx; "" when none. */
const char* kanmix_last_error(const kanmix_context* ctx);

/* Runs one command ("train", "search", "stats", "report") described by a
 * JSON config — the same schema the CLI accepts via --config. Returns a
 * status code. */
int kanmix_run(kanmix_context* ctx, const char* config_json);

/* Datasets: name is "fashion-mnist" or "cifar10", split "train" or "test".
 * Images come back scaled to [-1, 1]. */
kanmix_dataset* kanmix_dataset_open(kanmix_context* ctx, const char* name, const char* data_dir,
                                    const char* split);
void kanmix_dataset_free(kanmix_dataset* ds);
int64_t kanmix_dataset_size(const kanmix_dataset* ds);
void kanmix_dataset_shape(const kanmix_dataset* ds, int64_t* channels, int64_t* height,
                          int64_t* width);
/* Label of one example, or -1 if index is out of range. */
int32_t kanmix_dataset_label(const kanmix_dataset* ds, int64_t index);
/* Copies example `index` ([-1,1] floats, channels*height*width values) into
 * out. Returns a status code. */
int kanmix_dataset_image(kanmix_context* ctx, const kanmix_dataset* ds, int64_t index, float* out);

/* Models (single precision). config_json example:
 *   {"model": "kan-mixers", "seed": 42, "config": {"dim": 256, "depth": 8,
 *    "patch_size": 4, "in_channels": 1}}
 * The inner "config" object accepts the same fields as a checkpoint
 * manifest's config block. */
kanmix_model* kanmix_model_build(kanmix_context* ctx, const char* config_json);
/* Loads <stem>.json + <stem>.bin written by kanmix_model_save or a training
 * run's fold checkpoints. */
kanmix_model* kanmix_model_load(kanmix_context* ctx, const char* stem);
int kanmix_model_save(kanmix_context* ctx, const kanmix_model* model, const char* stem);
void kanmix_model_free(kanmix_model* model);
int64_t kanmix_model_param_count(const kanmix_model* model);
/* "kan-mixers", "mlp-mixer", "mlp" or "kan". */
const char* kanmix_model_kind(const kanmix_model* model);
/* Classifies a batch of images ([-1,1] floats, shape batch x channels x
 * height x width matching the model's config). Writes batch x num_classes
 * softmax probabilities to probs_out. Returns a status code. */
int kanmix_model_predict(kanmix_context* ctx, const kanmix_model* model, const float* images,
                         int64_t batch, int64_t channels, int64_t height, int64_t width,
                         float* probs_out);

#ifdef __cplusplus
}
#endif

#endif /* KANMIX_H */
