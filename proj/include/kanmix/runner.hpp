#pragma once

// Orchestration shared by the C API and the CLI: resolved run configuration,
// command dispatch, and the on-disk results tree.

#include <string>
#include <vector>

#include <json.hpp>

#include "kanmix/common.hpp"

namespace kanmix {

// Every knob a run can carry. Fields marked "resolved later" keep a sentinel
// until resolve() fills in the per-model default.
struct RunConfig {
    std::string command = "train";  // train | search | stats | report
    std::string dataset = "fashion-mnist";
    std::string model = "kan-mixers";
    int64_t epochs = -1;  // resolved later: 50
    int64_t batch_size = 64;
    double lr = -1.0;  // resolved later: per-model default
    int64_t folds = 5;
    int64_t fold = -1;  // >= 0 restricts training to a single fold
    uint64_t seed = 42;
    std::string data_dir;  // empty: fall back to KANMIX_DATA_DIR
    std::string out_dir = "results";
    bool deterministic = false;
    int64_t workers = 1;
    int64_t subset = 0;  // first N training images; 0 = all

    // architecture
    int64_t dim = 256;
    int64_t depth = 8;
    int64_t patch_size = 4;
    double dropout = 0.1;
    int64_t token_hidden = 0;    // 0: token count
    int64_t channel_hidden = 0;  // 0: 2*dim
    bool linear_embed = false;

    bool augment = true;
    std::string precision = "f32";  // f32 | f64
    bool eval_test = false;

    // search
    int64_t trials = 10;
    bool log_lr = false;

    // stats / report
    std::vector<double> alphas{0.05, 0.10};
    std::string reference = "kan-mixers";
    std::vector<std::string> models;  // empty: every model dir found
    std::string results_dir;          // empty: out_dir

    // Fills sentinels (lr, epochs, results_dir) and validates ranges.
    RunConfig resolved() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

// Runs one command to completion, writing the documented output tree.
// Throws kanmix::Error on failure; the caller maps codes to exit status.
void run_command(const RunConfig& config);

std::string version_string();

}  // namespace kanmix
