// kanmix: train / search / stats / report for the KAN-Mixers experiments.
//
// Flag precedence is flags > --config file > built-in defaults. The merged
// config is handed to libkanmix as JSON; this binary never touches the C++
// core directly.

#include <cstdint>
#include <fstream>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "kanmix.h"

namespace {

using nlohmann::json;

// Collects "flag was actually given" overrides for one subcommand.
struct CommandArgs {
    CLI::App* cmd = nullptr;
    std::string config_path;
    std::vector<std::function<void(json&)>> appliers;

    template <typename T>
    void opt(const std::string& flag, const std::string& key, T& slot, const std::string& help) {
        auto* o = cmd->add_option(flag, slot, help);
        appliers.push_back([o, key, &slot](json& j) {
            if (o->count()) j[key] = slot;
        });
    }

    void flag(const std::string& name, const std::string& key, bool value, const std::string& help) {
        auto* o = cmd->add_flag(name, help);
        appliers.push_back([o, key, value](json& j) {
            if (o->count()) j[key] = value;
        });
    }

    json merged(const std::string& command) const {
        json j = json::object();
        if (!config_path.empty()) {
            std::ifstream f(config_path);
            if (!f) {
                std::cerr << "error: cannot open config file " << config_path << "\n";
                std::exit(KANMIX_ERR_MISSING_INPUT);
            }
            j = json::parse(f, nullptr, false);
            if (j.is_discarded()) {
                std::cerr << "error: " << config_path << " is not valid JSON\n";
                std::exit(KANMIX_ERR_MISSING_INPUT);
            }
        }
        for (const auto& apply : appliers) apply(j);
        j["command"] = command;
        return j;
    }
};

struct Flags {
    std::string dataset, model, data_dir, out_dir, precision, reference, results_dir;
    int64_t epochs = 0, batch_size = 0, folds = 0, fold = 0, workers = 0, subset = 0;
    int64_t dim = 0, depth = 0, patch_size = 0, token_hidden = 0, channel_hidden = 0, trials = 0;
    uint64_t seed = 0;
    double lr = 0, dropout = 0;
    std::vector<double> alphas;
    std::vector<std::string> models;
};

void add_common(CommandArgs& a, Flags& f) {
    a.cmd->add_option("--config", a.config_path, "JSON config file; flags override its values");
    a.opt("--dataset", "dataset", f.dataset, "fashion-mnist or cifar10");
    a.opt("--seed", "seed", f.seed, "run seed (default 42)");
    a.opt("--data-dir", "data_dir", f.data_dir, "dataset root (default: $KANMIX_DATA_DIR)");
    a.opt("--out-dir", "out_dir", f.out_dir, "results root (default: results)");
    a.flag("--deterministic", "deterministic", true, "serial kernels, reproducible byte-for-byte");
    a.opt("--workers", "workers", f.workers, "parallel fold workers (default 1)");
    a.opt("--precision", "precision", f.precision, "f32 (default) or f64");
}

void add_train_like(CommandArgs& a, Flags& f) {
    a.opt("--model", "model", f.model, "kan-mixers, mlp-mixer, mlp or kan");
    a.opt("--epochs", "epochs", f.epochs, "training epochs (default 50)");
    a.opt("--batch-size", "batch_size", f.batch_size, "batch size (default 64)");
    a.opt("--lr", "lr", f.lr, "learning rate (default: per-model)");
    a.opt("--folds", "folds", f.folds, "cross-validation folds (default 5)");
    a.opt("--subset", "subset", f.subset, "use only the first N training images");
    a.opt("--dim", "dim", f.dim, "mixer channel width (default 256)");
    a.opt("--depth", "depth", f.depth, "mixer blocks (default 8)");
    a.opt("--patch-size", "patch_size", f.patch_size, "patch edge in pixels (default 4)");
    a.opt("--dropout", "dropout", f.dropout, "dropout rate (default 0.1)");
    a.opt("--token-hidden", "token_hidden", f.token_hidden, "token-mixing hidden width (default: tokens)");
    a.opt("--channel-hidden", "channel_hidden", f.channel_hidden,
          "channel-mixing hidden width (default: 2*dim)");
    a.flag("--no-augment", "augment", false, "disable flip/rotation augmentation");
    a.flag("--linear-embed", "linear_embed", true, "plain linear patch embedding (ablation)");
}

int run(const json& config) {
    kanmix_context* ctx = kanmix_context_new();
    if (!ctx) {
        std::cerr << "error: out of memory\n";
        return KANMIX_ERR_RUNTIME;
    }
    const int status = kanmix_run(ctx, config.dump().c_str());
    if (status != KANMIX_OK) std::cerr << "error: " << kanmix_last_error(ctx) << "\n";
    kanmix_context_free(ctx);
    return status;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"KAN-Mixers experiment runner"};
    app.require_subcommand(1);
    app.set_version_flag("--version", []() { return std::string(kanmix_version()); });

    Flags f;
    CommandArgs train{app.add_subcommand("train", "k-fold training for one model/dataset")};
    add_common(train, f);
    add_train_like(train, f);
    train.opt("--fold", "fold", f.fold, "train only this fold index");
    train.flag("--eval-test", "eval_test", true, "also evaluate each fold's model on the test split");

    CommandArgs search{app.add_subcommand("search", "random-search hyperparameter optimization")};
    add_common(search, f);
    add_train_like(search, f);
    search.opt("--trials", "trials", f.trials, "sampled configurations (default 10)");
    search.flag("--log-lr", "log_lr", true, "sample lr log-uniformly instead of uniformly");

    CommandArgs stats{app.add_subcommand("stats", "Wilcoxon significance table from results")};
    add_common(stats, f);
    stats.opt("--alpha", "alphas", f.alphas, "significance levels (default 0.05,0.10)");
    stats.cmd->get_option("--alpha")->delimiter(',');
    stats.opt("--reference", "reference", f.reference, "reference model (default kan-mixers)");
    stats.opt("--models", "models", f.models, "models to compare (default: all found)");
    stats.cmd->get_option("--models")->delimiter(',');
    stats.opt("--results-dir", "results_dir", f.results_dir, "results root to read (default: --out-dir)");

    CommandArgs report{app.add_subcommand("report", "violin/strip plot CSV + SVG from results")};
    add_common(report, f);
    report.opt("--models", "models", f.models, "models to include (default: all found)");
    report.cmd->get_option("--models")->delimiter(',');
    report.opt("--results-dir", "results_dir", f.results_dir, "results root to read (default: --out-dir)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help() << "\n";
        return KANMIX_ERR_USAGE;
    }

    for (const CommandArgs* c : {&train, &search, &stats, &report})
        if (c->cmd->parsed()) return run(c->merged(c->cmd->get_name()));
    return KANMIX_ERR_USAGE;
}
