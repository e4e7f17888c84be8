// Command orchestration: dataset loading, the four subcommands, and the
// on-disk results tree
//
//   <out>/<dataset>/<model>/   fold_<i>.json, fold_<i>.ckpt.{json,bin},
//                              epochs.csv, summary.json, manifest.json, timing.json
//   <out>/<dataset>/search/    search_trials.json, best_config.json, manifest...
//   <out>/<dataset>/           significance.{csv,txt}, violin.{csv,svg}
//
// Wall-clock data lives only in manifest.json and timing.json, so every other
// file is byte-identical across reruns with the same seed.

#include "kanmix/runner.hpp"

#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>

#include "kanmix/data.hpp"
#include "kanmix/models.hpp"
#include "kanmix/stats.hpp"
#include "kanmix/train.hpp"

namespace fs = std::filesystem;

namespace kanmix {

std::string version_string() { return "kanmix 1.0.0"; }

RunConfig RunConfig::resolved() const {
    RunConfig c = *this;
    if (c.command != "train" && c.command != "search" && c.command != "stats" && c.command != "report")
        throw Error(Error::kInvalidArgument, "unknown command '" + c.command + "'");
    model_kind_from_string(c.model);  // validates
    if (c.epochs < 0) c.epochs = 50;
    if (c.lr < 0) c.lr = c.model == "kan-mixers" ? 0.00012820100418916918 : 0.001;
    if (!(c.lr > 0)) throw Error(Error::kInvalidArgument, "learning rate must be positive");
    if (c.batch_size < 1) throw Error(Error::kInvalidArgument, "batch size must be >= 1");
    if (c.folds < 2) throw Error(Error::kInvalidArgument, "k-fold needs at least 2 folds");
    if (c.subset < 0) throw Error(Error::kInvalidArgument, "--subset must be positive");
    if (c.workers < 1) c.workers = 1;
    if (c.precision != "f32" && c.precision != "f64")
        throw Error(Error::kInvalidArgument, "precision must be f32 or f64, got '" + c.precision + "'");
    if (!(c.dropout >= 0.0 && c.dropout < 1.0))
        throw Error(Error::kInvalidArgument, "dropout must lie in [0,1)");
    for (double a : c.alphas)
        if (!(a > 0.0 && a < 1.0))
            throw Error(Error::kInvalidArgument, "alpha must lie in (0,1), got " + std::to_string(a));
    if (c.trials < 1) throw Error(Error::kInvalidArgument, "--trials must be >= 1");
    if (c.results_dir.empty()) c.results_dir = c.out_dir;
    if (c.deterministic) c.workers = 1;  // serial kernels in deterministic mode
    return c;
}

void to_json(nlohmann::json& j, const RunConfig& c) {
    j = {{"command", c.command},
         {"dataset", c.dataset},
         {"model", c.model},
         {"epochs", c.epochs},
         {"batch_size", c.batch_size},
         {"lr", c.lr},
         {"folds", c.folds},
         {"fold", c.fold},
         {"seed", c.seed},
         {"data_dir", c.data_dir},
         {"out_dir", c.out_dir},
         {"deterministic", c.deterministic},
         {"workers", c.workers},
         {"subset", c.subset},
         {"dim", c.dim},
         {"depth", c.depth},
         {"patch_size", c.patch_size},
         {"dropout", c.dropout},
         {"token_hidden", c.token_hidden},
         {"channel_hidden", c.channel_hidden},
         {"linear_embed", c.linear_embed},
         {"augment", c.augment},
         {"precision", c.precision},
         {"eval_test", c.eval_test},
         {"trials", c.trials},
         {"log_lr", c.log_lr},
         {"alphas", c.alphas},
         {"reference", c.reference},
         {"models", c.models},
         {"results_dir", c.results_dir}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
    c.command = j.value("command", c.command);
    c.dataset = j.value("dataset", c.dataset);
    c.model = j.value("model", c.model);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.folds = j.value("folds", c.folds);
    c.fold = j.value("fold", c.fold);
    c.seed = j.value("seed", c.seed);
    c.data_dir = j.value("data_dir", c.data_dir);
    c.out_dir = j.value("out_dir", c.out_dir);
    c.deterministic = j.value("deterministic", c.deterministic);
    c.workers = j.value("workers", c.workers);
    c.subset = j.value("subset", c.subset);
    c.dim = j.value("dim", c.dim);
    c.depth = j.value("depth", c.depth);
    c.patch_size = j.value("patch_size", c.patch_size);
    c.dropout = j.value("dropout", c.dropout);
    c.token_hidden = j.value("token_hidden", c.token_hidden);
    c.channel_hidden = j.value("channel_hidden", c.channel_hidden);
    c.linear_embed = j.value("linear_embed", c.linear_embed);
    c.augment = j.value("augment", c.augment);
    c.precision = j.value("precision", c.precision);
    c.eval_test = j.value("eval_test", c.eval_test);
    c.trials = j.value("trials", c.trials);
    c.log_lr = j.value("log_lr", c.log_lr);
    c.alphas = j.value("alphas", c.alphas);
    c.reference = j.value("reference", c.reference);
    c.models = j.value("models", c.models);
    c.results_dir = j.value("results_dir", c.results_dir);
}

namespace {

std::string data_dir_or_env(const RunConfig& cfg) {
    if (!cfg.data_dir.empty()) return cfg.data_dir;
    if (const char* env = std::getenv("KANMIX_DATA_DIR"); env && *env) return env;
    throw Error(Error::kMissingInput, "no data directory given: pass --data-dir or set KANMIX_DATA_DIR");
}

void ensure_dir(const std::string& path) {
    std::error_code ec;
    fs::create_directories(path, ec);
    if (ec) throw FormatError("cannot create directory " + path + ": " + ec.message());
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot write " + path);
    f << content;
}

std::string now_iso8601() {
    const std::time_t t = std::time(nullptr);
    char buf[32];
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string git_describe() {
    FILE* p = popen("git describe --always --dirty 2>/dev/null", "r");
    if (!p) return "unknown";
    char buf[128] = {0};
    std::string out;
    while (fgets(buf, sizeof buf, p)) out += buf;
    pclose(p);
    while (!out.empty() && (out.back() == '\n' || out.back() == '\r')) out.pop_back();
    return out.empty() ? "unknown" : out;
}

// manifest.json carries the volatile pieces (timestamps, wall time); result
// files stay byte-stable.
void write_manifest(const std::string& dir, const RunConfig& cfg, const std::string& start,
                    const std::string& end) {
    nlohmann::json m;
    m["command"] = cfg.command;
    m["config"] = cfg;
    m["seed"] = cfg.seed;
    m["precision"] = cfg.precision;
    m["git_describe"] = git_describe();
    m["started"] = start;
    m["finished"] = end;
    m["out_dir"] = dir;
    m["version"] = version_string();
    write_file(dir + "/manifest.json", m.dump(2) + "\n");
}

nlohmann::json metrics_json(const Metrics& m) {
    nlohmann::json j;
    j["accuracy"] = m.accuracy;
    j["macro_precision"] = m.macro_precision;
    j["macro_recall"] = m.macro_recall;
    j["macro_f1"] = m.macro_f1;
    nlohmann::json rows = nlohmann::json::array();
    for (int64_t i = 0; i < m.num_classes; ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (int64_t k = 0; k < m.num_classes; ++k) row.push_back(m.confusion[i * m.num_classes + k]);
        rows.push_back(row);
    }
    j["confusion"] = rows;
    return j;
}

template <typename T>
ImageDataset<T> load_standardized(const RunConfig& cfg, const std::string& split) {
    ImageDataset<T> ds = load_dataset<T>(cfg.dataset, data_dir_or_env(cfg), split);
    if (split == "train" && cfg.subset > 0) ds = take_subset(ds, std::min(cfg.subset, ds.n));
    return resize_to(ds, 32);
}

template <typename T>
TrainConfig train_config(const RunConfig& cfg, const ImageDataset<T>& ds) {
    TrainConfig tc;
    tc.model = model_kind_from_string(cfg.model);
    tc.mixer.image_size = 32;
    tc.mixer.in_channels = ds.c;
    tc.mixer.patch_size = cfg.patch_size;
    tc.mixer.dim = cfg.dim;
    tc.mixer.depth = cfg.depth;
    tc.mixer.token_hidden = cfg.token_hidden;
    tc.mixer.channel_hidden = cfg.channel_hidden;
    tc.mixer.dropout_rate = cfg.dropout;
    tc.mixer.num_classes = 10;
    tc.mixer.linear_patch_embed = cfg.linear_embed;
    tc.epochs = cfg.epochs;
    tc.batch_size = cfg.batch_size;
    tc.lr = cfg.lr;
    tc.folds = cfg.folds;
    tc.seed = cfg.seed;
    tc.augment.enabled = cfg.augment;
    tc.workers = cfg.workers;
    if (tc.model == ModelKind::kKanMixers || tc.model == ModelKind::kMlpMixer) tc.mixer.validate();
    return tc;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

template <typename T>
void run_train_impl(const RunConfig& cfg) {
    const std::string start = now_iso8601();
    const ImageDataset<T> ds = load_standardized<T>(cfg, "train");
    ImageDataset<T> test;
    if (cfg.eval_test) test = load_standardized<T>(cfg, "test");

    const std::string dir = cfg.out_dir + "/" + cfg.dataset + "/" + cfg.model;
    ensure_dir(dir);

    const TrainConfig tc = train_config(cfg, ds);
    std::vector<int64_t> test_idx(test.n);
    for (int64_t i = 0; i < test.n; ++i) test_idx[i] = i;

    std::mutex io_mutex;
    int64_t param_count = 0;
    auto on_fold = [&](const Model<T>& model, FoldResult& fr) {
        if (cfg.eval_test) {
            fr.test_metrics = evaluate(model, test, test_idx, tc.batch_size);
            fr.has_test = true;
        }
        std::lock_guard<std::mutex> lock(io_mutex);
        param_count = count_params(model);
        save_checkpoint(model, dir + "/fold_" + std::to_string(fr.fold) + ".ckpt");
    };

    const std::vector<FoldResult> results = cross_validate<T>(tc, ds, cfg.fold, on_fold);

    // per-epoch curves for all folds, one CSV
    std::string csv = "epoch,fold,train_loss,train_acc,val_acc\n";
    for (const auto& fr : results)
        for (const auto& e : fr.epochs)
            csv += std::to_string(e.epoch) + "," + std::to_string(fr.fold) + "," +
                   fmt_double(e.train_loss) + "," + fmt_double(e.train_accuracy) + "," +
                   fmt_double(e.val_accuracy) + "\n";
    write_file(dir + "/epochs.csv", csv);

    std::vector<double> accs;
    nlohmann::json fold_metrics = nlohmann::json::array();
    nlohmann::json timing_folds = nlohmann::json::array();
    for (const auto& fr : results) {
        nlohmann::json fj;
        fj["fold"] = fr.fold;
        fj["val"] = metrics_json(fr.val_metrics);
        if (fr.has_test) fj["test"] = metrics_json(fr.test_metrics);
        write_file(dir + "/fold_" + std::to_string(fr.fold) + ".json", fj.dump(2) + "\n");
        accs.push_back(fr.val_metrics.accuracy);
        fold_metrics.push_back({{"fold", fr.fold},
                                {"accuracy", fr.val_metrics.accuracy},
                                {"macro_precision", fr.val_metrics.macro_precision},
                                {"macro_recall", fr.val_metrics.macro_recall},
                                {"macro_f1", fr.val_metrics.macro_f1}});
        timing_folds.push_back({{"fold", fr.fold}, {"wall_seconds", fr.wall_seconds}});
    }
    const auto [mean, stddev] = mean_std(accs);

    nlohmann::json summary;
    summary["command"] = "train";
    summary["dataset"] = cfg.dataset;
    summary["model"] = cfg.model;
    summary["precision"] = cfg.precision;
    summary["epochs"] = cfg.epochs;
    summary["batch_size"] = cfg.batch_size;
    summary["lr"] = cfg.lr;
    summary["seed"] = cfg.seed;
    summary["deterministic"] = cfg.deterministic;
    summary["augment"] = cfg.augment;
    summary["subset"] = cfg.subset;
    summary["param_count"] = param_count;
    summary["pairing"] = {{"fold_seed", cfg.seed}, {"folds", cfg.folds}, {"dataset_n", ds.n}};
    summary["fold_accuracies"] = accs;
    summary["mean_accuracy"] = mean;
    summary["std_accuracy"] = stddev;
    summary["fold_metrics"] = fold_metrics;
    write_file(dir + "/summary.json", summary.dump(2) + "\n");

    nlohmann::json timing;
    timing["started"] = start;
    timing["finished"] = now_iso8601();
    timing["folds"] = timing_folds;
    write_file(dir + "/timing.json", timing.dump(2) + "\n");
    write_manifest(dir, cfg, start, now_iso8601());

    std::cout << cfg.model << " on " << cfg.dataset << ": validation accuracy "
              << format_mean_std(mean, stddev) << " over " << results.size() << " fold"
              << (results.size() == 1 ? "" : "s") << " (" << param_count << " parameters)\n";
    if (cfg.eval_test && !results.empty() && results.front().has_test) {
        std::vector<double> taccs;
        for (const auto& fr : results) taccs.push_back(fr.test_metrics.accuracy);
        const auto [tmean, tstd] = mean_std(taccs);
        std::cout << "  test accuracy " << format_mean_std(tmean, tstd) << "\n";
    }
}

// ---------------------------------------------------------------------------
// search
// ---------------------------------------------------------------------------

template <typename T>
void run_search_impl(const RunConfig& cfg) {
    const std::string start = now_iso8601();
    const ImageDataset<T> ds = load_standardized<T>(cfg, "train");
    const std::string dir = cfg.out_dir + "/" + cfg.dataset + "/search";
    ensure_dir(dir);

    const TrainConfig base = train_config(cfg, ds);
    const SearchSpace space;
    const SearchResult sr = random_search(space, cfg.trials, base, ds, cfg.log_lr, &std::cerr);

    nlohmann::json trials = nlohmann::json::array();
    for (const auto& t : sr.trials) {
        trials.push_back({{"trial", t.trial},
                          {"patch_size", t.config.patch_size},
                          {"dim", t.config.dim},
                          {"depth", t.config.depth},
                          {"lr", t.config.lr},
                          {"lr_scale", t.lr_scale},
                          {"fold_accuracies", t.fold_accuracies},
                          {"mean_accuracy", t.mean_accuracy},
                          {"rank", t.rank},
                          {"failed", t.failed},
                          {"error", t.error}});
    }
    nlohmann::json out;
    out["seed"] = cfg.seed;
    out["space"] = {{"patch_sizes", space.patch_sizes},
                    {"dims", space.dims},
                    {"layers", space.layers},
                    {"lr_min", space.lr_min},
                    {"lr_max", space.lr_max}};
    out["trials"] = trials;
    out["best_trial"] = sr.best_trial;
    write_file(dir + "/search_trials.json", out.dump(2) + "\n");

    if (sr.best_trial < 0)
        throw Error(Error::kGeneric, "all " + std::to_string(cfg.trials) + " search trials failed");

    // a train config for the winner, at the full 50-epoch protocol
    const TrialResult& best = sr.trials[sr.best_trial];
    RunConfig bc = cfg;
    bc.command = "train";
    bc.patch_size = best.config.patch_size;
    bc.dim = best.config.dim;
    bc.depth = best.config.depth;
    bc.token_hidden = 0;
    bc.channel_hidden = 0;
    bc.lr = best.config.lr;
    bc.epochs = 50;
    nlohmann::json bcj = bc;
    write_file(dir + "/best_config.json", bcj.dump(2) + "\n");

    nlohmann::json timing;
    timing["started"] = start;
    timing["finished"] = now_iso8601();
    write_file(dir + "/timing.json", timing.dump(2) + "\n");
    write_manifest(dir, cfg, start, now_iso8601());

    std::cout << "trial  patch  dim  depth  lr          mean_acc  rank\n";
    for (const auto& t : sr.trials) {
        char line[160];
        if (t.failed)
            std::snprintf(line, sizeof line, "%-6lld %-6lld %-4lld %-6lld %-11.6f failed: %s",
                          static_cast<long long>(t.trial), static_cast<long long>(t.config.patch_size),
                          static_cast<long long>(t.config.dim), static_cast<long long>(t.config.depth),
                          t.config.lr, t.error.c_str());
        else
            std::snprintf(line, sizeof line, "%-6lld %-6lld %-4lld %-6lld %-11.6f %-9.4f %lld",
                          static_cast<long long>(t.trial), static_cast<long long>(t.config.patch_size),
                          static_cast<long long>(t.config.dim), static_cast<long long>(t.config.depth),
                          t.config.lr, t.mean_accuracy, static_cast<long long>(t.rank));
        std::cout << line << "\n";
    }
    std::cout << "best: trial " << best.trial << " (patch " << best.config.patch_size << ", dim "
              << best.config.dim << ", depth " << best.config.depth << ", lr " << best.config.lr
              << ") -> " << dir << "/best_config.json\n";
}

// ---------------------------------------------------------------------------
// stats / report
// ---------------------------------------------------------------------------

std::vector<std::string> model_dirs(const RunConfig& cfg, const std::string& needed_file) {
    const std::string base = cfg.results_dir + "/" + cfg.dataset;
    std::vector<std::string> names = cfg.models;
    if (names.empty()) {
        std::error_code ec;
        for (const auto& entry : fs::directory_iterator(base, ec))
            if (entry.is_directory() && fs::exists(entry.path() / needed_file))
                names.push_back(entry.path().filename().string());
        std::sort(names.begin(), names.end());
    }
    if (names.empty())
        throw Error(Error::kMissingInput, "no model result directories with " + needed_file +
                                              " under " + base);
    return names;
}

void run_stats_impl(const RunConfig& cfg) {
    const std::string start = now_iso8601();
    const std::string base = cfg.results_dir + "/" + cfg.dataset;
    std::vector<ModelRun> runs;
    for (const auto& name : model_dirs(cfg, "summary.json")) {
        const std::string path = base + "/" + name + "/summary.json";
        std::ifstream f(path);
        if (!f) throw Error(Error::kMissingInput, "missing " + path);
        nlohmann::json j = nlohmann::json::parse(f, nullptr, false);
        if (j.is_discarded()) throw FormatError(path + " is not valid JSON");
        ModelRun run;
        run.model = j.value("model", name);
        run.fold_accuracies = j.value("fold_accuracies", std::vector<double>{});
        const auto pairing = j.value("pairing", nlohmann::json::object());
        run.fold_seed = pairing.value("fold_seed", uint64_t{0});
        run.folds = pairing.value("folds", int64_t{0});
        run.dataset_n = pairing.value("dataset_n", int64_t{0});
        runs.push_back(std::move(run));
    }
    if (runs.size() < 2)
        throw Error(Error::kMissingInput, "significance needs at least two model runs under " + base);

    const auto rows = tabulate_results(runs, cfg.reference, cfg.alphas);
    const std::string table = format_significance_table(rows, cfg.alphas);
    write_significance_csv(rows, cfg.alphas, base + "/significance.csv");
    write_file(base + "/significance.txt", table);
    ensure_dir(base + "/stats");
    RunConfig manifest_cfg = cfg;
    write_manifest(base + "/stats", manifest_cfg, start, now_iso8601());
    std::cout << table;
}

void run_report_impl(const RunConfig& cfg) {
    const std::string start = now_iso8601();
    const std::string base = cfg.results_dir + "/" + cfg.dataset;
    std::vector<FoldEpochRecord> records;
    for (const auto& name : model_dirs(cfg, "epochs.csv")) {
        const std::string path = base + "/" + name + "/epochs.csv";
        std::ifstream f(path);
        if (!f) throw Error(Error::kMissingInput, "missing " + path);
        std::string line;
        std::getline(f, line);  // header
        while (std::getline(f, line)) {
            if (line.empty()) continue;
            FoldEpochRecord rec;
            rec.model = name;
            char* end = nullptr;
            rec.epoch = std::strtoll(line.c_str(), &end, 10);
            rec.fold = std::strtoll(end + 1, &end, 10);
            std::strtod(end + 1, &end);  // train_loss, unused here
            std::strtod(end + 1, &end);  // train_acc, unused here
            rec.val_accuracy = std::strtod(end + 1, &end);
            records.push_back(std::move(rec));
        }
    }
    if (records.empty())
        throw Error(Error::kMissingInput, "no epoch records found under " + base);

    emit_violin_csv(records, base + "/violin.csv");
    emit_violin_svg(records, base + "/violin.svg");
    ensure_dir(base + "/report");
    write_manifest(base + "/report", cfg, start, now_iso8601());
    std::cout << "report: " << records.size() << " records -> " << base << "/violin.csv, " << base
              << "/violin.svg\n";
}

}  // namespace

void run_command(const RunConfig& raw) {
    const RunConfig cfg = raw.resolved();
    if (cfg.command == "stats") return run_stats_impl(cfg);
    if (cfg.command == "report") return run_report_impl(cfg);
    const bool f64 = cfg.precision == "f64";
    if (cfg.command == "train") return f64 ? run_train_impl<double>(cfg) : run_train_impl<float>(cfg);
    if (f64)
        run_search_impl<double>(cfg);
    else
        run_search_impl<float>(cfg);
}

}  // namespace kanmix
