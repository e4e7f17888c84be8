#pragma once

// Adam, the epoch loop, evaluation metrics and k-fold cross-validation.

#include <atomic>
#include <chrono>
#include <cmath>
#include <functional>
#include <thread>

#include "kanmix/data.hpp"
#include "kanmix/models.hpp"

namespace kanmix {

template <typename T>
struct AdamState {
    double lr = 0.001;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    int64_t t = 0;
    std::vector<std::vector<T>> m, v;  // one slot per parameter tensor

    void init(const std::vector<NamedParam<T>>& params) {
        m.clear();
        v.clear();
        for (const auto& p : params) {
            m.emplace_back(p.tensor.size(), T(0));
            v.emplace_back(p.tensor.size(), T(0));
        }
        t = 0;
    }
};

// One bias-corrected Adam update over every parameter, consuming (and
// clearing) the accumulated gradients. A non-finite gradient aborts with the
// offending parameter named rather than silently corrupting the run.
template <typename T>
void adam_step(std::vector<NamedParam<T>>& params, AdamState<T>& st) {
    if (st.m.size() != params.size())
        throw Error(Error::kInvalidArgument, "adam state tracks " + std::to_string(st.m.size()) +
                                                 " tensors, step got " + std::to_string(params.size()));
    st.t += 1;
    const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.t));
    const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.t));
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto theta = params[pi].tensor.values();  // span views; grad_mut
        auto grad = params[pi].tensor.grad_mut();  // zero-fills if untouched
        auto& m = st.m[pi];
        auto& v = st.v[pi];
        for (size_t i = 0; i < theta.size(); ++i) {
            const double g = grad[i];
            if (!std::isfinite(g))
                throw Error(Error::kGeneric, "non-finite gradient in '" + params[pi].name +
                                                 "' at element " + std::to_string(i) +
                                                 " (step " + std::to_string(st.t) + ")");
            m[i] = static_cast<T>(st.beta1 * m[i] + (1.0 - st.beta1) * g);
            v[i] = static_cast<T>(st.beta2 * v[i] + (1.0 - st.beta2) * g * g);
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            theta[i] = static_cast<T>(theta[i] - st.lr * mhat / (std::sqrt(vhat) + st.eps));
            grad[i] = T(0);
        }
    }
}

struct Metrics {
    double accuracy = 0.0;
    double macro_precision = 0.0;
    double macro_recall = 0.0;
    double macro_f1 = 0.0;
    int64_t num_classes = 0;
    std::vector<int64_t> confusion;  // [num_classes, num_classes], rows = true label
};

// Lowest index wins logit ties, so evaluation is exactly reproducible.
template <typename T>
int64_t argmax_row(const T* row, int64_t n) {
    int64_t best = 0;
    for (int64_t j = 1; j < n; ++j)
        if (row[j] > row[best]) best = j;
    return best;
}

inline Metrics metrics_from_confusion(std::vector<int64_t> confusion, int64_t num_classes) {
    Metrics m;
    m.num_classes = num_classes;
    m.confusion = std::move(confusion);
    int64_t correct = 0, total = 0;
    for (int64_t i = 0; i < num_classes; ++i)
        for (int64_t j = 0; j < num_classes; ++j) {
            total += m.confusion[i * num_classes + j];
            if (i == j) correct += m.confusion[i * num_classes + j];
        }
    m.accuracy = total ? static_cast<double>(correct) / total : 0.0;
    // macro average over all classes; empty denominators count as 0
    for (int64_t k = 0; k < num_classes; ++k) {
        int64_t tp = m.confusion[k * num_classes + k], fp = 0, fn = 0;
        for (int64_t j = 0; j < num_classes; ++j) {
            if (j != k) {
                fp += m.confusion[j * num_classes + k];
                fn += m.confusion[k * num_classes + j];
            }
        }
        const double prec = tp + fp ? static_cast<double>(tp) / (tp + fp) : 0.0;
        const double rec = tp + fn ? static_cast<double>(tp) / (tp + fn) : 0.0;
        m.macro_precision += prec;
        m.macro_recall += rec;
        m.macro_f1 += prec + rec > 0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
    }
    m.macro_precision /= num_classes;
    m.macro_recall /= num_classes;
    m.macro_f1 /= num_classes;
    return m;
}

template <typename T>
Metrics evaluate(const Model<T>& model, const ImageDataset<T>& ds, const std::vector<int64_t>& idx,
                 int64_t batch_size = 64) {
    if (idx.empty()) throw Error(Error::kInvalidArgument, "evaluate called with no examples");
    GradPause<T> pause;
    const int64_t classes = model.config.num_classes;
    std::vector<int64_t> confusion(classes * classes, 0);
    Rng unused(0);
    for (size_t at = 0; at < idx.size(); at += batch_size) {
        std::vector<int64_t> chunk(idx.begin() + at,
                                   idx.begin() + std::min(idx.size(), at + batch_size));
        auto [batch, labels] = make_batch(ds, chunk);
        Tensor<T> logits = model.forward(batch, ForwardCtx{false, &unused});
        const int64_t b = logits.dim(0);
        for (int64_t i = 0; i < b; ++i) {
            const int64_t pred = argmax_row(logits.values().data() + i * classes, classes);
            confusion[labels[i] * classes + pred] += 1;
        }
    }
    return metrics_from_confusion(std::move(confusion), classes);
}

struct TrainConfig {
    ModelKind model = ModelKind::kKanMixers;
    MixerConfig mixer;
    int64_t epochs = 50;
    int64_t batch_size = 64;
    double lr = 0.001;
    int64_t folds = 5;
    uint64_t seed = 42;
    AugmentConfig augment;
    int64_t workers = 1;
};

struct EpochRecord {
    int64_t epoch = 0;
    double train_loss = 0.0;
    double train_accuracy = 0.0;
    double val_accuracy = 0.0;
};

struct FoldResult {
    int64_t fold = 0;
    std::vector<EpochRecord> epochs;
    Metrics val_metrics;
    Metrics test_metrics;    // filled only when a run asks for test-split evaluation
    bool has_test = false;
    double wall_seconds = 0.0;  // timing only; excluded from determinism checks
};

// RNG stream tags, forked from (seed, fold) so folds are independent and a
// fold's draws do not depend on which worker ran it.
namespace rngtag {
constexpr uint64_t kModelInit = 0;
constexpr uint64_t kDropout = 1;
constexpr uint64_t kShuffle = 2;
constexpr uint64_t kAugment = 3;
}  // namespace rngtag

inline Rng fold_rng(uint64_t seed, int64_t fold, uint64_t tag) {
    return Rng(seed).fork(static_cast<uint64_t>(fold)).fork(tag);
}

// Trains one model on train_idx and tracks validation accuracy per epoch.
// epochs = 0 is allowed and just evaluates the freshly initialized model.
template <typename T>
FoldResult train_model(Model<T>& model, const ImageDataset<T>& ds,
                       const std::vector<int64_t>& train_idx, const std::vector<int64_t>& val_idx,
                       const TrainConfig& cfg, int64_t fold) {
    const auto t0 = std::chrono::steady_clock::now();
    FoldResult result;
    result.fold = fold;

    auto params = model.params();
    model.set_requires_grad(true);
    AdamState<T> adam;
    adam.lr = cfg.lr;
    adam.init(params);

    Rng dropout_rng = fold_rng(cfg.seed, fold, rngtag::kDropout);
    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng = fold_rng(cfg.seed, fold, rngtag::kShuffle).fork(epoch);
        Rng augment_rng = fold_rng(cfg.seed, fold, rngtag::kAugment).fork(epoch);
        const auto batches = epoch_batches(train_idx, cfg.batch_size, true, shuffle_rng);

        double loss_sum = 0.0;
        int64_t correct = 0, seen = 0;
        for (size_t bi = 0; bi < batches.size(); ++bi) {
            auto [batch, labels] = make_batch(ds, batches[bi], cfg.augment.enabled ? &cfg.augment : nullptr,
                                              &augment_rng);
            GradTape<T>::active().clear();
            Tensor<T> logits = model.forward(batch, ForwardCtx{true, &dropout_rng});
            Tensor<T> loss = softmax_cross_entropy(logits, labels);
            const double loss_val = loss.item();
            if (!std::isfinite(loss_val))
                throw Error(Error::kGeneric, "non-finite loss at fold " + std::to_string(fold) +
                                                 ", epoch " + std::to_string(epoch) + ", batch " +
                                                 std::to_string(bi));
            backward(loss);
            adam_step(params, adam);

            const int64_t b = logits.dim(0);
            loss_sum += loss_val * b;
            seen += b;
            for (int64_t i = 0; i < b; ++i)
                if (argmax_row(logits.values().data() + i * model.config.num_classes,
                               model.config.num_classes) == labels[i])
                    ++correct;
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = seen ? loss_sum / seen : 0.0;
        rec.train_accuracy = seen ? static_cast<double>(correct) / seen : 0.0;
        rec.val_accuracy = evaluate(model, ds, val_idx, cfg.batch_size).accuracy;
        result.epochs.push_back(rec);
    }

    result.val_metrics = evaluate(model, ds, val_idx, cfg.batch_size);
    result.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

// Runs the k-fold protocol, building a fresh model per fold from a
// fold-specific stream of cfg.seed. only_fold >= 0 restricts the run to that
// fold. With workers > 1 folds run on a small thread pool; results are
// identical to the serial order because every stream is derived from
// (seed, fold), not from scheduling. on_fold (if set) sees each trained model
// once, possibly from a worker thread.
template <typename T>
std::vector<FoldResult> cross_validate(
    const TrainConfig& cfg, const ImageDataset<T>& ds, int64_t only_fold = -1,
    const std::function<void(const Model<T>&, FoldResult&)>& on_fold = {}) {
    const auto folds = kfold_split(ds.n, cfg.folds, cfg.seed);
    if (only_fold >= static_cast<int64_t>(folds.size()))
        throw Error(Error::kInvalidArgument, "--fold " + std::to_string(only_fold) +
                                                 " out of range for k=" + std::to_string(cfg.folds));
    std::vector<int64_t> todo;
    for (int64_t f = 0; f < static_cast<int64_t>(folds.size()); ++f)
        if (only_fold < 0 || f == only_fold) todo.push_back(f);

    std::vector<FoldResult> results(todo.size());
    auto run_one = [&](size_t slot) {
        const int64_t f = todo[slot];
        Model<T> model =
            build_model<T>(cfg.model, cfg.mixer, fold_rng(cfg.seed, f, rngtag::kModelInit).seed());
        results[slot] = train_model(model, ds, folds[f].first, folds[f].second, cfg, f);
        if (on_fold) on_fold(model, results[slot]);
    };

    const int64_t workers = std::min<int64_t>(std::max<int64_t>(cfg.workers, 1), todo.size());
    if (workers <= 1) {
        for (size_t i = 0; i < todo.size(); ++i) run_one(i);
        return results;
    }
    std::atomic<size_t> next{0};
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (int64_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (size_t i = next.fetch_add(1); i < todo.size(); i = next.fetch_add(1)) run_one(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return results;
}

// Population standard deviation by default, matching the reported
// "mean +/- std" style; pass population=false for the sample estimator.
inline std::pair<double, double> mean_std(const std::vector<double>& xs, bool population = true) {
    if (xs.empty()) return {0.0, 0.0};
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= xs.size();
    if (xs.size() == 1) return {mean, 0.0};
    double var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    return {mean, std::sqrt(var / (population ? xs.size() : xs.size() - 1))};
}

}  // namespace kanmix
