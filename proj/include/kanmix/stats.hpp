#pragma once

// Random-search hyperparameter optimization, the exact Wilcoxon signed-rank
// test with its =/+/- verdict scheme, percent-difference tables, and
// violin/strip plot emission (CSV + SVG).

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "kanmix/train.hpp"

namespace kanmix {

// Shortest decimal string that round-trips the exact double, so emitted files
// are byte-stable across runs.
inline std::string fmt_double(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, end);
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank
// ---------------------------------------------------------------------------

struct WilcoxonResult {
    double w = 0.0;       // min(sum of positive ranks, sum of negative ranks)
    double p = 1.0;       // exact two-sided p from sign enumeration
    int64_t n = 0;        // pairs remaining after zero differences are dropped
    bool all_zero = false;
};

// Exact test: zeros dropped, |d| ranked with mid-ranks for ties, and the
// two-sided p found by enumerating all 2^n sign assignments (so n is capped
// at 20). All differences zero is reported as p=1 with the warning flag set
// rather than an error.
inline WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& diffs) {
    std::vector<double> d;
    for (double x : diffs)
        if (x != 0.0) d.push_back(x);

    WilcoxonResult res;
    res.n = static_cast<int64_t>(d.size());
    if (d.empty()) {
        if (diffs.empty())
            throw Error(Error::kInvalidArgument, "wilcoxon_signed_rank needs at least one pair");
        res.all_zero = true;
        return res;
    }
    if (res.n > 20)
        throw Error(Error::kInvalidArgument, "exact Wilcoxon enumeration supports at most 20 pairs, got " +
                                                 std::to_string(res.n));

    std::vector<int64_t> order(d.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](int64_t a, int64_t b) { return std::fabs(d[a]) < std::fabs(d[b]); });

    // mid-ranks over runs of equal |d|
    std::vector<double> rank(d.size());
    for (size_t i = 0; i < order.size();) {
        size_t j = i;
        while (j < order.size() && std::fabs(d[order[j]]) == std::fabs(d[order[i]])) ++j;
        const double mid = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
        for (size_t t = i; t < j; ++t) rank[order[t]] = mid;
        i = j;
    }

    double w_plus = 0.0, w_minus = 0.0;
    for (size_t i = 0; i < d.size(); ++i) (d[i] > 0 ? w_plus : w_minus) += rank[i];
    res.w = std::min(w_plus, w_minus);

    // lower tail of the positive-rank sum over every sign assignment,
    // doubled for the two-sided p and clamped
    const uint64_t total = uint64_t{1} << res.n;
    uint64_t count = 0;
    for (uint64_t mask = 0; mask < total; ++mask) {
        double t = 0.0;
        for (int64_t i = 0; i < res.n; ++i)
            if (mask & (uint64_t{1} << i)) t += rank[i];
        if (t <= res.w + 1e-12) ++count;
    }
    res.p = std::min(1.0, 2.0 * static_cast<double>(count) / static_cast<double>(total));
    return res;
}

// "=" when not significant at alpha; otherwise "+" marks the model inferior
// to the reference and "-" superior, following the tables' convention.
inline std::string significance_verdict(double p, double alpha, double mean_model,
                                        double mean_reference) {
    if (!(alpha > 0.0 && alpha < 1.0))
        throw Error(Error::kInvalidArgument, "alpha must lie in (0,1), got " + std::to_string(alpha));
    if (p >= alpha) return "=";
    return mean_model < mean_reference ? "+" : "-";
}

// How far the model falls short of the reference, as a percentage of the
// reference accuracy.
inline double percent_difference(double acc_reference, double acc_model) {
    if (!(acc_reference > 0.0))
        throw Error(Error::kInvalidArgument, "percent_difference needs a positive reference accuracy");
    return 100.0 * (acc_reference - acc_model) / acc_reference;
}

inline std::string format_mean_std(double mean, double stddev) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4f ± %.4f", mean, stddev);
    return buf;
}

// ---------------------------------------------------------------------------
// Random search
// ---------------------------------------------------------------------------

struct SearchSpace {
    std::vector<int64_t> patch_sizes{4, 8, 16};
    std::vector<int64_t> dims{64, 128, 256};
    std::vector<int64_t> layers{6, 8, 10};
    double lr_min = 0.0001;
    double lr_max = 0.001;
};

struct SampledConfig {
    int64_t patch_size = 4;
    int64_t dim = 256;
    int64_t depth = 8;
    double lr = 0.001;
};

// One config, fields drawn in a fixed order so a fixed seed reproduces the
// whole trial list. lr is uniform on the linear scale by default; log_lr
// switches to log-uniform (recorded per trial).
inline SampledConfig sample_config(const SearchSpace& space, Rng& rng, bool log_lr) {
    SampledConfig c;
    c.patch_size = space.patch_sizes[rng.uniform_int(static_cast<int64_t>(space.patch_sizes.size()))];
    c.dim = space.dims[rng.uniform_int(static_cast<int64_t>(space.dims.size()))];
    c.depth = space.layers[rng.uniform_int(static_cast<int64_t>(space.layers.size()))];
    c.lr = log_lr ? std::exp(rng.uniform(std::log(space.lr_min), std::log(space.lr_max)))
                  : rng.uniform(space.lr_min, space.lr_max);
    return c;
}

struct TrialResult {
    int64_t trial = 0;
    SampledConfig config;
    std::string lr_scale = "linear";
    std::vector<double> fold_accuracies;
    double mean_accuracy = 0.0;
    int64_t rank = 0;  // 1 = best successful trial; 0 for failed trials
    bool failed = false;
    std::string error;
};

struct SearchResult {
    std::vector<TrialResult> trials;
    int64_t best_trial = -1;  // index into trials; -1 when every trial failed
};

// Evaluates `trials` sampled configs by k-fold mean validation accuracy under
// the budget carried in `base` (epochs, folds, batch size, seed). Configs are
// all sampled up front, so failures cannot shift later trials. Ties go to the
// earlier trial; failed trials are logged and excluded from the argmax.
template <typename T>
SearchResult random_search(const SearchSpace& space, int64_t trials, const TrainConfig& base,
                           const ImageDataset<T>& ds, bool log_lr = false,
                           std::ostream* log = nullptr) {
    if (trials < 1) throw Error(Error::kInvalidArgument, "random search needs at least one trial");

    Rng sample_rng = Rng(base.seed).fork(0x5ea3c4);
    SearchResult out;
    for (int64_t t = 0; t < trials; ++t) {
        TrialResult trial;
        trial.trial = t;
        trial.config = sample_config(space, sample_rng, log_lr);
        trial.lr_scale = log_lr ? "log" : "linear";
        out.trials.push_back(std::move(trial));
    }

    for (auto& trial : out.trials) {
        TrainConfig cfg = base;
        cfg.mixer.patch_size = trial.config.patch_size;
        cfg.mixer.dim = trial.config.dim;
        cfg.mixer.depth = trial.config.depth;
        cfg.mixer.token_hidden = 0;  // re-derive from the sampled patch/dim
        cfg.mixer.channel_hidden = 0;
        cfg.lr = trial.config.lr;
        try {
            const auto folds = cross_validate(cfg, ds);
            for (const auto& f : folds) trial.fold_accuracies.push_back(f.val_metrics.accuracy);
            trial.mean_accuracy = mean_std(trial.fold_accuracies).first;
        } catch (const std::exception& e) {
            trial.failed = true;
            trial.error = e.what();
            if (log)
                *log << "trial " << trial.trial << " failed and is excluded from selection: " << e.what()
                     << "\n";
        }
    }

    std::vector<int64_t> ok;
    for (const auto& trial : out.trials)
        if (!trial.failed) ok.push_back(trial.trial);
    std::sort(ok.begin(), ok.end(), [&](int64_t a, int64_t b) {
        if (out.trials[a].mean_accuracy != out.trials[b].mean_accuracy)
            return out.trials[a].mean_accuracy > out.trials[b].mean_accuracy;
        return a < b;
    });
    for (size_t i = 0; i < ok.size(); ++i) out.trials[ok[i]].rank = static_cast<int64_t>(i) + 1;
    if (!ok.empty()) out.best_trial = ok.front();
    return out;
}

// ---------------------------------------------------------------------------
// Significance table
// ---------------------------------------------------------------------------

struct ModelRun {
    std::string model;
    std::vector<double> fold_accuracies;
    // pairing identity: runs are only comparable when these match
    uint64_t fold_seed = 0;
    int64_t folds = 0;
    int64_t dataset_n = 0;
};

struct SignificanceRow {
    std::string model;
    double mean = 0.0, stddev = 0.0;
    bool is_reference = false;
    std::vector<std::string> verdicts;  // aligned with the alpha list
    double diff_percent = 0.0;
    double p = 1.0;
    double w = 0.0;
    bool all_zero = false;
};

// One row per non-reference model, each compared against the reference by the
// exact Wilcoxon test on paired fold accuracies. Rows come back sorted
// ascending by mean accuracy with the reference last, mirroring the report
// table layout.
inline std::vector<SignificanceRow> tabulate_results(const std::vector<ModelRun>& runs,
                                                     const std::string& reference,
                                                     const std::vector<double>& alphas) {
    const ModelRun* ref = nullptr;
    for (const auto& r : runs)
        if (r.model == reference) ref = &r;
    if (!ref)
        throw Error(Error::kInvalidArgument, "reference model '" + reference + "' not among the runs");

    for (const auto& r : runs) {
        if (r.fold_accuracies.empty())
            throw Error(Error::kInvalidArgument, "model '" + r.model + "' has no fold accuracies");
        if (r.fold_accuracies.size() != ref->fold_accuracies.size() || r.folds != ref->folds ||
            r.fold_seed != ref->fold_seed || r.dataset_n != ref->dataset_n)
            throw Error(Error::kBadPairing,
                        "fold definitions of '" + r.model + "' (k=" + std::to_string(r.folds) +
                            ", seed=" + std::to_string(r.fold_seed) + ", n=" + std::to_string(r.dataset_n) +
                            ") do not pair with reference '" + ref->model + "' (k=" +
                            std::to_string(ref->folds) + ", seed=" + std::to_string(ref->fold_seed) +
                            ", n=" + std::to_string(ref->dataset_n) + ")");
    }

    const auto [ref_mean, ref_std] = mean_std(ref->fold_accuracies);
    std::vector<SignificanceRow> rows;
    for (const auto& r : runs) {
        if (&r == ref) continue;
        SignificanceRow row;
        row.model = r.model;
        std::tie(row.mean, row.stddev) = mean_std(r.fold_accuracies);
        std::vector<double> diffs(r.fold_accuracies.size());
        for (size_t i = 0; i < diffs.size(); ++i) diffs[i] = r.fold_accuracies[i] - ref->fold_accuracies[i];
        const WilcoxonResult wr = wilcoxon_signed_rank(diffs);
        row.p = wr.p;
        row.w = wr.w;
        row.all_zero = wr.all_zero;
        for (double a : alphas) row.verdicts.push_back(significance_verdict(wr.p, a, row.mean, ref_mean));
        row.diff_percent = percent_difference(ref_mean, row.mean);
        rows.push_back(std::move(row));
    }
    std::sort(rows.begin(), rows.end(), [](const SignificanceRow& a, const SignificanceRow& b) {
        if (a.mean != b.mean) return a.mean < b.mean;
        return a.model < b.model;
    });

    SignificanceRow rref;
    rref.model = ref->model;
    rref.mean = ref_mean;
    rref.stddev = ref_std;
    rref.is_reference = true;
    rows.push_back(std::move(rref));
    return rows;
}

inline std::string format_significance_table(const std::vector<SignificanceRow>& rows,
                                             const std::vector<double>& alphas) {
    std::ostringstream os;
    os << std::left;
    os.width(12);
    os << "Model";
    os << "Accuracy           ";
    for (double a : alphas) {
        char head[32];
        std::snprintf(head, sizeof head, "p=%.2f  ", a);
        os << head;
    }
    os << "Difference (%)\n";
    for (const auto& r : rows) {
        os.width(12);
        os << r.model;
        os << format_mean_std(r.mean, r.stddev) << "    ";
        if (r.is_reference) {
            for (size_t i = 0; i < alphas.size(); ++i) os << "        ";
            os << "\n";
            continue;
        }
        for (const auto& v : r.verdicts) os << v << "       ";
        char diff[32];
        std::snprintf(diff, sizeof diff, "%.2f", r.diff_percent);
        os << diff << "\n";
    }
    return os.str();
}

inline void write_significance_csv(const std::vector<SignificanceRow>& rows,
                                   const std::vector<double>& alphas, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw FormatError("cannot write " + path);
    f << "model,mean_accuracy,std_accuracy";
    for (double a : alphas) {
        char head[32];
        std::snprintf(head, sizeof head, ",verdict_alpha_%g", a);
        f << head;
    }
    f << ",difference_percent,wilcoxon_w,wilcoxon_p,is_reference\n";
    for (const auto& r : rows) {
        f << r.model << "," << fmt_double(r.mean) << "," << fmt_double(r.stddev);
        for (size_t i = 0; i < alphas.size(); ++i)
            f << "," << (r.is_reference ? "" : r.verdicts[i].c_str());
        if (r.is_reference)
            f << ",,,," << 1 << "\n";
        else
            f << "," << fmt_double(r.diff_percent) << "," << fmt_double(r.w) << "," << fmt_double(r.p)
              << "," << 0 << "\n";
    }
}

// ---------------------------------------------------------------------------
// Violin / strip plots
// ---------------------------------------------------------------------------

struct FoldEpochRecord {
    std::string model;
    int64_t fold = 0;
    int64_t epoch = 0;
    double val_accuracy = 0.0;
};

inline void emit_violin_csv(const std::vector<FoldEpochRecord>& records, const std::string& path) {
    if (records.empty()) throw Error(Error::kInvalidArgument, "emit_violin needs at least one record");
    std::ofstream f(path);
    if (!f) throw FormatError("cannot write " + path);
    f << "model,fold,epoch,val_accuracy\n";
    for (const auto& r : records)
        f << r.model << "," << r.fold << "," << r.epoch << "," << fmt_double(r.val_accuracy) << "\n";
}

inline double sample_median(std::vector<double> xs) {
    std::sort(xs.begin(), xs.end());
    const size_t n = xs.size();
    return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

namespace detail {

inline std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == '&') out += "&amp;";
        else if (c == '<') out += "&lt;";
        else if (c == '>') out += "&gt;";
        else if (c == '"') out += "&quot;";
        else out += c;
    }
    return out;
}

// Silverman's rule of thumb; 0 when the sample is degenerate.
inline double silverman_bandwidth(const std::vector<double>& xs) {
    if (xs.size() < 2) return 0.0;
    const auto [mean, sd] = mean_std(xs, /*population=*/false);
    std::vector<double> sorted = xs;
    std::sort(sorted.begin(), sorted.end());
    auto quantile = [&](double q) {
        const double pos = q * (sorted.size() - 1);
        const size_t lo = static_cast<size_t>(pos);
        const size_t hi = std::min(lo + 1, sorted.size() - 1);
        return sorted[lo] + (pos - lo) * (sorted[hi] - sorted[lo]);
    };
    const double iqr = quantile(0.75) - quantile(0.25);
    double spread = sd;
    if (iqr > 0) spread = std::min(spread, iqr / 1.34);
    if (!(spread > 0)) return 0.0;
    return 0.9 * spread * std::pow(static_cast<double>(xs.size()), -0.2);
}

}  // namespace detail

// One violin per model (Gaussian KDE with Silverman bandwidth), strip points,
// and a median line whose exact value is carried in a data-median attribute.
// A zero-bandwidth sample degenerates to the median line plus points.
inline void emit_violin_svg(const std::vector<FoldEpochRecord>& records, const std::string& path) {
    if (records.empty()) throw Error(Error::kInvalidArgument, "emit_violin needs at least one record");

    std::vector<std::string> models;
    for (const auto& r : records)
        if (std::find(models.begin(), models.end(), r.model) == models.end()) models.push_back(r.model);

    double lo = records.front().val_accuracy, hi = lo;
    for (const auto& r : records) {
        lo = std::min(lo, r.val_accuracy);
        hi = std::max(hi, r.val_accuracy);
    }
    if (hi == lo) {
        lo -= 0.05;
        hi += 0.05;
    }
    const double pad = 0.05 * (hi - lo);
    lo -= pad;
    hi += pad;

    const int cell = 170, left = 70, top = 30, bottom = 50, plot_h = 400;
    const int width = left + cell * static_cast<int>(models.size()) + 20;
    const int height = top + plot_h + bottom;
    auto ypix = [&](double v) { return top + (hi - v) / (hi - lo) * plot_h; };

    std::ostringstream svg;
    svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
        << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
        << "\" viewBox=\"0 0 " << width << " " << height << "\">\n"
        << "<rect width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n";

    // y axis with a few ticks
    svg << "<line x1=\"" << left - 10 << "\" y1=\"" << top << "\" x2=\"" << left - 10 << "\" y2=\""
        << top + plot_h << "\" stroke=\"black\"/>\n";
    for (int t = 0; t <= 5; ++t) {
        const double v = lo + (hi - lo) * t / 5.0;
        char label[32];
        std::snprintf(label, sizeof label, "%.3f", v);
        svg << "<text x=\"" << left - 16 << "\" y=\"" << fmt_double(ypix(v) + 4)
            << "\" font-size=\"11\" text-anchor=\"end\" font-family=\"sans-serif\">" << label
            << "</text>\n";
    }

    const char* colors[] = {"#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"};
    for (size_t mi = 0; mi < models.size(); ++mi) {
        std::vector<double> xs;
        for (const auto& r : records)
            if (r.model == models[mi]) xs.push_back(r.val_accuracy);
        const double cx = left + cell * (mi + 0.5);
        const char* color = colors[mi % 6];
        const double median = sample_median(xs);

        const double h = detail::silverman_bandwidth(xs);
        if (h > 0) {
            // mirrored KDE polygon over 81 sample heights
            const int grid = 81;
            std::vector<double> ys(grid), den(grid);
            const double dlo = std::max(lo, *std::min_element(xs.begin(), xs.end()) - 3 * h);
            const double dhi = std::min(hi, *std::max_element(xs.begin(), xs.end()) + 3 * h);
            double dmax = 0.0;
            for (int g = 0; g < grid; ++g) {
                ys[g] = dlo + (dhi - dlo) * g / (grid - 1);
                double s = 0.0;
                for (double x : xs) {
                    const double z = (ys[g] - x) / h;
                    s += std::exp(-0.5 * z * z);
                }
                den[g] = s;
                dmax = std::max(dmax, s);
            }
            const double half_w = cell * 0.38;
            svg << "<polygon fill=\"" << color << "\" fill-opacity=\"0.45\" stroke=\"" << color
                << "\" points=\"";
            for (int g = 0; g < grid; ++g)
                svg << fmt_double(cx - half_w * den[g] / dmax) << "," << fmt_double(ypix(ys[g])) << " ";
            for (int g = grid - 1; g >= 0; --g)
                svg << fmt_double(cx + half_w * den[g] / dmax) << "," << fmt_double(ypix(ys[g])) << " ";
            svg << "\"/>\n";
        }

        // strip points, deterministically jittered
        for (const auto& r : records) {
            if (r.model != models[mi]) continue;
            const uint64_t hsh = splitmix64(splitmix64(r.fold * 1315423911u + r.epoch) ^ mi);
            const double jitter = (static_cast<double>(hsh >> 11) * 0x1.0p-53 - 0.5) * cell * 0.3;
            svg << "<circle cx=\"" << fmt_double(cx + jitter) << "\" cy=\"" << fmt_double(ypix(r.val_accuracy))
                << "\" r=\"2\" fill=\"black\" fill-opacity=\"0.35\"/>\n";
        }

        svg << "<line class=\"median\" data-model=\"" << detail::xml_escape(models[mi])
            << "\" data-median=\"" << fmt_double(median) << "\" x1=\"" << fmt_double(cx - cell * 0.42)
            << "\" y1=\"" << fmt_double(ypix(median)) << "\" x2=\"" << fmt_double(cx + cell * 0.42)
            << "\" y2=\"" << fmt_double(ypix(median)) << "\" stroke=\"black\" stroke-width=\"1.5\"/>\n";
        svg << "<text x=\"" << fmt_double(cx) << "\" y=\"" << top + plot_h + 22
            << "\" font-size=\"13\" text-anchor=\"middle\" font-family=\"sans-serif\">"
            << detail::xml_escape(models[mi]) << "</text>\n";
    }
    svg << "</svg>\n";

    std::ofstream f(path);
    if (!f) throw FormatError("cannot write " + path);
    f << svg.str();
}

}  // namespace kanmix
