#pragma once

// Central finite-difference gradient checking against the tape.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "kanmix/tensor.hpp"

namespace kanmix {

struct GradCheckReport {
    double max_rel_error = 0.0;
    bool pass = true;
    int64_t worst_param = -1;
    int64_t worst_index = -1;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

// f evaluates a scalar loss from the current values of `params` (it closes
// over them; Tensor is a shared handle so in-place edits are visible).
// Relative error is |a-n| / max(1, |a|, |n|).
template <typename T, typename F>
GradCheckReport grad_check(F&& f, std::vector<Tensor<T>> params, T h = T(1e-5),
                           double tol = 1e-6) {
    for (auto& p : params) {
        p.set_requires_grad(true);
        p.zero_grad();
    }
    GradTape<T>::active().clear();
    Tensor<T> loss = f();
    if (!std::isfinite(static_cast<double>(loss.item())))
        throw Error(Error::kGeneric, "grad_check: non-finite loss");
    backward(loss);

    std::vector<std::vector<T>> analytic;
    analytic.reserve(params.size());
    for (auto& p : params) {
        if (p.has_grad())
            analytic.emplace_back(p.grad().begin(), p.grad().end());
        else
            analytic.emplace_back(static_cast<size_t>(p.size()), T(0));
    }

    GradCheckReport report;
    GradPause<T> pause;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto vals = params[pi].values();  // span view into the tensor
        for (int64_t i = 0; i < params[pi].size(); ++i) {
            const T orig = vals[static_cast<size_t>(i)];
            vals[static_cast<size_t>(i)] = orig + h;
            const double fp = static_cast<double>(f().item());
            vals[static_cast<size_t>(i)] = orig - h;
            const double fm = static_cast<double>(f().item());
            vals[static_cast<size_t>(i)] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw Error(Error::kGeneric, "grad_check: non-finite probe value");
            const double numeric = (fp - fm) / (2.0 * static_cast<double>(h));
            const double a = static_cast<double>(analytic[pi][static_cast<size_t>(i)]);
            const double rel = std::abs(a - numeric) /
                               std::max({1.0, std::abs(a), std::abs(numeric)});
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_param = static_cast<int64_t>(pi);
                report.worst_index = i;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    report.pass = report.max_rel_error < tol;
    return report;
}

}  // namespace kanmix
