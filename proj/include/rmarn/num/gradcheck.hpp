#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "rmarn/num/rng.hpp"
#include "rmarn/num/var.hpp"

namespace rmarn::num {

struct GradCheckOptions {
    double h = 1e-5;
    // Coordinates sampled per tensor; 0 checks every coordinate.
    int64_t max_coords_per_tensor = 0;
    uint64_t seed = 0;
    // Test hook: scales the analytic gradient of one parameter before the
    // comparison, so the checker itself can be shown to catch a broken
    // backward pass.
    int corrupt_param = -1;
    double corrupt_scale = 1.0;
};

struct GradCheckEntry {
    std::string param;
    double max_rel_error = 0.0;
    int64_t worst_index = -1;
    double analytic = 0.0;
    double numeric = 0.0;
    int64_t coords_checked = 0;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst_param;
    std::vector<GradCheckEntry> entries;
};

// Compares reverse-mode gradients of a scalar-valued function against central
// finite differences (f(x+h) - f(x-h)) / 2h, coordinate by coordinate.
// Run at double precision; FD evaluations rebuild the forward with the tape
// disabled.
inline GradCheckReport check_gradients(const std::function<VarT<double>()>& f,
                                       std::span<VarT<double>> params,
                                       const GradCheckOptions& opts = {}) {
    for (auto& p : params) p.zero_grad();
    VarT<double> loss = f();
    loss.backward();

    std::vector<TensorT<double>> analytic;
    analytic.reserve(params.size());
    for (size_t pi = 0; pi < params.size(); ++pi) {
        TensorT<double> g = params[pi].grad().empty() ? TensorT<double>(params[pi].value().shape())
                                                      : params[pi].grad();
        if (static_cast<int>(pi) == opts.corrupt_param) {
            for (int64_t i = 0; i < g.numel(); ++i) g[i] *= opts.corrupt_scale;
        }
        analytic.push_back(std::move(g));
    }

    Rng rng(Rng::derive(opts.seed, 0x67726164));
    GradCheckReport report;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        VarT<double>& p = params[pi];
        GradCheckEntry entry;
        entry.param = p.name().empty() ? "param" + std::to_string(pi) : p.name();
        const int64_t n = p.value().numel();
        std::vector<int64_t> coords;
        if (opts.max_coords_per_tensor > 0 && n > opts.max_coords_per_tensor) {
            for (int64_t i = 0; i < opts.max_coords_per_tensor; ++i)
                coords.push_back(rng.uniform_int(0, n - 1));
            std::sort(coords.begin(), coords.end());
            coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
        } else {
            coords.resize(static_cast<size_t>(n));
            for (int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
        }
        for (int64_t idx : coords) {
            const double orig = p.value()[idx];
            double fp, fm;
            {
                NoGradGuard ng;
                p.value_mut()[idx] = orig + opts.h;
                fp = f().value()[0];
                p.value_mut()[idx] = orig - opts.h;
                fm = f().value()[0];
                p.value_mut()[idx] = orig;
            }
            const double fd = (fp - fm) / (2.0 * opts.h);
            const double a = analytic[pi][idx];
            const double denom = std::max({std::abs(a), std::abs(fd), 1e-6});
            const double rel = std::abs(a - fd) / denom;
            entry.coords_checked += 1;
            if (rel > entry.max_rel_error) {
                entry.max_rel_error = rel;
                entry.worst_index = idx;
                entry.analytic = a;
                entry.numeric = fd;
            }
        }
        if (entry.max_rel_error > report.max_rel_error) {
            report.max_rel_error = entry.max_rel_error;
            report.worst_param = entry.param;
        }
        report.entries.push_back(std::move(entry));
    }
    return report;
}

}  // namespace rmarn::num
