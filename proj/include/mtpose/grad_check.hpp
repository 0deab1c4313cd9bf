#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mtpose/tensor.hpp"

namespace mtpose {

struct GradCheckOptions {
    double eps = 1e-3;
    double tol = 1e-3;
    /// Coordinates checked per input; 0 checks all of them. A seeded subset
    /// keeps whole-network checks affordable.
    std::size_t max_coords_per_input = 0;
    std::uint64_t seed = 0;
    /// Denominator floor: gradients below it are compared absolutely.
    double abs_floor = 1e-6;
    /// Skip coordinates where the function is not smooth at the scale of eps
    /// (a relu/max kink inside [x-eps, x+eps]): central differences at eps
    /// and eps/2 disagree, or the one-sided gap does not shrink with the
    /// step. Decided from forward values only; the check fails if more than
    /// max_skip_fraction of the coordinates are skipped.
    bool skip_nonsmooth = false;
    double max_skip_fraction = 0.2;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    bool pass = false;
    std::size_t coords_checked = 0;
    std::size_t coords_skipped = 0;
    std::string worst;  // "input[i] coord c: analytic a numeric b"
    std::string message;
};

/// Central-difference gradient check of a scalar function.
///
/// `fn` maps the inputs to a scalar tensor. Relative error per coordinate
/// is |a - n| / max(|a|, |n|, abs_floor). Non-finite outputs or exceptions
/// produce a failing report instead of propagating.
template <typename Real, typename Fn>
GradCheckReport grad_check(Fn&& fn, std::vector<Tensor<Real>> inputs, const GradCheckOptions& opt = {}) {
    GradCheckReport report;
    try {
        for (auto& in : inputs) {
            in.set_requires_grad(true);
            in.zero_grad();
        }
        const Tensor<Real> out = fn(inputs);
        if (out.numel() != 1) {
            report.message = "function output is not scalar: " + shape_str(out.shape());
            return report;
        }
        if (!std::isfinite(static_cast<double>(out.item()))) {
            report.message = "non-finite function value";
            return report;
        }
        const double base = static_cast<double>(out.item());
        backward(out);

        std::mt19937_64 rng(opt.seed);
        double worst = 0.0;
        for (std::size_t k = 0; k < inputs.size(); ++k) {
            auto& in = inputs[k];
            std::vector<Real> analytic(in.numel(), Real(0));
            if (in.has_grad()) std::copy(in.grad().begin(), in.grad().end(), analytic.begin());

            std::vector<std::size_t> coords(in.numel());
            std::iota(coords.begin(), coords.end(), std::size_t{0});
            if (opt.max_coords_per_input > 0 && coords.size() > opt.max_coords_per_input) {
                std::shuffle(coords.begin(), coords.end(), rng);
                coords.resize(opt.max_coords_per_input);
                std::sort(coords.begin(), coords.end());
            }

            NoGradGuard no_grad;
            for (std::size_t c : coords) {
                const Real saved = in[c];
                in[c] = static_cast<Real>(static_cast<double>(saved) + opt.eps);
                const double plus = static_cast<double>(fn(inputs).item());
                in[c] = static_cast<Real>(static_cast<double>(saved) - opt.eps);
                const double minus = static_cast<double>(fn(inputs).item());
                in[c] = saved;
                if (!std::isfinite(plus) || !std::isfinite(minus)) {
                    report.message = "non-finite function value under perturbation";
                    report.max_rel_error = INFINITY;
                    return report;
                }
                const double numeric = (plus - minus) / (2.0 * opt.eps);
                if (opt.skip_nonsmooth) {
                    const double h = opt.eps / 2;
                    in[c] = static_cast<Real>(static_cast<double>(saved) + h);
                    const double plus_h = static_cast<double>(fn(inputs).item());
                    in[c] = static_cast<Real>(static_cast<double>(saved) - h);
                    const double minus_h = static_cast<double>(fn(inputs).item());
                    in[c] = saved;
                    const double half = (plus_h - minus_h) / (2.0 * h);
                    // smooth: one-sided gap scales with the step, central values agree
                    const double gap_full = (plus - 2 * base + minus) / opt.eps;
                    const double gap_half = (plus_h - 2 * base + minus_h) / h;
                    const double limit = 0.5 * opt.tol * std::max({std::abs(numeric), std::abs(half), opt.abs_floor});
                    if (std::abs(numeric - half) > limit || std::abs(gap_full - 2 * gap_half) > limit) {
                        ++report.coords_skipped;
                        continue;
                    }
                }
                const double a = static_cast<double>(analytic[c]);
                const double denom = std::max({std::abs(a), std::abs(numeric), opt.abs_floor});
                const double rel = std::abs(a - numeric) / denom;
                ++report.coords_checked;
                if (rel > worst || report.worst.empty()) {
                    worst = std::max(worst, rel);
                    std::ostringstream os;
                    os << "input[" << k << "] coord " << c << ": analytic " << a << " numeric " << numeric;
                    report.worst = os.str();
                }
            }
        }
        report.max_rel_error = worst;
        report.pass = worst < opt.tol;
        const std::size_t total = report.coords_checked + report.coords_skipped;
        if (report.coords_skipped > 0 &&
            static_cast<double>(report.coords_skipped) > opt.max_skip_fraction * static_cast<double>(total)) {
            report.pass = false;
            report.message = std::to_string(report.coords_skipped) + " of " + std::to_string(total) +
                             " coordinates non-smooth within eps";
        }
    } catch (const std::exception& e) {
        report.pass = false;
        report.message = std::string("exception: ") + e.what();
    }
    for (auto& in : inputs) in.zero_grad();
    return report;
}

}  // namespace mtpose
