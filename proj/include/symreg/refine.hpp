#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include "dataset.hpp"
#include "expr.hpp"

namespace symreg {

// Largest finite double; stands in for "infinitely bad" wherever a finite value is required.
inline constexpr double kSentinel = std::numeric_limits<double>::max();

// Backtracking Armijo search along `direction`: tries step 1 and halves at most
// `max_backtracks` times. Returns 0 when the direction is not a descent direction or no
// step satisfies f(x + a d) <= f(x) + c1 a g'd.
template <class F>
double line_search(F&& f, std::span<const double> x, double fx, std::span<const double> grad,
                   std::span<const double> direction, double c1 = 1e-4, int max_backtracks = 40) {
    double slope = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) slope += grad[i] * direction[i];
    if (!(slope < 0.0) || !std::isfinite(fx)) return 0.0;
    std::vector<double> trial(x.size());
    double step = 1.0;
    for (int k = 0; k <= max_backtracks; ++k) {
        for (std::size_t i = 0; i < x.size(); ++i) trial[i] = x[i] + step * direction[i];
        const double ft = f(std::span<const double>(trial));
        if (std::isfinite(ft) && ft <= fx + c1 * step * slope) return step;
        step *= 0.5;
    }
    return 0.0;
}

enum class RefineStatus { Converged, MaxIters, AllRestartsFailed };

inline std::string_view to_string(RefineStatus s) {
    switch (s) {
    case RefineStatus::Converged: return "converged";
    case RefineStatus::MaxIters: return "max_iters";
    case RefineStatus::AllRestartsFailed: return "failed";
    }
    return "?";
}

struct BfgsResult {
    std::vector<double> x;
    double f = kSentinel;
    int iterations = 0;
    RefineStatus status = RefineStatus::AllRestartsFailed;
};

// Full-memory BFGS with an identity initial inverse Hessian. `fg(x, grad*)` returns the
// objective and fills the gradient when grad is non-null; a non-finite return marks x as
// infeasible.
// Stops when the gradient norm drops to `gtol` or a step lowers f by at most ftol * |f|.
template <class FG>
BfgsResult minimize_bfgs(FG&& fg, std::vector<double> x, int max_iters, double gtol, double ftol = 1e-12) {
    const std::size_t k = x.size();
    BfgsResult res;
    std::vector<double> g(k), g_new(k), dir(k), s(k), yv(k), hy(k);
    double fx = fg(std::span<const double>(x), &g);
    if (!std::isfinite(fx)) return res;

    auto value_only = [&](std::span<const double> p) { return fg(p, nullptr); };
    auto identity = [k] {
        std::vector<double> h(k * k, 0.0);
        for (std::size_t i = 0; i < k; ++i) h[i * k + i] = 1.0;
        return h;
    };
    auto norm = [](const std::vector<double>& v) {
        double acc = 0.0;
        for (double e : v) acc += e * e;
        return std::sqrt(acc);
    };

    std::vector<double> h = identity();
    res.status = RefineStatus::MaxIters;
    for (int it = 0; it < max_iters; ++it) {
        res.iterations = it;
        if (norm(g) <= gtol) {
            res.status = RefineStatus::Converged;
            break;
        }
        for (std::size_t i = 0; i < k; ++i) {
            dir[i] = 0.0;
            for (std::size_t j = 0; j < k; ++j) dir[i] -= h[i * k + j] * g[j];
        }
        double step = line_search(value_only, x, fx, g, dir);
        if (step == 0.0) {
            // Fall back to steepest descent; if that fails too we are at a numerical minimum.
            h = identity();
            for (std::size_t i = 0; i < k; ++i) dir[i] = -g[i];
            step = line_search(value_only, x, fx, g, dir);
            if (step == 0.0) {
                res.status = RefineStatus::Converged;
                break;
            }
        }
        for (std::size_t i = 0; i < k; ++i) {
            s[i] = step * dir[i];
            x[i] += s[i];
        }
        const double f_new = fg(std::span<const double>(x), &g_new);
        for (std::size_t i = 0; i < k; ++i) yv[i] = g_new[i] - g[i];
        const bool stalled = fx - f_new <= ftol * std::fabs(fx);
        fx = f_new;
        g = g_new;

        double sy = 0.0;
        for (std::size_t i = 0; i < k; ++i) sy += s[i] * yv[i];
        if (sy > 1e-12 * norm(s) * norm(yv) && std::isfinite(sy)) {
            // H <- (I - rho s y') H (I - rho y s') + rho s s'
            const double rho = 1.0 / sy;
            for (std::size_t i = 0; i < k; ++i) {
                hy[i] = 0.0;
                for (std::size_t j = 0; j < k; ++j) hy[i] += h[i * k + j] * yv[j];
            }
            double yhy = 0.0;
            for (std::size_t i = 0; i < k; ++i) yhy += yv[i] * hy[i];
            for (std::size_t i = 0; i < k; ++i)
                for (std::size_t j = 0; j < k; ++j)
                    h[i * k + j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
        res.iterations = it + 1;
        if (stalled) {
            res.status = RefineStatus::Converged;
            break;
        }
    }
    if (res.status == RefineStatus::MaxIters && norm(g) <= gtol) res.status = RefineStatus::Converged;
    res.x = std::move(x);
    res.f = fx;
    return res;
}

struct RefineConfig {
    int max_iters = 100;
    int n_restarts = 4;
    double init_value = 1.0;
    double restart_scale = 1.0;
    std::uint64_t seed = 0;
    double tol = 1e-8;
    double ftol = 1e-12;
    // Fraction of rows allowed to evaluate non-finite before an iterate counts as failed.
    double max_dropped_fraction = 0.5;
};

struct RefinedEquation {
    Sequence seq;
    std::vector<double> consts;
    double train_mse = kSentinel;
    RefineStatus status = RefineStatus::AllRestartsFailed;
};

// Mean squared error over rows where the prediction (and, when requested, its gradient)
// is finite. Returns +inf when more than the allowed fraction of rows is dropped.
inline double masked_mse(const ExprTree& tree, std::span<const double> c, const Dataset& bag,
                         double max_dropped_fraction, std::vector<double>* grad = nullptr) {
    const std::size_t n = bag.n();
    const std::size_t k = c.size();
    detail::check_shapes(tree, c, bag.x);
    const auto values = detail::forward(tree, c, bag.x);
    const std::span<const double> pred(values.data(), n);
    Matrix jac;
    if (grad) {
        jac = detail::reverse(tree, values, n);
        grad->assign(k, 0.0);
    }
    double sse = 0.0;
    std::size_t used = 0;
    for (std::size_t i = 0; i < n; ++i) {
        bool ok = std::isfinite(pred[i]);
        if (ok && grad)
            for (std::size_t j = 0; j < k && ok; ++j) ok = std::isfinite(jac(i, j));
        if (!ok) continue;
        const double r = pred[i] - bag.y[i];
        sse += r * r;
        if (grad)
            for (std::size_t j = 0; j < k; ++j) (*grad)[j] += 2.0 * r * jac(i, j);
        ++used;
    }
    if (used == 0 || static_cast<double>(n - used) > max_dropped_fraction * static_cast<double>(n))
        return std::numeric_limits<double>::infinity();
    const double mse = sse / static_cast<double>(used);
    if (grad)
        for (auto& gj : *grad) gj /= static_cast<double>(used);
    return std::isfinite(mse) ? mse : std::numeric_limits<double>::infinity();
}

// Fits the constant placeholders of a Complete sequence by multi-start BFGS on the MSE.
// `initial`, when given, replaces the first start point.
inline RefinedEquation refine_constants(std::span<const TokenId> seq, const Dataset& bag, const RefineConfig& cfg,
                                        const Vocabulary& vocab, std::span<const double> initial = {}) {
    if (cfg.max_iters < 1 || cfg.n_restarts < 1) throw ConfigError("refinement needs positive iteration and restart counts");
    if (bag.n() == 0) throw DataError("cannot refine on an empty bag");
    const ExprTree tree = build_tree(seq, vocab);
    RefinedEquation out;
    out.seq = tree.sequence();
    const auto k = static_cast<std::size_t>(tree.n_consts());

    if (k == 0) {
        const double mse = masked_mse(tree, {}, bag, cfg.max_dropped_fraction);
        if (std::isfinite(mse)) {
            out.train_mse = mse;
            out.status = RefineStatus::Converged;
        }
        return out;
    }
    if (!initial.empty() && initial.size() != k) throw DimensionError("initial constants have the wrong length");

    double y2 = 0.0;
    for (double v : bag.y) y2 += v * v;
    y2 /= static_cast<double>(bag.n());

    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> jitter(0.0, cfg.restart_scale);
    auto fg = [&](std::span<const double> c, std::vector<double>* grad) {
        return masked_mse(tree, c, bag, cfg.max_dropped_fraction, grad);
    };

    for (int start = 0; start < cfg.n_restarts; ++start) {
        std::vector<double> x0(k, cfg.init_value);
        if (start == 0 && !initial.empty()) x0.assign(initial.begin(), initial.end());
        if (start > 0)
            for (auto& v : x0) v = cfg.init_value + jitter(rng);
        auto res = minimize_bfgs(fg, std::move(x0), cfg.max_iters, cfg.tol, cfg.ftol);
        if (!std::isfinite(res.f) || res.x.empty()) continue;
        if (res.f < out.train_mse) {
            out.train_mse = res.f;
            out.consts = std::move(res.x);
            out.status = res.status;
        }
        // An essentially exact fit cannot be improved by further starts.
        if (out.train_mse <= 1e-14 * (y2 + 1e-300)) break;
    }
    if (out.consts.empty()) {
        out.consts.assign(k, cfg.init_value);
        out.train_mse = kSentinel;
        out.status = RefineStatus::AllRestartsFailed;
    }
    return out;
}

} // namespace symreg
