#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "dataset.hpp"
#include "errors.hpp"
#include "expr.hpp"
#include "refine.hpp"

namespace symreg {

struct RewardConfig {
    double lambda = 0.1;
    int max_len = 200;
    double epsilon = 1e-9;
};

namespace detail {
inline void require_same_length(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw DimensionError("length mismatch: " + std::to_string(a.size()) + " vs " +
                                                   std::to_string(b.size()));
}
inline bool all_finite(std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double e) { return std::isfinite(e); });
}
} // namespace detail

// mean((y - y_hat)^2) / (mean(y^2) + epsilon); kSentinel when y_hat has non-finite entries.
inline double nmse(std::span<const double> y, std::span<const double> y_hat, double epsilon = 1e-9) {
    detail::require_same_length(y, y_hat);
    if (y.empty()) throw DimensionError("nmse of empty vectors");
    if (!detail::all_finite(y_hat)) return kSentinel;
    double se = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        se += (y[i] - y_hat[i]) * (y[i] - y_hat[i]);
        sq += y[i] * y[i];
    }
    const double n = static_cast<double>(y.size());
    const double v = (se / n) / (sq / n + epsilon);
    return std::isfinite(v) ? v : kSentinel;
}

// 1 / (1 + NMSE) + lambda * exp(-length / L)
inline double reward_from(double nmse_value, std::size_t length, const RewardConfig& cfg) {
    if (!(cfg.epsilon > 0.0) || cfg.max_len < 1 || cfg.lambda < 0.0) throw ConfigError("invalid reward configuration");
    return 1.0 / (1.0 + nmse_value) + cfg.lambda * std::exp(-static_cast<double>(length) / cfg.max_len);
}

struct RSquared {
    double value = 0.0;
    bool pathological = false;
};

// 1 - SS_res / SS_tot; 0 with the pathology flag for non-finite predictions or constant y.
inline RSquared r_squared(std::span<const double> y, std::span<const double> y_hat) {
    detail::require_same_length(y, y_hat);
    if (y.size() < 2) throw DimensionError("r_squared needs at least 2 points");
    if (!detail::all_finite(y_hat)) return {0.0, true};
    const double mean = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
    double ss_res = 0.0, ss_tot = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        ss_res += (y[i] - y_hat[i]) * (y[i] - y_hat[i]);
        ss_tot += (y[i] - mean) * (y[i] - mean);
    }
    if (ss_tot == 0.0) return {0.0, true};
    const double r2 = 1.0 - ss_res / ss_tot;
    if (!std::isfinite(r2)) return {0.0, true};
    return {r2, false};
}

// 1 iff the largest relative error left after discarding the worst floor(5% n) points is
// at most omega. Rows with y == 0 use the absolute error.
inline int acc_tolerance(std::span<const double> y, std::span<const double> y_hat, double omega) {
    detail::require_same_length(y, y_hat);
    std::vector<double> err(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double abs_err = std::fabs(y_hat[i] - y[i]);
        const double e = y[i] == 0.0 ? abs_err : abs_err / std::fabs(y[i]);
        err[i] = std::isfinite(e) ? e : std::numeric_limits<double>::infinity();
    }
    const std::size_t discard = y.size() >= 20 ? y.size() / 20 : 0;
    if (discard >= err.size()) return 1;
    std::sort(err.begin(), err.end());
    return err[err.size() - 1 - discard] <= omega ? 1 : 0;
}

struct ScoredEquation {
    RefinedEquation eq;
    double reward = 0.0;
    double nmse = kSentinel;
    double r2_train = 0.0;
    std::size_t complexity = 0;
};

inline ScoredEquation score_equation(RefinedEquation eq, const Dataset& bag, const RewardConfig& cfg,
                                     const Vocabulary& vocab) {
    ScoredEquation s;
    const ExprTree tree = build_tree(eq.seq, vocab);
    s.complexity = tree.size();
    std::vector<double> pred;
    if (tree.n_consts() == static_cast<int>(eq.consts.size()))
        pred = evaluate(tree, eq.consts, bag.x);
    s.nmse = pred.empty() ? kSentinel : nmse(bag.y, pred, cfg.epsilon);
    s.reward = reward_from(s.nmse, s.complexity, cfg);
    if (bag.n() >= 2 && !pred.empty()) s.r2_train = r_squared(bag.y, pred).value;
    s.eq = std::move(eq);
    return s;
}

// A point to rank: higher accuracy and lower complexity are better.
struct ParetoPoint {
    double accuracy;
    double complexity;
};

inline bool dominates(const ParetoPoint& a, const ParetoPoint& b) {
    return a.accuracy >= b.accuracy && a.complexity <= b.complexity &&
           (a.accuracy > b.accuracy || a.complexity < b.complexity);
}

// Non-dominated sorting: fronts[0] holds the indices of non-dominated points, fronts[1]
// those dominated only by fronts[0], and so on. Points are visited in lexicographic order
// (accuracy desc, complexity asc), so a point can only be dominated by points seen earlier
// and is placed into the first front that holds none of its dominators.
inline std::vector<std::vector<std::size_t>> pareto_front(std::span<const ParetoPoint> points) {
    std::vector<std::size_t> order(points.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (points[a].accuracy != points[b].accuracy) return points[a].accuracy > points[b].accuracy;
        return points[a].complexity < points[b].complexity;
    });
    std::vector<std::vector<std::size_t>> fronts;
    for (std::size_t i : order) {
        auto dominated_by = [&](const std::vector<std::size_t>& front) {
            return std::any_of(front.begin(), front.end(), [&](std::size_t j) { return dominates(points[j], points[i]); });
        };
        auto it = std::find_if(fronts.begin(), fronts.end(), [&](const auto& f) { return !dominated_by(f); });
        if (it == fronts.end()) {
            fronts.emplace_back();
            it = fronts.end() - 1;
        }
        it->push_back(i);
    }
    for (auto& f : fronts) std::sort(f.begin(), f.end());
    return fronts;
}

} // namespace symreg
