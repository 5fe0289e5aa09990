#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <unordered_set>
#include <vector>

#include "mcts.hpp"

namespace symreg {

enum class BaselineStrategy { Sampling, Beam };

inline std::string_view to_string(BaselineStrategy s) { return s == BaselineStrategy::Sampling ? "sampling" : "beam"; }

struct BaselineConfig {
    BaselineStrategy strategy = BaselineStrategy::Sampling;
    int candidates = 10;   // C
    int refine_top = 10;   // K
    double temperature = 0.1;
    double lambda = 0.1;   // only used to report a reward comparable with the search
    int max_len = kDefaultMaxLen;
    RefineConfig refine_cfg{};
    std::uint64_t seed = 0;

    void validate() const {
        if (candidates < 1) throw ConfigError("baseline needs C >= 1");
        if (refine_top < 1 || refine_top > candidates) throw ConfigError("baseline needs 1 <= K <= C");
        if (temperature < 0.0) throw ConfigError("temperature must be >= 0");
    }
};

struct BaselineResult {
    ScoredEquation best;
    std::uint64_t candidates_generated = 0;
    std::size_t unique_candidates = 0;
    std::size_t refined = 0;
    double wall_time = 0.0;
};

// Generates C candidates (independent samples or one width-C beam), deduplicates them,
// refines the K with the lowest NMSE at constants = init_value and returns the refined
// candidate with the highest training R^2 (ties: earliest generated).
inline BaselineResult baseline_decode(const Dataset& bag, const Policy& policy, const BaselineConfig& cfg,
                                      const Vocabulary& vocab = Vocabulary()) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    PolicyContext ctx = open_context(policy, bag, vocab, cfg.max_len);

    std::vector<Sequence> generated;
    if (cfg.strategy == BaselineStrategy::Sampling) {
        std::mt19937_64 rng(cfg.seed);
        for (int i = 0; i < cfg.candidates; ++i) generated.push_back(ctx.sample(Sequence{}, cfg.temperature, rng));
    } else {
        generated = ctx.complete(Sequence{}, cfg.candidates, cfg.max_len).sequences;
    }

    std::vector<Sequence> unique;
    std::unordered_set<Sequence, SequenceHash> seen;
    for (auto& s : generated)
        if (seen.insert(s).second) unique.push_back(std::move(s));

    std::vector<double> pre(unique.size());
    for (std::size_t i = 0; i < unique.size(); ++i) {
        const ExprTree tree = build_tree(unique[i], vocab);
        const std::vector<double> c(tree.n_consts(), cfg.refine_cfg.init_value);
        pre[i] = nmse(bag.y, evaluate(tree, c, bag.x));
    }
    std::vector<std::size_t> order(unique.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return pre[a] < pre[b]; });
    order.resize(std::min<std::size_t>(order.size(), static_cast<std::size_t>(cfg.refine_top)));
    std::sort(order.begin(), order.end());

    BaselineResult out;
    out.candidates_generated = static_cast<std::uint64_t>(cfg.candidates);
    out.unique_candidates = unique.size();
    out.refined = order.size();
    const RewardConfig rc{cfg.lambda, cfg.max_len, 1e-9};
    RefineConfig refine = cfg.refine_cfg;
    refine.seed = cfg.seed;
    bool have = false;
    for (std::size_t i : order) {
        ScoredEquation s = score_equation(refine_constants(unique[i], bag, refine, vocab), bag, rc, vocab);
        if (!have || s.r2_train > out.best.r2_train) {
            out.best = std::move(s);
            have = true;
        }
    }
    out.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

struct DecoderRecord {
    std::string decoder;
    std::uint64_t candidates_generated = 0;
    double train_r2 = 0.0;
    double test_r2 = 0.0;
    double train_reward = 0.0;
    std::size_t complexity = 0;
    double wall_time = 0.0;
    ScoredEquation best;
};

struct Comparison {
    DecoderRecord mcts;
    DecoderRecord baseline;
};

// Runs the search on `train`, then the baseline with C set to the search's
// candidates_generated and every candidate refined (K = C).
inline Comparison budget_matched_compare(const Dataset& train, const Dataset& test, const Policy& policy,
                                         const MctsConfig& mcts_cfg, BaselineConfig baseline_cfg,
                                         const Vocabulary& vocab = Vocabulary()) {
    auto fill = [&](DecoderRecord& r, const ScoredEquation& s) {
        r.best = s;
        r.train_r2 = s.r2_train;
        r.train_reward = s.reward;
        r.complexity = s.complexity;
        const ExprTree tree = build_tree(s.eq.seq, vocab);
        if (tree.n_consts() == static_cast<int>(s.eq.consts.size()) && test.n() >= 2)
            r.test_r2 = r_squared(test.y, evaluate(tree, s.eq.consts, test.x)).value;
    };

    Comparison c;
    const auto m = mcts_decode(train, policy, mcts_cfg, vocab);
    c.mcts.decoder = "mcts";
    c.mcts.candidates_generated = m.stats.candidates_generated;
    c.mcts.wall_time = m.stats.wall_time;
    fill(c.mcts, m.best);

    baseline_cfg.candidates = static_cast<int>(std::max<std::uint64_t>(1, m.stats.candidates_generated));
    baseline_cfg.refine_top = baseline_cfg.candidates;
    baseline_cfg.lambda = mcts_cfg.lambda;
    baseline_cfg.max_len = mcts_cfg.max_len;
    const auto b = baseline_decode(train, policy, baseline_cfg, vocab);
    c.baseline.decoder = std::string(to_string(baseline_cfg.strategy));
    c.baseline.candidates_generated = b.candidates_generated;
    c.baseline.wall_time = b.wall_time;
    fill(c.baseline, b.best);
    return c;
}

} // namespace symreg
