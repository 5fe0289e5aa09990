#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dataset.hpp"
#include "metrics.hpp"
#include "policy.hpp"
#include "refine.hpp"

namespace symreg {

enum class SearchMode { TokenCommit, SingleRoot };

inline std::string_view to_string(SearchMode m) { return m == SearchMode::TokenCommit ? "token" : "root"; }

struct MctsConfig {
    int k_max = 3;
    int rollouts = 3;
    int sim_beam = 1;
    double beta = 1.0;
    double lambda = 0.1;
    SearchMode mode = SearchMode::TokenCommit;
    int max_len = kDefaultMaxLen;
    bool cache_topk = true;
    bool cache_seq = true;
    // Refine constants inside every reward computation; off scores placeholders at init_value.
    bool refine = true;
    RefineConfig refine_cfg{};
    std::uint64_t seed = 0;
    // Verify Q monotonicity, ledger dominance and the accounting identities while searching.
    bool check_invariants = true;

    RewardConfig reward() const { return RewardConfig{lambda, max_len, 1e-9}; }

    void validate() const {
        if (k_max < 1 || rollouts < 1 || sim_beam < 1) throw ConfigError("k_max, rollouts and beam must be >= 1");
        if (beta < 0.0) throw ConfigError("beta must be >= 0");
        if (lambda < 0.0) throw ConfigError("lambda must be >= 0");
        if (max_len < 1) throw ConfigError("max_len must be >= 1");
    }
};

struct SearchNode {
    Sequence state;
    Validity validity = Validity::Partial;
    std::vector<TokenId> actions;          // expansion order: descending prior
    std::map<TokenId, std::size_t> children;
    std::map<TokenId, double> q;           // max return per action, only for visited actions
    std::map<TokenId, double> priors;
    double n_visits = 0.0;
    bool expanded = false;
};

struct SearchStats {
    std::uint64_t policy_topk_calls = 0;
    std::uint64_t policy_complete_calls = 0;
    std::uint64_t candidates_generated = 0;  // policy_complete_calls * beam
    std::uint64_t cached_candidates = 0;     // completions served by the sequence cache
    std::uint64_t cache_hits_topk = 0;
    std::uint64_t cache_hits_seq = 0;
    std::uint64_t rollouts = 0;
    std::uint64_t refinements = 0;
    double wall_time = 0.0;

    std::uint64_t policy_calls() const { return policy_topk_calls + policy_complete_calls; }

    SearchStats& operator+=(const SearchStats& o) {
        policy_topk_calls += o.policy_topk_calls;
        policy_complete_calls += o.policy_complete_calls;
        candidates_generated += o.candidates_generated;
        cached_candidates += o.cached_candidates;
        cache_hits_topk += o.cache_hits_topk;
        cache_hits_seq += o.cache_hits_seq;
        rollouts += o.rollouts;
        refinements += o.refinements;
        wall_time += o.wall_time;
        return *this;
    }
};

// P-UCB: Q + beta * P * sqrt(ln(max(N(s), 1)) / (1 + N(s'))).
inline double p_ucb_score(double q, double prior, double parent_visits, double child_visits, double beta) {
    return q + beta * prior * std::sqrt(std::log(std::max(parent_visits, 1.0)) / (1.0 + child_visits));
}

class SearchTree {
public:
    explicit SearchTree(Sequence root_state = {}, Validity v = Validity::Partial) {
        nodes_.push_back(SearchNode{std::move(root_state), v});
    }

    SearchNode& operator[](std::size_t i) { return nodes_[i]; }
    const SearchNode& operator[](std::size_t i) const { return nodes_[i]; }
    std::size_t size() const { return nodes_.size(); }

    std::size_t add_child(std::size_t parent, TokenId action, double prior, const Vocabulary& vocab) {
        Sequence s = nodes_[parent].state;
        s.push_back(action);
        const auto v = is_valid_prefix(s, vocab);
        nodes_.push_back(SearchNode{std::move(s), v});
        const std::size_t id = nodes_.size() - 1;
        auto& p = nodes_[parent];
        p.children[action] = id;
        p.priors[action] = prior;
        p.actions.push_back(action);
        return id;
    }

    double p_ucb(std::size_t node, TokenId action, double beta) const {
        const auto& n = nodes_[node];
        const auto qi = n.q.find(action);
        const auto pi = n.priors.find(action);
        const auto ci = n.children.find(action);
        const double q = qi == n.q.end() ? 0.0 : qi->second;
        const double prior = pi == n.priors.end() ? 0.0 : pi->second;
        const double child_visits = ci == n.children.end() ? 0.0 : nodes_[ci->second].n_visits;
        return p_ucb_score(q, prior, n.n_visits, child_visits, beta);
    }

    // argmax of P-UCB over the recorded actions; ties go to the lowest token id.
    TokenId select(std::size_t node, double beta) const {
        const auto& n = nodes_[node];
        if (!n.expanded || n.actions.empty()) throw std::logic_error("select on an unexpanded node");
        std::vector<TokenId> ids = n.actions;
        std::sort(ids.begin(), ids.end());
        TokenId best = ids.front();
        double best_score = p_ucb(node, best, beta);
        for (std::size_t i = 1; i < ids.size(); ++i) {
            const double s = p_ucb(node, ids[i], beta);
            if (s > best_score) {
                best_score = s;
                best = ids[i];
            }
        }
        return best;
    }

    // Max-backup along the path; every node on it, including the evaluated leaf, gains a visit.
    void backpropagate(const std::vector<std::pair<std::size_t, TokenId>>& path, std::size_t leaf,
                       std::optional<double> reward) {
        for (const auto& [node, action] : path) {
            auto& n = nodes_[node];
            n.n_visits += 1.0;
            if (!reward) continue;
            auto [it, inserted] = n.q.try_emplace(action, *reward);
            if (!inserted) it->second = std::max(it->second, *reward);
        }
        nodes_[leaf].n_visits += 1.0;
    }

    // Commitment rule after a round of rollouts: most visits, then higher Q, then lower id.
    TokenId most_visited(std::size_t node) const {
        const auto& n = nodes_[node];
        if (n.actions.empty()) throw std::logic_error("no children to commit to");
        std::vector<TokenId> ids = n.actions;
        std::sort(ids.begin(), ids.end());
        TokenId best = ids.front();
        auto key = [&](TokenId a) {
            const auto qi = n.q.find(a);
            return std::pair{nodes_[n.children.at(a)].n_visits, qi == n.q.end() ? 0.0 : qi->second};
        };
        for (TokenId a : ids)
            if (key(a) > key(best)) best = a;
        return best;
    }

private:
    std::vector<SearchNode> nodes_;
};

// state -> top-k answer, scoped to one bag (one policy context).
class TopKCache {
public:
    const PolicyOutput* find(const Sequence& state) const {
        auto it = map_.find(state);
        return it == map_.end() ? nullptr : &it->second;
    }
    void store(const Sequence& state, PolicyOutput out) { map_.try_emplace(state, std::move(out)); }
    std::size_t size() const { return map_.size(); }

private:
    std::unordered_map<Sequence, PolicyOutput, SequenceHash> map_;
};

// Greedy completions. A completion S produced from state s is the greedy completion of
// every state between s and S, so each of those prefixes maps to S.
class SequenceCache {
public:
    const Sequence* find(const Sequence& state) const {
        auto it = prefix_to_entry_.find(state);
        return it == prefix_to_entry_.end() ? nullptr : &entries_[it->second];
    }
    void store(const Sequence& origin, const Sequence& completion) {
        const std::size_t id = entries_.size();
        entries_.push_back(completion);
        Sequence prefix = origin;
        for (std::size_t i = origin.size(); i < completion.size(); ++i) {
            prefix_to_entry_.try_emplace(prefix, id);
            prefix.push_back(completion[i]);
        }
    }
    std::size_t size() const { return entries_.size(); }

private:
    std::vector<Sequence> entries_;
    std::unordered_map<Sequence, std::size_t, SequenceHash> prefix_to_entry_;
};

// Run-global dictionary of scored equations; each distinct sequence is refined once.
class CandidateLedger {
public:
    const ScoredEquation* find(const Sequence& seq) const {
        auto it = index_.find(seq);
        return it == index_.end() ? nullptr : &entries_[it->second];
    }
    const ScoredEquation& insert(ScoredEquation s) {
        const Sequence key = s.eq.seq;
        auto [it, inserted] = index_.try_emplace(key, entries_.size());
        if (inserted) {
            entries_.push_back(std::move(s));
            if (!best_ || entries_.back().reward > entries_[*best_].reward) best_ = entries_.size() - 1;
        }
        return entries_[it->second];
    }
    const std::vector<ScoredEquation>& entries() const { return entries_; }
    const ScoredEquation* best() const { return best_ ? &entries_[*best_] : nullptr; }
    bool contains_reward(double r) const {
        return std::any_of(entries_.begin(), entries_.end(), [r](const auto& e) { return e.reward == r; });
    }

private:
    std::vector<ScoredEquation> entries_;
    std::unordered_map<Sequence, std::size_t, SequenceHash> index_;
    std::optional<std::size_t> best_;
};

struct DecodeResult {
    ScoredEquation best;
    SearchStats stats;
    std::vector<ScoredEquation> ledger;  // insertion order
    Sequence committed;                  // root state when the search stopped
};

struct Evaluation {
    std::optional<double> reward;
    Sequence sequence;  // best candidate scored by this evaluation
};

// MCTS-guided decoding over one bag: P-UCB selection, top-k expansion, beam-search
// simulation, max-backup. The answer is the best entry of the candidate ledger.
class MctsDecoder {
public:
    MctsDecoder(PolicyContext& ctx, const Dataset& bag, MctsConfig cfg)
        : ctx_(ctx), bag_(bag), cfg_(std::move(cfg)), vocab_(ctx.vocab()) {
        cfg_.validate();
        if (ctx_.max_len() != cfg_.max_len) throw ConfigError("policy context and search disagree on max_len");
        if (static_cast<int>(bag_.d()) != ctx_.data_dim()) throw DimensionError("bag and policy context dimensions differ");
    }

    SearchTree& tree() { return tree_; }
    const SearchStats& stats() const { return stats_; }
    const CandidateLedger& ledger() const { return ledger_; }

    DecodeResult run() {
        const auto t0 = std::chrono::steady_clock::now();
        std::size_t root = 0;
        if (cfg_.mode == SearchMode::SingleRoot) {
            for (int i = 0; i < cfg_.rollouts; ++i) rollout(root);
            if (cfg_.check_invariants) check_visits(root);
        } else {
            while (tree_[root].validity == Validity::Partial) {
                for (int i = 0; i < cfg_.rollouts; ++i) rollout(root);
                if (cfg_.check_invariants) check_visits(root);
                root = tree_[root].children.at(tree_.most_visited(root));
            }
        }
        stats_.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

        if (!ledger_.best()) throw PolicyError("search produced no scored candidate");
        if (cfg_.check_invariants) check_final();
        DecodeResult out;
        out.best = *ledger_.best();
        out.stats = stats_;
        out.ledger = ledger_.entries();
        out.committed = tree_[root].state;
        return out;
    }

    // One cycle of selection, expansion, evaluation and backpropagation below `root`.
    void rollout(std::size_t root) {
        ++stats_.rollouts;
        std::vector<std::pair<std::size_t, TokenId>> path;
        std::size_t node = root;
        while (tree_[node].expanded && tree_[node].validity == Validity::Partial) {
            const TokenId a = tree_.select(node, cfg_.beta);
            path.emplace_back(node, a);
            node = tree_[node].children.at(a);
        }
        if (tree_[node].validity == Validity::Partial) expand(node);
        const Evaluation ev = evaluate_node(node);

        std::vector<double> before;
        if (cfg_.check_invariants)
            for (const auto& [n, a] : path) {
                auto it = tree_[n].q.find(a);
                before.push_back(it == tree_[n].q.end() ? -std::numeric_limits<double>::infinity() : it->second);
            }
        tree_.backpropagate(path, node, ev.reward);
        if (cfg_.check_invariants && ev.reward) check_backup(path, before);
    }

    void expand(std::size_t node) {
        auto& n = tree_[node];
        if (n.expanded) throw std::logic_error("node already expanded");
        if (n.validity != Validity::Partial) throw std::logic_error("only Partial states can be expanded");
        PolicyOutput out;
        const PolicyOutput* cached = cfg_.cache_topk ? topk_cache_.find(n.state) : nullptr;
        if (cached) {
            ++stats_.cache_hits_topk;
            out = *cached;
        } else {
            ++stats_.policy_topk_calls;
            out = ctx_.top_k(n.state, cfg_.k_max);
            if (cfg_.cache_topk) topk_cache_.store(n.state, out);
        }
        for (std::size_t i = 0; i < out.tokens.size(); ++i) tree_.add_child(node, out.tokens[i], out.probs[i], vocab_);
        tree_[node].expanded = true;
    }

    Evaluation evaluate_node(std::size_t node) {
        const Sequence state = tree_[node].state;
        if (tree_[node].validity == Validity::Complete) {
            return {score(state).reward, state};
        }

        std::vector<Sequence> completions;
        const bool seq_cache = cfg_.cache_seq && cfg_.sim_beam == 1;
        if (const Sequence* hit = seq_cache ? seq_cache_.find(state) : nullptr) {
            ++stats_.cache_hits_seq;
            ++stats_.cached_candidates;
            completions.push_back(*hit);
        } else {
            ++stats_.policy_complete_calls;
            stats_.candidates_generated += static_cast<std::uint64_t>(cfg_.sim_beam);
            DistributionTrace trace;
            try {
                auto out = ctx_.complete(state, cfg_.sim_beam, cfg_.max_len, cfg_.cache_topk ? &trace : nullptr);
                completions = std::move(out.sequences);
            } catch (const PolicyError&) {
                return {};
            }
            for (auto& [s, dist] : trace)
                if (!topk_cache_.find(s)) topk_cache_.store(s, top_k_of(dist, cfg_.k_max));
            if (seq_cache && !completions.empty()) seq_cache_.store(state, completions.front());
        }

        Evaluation best;
        for (const auto& c : completions) {
            const double r = score(c).reward;
            if (!best.reward || r > *best.reward) best = {r, c};
        }
        return best;
    }

private:
    const ScoredEquation& score(const Sequence& seq) {
        if (const auto* found = ledger_.find(seq)) return *found;
        ++stats_.refinements;
        RefinedEquation eq;
        try {
            if (cfg_.refine) {
                RefineConfig rc = cfg_.refine_cfg;
                rc.seed = cfg_.seed;
                eq = refine_constants(seq, bag_, rc, vocab_);
            } else {
                const ExprTree tree = build_tree(seq, vocab_);
                eq.seq = tree.sequence();
                eq.consts.assign(tree.n_consts(), cfg_.refine_cfg.init_value);
                eq.train_mse = masked_mse(tree, eq.consts, bag_, cfg_.refine_cfg.max_dropped_fraction);
                eq.status = std::isfinite(eq.train_mse) ? RefineStatus::Converged : RefineStatus::AllRestartsFailed;
                if (!std::isfinite(eq.train_mse)) eq.train_mse = kSentinel;
            }
        } catch (const Error&) {
            eq.seq = seq;
            eq.consts.assign(build_tree(seq, vocab_).n_consts(), cfg_.refine_cfg.init_value);
            eq.status = RefineStatus::AllRestartsFailed;
        }
        return ledger_.insert(score_equation(std::move(eq), bag_, cfg_.reward(), vocab_));
    }

    void check_backup(const std::vector<std::pair<std::size_t, TokenId>>& path, const std::vector<double>& before) {
        for (std::size_t i = 0; i < path.size(); ++i) {
            const double q = tree_[path[i].first].q.at(path[i].second);
            if (q < before[i]) throw std::logic_error("Q decreased during backup");
            if (!ledger_.contains_reward(q)) throw std::logic_error("Q is not the reward of any ledger candidate");
        }
    }

    void check_final() const {
        double max_reward = -std::numeric_limits<double>::infinity();
        for (const auto& e : ledger_.entries()) max_reward = std::max(max_reward, e.reward);
        if (ledger_.best()->reward != max_reward) throw std::logic_error("returned reward is not the ledger maximum");
        if (stats_.candidates_generated != stats_.policy_complete_calls * static_cast<std::uint64_t>(cfg_.sim_beam))
            throw std::logic_error("candidate budget identity violated");
    }

    // Below the active root every visit to a child also passed through its parent.
    void check_visits(std::size_t root) const {
        std::vector<std::size_t> stack{root};
        while (!stack.empty()) {
            const auto& n = tree_[stack.back()];
            stack.pop_back();
            double child_visits = 0.0;
            for (const auto& [a, c] : n.children) {
                child_visits += tree_[c].n_visits;
                stack.push_back(c);
            }
            if (child_visits > n.n_visits) throw std::logic_error("children visited more often than parent");
        }
    }

    PolicyContext& ctx_;
    const Dataset& bag_;
    MctsConfig cfg_;
    const Vocabulary& vocab_;
    SearchTree tree_;
    SearchStats stats_;
    TopKCache topk_cache_;
    SequenceCache seq_cache_;
    CandidateLedger ledger_;
};

inline DecodeResult mcts_decode(const Dataset& bag, const Policy& policy, const MctsConfig& cfg,
                                const Vocabulary& vocab = Vocabulary()) {
    PolicyContext ctx = open_context(policy, bag, vocab, cfg.max_len);
    MctsDecoder decoder(ctx, bag, cfg);
    return decoder.run();
}

struct BagDecodeResult {
    ScoredEquation best;       // scored on the full training split
    SearchStats stats;         // summed over bags
    std::size_t bags_used = 0;
    std::vector<DecodeResult> per_bag;
};

inline constexpr double kBagStopR2 = 0.99;

// Decodes bag after bag (fresh tree, caches and policy context each time) until a bag's
// best candidate reaches R^2 > 0.99 on the full training split or the bags run out.
inline BagDecodeResult iterative_bag_decode(const Dataset& train, const Policy& policy, const MctsConfig& cfg,
                                            const Vocabulary& vocab = Vocabulary(), std::size_t n_max = 200,
                                            std::size_t b_max = 10) {
    const auto bags = make_bags(train, n_max, b_max, cfg.seed);
    BagDecodeResult out;
    std::optional<std::size_t> best_bag;
    double best_r2 = -std::numeric_limits<double>::infinity();
    for (const auto& bag : bags) {
        const Dataset data = train.subset(bag.indices);
        out.per_bag.push_back(mcts_decode(data, policy, cfg, vocab));
        ++out.bags_used;
        const auto& cand = out.per_bag.back();
        out.stats += cand.stats;
        const ExprTree tree = build_tree(cand.best.eq.seq, vocab);
        const double r2 = r_squared(train.y, evaluate(tree, cand.best.eq.consts, train.x)).value;
        if (r2 > best_r2) {
            best_r2 = r2;
            best_bag = out.per_bag.size() - 1;
        }
        if (r2 > kBagStopR2) break;
    }

    const auto& winner = out.per_bag[*best_bag].best;
    if (bags.size() == 1 && bags.front().indices.size() == train.n()) {
        out.best = winner;
        return out;
    }
    RefineConfig rc = cfg.refine_cfg;
    rc.seed = cfg.seed;
    RefinedEquation refit = refine_constants(winner.eq.seq, train, rc, vocab, winner.eq.consts);
    out.best = score_equation(std::move(refit), train, cfg.reward(), vocab);
    return out;
}

} // namespace symreg
