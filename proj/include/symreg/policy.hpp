#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dataset.hpp"
#include "errors.hpp"
#include "vocab.hpp"

namespace symreg {

inline constexpr int kDefaultMaxLen = 200;

// Top-k continuations, probabilities sorted descending (ties by ascending token id).
struct PolicyOutput {
    std::vector<TokenId> tokens;
    std::vector<double> probs;

    friend bool operator==(const PolicyOutput&, const PolicyOutput&) = default;
};

struct CompletionOutput {
    std::vector<Sequence> sequences;
    std::vector<double> scores; // cumulative log-probabilities of the generated suffix
};

// Raw next-token model for one dataset. Implementations return non-negative weights over
// the full vocabulary; masking and normalisation happen in PolicyContext.
class BackendSession {
public:
    virtual ~BackendSession() = default;
    virtual std::vector<double> next_token_weights(std::span<const TokenId> prefix) = 0;
    // Backend-side beam search, for backends that offer one (the remote protocol).
    virtual std::optional<CompletionOutput> backend_complete(std::span<const TokenId>, int /*beam*/,
                                                             int /*max_len*/) {
        return std::nullopt;
    }
};

class PolicyBackend {
public:
    virtual ~PolicyBackend() = default;
    virtual std::unique_ptr<BackendSession> open(const Dataset& bag, const Vocabulary& vocab) const = 0;
    virtual std::string name() const = 0;
};

using Policy = std::shared_ptr<const PolicyBackend>;

// Masked distributions computed while answering a query, keyed by state. The search
// engine uses these to warm its top-k cache.
using DistributionTrace = std::vector<std::pair<Sequence, std::vector<double>>>;

inline PolicyOutput top_k_of(std::span<const double> dist, int k) {
    std::vector<TokenId> order;
    for (TokenId t = 0; t < static_cast<TokenId>(dist.size()); ++t)
        if (dist[t] > 0.0) order.push_back(t);
    std::stable_sort(order.begin(), order.end(), [&](TokenId a, TokenId b) { return dist[a] > dist[b]; });
    if (static_cast<int>(order.size()) > k) order.resize(k);
    PolicyOutput out;
    out.tokens = order;
    for (TokenId t : order) out.probs.push_back(dist[t]);
    return out;
}

// Dataset-conditioned view of a policy. Applies grammar, dimension and length masking to
// every backend answer, so no output can ever be an Invalid sequence.
class PolicyContext {
public:
    PolicyContext(std::unique_ptr<BackendSession> session, Vocabulary vocab, int data_dim,
                  int max_len = kDefaultMaxLen)
        : session_(std::move(session)), vocab_(std::move(vocab)), dim_(data_dim), max_len_(max_len) {
        if (!session_) throw PolicyError("policy context without a session");
        if (dim_ < 1 || dim_ > vocab_.max_dim()) throw DimensionError("data dimension outside vocabulary range");
        if (max_len_ < 1) throw ConfigError("max_len must be >= 1");
    }

    const Vocabulary& vocab() const { return vocab_; }
    int data_dim() const { return dim_; }
    int max_len() const { return max_len_; }

    // Token t is legal after `prefix` iff it is not EOS, respects the data dimension and
    // still lets every open slot be closed within max_len: len + open + arity(t) <= L.
    bool is_legal(std::span<const TokenId> prefix, int open, TokenId t, int max_len) const {
        const Token& tok = vocab_[t];
        if (tok.kind == TokenKind::Eos) return false;
        if (tok.kind == TokenKind::Variable && tok.var_index >= dim_) return false;
        return static_cast<long>(prefix.size()) + open + tok.arity <= max_len;
    }

    std::vector<double> masked_distribution(std::span<const TokenId> prefix) {
        return masked_distribution(prefix, max_len_);
    }

    std::vector<double> masked_distribution(std::span<const TokenId> prefix, int max_len) {
        require_partial(prefix);
        if (static_cast<int>(prefix.size()) + open_slots(prefix, vocab_) > max_len)
            throw ConfigError("prefix cannot be completed within max_len");
        auto w = session_->next_token_weights(prefix);
        if (static_cast<int>(w.size()) != vocab_.size()) throw PolicyError("backend returned wrong distribution size");
        const int open = open_slots(prefix, vocab_);
        double total = 0.0;
        int legal = 0;
        for (TokenId t = 0; t < vocab_.size(); ++t) {
            if (!is_legal(prefix, open, t, max_len)) {
                w[t] = 0.0;
                continue;
            }
            ++legal;
            if (!(w[t] >= 0.0) || !std::isfinite(w[t])) w[t] = 0.0;
            total += w[t];
        }
        if (legal == 0) throw PolicyError("no legal continuation");
        for (TokenId t = 0; t < vocab_.size(); ++t) {
            if (!is_legal(prefix, open, t, max_len)) continue;
            w[t] = total > 0.0 ? w[t] / total : 1.0 / legal;
        }
        return w;
    }

    PolicyOutput top_k(std::span<const TokenId> prefix, int k) {
        if (k < 1 || k > vocab_.size()) throw ConfigError("k must be in [1, vocab size]");
        return top_k_of(masked_distribution(prefix), k);
    }

    // Deterministic beam search of width `beam` (beam = 1 is greedy). At every step the
    // best (beam - finished) extensions of the live hypotheses are kept, ranked by score
    // then by token sequence; hypotheses leave the beam once Complete.
    CompletionOutput complete(std::span<const TokenId> prefix, int beam, int max_len,
                              DistributionTrace* trace = nullptr) {
        if (beam < 1) throw ConfigError("beam must be >= 1");
        require_partial(prefix);
        if (auto remote = session_->backend_complete(prefix, beam, max_len)) {
            if (accept_remote(prefix, *remote, beam, max_len)) return std::move(*remote);
        }
        return local_beam(prefix, beam, max_len, trace);
    }
    CompletionOutput complete(std::span<const TokenId> prefix, int beam) { return complete(prefix, beam, max_len_); }

    // Ancestral sampling from the masked distribution sharpened by 1/temperature.
    // temperature == 0 is greedy.
    Sequence sample(std::span<const TokenId> prefix, double temperature, std::mt19937_64& rng) {
        if (temperature < 0.0) throw ConfigError("temperature must be >= 0");
        Sequence seq(prefix.begin(), prefix.end());
        while (is_valid_prefix(seq, vocab_) == Validity::Partial) {
            auto dist = masked_distribution(seq);
            seq.push_back(draw(dist, temperature, rng));
        }
        return seq;
    }

    static TokenId draw(const std::vector<double>& dist, double temperature, std::mt19937_64& rng) {
        if (temperature == 0.0) return argmax(dist);
        std::vector<double> w(dist.size(), 0.0);
        double peak = 0.0;
        for (double p : dist) peak = std::max(peak, p);
        double total = 0.0;
        for (std::size_t t = 0; t < dist.size(); ++t) {
            if (dist[t] <= 0.0) continue;
            w[t] = std::exp(std::log(dist[t] / peak) / temperature);
            total += w[t];
        }
        const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53 * total;
        double acc = 0.0;
        TokenId last = 0;
        for (std::size_t t = 0; t < w.size(); ++t) {
            if (w[t] <= 0.0) continue;
            acc += w[t];
            last = static_cast<TokenId>(t);
            if (u < acc) return last;
        }
        return last;
    }

    static TokenId argmax(const std::vector<double>& dist) {
        TokenId best = 0;
        for (TokenId t = 1; t < static_cast<TokenId>(dist.size()); ++t)
            if (dist[t] > dist[best]) best = t;
        return best;
    }

private:
    void require_partial(std::span<const TokenId> prefix) const {
        switch (is_valid_prefix(prefix, vocab_)) {
        case Validity::Partial: return;
        case Validity::Complete: throw IncompleteSequence("query prefix is already Complete");
        case Validity::Invalid: throw InvalidSequence("query prefix is Invalid");
        }
    }

    bool accept_remote(std::span<const TokenId> prefix, CompletionOutput& out, int beam, int max_len) const {
        if (out.sequences.empty() || static_cast<int>(out.sequences.size()) > beam) return false;
        if (out.scores.size() != out.sequences.size()) return false;
        for (auto& seq : out.sequences) {
            if (!seq.empty() && seq.back() == vocab_.eos()) seq.pop_back();
            if (static_cast<int>(seq.size()) > max_len) return false;
            if (!std::equal(prefix.begin(), prefix.end(), seq.begin(), seq.begin() + std::min(seq.size(), prefix.size())))
                return false;
            if (seq.size() < prefix.size()) return false;
            for (TokenId t : seq) {
                if (!vocab_.contains(t)) return false;
                const Token& tok = vocab_[t];
                if (tok.kind == TokenKind::Variable && tok.var_index >= dim_) return false;
            }
            if (is_valid_prefix(seq, vocab_) != Validity::Complete) return false;
        }
        return true;
    }

    struct Hyp {
        Sequence seq;
        double score;
    };

    static bool better(const Hyp& a, const Hyp& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.seq < b.seq;
    }

    CompletionOutput local_beam(std::span<const TokenId> prefix, int beam, int max_len, DistributionTrace* trace) {
        std::vector<Hyp> live{{Sequence(prefix.begin(), prefix.end()), 0.0}};
        std::vector<Hyp> finished;
        while (!live.empty() && static_cast<int>(finished.size()) < beam) {
            std::vector<Hyp> candidates;
            for (const auto& h : live) {
                auto dist = masked_distribution(h.seq, max_len);
                for (TokenId t = 0; t < static_cast<TokenId>(dist.size()); ++t) {
                    if (dist[t] <= 0.0) continue;
                    Hyp c{h.seq, h.score + std::log(dist[t])};
                    c.seq.push_back(t);
                    candidates.push_back(std::move(c));
                }
                if (trace) trace->emplace_back(h.seq, std::move(dist));
            }
            const auto slots = static_cast<std::size_t>(beam) - finished.size();
            if (candidates.size() > slots) {
                std::partial_sort(candidates.begin(), candidates.begin() + slots, candidates.end(), better);
                candidates.resize(slots);
            } else {
                std::sort(candidates.begin(), candidates.end(), better);
            }
            live.clear();
            for (auto& c : candidates) {
                if (is_valid_prefix(c.seq, vocab_) == Validity::Complete) finished.push_back(std::move(c));
                else live.push_back(std::move(c));
            }
        }
        std::sort(finished.begin(), finished.end(), better);
        CompletionOutput out;
        for (auto& h : finished) {
            out.sequences.push_back(std::move(h.seq));
            out.scores.push_back(h.score);
        }
        return out;
    }

    std::unique_ptr<BackendSession> session_;
    Vocabulary vocab_;
    int dim_;
    int max_len_;
};

inline PolicyContext open_context(const Policy& policy, const Dataset& bag, const Vocabulary& vocab,
                                  int max_len = kDefaultMaxLen) {
    if (!policy) throw PolicyError("no policy");
    if (bag.n() == 0) throw DataError("cannot condition a policy on an empty bag");
    return PolicyContext(policy->open(bag, vocab), vocab, static_cast<int>(bag.d()), max_len);
}

// Uniform weights over the vocabulary; after masking every legal token is equally likely.
class UniformPolicy final : public PolicyBackend {
public:
    std::unique_ptr<BackendSession> open(const Dataset&, const Vocabulary& vocab) const override {
        struct Session final : BackendSession {
            int size;
            explicit Session(int s) : size(s) {}
            std::vector<double> next_token_weights(std::span<const TokenId>) override {
                return std::vector<double>(size, 1.0);
            }
        };
        return std::make_unique<Session>(vocab.size());
    }
    std::string name() const override { return "uniform"; }
};

} // namespace symreg
