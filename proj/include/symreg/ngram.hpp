#pragma once

#include <cstdint>
#include <fstream>
#include <memory>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "dataset.hpp"
#include "policy.hpp"

namespace symreg {

// Add-one smoothed order-n token model. Contexts are the previous order-1 tokens, padded
// with a begin marker; every training sequence is terminated with EOS.
class NgramModel {
public:
    NgramModel(int order, int vocab_size) : order_(order), vocab_size_(vocab_size) {
        if (order < 1) throw ConfigError("n-gram order must be >= 1");
        if (vocab_size < 1) throw ConfigError("empty vocabulary");
    }

    int order() const { return order_; }
    int vocab_size() const { return vocab_size_; }
    TokenId bos() const { return vocab_size_; }

    void observe(std::span<const TokenId> seq, TokenId eos) {
        std::vector<TokenId> padded(order_ - 1, bos());
        padded.insert(padded.end(), seq.begin(), seq.end());
        padded.push_back(eos);
        for (std::size_t i = order_ - 1; i < padded.size(); ++i) {
            auto& row = row_for(key(std::span(padded).subspan(i - (order_ - 1), order_ - 1)));
            row.counts[padded[i]] += 1;
            row.total += 1;
        }
    }

    // P(t | last order-1 tokens of prefix) for every t; sums to 1 over the vocabulary.
    std::vector<double> distribution(std::span<const TokenId> prefix) const {
        std::vector<TokenId> ctx(order_ - 1, bos());
        const std::size_t take = std::min<std::size_t>(prefix.size(), order_ - 1);
        std::copy(prefix.end() - take, prefix.end(), ctx.end() - take);
        std::vector<double> p(vocab_size_, 0.0);
        auto it = table_.find(key(ctx));
        if (it == table_.end()) {
            std::fill(p.begin(), p.end(), 1.0 / vocab_size_);
            return p;
        }
        const double denom = static_cast<double>(it->second.total) + vocab_size_;
        for (int t = 0; t < vocab_size_; ++t) p[t] = (static_cast<double>(it->second.counts[t]) + 1.0) / denom;
        return p;
    }

    std::uint64_t count(std::span<const TokenId> context, TokenId t) const {
        auto it = table_.find(key(context));
        return it == table_.end() ? 0 : it->second.counts.at(t);
    }

    nlohmann::json to_json() const {
        auto rows = nlohmann::json::array();
        for (const auto& [k, row] : table_) rows.push_back({{"ctx", unkey(k)}, {"counts", row.counts}});
        std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a["ctx"] < b["ctx"]; });
        return {{"order", order_}, {"vocab_size", vocab_size_}, {"contexts", rows}};
    }

    static NgramModel from_json(const nlohmann::json& j) {
        NgramModel m(j.at("order").get<int>(), j.at("vocab_size").get<int>());
        for (const auto& r : j.at("contexts")) {
            auto ctx = r.at("ctx").get<std::vector<TokenId>>();
            if (static_cast<int>(ctx.size()) != m.order_ - 1) throw ConfigError("n-gram context length mismatch");
            auto& row = m.row_for(m.key(ctx));
            row.counts = r.at("counts").get<std::vector<std::uint64_t>>();
            if (static_cast<int>(row.counts.size()) != m.vocab_size_) throw ConfigError("n-gram row size mismatch");
            row.total = 0;
            for (auto c : row.counts) row.total += c;
        }
        return m;
    }

private:
    struct Row {
        std::vector<std::uint64_t> counts;
        std::uint64_t total = 0;
    };

    std::uint64_t key(std::span<const TokenId> ctx) const {
        std::uint64_t k = 0;
        for (TokenId t : ctx) k = k * static_cast<std::uint64_t>(vocab_size_ + 1) + static_cast<std::uint64_t>(t);
        return k;
    }
    std::vector<TokenId> unkey(std::uint64_t k) const {
        std::vector<TokenId> ctx(order_ - 1);
        for (int i = order_ - 2; i >= 0; --i) {
            ctx[i] = static_cast<TokenId>(k % static_cast<std::uint64_t>(vocab_size_ + 1));
            k /= static_cast<std::uint64_t>(vocab_size_ + 1);
        }
        return ctx;
    }
    Row& row_for(std::uint64_t k) {
        auto [it, inserted] = table_.try_emplace(k);
        if (inserted) it->second.counts.assign(vocab_size_, 0);
        return it->second;
    }

    int order_;
    int vocab_size_;
    std::unordered_map<std::uint64_t, Row> table_;
};

class NgramPolicy final : public PolicyBackend, public std::enable_shared_from_this<NgramPolicy> {
public:
    NgramPolicy(NgramModel model, Vocabulary vocab) : model_(std::move(model)), vocab_(std::move(vocab)) {
        if (model_.vocab_size() != vocab_.size()) throw ConfigError("n-gram model and vocabulary sizes differ");
    }

    const NgramModel& model() const { return model_; }
    const Vocabulary& vocab() const { return vocab_; }

    std::unique_ptr<BackendSession> open(const Dataset&, const Vocabulary& vocab) const override {
        if (vocab.symbols() != vocab_.symbols()) throw PolicyError("vocabulary differs from the trained n-gram's");
        // Sessions keep a shared-owned policy alive.
        struct Session final : BackendSession {
            std::shared_ptr<const NgramPolicy> owner;
            const NgramModel* model;
            Session(std::shared_ptr<const NgramPolicy> o, const NgramModel* m) : owner(std::move(o)), model(m) {}
            std::vector<double> next_token_weights(std::span<const TokenId> prefix) override {
                return model->distribution(prefix);
            }
        };
        return std::make_unique<Session>(weak_from_this().lock(), &model_);
    }
    std::string name() const override { return "ngram"; }

    void save(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw Error("cannot write '" + path + "'");
        out << nlohmann::json{{"vocab", vocab_.to_json()}, {"model", model_.to_json()}}.dump() << '\n';
    }

    static std::shared_ptr<const NgramPolicy> load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open n-gram model '" + path + "'");
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("malformed n-gram model '" + path + "': " + e.what());
        }
        return std::make_shared<NgramPolicy>(NgramModel::from_json(j.at("model")), Vocabulary::from_json(j.at("vocab")));
    }

private:
    NgramModel model_;
    Vocabulary vocab_;
};

inline std::shared_ptr<const NgramPolicy> train_ngram(const std::vector<Sequence>& corpus, int order,
                                                      const Vocabulary& vocab) {
    if (corpus.empty()) throw ConfigError("cannot train an n-gram on an empty corpus");
    NgramModel model(order, vocab.size());
    for (const auto& seq : corpus) {
        if (is_valid_prefix(seq, vocab) != Validity::Complete)
            throw InvalidSequence("training sequence is not Complete: '" + to_prefix_text(seq, vocab) + "'");
        Sequence body = seq;
        if (!body.empty() && body.back() == vocab.eos()) body.pop_back();
        model.observe(body, vocab.eos());
    }
    return std::make_shared<NgramPolicy>(std::move(model), vocab);
}

inline std::vector<Sequence> synthetic_corpus(std::size_t count, const SynthSpec& spec, const Vocabulary& vocab,
                                              std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<Sequence> corpus;
    corpus.reserve(count);
    for (std::size_t i = 0; i < count; ++i) corpus.push_back(sample_skeleton(spec, vocab, rng).seq);
    return corpus;
}

// Order-3 model over 50k expressions from the synthetic generator.
inline std::shared_ptr<const NgramPolicy> default_ngram_policy(const Vocabulary& vocab = Vocabulary(),
                                                               std::uint64_t seed = 20240501) {
    return train_ngram(synthetic_corpus(50000, SynthSpec{}, vocab, seed), 3, vocab);
}

} // namespace symreg
