#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include <symreg/symreg.hpp>

namespace testutil {

using namespace symreg;

// add, sin, x0, C, EOS
inline Vocabulary toy_vocab() { return Vocabulary({"add"}, {"sin"}, 1); }

// Random Complete prefix sequence: each open slot becomes an operator with probability
// p_op (while under the depth cap), else a leaf. Hand-rolled so it shares nothing with the
// library's generator.
inline Sequence random_expression(std::mt19937_64& rng, const Vocabulary& vocab, int max_depth, int dims,
                                  double p_op = 0.45, const std::vector<std::string>& ops = {}) {
    std::vector<TokenId> binary, unary, leaves;
    for (TokenId t = 0; t < vocab.size(); ++t) {
        const Token& tok = vocab[t];
        if (!ops.empty() && tok.arity > 0 && std::find(ops.begin(), ops.end(), tok.symbol) == ops.end()) continue;
        if (tok.kind == TokenKind::BinaryOp) binary.push_back(t);
        if (tok.kind == TokenKind::UnaryOp) unary.push_back(t);
        if (tok.kind == TokenKind::Variable && tok.var_index < dims) leaves.push_back(t);
        if (tok.kind == TokenKind::ConstPlaceholder) leaves.push_back(t);
    }
    std::uniform_real_distribution<double> u(0.0, 1.0);
    auto pick = [&](const std::vector<TokenId>& v) { return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)]; };
    Sequence out;
    std::function<void(int)> grow = [&](int depth) {
        const bool op = depth < max_depth && u(rng) < p_op && (!binary.empty() || !unary.empty());
        if (!op) {
            out.push_back(pick(leaves));
            return;
        }
        const bool bin = unary.empty() || (!binary.empty() && u(rng) < 0.6);
        const TokenId t = pick(bin ? binary : unary);
        out.push_back(t);
        for (int i = 0; i < vocab[t].arity; ++i) grow(depth + 1);
    };
    grow(0);
    return out;
}

inline Matrix random_matrix(std::mt19937_64& rng, std::size_t n, std::size_t d, double lo = -2.0, double hi = 2.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Matrix m(n, d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) m(i, j) = u(rng);
    return m;
}

inline Dataset make_dataset(Matrix x, std::function<double(std::span<const double>)> f, std::string name = "data") {
    Dataset ds;
    ds.y.reserve(x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) ds.y.push_back(f(x.row(i)));
    ds.x = std::move(x);
    ds.name = std::move(name);
    return ds;
}

// Dataset whose targets are produced by a prefix expression with the given constants.
inline Dataset dataset_from(const std::string& prefix, std::vector<double> consts, Matrix x,
                            const Vocabulary& vocab = Vocabulary()) {
    Dataset ds;
    const auto seq = parse_prefix(prefix, vocab);
    ds.y = evaluate(build_tree(seq, vocab), consts, x);
    ds.x = std::move(x);
    ds.ground_truth = seq;
    ds.ground_truth_consts = std::move(consts);
    ds.name = prefix;
    return ds;
}

// Independent legality rule: no EOS, x_j only for j < d, and the sequence must still be
// closable within max_len after the token.
inline bool legal(const Vocabulary& v, const Sequence& prefix, TokenId t, int d, int max_len) {
    const Token& tok = v[t];
    if (tok.kind == TokenKind::Eos) return false;
    if (tok.kind == TokenKind::Variable && tok.var_index >= d) return false;
    int need = 1;
    for (TokenId p : prefix) need += v[p].arity - 1;
    return static_cast<int>(prefix.size()) + 1 + (need - 1 + tok.arity) <= max_len;
}

struct OracleHyp {
    Sequence seq;
    double score;
};

// Beam search under the uniform masked policy, re-derived from the legality rule above:
// every level expands all live hypotheses and keeps the best (beam - finished) by score,
// ties by token sequence.
inline std::vector<Sequence> beam_oracle(const Vocabulary& v, int d, int beam, int max_len) {
    std::vector<OracleHyp> level{{{}, 0.0}}, done;
    auto order = [](const OracleHyp& a, const OracleHyp& b) {
        return a.score != b.score ? a.score > b.score : a.seq < b.seq;
    };
    while (!level.empty() && static_cast<int>(done.size()) < beam) {
        std::vector<OracleHyp> next;
        for (const auto& h : level) {
            std::vector<TokenId> ok;
            for (TokenId t = 0; t < v.size(); ++t)
                if (legal(v, h.seq, t, d, max_len)) ok.push_back(t);
            for (TokenId t : ok) {
                auto s = h.seq;
                s.push_back(t);
                next.push_back({s, h.score + std::log(1.0 / ok.size())});
            }
        }
        std::sort(next.begin(), next.end(), order);
        next.resize(std::min<std::size_t>(next.size(), beam - done.size()));
        level.clear();
        for (auto& h : next) (is_valid_prefix(h.seq, v) == Validity::Complete ? done : level).push_back(h);
    }
    std::sort(done.begin(), done.end(), order);
    std::vector<Sequence> out;
    for (auto& h : done) out.push_back(h.seq);
    return out;
}

inline double rel_err(double a, double b) { return std::fabs(a - b) / std::max({1.0, std::fabs(a), std::fabs(b)}); }

} // namespace testutil
