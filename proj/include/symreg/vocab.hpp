#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "errors.hpp"

namespace symreg {

using TokenId = std::int32_t;
using Sequence = std::vector<TokenId>;

enum class TokenKind { BinaryOp, UnaryOp, Variable, ConstPlaceholder, Eos };

// Operator semantics, resolved once from the symbol so evaluation never compares strings.
enum class Op {
    Add, Sub, Mul, Div, Pow,
    Sin, Cos, Tan, Exp, Log, Sqrt, Abs, Neg, Inv,
    Var, Const, Eos
};

struct Token {
    TokenKind kind;
    std::string symbol;
    int arity;
    Op op;
    int var_index = -1; // x_j for Variable tokens
};

inline int arity_of(TokenKind kind) {
    switch (kind) {
    case TokenKind::BinaryOp: return 2;
    case TokenKind::UnaryOp: return 1;
    default: return 0;
    }
}

inline std::string_view to_string(TokenKind kind) {
    switch (kind) {
    case TokenKind::BinaryOp: return "binary";
    case TokenKind::UnaryOp: return "unary";
    case TokenKind::Variable: return "variable";
    case TokenKind::ConstPlaceholder: return "const";
    case TokenKind::Eos: return "eos";
    }
    return "?";
}

inline TokenKind kind_from_string(std::string_view s) {
    if (s == "binary") return TokenKind::BinaryOp;
    if (s == "unary") return TokenKind::UnaryOp;
    if (s == "variable") return TokenKind::Variable;
    if (s == "const") return TokenKind::ConstPlaceholder;
    if (s == "eos") return TokenKind::Eos;
    throw ConfigError("unknown token kind '" + std::string(s) + "'");
}

namespace detail {

inline std::optional<Op> operator_from_symbol(std::string_view s) {
    static const std::unordered_map<std::string_view, Op> table = {
        {"add", Op::Add}, {"sub", Op::Sub}, {"mul", Op::Mul}, {"div", Op::Div}, {"pow", Op::Pow},
        {"sin", Op::Sin}, {"cos", Op::Cos}, {"tan", Op::Tan}, {"exp", Op::Exp}, {"log", Op::Log},
        {"sqrt", Op::Sqrt}, {"abs", Op::Abs}, {"neg", Op::Neg}, {"inv", Op::Inv},
    };
    auto it = table.find(s);
    if (it == table.end()) return std::nullopt;
    return it->second;
}

inline bool is_binary(Op op) {
    return op == Op::Add || op == Op::Sub || op == Op::Mul || op == Op::Div || op == Op::Pow;
}

} // namespace detail

// Ordered token alphabet: binary operators, unary operators, x0..x(max_dim-1), C, EOS.
// Token ids are positions in this order and are used for every tie-break.
class Vocabulary {
public:
    static constexpr int kDefaultMaxDim = 10;

    static std::vector<std::string> default_binary() { return {"add", "sub", "mul", "div", "pow"}; }
    static std::vector<std::string> default_unary() {
        return {"sin", "cos", "tan", "exp", "log", "sqrt", "abs", "neg", "inv"};
    }

    Vocabulary() : Vocabulary(default_binary(), default_unary(), kDefaultMaxDim) {}

    Vocabulary(const std::vector<std::string>& binary, const std::vector<std::string>& unary, int max_dim)
        : max_dim_(max_dim) {
        if (max_dim < 1) throw ConfigError("max_dim must be >= 1");
        for (const auto& s : binary) add_operator(s, TokenKind::BinaryOp);
        for (const auto& s : unary) add_operator(s, TokenKind::UnaryOp);
        first_var_ = size();
        for (int j = 0; j < max_dim; ++j) {
            push({TokenKind::Variable, "x" + std::to_string(j), 0, Op::Var, j});
        }
        const_id_ = size();
        push({TokenKind::ConstPlaceholder, "C", 0, Op::Const});
        eos_id_ = size();
        push({TokenKind::Eos, "EOS", 0, Op::Eos});
    }

    int size() const { return static_cast<int>(tokens_.size()); }
    int max_dim() const { return max_dim_; }
    const Token& operator[](TokenId id) const { return tokens_.at(check(id)); }
    std::span<const Token> tokens() const { return tokens_; }

    TokenId eos() const { return eos_id_; }
    TokenId constant() const { return const_id_; }
    TokenId variable(int j) const {
        if (j < 0 || j >= max_dim_) throw DimensionError("variable index out of range");
        return first_var_ + j;
    }

    bool contains(TokenId id) const { return id >= 0 && id < size(); }
    TokenId check(TokenId id) const {
        if (!contains(id)) throw CorruptSequence("unknown token id " + std::to_string(id));
        return id;
    }

    std::optional<TokenId> find(std::string_view symbol) const {
        auto it = index_.find(std::string(symbol));
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }
    TokenId id(std::string_view symbol) const {
        auto found = find(symbol);
        if (!found) throw CorruptSequence("unknown token '" + std::string(symbol) + "'");
        return *found;
    }

    std::vector<TokenId> ids_of_kind(TokenKind kind) const {
        std::vector<TokenId> out;
        for (TokenId i = 0; i < size(); ++i)
            if (tokens_[i].kind == kind) out.push_back(i);
        return out;
    }

    std::vector<std::string> symbols() const {
        std::vector<std::string> out;
        out.reserve(tokens_.size());
        for (const auto& t : tokens_) out.push_back(t.symbol);
        return out;
    }

    nlohmann::json to_json() const {
        auto list = nlohmann::json::array();
        for (const auto& t : tokens_)
            list.push_back({{"symbol", t.symbol}, {"kind", to_string(t.kind)}, {"arity", t.arity}});
        return list;
    }

    // Accepts the list written by to_json(). Order must follow the canonical layout.
    static Vocabulary from_json(const nlohmann::json& list) {
        std::vector<std::string> binary, unary;
        int n_vars = 0, n_const = 0, n_eos = 0;
        for (const auto& entry : list) {
            auto kind = kind_from_string(entry.at("kind").get<std::string>());
            auto symbol = entry.at("symbol").get<std::string>();
            if (entry.at("arity").get<int>() != arity_of(kind))
                throw ConfigError("arity mismatch for token '" + symbol + "'");
            switch (kind) {
            case TokenKind::BinaryOp: binary.push_back(symbol); break;
            case TokenKind::UnaryOp: unary.push_back(symbol); break;
            case TokenKind::Variable:
                if (symbol != "x" + std::to_string(n_vars)) throw ConfigError("variables must be contiguous x0..xN");
                ++n_vars;
                break;
            case TokenKind::ConstPlaceholder: ++n_const; break;
            case TokenKind::Eos: ++n_eos; break;
            }
        }
        if (n_const != 1 || n_eos != 1) throw ConfigError("vocabulary needs exactly one C and one EOS");
        Vocabulary v(binary, unary, n_vars);
        if (v.to_json() != list) throw ConfigError("vocabulary tokens are not in canonical order");
        return v;
    }

private:
    void add_operator(const std::string& symbol, TokenKind kind) {
        auto op = detail::operator_from_symbol(symbol);
        if (!op) throw ConfigError("unsupported operator '" + symbol + "'");
        if (detail::is_binary(*op) != (kind == TokenKind::BinaryOp))
            throw ConfigError("operator '" + symbol + "' has the wrong arity class");
        push({kind, symbol, arity_of(kind), *op});
    }
    void push(Token t) {
        if (index_.count(t.symbol)) throw ConfigError("duplicate symbol '" + t.symbol + "'");
        index_.emplace(t.symbol, size());
        tokens_.push_back(std::move(t));
    }

    std::vector<Token> tokens_;
    std::unordered_map<std::string, TokenId> index_;
    int max_dim_ = kDefaultMaxDim;
    TokenId first_var_ = 0;
    TokenId const_id_ = 0;
    TokenId eos_id_ = 0;
};

enum class Validity { Complete, Partial, Invalid };

inline std::string_view to_string(Validity v) {
    switch (v) {
    case Validity::Complete: return "Complete";
    case Validity::Partial: return "Partial";
    case Validity::Invalid: return "Invalid";
    }
    return "?";
}

// Arity-budget scan. The counter starts at 1; each token consumes one slot and opens
// `arity` new ones. EOS is only accepted as the terminator of a Complete sequence.
inline Validity is_valid_prefix(std::span<const TokenId> seq, const Vocabulary& vocab) {
    long open = 1;
    for (std::size_t i = 0; i < seq.size(); ++i) {
        const Token& t = vocab[seq[i]];
        if (t.kind == TokenKind::Eos) {
            return (open == 0 && i + 1 == seq.size()) ? Validity::Complete : Validity::Invalid;
        }
        if (open == 0) return Validity::Invalid;
        open += t.arity - 1;
    }
    return open == 0 ? Validity::Complete : Validity::Partial;
}

// Open slots after `seq`, assuming it is not Invalid.
inline int open_slots(std::span<const TokenId> seq, const Vocabulary& vocab) {
    int open = 1;
    for (TokenId id : seq) open += vocab[id].arity - 1;
    return open;
}

inline Sequence parse_prefix(std::string_view text, const Vocabulary& vocab) {
    Sequence seq;
    std::istringstream in{std::string(text)};
    std::string sym;
    while (in >> sym) seq.push_back(vocab.id(sym));
    return seq;
}

inline std::string to_prefix_text(std::span<const TokenId> seq, const Vocabulary& vocab) {
    std::string out;
    for (std::size_t i = 0; i < seq.size(); ++i) {
        if (i) out += ' ';
        out += vocab[seq[i]].symbol;
    }
    return out;
}

struct SequenceHash {
    std::size_t operator()(const Sequence& s) const noexcept {
        std::size_t h = 1469598103934665603ull;
        for (TokenId t : s) {
            h ^= static_cast<std::size_t>(t) + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
        }
        return h;
    }
};

} // namespace symreg
