#pragma once

#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "errors.hpp"
#include "matrix.hpp"
#include "vocab.hpp"

namespace symreg {

// Expression tree stored flat in prefix order: a node's children always have larger
// indices than the node itself, so a reverse scan evaluates bottom-up and a forward
// scan propagates adjoints top-down.
class ExprTree {
public:
    struct Node {
        TokenId token;
        Op op;
        int arity;
        std::array<int, 2> child{-1, -1};
        int const_index = -1;
        int var_index = -1;
    };

    const std::vector<Node>& nodes() const { return nodes_; }
    std::size_t size() const { return nodes_.size(); }
    int n_consts() const { return n_consts_; }
    // Sorted, unique variable indices referenced by the expression.
    const std::vector<int>& dims_used() const { return dims_; }
    int required_dims() const { return dims_.empty() ? 0 : dims_.back() + 1; }
    const Sequence& sequence() const { return seq_; }

private:
    friend ExprTree build_tree(std::span<const TokenId>, const Vocabulary&);
    std::vector<Node> nodes_;
    Sequence seq_;
    std::vector<int> dims_;
    int n_consts_ = 0;
};

namespace detail {

inline std::span<const TokenId> without_eos(std::span<const TokenId> seq, const Vocabulary& vocab) {
    if (!seq.empty() && seq.back() == vocab.eos()) return seq.first(seq.size() - 1);
    return seq;
}

inline void require_complete(std::span<const TokenId> seq, const Vocabulary& vocab) {
    switch (is_valid_prefix(seq, vocab)) {
    case Validity::Complete: return;
    case Validity::Partial: throw IncompleteSequence("sequence is Partial: '" + to_prefix_text(seq, vocab) + "'");
    case Validity::Invalid: throw InvalidSequence("sequence is Invalid: '" + to_prefix_text(seq, vocab) + "'");
    }
}

} // namespace detail

// A trailing EOS is accepted and dropped; the tree has one node per remaining token.
inline ExprTree build_tree(std::span<const TokenId> seq, const Vocabulary& vocab) {
    detail::require_complete(seq, vocab);
    seq = detail::without_eos(seq, vocab);

    ExprTree tree;
    tree.seq_.assign(seq.begin(), seq.end());
    tree.nodes_.reserve(seq.size());
    std::vector<bool> seen(vocab.max_dim(), false);

    // Parents waiting for children: (node index, next child slot).
    std::vector<std::pair<int, int>> pending;
    for (std::size_t i = 0; i < seq.size(); ++i) {
        const Token& tok = vocab[seq[i]];
        ExprTree::Node node{seq[i], tok.op, tok.arity};
        if (tok.kind == TokenKind::ConstPlaceholder) node.const_index = tree.n_consts_++;
        if (tok.kind == TokenKind::Variable) {
            node.var_index = tok.var_index;
            seen[tok.var_index] = true;
        }
        const int idx = static_cast<int>(tree.nodes_.size());
        if (!pending.empty()) {
            auto& [parent, slot] = pending.back();
            tree.nodes_[parent].child[slot++] = idx;
            if (slot == tree.nodes_[parent].arity) pending.pop_back();
        }
        tree.nodes_.push_back(node);
        if (tok.arity > 0) pending.emplace_back(idx, 0);
    }
    for (int j = 0; j < vocab.max_dim(); ++j)
        if (seen[j]) tree.dims_.push_back(j);
    return tree;
}

inline std::size_t complexity(std::span<const TokenId> seq, const Vocabulary& vocab) {
    detail::require_complete(seq, vocab);
    return detail::without_eos(seq, vocab).size();
}

namespace detail {

inline void check_shapes(const ExprTree& tree, std::span<const double> consts, const Matrix& x) {
    if (static_cast<int>(consts.size()) != tree.n_consts())
        throw DimensionError("expected " + std::to_string(tree.n_consts()) + " constants, got " +
                             std::to_string(consts.size()));
    if (tree.required_dims() > static_cast<int>(x.cols()))
        throw DimensionError("expression uses x" + std::to_string(tree.required_dims() - 1) + " but data has " +
                             std::to_string(x.cols()) + " columns");
}

inline double apply_unary(Op op, double a) {
    switch (op) {
    case Op::Sin: return std::sin(a);
    case Op::Cos: return std::cos(a);
    case Op::Tan: return std::tan(a);
    case Op::Exp: return std::exp(a);
    case Op::Log: return a > 0.0 ? std::log(a) : (a == 0.0 ? -HUGE_VAL : std::nan(""));
    case Op::Sqrt: return std::sqrt(a);
    case Op::Abs: return std::fabs(a);
    case Op::Neg: return -a;
    case Op::Inv: return 1.0 / a;
    default: return std::nan("");
    }
}

inline double apply_binary(Op op, double a, double b) {
    switch (op) {
    case Op::Add: return a + b;
    case Op::Sub: return a - b;
    case Op::Mul: return a * b;
    case Op::Div: return a / b;
    case Op::Pow: return std::pow(a, b);
    default: return std::nan("");
    }
}

// Node values, node-major: values[k * n + i] is node k at row i.
inline std::vector<double> forward(const ExprTree& tree, std::span<const double> consts, const Matrix& x) {
    const std::size_t n = x.rows();
    const auto& nodes = tree.nodes();
    std::vector<double> values(nodes.size() * n);
    for (std::size_t k = nodes.size(); k-- > 0;) {
        const auto& node = nodes[k];
        double* out = values.data() + k * n;
        if (node.op == Op::Var) {
            for (std::size_t i = 0; i < n; ++i) out[i] = x(i, node.var_index);
        } else if (node.op == Op::Const) {
            std::fill(out, out + n, consts[node.const_index]);
        } else if (node.arity == 1) {
            const double* a = values.data() + node.child[0] * n;
            for (std::size_t i = 0; i < n; ++i) out[i] = apply_unary(node.op, a[i]);
        } else {
            const double* a = values.data() + node.child[0] * n;
            const double* b = values.data() + node.child[1] * n;
            for (std::size_t i = 0; i < n; ++i) out[i] = apply_binary(node.op, a[i], b[i]);
        }
    }
    return values;
}

} // namespace detail

// Elementwise evaluation. Domain violations produce non-finite entries, never exceptions.
inline std::vector<double> evaluate(const ExprTree& tree, std::span<const double> consts, const Matrix& x) {
    detail::check_shapes(tree, consts, x);
    if (tree.size() == 0) throw DimensionError("empty expression");
    auto values = detail::forward(tree, consts, x);
    values.resize(x.rows());
    return values;
}

namespace detail {

// Reverse sweep over node values from forward(); returns the n x n_consts Jacobian.
inline Matrix reverse(const ExprTree& tree, const std::vector<double>& values, std::size_t n) {
    const auto& nodes = tree.nodes();
    std::vector<double> adj(nodes.size() * n, 0.0);
    std::fill(adj.begin(), adj.begin() + n, 1.0);

    Matrix grad(n, tree.n_consts(), 0.0);
    for (std::size_t k = 0; k < nodes.size(); ++k) {
        const auto& node = nodes[k];
        const double* g = adj.data() + k * n;
        if (node.op == Op::Const) {
            for (std::size_t i = 0; i < n; ++i) grad(i, node.const_index) += g[i];
            continue;
        }
        if (node.arity == 0) continue;
        const double* a = values.data() + node.child[0] * n;
        double* ga = adj.data() + node.child[0] * n;
        const double* v = values.data() + k * n;
        if (node.arity == 1) {
            for (std::size_t i = 0; i < n; ++i) {
                double d;
                switch (node.op) {
                case Op::Sin: d = std::cos(a[i]); break;
                case Op::Cos: d = -std::sin(a[i]); break;
                case Op::Tan: d = 1.0 + v[i] * v[i]; break;
                case Op::Exp: d = v[i]; break;
                case Op::Log: d = 1.0 / a[i]; break;
                case Op::Sqrt: d = 0.5 / v[i]; break;
                case Op::Abs: d = a[i] > 0.0 ? 1.0 : (a[i] < 0.0 ? -1.0 : 0.0); break;
                case Op::Neg: d = -1.0; break;
                case Op::Inv: d = -1.0 / (a[i] * a[i]); break;
                default: d = std::nan("");
                }
                ga[i] += g[i] * d;
            }
            continue;
        }
        const double* b = values.data() + node.child[1] * n;
        double* gb = adj.data() + node.child[1] * n;
        for (std::size_t i = 0; i < n; ++i) {
            switch (node.op) {
            case Op::Add: ga[i] += g[i]; gb[i] += g[i]; break;
            case Op::Sub: ga[i] += g[i]; gb[i] -= g[i]; break;
            case Op::Mul: ga[i] += g[i] * b[i]; gb[i] += g[i] * a[i]; break;
            case Op::Div:
                ga[i] += g[i] / b[i];
                gb[i] -= g[i] * a[i] / (b[i] * b[i]);
                break;
            case Op::Pow:
                ga[i] += g[i] * b[i] * std::pow(a[i], b[i] - 1.0);
                gb[i] += g[i] * v[i] * std::log(a[i]);
                break;
            default: break;
            }
        }
    }
    return grad;
}

} // namespace detail

// d f(x_i) / d c_j by reverse accumulation; returns an n x n_consts matrix.
inline Matrix grad_consts(const ExprTree& tree, std::span<const double> consts, const Matrix& x) {
    detail::check_shapes(tree, consts, x);
    return detail::reverse(tree, detail::forward(tree, consts, x), x.rows());
}

namespace detail {

inline std::string format_number(double v) {
    std::array<char, 64> buf{};
    auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), end);
}

inline std::string_view infix_symbol(Op op) {
    switch (op) {
    case Op::Add: return "+";
    case Op::Sub: return "-";
    case Op::Mul: return "*";
    case Op::Div: return "/";
    case Op::Pow: return "^";
    default: return "?";
    }
}

inline void render(const ExprTree& tree, int k, std::span<const double> consts, const Vocabulary& vocab,
                   std::string& out) {
    const auto& node = tree.nodes()[k];
    if (node.op == Op::Const) {
        out += consts.empty() ? std::string("C") : format_number(consts[node.const_index]);
    } else if (node.arity == 0) {
        out += vocab[node.token].symbol;
    } else if (node.arity == 1) {
        out += vocab[node.token].symbol;
        out += '(';
        render(tree, node.child[0], consts, vocab, out);
        out += ')';
    } else {
        out += '(';
        render(tree, node.child[0], consts, vocab, out);
        out += ' ';
        out += infix_symbol(node.op);
        out += ' ';
        render(tree, node.child[1], consts, vocab, out);
        out += ')';
    }
}

} // namespace detail

// Fully parenthesised infix. With empty `consts` placeholders render as "C".
inline std::string render_infix(const ExprTree& tree, std::span<const double> consts, const Vocabulary& vocab) {
    if (!consts.empty() && static_cast<int>(consts.size()) != tree.n_consts())
        throw DimensionError("constant count mismatch in render_infix");
    std::string out;
    if (tree.size()) detail::render(tree, 0, consts, vocab, out);
    return out;
}

struct ParsedInfix {
    Sequence seq;
    // One value per placeholder; empty when every constant was written as "C".
    std::vector<double> consts;
};

// Infix with the usual precedence (+ - below * / below ^, ^ right-associative); accepts
// the fully parenthesised output of render_infix. Numeric literals become placeholders
// with values; a leading '-' before a non-number is neg.
inline ParsedInfix parse_infix(std::string_view text, const Vocabulary& vocab) {
    struct Piece {
        Sequence seq;
        std::vector<double> consts;
    };
    struct Parser {
        std::string_view s;
        const Vocabulary& vocab;
        std::size_t pos = 0;
        bool any_literal = false;
        bool any_placeholder = false;

        [[noreturn]] void fail(const std::string& what) const {
            throw CorruptSequence("infix parse error at " + std::to_string(pos) + ": " + what);
        }
        char peek() {
            while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
            return pos < s.size() ? s[pos] : '\0';
        }
        void expect(char c) {
            if (peek() != c) fail(std::string("expected '") + c + "'");
            ++pos;
        }
        Piece combine(std::string_view op, Piece a, Piece b) const {
            Piece out;
            out.seq.push_back(vocab.id(op));
            out.seq.insert(out.seq.end(), a.seq.begin(), a.seq.end());
            out.seq.insert(out.seq.end(), b.seq.begin(), b.seq.end());
            out.consts = std::move(a.consts);
            out.consts.insert(out.consts.end(), b.consts.begin(), b.consts.end());
            return out;
        }
        Piece sum() {
            Piece acc = product();
            for (char c = peek(); c == '+' || c == '-'; c = peek()) {
                ++pos;
                acc = combine(c == '+' ? "add" : "sub", std::move(acc), product());
            }
            return acc;
        }
        Piece product() {
            Piece acc = power();
            for (char c = peek(); c == '*' || c == '/'; c = peek()) {
                ++pos;
                acc = combine(c == '*' ? "mul" : "div", std::move(acc), power());
            }
            return acc;
        }
        Piece power() {
            Piece base = primary();
            if (peek() != '^') return base;
            ++pos;
            return combine("pow", std::move(base), power());
        }
        bool number_ahead() const {
            std::size_t i = pos;
            if (i < s.size() && s[i] == '-') ++i;
            return i < s.size() && (s[i] == '.' || std::isdigit(static_cast<unsigned char>(s[i])));
        }
        Piece primary() {
            const char c = peek();
            if (c == '\0') fail("unexpected end");
            if (c == '(') {
                ++pos;
                Piece inner = sum();
                expect(')');
                return inner;
            }
            if (number_ahead()) {
                double v = 0.0;
                auto [ptr, ec] = std::from_chars(s.data() + pos, s.data() + s.size(), v);
                if (ec != std::errc()) fail("bad number");
                pos = static_cast<std::size_t>(ptr - s.data());
                any_literal = true;
                return {{vocab.constant()}, {v}};
            }
            if (c == '-') {
                ++pos;
                Piece arg = power();
                arg.seq.insert(arg.seq.begin(), vocab.id("neg"));
                return arg;
            }
            const std::size_t start = pos;
            while (pos < s.size() && (std::isalnum(static_cast<unsigned char>(s[pos])) || s[pos] == '_')) ++pos;
            if (start == pos) fail("unexpected character");
            const std::string name(s.substr(start, pos - start));
            const auto id = vocab.find(name);
            if (!id) fail("unknown symbol '" + name + "'");
            const Token& tok = vocab[*id];
            if (tok.kind == TokenKind::UnaryOp) {
                expect('(');
                Piece arg = sum();
                expect(')');
                arg.seq.insert(arg.seq.begin(), *id);
                return arg;
            }
            if (tok.arity != 0 || tok.kind == TokenKind::Eos) fail("'" + name + "' cannot appear here");
            if (tok.kind == TokenKind::ConstPlaceholder) {
                any_placeholder = true;
                return {{*id}, {std::nan("")}};
            }
            return {{*id}, {}};
        }
    } p{text, vocab};
    Piece whole = p.sum();
    if (p.peek() != '\0') p.fail("trailing input");
    if (p.any_literal && p.any_placeholder) p.fail("cannot mix numeric constants and placeholders");
    ParsedInfix out;
    out.seq = std::move(whole.seq);
    if (p.any_literal) out.consts = std::move(whole.consts);
    return out;
}

} // namespace symreg
