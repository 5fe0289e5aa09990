#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "errors.hpp"
#include "expr.hpp"
#include "matrix.hpp"
#include "vocab.hpp"

namespace symreg {

struct Dataset {
    Matrix x;
    std::vector<double> y;
    std::string name;
    std::optional<Sequence> ground_truth;
    std::vector<double> ground_truth_consts;

    std::size_t n() const { return y.size(); }
    std::size_t d() const { return x.cols(); }

    void validate(int max_dim = Vocabulary::kDefaultMaxDim) const {
        if (y.empty()) throw DataError("dataset '" + name + "' has no rows");
        if (x.rows() != y.size()) throw DataError("x/y row count mismatch");
        if (x.cols() < 1 || static_cast<int>(x.cols()) > max_dim)
            throw DataError("dimension exceeds max_dim=" + std::to_string(max_dim));
        for (double v : x.data())
            if (!std::isfinite(v)) throw DataError("non-finite input value");
        for (double v : y)
            if (!std::isfinite(v)) throw DataError("non-finite target value");
    }

    Dataset subset(std::span<const std::size_t> rows) const {
        Dataset out;
        out.x = x.select_rows(rows);
        out.y.reserve(rows.size());
        for (auto r : rows) out.y.push_back(y.at(r));
        out.name = name;
        out.ground_truth = ground_truth;
        out.ground_truth_consts = ground_truth_consts;
        return out;
    }
};

// ---------------------------------------------------------------------------- CSV

struct CsvLoad {
    Dataset data;
    std::size_t dropped_rows = 0;
};

inline CsvLoad load_csv(const std::string& path, const std::string& target_column,
                        int max_dim = Vocabulary::kDefaultMaxDim) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path + "'");

    auto split = [](const std::string& line) {
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            auto b = cell.find_first_not_of(" \t\r");
            auto e = cell.find_last_not_of(" \t\r");
            cells.push_back(b == std::string::npos ? std::string() : cell.substr(b, e - b + 1));
        }
        if (!line.empty() && line.back() == ',') cells.emplace_back();
        return cells;
    };

    std::string line;
    if (!std::getline(in, line)) throw DataError("'" + path + "' is empty");
    const auto header = split(line);
    auto target_it = std::find(header.begin(), header.end(), target_column);
    if (target_it == header.end()) throw DataError("target column '" + target_column + "' not found in '" + path + "'");
    const auto target = static_cast<std::size_t>(target_it - header.begin());
    const auto d = header.size() - 1;
    if (d < 1) throw DataError("no feature columns in '" + path + "'");
    if (static_cast<int>(d) > max_dim) throw DataError("dimension exceeds max_dim=" + std::to_string(max_dim));

    CsvLoad result;
    result.data.name = path;
    std::vector<double> row(d);
    while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        auto cells = split(line);
        bool ok = cells.size() == header.size();
        double yv = 0.0;
        for (std::size_t c = 0, j = 0; ok && c < cells.size(); ++c) {
            char* end = nullptr;
            const double v = std::strtod(cells[c].c_str(), &end);
            if (cells[c].empty() || *end != '\0' || !std::isfinite(v)) {
                ok = false;
                break;
            }
            if (c == target) yv = v;
            else row[j++] = v;
        }
        if (!ok) {
            ++result.dropped_rows;
            continue;
        }
        result.data.x.append_row(row);
        result.data.y.push_back(yv);
    }
    if (result.data.y.empty()) throw DataError("no usable rows in '" + path + "'");
    return result;
}

// ----------------------------------------------------------------- synthetic data

struct SynthSpec {
    int d_max = 10;
    int u_max = 5;
    int b_max_offset = 5;      // b ~ U(d-1, d + b_max), b_max = b_max_offset + d
    int n_points = 0;          // 0: drawn from {50, 100, 150, 200}
    int n_centroids = 3;
    std::uint64_t seed = 0;
    double const_prob = 0.3;   // fraction of leaves wrapped as (C * x)
    double offset_prob = 0.3;  // fraction of offset sites (root, unary arguments) wrapped as (C + e)
    std::optional<int> d;      // forced difficulty factors
    std::optional<int> b;
    std::optional<int> u;
    int max_row_retries = 20;
    int max_function_attempts = 100;
};

inline nlohmann::json to_json(const SynthSpec& s) {
    nlohmann::json j = {{"d_max", s.d_max},       {"u_max", s.u_max},         {"b_max_offset", s.b_max_offset},
                        {"n_points", s.n_points}, {"n_centroids", s.n_centroids}, {"seed", s.seed},
                        {"const_prob", s.const_prob}, {"offset_prob", s.offset_prob}};
    if (s.d) j["d"] = *s.d;
    if (s.b) j["b"] = *s.b;
    if (s.u) j["u"] = *s.u;
    return j;
}

inline SynthSpec synth_spec_from_json(const nlohmann::json& j) {
    SynthSpec s;
    s.d_max = j.value("d_max", s.d_max);
    s.u_max = j.value("u_max", s.u_max);
    s.b_max_offset = j.value("b_max_offset", s.b_max_offset);
    s.n_points = j.value("n_points", s.n_points);
    s.n_centroids = j.value("n_centroids", s.n_centroids);
    s.seed = j.value("seed", s.seed);
    s.const_prob = j.value("const_prob", s.const_prob);
    s.offset_prob = j.value("offset_prob", s.offset_prob);
    if (j.contains("d")) s.d = j["d"].get<int>();
    if (j.contains("b")) s.b = j["b"].get<int>();
    if (j.contains("u")) s.u = j["u"].get<int>();
    return s;
}

struct Skeleton {
    Sequence seq;
    std::vector<double> consts;
    int d = 0;
    int b = 0;
    int u = 0;
};

namespace detail {

inline int uniform_int(std::mt19937_64& rng, int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(rng);
}

inline std::vector<TokenId> generator_binary_ops(const Vocabulary& vocab) {
    std::vector<TokenId> out;
    for (auto id : vocab.ids_of_kind(TokenKind::BinaryOp))
        if (vocab[id].op != Op::Pow) out.push_back(id);
    return out;
}

inline void validate_spec(const SynthSpec& spec, const Vocabulary& vocab) {
    if (spec.d_max < 1 || spec.d_max > vocab.max_dim()) throw ConfigError("d_max must be in [1, max_dim]");
    if (spec.u_max < 0 || spec.b_max_offset < 0) throw ConfigError("u_max and b_max_offset must be >= 0");
    if (spec.n_points < 0 || spec.n_centroids < 1) throw ConfigError("n_points >= 0 and n_centroids >= 1 required");
    if (spec.const_prob < 0.0 || spec.const_prob > 1.0) throw ConfigError("const_prob must be in [0, 1]");
    if (spec.offset_prob < 0.0 || spec.offset_prob > 1.0) throw ConfigError("offset_prob must be in [0, 1]");
    if (spec.d && (*spec.d < 1 || *spec.d > vocab.max_dim())) throw ConfigError("forced d out of range");
    if (spec.d && spec.b && *spec.b < *spec.d - 1) throw ConfigError("b must be >= d - 1 to use every variable");
    if (spec.u && *spec.u < 0) throw ConfigError("u must be >= 0");
}

} // namespace detail

// Random expression with exactly b binary and u unary operator tokens over d variables,
// each of x0..x(d-1) appearing at least once. Constant wrappers (mul C x) and offsets
// (add C e, on the root or a unary argument) count toward b.
inline Skeleton sample_skeleton(const SynthSpec& spec, const Vocabulary& vocab, std::mt19937_64& rng) {
    detail::validate_spec(spec, vocab);
    Skeleton sk;
    sk.d = spec.d ? *spec.d : detail::uniform_int(rng, 1, spec.d_max);
    const int b_max = spec.b_max_offset + sk.d;
    sk.b = spec.b ? *spec.b : detail::uniform_int(rng, sk.d - 1, sk.d + b_max);
    sk.u = spec.u ? *spec.u : detail::uniform_int(rng, 0, spec.u_max);

    const auto binary = detail::generator_binary_ops(vocab);
    const auto unary = vocab.ids_of_kind(TokenKind::UnaryOp);
    if (sk.b > 0 && binary.empty()) throw ConfigError("vocabulary has no usable binary operator");
    if (sk.u > 0 && unary.empty()) throw ConfigError("vocabulary has no unary operator");
    const auto mul = vocab.find("mul");
    const auto add = vocab.find("add");

    // Constant wrappers and offsets, capped so the structural tree still has >= d leaves.
    int wrappers = 0;
    if (mul && spec.const_prob > 0.0) {
        wrappers = std::binomial_distribution<int>(sk.b + 1, spec.const_prob)(rng);
        wrappers = std::min({wrappers, sk.b - (sk.d - 1), (sk.b + 1) / 2});
    }
    int offsets = 0;
    if (add && spec.offset_prob > 0.0) {
        offsets = std::binomial_distribution<int>(sk.u + 1, spec.offset_prob)(rng);
        offsets = std::min(offsets, sk.b - (sk.d - 1) - wrappers);
    }
    // Every wrapper needs its own leaf among the b - wrappers - offsets + 1.
    wrappers = std::min(wrappers, (sk.b - offsets + 1) / 2);
    // Site 0 is the root, site i > 0 the argument of the i-th unary operator.
    std::vector<char> offset_at(sk.u + 1, 0);
    std::fill(offset_at.begin(), offset_at.begin() + offsets, 1);
    std::shuffle(offset_at.begin(), offset_at.end(), rng);
    const int internal = sk.b - wrappers - offsets;
    const int leaves = internal + 1;

    // Uniform full binary tree via the cycle lemma on a shuffled Lukasiewicz word.
    std::vector<int> word(internal, 1);
    word.insert(word.end(), leaves, -1);
    std::shuffle(word.begin(), word.end(), rng);
    {
        int sum = 0, min_sum = 1, min_pos = 0;
        for (int i = 0; i < static_cast<int>(word.size()); ++i) {
            sum += word[i];
            if (sum < min_sum) {
                min_sum = sum;
                min_pos = i;
            }
        }
        std::rotate(word.begin(), word.begin() + (min_pos + 1) % word.size(), word.end());
    }

    // Unary operators stacked on uniformly chosen edges (one edge above every node).
    std::vector<std::vector<TokenId>> above(word.size());
    for (int k = 0; k < sk.u; ++k) {
        auto edge = detail::uniform_int(rng, 0, static_cast<int>(word.size()) - 1);
        above[edge].push_back(unary[detail::uniform_int(rng, 0, static_cast<int>(unary.size()) - 1)]);
    }

    // Leaf variables: each of x0..x(d-1) once, the rest uniform, in random leaf order.
    std::vector<int> leaf_vars;
    for (int j = 0; j < leaves; ++j) leaf_vars.push_back(j < sk.d ? j : detail::uniform_int(rng, 0, sk.d - 1));
    std::shuffle(leaf_vars.begin(), leaf_vars.end(), rng);
    std::vector<char> wrapped(leaves, 0);
    std::fill(wrapped.begin(), wrapped.begin() + wrappers, 1);
    std::shuffle(wrapped.begin(), wrapped.end(), rng);

    std::uniform_real_distribution<double> magnitude(0.1, 5.0);
    auto draw_const = [&] {
        const double sign = detail::uniform_int(rng, 0, 1) ? 1.0 : -1.0;
        sk.consts.push_back(sign * magnitude(rng));
    };
    auto offset = [&](int site) {
        if (!offset_at[site]) return;
        sk.seq.push_back(*add);
        sk.seq.push_back(vocab.constant());
        draw_const();
    };
    offset(0);
    int leaf = 0, unary_seen = 0;
    for (std::size_t k = 0; k < word.size(); ++k) {
        for (TokenId op : above[k]) {
            sk.seq.push_back(op);
            offset(++unary_seen);
        }
        if (word[k] == 1) {
            sk.seq.push_back(binary[detail::uniform_int(rng, 0, static_cast<int>(binary.size()) - 1)]);
            continue;
        }
        if (wrapped[leaf]) {
            sk.seq.push_back(*mul);
            sk.seq.push_back(vocab.constant());
            draw_const();
        }
        sk.seq.push_back(vocab.variable(leaf_vars[leaf]));
        ++leaf;
    }
    return sk;
}

namespace detail {

struct Mixture {
    std::vector<double> weights;
    std::vector<std::vector<double>> means, scales;
};

inline Mixture sample_mixture(int k, int d, std::mt19937_64& rng) {
    Mixture m;
    std::gamma_distribution<double> gamma(1.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> scale(0.1, 2.0);
    double total = 0.0;
    for (int c = 0; c < k; ++c) {
        m.weights.push_back(gamma(rng));
        total += m.weights.back();
        std::vector<double> mu(d), sd(d);
        for (int j = 0; j < d; ++j) {
            mu[j] = normal(rng);
            sd[j] = scale(rng);
        }
        m.means.push_back(std::move(mu));
        m.scales.push_back(std::move(sd));
    }
    for (auto& w : m.weights) w /= total;
    return m;
}

inline std::vector<double> draw_point(const Mixture& m, std::mt19937_64& rng) {
    std::discrete_distribution<int> pick(m.weights.begin(), m.weights.end());
    const int c = pick(rng);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> p(m.means[c].size());
    for (std::size_t j = 0; j < p.size(); ++j) p[j] = m.means[c][j] + m.scales[c][j] * normal(rng);
    return p;
}

inline bool usable_target(double v) { return std::isfinite(v) && std::fabs(v) <= 1e6; }

} // namespace detail

struct SynthProblem {
    Dataset data;
    SynthSpec spec;  // with d, b, u and n_points resolved
};

// Inputs come from a Gaussian mixture standardised per column; rows whose target is not
// usable are redrawn, and functions that stay degenerate are replaced.
inline SynthProblem generate_synthetic(const SynthSpec& spec, const Vocabulary& vocab = Vocabulary()) {
    detail::validate_spec(spec, vocab);
    std::mt19937_64 rng(spec.seed);
    const int n = spec.n_points ? spec.n_points : 50 * detail::uniform_int(rng, 1, 4);

    for (int attempt = 0; attempt < spec.max_function_attempts; ++attempt) {
        Skeleton sk = sample_skeleton(spec, vocab, rng);
        const ExprTree tree = build_tree(sk.seq, vocab);
        const auto mix = detail::sample_mixture(spec.n_centroids, sk.d, rng);

        Matrix raw(n, sk.d);
        for (int i = 0; i < n; ++i) {
            auto p = detail::draw_point(mix, rng);
            std::copy(p.begin(), p.end(), raw.row(i).begin());
        }
        std::vector<double> mean(sk.d, 0.0), sd(sk.d, 0.0);
        for (int j = 0; j < sk.d; ++j) {
            for (int i = 0; i < n; ++i) mean[j] += raw(i, j);
            mean[j] /= n;
            for (int i = 0; i < n; ++i) sd[j] += (raw(i, j) - mean[j]) * (raw(i, j) - mean[j]);
            sd[j] = std::sqrt(sd[j] / n);
            if (sd[j] == 0.0) sd[j] = 1.0;
        }
        Matrix x(n, sk.d);
        auto standardise = [&](std::span<const double> p, std::span<double> out) {
            for (int j = 0; j < sk.d; ++j) out[j] = (p[j] - mean[j]) / sd[j];
        };
        for (int i = 0; i < n; ++i) standardise(raw.row(i), x.row(i));

        auto y = evaluate(tree, sk.consts, x);
        for (int round = 0; round < spec.max_row_retries; ++round) {
            bool all_ok = true;
            for (int i = 0; i < n; ++i) {
                if (detail::usable_target(y[i])) continue;
                all_ok = false;
                auto p = detail::draw_point(mix, rng);
                standardise(p, x.row(i));
            }
            if (all_ok) break;
            y = evaluate(tree, sk.consts, x);
        }
        if (!std::all_of(y.begin(), y.end(), detail::usable_target)) continue;
        const double ymean = std::accumulate(y.begin(), y.end(), 0.0) / n;
        double var = 0.0;
        for (double v : y) var += (v - ymean) * (v - ymean);
        if (var / n < 1e-10) continue;

        SynthProblem out;
        out.data.x = std::move(x);
        out.data.y = std::move(y);
        out.data.ground_truth = sk.seq;
        out.data.ground_truth_consts = sk.consts;
        out.spec = spec;
        out.spec.d = sk.d;
        out.spec.b = sk.b;
        out.spec.u = sk.u;
        out.spec.n_points = n;
        out.data.name = "synth_" + std::to_string(spec.seed);
        return out;
    }
    throw DataError("could not generate a non-degenerate function for seed " + std::to_string(spec.seed));
}

// ------------------------------------------------------------ bagging and splits

struct Bag {
    std::vector<std::size_t> indices;
};

// One bag of every row when n <= n_max, otherwise up to b_max disjoint random bags of
// n_max rows (the last may be shorter).
inline std::vector<Bag> make_bags(const Dataset& ds, std::size_t n_max = 200, std::size_t b_max = 10,
                                  std::uint64_t seed = 0) {
    const std::size_t n = ds.n();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    if (n <= n_max) return {Bag{idx}};
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<Bag> bags;
    for (std::size_t start = 0; start < n && bags.size() < b_max; start += n_max) {
        Bag bag;
        bag.indices.assign(idx.begin() + start, idx.begin() + std::min(n, start + n_max));
        std::sort(bag.indices.begin(), bag.indices.end());
        bags.push_back(std::move(bag));
    }
    return bags;
}

struct TrainTest {
    Dataset train;
    Dataset test;
};

inline TrainTest split_train_test(const Dataset& ds, double ratio = 0.75, std::uint64_t seed = 0) {
    const std::size_t n = ds.n();
    if (n < 4) throw DataError("need at least 4 rows to split, got " + std::to_string(n));
    if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split ratio must be in (0, 1)");
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    auto n_train = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
    n_train = std::clamp<std::size_t>(n_train, 1, n - 1);
    std::vector<std::size_t> tr(idx.begin(), idx.begin() + n_train), te(idx.begin() + n_train, idx.end());
    std::sort(tr.begin(), tr.end());
    std::sort(te.begin(), te.end());
    return {ds.subset(tr), ds.subset(te)};
}

// y_i (1 + s_i), s_i ~ Normal(0, gamma) with gamma the variance.
inline Dataset add_target_noise(const Dataset& ds, double gamma, std::uint64_t seed) {
    if (gamma < 0.0) throw ConfigError("noise variance must be >= 0");
    Dataset out = ds;
    if (gamma == 0.0) return out;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, std::sqrt(gamma));
    for (double& v : out.y) v *= 1.0 + noise(rng);
    return out;
}

struct Scaled {
    Dataset data;
    std::vector<std::size_t> constant_columns;
};

// Rescales every column about its mean to standard deviation sigma.
inline Scaled scale_inputs(const Dataset& ds, double sigma) {
    if (!(sigma > 0.0)) throw ConfigError("sigma must be > 0");
    Scaled out{ds, {}};
    const std::size_t n = ds.n();
    for (std::size_t j = 0; j < ds.d(); ++j) {
        double mean = 0.0, var = 0.0;
        for (std::size_t i = 0; i < n; ++i) mean += ds.x(i, j);
        mean /= static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) var += (ds.x(i, j) - mean) * (ds.x(i, j) - mean);
        const double sd = std::sqrt(var / static_cast<double>(n));
        if (sd == 0.0) {
            out.constant_columns.push_back(j);
            continue;
        }
        for (std::size_t i = 0; i < n; ++i) out.data.x(i, j) = mean + (ds.x(i, j) - mean) * (sigma / sd);
    }
    return out;
}

// ------------------------------------------------------------------ serialisation

inline nlohmann::json problem_to_json(const Dataset& ds, const Vocabulary& vocab, const SynthSpec* spec = nullptr) {
    nlohmann::json j;
    j["name"] = ds.name;
    j["prefix"] = ds.ground_truth ? to_prefix_text(*ds.ground_truth, vocab) : std::string();
    j["consts"] = ds.ground_truth_consts;
    auto rows = nlohmann::json::array();
    for (std::size_t i = 0; i < ds.n(); ++i) {
        auto r = ds.x.row(i);
        rows.push_back(std::vector<double>(r.begin(), r.end()));
    }
    j["x"] = std::move(rows);
    j["y"] = ds.y;
    if (spec) {
        j["spec"] = to_json(*spec);
        j["seed"] = spec->seed;
    }
    return j;
}

inline Dataset problem_from_json(const nlohmann::json& j, const Vocabulary& vocab) {
    Dataset ds;
    ds.name = j.value("name", std::string("problem"));
    const auto prefix = j.value("prefix", std::string());
    if (!prefix.empty()) ds.ground_truth = parse_prefix(prefix, vocab);
    ds.ground_truth_consts = j.value("consts", std::vector<double>{});
    for (const auto& r : j.at("x")) ds.x.append_row(r.get<std::vector<double>>());
    ds.y = j.at("y").get<std::vector<double>>();
    ds.validate(vocab.max_dim());
    return ds;
}

} // namespace symreg
