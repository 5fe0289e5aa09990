#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "decoders.hpp"
#include "mcts.hpp"
#include "ngram.hpp"
#include "remote_policy.hpp"

namespace symreg {

// ----------------------------------------------------------------------- policies

// Seed of the corpus behind the built-in n-gram priors.
inline constexpr std::uint64_t kPriorCorpusSeed = 20240501;

// uniform | ngram | ngram:<model-file> | ngram-suite | remote:<cmd-or-host:port>.
// "ngram-suite" is an order-3 model over 50k skeletons from `suite_spec` and needs one.
inline Policy make_policy(const std::string& selector, const Vocabulary& vocab = Vocabulary(),
                          const SynthSpec* suite_spec = nullptr) {
    if (selector == "uniform") return std::make_shared<UniformPolicy>();
    if (selector == "ngram") return default_ngram_policy(vocab);
    if (selector == "ngram-suite") {
        if (!suite_spec) throw ConfigError("policy 'ngram-suite' needs a synthetic suite");
        return train_ngram(synthetic_corpus(50000, *suite_spec, vocab, kPriorCorpusSeed), 3, vocab);
    }
    if (selector.rfind("ngram:", 0) == 0) {
        auto p = NgramPolicy::load(selector.substr(6));
        if (p->vocab().symbols() != vocab.symbols()) throw ConfigError("n-gram model vocabulary differs from the run's");
        return p;
    }
    if (selector.rfind("remote:", 0) == 0) return std::make_shared<RemotePolicy>(selector.substr(7));
    throw ConfigError("unknown policy '" + selector + "' (expected uniform, ngram, ngram:<file>, ngram-suite or remote:<target>)");
}

// ------------------------------------------------------------------ configuration

inline nlohmann::json to_json(const RefineConfig& c) {
    return {{"max_iters", c.max_iters}, {"n_restarts", c.n_restarts}, {"init_value", c.init_value},
            {"restart_scale", c.restart_scale}, {"tol", c.tol}, {"ftol", c.ftol},
            {"max_dropped_fraction", c.max_dropped_fraction}};
}

inline RefineConfig refine_config_from_json(const nlohmann::json& j) {
    RefineConfig c;
    c.max_iters = j.value("max_iters", c.max_iters);
    c.n_restarts = j.value("n_restarts", c.n_restarts);
    c.init_value = j.value("init_value", c.init_value);
    c.restart_scale = j.value("restart_scale", c.restart_scale);
    c.tol = j.value("tol", c.tol);
    c.ftol = j.value("ftol", c.ftol);
    c.max_dropped_fraction = j.value("max_dropped_fraction", c.max_dropped_fraction);
    return c;
}

inline nlohmann::json to_json(const MctsConfig& c) {
    return {{"k_max", c.k_max},           {"rollouts", c.rollouts},     {"beam", c.sim_beam},
            {"beta", c.beta},             {"lambda", c.lambda},         {"mode", std::string(to_string(c.mode))},
            {"max_len", c.max_len},       {"cache_topk", c.cache_topk}, {"cache_seq", c.cache_seq},
            {"refine", c.refine},         {"refine_cfg", to_json(c.refine_cfg)}, {"seed", c.seed}};
}

inline SearchMode search_mode_from_string(const std::string& s) {
    if (s == "token") return SearchMode::TokenCommit;
    if (s == "root") return SearchMode::SingleRoot;
    throw ConfigError("unknown search mode '" + s + "' (expected token or root)");
}

inline MctsConfig mcts_config_from_json(const nlohmann::json& j) {
    MctsConfig c;
    c.k_max = j.value("k_max", c.k_max);
    c.rollouts = j.value("rollouts", c.rollouts);
    c.sim_beam = j.value("beam", c.sim_beam);
    c.beta = j.value("beta", c.beta);
    c.lambda = j.value("lambda", c.lambda);
    c.mode = search_mode_from_string(j.value("mode", std::string("token")));
    c.max_len = j.value("max_len", c.max_len);
    c.cache_topk = j.value("cache_topk", c.cache_topk);
    c.cache_seq = j.value("cache_seq", c.cache_seq);
    c.refine = j.value("refine", c.refine);
    if (j.contains("refine_cfg")) c.refine_cfg = refine_config_from_json(j["refine_cfg"]);
    c.seed = j.value("seed", c.seed);
    return c;
}

inline nlohmann::json to_json(const BaselineConfig& c) {
    return {{"strategy", std::string(to_string(c.strategy))}, {"candidates", c.candidates},
            {"refine_top", c.refine_top}, {"temperature", c.temperature}, {"lambda", c.lambda},
            {"max_len", c.max_len}, {"refine_cfg", to_json(c.refine_cfg)}, {"seed", c.seed}};
}

inline BaselineConfig baseline_config_from_json(const nlohmann::json& j) {
    BaselineConfig c;
    const auto s = j.value("strategy", std::string("sampling"));
    if (s != "sampling" && s != "beam") throw ConfigError("unknown baseline strategy '" + s + "'");
    c.strategy = s == "beam" ? BaselineStrategy::Beam : BaselineStrategy::Sampling;
    c.candidates = j.value("candidates", c.candidates);
    c.refine_top = j.value("refine_top", c.refine_top);
    c.temperature = j.value("temperature", c.temperature);
    c.lambda = j.value("lambda", c.lambda);
    c.max_len = j.value("max_len", c.max_len);
    if (j.contains("refine_cfg")) c.refine_cfg = refine_config_from_json(j["refine_cfg"]);
    c.seed = j.value("seed", c.seed);
    return c;
}

// One decode of one problem: everything needed to reproduce a record.
struct Task {
    std::string decoder = "tpsr";  // tpsr | sampling | beam
    MctsConfig mcts;
    BaselineConfig baseline;
    std::size_t n_max = 200;
    std::size_t b_max = 10;
    double split = 0.75;
    double gamma = 0.0;  // multiplicative noise variance on training targets
    std::uint64_t seed = 0;

    // Points every decoder seed at the task seed.
    Task& with_seed(std::uint64_t s) {
        seed = s;
        mcts.seed = s;
        baseline.seed = s;
        return *this;
    }
};

inline nlohmann::json to_json(const Task& t) {
    nlohmann::json j = {{"decoder", t.decoder}, {"n_max", t.n_max}, {"b_max", t.b_max},
                        {"split", t.split},     {"gamma", t.gamma}, {"seed", t.seed}};
    if (t.decoder == "tpsr")
        j["mcts"] = to_json(t.mcts);
    else
        j["baseline"] = to_json(t.baseline);
    return j;
}

inline Task task_from_json(const nlohmann::json& j) {
    Task t;
    t.decoder = j.value("decoder", t.decoder);
    if (t.decoder != "tpsr" && t.decoder != "sampling" && t.decoder != "beam")
        throw ConfigError("unknown decoder '" + t.decoder + "'");
    if (j.contains("mcts")) t.mcts = mcts_config_from_json(j["mcts"]);
    if (j.contains("baseline")) t.baseline = baseline_config_from_json(j["baseline"]);
    t.n_max = j.value("n_max", t.n_max);
    t.b_max = j.value("b_max", t.b_max);
    t.split = j.value("split", t.split);
    t.gamma = j.value("gamma", t.gamma);
    t.seed = j.value("seed", t.seed);
    return t;
}

// Command-level parameters shared by every runner.
struct RunConfig {
    std::string command;
    std::string data;            // CSV, problem JSON or suite JSON
    std::string target = "y";    // CSV target column
    std::string policy = "ngram";
    MctsConfig mcts;
    BaselineConfig baseline;
    std::vector<double> lambdas{0.0, 0.1, 0.5, 1.0};
    std::vector<double> sigmas{1, 2, 4, 8, 16};
    std::vector<double> gammas{0.0, 0.01, 0.1};
    bool budget_match = true;
    std::size_t n_max = 200;
    std::size_t b_max = 10;
    double split = 0.75;
    std::uint64_t seed = 0;
    int jobs = 1;
    std::string out;

    Task task(const std::string& decoder, std::uint64_t problem_seed) const {
        Task t;
        t.decoder = decoder;
        t.mcts = mcts;
        t.baseline = baseline;
        t.baseline.strategy = decoder == "beam" ? BaselineStrategy::Beam : BaselineStrategy::Sampling;
        t.n_max = n_max;
        t.b_max = b_max;
        t.split = split;
        return t.with_seed(problem_seed);
    }

    void validate() const {
        mcts.validate();
        baseline.validate();
        if (jobs < 1) throw ConfigError("--jobs must be >= 1");
        if (n_max < 1 || b_max < 1) throw ConfigError("bag size and count must be >= 1");
        if (lambdas.empty()) throw ConfigError("lambda grid is empty");
        for (double l : lambdas)
            if (l < 0.0) throw ConfigError("lambda must be >= 0");
    }
};

inline nlohmann::json to_json(const RunConfig& c) {
    return {{"command", c.command},   {"data", c.data},       {"target", c.target},
            {"policy", c.policy},     {"mcts", to_json(c.mcts)}, {"baseline", to_json(c.baseline)},
            {"lambdas", c.lambdas},   {"sigmas", c.sigmas},   {"gammas", c.gammas},
            {"budget_match", c.budget_match}, {"n_max", c.n_max}, {"b_max", c.b_max},
            {"split", c.split},       {"seed", c.seed},       {"jobs", c.jobs}, {"out", c.out}};
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig c;
    c.command = j.value("command", c.command);
    c.data = j.value("data", c.data);
    c.target = j.value("target", c.target);
    c.policy = j.value("policy", c.policy);
    if (j.contains("mcts")) c.mcts = mcts_config_from_json(j["mcts"]);
    if (j.contains("baseline")) c.baseline = baseline_config_from_json(j["baseline"]);
    c.lambdas = j.value("lambdas", c.lambdas);
    c.sigmas = j.value("sigmas", c.sigmas);
    c.gammas = j.value("gammas", c.gammas);
    c.budget_match = j.value("budget_match", c.budget_match);
    c.n_max = j.value("n_max", c.n_max);
    c.b_max = j.value("b_max", c.b_max);
    c.split = j.value("split", c.split);
    c.seed = j.value("seed", c.seed);
    c.jobs = j.value("jobs", c.jobs);
    c.out = j.value("out", c.out);
    return c;
}

// ------------------------------------------------------------------------ records

struct ProblemRecord {
    std::string name;
    std::string decoder;
    double lambda = 0.0;
    std::string prefix;
    std::string infix;
    std::vector<double> consts;
    double train_r2 = 0.0;
    double test_r2 = 0.0;
    int acc_01 = 0;
    int acc_001 = 0;
    int acc_0001 = 0;
    std::size_t complexity = 0;
    std::uint64_t candidates = 0;
    std::uint64_t policy_calls = 0;
    std::uint64_t cache_hits_topk = 0;
    std::uint64_t cache_hits_seq = 0;
    std::size_t bags = 0;
    double reward = 0.0;  // best training reward on the full training split
    double wall_time = 0.0;
    std::uint64_t seed = 0;
    nlohmann::json extra = nlohmann::json::object();  // runner-specific fields (sigma, gamma, cell, ...)
    nlohmann::json config;                            // the Task that produced the record
};

inline nlohmann::json to_json(const ProblemRecord& r) {
    return {{"name", r.name},
            {"decoder", r.decoder},
            {"lambda", r.lambda},
            {"prefix", r.prefix},
            {"infix", r.infix},
            {"consts", r.consts},
            {"train_r2", r.train_r2},
            {"test_r2", r.test_r2},
            {"acc_0.1", r.acc_01},
            {"acc_0.01", r.acc_001},
            {"acc_0.001", r.acc_0001},
            {"complexity", r.complexity},
            {"candidates_generated", r.candidates},
            {"policy_calls", r.policy_calls},
            {"cache_hits_topk", r.cache_hits_topk},
            {"cache_hits_seq", r.cache_hits_seq},
            {"bags", r.bags},
            {"reward", r.reward},
            {"wall_time", r.wall_time},
            {"seed", r.seed},
            {"extra", r.extra},
            {"config", r.config}};
}

inline ProblemRecord record_from_json(const nlohmann::json& j) {
    ProblemRecord r;
    r.name = j.at("name").get<std::string>();
    r.decoder = j.at("decoder").get<std::string>();
    r.lambda = j.at("lambda").get<double>();
    r.prefix = j.at("prefix").get<std::string>();
    r.infix = j.at("infix").get<std::string>();
    r.consts = j.at("consts").get<std::vector<double>>();
    r.train_r2 = j.at("train_r2").get<double>();
    r.test_r2 = j.at("test_r2").get<double>();
    r.acc_01 = j.at("acc_0.1").get<int>();
    r.acc_001 = j.at("acc_0.01").get<int>();
    r.acc_0001 = j.at("acc_0.001").get<int>();
    r.complexity = j.at("complexity").get<std::size_t>();
    r.candidates = j.at("candidates_generated").get<std::uint64_t>();
    r.policy_calls = j.at("policy_calls").get<std::uint64_t>();
    r.cache_hits_topk = j.at("cache_hits_topk").get<std::uint64_t>();
    r.cache_hits_seq = j.at("cache_hits_seq").get<std::uint64_t>();
    r.bags = j.at("bags").get<std::size_t>();
    r.reward = j.at("reward").get<double>();
    r.wall_time = j.at("wall_time").get<double>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.extra = j.value("extra", nlohmann::json::object());
    r.config = j.value("config", nlohmann::json());
    return r;
}

// ---------------------------------------------------------------------- decoding

struct TaskOutcome {
    ProblemRecord record;
    ScoredEquation best;
    SearchStats stats;  // zero for baselines
};

namespace detail {

struct BaselineRun {
    ScoredEquation best;
    std::uint64_t candidates = 0;
    std::uint64_t requests = 0;
    std::size_t bags = 0;
    double wall_time = 0.0;
};

// Same bag loop and stop rule as the search, with the baseline decoding each bag.
inline BaselineRun bagged_baseline(const Dataset& train, const Policy& policy, const Task& task, const Vocabulary& vocab) {
    const auto bags = make_bags(train, task.n_max, task.b_max, task.seed);
    BaselineRun out;
    std::optional<ScoredEquation> winner;
    double best_r2 = -std::numeric_limits<double>::infinity();
    const RewardConfig rc{task.baseline.lambda, task.baseline.max_len, 1e-9};
    for (const auto& bag : bags) {
        const Dataset data = train.subset(bag.indices);
        const auto r = baseline_decode(data, policy, task.baseline, vocab);
        ++out.bags;
        out.candidates += r.candidates_generated;
        out.requests += task.baseline.strategy == BaselineStrategy::Sampling ? r.candidates_generated : 1;
        out.wall_time += r.wall_time;
        const ExprTree tree = build_tree(r.best.eq.seq, vocab);
        double r2 = 0.0;
        if (tree.n_consts() == static_cast<int>(r.best.eq.consts.size()))
            r2 = r_squared(train.y, evaluate(tree, r.best.eq.consts, train.x)).value;
        if (!winner || r2 > best_r2) {
            best_r2 = r2;
            winner = r.best;
        }
        if (r2 > kBagStopR2) break;
    }
    if (bags.size() == 1 && bags.front().indices.size() == train.n()) {
        out.best = *winner;
        return out;
    }
    RefineConfig refine = task.baseline.refine_cfg;
    refine.seed = task.seed;
    out.best = score_equation(refine_constants(winner->eq.seq, train, refine, vocab, winner->eq.consts), train, rc, vocab);
    return out;
}

inline std::vector<double> predict(const ScoredEquation& s, const Matrix& x, const Vocabulary& vocab) {
    const ExprTree tree = build_tree(s.eq.seq, vocab);
    if (tree.n_consts() != static_cast<int>(s.eq.consts.size()))
        return std::vector<double>(x.rows(), std::numeric_limits<double>::quiet_NaN());
    return evaluate(tree, s.eq.consts, x);
}

} // namespace detail

// Test-set metrics of a fitted equation.
inline void score_test(ProblemRecord& rec, const ScoredEquation& best, const Dataset& test, const Vocabulary& vocab) {
    const auto pred = detail::predict(best, test.x, vocab);
    rec.test_r2 = test.n() >= 2 ? r_squared(test.y, pred).value : 0.0;
    rec.acc_01 = acc_tolerance(test.y, pred, 0.1);
    rec.acc_001 = acc_tolerance(test.y, pred, 0.01);
    rec.acc_0001 = acc_tolerance(test.y, pred, 0.001);
}

// Splits, optionally perturbs the training targets, decodes and scores one problem.
inline TaskOutcome run_task(const Task& task, const Dataset& problem, const Policy& policy,
                            const Vocabulary& vocab = Vocabulary()) {
    auto [train, test] = split_train_test(problem, task.split, task.seed);
    if (task.gamma > 0.0) train = add_target_noise(train, task.gamma, task.seed);

    TaskOutcome out;
    ProblemRecord& rec = out.record;
    rec.name = problem.name;
    rec.decoder = task.decoder;
    rec.seed = task.seed;
    rec.config = to_json(task);
    if (task.decoder == "tpsr") {
        const auto r = iterative_bag_decode(train, policy, task.mcts, vocab, task.n_max, task.b_max);
        out.best = r.best;
        out.stats = r.stats;
        rec.lambda = task.mcts.lambda;
        rec.candidates = r.stats.candidates_generated;
        rec.policy_calls = r.stats.policy_calls();
        rec.cache_hits_topk = r.stats.cache_hits_topk;
        rec.cache_hits_seq = r.stats.cache_hits_seq;
        rec.bags = r.bags_used;
        rec.wall_time = r.stats.wall_time;
    } else {
        Task t = task;
        t.baseline.strategy = task.decoder == "beam" ? BaselineStrategy::Beam : BaselineStrategy::Sampling;
        const auto r = detail::bagged_baseline(train, policy, t, vocab);
        out.best = r.best;
        rec.lambda = t.baseline.lambda;
        rec.candidates = r.candidates;
        rec.policy_calls = r.requests;
        rec.bags = r.bags;
        rec.wall_time = r.wall_time;
    }
    const ExprTree tree = build_tree(out.best.eq.seq, vocab);
    rec.prefix = to_prefix_text(out.best.eq.seq, vocab);
    rec.consts = out.best.eq.consts;
    rec.infix = render_infix(tree, tree.n_consts() == static_cast<int>(rec.consts.size()) ? std::span<const double>(rec.consts)
                                                                                         : std::span<const double>(),
                             vocab);
    rec.complexity = out.best.complexity;
    rec.train_r2 = out.best.r2_train;
    rec.reward = out.best.reward;
    score_test(rec, out.best, test, vocab);
    return out;
}

// Re-runs the task embedded in a record.
inline ProblemRecord replay(const ProblemRecord& rec, const Dataset& problem, const Policy& policy,
                            const Vocabulary& vocab = Vocabulary()) {
    return run_task(task_from_json(rec.config), problem, policy, vocab).record;
}

// ---------------------------------------------------------------------- work pool

// Calls fn(i) for i in [0, n) on up to `jobs` threads; the first exception is rethrown.
inline void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
    const auto workers = static_cast<std::size_t>(std::max(1, jobs));
    if (workers == 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < std::min(workers, n); ++w) {
        pool.emplace_back([&] {
            for (std::size_t i; (i = next++) < n;) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!error) error = std::current_exception();
                    next = n;
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

// -------------------------------------------------------------------------- suites

struct Suite {
    SynthSpec spec;           // generator settings; per-problem seed = spec.seed + index
    std::vector<Dataset> problems;
};

inline Suite make_suite(SynthSpec spec, std::size_t count, const Vocabulary& vocab = Vocabulary()) {
    Suite s;
    s.spec = spec;
    for (std::size_t i = 0; i < count; ++i) {
        SynthSpec p = spec;
        p.seed = spec.seed + i;
        auto prob = generate_synthetic(p, vocab);
        prob.data.name = "synth_" + std::to_string(i);
        s.problems.push_back(std::move(prob.data));
    }
    return s;
}

inline nlohmann::json suite_to_json(const Suite& s, const Vocabulary& vocab = Vocabulary()) {
    nlohmann::json problems = nlohmann::json::array();
    for (std::size_t i = 0; i < s.problems.size(); ++i) {
        SynthSpec p = s.spec;
        p.seed = s.spec.seed + i;
        problems.push_back(problem_to_json(s.problems[i], vocab, &p));
    }
    return {{"spec", to_json(s.spec)}, {"seed", s.spec.seed}, {"vocab", vocab.to_json()}, {"problems", problems}};
}

inline Suite suite_from_json(const nlohmann::json& j, const Vocabulary& vocab = Vocabulary()) {
    Suite s;
    if (j.contains("spec")) s.spec = synth_spec_from_json(j["spec"]);
    if (j.contains("vocab") && Vocabulary::from_json(j["vocab"]).symbols() != vocab.symbols())
        throw ConfigError("suite was written with a different vocabulary");
    for (const auto& p : j.at("problems")) s.problems.push_back(problem_from_json(p, vocab));
    if (s.problems.empty()) throw DataError("suite has no problems");
    return s;
}

inline nlohmann::json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path + "'");
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("'" + path + "' is not valid JSON: " + e.what());
    }
}

inline Suite load_suite(const std::string& path, const Vocabulary& vocab = Vocabulary()) {
    try {
        return suite_from_json(read_json_file(path), vocab);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("'" + path + "' is not a problem suite: " + e.what());
    }
}

// A single problem from CSV (target column `target`) or problem JSON.
inline Dataset load_problem(const std::string& path, const std::string& target, const Vocabulary& vocab = Vocabulary()) {
    const auto ext = std::filesystem::path(path).extension().string();
    if (ext == ".json") {
        try {
            auto j = read_json_file(path);
            if (j.contains("problems")) throw DataError("'" + path + "' is a suite; pass a single problem");
            Dataset ds = problem_from_json(j, vocab);
            if (ds.name.empty() || ds.name == "problem") ds.name = std::filesystem::path(path).stem().string();
            return ds;
        } catch (const nlohmann::json::exception& e) {
            throw DataError("'" + path + "' is not a problem file: " + e.what());
        }
    }
    auto load = load_csv(path, target, vocab.max_dim());
    load.data.name = std::filesystem::path(path).stem().string();
    return std::move(load.data);
}

// ------------------------------------------------------------------------ reports

struct AggregateRow {
    std::string decoder;
    std::optional<double> lambda;  // empty for baselines
    std::string group;             // runner-specific key (sigma=2, gamma=0.1, k_max=4, ...)
    std::size_t problems = 0;
    double mean_train_r2 = 0.0;
    double mean_test_r2 = 0.0;
    double median_test_r2 = 0.0;
    double frac_r2_099 = 0.0;
    double mean_complexity = 0.0;
    double median_complexity = 0.0;
    double acc_01 = 0.0;
    double acc_001 = 0.0;
    double acc_0001 = 0.0;
    double mean_reward = 0.0;
    double mean_candidates = 0.0;
    double mean_policy_calls = 0.0;
    double mean_wall_time = 0.0;
};

inline double median(std::vector<double> v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

// Groups records by (decoder, lambda for tpsr, group_key(record)) in first-seen order.
inline std::vector<AggregateRow> aggregate(const std::vector<ProblemRecord>& records,
                                           const std::function<std::string(const ProblemRecord&)>& group_key = {}) {
    std::vector<AggregateRow> rows;
    std::vector<std::vector<const ProblemRecord*>> members;
    for (const auto& r : records) {
        const std::optional<double> lam = r.decoder == "tpsr" ? std::optional<double>(r.lambda) : std::nullopt;
        const std::string g = group_key ? group_key(r) : std::string();
        auto it = std::find_if(rows.begin(), rows.end(),
                               [&](const AggregateRow& a) { return a.decoder == r.decoder && a.lambda == lam && a.group == g; });
        if (it == rows.end()) {
            rows.push_back(AggregateRow{r.decoder, lam, g});
            members.emplace_back();
            it = rows.end() - 1;
        }
        members[static_cast<std::size_t>(it - rows.begin())].push_back(&r);
    }
    for (std::size_t i = 0; i < rows.size(); ++i) {
        auto& a = rows[i];
        const auto& m = members[i];
        const double n = static_cast<double>(m.size());
        a.problems = m.size();
        std::vector<double> test_r2, cx;
        for (const auto* r : m) {
            a.mean_train_r2 += r->train_r2 / n;
            a.mean_test_r2 += r->test_r2 / n;
            a.frac_r2_099 += (r->test_r2 > 0.99 ? 1.0 : 0.0) / n;
            a.mean_complexity += static_cast<double>(r->complexity) / n;
            a.acc_01 += r->acc_01 / n;
            a.acc_001 += r->acc_001 / n;
            a.acc_0001 += r->acc_0001 / n;
            a.mean_reward += r->reward / n;
            a.mean_candidates += static_cast<double>(r->candidates) / n;
            a.mean_policy_calls += static_cast<double>(r->policy_calls) / n;
            a.mean_wall_time += r->wall_time / n;
            test_r2.push_back(r->test_r2);
            cx.push_back(static_cast<double>(r->complexity));
        }
        a.median_test_r2 = median(test_r2);
        a.median_complexity = median(cx);
    }
    return rows;
}

inline std::string csv_number(double v) {
    std::ostringstream ss;
    ss.precision(10);
    ss << v;
    return ss.str();
}

inline std::string aggregate_csv(const std::vector<AggregateRow>& rows) {
    std::ostringstream out;
    out << "decoder,lambda,group,problems,mean_train_r2,mean_test_r2,median_test_r2,frac_r2_gt_0.99,"
           "mean_complexity,median_complexity,acc_0.1,acc_0.01,acc_0.001,mean_reward,mean_candidates,"
           "mean_policy_calls,mean_wall_time\n";
    for (const auto& a : rows) {
        out << a.decoder << ',' << (a.lambda ? csv_number(*a.lambda) : std::string()) << ',' << a.group << ','
            << a.problems << ',' << csv_number(a.mean_train_r2) << ',' << csv_number(a.mean_test_r2) << ','
            << csv_number(a.median_test_r2) << ',' << csv_number(a.frac_r2_099) << ',' << csv_number(a.mean_complexity)
            << ',' << csv_number(a.median_complexity) << ',' << csv_number(a.acc_01) << ',' << csv_number(a.acc_001)
            << ',' << csv_number(a.acc_0001) << ',' << csv_number(a.mean_reward) << ',' << csv_number(a.mean_candidates)
            << ',' << csv_number(a.mean_policy_calls) << ',' << csv_number(a.mean_wall_time) << '\n';
    }
    return out.str();
}

// One point per aggregate row: accuracy = mean test R^2, complexity = mean complexity.
inline std::string pareto_csv(const std::vector<AggregateRow>& rows) {
    std::vector<ParetoPoint> pts;
    for (const auto& a : rows) pts.push_back({a.mean_test_r2, a.mean_complexity});
    const auto fronts = pareto_front(pts);
    std::vector<std::size_t> rank(rows.size());
    for (std::size_t f = 0; f < fronts.size(); ++f)
        for (std::size_t i : fronts[f]) rank[i] = f;
    std::ostringstream out;
    out << "decoder,lambda,group,accuracy,complexity,front\n";
    for (std::size_t i = 0; i < rows.size(); ++i)
        out << rows[i].decoder << ',' << (rows[i].lambda ? csv_number(*rows[i].lambda) : std::string()) << ','
            << rows[i].group << ',' << csv_number(pts[i].accuracy) << ',' << csv_number(pts[i].complexity) << ','
            << rank[i] << '\n';
    return out.str();
}

struct RunReport {
    std::vector<ProblemRecord> records;
    std::vector<AggregateRow> aggregate;
    std::string pareto;  // CSV, bench only
};

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write '" + path.string() + "'");
    out << text;
    if (!out) throw Error("write failed for '" + path.string() + "'");
}

// records.jsonl, aggregate.csv, pareto.csv (when present) and config.json under cfg.out.
inline void write_report(const RunReport& report, const RunConfig& cfg) {
    if (cfg.out.empty()) return;
    const std::filesystem::path dir(cfg.out);
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw Error("cannot create output directory '" + cfg.out + "': " + ec.message());
    std::string lines;
    for (const auto& r : report.records) lines += to_json(r).dump() + '\n';
    write_text(dir / "records.jsonl", lines);
    write_text(dir / "aggregate.csv", aggregate_csv(report.aggregate));
    if (!report.pareto.empty()) write_text(dir / "pareto.csv", report.pareto);
    write_text(dir / "config.json", to_json(cfg).dump(2) + '\n');
}

inline std::vector<ProblemRecord> read_records(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path + "'");
    std::vector<ProblemRecord> out;
    for (std::string line; std::getline(in, line);)
        if (!line.empty()) out.push_back(record_from_json(nlohmann::json::parse(line)));
    return out;
}

// ------------------------------------------------------------------------ runners

inline RunReport cmd_fit(const RunConfig& cfg, const Dataset& problem, const Policy& policy,
                         const Vocabulary& vocab = Vocabulary()) {
    cfg.validate();
    RunReport rep;
    rep.records.push_back(run_task(cfg.task("tpsr", cfg.seed), problem, policy, vocab).record);
    rep.aggregate = aggregate(rep.records);
    return rep;
}

// Sampling and beam baselines plus the search at every lambda. With budget matching the
// baselines get, per bag, as many candidates as the search generated per bag at the first
// lambda of the grid, and refine all of them (K = C).
inline RunReport cmd_bench(const RunConfig& cfg, const Suite& suite, const Policy& policy,
                           const Vocabulary& vocab = Vocabulary()) {
    cfg.validate();
    const std::size_t n = suite.problems.size();
    const std::size_t per = 2 + cfg.lambdas.size();
    std::vector<ProblemRecord> slots(n * per);
    parallel_for(n, cfg.jobs, [&](std::size_t i) {
        const std::uint64_t seed = cfg.seed + i;
        const Dataset& p = suite.problems[i];
        for (std::size_t l = 0; l < cfg.lambdas.size(); ++l) {
            Task t = cfg.task("tpsr", seed);
            t.mcts.lambda = cfg.lambdas[l];
            slots[i * per + 2 + l] = run_task(t, p, policy, vocab).record;
        }
        const auto& anchor = slots[i * per + 2];
        for (std::size_t k = 0; k < 2; ++k) {
            Task t = cfg.task(k == 0 ? "sampling" : "beam", seed);
            t.baseline.lambda = cfg.lambdas.front();
            t.baseline.max_len = cfg.mcts.max_len;
            if (cfg.budget_match) {
                const auto c = (anchor.candidates + anchor.bags - 1) / std::max<std::size_t>(anchor.bags, 1);
                t.baseline.candidates = static_cast<int>(std::max<std::uint64_t>(1, c));
                t.baseline.refine_top = t.baseline.candidates;
            }
            slots[i * per + k] = run_task(t, p, policy, vocab).record;
        }
    });
    RunReport rep;
    rep.records = std::move(slots);
    rep.aggregate = aggregate(rep.records);
    rep.pareto = pareto_csv(rep.aggregate);
    return rep;
}

// Fits on the unit-variance split, then evaluates the fit on the test rows with inputs
// rescaled about their mean to each sigma and targets recomputed from the ground truth.
// Rows whose rescaled target is non-finite are dropped (counted in extra.dropped_rows).
inline RunReport cmd_extrapolate(const RunConfig& cfg, const Suite& suite, const Policy& policy,
                                 const Vocabulary& vocab = Vocabulary()) {
    cfg.validate();
    const std::size_t n = suite.problems.size();
    const std::size_t per = cfg.lambdas.size() * cfg.sigmas.size();
    std::vector<ProblemRecord> slots(n * per);
    parallel_for(n, cfg.jobs, [&](std::size_t i) {
        const Dataset& p = suite.problems[i];
        if (!p.ground_truth) throw DataError("problem '" + p.name + "' has no ground truth");
        const ExprTree truth = build_tree(*p.ground_truth, vocab);
        const std::uint64_t seed = cfg.seed + i;
        Dataset base = scale_inputs(p, 1.0).data;
        if (auto y = evaluate(truth, p.ground_truth_consts, base.x); std::all_of(y.begin(), y.end(), [](double v) { return std::isfinite(v); }))
            base.y = std::move(y);
        for (std::size_t l = 0; l < cfg.lambdas.size(); ++l) {
            Task t = cfg.task("tpsr", seed);
            t.mcts.lambda = cfg.lambdas[l];
            const auto fit = run_task(t, base, policy, vocab);
            for (std::size_t s = 0; s < cfg.sigmas.size(); ++s) {
                Dataset scaled = scale_inputs(base, cfg.sigmas[s]).data;
                scaled.y = evaluate(truth, p.ground_truth_consts, scaled.x);
                const auto test_rows = split_train_test(Dataset{scaled}, t.split, t.seed).test;
                std::vector<std::size_t> keep;
                for (std::size_t r = 0; r < test_rows.n(); ++r)
                    if (std::isfinite(test_rows.y[r])) keep.push_back(r);
                ProblemRecord rec = fit.record;
                rec.extra["sigma"] = cfg.sigmas[s];
                rec.extra["dropped_rows"] = test_rows.n() - keep.size();
                if (cfg.sigmas[s] != 1.0) {
                    if (keep.size() >= 2) {
                        score_test(rec, fit.best, test_rows.subset(keep), vocab);
                    } else {
                        rec.test_r2 = 0.0;
                        rec.acc_01 = rec.acc_001 = rec.acc_0001 = 0;
                    }
                }
                slots[(i * cfg.lambdas.size() + l) * cfg.sigmas.size() + s] = std::move(rec);
            }
        }
    });
    RunReport rep;
    rep.records = std::move(slots);
    rep.aggregate = aggregate(rep.records, [](const ProblemRecord& r) { return "sigma=" + csv_number(r.extra.value("sigma", 1.0)); });
    return rep;
}

// Multiplicative target noise on the training split only; test targets stay clean.
inline RunReport cmd_noise(const RunConfig& cfg, const Suite& suite, const Policy& policy,
                           const Vocabulary& vocab = Vocabulary()) {
    cfg.validate();
    const std::size_t n = suite.problems.size();
    const std::size_t per = cfg.gammas.size();
    std::vector<ProblemRecord> slots(n * per);
    parallel_for(n, cfg.jobs, [&](std::size_t i) {
        for (std::size_t g = 0; g < per; ++g) {
            Task t = cfg.task("tpsr", cfg.seed + i);
            t.gamma = cfg.gammas[g];
            auto rec = run_task(t, suite.problems[i], policy, vocab).record;
            rec.extra["gamma"] = cfg.gammas[g];
            slots[i * per + g] = std::move(rec);
        }
    });
    RunReport rep;
    rep.records = std::move(slots);
    rep.aggregate = aggregate(rep.records, [](const ProblemRecord& r) { return "gamma=" + csv_number(r.extra.value("gamma", 0.0)); });
    return rep;
}

struct AblationCell {
    std::string factor;
    std::string value;
    MctsConfig cfg;
};

// One-factor-at-a-time grid around `base`: cache on/off combinations, r, b, k_max, beta.
inline std::vector<AblationCell> ablation_grid(const MctsConfig& base) {
    std::vector<AblationCell> cells;
    for (int topk = 1; topk >= 0; --topk)
        for (int seq = 1; seq >= 0; --seq) {
            MctsConfig c = base;
            c.cache_topk = topk;
            c.cache_seq = seq;
            cells.push_back({"caches", std::string(topk ? "topk" : "-") + "+" + (seq ? "seq" : "-"), c});
        }
    for (int r : {1, 3, 6, 9}) {
        MctsConfig c = base;
        c.rollouts = r;
        cells.push_back({"rollouts", std::to_string(r), c});
    }
    for (int b : {1, 3}) {
        MctsConfig c = base;
        c.sim_beam = b;
        cells.push_back({"beam", std::to_string(b), c});
    }
    for (int k : {2, 3, 4}) {
        MctsConfig c = base;
        c.k_max = k;
        cells.push_back({"k_max", std::to_string(k), c});
    }
    for (double beta : {0.0, 0.1, 1.0, 10.0, 100.0}) {
        MctsConfig c = base;
        c.beta = beta;
        cells.push_back({"beta", csv_number(beta), c});
    }
    return cells;
}

inline RunReport cmd_ablate(const RunConfig& cfg, const Suite& suite, const Policy& policy,
                            const Vocabulary& vocab = Vocabulary()) {
    cfg.validate();
    const auto cells = ablation_grid(cfg.mcts);
    const std::size_t n = suite.problems.size();
    std::vector<ProblemRecord> slots(n * cells.size());
    parallel_for(n, cfg.jobs, [&](std::size_t i) {
        for (std::size_t c = 0; c < cells.size(); ++c) {
            Task t = cfg.task("tpsr", cfg.seed + i);
            t.mcts = cells[c].cfg;
            t.with_seed(cfg.seed + i);
            auto rec = run_task(t, suite.problems[i], policy, vocab).record;
            rec.extra["factor"] = cells[c].factor;
            rec.extra["value"] = cells[c].value;
            slots[c * n + i] = std::move(rec);
        }
    });
    RunReport rep;
    rep.records = std::move(slots);
    rep.aggregate = aggregate(rep.records, [](const ProblemRecord& r) {
        return r.extra.value("factor", std::string()) + "=" + r.extra.value("value", std::string());
    });
    return rep;
}

} // namespace symreg
