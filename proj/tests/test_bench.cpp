#include <filesystem>
#include <sstream>

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace symreg;

namespace {

const Vocabulary V;

Policy small_ngram() {
    static const Policy p = train_ngram(synthetic_corpus(3000, SynthSpec{}, V, 11), 3, V);
    return p;
}

SynthSpec suite_spec() {
    SynthSpec spec;
    spec.d_max = 2;
    spec.u_max = 1;
    spec.b_max_offset = 0;
    spec.n_points = 60;
    spec.seed = 500;
    return spec;
}

const Suite& small_suite() {
    static const Suite s = make_suite(suite_spec(), 3, V);
    return s;
}

RunConfig quick_config() {
    RunConfig cfg;
    cfg.mcts.rollouts = 2;
    cfg.lambdas = {0.0, 1.0};
    cfg.sigmas = {1, 2, 4, 8, 16};
    return cfg;
}

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
    std::vector<std::vector<std::string>> rows;
    std::istringstream in(text);
    for (std::string line; std::getline(in, line);) {
        std::vector<std::string> cells;
        std::string cell;
        std::istringstream ls(line);
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        if (!line.empty() && line.back() == ',') cells.emplace_back();
        rows.push_back(cells);
    }
    return rows;
}

std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("symreg_test_bench_" + name);
    std::filesystem::remove_all(p);
    return p;
}

} // namespace

TEST(Policies, Selectors) {
    EXPECT_EQ(make_policy("uniform", V)->name(), "uniform");
    EXPECT_THROW(make_policy("bogus", V), ConfigError);
    EXPECT_THROW(make_policy("ngram-suite", V), ConfigError);
    const auto dir = temp_dir("policy");
    std::filesystem::create_directories(dir);
    const auto file = (dir / "model.json").string();
    std::static_pointer_cast<const NgramPolicy>(small_ngram())->save(file);
    const auto loaded = make_policy("ngram:" + file, V);
    EXPECT_EQ(loaded->name(), "ngram");
    const Dataset& ds = small_suite().problems[0];
    auto a = open_context(loaded, ds, V), b = open_context(small_ngram(), ds, V);
    EXPECT_EQ(a.complete({}, 2).sequences, b.complete({}, 2).sequences);
    EXPECT_THROW(make_policy("ngram:" + (dir / "missing.json").string(), V), Error);
}

TEST(Config, JsonRoundTrip) {
    RunConfig cfg = quick_config();
    cfg.command = "bench";
    cfg.mcts.mode = SearchMode::SingleRoot;
    cfg.mcts.beta = 10;
    cfg.mcts.cache_seq = false;
    cfg.baseline.strategy = BaselineStrategy::Beam;
    cfg.baseline.temperature = 0.7;
    cfg.gammas = {0.0, 0.5};
    cfg.seed = 42;
    cfg.jobs = 3;
    cfg.out = "somewhere";
    const auto j = to_json(cfg);
    EXPECT_EQ(to_json(run_config_from_json(j)), j);

    const Task t = cfg.task("beam", 9);
    EXPECT_EQ(t.baseline.strategy, BaselineStrategy::Beam);
    EXPECT_EQ(t.mcts.seed, 9u);
    EXPECT_EQ(t.baseline.seed, 9u);
    EXPECT_EQ(to_json(task_from_json(to_json(t))), to_json(t));
    EXPECT_THROW(task_from_json({{"decoder", "greedy"}}), ConfigError);
    EXPECT_THROW(mcts_config_from_json({{"mode", "sideways"}}), ConfigError);

    cfg.lambdas = {};
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = quick_config();
    cfg.jobs = 0;
    EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Records, JsonRoundTripAndReport) {
    RunConfig cfg = quick_config();
    const auto rep = cmd_fit(cfg, small_suite().problems[0], small_ngram(), V);
    ASSERT_EQ(rep.records.size(), 1u);
    const auto& r = rep.records[0];
    const auto j = to_json(r);
    for (const char* key : {"name", "decoder", "lambda", "prefix", "infix", "consts", "train_r2", "test_r2", "acc_0.1",
                            "acc_0.01", "acc_0.001", "complexity", "candidates_generated", "policy_calls",
                            "cache_hits_topk", "cache_hits_seq", "wall_time", "seed"})
        EXPECT_TRUE(j.contains(key)) << key;
    EXPECT_EQ(to_json(record_from_json(j)), j);

    const auto dir = temp_dir("report");
    cfg.out = dir.string();
    write_report(rep, cfg);
    EXPECT_TRUE(std::filesystem::exists(dir / "aggregate.csv"));
    EXPECT_TRUE(std::filesystem::exists(dir / "config.json"));
    const auto back = read_records((dir / "records.jsonl").string());
    ASSERT_EQ(back.size(), 1u);
    EXPECT_EQ(to_json(back[0]), j);
    EXPECT_EQ(to_json(run_config_from_json(read_json_file((dir / "config.json").string()))), to_json(cfg));
}

TEST(Records, FitRecordMatchesItsEquation) {
    const RunConfig cfg = quick_config();
    const Dataset& p = small_suite().problems[1];
    const auto rec = cmd_fit(cfg, p, small_ngram(), V).records[0];
    const auto seq = parse_prefix(rec.prefix, V);
    EXPECT_EQ(rec.complexity, seq.size());
    const auto tt = split_train_test(p, cfg.split, cfg.seed);
    const auto tree = build_tree(seq, V);
    EXPECT_NEAR(rec.test_r2, r_squared(tt.test.y, evaluate(tree, rec.consts, tt.test.x)).value, 1e-12);
    EXPECT_NEAR(rec.train_r2, r_squared(tt.train.y, evaluate(tree, rec.consts, tt.train.x)).value, 1e-12);
    EXPECT_EQ(rec.decoder, "tpsr");
    EXPECT_EQ(rec.name, p.name);
}

TEST(Records, ReplayReproducesEquation) {
    RunConfig cfg = quick_config();
    cfg.lambdas = {0.1};
    const auto rep = cmd_bench(cfg, small_suite(), small_ngram(), V);
    for (const auto& r : rep.records) {
        const auto& p = *std::find_if(small_suite().problems.begin(), small_suite().problems.end(),
                                      [&](const Dataset& d) { return d.name == r.name; });
        const auto again = replay(record_from_json(to_json(r)), p, small_ngram(), V);
        EXPECT_EQ(again.prefix, r.prefix) << r.decoder;
        EXPECT_EQ(again.consts, r.consts) << r.decoder;
        EXPECT_EQ(again.candidates, r.candidates);
    }
}

TEST(Bench, RowCountsBudgetAndAggregates) {
    const RunConfig cfg = quick_config();
    const auto& suite = small_suite();
    const auto rep = cmd_bench(cfg, suite, small_ngram(), V);
    EXPECT_EQ(rep.records.size(), suite.problems.size() * (2 + cfg.lambdas.size()));
    EXPECT_EQ(rep.aggregate.size(), 2 + cfg.lambdas.size());

    const std::size_t per = 2 + cfg.lambdas.size();
    for (std::size_t i = 0; i < suite.problems.size(); ++i) {
        const auto& anchor = rep.records[i * per + 2];
        EXPECT_EQ(anchor.lambda, cfg.lambdas.front());
        const auto c = (anchor.candidates + anchor.bags - 1) / anchor.bags;
        for (std::size_t k = 0; k < 2; ++k) {
            const auto& b = rep.records[i * per + k];
            EXPECT_EQ(b.decoder, k == 0 ? "sampling" : "beam");
            EXPECT_EQ(b.candidates, c * b.bags);
            EXPECT_EQ(b.config["baseline"]["refine_top"], b.config["baseline"]["candidates"]);
        }
    }

    // Aggregates recomputed independently from the records.
    for (const auto& a : rep.aggregate) {
        std::vector<const ProblemRecord*> m;
        for (const auto& r : rep.records)
            if (r.decoder == a.decoder && (r.decoder != "tpsr" || r.lambda == *a.lambda)) m.push_back(&r);
        ASSERT_EQ(m.size(), a.problems);
        double tr = 0, te = 0, frac = 0, cx = 0, acc = 0;
        for (const auto* r : m) {
            tr += r->train_r2, te += r->test_r2, frac += r->test_r2 > 0.99, cx += r->complexity, acc += r->acc_01;
        }
        const double n = static_cast<double>(m.size());
        EXPECT_NEAR(a.mean_train_r2, tr / n, 1e-12);
        EXPECT_NEAR(a.mean_test_r2, te / n, 1e-12);
        EXPECT_NEAR(a.frac_r2_099, frac / n, 1e-12);
        EXPECT_NEAR(a.mean_complexity, cx / n, 1e-12);
        EXPECT_NEAR(a.acc_01, acc / n, 1e-12);
        std::vector<double> c;
        for (const auto* r : m) c.push_back(static_cast<double>(r->complexity));
        std::sort(c.begin(), c.end());
        EXPECT_EQ(a.median_complexity, c[c.size() / 2]);  // three problems: odd count
    }

    // Pareto CSV against a brute-force dominance ranking of the aggregate rows.
    const auto rows = parse_csv(rep.pareto);
    ASSERT_EQ(rows.size(), rep.aggregate.size() + 1);
    std::vector<std::pair<double, double>> pts;
    for (std::size_t i = 1; i < rows.size(); ++i) pts.emplace_back(std::stod(rows[i][3]), std::stod(rows[i][4]));
    std::vector<int> rank(pts.size(), -1);
    for (int front = 0, left = static_cast<int>(pts.size()); left > 0; ++front) {
        std::vector<std::size_t> now;
        for (std::size_t i = 0; i < pts.size(); ++i) {
            if (rank[i] >= 0) continue;
            bool dom = false;
            for (std::size_t j = 0; j < pts.size(); ++j)
                if (j != i && rank[j] < 0 && pts[j].first >= pts[i].first && pts[j].second <= pts[i].second &&
                    (pts[j].first > pts[i].first || pts[j].second < pts[i].second))
                    dom = true;
            if (!dom) now.push_back(i);
        }
        for (auto i : now) rank[i] = front;
        left -= static_cast<int>(now.size());
    }
    for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_EQ(std::stoi(rows[i][5]), rank[i - 1]);
}

TEST(Bench, ParallelMatchesSerial) {
    RunConfig cfg = quick_config();
    cfg.lambdas = {0.1};
    const auto serial = cmd_bench(cfg, small_suite(), small_ngram(), V);
    cfg.jobs = 3;
    const auto parallel = cmd_bench(cfg, small_suite(), small_ngram(), V);
    ASSERT_EQ(serial.records.size(), parallel.records.size());
    for (std::size_t i = 0; i < serial.records.size(); ++i) {
        EXPECT_EQ(serial.records[i].prefix, parallel.records[i].prefix);
        EXPECT_EQ(serial.records[i].consts, parallel.records[i].consts);
    }
    EXPECT_THROW(parallel_for(10, 4, [](std::size_t i) { if (i == 7) throw DataError("boom"); }), DataError);
}

TEST(Noise, ZeroGammaEqualsCleanRun) {
    RunConfig cfg = quick_config();
    cfg.gammas = {0.0, 0.01, 0.1};
    const auto rep = cmd_noise(cfg, small_suite(), small_ngram(), V);
    EXPECT_EQ(rep.records.size(), small_suite().problems.size() * 3);
    EXPECT_EQ(rep.aggregate.size(), 3u);
    for (std::size_t i = 0; i < small_suite().problems.size(); ++i) {
        const auto clean = run_task(cfg.task("tpsr", cfg.seed + i), small_suite().problems[i], small_ngram(), V).record;
        const auto& zero = rep.records[i * 3];
        EXPECT_EQ(zero.extra["gamma"], 0.0);
        EXPECT_EQ(zero.prefix, clean.prefix);
        EXPECT_EQ(zero.consts, clean.consts);
        EXPECT_EQ(zero.test_r2, clean.test_r2);
        EXPECT_EQ(rep.records[i * 3 + 2].extra["gamma"], 0.1);
    }
}

TEST(Extrapolate, FiveSigmaRowsAndUnitScaleIsStandard) {
    RunConfig cfg = quick_config();
    cfg.lambdas = {0.1};
    const auto rep = cmd_extrapolate(cfg, small_suite(), small_ngram(), V);
    const std::size_t n = small_suite().problems.size();
    EXPECT_EQ(rep.records.size(), n * 5);
    EXPECT_EQ(rep.aggregate.size(), 5u);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& p = small_suite().problems[i];
        // Generated inputs are already standardised, so the unit-scale problem is the original.
        const auto fit = run_task(cfg.task("tpsr", cfg.seed + i), scale_inputs(p, 1.0).data,
                                  small_ngram(), V);
        const auto& unit = rep.records[i * 5];
        EXPECT_EQ(unit.extra["sigma"], 1.0);
        EXPECT_EQ(unit.prefix, fit.record.prefix);
        for (std::size_t s = 0; s < 5; ++s) {
            EXPECT_EQ(rep.records[i * 5 + s].prefix, unit.prefix);
            EXPECT_EQ(rep.records[i * 5 + s].extra["sigma"], cfg.sigmas[s]);
        }
        // sigma = 1 reproduces the standard test evaluation of that fit.
        EXPECT_NEAR(unit.test_r2, fit.record.test_r2, 1e-9);
        // sigma = 4: recompute the scaled test metrics independently.
        Dataset scaled = scale_inputs(scale_inputs(p, 1.0).data, 4.0).data;
        scaled.y = evaluate(build_tree(*p.ground_truth, V), p.ground_truth_consts, scaled.x);
        const auto test = split_train_test(scaled, cfg.split, cfg.seed + i).test;
        std::vector<std::size_t> keep;
        for (std::size_t r = 0; r < test.n(); ++r)
            if (std::isfinite(test.y[r])) keep.push_back(r);
        const auto kept = test.subset(keep);
        const auto pred = evaluate(build_tree(parse_prefix(unit.prefix, V), V), unit.consts, kept.x);
        EXPECT_NEAR(rep.records[i * 5 + 2].test_r2, r_squared(kept.y, pred).value, 1e-12);
        EXPECT_EQ(rep.records[i * 5 + 2].extra["dropped_rows"], test.n() - keep.size());
    }

    Suite blind = small_suite();
    blind.problems[0].ground_truth.reset();
    EXPECT_THROW(cmd_extrapolate(cfg, blind, small_ngram(), V), DataError);
}

TEST(Ablate, GridAndCacheCells) {
    const auto cells = ablation_grid(MctsConfig{});
    std::map<std::string, std::vector<std::string>> by_factor;
    for (const auto& c : cells) by_factor[c.factor].push_back(c.value);
    EXPECT_EQ(by_factor["caches"], (std::vector<std::string>{"topk+seq", "topk+-", "-+seq", "-+-"}));
    EXPECT_EQ(by_factor["rollouts"], (std::vector<std::string>{"1", "3", "6", "9"}));
    EXPECT_EQ(by_factor["beam"], (std::vector<std::string>{"1", "3"}));
    EXPECT_EQ(by_factor["k_max"], (std::vector<std::string>{"2", "3", "4"}));
    EXPECT_EQ(by_factor["beta"], (std::vector<std::string>{"0", "0.1", "1", "10", "100"}));

    RunConfig cfg = quick_config();
    cfg.mcts.rollouts = 1;
    Suite two = small_suite();
    two.problems.resize(2);
    const auto rep = cmd_ablate(cfg, two, small_ngram(), V);
    ASSERT_EQ(rep.records.size(), cells.size() * 2);
    EXPECT_EQ(rep.aggregate.size(), cells.size());
    for (std::size_t i = 0; i < 2; ++i) {
        const auto& all_on = rep.records[0 * 2 + i];
        ASSERT_EQ(all_on.extra["value"], "topk+seq");
        for (std::size_t c = 1; c < 4; ++c) {
            const auto& r = rep.records[c * 2 + i];
            EXPECT_EQ(r.prefix, all_on.prefix);
            EXPECT_EQ(r.consts, all_on.consts);
            EXPECT_GE(r.policy_calls, all_on.policy_calls);
        }
        EXPECT_GT(rep.records[3 * 2 + i].policy_calls, all_on.policy_calls);
    }
}

TEST(Suites, JsonRoundTripAndSeeds) {
    const auto& s = small_suite();
    ASSERT_EQ(s.problems.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(s.problems[i].name, "synth_" + std::to_string(i));
        SynthSpec p = suite_spec();
        p.seed += i;
        EXPECT_EQ(generate_synthetic(p, V).data.y, s.problems[i].y);
    }
    const auto j = suite_to_json(s, V);
    EXPECT_EQ(j["problems"].size(), 3u);
    const Suite back = suite_from_json(j, V);
    EXPECT_EQ(suite_to_json(back, V), j);

    const auto dir = temp_dir("suite");
    std::filesystem::create_directories(dir);
    write_text(dir / "suite.json", j.dump());
    EXPECT_EQ(suite_to_json(load_suite((dir / "suite.json").string(), V), V), j);
    EXPECT_THROW(load_problem((dir / "suite.json").string(), "y", V), DataError);
    write_text(dir / "broken.json", "{not json");
    EXPECT_THROW(load_suite((dir / "broken.json").string(), V), DataError);
    EXPECT_THROW(load_suite((dir / "absent.json").string(), V), DataError);
    const Vocabulary other({"add"}, {"sin"}, 2);
    EXPECT_THROW(suite_from_json(j, other), ConfigError);
}

TEST(Suites, LoadProblemFromCsvAndJson) {
    const auto dir = temp_dir("problem");
    std::filesystem::create_directories(dir);
    write_text(dir / "lin.csv", "a,y\n1,3\n2,5\n3,7\n4,9\n");
    const Dataset csv = load_problem((dir / "lin.csv").string(), "y", V);
    EXPECT_EQ(csv.name, "lin");
    EXPECT_EQ(csv.y, (std::vector<double>{3, 5, 7, 9}));
    write_text(dir / "one.json", problem_to_json(small_suite().problems[0], V).dump());
    const Dataset js = load_problem((dir / "one.json").string(), "y", V);
    EXPECT_EQ(js.y, small_suite().problems[0].y);
}
