#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include <symreg/symreg.hpp>

using namespace symreg;

namespace {

void add_search_flags(CLI::App* app, RunConfig& cfg, std::string& mode) {
    app->add_option("--lambda", cfg.mcts.lambda, "Complexity weight in the reward");
    app->add_option("--rollouts", cfg.mcts.rollouts, "Rollouts per committed token (r)");
    app->add_option("--kmax", cfg.mcts.k_max, "Expansion width (k_max)");
    app->add_option("--beam", cfg.mcts.sim_beam, "Evaluation beam width (b)");
    app->add_option("--beta", cfg.mcts.beta, "Exploration weight");
    app->add_option("--mode", mode, "Search mode")->check(CLI::IsMember({"token", "root"}));
    app->add_option("--policy", cfg.policy, "uniform | ngram | ngram:<file> | ngram-suite | remote:<cmd-or-host:port>");
    app->add_option("--seed", cfg.seed, "Master seed (problem i uses seed + i)");
    app->add_option("--out", cfg.out, "Output directory");
    app->add_flag("--no-cache-topk", [&](std::int64_t) { cfg.mcts.cache_topk = false; }, "Disable the top-k cache");
    app->add_flag("--no-cache-seq", [&](std::int64_t) { cfg.mcts.cache_seq = false; }, "Disable the sequence cache");
    app->add_option("--jobs", cfg.jobs, "Worker threads for suite runs");
    app->add_option("--bag-size", cfg.n_max, "Rows per bag");
    app->add_option("--max-bags", cfg.b_max, "Maximum number of bags");
}

void add_spec_flags(CLI::App* app, SynthSpec& spec) {
    app->add_option("--d-max", spec.d_max, "Maximum input dimension");
    app->add_option("--u-max", spec.u_max, "Maximum unary operator count");
    app->add_option("--b-max-offset", spec.b_max_offset, "Extra binary operators above d-1");
    app->add_option("--n-points", spec.n_points, "Rows per problem (0: drawn from {50,100,150,200})");
}

void print_summary(const RunReport& rep) {
    std::cout << aggregate_csv(rep.aggregate);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"MCTS-guided symbolic regression"};
    app.require_subcommand(1);

    RunConfig cfg;
    std::string mode = "token";
    bool budget_match = false;
    std::string lambdas;

    auto* fit = app.add_subcommand("fit", "Fit one dataset (CSV or problem JSON)");
    fit->add_option("data", cfg.data, "Input file")->required();
    fit->add_option("--target", cfg.target, "CSV target column");
    add_search_flags(fit, cfg, mode);

    SynthSpec spec;
    std::size_t count = 400;
    bool grid_n = false;
    std::string synth_out;
    auto* synth = app.add_subcommand("synth", "Generate a synthetic problem suite");
    add_spec_flags(synth, spec);
    synth->add_option("--count", count, "Number of problems");
    synth->add_option("--seed", spec.seed, "Suite seed (problem i uses seed + i)");
    synth->add_flag("--grid-n", grid_n, "Write one sub-suite per N in {50,100,150,200}");
    synth->add_option("--out", synth_out, "Suite file (.json)")->required();

    std::vector<CLI::App*> suite_cmds;
    auto* bench = app.add_subcommand("bench", "Sampling, beam and search over a lambda grid");
    bench->add_flag("--budget-match", budget_match, "Give baselines the search's candidate budget");
    bench->add_option("--lambdas", lambdas, "Comma-separated lambda grid");
    suite_cmds.push_back(bench);
    auto* extrap = app.add_subcommand("extrapolate", "Evaluate fits on rescaled test inputs");
    extrap->add_option("--lambdas", lambdas, "Comma-separated lambda grid");
    suite_cmds.push_back(extrap);
    auto* noise = app.add_subcommand("noise", "Fit under multiplicative target noise");
    suite_cmds.push_back(noise);
    auto* ablate = app.add_subcommand("ablate", "One-factor-at-a-time search ablations");
    suite_cmds.push_back(ablate);
    for (auto* c : suite_cmds) {
        c->add_option("suite", cfg.data, "Suite file from `synth`")->required();
        add_search_flags(c, cfg, mode);
    }

    std::size_t corpus = 50000;
    int order = 3;
    std::string model_out;
    SynthSpec corpus_spec;
    std::uint64_t corpus_seed = kPriorCorpusSeed;
    auto* train = app.add_subcommand("train-ngram", "Train an n-gram prior on generator skeletons");
    add_spec_flags(train, corpus_spec);
    train->add_option("--corpus", corpus, "Number of skeletons");
    train->add_option("--order", order, "Model order");
    train->add_option("--seed", corpus_seed, "Corpus seed");
    train->add_option("--out", model_out, "Model file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        const Vocabulary vocab;
        cfg.mcts.mode = search_mode_from_string(mode);
        cfg.budget_match = budget_match;
        if (!lambdas.empty()) {
            cfg.lambdas.clear();
            std::stringstream ss(lambdas);
            for (std::string item; std::getline(ss, item, ',');) {
                try {
                    cfg.lambdas.push_back(std::stod(item));
                } catch (const std::exception&) {
                    throw ConfigError("bad lambda value '" + item + "'");
                }
            }
        }

        if (*synth) {
            const std::filesystem::path path(synth_out);
            if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
            if (!grid_n) {
                write_text(path, suite_to_json(make_suite(spec, count, vocab), vocab).dump() + '\n');
                std::cout << "wrote " << count << " problems to " << path.string() << '\n';
                return 0;
            }
            for (int n : {50, 100, 150, 200}) {
                SynthSpec s = spec;
                s.n_points = n;
                auto sub = path.parent_path() / (path.stem().string() + "_n" + std::to_string(n) + ".json");
                write_text(sub, suite_to_json(make_suite(s, count, vocab), vocab).dump() + '\n');
                std::cout << "wrote " << count << " problems to " << sub.string() << '\n';
            }
            return 0;
        }

        if (*train) {
            train_ngram(synthetic_corpus(corpus, corpus_spec, vocab, corpus_seed), order, vocab)->save(model_out);
            std::cout << "wrote order-" << order << " model over " << corpus << " skeletons to " << model_out << '\n';
            return 0;
        }

        if (*fit) {
            cfg.command = "fit";
            cfg.validate();
            const Dataset ds = load_problem(cfg.data, cfg.target, vocab);
            const Policy policy = make_policy(cfg.policy, vocab);
            const auto rep = cmd_fit(cfg, ds, policy, vocab);
            write_report(rep, cfg);
            const auto& r = rep.records.front();
            std::cout << "equation: " << r.infix << '\n'
                      << "prefix: " << r.prefix << '\n'
                      << "train R2: " << r.train_r2 << "  test R2: " << r.test_r2 << "  complexity: " << r.complexity
                      << "  bags: " << r.bags << '\n';
            return 0;
        }

        cfg.validate();
        const Suite suite = load_suite(cfg.data, vocab);
        const Policy policy = make_policy(cfg.policy, vocab, &suite.spec);
        RunReport rep;
        if (*bench) {
            cfg.command = "bench";
            rep = cmd_bench(cfg, suite, policy, vocab);
        } else if (*extrap) {
            cfg.command = "extrapolate";
            rep = cmd_extrapolate(cfg, suite, policy, vocab);
        } else if (*noise) {
            cfg.command = "noise";
            rep = cmd_noise(cfg, suite, policy, vocab);
        } else {
            cfg.command = "ablate";
            rep = cmd_ablate(cfg, suite, policy, vocab);
        }
        write_report(rep, cfg);
        print_summary(rep);
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
