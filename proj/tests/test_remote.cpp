#include <gtest/gtest.h>

#include <deque>

#include "test_util.hpp"

using namespace symreg;

namespace {

const Vocabulary V;

std::string server_cmd(const std::string& args = "") {
    return std::string("exec ") + MOCK_SERVER + (args.empty() ? "" : " " + args);
}

// Same corpus and order as the mock server's defaults.
Policy local_ngram() {
    static const Policy p = train_ngram(synthetic_corpus(3000, SynthSpec{}, V, 11), 3, V);
    return p;
}

Dataset problem(std::uint64_t seed) {
    SynthSpec spec;
    spec.d_max = 2;
    spec.u_max = 1;
    spec.b_max_offset = 0;
    spec.n_points = 80;
    spec.seed = seed;
    return generate_synthetic(spec, V).data;
}

// Scripted channel: replies are handed out in order, requests are recorded.
class ScriptedChannel final : public LineChannel {
public:
    ScriptedChannel(std::deque<std::string> replies, std::shared_ptr<std::vector<nlohmann::json>> log)
        : replies_(std::move(replies)), log_(std::move(log)) {}
    void send_line(const std::string& line) override { log_->push_back(nlohmann::json::parse(line)); }
    std::string recv_line() override {
        if (replies_.empty()) throw PolicyError("script exhausted");
        auto r = replies_.front();
        replies_.pop_front();
        return r;
    }

private:
    std::deque<std::string> replies_;
    std::shared_ptr<std::vector<nlohmann::json>> log_;
};

} // namespace

TEST(Remote, MissingServerRaisesPolicyError) {
    const Dataset ds = problem(1);
    auto p = std::make_shared<RemotePolicy>("exec /nonexistent/policy_server_binary", 2000);
    EXPECT_THROW(p->open(ds, V), PolicyError);
    EXPECT_THROW(RemotePolicy("127.0.0.1:1", 2000).open(ds, V), PolicyError);
    EXPECT_THROW(RemotePolicy(""), ConfigError);
}

TEST(Remote, SilentServerTimesOut) {
    auto p = std::make_shared<RemotePolicy>("exec sleep 5", 200);
    EXPECT_THROW(p->open(problem(1), V), PolicyError);
}

TEST(Remote, ProtocolMessagesAndClose) {
    auto log = std::make_shared<std::vector<nlohmann::json>>();
    std::deque<std::string> replies{R"({"ok":true,"session":"a"})", R"({"tokens":[2,0],"logprobs":[-0.5,-1.5]})",
                                    R"({"ok":true})"};
    RemotePolicy p(std::make_unique<ScriptedChannel>(replies, log));
    const Dataset ds = testutil::make_dataset(Matrix{{1.0}, {2.0}}, [](auto r) { return r[0]; });
    {
        auto s = p.open(ds, V);
        const auto w = s->next_token_weights(Sequence{});
        ASSERT_EQ(static_cast<int>(w.size()), V.size());
        EXPECT_DOUBLE_EQ(w[2], std::exp(-0.5));
        EXPECT_DOUBLE_EQ(w[0], std::exp(-1.5));
        EXPECT_EQ(w[1], 0.0);
    }
    ASSERT_EQ(log->size(), 3u);
    EXPECT_EQ((*log)[0]["op"], "init");
    EXPECT_EQ((*log)[0]["vocab"].get<std::vector<std::string>>(), V.symbols());
    EXPECT_EQ((*log)[0]["x"], nlohmann::json::parse("[[1.0],[2.0]]"));
    EXPECT_EQ((*log)[1]["op"], "topk");
    EXPECT_EQ((*log)[1]["session"], "a");
    EXPECT_EQ((*log)[1]["k"], V.size());
    EXPECT_EQ((*log)[2]["op"], "close");
}

TEST(Remote, MalformedRepliesRaisePolicyError) {
    const Dataset ds = problem(2);
    for (const std::string bad : {R"([1,2])", R"(not json)", R"({"error":"boom"})", R"({"tokens":[99],"logprobs":[0]})",
                                  R"({"tokens":[1,2],"logprobs":[0]})"}) {
        auto log = std::make_shared<std::vector<nlohmann::json>>();
        RemotePolicy p(std::make_unique<ScriptedChannel>(std::deque<std::string>{R"({"ok":true,"session":1})", bad}, log));
        auto s = p.open(ds, V);
        EXPECT_THROW(s->next_token_weights(Sequence{}), PolicyError) << bad;
    }
    auto log = std::make_shared<std::vector<nlohmann::json>>();
    RemotePolicy rejected(std::make_unique<ScriptedChannel>(std::deque<std::string>{R"({"ok":false})"}, log));
    EXPECT_THROW(rejected.open(ds, V), PolicyError);
}

TEST(Remote, DistributionsAndCompletionsMatchLocal) {
    const Dataset ds = problem(3);
    const Policy remote = std::make_shared<RemotePolicy>(server_cmd());
    PolicyContext r = open_context(remote, ds, V);
    PolicyContext l = open_context(local_ngram(), ds, V);
    std::mt19937_64 rng(4);
    for (int t = 0; t < 30; ++t) {
        const auto full = l.sample(Sequence{}, 1.0, rng);
        const Sequence prefix(full.begin(), full.begin() + static_cast<long>(rng() % full.size()));
        const auto a = r.masked_distribution(prefix), b = l.masked_distribution(prefix);
        ASSERT_EQ(a.size(), b.size());
        for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
        EXPECT_EQ(r.top_k(prefix, 5).tokens, l.top_k(prefix, 5).tokens);
        const auto rc = r.complete(prefix, 3), lc = l.complete(prefix, 3);
        EXPECT_EQ(rc.sequences, lc.sequences);
        for (std::size_t i = 0; i < rc.scores.size() && i < lc.scores.size(); ++i)
            EXPECT_NEAR(rc.scores[i], lc.scores[i], 1e-9);
    }
}

TEST(Remote, MctsDecodeMatchesLocalPolicy) {
    const Policy remote = std::make_shared<RemotePolicy>(server_cmd());
    for (std::uint64_t s = 0; s < 4; ++s) {
        const Dataset ds = problem(10 + s);
        MctsConfig cfg;
        cfg.seed = s;
        const auto a = mcts_decode(ds, remote, cfg, V);
        const auto b = mcts_decode(ds, local_ngram(), cfg, V);
        EXPECT_EQ(a.best.eq.seq, b.best.eq.seq);
        EXPECT_EQ(a.best.eq.consts, b.best.eq.consts);
    }
}

TEST(Remote, ServerErrorReplyRaisesPolicyError) {
    PolicyContext ctx = open_context(std::make_shared<RemotePolicy>(server_cmd("--fault topk-error")), problem(5), V);
    EXPECT_THROW(ctx.top_k(Sequence{}, 3), PolicyError);
    PolicyContext g = open_context(std::make_shared<RemotePolicy>(server_cmd("--fault garbage")), problem(5), V);
    EXPECT_THROW(g.top_k(Sequence{}, 3), PolicyError);
}

TEST(Remote, InvalidCompletionFallsBackToLocalBeam) {
    const Dataset ds = problem(6);
    PolicyContext bad = open_context(std::make_shared<RemotePolicy>(server_cmd("--fault bad-complete")), ds, V);
    PolicyContext l = open_context(local_ngram(), ds, V);
    for (int beam : {1, 3}) {
        const auto a = bad.complete(Sequence{}, beam), b = l.complete(Sequence{}, beam);
        EXPECT_EQ(a.sequences, b.sequences);
        for (const auto& q : a.sequences) EXPECT_EQ(is_valid_prefix(q, V), Validity::Complete);
    }
}

TEST(Remote, ServerDeathRaisesPolicyError) {
    // init and one topk succeed, then the server exits.
    PolicyContext ctx = open_context(std::make_shared<RemotePolicy>(server_cmd("--fault die-after:2")), problem(7), V);
    EXPECT_NO_THROW(ctx.top_k(Sequence{}, 3));
    EXPECT_THROW(ctx.top_k(Sequence{}, 3), PolicyError);
    EXPECT_THROW(ctx.top_k(Sequence{}, 3), PolicyError);
}

TEST(Remote, TcpTransport) {
    auto proc = detail::spawn_process(server_cmd("--tcp"), 10000);
    const std::string banner = proc->recv_line();
    ASSERT_EQ(banner.rfind("PORT ", 0), 0u) << banner;
    const std::string target = "127.0.0.1:" + banner.substr(5);
    const Dataset ds = problem(8);
    PolicyContext r = open_context(std::make_shared<RemotePolicy>(target), ds, V);
    PolicyContext l = open_context(local_ngram(), ds, V);
    EXPECT_EQ(r.top_k(Sequence{}, 4).tokens, l.top_k(Sequence{}, 4).tokens);
    EXPECT_EQ(r.complete(Sequence{}, 2).sequences, l.complete(Sequence{}, 2).sequences);
    // Two policies on the same server get independent sessions.
    PolicyContext r2 = open_context(std::make_shared<RemotePolicy>(target), problem(9), V);
    EXPECT_NO_THROW(r2.top_k(Sequence{}, 2));
    EXPECT_NO_THROW(r.top_k(Sequence{}, 2));
}
