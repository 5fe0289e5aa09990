#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace symreg;

namespace {

std::vector<std::vector<std::size_t>> brute_force_fronts(const std::vector<ParetoPoint>& pts) {
    std::vector<std::vector<std::size_t>> fronts;
    std::vector<bool> placed(pts.size(), false);
    std::size_t left = pts.size();
    while (left > 0) {
        std::vector<std::size_t> front;
        for (std::size_t i = 0; i < pts.size(); ++i) {
            if (placed[i]) continue;
            bool dominated = false;
            for (std::size_t j = 0; j < pts.size() && !dominated; ++j) {
                if (placed[j] || j == i) continue;
                const auto& a = pts[j];
                const auto& b = pts[i];
                dominated = a.accuracy >= b.accuracy && a.complexity <= b.complexity &&
                            (a.accuracy > b.accuracy || a.complexity < b.complexity);
            }
            if (!dominated) front.push_back(i);
        }
        for (auto i : front) placed[i] = true;
        left -= front.size();
        fronts.push_back(front);
    }
    return fronts;
}

} // namespace

TEST(Nmse, Examples) {
    EXPECT_EQ(nmse(std::vector<double>{1, 2}, std::vector<double>{1, 2}), 0.0);
    EXPECT_DOUBLE_EQ(nmse(std::vector<double>{1, -1}, std::vector<double>{0, 0}), 1.0 / (1.0 + 1e-9));
    EXPECT_EQ(nmse(std::vector<double>{0, 0}, std::vector<double>{0, 0}), 0.0);
    const double nan = std::numeric_limits<double>::quiet_NaN();
    EXPECT_EQ(nmse(std::vector<double>{1, 2}, std::vector<double>{nan, 2}), kSentinel);
    EXPECT_THROW(nmse(std::vector<double>{1}, std::vector<double>{1, 2}), DimensionError);
}

TEST(Nmse, EpsilonGuardAtZeroTarget) {
    // mse 1, mean y^2 0: the ratio is 1 / eps.
    EXPECT_DOUBLE_EQ(nmse(std::vector<double>{0, 0}, std::vector<double>{1, -1}), 1.0 / 1e-9);
}

TEST(Nmse, MatchesDefinition) {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> g(0.0, 3.0);
    for (int t = 0; t < 100; ++t) {
        std::vector<double> y(1 + rng() % 30), yh(y.size());
        double se = 0, sq = 0;
        for (std::size_t i = 0; i < y.size(); ++i) {
            y[i] = g(rng);
            yh[i] = g(rng);
            se += (y[i] - yh[i]) * (y[i] - yh[i]);
            sq += y[i] * y[i];
        }
        const double n = static_cast<double>(y.size());
        EXPECT_NEAR(nmse(y, yh), (se / n) / (sq / n + 1e-9), 1e-14 * (se / n) / (sq / n));
    }
}

TEST(Reward, Examples) {
    RewardConfig cfg;
    cfg.lambda = 0.1;
    EXPECT_NEAR(reward_from(0.0, 0, cfg), 1.1, 1e-15);
    cfg.lambda = 1.0;
    cfg.max_len = 200;
    EXPECT_NEAR(reward_from(1.0, 200, cfg), 0.5 + std::exp(-1.0), 1e-12);
    EXPECT_NEAR(reward_from(1.0, 200, cfg), 0.867879, 1e-6);
    cfg.lambda = 0.0;
    for (std::size_t l : {1u, 10u, 150u}) EXPECT_EQ(reward_from(0.25, l, cfg), 1.0 / 1.25);
    cfg.lambda = -1;
    EXPECT_THROW(reward_from(0.0, 1, cfg), ConfigError);
}

TEST(Reward, SentinelIsFiniteAndPositive) {
    RewardConfig cfg;
    const double r = reward_from(kSentinel, 20, cfg);
    EXPECT_TRUE(std::isfinite(r));
    EXPECT_GT(r, 0.0);
    EXPECT_NEAR(r, cfg.lambda * std::exp(-20.0 / cfg.max_len), 1e-300);
}

TEST(Reward, MonotoneAndBounded) {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0.0, 5.0);
    for (int t = 0; t < 500; ++t) {
        RewardConfig cfg;
        cfg.lambda = u(rng) / 5.0;
        const double a = u(rng), b = a + 1e-3 + u(rng);
        const std::size_t l = 1 + rng() % 199;
        const double ra = reward_from(a, l, cfg);
        EXPECT_GT(ra, reward_from(b, l, cfg));
        if (cfg.lambda > 0) EXPECT_GT(ra, reward_from(a, l + 1, cfg));
        EXPECT_GT(ra, 0.0);
        EXPECT_LE(ra, 1.0 + cfg.lambda);
    }
}

TEST(Reward, LambdaZeroRanksLikeNmse) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 2.0);
    RewardConfig cfg;
    cfg.lambda = 0;
    for (int t = 0; t < 100; ++t) {
        std::vector<double> nm(10);
        std::vector<std::size_t> len(10);
        for (int i = 0; i < 10; ++i) nm[i] = u(rng), len[i] = 1 + rng() % 50;
        std::size_t by_reward = 0, by_nmse = 0;
        for (std::size_t i = 1; i < 10; ++i) {
            if (reward_from(nm[i], len[i], cfg) > reward_from(nm[by_reward], len[by_reward], cfg)) by_reward = i;
            if (nm[i] < nm[by_nmse]) by_nmse = i;
        }
        EXPECT_EQ(by_reward, by_nmse);
    }
}

TEST(Reward, ScoreEquationUsesBagAndLength) {
    const Vocabulary V;
    std::mt19937_64 rng(4);
    const Dataset ds = testutil::dataset_from("add mul C x0 C", {2.0, 1.0}, testutil::random_matrix(rng, 30, 1), V);
    RefinedEquation eq;
    eq.seq = parse_prefix("add mul C x0 C", V);
    eq.consts = {2.0, 1.0};
    RewardConfig cfg;
    const auto s = score_equation(eq, ds, cfg, V);
    EXPECT_EQ(s.complexity, 5u);
    EXPECT_EQ(s.nmse, 0.0);
    EXPECT_DOUBLE_EQ(s.reward, 1.0 + 0.1 * std::exp(-5.0 / 200));
    EXPECT_DOUBLE_EQ(s.r2_train, 1.0);

    eq.seq = parse_prefix("log sub x0 C", V);
    eq.consts = {1e9};
    const auto bad = score_equation(eq, ds, cfg, V);
    EXPECT_EQ(bad.nmse, kSentinel);
    EXPECT_TRUE(std::isfinite(bad.reward));
}

TEST(RSquared, Examples) {
    const std::vector<double> y{1, 2, 3, 4};
    EXPECT_EQ(r_squared(y, y).value, 1.0);
    EXPECT_FALSE(r_squared(y, y).pathological);
    EXPECT_EQ(r_squared(y, std::vector<double>(4, 2.5)).value, 0.0);
    const auto nan = r_squared(y, std::vector<double>{1, 2, std::nan(""), 4});
    EXPECT_EQ(nan.value, 0.0);
    EXPECT_TRUE(nan.pathological);
    const auto flat = r_squared(std::vector<double>{3, 3, 3}, std::vector<double>{3, 3, 3});
    EXPECT_EQ(flat.value, 0.0);
    EXPECT_TRUE(flat.pathological);
    EXPECT_THROW(r_squared(std::vector<double>{1}, std::vector<double>{1}), DimensionError);
    EXPECT_THROW(r_squared(y, std::vector<double>{1, 2}), DimensionError);
}

TEST(RSquared, AffineInvariance) {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> g(0.0, 1.0);
    for (int t = 0; t < 200; ++t) {
        std::vector<double> y(20), yh(20), ty(20), tyh(20);
        const double a = g(rng) * 10 + (rng() % 2 ? 0.5 : -0.5), b = g(rng) * 100;
        for (int i = 0; i < 20; ++i) {
            y[i] = g(rng);
            yh[i] = y[i] + 0.3 * g(rng);
            ty[i] = a * y[i] + b;
            tyh[i] = a * yh[i] + b;
        }
        EXPECT_NEAR(r_squared(y, yh).value, r_squared(ty, tyh).value, 1e-9);
    }
}

TEST(AccTolerance, Examples) {
    std::vector<double> y(200), yh(200);
    for (int i = 0; i < 200; ++i) y[i] = yh[i] = 1.0 + i;
    for (double w : {0.0, 1e-3, 0.1}) EXPECT_EQ(acc_tolerance(y, yh, w), 1);

    const double omega = 0.01;
    for (int i = 0; i < 200; ++i) yh[i] = y[i] * (1.0 + (i % 2 ? 0.5 : -0.5) * omega);
    for (int i = 0; i < 10; ++i) yh[i * 20] = y[i * 20] * 1e6;
    EXPECT_EQ(acc_tolerance(y, yh, omega), 1);
    yh[7] = -y[7];
    EXPECT_EQ(acc_tolerance(y, yh, omega), 0);

    for (int i = 0; i < 200; ++i) yh[i] = y[i] * (1.0 + 2 * omega);
    EXPECT_EQ(acc_tolerance(y, yh, omega), 0);
}

TEST(AccTolerance, ZeroTargetsUseAbsoluteErrorAndSmallNDiscardsNothing) {
    EXPECT_EQ(acc_tolerance(std::vector<double>{0, 1}, std::vector<double>{0.05, 1}, 0.1), 1);
    EXPECT_EQ(acc_tolerance(std::vector<double>{0, 1}, std::vector<double>{0.5, 1}, 0.1), 0);
    std::vector<double> y(19, 1.0), yh(19, 1.0);
    yh[3] = 100;
    EXPECT_EQ(acc_tolerance(y, yh, 0.1), 0);
    y.push_back(1.0);
    yh.push_back(1.0);
    EXPECT_EQ(acc_tolerance(y, yh, 0.1), 1);
}

TEST(AccTolerance, MonotoneInOmega) {
    std::mt19937_64 rng(6);
    std::normal_distribution<double> g(0.0, 1.0);
    for (int t = 0; t < 200; ++t) {
        std::vector<double> y(40), yh(40);
        const double s = std::pow(10.0, -3.0 + 3.0 * (rng() % 100) / 100.0);
        for (int i = 0; i < 40; ++i) y[i] = g(rng), yh[i] = y[i] * (1 + s * g(rng));
        int prev = 0;
        for (double w : {1e-4, 1e-3, 1e-2, 0.1, 1.0, 10.0}) {
            const int a = acc_tolerance(y, yh, w);
            EXPECT_GE(a, prev);
            prev = a;
        }
    }
}

TEST(Pareto, Examples) {
    const std::vector<ParetoPoint> one{{0.5, 3}};
    EXPECT_EQ(pareto_front(one), (std::vector<std::vector<std::size_t>>{{0}}));
    const std::vector<ParetoPoint> two{{0.9, 10}, {0.8, 20}};
    EXPECT_EQ(pareto_front(two), (std::vector<std::vector<std::size_t>>{{0}, {1}}));
    const std::vector<ParetoPoint> trade{{0.9, 20}, {0.8, 10}, {0.8, 10}};
    EXPECT_EQ(pareto_front(trade), (std::vector<std::vector<std::size_t>>{{0, 1, 2}}));
}

TEST(Pareto, MatchesBruteForce) {
    std::mt19937_64 rng(7);
    for (int t = 0; t < 20; ++t) {
        std::vector<ParetoPoint> pts(100);
        for (auto& p : pts) p = {static_cast<double>(rng() % 20) / 20.0, static_cast<double>(rng() % 30)};
        EXPECT_EQ(pareto_front(pts), brute_force_fronts(pts));
    }
}
