#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "flashmem/monitor.hpp"

using namespace flashmem;

TEST_CASE("sink masking worked example") {
    // one head: [0.9, 0.06, 0.04] with sink {0} -> [0, 0.6, 0.4]
    Tensor<double> A({1, 3}, {0.9, 0.06, 0.04});
    auto masked = mask_and_renormalize(A, {0});
    REQUIRE_FALSE(masked.degenerate);
    REQUIRE_THAT(masked.probs.at(0, 0), Catch::Matchers::WithinAbs(0.0, 1e-15));
    REQUIRE_THAT(masked.probs.at(0, 1), Catch::Matchers::WithinAbs(0.6, 1e-12));
    REQUIRE_THAT(masked.probs.at(0, 2), Catch::Matchers::WithinAbs(0.4, 1e-12));
}

TEST_CASE("masking is idempotent and ratio-preserving") {
    Rng rng = make_rng(17);
    std::uniform_real_distribution<double> u(0.01, 1.0);
    for (int rep = 0; rep < 100; ++rep) {
        Tensor<double> A = Tensor<double>::zeros({2, 8});
        for (std::size_t h = 0; h < 2; ++h) {
            double sum = 0;
            for (std::size_t j = 0; j < 8; ++j) sum += (A.at(h, j) = u(rng));
            for (std::size_t j = 0; j < 8; ++j) A.at(h, j) /= sum;
        }
        auto once = mask_and_renormalize(A, {0, 3});
        auto twice = mask_and_renormalize(once.probs, {0, 3});
        for (std::size_t i = 0; i < once.probs.size(); ++i)
            REQUIRE_THAT(once.probs.data[i], Catch::Matchers::WithinAbs(twice.probs.data[i], 1e-12));
        // non-sink ratios preserved
        REQUIRE_THAT(once.probs.at(0, 1) / once.probs.at(0, 2),
                     Catch::Matchers::WithinAbs(A.at(0, 1) / A.at(0, 2), 1e-9 * std::abs(A.at(0, 1) / A.at(0, 2))));
        // rows sum to one after masking
        for (std::size_t h = 0; h < 2; ++h) {
            double sum = 0;
            for (std::size_t j = 0; j < 8; ++j) sum += once.probs.at(h, j);
            REQUIRE_THAT(sum, Catch::Matchers::WithinAbs(1.0, 1e-12));
        }
    }
}

TEST_CASE("entropy worked values") {
    // uniform over 4 valid slots -> ln 4
    Tensor<double> U({1, 5}, {0.0, 0.25, 0.25, 0.25, 0.25});
    auto [h_u, per_u] = aggregate_entropy(U, {0});
    REQUIRE_THAT(h_u, Catch::Matchers::WithinAbs(std::log(4.0), 1e-12));

    // [0.6, 0.4] -> 0.67301 nats
    Tensor<double> B({1, 2}, {0.6, 0.4});
    auto [h_b, per_b] = aggregate_entropy(B, {});
    REQUIRE_THAT(h_b, Catch::Matchers::WithinAbs(0.67301, 1e-4));

    // head averaging: one deterministic head (H=0) plus the above
    Tensor<double> two({2, 2}, {1.0, 0.0, 0.6, 0.4});
    auto [h_two, per_two] = aggregate_entropy(two, {});
    REQUIRE_THAT(h_two, Catch::Matchers::WithinAbs(h_b / 2.0, 1e-12));
    REQUIRE(per_two.size() == 2);
    REQUIRE(per_two[0] == 0.0);
}

TEST_CASE("entropy bounds hold under fuzz") {
    Rng rng = make_rng(23);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    MonitorConfig cfg;
    int checked = 0;
    for (int rep = 0; rep < 1000; ++rep) {
        const std::size_t n = 2 + rep % 16;
        Tensor<double> A = Tensor<double>::zeros({3, n});
        for (std::size_t h = 0; h < 3; ++h) {
            double sum = 0;
            for (std::size_t j = 0; j < n; ++j) sum += (A.at(h, j) = u(rng) + 1e-6);
            for (std::size_t j = 0; j < n; ++j) A.at(h, j) /= sum;
        }
        EntropyRecord<double> rec = monitor_entropy(A, cfg, rep);
        const double hmax = std::log(static_cast<double>(n - 1));  // one sink masked
        REQUIRE(rec.entropy >= 0.0);
        REQUIRE(rec.entropy <= hmax + 1e-12);
        for (double ph : rec.per_head_entropy) {
            REQUIRE(ph >= 0.0);
            REQUIRE(ph <= hmax + 1e-12);
        }
        ++checked;
    }
    REQUIRE(checked == 1000);
}

TEST_CASE("degenerate heads are flagged, not fatal") {
    // all mass on the sink
    Tensor<double> A({1, 3}, {1.0, 0.0, 0.0});
    MonitorConfig cfg;
    EntropyRecord<double> rec = monitor_entropy(A, cfg, 0);
    REQUIRE(rec.degenerate);
    REQUIRE(rec.entropy == 0.0);
}

TEST_CASE("monitor is stateless and parameter-free") {
    Tensor<double> A({2, 4}, {0.4, 0.3, 0.2, 0.1, 0.25, 0.25, 0.25, 0.25});
    MonitorConfig cfg;
    auto r1 = monitor_entropy(A, cfg, 0);
    auto r2 = monitor_entropy(A, cfg, 0);
    REQUIRE(r1.entropy == r2.entropy);
    REQUIRE(r1.per_head_entropy == r2.per_head_entropy);
}

TEST_CASE("nearest-rank percentile calibration") {
    std::vector<double> vals;
    for (int i = 20; i >= 1; --i) vals.push_back(static_cast<double>(i));  // unsorted on purpose
    REQUIRE(calibrate_threshold(vals, 85.0) == 17.0);  // ceil(0.85*20) = 17
    REQUIRE(calibrate_threshold(vals, 100.0) == 20.0);
    REQUIRE(calibrate_threshold(vals, 1.0) == 1.0);
    // monotone in the percentile target
    double prev = 0.0;
    for (double p : {10.0, 25.0, 50.0, 75.0, 85.0, 95.0, 100.0}) {
        const double tau = calibrate_threshold(vals, p);
        REQUIRE(tau >= prev);
        prev = tau;
    }
    REQUIRE_THROWS_AS(calibrate_threshold({}, 85.0), contract_error);
    REQUIRE_THROWS_AS(calibrate_threshold(vals, 0.0), config_error);
    REQUIRE_THROWS_AS(calibrate_threshold(vals, 101.0), config_error);
}

TEST_CASE("trigger rule is strict and requires calibration") {
    MonitorConfig cfg;
    REQUIRE_FALSE(cfg.threshold_set());
    REQUIRE_THROWS_AS(should_trigger(1.0, cfg), config_error);
    cfg.threshold = 0.5;
    REQUIRE(cfg.threshold_set());
    REQUIRE_FALSE(should_trigger(0.5, cfg));  // strictly greater, not >=
    REQUIRE(should_trigger(0.5 + 1e-12, cfg));
}
