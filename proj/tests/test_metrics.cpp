#include "doctest.h"

#include <cmath>
#include <vector>

#include "equate/common.hpp"
#include "equate/metrics.hpp"

using namespace equate;

TEST_CASE("r2 of a perfect fit is one") {
    std::vector<double> y{1, 2, 3, 4};
    CHECK(*r2_score(y, y) == 1.0);
}

TEST_CASE("r2 of the mean predictor is zero") {
    std::vector<double> y{1, 2, 3, 4}, m(4, 2.5);
    CHECK(*r2_score(y, m) == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("r2 matches a hand computation") {
    std::vector<double> y{1, 2, 3}, yh{1.5, 2, 2};
    // SSE = 0.25 + 0 + 1 = 1.25, SS = 2
    CHECK(*r2_score(y, yh) == doctest::Approx(1.0 - 1.25 / 2.0));
    // literal form: SS = (1.5-2)^2 + 0 + 0 = 0.25
    CHECK(*r2_score(y, yh, FitnessMode::Explained) == doctest::Approx(1.0 - 1.25 / 0.25));
}

TEST_CASE("r2 undefined on constant labels and non-finite predictions") {
    std::vector<double> c{2, 2, 2}, yh{1, 2, 3};
    CHECK_FALSE(r2_score(c, yh).has_value());
    std::vector<double> y{1, 2, 3}, bad{1, NAN, 3};
    CHECK_FALSE(r2_score(y, bad).has_value());
    std::vector<double> shorter{1, 2};
    CHECK_THROWS_AS(r2_score(y, shorter), Error);
}

TEST_CASE("fitness combines accuracy and a length bonus") {
    std::vector<double> y{1, 2, 3, 4};
    FitnessConfig cfg;
    cfg.lambda = 0.5;
    cfg.max_len = 200;
    CHECK(fitness(y, y, 0, cfg) == doctest::Approx(1.5).epsilon(1e-12));
    CHECK(fitness(y, y, 200, cfg) == doctest::Approx(1.0 + 0.5 * std::exp(-1.0)).epsilon(1e-12));
    cfg.lambda = 0.0;
    CHECK(fitness(y, y, 7, cfg) == 1.0);
}

TEST_CASE("fitness floors flagged rows, degenerate labels and terrible fits") {
    FitnessConfig cfg;
    std::vector<double> y{1, 2, 3, 4}, c{5, 5, 5, 5};
    CHECK(fitness(y, y, 3, cfg, 1) == -1.0);
    CHECK(fitness(c, y, 3, cfg) == -1.0);
    std::vector<double> awful{100, -100, 100, -100};
    CHECK(fitness(y, awful, 3, cfg) == -1.0);
    std::vector<double> one{1};
    CHECK_THROWS_AS(fitness(one, one, 1, cfg), Error);
}

TEST_CASE("mode names round trip") {
    for (auto m : {FitnessMode::Standard, FitnessMode::Explained})
        CHECK(fitness_mode_from_name(fitness_mode_name(m)) == m);
    CHECK_THROWS_AS(fitness_mode_from_name("bogus"), Error);
}

TEST_CASE("solved share on a benchmark of 119 tasks") {
    // 80 solved tasks out of 119 rounds to 0.672.
    CHECK(std::round(80.0 / 119.0 * 1000.0) / 1000.0 == 0.672);
}
