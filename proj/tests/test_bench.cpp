#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "equate/bench.hpp"
#include "equate/io.hpp"
#include "tiny_model.hpp"

using namespace equate;
using namespace equate::bench;
using testing_support::table_from;
using testing_support::tiny_model;

#ifndef EQUATE_SOURCE_DIR
#define EQUATE_SOURCE_DIR "."
#endif

namespace {

// Direct-formula R2 used as an independent oracle.
double r2_direct(const std::vector<double>& y, const std::vector<double>& p) {
    double mean = 0;
    for (double v : y) mean += v;
    mean /= static_cast<double>(y.size());
    double sse = 0, sst = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        sse += (y[i] - p[i]) * (y[i] - p[i]);
        sst += (y[i] - mean) * (y[i] - mean);
    }
    return 1.0 - sse / sst;
}

std::vector<double> sorted(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v;
}

}  // namespace

TEST_CASE("split is 75/25, exhaustive and seeded") {
    auto data = table_from("x_0", 1, 100, 1);
    Rng a(1), b(1), c(2);
    auto s = split(data, 0.75, a);
    CHECK(s.train.rows() == 75);
    CHECK(s.test.rows() == 25);
    std::vector<double> all = s.train.y;
    all.insert(all.end(), s.test.y.begin(), s.test.y.end());
    CHECK(sorted(all) == sorted(data.y));
    CHECK(split(data, 0.75, b).train == s.train);
    CHECK_FALSE(split(data, 0.75, c).train == s.train);
    auto tiny = table_from("x_0", 1, 3, 1);
    CHECK_THROWS_AS(split(tiny, 0.75, a), Error);
    auto four = table_from("x_0", 1, 4, 1);
    auto s4 = split(four, 0.75, a);
    CHECK(s4.train.rows() == 3);
    CHECK(s4.test.rows() == 1);
}

TEST_CASE("r2 agrees with the direct formula and is permutation invariant") {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> y(30), p(30);
        for (std::size_t i = 0; i < 30; ++i) {
            y[i] = uniform(rng, -5, 5);
            p[i] = y[i] + uniform(rng, -1, 1);
        }
        CHECK(*r2_score(y, p) == doctest::Approx(r2_direct(y, p)).epsilon(1e-12));
        auto yr = y, pr = p;
        std::reverse(yr.begin(), yr.end());
        std::reverse(pr.begin(), pr.end());
        CHECK(*r2_score(yr, pr) == doctest::Approx(*r2_score(y, p)).epsilon(1e-12));
    }
    std::vector<double> y{1, 2, 3, 4};
    CHECK(*r2_score(y, y) == 1.0);
}

TEST_CASE("solved proportion") {
    std::vector<std::optional<double>> r(119, 0.5);
    for (int i = 0; i < 80; ++i) r[i] = 0.995;
    const double p = solved_proportion(r);
    CHECK(p == doctest::Approx(80.0 / 119.0));
    CHECK(std::round(p * 1000.0) / 1000.0 == 0.672);
    std::vector<std::optional<double>> all(5, 1.0), none(5, 0.2);
    CHECK(solved_proportion(all) == 1.0);
    CHECK(solved_proportion(none) == 0.0);
    std::vector<std::optional<double>> undefined{std::nullopt, 0.999};
    CHECK(solved_proportion(undefined) == 0.5);
    std::vector<std::optional<double>> edge{0.99};
    CHECK(solved_proportion(edge) == 0.0);  // strictly above
}

TEST_CASE("noise has the requested relative scale") {
    Rng rng(4);
    std::vector<double> y(10000);
    for (auto& v : y) v = uniform(rng, -10, 10);
    double mean = 0, var = 0;
    for (double v : y) mean += v;
    mean /= y.size();
    for (double v : y) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / y.size());
    auto noisy = inject_noise(y, 0.1, rng);
    double dmean = 0, dvar = 0;
    for (std::size_t i = 0; i < y.size(); ++i) dmean += noisy[i] - y[i];
    dmean /= y.size();
    for (std::size_t i = 0; i < y.size(); ++i) dvar += std::pow(noisy[i] - y[i] - dmean, 2);
    const double dsd = std::sqrt(dvar / y.size());
    CHECK(std::abs(dsd - 0.1 * sd) < 0.1 * 0.1 * sd);
    CHECK(inject_noise(y, 0.0, rng) == y);
    CHECK_THROWS_AS(inject_noise(y, -0.1, rng), Error);
}

TEST_CASE("ablation names round trip") {
    for (auto a : {Ablation::Full, Ablation::NoSearch, Ablation::NoEqEncoder, Ablation::RandomInit, Ablation::UnfreezeAll})
        CHECK(ablation_from_name(ablation_name(a)) == a);
    CHECK_THROWS_AS(ablation_from_name("nope"), Error);
}

TEST_CASE("bundled toy suite matches its generators") {
    auto suite = load_suite(std::string(EQUATE_SOURCE_DIR) + "/data/toy_suite/suite.json");
    CHECK(suite.tasks.size() == 20);
    for (const auto& t : suite.tasks) {
        CHECK(t.num_vars >= 2);
        CHECK(t.num_vars <= 3);
        auto shipped = load_task_data(suite, t);
        CHECK(shipped.rows() == 400);
        CHECK(shipped == generate_task_data(suite, t));
        auto tree = expr::parse_prefix(expr::parse_prefix_text(t.truth));
        auto ev = expr::evaluate_rows(tree, shipped.x);
        CHECK(ev.error_count == 0);
        CHECK(*r2_score(shipped.y, ev.values) == 1.0);
    }
}

namespace {

Suite mini_suite(const std::filesystem::path& dir) {
    Suite s;
    s.name = "mini";
    s.dir = dir.string();
    s.rows = 60;
    s.tasks = {{"lin", "sub x_0 x_1", "lin.jsonl", 2, 1}, {"prod", "mul x_0 x_1", "prod.jsonl", 2, 2},
               {"flat", "", "flat.jsonl", 2, 3}};
    std::filesystem::create_directories(dir);
    for (std::size_t i = 0; i < 2; ++i) io::write_table((dir / s.tasks[i].data).string(), generate_task_data(s, s.tasks[i]));
    auto flat = generate_task_data(s, s.tasks[0]);
    for (auto& v : flat.y) v = 2.0;  // constant labels: R2 undefined everywhere
    io::write_table((dir / "flat.jsonl").string(), flat);
    return s;
}

RunConfig mini_config() {
    RunConfig c;
    c.model = tiny_model();
    c.finetune.num_subsets = 6;
    c.finetune.subset_rows = 20;
    c.finetune.epochs = 1;
    c.search.k_init = 2;
    c.search.max_steps = 2;
    c.search.max_candidates = 8;
    return c;
}

}  // namespace

TEST_CASE("run_suite isolates task failures and its aggregates recompute exactly") {
    const auto dir = std::filesystem::temp_directory_path() / "eq_bench_test";
    const auto suite = mini_suite(dir);
    const auto cfg = mini_config();
    nn::Model surrogate(cfg.model, 5);
    std::vector<Ablation> abl{Ablation::Full, Ablation::NoSearch, Ablation::RandomInit};
    SuiteOptions opts;
    opts.log_dir = (dir / "logs").string();
    auto reports = run_suite(suite, cfg, abl, surrogate, opts);
    REQUIRE(reports.size() == 3);
    for (auto& r : reports) {
        REQUIRE(r.tasks.size() == 3);
        CHECK_FALSE(r.tasks[2].ok);  // constant labels
        CHECK_FALSE(r.tasks[2].error.empty());
        const double prop = r.solved_proportion;
        auto mean = r.mean_r2;
        r.aggregate();
        CHECK(r.solved_proportion == prop);
        CHECK(r.mean_r2 == mean);
        auto j = report_to_json(r);
        CHECK(j["aggregates"]["tasks"] == 3);
        CHECK_FALSE(j.dump().find("seconds") != std::string::npos);
        CHECK(report_table(r).find("R2>0.99") != std::string::npos);
        for (const auto& t : r.tasks)
            if (t.ok) CHECK(t.candidates <= 8);
    }
    CHECK(std::filesystem::exists(dir / "logs" / "full_lin.jsonl"));
    auto again = run_suite(suite, cfg, abl, surrogate, opts);
    for (std::size_t i = 0; i < 3; ++i) CHECK(report_to_json(again[i]) == report_to_json(reports[i]));
    std::filesystem::remove_all(dir);
}

TEST_CASE("noise touches only the training split") {
    auto data = table_from("add x_0 x_1", 2, 80, 9);
    auto s1 = split_task(data, 42);
    auto s2 = split_task(data, 42);
    Rng rng(1);
    s2.train.y = inject_noise(s2.train.y, 0.1, rng);
    CHECK(s1.test == s2.test);
    CHECK_FALSE(s1.train.y == s2.train.y);
}
