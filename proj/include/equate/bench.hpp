#pragma once

// Evaluation harness: splitting, noise, the per-task pipeline under each
// ablation, and report emission.

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "equate/config.hpp"
#include "equate/data.hpp"
#include "equate/finetune.hpp"
#include "equate/nn.hpp"
#include "equate/search.hpp"
#include "equate/surrogate.hpp"
#include "json.hpp"

namespace equate::bench {

using nlohmann::json;

struct Split {
    DataTable train;
    DataTable test;
};

/// Seeded shuffle, then the first round(ratio * n) rows (at least one row
/// on each side) form the training split. Throws TooFewRows below 4 rows.
Split split(const DataTable& data, double ratio, Rng& rng);

/// Share of entries strictly above the threshold; undefined entries count
/// as unsolved. Returns 0 for an empty list.
double solved_proportion(std::span<const std::optional<double>> r2, double threshold = 0.99);

/// y + N(0, (sigma_rel * std(y))^2), population std.
std::vector<double> inject_noise(std::span<const double> y, double sigma_rel, Rng& rng);

enum class Ablation { Full, NoSearch, NoEqEncoder, RandomInit, UnfreezeAll };
std::string ablation_name(Ablation a);
Ablation ablation_from_name(const std::string& name);

// Pipeline stages shared by the CLI and the suite runner.

/// Corpus for the run's master seed.
std::vector<surrogate::PretrainExample> build_run_corpus(const RunConfig& cfg);
/// Fresh surrogate trained on the corpus; the loss curve and a corpus hash
/// go into `metadata`.
std::unique_ptr<nn::Model> pretrain_surrogate(const RunConfig& cfg,
                                              const std::vector<surrogate::PretrainExample>& corpus,
                                              json& metadata,
                                              const std::function<void(int, double)>& on_epoch = {});

// `seed` below is the stream root of one task.
Split split_task(const DataTable& data, std::uint64_t seed);
std::vector<finetune::Quadruple> prepare(const DataTable& train, const nn::Model& model, const RunConfig& cfg,
                                         std::uint64_t seed);
finetune::FinetuneResult finetune_model(nn::Model& model, const std::vector<finetune::Quadruple>& qs,
                                        const RunConfig& cfg, std::uint64_t seed,
                                        const std::function<void(int, const finetune::Losses&)>& on_epoch = {});
search::DiscoverResult discover_task(const DataTable& train, const nn::Model& model,
                                     const std::vector<finetune::Quadruple>& qs, const RunConfig& cfg,
                                     std::uint64_t seed);
/// R^2 of a discovered equation on held-out data; undefined when the test
/// rows leave its domain.
std::optional<double> test_r2(const expr::ExprTree& tree, const DataTable& test);

struct TaskSpec {
    std::string name;
    std::string truth;  // prefix text, empty when unknown
    std::string data;   // path relative to the suite directory
    int num_vars = 0;
    std::uint64_t seed = 0;
};

struct Suite {
    std::string name;
    std::string dir;
    std::size_t rows = 400;
    double input_low = -4.0;
    double input_high = 4.0;
    std::vector<TaskSpec> tasks;
};

/// Reads a suite manifest (suite.json). Errors: Io, InvalidSuite.
Suite load_suite(const std::string& manifest_path);
json suite_to_json(const Suite& s);
/// Regenerates a task's rows from its ground truth and seed.
DataTable generate_task_data(const Suite& s, const TaskSpec& t);
DataTable load_task_data(const Suite& s, const TaskSpec& t);

struct TaskResult {
    std::string name;
    bool ok = false;
    std::string error;
    std::string equation;  // prefix text
    std::string infix;
    double r2_train = 0.0;
    std::optional<double> r2_test;
    std::size_t complexity = 0;
    bool solved = false;
    std::size_t candidates = 0;
    bool stopped_early = false;
    double seconds = 0.0;  // wall clock; kept out of the JSON report
};

struct BenchReport {
    std::string suite;
    Ablation ablation = Ablation::Full;
    double noise = 0.0;
    std::uint64_t master_seed = 0;
    json config;
    std::size_t checkpoint_bytes = 0;
    std::vector<TaskResult> tasks;
    double solved_proportion = 0.0;
    std::optional<double> mean_r2;  // over tasks with a defined r2_test
    std::optional<double> mean_complexity;  // over tasks that produced an equation
    double seconds = 0.0;

    /// Recomputes the aggregates from the per-task rows.
    void aggregate(double threshold = 0.99);
};

/// Deterministic part of the report (no timings).
json report_to_json(const BenchReport& r);
json timing_to_json(const BenchReport& r);
/// Aligned text table with the columns R2>0.99, R2, Complexity.
std::string report_table(const BenchReport& r);
/// Side-by-side summary of several reports.
std::string summary_table(std::span<const BenchReport> reports);

struct SuiteOptions {
    double noise = 0.0;
    std::string log_dir;  // candidate logs, one file per task and ablation; empty = none
    /// Restricts the run to these task indices; empty = all.
    std::vector<std::size_t> only_tasks;
    bool verbose = false;
};

/// Runs every task under each requested ablation. Ablations that share a
/// fine-tuned model (full and no_search) share that work. A task that throws
/// is recorded with its error and the suite continues.
std::vector<BenchReport> run_suite(const Suite& suite, const RunConfig& cfg, std::span<const Ablation> ablations,
                                   const nn::Model& surrogate, const SuiteOptions& opts = {});

}  // namespace equate::bench
