#pragma once

// Desk-scale stand-in for a pretrained equation-discovery backbone: a
// synthetic (dataset, equation) corpus and an end-to-end trained data
// encoder + decoder.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "equate/data.hpp"
#include "equate/expr.hpp"
#include "equate/nn.hpp"

namespace equate::surrogate {

struct PretrainExample {
    DataTable data;
    expr::TokenSeq target;
    bool operator==(const PretrainExample&) const = default;
};

struct CorpusConfig {
    std::size_t size = 3000;
    int min_vars = 1;
    int max_vars = 3;
    int min_depth = 2;
    int max_depth = 4;
    std::size_t rows_per_example = 50;
    double input_low = -4.0;
    double input_high = 4.0;
    /// Relative operator sampling weights, keyed by operator name.
    std::vector<std::pair<std::string, double>> operator_weights = {
        {"add", 4.0}, {"sub", 2.0}, {"mul", 4.0}, {"div", 1.0}, {"pow2", 1.5}, {"sqrt", 0.5},
        {"sin", 1.5}, {"cos", 1.5}, {"exp", 0.7}, {"log", 0.5}, {"abs", 0.3}};
    double leaf_probability = 0.25;
    double variable_probability = 0.75;
    /// Share of constant leaves replaced by an out-of-vocabulary real whose
    /// target token is the placeholder C.
    double placeholder_probability = 0.2;
    double max_abs_label = 1e4;

    void validate() const;
};

expr::OperatorWeights operator_weights(const CorpusConfig& cfg);

/// Deterministic in (seed, cfg); every example has its own random stream.
std::vector<PretrainExample> build_corpus(std::uint64_t seed, const CorpusConfig& cfg);

/// One synthetic dataset for a given ground truth. Rows whose evaluation
/// hits a domain error are redrawn. Throws Error("UnusableEquation") after
/// 20 * rows + 100 failed draws.
DataTable sample_dataset(const expr::ExprTree& truth, int num_vars, std::size_t rows, double low,
                         double high, Rng& rng);

struct PretrainConfig {
    int epochs = 15;
    double lr = 1e-3;
    std::size_t batch_size = 16;
    double clip_norm = 1.0;
    double weight_decay = 0.0;
};

struct PretrainResult {
    std::vector<double> loss_curve;  // per-epoch mean of per-example losses
};

/// Teacher-forced training of data encoder + decoder. Throws
/// Error("NonFiniteLoss") with the epoch and example index.
PretrainResult pretrain(nn::Model& model, const std::vector<PretrainExample>& corpus,
                        const PretrainConfig& cfg, std::uint64_t seed,
                        const std::function<void(int, double)>& on_epoch = {});

struct SuggestConfig {
    nn::DecodeMode mode = nn::DecodeMode::Sample;
    double temperature = 1.0;
    int max_retries = 8;
    int fallback_depth = 3;
};

struct Suggestion {
    expr::TokenSeq tokens;
    bool from_model = false;
    int attempts = 0;
};

/// Decodes an equation for (X, y) from the data embedding. Invalid decodes
/// (including variables the data does not have) are retried, then replaced
/// by random_expr.
Suggestion suggest_equation(const nn::Model& model, const DataMatrix& x, std::span<const double> y,
                            const SuggestConfig& cfg, Rng& rng);
Suggestion suggest_from_embedding(const nn::Model& model, const ad::Tensor& e_n, int num_vars,
                                  const SuggestConfig& cfg, Rng& rng);

bool uses_only_variables(const expr::TokenSeq& tokens, int num_vars);

}  // namespace equate::surrogate
