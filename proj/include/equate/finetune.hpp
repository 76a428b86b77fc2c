#pragma once

// Quadruple preparation and joint fine-tuning of the equation encoder,
// fusion, evaluator and last decoder layer.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "equate/data.hpp"
#include "equate/expr.hpp"
#include "equate/metrics.hpp"
#include "equate/nn.hpp"
#include "equate/surrogate.hpp"
#include "json.hpp"

namespace equate::finetune {

using nlohmann::json;

struct FinetuneConfig {
    double alpha = 0.05;
    double beta = 100.0;
    int epochs = 10;
    double lr = 1e-4;
    double weight_decay = 0.0;
    double clip_norm = 1.0;
    std::size_t batch_size = 16;
    std::size_t num_subsets = 100;
    std::size_t subset_rows = 200;
    /// Share of quadruple equations drawn from random_expr instead of the model.
    double random_mix_ratio = 0.1;
    int random_depth = 3;
    /// Empty means the default policy (data encoder + all but the last decoder layer).
    std::vector<std::string> freeze_patterns;
    bool unfreeze_all = false;

    void validate() const;
};

struct Quadruple {
    DataTable data;                 // X_i, y_i
    expr::TokenSeq eq;              // f~_i with fitted constants
    std::vector<double> y_hat;      // NaN on flagged rows
    double r = 0.0;
    std::size_t domain_errors = 0;

    bool operator==(const Quadruple& o) const;
};

/// n subsets of `rows` rows drawn with replacement. Throws EmptyData.
std::vector<DataTable> sample_subsets(const DataTable& data, std::size_t n, std::size_t rows, Rng& rng);

/// Evaluates `eq` on the subset and fills y_hat, domain_errors and r.
Quadruple make_quadruple(DataTable subset, expr::TokenSeq eq, const FitnessConfig& fit);

/// Recomputes r from the stored fields.
double recompute_fitness(const Quadruple& q, const FitnessConfig& fit);

/// One quadruple per subset; subset i uses its own random stream. Suggested
/// equations have their C placeholders fitted to the subset before scoring.
std::vector<Quadruple> build_quadruples(const std::vector<DataTable>& subsets, const nn::Model& model,
                                        const FitnessConfig& fit, const FinetuneConfig& cfg,
                                        const surrogate::SuggestConfig& suggest, std::uint64_t seed);

json quadruple_to_json(const Quadruple& q);
Quadruple quadruple_from_json(const json& j);
void write_quadruples(const std::string& path, const std::vector<Quadruple>& qs);
std::vector<Quadruple> read_quadruples(const std::string& path);

/// Rows of the subset where the equation is defined, with y_hat as labels.
/// Empty when every row is flagged.
DataTable pseudo_labelled(const Quadruple& q);

struct Losses {
    double total = 0.0;
    double est = 0.0;
    double rec = 0.0;
};

/// L = alpha * L_est + beta * L_rec for given component values.
inline double joint_loss(double est, double rec, const FinetuneConfig& cfg) {
    return cfg.alpha * est + cfg.beta * rec;
}

/// Training state that persists across steps: optimizer moments and data
/// embeddings cached while the data encoder is frozen.
class Trainer {
public:
    Trainer(nn::Model& model, const FinetuneConfig& cfg);

    /// Applies the configured freeze policy to the model.
    void apply_freeze_policy();

    /// Batch means of L_est (squared error of r-hat) and L_rec (summed token
    /// cross entropy per sequence), one optimizer step. Quadruples whose rows
    /// are all flagged are skipped. Throws NonFiniteLoss.
    Losses step(std::span<const Quadruple* const> batch);

private:
    ad::Tensor data_embedding(const Quadruple& q);

    nn::Model& model_;
    FinetuneConfig cfg_;
    ad::AdamW opt_;
    std::unordered_map<const Quadruple*, ad::Tensor> cache_;
};

struct FinetuneResult {
    std::vector<Losses> epochs;  // per-epoch means over batches
};

/// Full fine-tuning run: freeze policy, epochs x shuffled batches.
FinetuneResult run_finetune(nn::Model& model, const std::vector<Quadruple>& quadruples,
                            const FinetuneConfig& cfg, std::uint64_t seed,
                            const std::function<void(int, const Losses&)>& on_epoch = {});

}  // namespace equate::finetune
