#pragma once

// Latent search: start from the best quadruples, climb the evaluator's score
// in fused-embedding space, decode every visited point and refit constants.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "equate/data.hpp"
#include "equate/expr.hpp"
#include "equate/finetune.hpp"
#include "equate/nn.hpp"
#include "equate/refit.hpp"
#include "json.hpp"

namespace equate::search {

using nlohmann::json;

enum class LabelSource { Gold, Pseudo };
std::string label_source_name(LabelSource s);
LabelSource label_source_from_name(const std::string& name);

struct SearchConfig {
    int k_init = 10;
    int max_steps = 20;
    double eta = 0.05;
    int backoff_retries = 3;
    std::size_t max_candidates = 100;
    double stop_r2 = 0.99;
    LabelSource label_source = LabelSource::Gold;
    nn::DecodeMode decode_mode = nn::DecodeMode::Sample;
    double temperature = 1.0;
    /// Score the initial quadruples' own equations before decoding.
    bool include_initial_equations = true;

    void validate() const;
};

/// Indices of the k best quadruples: higher r, then lower complexity, then
/// lower index.
std::vector<std::size_t> select_initial(const std::vector<finetune::Quadruple>& qs, std::size_t k);

struct Trajectory {
    std::vector<ad::Tensor> points;  // E^0 .. E^n, each [1 x d]
    std::vector<double> scores;      // r-hat at each point
    bool truncated = false;          // stopped on a non-finite gradient
};

/// Gradient of r-hat with respect to E through the evaluator only.
std::vector<double> score_gradient(const nn::Model& model, const ad::Tensor& e, double* score = nullptr);

/// E^{s+1} = E^s + eta * d r-hat / dE^s. With backoff_retries > 0 the step
/// size of this trajectory is halved whenever a step would lower the score,
/// at most that many times per step; the last trial is then taken.
Trajectory ascend(const nn::Model& model, const ad::Tensor& e_f, double eta, int steps,
                  int backoff_retries = 0);

struct Candidate {
    int init = 0;  // position in the initial selection
    int step = 0;  // -1 for an initial quadruple's own equation
    expr::TokenSeq tokens;  // decoded skeleton, or the refit equation when valid
    std::optional<expr::ExprTree> tree;
    std::optional<double> r2_train;
    std::size_t complexity = 0;
    bool valid = false;
    std::string reason;  // why an invalid candidate was rejected
};

json candidate_to_json(const Candidate& c);

/// Refits every constant of `skeleton` on the training data and scores it.
Candidate score_skeleton(const expr::TokenSeq& skeleton, const DataTable& train, Rng& rng);

/// Decodes E, parses, refits and scores. Invalid decodes come back with
/// valid = false.
Candidate decode_and_refit(const nn::Model& model, const ad::Tensor& e, const DataTable& train,
                           const SearchConfig& cfg, Rng& rng);

struct DiscoverResult {
    Candidate best;
    std::vector<Candidate> log;
    bool stopped_early = false;
    std::size_t initial_points = 0;
};

/// Thrown by discover when no candidate is valid; carries the full log.
class NoValidCandidate : public Error {
public:
    explicit NoValidCandidate(std::vector<Candidate> log)
        : Error("NoValidCandidate", std::to_string(log.size()) + " candidates, none valid"),
          log_(std::move(log)) {}
    const std::vector<Candidate>& log() const { return log_; }

private:
    std::vector<Candidate> log_;
};

/// Embedding of an initial quadruple: E_f from (X_i, label source labels)
/// and the quadruple's equation.
ad::Tensor initial_embedding(const nn::Model& model, const finetune::Quadruple& q, LabelSource src);

/// Search over the training split. Decoding proceeds step by step across all
/// initial points so that a smaller step budget explores a prefix of the
/// same candidates. Throws NoValidCandidate.
DiscoverResult discover(const DataTable& train, const nn::Model& model,
                        const std::vector<finetune::Quadruple>& quadruples, const SearchConfig& cfg,
                        std::uint64_t seed);

void write_candidate_log(const std::string& path, const std::vector<Candidate>& log);

}  // namespace equate::search
