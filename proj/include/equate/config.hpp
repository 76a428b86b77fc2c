#pragma once

// Run configuration: one JSON document for every pipeline stage.

#include <cstdint>
#include <string>

#include "equate/finetune.hpp"
#include "equate/metrics.hpp"
#include "equate/nn.hpp"
#include "equate/search.hpp"
#include "equate/surrogate.hpp"
#include "json.hpp"

namespace equate {

using nlohmann::json;

struct Paths {
    std::string corpus;
    std::string checkpoints;
    std::string quadruples;
    std::string reports;
};

struct RunConfig {
    nn::ModelConfig model;
    FitnessConfig fitness;
    finetune::FinetuneConfig finetune;
    search::SearchConfig search;
    surrogate::CorpusConfig corpus;
    surrogate::PretrainConfig pretrain;
    surrogate::SuggestConfig suggest;
    Paths paths;
    std::uint64_t master_seed = 0;

    void validate() const;
};

json to_json(const RunConfig& c);
/// Missing keys keep defaults. Errors name the offending field:
/// Error("InvalidConfig", "search.k_init ...").
RunConfig run_config_from_json(const json& j);
RunConfig load_run_config(const std::string& path);

/// EQD_SEED, when set to an unsigned integer, replaces master_seed.
void apply_seed_override(RunConfig& c);

std::string decode_mode_name(nn::DecodeMode m);
nn::DecodeMode decode_mode_from_name(const std::string& name);

}  // namespace equate
