#include "equate/config.hpp"

#include <cstdlib>
#include <fstream>

namespace equate {

std::string decode_mode_name(nn::DecodeMode m) { return m == nn::DecodeMode::Greedy ? "greedy" : "sample"; }

nn::DecodeMode decode_mode_from_name(const std::string& name) {
    if (name == "greedy") return nn::DecodeMode::Greedy;
    if (name == "sample") return nn::DecodeMode::Sample;
    throw Error("InvalidConfig", "decode mode must be greedy or sample, got " + name);
}

void RunConfig::validate() const {
    model.validate();
    finetune.validate();
    search.validate();
    corpus.validate();
    if (fitness.lambda < 0.0) throw Error("InvalidConfig", "fitness.lambda must be >= 0");
    if (fitness.max_len < 1) throw Error("InvalidConfig", "fitness.max_len must be >= 1");
    if (pretrain.epochs < 0) throw Error("InvalidConfig", "pretrain.epochs must be >= 0");
    if (pretrain.batch_size < 1) throw Error("InvalidConfig", "pretrain.batch_size must be >= 1");
    if (!(pretrain.lr > 0.0)) throw Error("InvalidConfig", "pretrain.lr must be > 0");
    if (suggest.max_retries < 0) throw Error("InvalidConfig", "suggest.max_retries must be >= 0");
    if (!(suggest.temperature > 0.0)) throw Error("InvalidConfig", "suggest.temperature must be > 0");
    if (suggest.fallback_depth < 1) throw Error("InvalidConfig", "suggest.fallback_depth must be >= 1");
}

json to_json(const RunConfig& c) {
    json weights = json::object();
    for (const auto& [name, w] : c.corpus.operator_weights) weights[name] = w;
    return {
        {"model", nn::to_json(c.model)},
        {"fitness",
         {{"lambda", c.fitness.lambda},
          {"max_len", c.fitness.max_len},
          {"mode", fitness_mode_name(c.fitness.mode)},
          {"floor", c.fitness.floor}}},
        {"finetune",
         {{"alpha", c.finetune.alpha},
          {"beta", c.finetune.beta},
          {"epochs", c.finetune.epochs},
          {"lr", c.finetune.lr},
          {"weight_decay", c.finetune.weight_decay},
          {"clip_norm", c.finetune.clip_norm},
          {"batch_size", c.finetune.batch_size},
          {"num_subsets", c.finetune.num_subsets},
          {"subset_rows", c.finetune.subset_rows},
          {"random_mix_ratio", c.finetune.random_mix_ratio},
          {"random_depth", c.finetune.random_depth},
          {"freeze_patterns", c.finetune.freeze_patterns},
          {"unfreeze_all", c.finetune.unfreeze_all}}},
        {"search",
         {{"k_init", c.search.k_init},
          {"max_steps", c.search.max_steps},
          {"eta", c.search.eta},
          {"backoff_retries", c.search.backoff_retries},
          {"max_candidates", c.search.max_candidates},
          {"stop_r2", c.search.stop_r2},
          {"label_source", search::label_source_name(c.search.label_source)},
          {"decode_mode", decode_mode_name(c.search.decode_mode)},
          {"temperature", c.search.temperature},
          {"include_initial_equations", c.search.include_initial_equations}}},
        {"corpus",
         {{"size", c.corpus.size},
          {"min_vars", c.corpus.min_vars},
          {"max_vars", c.corpus.max_vars},
          {"min_depth", c.corpus.min_depth},
          {"max_depth", c.corpus.max_depth},
          {"rows_per_example", c.corpus.rows_per_example},
          {"input_low", c.corpus.input_low},
          {"input_high", c.corpus.input_high},
          {"operator_weights", weights},
          {"leaf_probability", c.corpus.leaf_probability},
          {"variable_probability", c.corpus.variable_probability},
          {"placeholder_probability", c.corpus.placeholder_probability},
          {"max_abs_label", c.corpus.max_abs_label}}},
        {"pretrain",
         {{"epochs", c.pretrain.epochs},
          {"lr", c.pretrain.lr},
          {"batch_size", c.pretrain.batch_size},
          {"clip_norm", c.pretrain.clip_norm},
          {"weight_decay", c.pretrain.weight_decay}}},
        {"suggest",
         {{"mode", decode_mode_name(c.suggest.mode)},
          {"temperature", c.suggest.temperature},
          {"max_retries", c.suggest.max_retries},
          {"fallback_depth", c.suggest.fallback_depth}}},
        {"paths",
         {{"corpus", c.paths.corpus},
          {"checkpoints", c.paths.checkpoints},
          {"quadruples", c.paths.quadruples},
          {"reports", c.paths.reports}}},
        {"master_seed", c.master_seed},
    };
}

namespace {

// Reads the fields of one section, rejecting keys the defaults don't have.
class Section {
public:
    Section(const json& root, const json& defaults, std::string name)
        : j_(root.contains(name) ? root.at(name) : json::object()), name_(std::move(name)) {
        if (!j_.is_object()) throw Error("InvalidConfig", name_ + " must be an object");
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!defaults.at(name_).contains(it.key()))
                throw Error("InvalidConfig", name_ + "." + it.key() + " is not a known field");
    }

    template <class T>
    void get(const char* key, T& field) const {
        if (!j_.contains(key)) return;
        try {
            j_.at(key).get_to(field);
        } catch (const json::exception&) {
            throw Error("InvalidConfig", name_ + "." + key + " has the wrong type");
        }
    }

    template <class F>
    void get_named(const char* key, F&& assign) const {
        std::string s;
        get(key, s);
        if (!j_.contains(key)) return;
        try {
            assign(s);
        } catch (const Error&) {
            throw Error("InvalidConfig", name_ + "." + key + " has an unknown value '" + s + "'");
        }
    }

    const json& raw() const { return j_; }

private:
    json j_;
    std::string name_;
};

}  // namespace

RunConfig run_config_from_json(const json& j) {
    if (!j.is_object()) throw Error("InvalidConfig", "config must be a JSON object");
    RunConfig c;
    const json defaults = to_json(c);
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!defaults.contains(it.key())) throw Error("InvalidConfig", it.key() + " is not a known field");

    if (j.contains("model")) c.model = nn::model_config_from_json(j.at("model"));

    Section f(j, defaults, "fitness");
    f.get("lambda", c.fitness.lambda);
    f.get("max_len", c.fitness.max_len);
    f.get("floor", c.fitness.floor);
    f.get_named("mode", [&](const std::string& s) { c.fitness.mode = fitness_mode_from_name(s); });

    Section ft(j, defaults, "finetune");
    ft.get("alpha", c.finetune.alpha);
    ft.get("beta", c.finetune.beta);
    ft.get("epochs", c.finetune.epochs);
    ft.get("lr", c.finetune.lr);
    ft.get("weight_decay", c.finetune.weight_decay);
    ft.get("clip_norm", c.finetune.clip_norm);
    ft.get("batch_size", c.finetune.batch_size);
    ft.get("num_subsets", c.finetune.num_subsets);
    ft.get("subset_rows", c.finetune.subset_rows);
    ft.get("random_mix_ratio", c.finetune.random_mix_ratio);
    ft.get("random_depth", c.finetune.random_depth);
    ft.get("freeze_patterns", c.finetune.freeze_patterns);
    ft.get("unfreeze_all", c.finetune.unfreeze_all);

    Section s(j, defaults, "search");
    s.get("k_init", c.search.k_init);
    s.get("max_steps", c.search.max_steps);
    s.get("eta", c.search.eta);
    s.get("backoff_retries", c.search.backoff_retries);
    s.get("max_candidates", c.search.max_candidates);
    s.get("stop_r2", c.search.stop_r2);
    s.get_named("label_source", [&](const std::string& v) { c.search.label_source = search::label_source_from_name(v); });
    s.get_named("decode_mode", [&](const std::string& v) { c.search.decode_mode = decode_mode_from_name(v); });
    s.get("temperature", c.search.temperature);
    s.get("include_initial_equations", c.search.include_initial_equations);

    Section co(j, defaults, "corpus");
    co.get("size", c.corpus.size);
    co.get("min_vars", c.corpus.min_vars);
    co.get("max_vars", c.corpus.max_vars);
    co.get("min_depth", c.corpus.min_depth);
    co.get("max_depth", c.corpus.max_depth);
    co.get("rows_per_example", c.corpus.rows_per_example);
    co.get("input_low", c.corpus.input_low);
    co.get("input_high", c.corpus.input_high);
    if (co.raw().contains("operator_weights")) {
        const json& w = co.raw().at("operator_weights");
        if (!w.is_object()) throw Error("InvalidConfig", "corpus.operator_weights must be an object");
        c.corpus.operator_weights.clear();
        for (auto it = w.begin(); it != w.end(); ++it) {
            if (!it.value().is_number())
                throw Error("InvalidConfig", "corpus.operator_weights." + it.key() + " has the wrong type");
            c.corpus.operator_weights.emplace_back(it.key(), it.value().get<double>());
        }
    }
    co.get("leaf_probability", c.corpus.leaf_probability);
    co.get("variable_probability", c.corpus.variable_probability);
    co.get("placeholder_probability", c.corpus.placeholder_probability);
    co.get("max_abs_label", c.corpus.max_abs_label);

    Section p(j, defaults, "pretrain");
    p.get("epochs", c.pretrain.epochs);
    p.get("lr", c.pretrain.lr);
    p.get("batch_size", c.pretrain.batch_size);
    p.get("clip_norm", c.pretrain.clip_norm);
    p.get("weight_decay", c.pretrain.weight_decay);

    Section sg(j, defaults, "suggest");
    sg.get_named("mode", [&](const std::string& v) { c.suggest.mode = decode_mode_from_name(v); });
    sg.get("temperature", c.suggest.temperature);
    sg.get("max_retries", c.suggest.max_retries);
    sg.get("fallback_depth", c.suggest.fallback_depth);

    Section pa(j, defaults, "paths");
    pa.get("corpus", c.paths.corpus);
    pa.get("checkpoints", c.paths.checkpoints);
    pa.get("quadruples", c.paths.quadruples);
    pa.get("reports", c.paths.reports);

    if (j.contains("master_seed")) {
        if (!j.at("master_seed").is_number_unsigned())
            throw Error("InvalidConfig", "master_seed must be an unsigned integer");
        c.master_seed = j.at("master_seed").get<std::uint64_t>();
    }
    c.validate();
    return c;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("InvalidConfig", "cannot open config file " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw Error("InvalidConfig", path + ": " + e.what());
    }
    return run_config_from_json(j);
}

void apply_seed_override(RunConfig& c) {
    const char* v = std::getenv("EQD_SEED");
    if (!v || !*v) return;
    char* end = nullptr;
    const unsigned long long s = std::strtoull(v, &end, 10);
    if (*end != '\0' || v[0] == '-') throw Error("InvalidConfig", "EQD_SEED must be an unsigned integer");
    c.master_seed = s;
}

}  // namespace equate
