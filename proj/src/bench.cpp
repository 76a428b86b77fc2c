#include "equate/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>

#include "equate/io.hpp"
#include "equate/surrogate.hpp"

namespace equate::bench {

Split split(const DataTable& data, double ratio, Rng& rng) {
    const std::size_t n = data.rows();
    if (n < 4) throw Error("TooFewRows", "splitting needs at least 4 rows, got " + std::to_string(n));
    if (!(ratio > 0.0 && ratio < 1.0)) throw Error("InvalidArgument", "split ratio must be in (0, 1)");
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[uniform_index(rng, i)]);
    auto n_train = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
    n_train = std::clamp<std::size_t>(n_train, 1, n - 1);
    Split s;
    s.train = data.select(std::span(idx).first(n_train));
    s.test = data.select(std::span(idx).subspan(n_train));
    return s;
}

double solved_proportion(std::span<const std::optional<double>> r2, double threshold) {
    if (r2.empty()) return 0.0;
    const auto hits = std::count_if(r2.begin(), r2.end(), [&](const auto& v) { return v && *v > threshold; });
    return static_cast<double>(hits) / static_cast<double>(r2.size());
}

std::vector<double> inject_noise(std::span<const double> y, double sigma_rel, Rng& rng) {
    if (sigma_rel < 0.0) throw Error("InvalidArgument", "noise level must be >= 0");
    std::vector<double> out(y.begin(), y.end());
    if (sigma_rel == 0.0 || y.empty()) return out;
    const double mean = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
    double var = 0.0;
    for (double v : y) var += (v - mean) * (v - mean);
    const double sd = sigma_rel * std::sqrt(var / static_cast<double>(y.size()));
    for (auto& v : out) v += sd * standard_normal(rng);
    return out;
}

namespace {

constexpr std::array<std::pair<Ablation, const char*>, 5> kAblations{{{Ablation::Full, "full"},
                                                                      {Ablation::NoSearch, "no_search"},
                                                                      {Ablation::NoEqEncoder, "no_eq_encoder"},
                                                                      {Ablation::RandomInit, "random_init"},
                                                                      {Ablation::UnfreezeAll, "unfreeze_all"}}};

}  // namespace

std::string ablation_name(Ablation a) {
    for (const auto& [k, n] : kAblations)
        if (k == a) return n;
    return "unknown";
}

Ablation ablation_from_name(const std::string& name) {
    for (const auto& [k, n] : kAblations)
        if (name == n) return k;
    throw Error("InvalidConfig",
                "unknown ablation '" + name + "' (full, no_search, no_eq_encoder, random_init, unfreeze_all)");
}

std::vector<surrogate::PretrainExample> build_run_corpus(const RunConfig& cfg) {
    return surrogate::build_corpus(stream_seed(cfg.master_seed, "corpus"), cfg.corpus);
}

std::unique_ptr<nn::Model> pretrain_surrogate(const RunConfig& cfg,
                                              const std::vector<surrogate::PretrainExample>& corpus,
                                              json& metadata, const std::function<void(int, double)>& on_epoch) {
    auto model = std::make_unique<nn::Model>(cfg.model, stream_seed(cfg.master_seed, "surrogate-init"));
    const auto res = surrogate::pretrain(*model, corpus, cfg.pretrain, stream_seed(cfg.master_seed, "pretrain"), on_epoch);
    std::uint64_t h = fnv1a(std::string_view("corpus"));
    for (const auto& ex : corpus) {
        h = fnv1a(expr::to_prefix_text(ex.target), h);
        h = fnv1a(std::span(reinterpret_cast<const std::uint8_t*>(ex.data.y.data()), ex.data.y.size() * sizeof(double)), h);
    }
    metadata = {{"stage", "pretrain"},
                {"epochs", cfg.pretrain.epochs},
                {"loss_curve", res.loss_curve},
                {"corpus_size", corpus.size()},
                {"corpus_hash", h},
                {"master_seed", cfg.master_seed}};
    return model;
}

Split split_task(const DataTable& data, std::uint64_t seed) {
    Rng rng = make_rng(seed, "split");
    return split(data, 0.75, rng);
}

std::vector<finetune::Quadruple> prepare(const DataTable& train, const nn::Model& model, const RunConfig& cfg,
                                         std::uint64_t seed) {
    Rng rng = make_rng(seed, "subsets");
    const auto subsets = finetune::sample_subsets(train, cfg.finetune.num_subsets, cfg.finetune.subset_rows, rng);
    return finetune::build_quadruples(subsets, model, cfg.fitness, cfg.finetune, cfg.suggest,
                                      stream_seed(seed, "quadruples"));
}

finetune::FinetuneResult finetune_model(nn::Model& model, const std::vector<finetune::Quadruple>& qs,
                                        const RunConfig& cfg, std::uint64_t seed,
                                        const std::function<void(int, const finetune::Losses&)>& on_epoch) {
    return finetune::run_finetune(model, qs, cfg.finetune, stream_seed(seed, "finetune"), on_epoch);
}

search::DiscoverResult discover_task(const DataTable& train, const nn::Model& model,
                                     const std::vector<finetune::Quadruple>& qs, const RunConfig& cfg,
                                     std::uint64_t seed) {
    return search::discover(train, model, qs, cfg.search, stream_seed(seed, "search"));
}

std::optional<double> test_r2(const expr::ExprTree& tree, const DataTable& test) {
    const auto eval = expr::evaluate_rows(tree, test.x);
    if (eval.error_count > 0) return std::nullopt;
    return r2_score(test.y, eval.values);
}

Suite load_suite(const std::string& manifest_path) {
    const json j = io::read_json(manifest_path);
    Suite s;
    s.dir = std::filesystem::path(manifest_path).parent_path().string();
    try {
        s.name = j.at("name").get<std::string>();
        s.rows = j.value("rows", s.rows);
        s.input_low = j.value("input_low", s.input_low);
        s.input_high = j.value("input_high", s.input_high);
        for (const auto& t : j.at("tasks")) {
            TaskSpec spec;
            spec.name = t.at("name").get<std::string>();
            spec.truth = t.value("truth", std::string());
            spec.data = t.at("data").get<std::string>();
            spec.num_vars = t.at("num_vars").get<int>();
            spec.seed = t.value("seed", std::uint64_t{0});
            if (spec.num_vars < 1 || spec.num_vars > expr::kMaxVariables)
                throw Error("InvalidSuite", spec.name + ": num_vars must be in [1, 10]");
            s.tasks.push_back(std::move(spec));
        }
    } catch (const json::exception& e) {
        throw Error("InvalidSuite", manifest_path + ": " + e.what());
    }
    return s;
}

json suite_to_json(const Suite& s) {
    json tasks = json::array();
    for (const auto& t : s.tasks)
        tasks.push_back({{"name", t.name}, {"truth", t.truth}, {"data", t.data}, {"num_vars", t.num_vars}, {"seed", t.seed}});
    return {{"name", s.name}, {"rows", s.rows}, {"input_low", s.input_low}, {"input_high", s.input_high}, {"tasks", tasks}};
}

DataTable generate_task_data(const Suite& s, const TaskSpec& t) {
    if (t.truth.empty()) throw Error("InvalidSuite", t.name + " has no ground truth to generate from");
    Rng rng = make_rng(t.seed, "toy-task");
    const auto tree = expr::parse_prefix(expr::parse_prefix_text(t.truth));
    return surrogate::sample_dataset(tree, t.num_vars, s.rows, s.input_low, s.input_high, rng);
}

DataTable load_task_data(const Suite& s, const TaskSpec& t) {
    DataTable d = io::read_table((std::filesystem::path(s.dir) / t.data).string());
    if (d.num_vars() != static_cast<std::size_t>(t.num_vars))
        throw Error("InvalidData", t.name + ": expected " + std::to_string(t.num_vars) + " features");
    return d;
}

void BenchReport::aggregate(double threshold) {
    std::vector<std::optional<double>> r2;
    double r2_sum = 0.0, c_sum = 0.0;
    std::size_t r2_n = 0, c_n = 0;
    for (auto& t : tasks) {
        t.solved = t.r2_test && *t.r2_test > threshold;
        r2.push_back(t.r2_test);
        if (t.r2_test) {
            r2_sum += *t.r2_test;
            ++r2_n;
        }
        if (t.ok) {
            c_sum += static_cast<double>(t.complexity);
            ++c_n;
        }
    }
    solved_proportion = bench::solved_proportion(r2, threshold);
    mean_r2 = r2_n ? std::optional(r2_sum / static_cast<double>(r2_n)) : std::nullopt;
    mean_complexity = c_n ? std::optional(c_sum / static_cast<double>(c_n)) : std::nullopt;
}

namespace {

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

json report_to_json(const BenchReport& r) {
    json tasks = json::array();
    for (const auto& t : r.tasks) {
        json row{{"name", t.name},         {"ok", t.ok},
                 {"equation", t.equation}, {"infix", t.infix},
                 {"r2_train", t.r2_train}, {"r2_test", opt(t.r2_test)},
                 {"complexity", t.complexity}, {"solved", t.solved},
                 {"candidates", t.candidates}, {"stopped_early", t.stopped_early}};
        if (!t.ok) row["error"] = t.error;
        tasks.push_back(std::move(row));
    }
    return {{"suite", r.suite},
            {"ablation", ablation_name(r.ablation)},
            {"noise", r.noise},
            {"master_seed", r.master_seed},
            {"checkpoint_bytes", r.checkpoint_bytes},
            {"config", r.config},
            {"tasks", tasks},
            {"aggregates",
             {{"solved_proportion", r.solved_proportion},
              {"mean_r2", opt(r.mean_r2)},
              {"mean_complexity", opt(r.mean_complexity)},
              {"tasks", r.tasks.size()}}}};
}

json timing_to_json(const BenchReport& r) {
    json tasks = json::object();
    for (const auto& t : r.tasks) tasks[t.name] = t.seconds;
    return {{"ablation", ablation_name(r.ablation)}, {"total_seconds", r.seconds}, {"tasks", tasks}};
}

namespace {

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

std::string pad(std::string s, std::size_t w) {
    if (s.size() < w) s.append(w - s.size(), ' ');
    return s;
}

}  // namespace

std::string report_table(const BenchReport& r) {
    std::size_t w = 8;
    for (const auto& t : r.tasks) w = std::max(w, t.name.size() + 2);
    std::ostringstream out;
    out << "suite " << r.suite << ", ablation " << ablation_name(r.ablation) << ", noise " << r.noise << "\n";
    out << pad("task", w) << pad("R2>0.99", 9) << pad("R2", 12) << pad("Complexity", 12) << "equation\n";
    for (const auto& t : r.tasks) {
        out << pad(t.name, w) << pad(t.solved ? "yes" : "no", 9)
            << pad(t.r2_test ? fmt("%.6f", *t.r2_test) : "-", 12)
            << pad(t.ok ? std::to_string(t.complexity) : "-", 12) << (t.ok ? t.infix : "error: " + t.error) << "\n";
    }
    out << pad("all", w) << pad(fmt("%.3f", r.solved_proportion), 9)
        << pad(r.mean_r2 ? fmt("%.6f", *r.mean_r2) : "-", 12)
        << pad(r.mean_complexity ? fmt("%.2f", *r.mean_complexity) : "-", 12) << "\n";
    return out.str();
}

std::string summary_table(std::span<const BenchReport> reports) {
    std::ostringstream out;
    out << pad("ablation", 16) << pad("noise", 8) << pad("R2>0.99", 9) << pad("R2", 12) << "Complexity\n";
    for (const auto& r : reports)
        out << pad(ablation_name(r.ablation), 16) << pad(fmt("%g", r.noise), 8) << pad(fmt("%.3f", r.solved_proportion), 9)
            << pad(r.mean_r2 ? fmt("%.6f", *r.mean_r2) : "-", 12)
            << (r.mean_complexity ? fmt("%.2f", *r.mean_complexity) : "-") << "\n";
    return out.str();
}

namespace {

// Ablations with the same model preparation share one fine-tuned model.
struct Group {
    bool random_init = false;
    bool unfreeze = false;
    bool eq_encoder = true;
    auto key() const { return std::tuple(random_init, unfreeze, eq_encoder); }
};

Group group_of(Ablation a) {
    Group g;
    g.random_init = a == Ablation::RandomInit;
    g.unfreeze = a == Ablation::RandomInit || a == Ablation::UnfreezeAll;
    g.eq_encoder = a != Ablation::NoEqEncoder;
    return g;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

std::vector<BenchReport> run_suite(const Suite& suite, const RunConfig& cfg, std::span<const Ablation> ablations,
                                   const nn::Model& surrogate, const SuiteOptions& opts) {
    cfg.validate();
    const auto suite_start = std::chrono::steady_clock::now();
    std::vector<BenchReport> reports(ablations.size());
    const std::size_t bytes = nn::checkpoint_bytes(surrogate, 0).size();
    for (std::size_t a = 0; a < ablations.size(); ++a) {
        reports[a].suite = suite.name;
        reports[a].ablation = ablations[a];
        reports[a].noise = opts.noise;
        reports[a].master_seed = cfg.master_seed;
        reports[a].config = to_json(cfg);
        reports[a].checkpoint_bytes = bytes;
    }

    std::vector<std::size_t> task_ids = opts.only_tasks;
    if (task_ids.empty()) {
        task_ids.resize(suite.tasks.size());
        std::iota(task_ids.begin(), task_ids.end(), 0);
    }

    for (std::size_t ti : task_ids) {
        const TaskSpec& spec = suite.tasks.at(ti);
        const std::uint64_t seed = stream_seed(cfg.master_seed, "task", fnv1a(spec.name));
        std::map<std::tuple<bool, bool, bool>, std::vector<std::size_t>> groups;
        for (std::size_t a = 0; a < ablations.size(); ++a) groups[group_of(ablations[a]).key()].push_back(a);

        std::optional<Split> sp;
        std::string setup_error;
        try {
            sp = split_task(load_task_data(suite, spec), seed);
            if (opts.noise > 0.0) {
                Rng rng = make_rng(seed, "noise");
                sp->train.y = inject_noise(sp->train.y, opts.noise, rng);
            }
        } catch (const std::exception& e) {
            setup_error = e.what();
        }

        std::map<bool, std::vector<finetune::Quadruple>> quad_cache;  // keyed by random_init
        for (const auto& [key, members] : groups) {
            const auto t0 = std::chrono::steady_clock::now();
            const Group g = group_of(ablations[members.front()]);
            std::unique_ptr<nn::Model> model;
            std::string error = setup_error;
            if (error.empty()) {
                try {
                    model = g.random_init
                                ? std::make_unique<nn::Model>(cfg.model, stream_seed(seed, "random-init"))
                                : surrogate.clone();
                    model->set_equation_encoder_enabled(g.eq_encoder);
                    if (!quad_cache.count(g.random_init))
                        quad_cache[g.random_init] = prepare(sp->train, *model, cfg, seed);
                    RunConfig run = cfg;
                    run.finetune.unfreeze_all = cfg.finetune.unfreeze_all || g.unfreeze;
                    finetune_model(*model, quad_cache[g.random_init], run, seed);
                } catch (const std::exception& e) {
                    error = e.what();
                }
            }
            const double shared = seconds_since(t0);
            for (std::size_t a : members) {
                const auto t1 = std::chrono::steady_clock::now();
                TaskResult row;
                row.name = spec.name;
                row.error = error;
                if (error.empty()) {
                    RunConfig run = cfg;
                    if (ablations[a] == Ablation::NoSearch) run.search.max_steps = 0;
                    try {
                        const auto res = discover_task(sp->train, *model, quad_cache[g.random_init], run, seed);
                        row.ok = true;
                        row.equation = expr::to_prefix_text(res.best.tokens);
                        row.infix = expr::render_infix(*res.best.tree);
                        row.r2_train = *res.best.r2_train;
                        row.r2_test = test_r2(*res.best.tree, sp->test);
                        row.complexity = res.best.complexity;
                        row.candidates = res.log.size();
                        row.stopped_early = res.stopped_early;
                        if (!opts.log_dir.empty())
                            search::write_candidate_log(
                                (std::filesystem::path(opts.log_dir) / (ablation_name(ablations[a]) + "_" + spec.name + ".jsonl")).string(),
                                res.log);
                    } catch (const search::NoValidCandidate& e) {
                        row.error = e.what();
                        row.candidates = e.log().size();
                    } catch (const std::exception& e) {
                        row.error = e.what();
                    }
                }
                row.seconds = shared + seconds_since(t1);
                if (opts.verbose) {
                    std::cerr << "[" << ablation_name(ablations[a]) << "] " << spec.name << ": "
                              << (row.ok ? row.infix + "  r2_test=" + (row.r2_test ? fmt("%.6f", *row.r2_test) : "undefined")
                                         : "error: " + row.error)
                              << "  (" << fmt("%.1f", row.seconds) << " s)\n";
                }
                reports[a].tasks.push_back(std::move(row));
            }
        }
    }
    for (auto& r : reports) {
        r.aggregate();
        r.seconds = seconds_since(suite_start);
    }
    return reports;
}

}  // namespace equate::bench
