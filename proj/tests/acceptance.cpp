// Acceptance runner: one PASS/FAIL line per criterion.
//
//   acceptance [criteria...] [--config FILE] [--work DIR] [--eqd FILE]
//
// Criteria are numbered 1-10; with none given, all run. The pretrained
// surrogate and suite runs are cached in the work directory, keyed by a hash
// of the pipeline binary, the run config and the surrogate, so separate
// invocations share deterministic work instead of repeating it. Suite runs
// are keyed by the eqd binary, which links the same pipeline code.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "equate/bench.hpp"
#include "equate/config.hpp"
#include "equate/expr.hpp"
#include "equate/finetune.hpp"
#include "equate/io.hpp"
#include "equate/metrics.hpp"
#include "equate/nn.hpp"
#include "equate/search.hpp"
#include "gradcheck.hpp"

#ifndef EQUATE_SOURCE_DIR
#define EQUATE_SOURCE_DIR "."
#endif
#ifndef EQD_BINARY
#define EQD_BINARY "eqd"
#endif

namespace fs = std::filesystem;
using namespace equate;
using ad::Tensor;
using nlohmann::json;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Env {
    std::string config_path;
    fs::path work;
    std::string eqd;
    RunConfig cfg;
    std::uint64_t pipeline_hash = 0;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

std::string hex(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw Error("Io", "cannot read " + p.string());
    return std::string(std::istreambuf_iterator<char>(in), {});
}

// ---------------------------------------------------------------- caching

fs::path surrogate_path(const Env& env) {
    json key = to_json(env.cfg);
    const std::string k = key["model"].dump() + key["corpus"].dump() + key["pretrain"].dump() +
                          std::to_string(env.cfg.master_seed);
    return env.work / ("surrogate_" + hex(fnv1a(k)) + ".eqck");
}

std::unique_ptr<nn::Model> load_or_pretrain(const Env& env) {
    const fs::path path = surrogate_path(env);
    if (fs::exists(path)) return nn::load_checkpoint(path.string()).model;
    std::cout << "pretraining surrogate -> " << path.string() << std::endl;
    const auto t0 = std::chrono::steady_clock::now();
    const auto corpus = bench::build_run_corpus(env.cfg);
    json meta;
    auto model = bench::pretrain_surrogate(env.cfg, corpus, meta, [&](int epoch, double loss) {
        std::cout << "  epoch " << epoch + 1 << "  loss " << fmt("%.6f", loss) << std::endl;
    });
    meta["seconds"] = seconds_since(t0);
    fs::create_directories(env.work);
    const fs::path tmp = path.string() + ".tmp";
    nn::save_checkpoint(tmp.string(), *model, env.cfg.master_seed, meta);
    fs::rename(tmp, path);
    return model;
}

struct SuiteRun {
    std::map<std::string, json> reports;  // by ablation name
    double seconds = 0.0;
    fs::path logs;
};

// Runs (or reloads) the toy suite under `ablations` with the given config.
SuiteRun suite_run(const Env& env, const RunConfig& cfg, const nn::Model& surrogate,
                   const std::vector<bench::Ablation>& ablations, double noise) {
    std::string k = hex(env.pipeline_hash) + to_json(cfg).dump() + hex(surrogate.params().hash()) + fmt("%.17g", noise);
    for (auto a : ablations) k += "," + bench::ablation_name(a);
    const fs::path dir = env.work / "runs" / hex(fnv1a(k));
    SuiteRun run;
    run.logs = dir / "logs";
    const fs::path done = dir / "done.json";
    if (fs::exists(done)) {
        const json d = io::read_json(done.string());
        run.seconds = d.at("seconds").get<double>();
        for (auto a : ablations) {
            const std::string n = bench::ablation_name(a);
            run.reports[n] = io::read_json((dir / ("report_" + n + ".json")).string());
        }
        return run;
    }
    fs::remove_all(dir);
    const auto suite = bench::load_suite(std::string(EQUATE_SOURCE_DIR) + "/data/toy_suite/suite.json");
    bench::SuiteOptions opts;
    opts.noise = noise;
    opts.log_dir = run.logs.string();
    const auto t0 = std::chrono::steady_clock::now();
    const auto reports = bench::run_suite(suite, cfg, ablations, surrogate, opts);
    run.seconds = seconds_since(t0);
    for (const auto& r : reports) {
        const std::string n = bench::ablation_name(r.ablation);
        run.reports[n] = bench::report_to_json(r);
        io::write_json((dir / ("report_" + n + ".json")).string(), run.reports[n]);
        io::write_text((dir / ("report_" + n + ".txt")).string(), bench::report_table(r));
    }
    io::write_json(done.string(), json{{"seconds", run.seconds}});
    return run;
}

double solved(const json& report) { return report.at("aggregates").at("solved_proportion").get<double>(); }

std::vector<std::string> task_names(const json& report) {
    std::vector<std::string> names;
    for (const auto& t : report.at("tasks")) names.push_back(t.at("name").get<std::string>());
    return names;
}

double mean(const std::vector<double>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// Standard error of the mean (sample standard deviation / sqrt(n)).
double std_error(const std::vector<double>& v) {
    const double m = mean(v);
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return std::sqrt(ss / static_cast<double>(v.size() - 1)) / std::sqrt(static_cast<double>(v.size()));
}

// ---------------------------------------------------------------- criteria

// Weighted sum so every output element gets a distinct upstream gradient.
Tensor probe(const Tensor& t, const Tensor& w) { return ad::sum(ad::mul(t, w)); }

Outcome gradients(const Env&) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(2024);
    double worst = 0.0;
    std::string where;
    int checks = 0;
    auto expect = [&](const std::string& name, std::vector<Tensor> in, std::function<Tensor()> f) {
        const auto r = gradcheck::check(std::move(in), f);
        ++checks;
        if (r.worst >= worst) {
            worst = r.worst;
            where = name + " " + r.where;
        }
    };
    using gradcheck::random_tensor;
    Tensor a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {4, 5}), c = random_tensor(rng, {3, 4});
    Tensor w35 = random_tensor(rng, {3, 5}), w34 = random_tensor(rng, {3, 4});
    Tensor pos = random_tensor(rng, {3, 4}, 0.5, 2.0);
    Tensor row = random_tensor(rng, {1, 4});
    Tensor away = random_tensor(rng, {3, 4}, 0.2, 1.0);
    for (std::size_t i = 0; i < away.size(); i += 2) away.mutable_values()[i] *= -1.0;
    expect("matmul", {a, b}, [&] { return probe(ad::matmul(a, b), w35); });
    expect("add", {a, c}, [&] { return probe(ad::add(a, c), w34); });
    expect("sub", {a, c}, [&] { return probe(ad::sub(a, c), w34); });
    expect("mul", {a, c}, [&] { return probe(ad::mul(a, c), w34); });
    expect("scale", {a}, [&] { return probe(ad::scale(a, -1.7), w34); });
    expect("add_row", {a, row}, [&] { return probe(ad::add_row(a, row), w34); });
    expect("tanh", {a}, [&] { return probe(ad::tanh(a), w34); });
    expect("relu", {away}, [&] { return probe(ad::relu(away), w34); });
    expect("sigmoid", {a}, [&] { return probe(ad::sigmoid(a), w34); });
    expect("exp", {a}, [&] { return probe(ad::exp(a), w34); });
    expect("log", {pos}, [&] { return probe(ad::log(pos), w34); });
    expect("softmax rows", {a}, [&] { return probe(ad::softmax(a, 1), w34); });
    expect("softmax cols", {a}, [&] { return probe(ad::softmax(a, 0), w34); });
    expect("log_softmax_rows", {a}, [&] { return probe(ad::log_softmax_rows(a), w34); });
    const std::vector<int> tg{1, 3, 0};
    expect("cross_entropy_from_logits", {a}, [&] { return ad::cross_entropy_from_logits(a, tg); });
    Tensor w64 = random_tensor(rng, {6, 4}), w38 = random_tensor(rng, {3, 8});
    expect("concat rows", {a, c}, [&] {
        std::vector<Tensor> parts{a, c};
        return probe(ad::concat(parts, 0), w64);
    });
    expect("concat cols", {a, c}, [&] {
        std::vector<Tensor> parts{a, c};
        return probe(ad::concat(parts, 1), w38);
    });
    Tensor w22 = random_tensor(rng, {2, 2}), w43 = random_tensor(rng, {4, 3}), w26 = random_tensor(rng, {2, 6});
    Tensor w14 = random_tensor(rng, {1, 4});
    expect("slice", {a}, [&] { return probe(ad::slice(ad::slice(a, 0, 1, 2), 1, 2, 2), w22); });
    expect("transpose", {a}, [&] { return probe(ad::transpose(a), w43); });
    expect("reshape", {a}, [&] { return probe(ad::reshape(a, {2, 6}), w26); });
    expect("sum", {a}, [&] { return ad::sum(ad::mul(a, a)); });
    expect("mean_rows", {a}, [&] { return probe(ad::mean_rows(a), w14); });
    expect("mse", {a}, [&] { return ad::mse(a, c); });
    const std::vector<int> ids{2, 0, 2};
    expect("gather_rows", {a}, [&] { return probe(ad::gather_rows(a, ids), w34); });
    Tensor g = random_tensor(rng, {4}), be = random_tensor(rng, {4});
    expect("layer_norm", {a, g, be}, [&] { return probe(ad::layer_norm(a, g, be), w34); });

    // Whole fused graph: data encoder, equation encoder, attentive fusion,
    // evaluator and the decoder's reconstruction loss, w.r.t. every parameter.
    nn::ModelConfig mc;
    mc.d_model = 8;
    mc.n_heads = 2;
    mc.n_encoder_layers = 1;
    mc.n_decoder_layers = 2;
    mc.ffn_hidden = 12;
    mc.evaluator_hidden = 6;
    mc.value_dim = 3;
    mc.token_dim = 5;
    mc.lstm_hidden = 6;
    mc.memory_slots = 2;
    mc.max_len = 24;
    for (bool multi : {true, false}) {
        mc.multi_slot = multi;
        nn::Model m(mc, 31);
        Rng init(32);
        for (auto& p : m.params().params())
            for (auto& v : p.tensor.mutable_values()) v = uniform(init, -0.4, 0.4);
        DataTable t;
        t.x = DataMatrix(5, 2);
        for (auto& v : t.x.values) v = uniform(rng, -4.0, 4.0);
        for (std::size_t r = 0; r < 5; ++r) t.y.push_back(t.x(r, 0) * 1.5 - std::sin(t.x(r, 1)));
        const auto eq = expr::parse_prefix_text("add x_0 mul C sin x_1");
        std::vector<Tensor> inputs;
        for (auto& p : m.params().params()) inputs.push_back(p.tensor);
        expect(std::string("fused graph") + (multi ? " (multi-slot)" : " (single-slot)"), inputs, [&] {
            Tensor en = m.encode_data(t.x, t.y);
            nn::Fusion f = m.attentive_fuse(en, m.encode_equation_states(eq));
            Tensor err = ad::sub(m.evaluate_fitness(f.fused), Tensor::from({1, 1}, {0.7}));
            Tensor l_est = ad::sum(ad::mul(err, err));
            return ad::add(ad::scale(l_est, 0.05), ad::scale(m.reconstruction_loss(f.fused, eq), 1.0));
        });
    }
    const double secs = seconds_since(t0);
    return {worst < 1e-4 && secs < 60.0, std::to_string(checks) + " checks, worst rel err " + fmt("%.2e", worst) +
                                             " (" + where + "), " + fmt("%.1f", secs) + " s"};
}

Outcome expressions(const Env&) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(77);
    auto weights = expr::OperatorWeights::uniform();
    weights.placeholder_probability = 0.1;
    std::size_t roundtrip_fail = 0, disagree = 0, checked = 0;
    for (int i = 0; i < 10000; ++i) {
        const int vars = 1 + static_cast<int>(uniform_index(rng, 5));
        const auto tree = expr::random_expr(rng, 1 + static_cast<int>(uniform_index(rng, 6)), vars, weights);
        const auto tokens = expr::serialize_prefix(tree);
        const auto text = expr::to_prefix_text(tokens);
        const auto back = expr::parse_prefix_text(text);
        if (!(back == tokens) || !(expr::parse_prefix(back) == tree) || expr::to_prefix_text(back) != text)
            ++roundtrip_fail;

        // Validity scan against the parser on the sequence and on a mutation
        // of it (truncation, extra token, or a random token swap).
        std::vector<expr::TokenSeq> probes{tokens};
        expr::TokenSeq mutated = tokens;
        switch (uniform_index(rng, 3)) {
        case 0: mutated.resize(uniform_index(rng, tokens.size() + 1)); break;
        case 1: mutated.push_back(expr::Token::variable(0)); break;
        default: {
            const std::size_t at = uniform_index(rng, mutated.size());
            const std::size_t op = uniform_index(rng, expr::kNumOps + 1);
            mutated[at] = op == expr::kNumOps ? expr::Token::constant(2.5)
                                              : expr::Token::op(static_cast<expr::Op>(op));
        }
        }
        probes.push_back(mutated);
        for (const auto& p : probes) {
            bool parsed = true;
            try {
                expr::parse_prefix(p);
            } catch (const expr::MalformedPrefix&) {
                parsed = false;
            }
            ++checked;
            if (parsed != expr::is_valid_prefix(p)) ++disagree;
        }
    }
    const double secs = seconds_since(t0);
    return {roundtrip_fail == 0 && disagree == 0 && secs < 30.0,
            "10000 expressions, " + std::to_string(roundtrip_fail) + " round-trip failures, " +
                std::to_string(disagree) + "/" + std::to_string(checked) + " scan/parser disagreements, " +
                fmt("%.1f", secs) + " s"};
}

Outcome fitness_units(const Env&) {
    std::vector<double> y{0.3, -1.2, 2.5, 4.0, -0.7, 1.1};
    FitnessConfig f0;
    f0.lambda = 0.0;
    const double r0 = fitness(y, y, 7, f0);
    FitnessConfig f5;
    f5.lambda = 0.5;
    f5.max_len = 200;
    const double r5 = fitness(y, y, 200, f5);
    const double expect5 = 1.0 + 0.5 * std::exp(-1.0);
    std::vector<double> flat(6, 2.0), pred{1, 2, 3, 4, 5, 6};
    const double rf = fitness(flat, pred, 3, f5);
    std::vector<std::optional<double>> r2(119, 0.5);
    for (int i = 0; i < 80; ++i) r2[static_cast<std::size_t>(i)] = 0.995;
    const double sp = bench::solved_proportion(r2);
    const bool ok = r0 == 1.0 && std::abs(r5 - expect5) < 1e-12 && rf == f5.floor && fmt("%.3f", sp) == "0.672";
    return {ok, "r(l=0)=" + fmt("%.15g", r0) + ", r(l=0.5,L)-(1+e^-1/2)=" + fmt("%.1e", r5 - expect5) +
                    ", degenerate=" + fmt("%g", rf) + ", 80/119=" + fmt("%.3f", sp)};
}

Outcome ascent(const Env& env) {
    const auto model = load_or_pretrain(env);
    Rng rng(4242);
    const int trajectories = 200, steps = 20;
    const double d = static_cast<double>(model->config().d_model);
    const std::uint64_t before = model->params().hash();
    int monotone = 0;
    for (int t = 0; t < trajectories; ++t) {
        std::vector<double> v(static_cast<std::size_t>(d));
        for (auto& x : v) x = standard_normal(rng);
        const auto tr = search::ascend(*model, Tensor::from({1, v.size()}, v), 1e-4, steps, 0);
        bool ok = tr.scores.size() == static_cast<std::size_t>(steps + 1);
        for (std::size_t s = 1; s < tr.scores.size(); ++s) ok = ok && tr.scores[s] >= tr.scores[s - 1] - 1e-9;
        monotone += ok;
    }
    const double share = monotone / static_cast<double>(trajectories);
    const bool frozen = model->params().hash() == before;
    return {share >= 0.95 && frozen, std::to_string(monotone) + "/200 trajectories non-decreasing (" +
                                         fmt("%.3f", share) + "), evaluator unchanged: " + (frozen ? "yes" : "no")};
}

Outcome freeze_contract(const Env& env) {
    auto model = load_or_pretrain(env);
    const int last = model->config().n_decoder_layers - 1;
    const std::string last_prefix = "decoder.layer" + std::to_string(last) + ".";
    auto protected_param = [&](const ad::Parameter& p) {
        return p.name.rfind("data_encoder.", 0) == 0 ||
               (p.name.rfind("decoder.", 0) == 0 && p.name.rfind(last_prefix, 0) != 0);
    };
    auto rest = [&](const ad::Parameter& p) { return !protected_param(p); };
    const auto suite = bench::load_suite(std::string(EQUATE_SOURCE_DIR) + "/data/toy_suite/suite.json");
    const auto& spec = suite.tasks.at(1);
    const std::uint64_t seed = stream_seed(env.cfg.master_seed, "task", fnv1a(spec.name));
    const auto sp = bench::split_task(bench::load_task_data(suite, spec), seed);
    const auto qs = bench::prepare(sp.train, *model, env.cfg, seed);
    const std::uint64_t h0 = model->params().hash(protected_param), r0 = model->params().hash(rest);
    const auto res = bench::finetune_model(*model, qs, env.cfg, seed);
    const std::uint64_t h1 = model->params().hash(protected_param), r1 = model->params().hash(rest);
    return {h0 == h1 && r0 != r1, std::to_string(res.epochs.size()) + " epochs on " + std::to_string(qs.size()) +
                                      " quadruples; protected hash " + hex(h0) + " -> " + hex(h1) +
                                      ", trainable part " + (r0 != r1 ? "changed" : "unchanged")};
}

std::vector<std::uint64_t> seeds(const Env& env) {
    return {env.cfg.master_seed, env.cfg.master_seed + 1, env.cfg.master_seed + 2};
}

const std::vector<bench::Ablation> kShared{bench::Ablation::Full, bench::Ablation::NoSearch};

Outcome toy_recovery(const Env& env) {
    const auto model = load_or_pretrain(env);
    const auto shared = suite_run(env, env.cfg, *model, kShared, 0.0);
    const auto rnd = suite_run(env, env.cfg, *model, {bench::Ablation::RandomInit}, 0.0);
    const double full = solved(shared.reports.at("full"));
    const double ns = solved(shared.reports.at("no_search"));
    const double ri = solved(rnd.reports.at("random_init"));
    const double secs = shared.seconds + rnd.seconds;
    const bool ok = full >= 0.6 && full > ns && full > ri && secs < 1800.0;
    return {ok, "solved full=" + fmt("%.2f", full) + " no_search=" + fmt("%.2f", ns) +
                    " random_init=" + fmt("%.2f", ri) + ", suite runtime " + fmt("%.0f", secs) + " s"};
}

Outcome lambda_tradeoff(const Env& env) {
    const auto model = load_or_pretrain(env);
    const std::vector<double> lambdas{0.0, 0.5, 1.0};
    std::vector<double> means, ses;
    std::string detail;
    for (double lambda : lambdas) {
        std::vector<double> per_seed;
        for (auto s : seeds(env)) {
            RunConfig cfg = env.cfg;
            cfg.master_seed = s;
            cfg.fitness.lambda = lambda;
            const auto run = suite_run(env, cfg, *model, kShared, 0.0);
            const json& mc = run.reports.at("full").at("aggregates").at("mean_complexity");
            if (mc.is_null()) throw Error("NoResult", "no equation at lambda " + fmt("%g", lambda));
            per_seed.push_back(mc.get<double>());
        }
        means.push_back(mean(per_seed));
        ses.push_back(std_error(per_seed));
        detail += (detail.empty() ? "" : ", ") + std::string("lambda ") + fmt("%g", lambda) + ": " +
                  fmt("%.2f", means.back()) + " +- " + fmt("%.2f", ses.back());
    }
    bool ok = true;
    for (std::size_t i = 1; i < means.size(); ++i)
        ok = ok && means[i] <= means[i - 1] + std::hypot(ses[i], ses[i - 1]);
    return {ok, "mean complexity " + detail};
}

Outcome noise_robustness(const Env& env) {
    const auto model = load_or_pretrain(env);
    const std::vector<double> levels{0.0, 0.05, 0.1};
    std::map<double, std::vector<double>> full, ns;
    for (double sigma : levels)
        for (auto s : seeds(env)) {
            RunConfig cfg = env.cfg;
            cfg.master_seed = s;
            const auto run = suite_run(env, cfg, *model, kShared, sigma);
            full[sigma].push_back(solved(run.reports.at("full")));
            ns[sigma].push_back(solved(run.reports.at("no_search")));
        }
    bool ok = true;
    std::string detail;
    for (double sigma : levels) {
        const double df = mean(full[0.0]) - mean(full[sigma]);
        const double dn = mean(ns[0.0]) - mean(ns[sigma]);
        if (sigma > 0.0) ok = ok && df <= dn + 1e-12;
        detail += (detail.empty() ? "" : "; ") + std::string("sigma ") + fmt("%g", sigma) + ": full " +
                  fmt("%.3f", mean(full[sigma])) + " (drop " + fmt("%.3f", df) + "), no_search " +
                  fmt("%.3f", mean(ns[sigma])) + " (drop " + fmt("%.3f", dn) + ")";
    }
    return {ok, detail};
}

int run_command(const std::string& cmd, const fs::path& log) {
    const std::string line = cmd + " > \"" + log.string() + "\" 2>&1";
    const int rc = std::system(line.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

// Every CLI command is run twice from scratch with the same config and seed;
// all artifacts must match byte for byte.
Outcome determinism(const Env& env) {
    const fs::path base = env.work / "determinism";
    fs::remove_all(base);
    const std::string src = EQUATE_SOURCE_DIR;
    const auto suite = bench::load_suite(src + "/data/toy_suite/suite.json");

    json small = json::parse(R"({
      "master_seed": 5,
      "model": {"d_model": 16, "n_heads": 2, "n_encoder_layers": 1, "n_decoder_layers": 2, "ffn_hidden": 32,
                "evaluator_hidden": 16, "value_dim": 8, "token_dim": 8, "lstm_hidden": 16, "memory_slots": 2},
      "corpus": {"size": 40, "rows_per_example": 20},
      "pretrain": {"epochs": 2},
      "finetune": {"epochs": 1, "num_subsets": 12, "subset_rows": 40},
      "search": {"k_init": 3, "max_steps": 3, "max_candidates": 20}
    })");
    std::vector<std::string> artifacts;
    for (int run = 0; run < 2; ++run) {
        const fs::path dir = base / ("run" + std::to_string(run));
        fs::create_directories(dir / "suite");
        io::write_json((dir / "config.json").string(), small);
        json manifest = bench::suite_to_json(suite);
        manifest["tasks"] = json::array({manifest["tasks"][0], manifest["tasks"][3]});
        io::write_json((dir / "suite" / "suite.json").string(), manifest);
        for (const auto& t : manifest["tasks"]) {
            const std::string rel = t.at("data").get<std::string>();
            fs::create_directories((dir / "suite" / rel).parent_path());
            fs::copy_file(fs::path(suite.dir) / rel, dir / "suite" / rel);
        }
        const std::string d = "\"" + dir.string() + "/";
        const std::string cfg = " --config " + d + "config.json\"";
        const std::string data = d + "suite/" + manifest["tasks"][0]["data"].get<std::string>() + "\"";
        const std::vector<std::pair<std::string, std::string>> cmds{
            {"pretrain", env.eqd + " pretrain --quiet" + cfg + " --out " + d + "pre.eqck\""},
            {"prepare", env.eqd + " prepare --data " + data + " --model " + d + "pre.eqck\" --out " + d +
                            "quads.jsonl\"" + cfg},
            {"finetune", env.eqd + " finetune --quiet --quadruples " + d + "quads.jsonl\" --model " + d +
                             "pre.eqck\" --out " + d + "ft.eqck\"" + cfg},
            {"discover", env.eqd + " discover --data " + data + " --model " + d + "ft.eqck\" --quadruples " + d +
                             "quads.jsonl\" --out " + d + "candidates.jsonl\"" + cfg},
            {"bench", env.eqd + " bench --quiet --suite " + d + "suite/suite.json\" --model " + d +
                          "pre.eqck\" --ablation full,no_search --logs " + d + "logs\" --out " + d + "report.json\"" +
                          cfg},
        };
        for (const auto& [name, cmd] : cmds) {
            const int rc = run_command(cmd, dir / (name + ".log"));
            if (rc != 0)
                return {false, name + " exited with " + std::to_string(rc) + ": " + slurp(dir / (name + ".log"))};
        }
    }
    std::vector<std::string> files{"pre.eqck", "quads.jsonl", "ft.eqck", "candidates.jsonl",
                                   "report_full.json", "report_no_search.json"};
    for (const auto& e : fs::recursive_directory_iterator(base / "run0" / "logs"))
        if (e.is_regular_file()) files.push_back(fs::relative(e.path(), base / "run0").string());
    std::vector<std::string> differ;
    for (const auto& f : files)
        if (!fs::exists(base / "run1" / f) || slurp(base / "run0" / f) != slurp(base / "run1" / f))
            differ.push_back(f);
    std::string detail = std::to_string(files.size()) + " artifacts from pretrain, prepare, finetune, discover, bench";
    for (const auto& f : differ) detail += "; differs: " + f;
    return {differ.empty(), detail};
}

Outcome budgets(const Env& env) {
    const auto model = load_or_pretrain(env);
    const auto& sc = env.cfg.search;
    const auto run = suite_run(env, env.cfg, *model, kShared, 0.0);
    std::size_t logs = 0, max_cands = 0, max_init = 0, early = 0;
    int max_step = -1;
    std::vector<std::string> problems;
    for (const auto& [abl, report] : run.reports) {
        for (const auto& task : task_names(report)) {
            const fs::path p = run.logs / (abl + "_" + task + ".jsonl");
            if (!fs::exists(p)) {
                problems.push_back("missing log " + p.filename().string());
                continue;
            }
            const auto rows = io::read_jsonl(p.string());
            ++logs;
            std::set<int> inits;
            std::map<int, std::set<int>> steps;
            for (std::size_t i = 0; i < rows.size(); ++i) {
                const auto& r = rows[i];
                const int init = r.at("init").get<int>(), step = r.at("step").get<int>();
                inits.insert(init);
                if (step >= 0) steps[init].insert(step);
                max_step = std::max(max_step, step);
                const bool hit = r.at("valid").get<bool>() && r.at("r2_train").get<double>() > sc.stop_r2;
                if (hit) {
                    ++early;
                    if (i + 1 != rows.size()) problems.push_back(p.filename().string() + ": continued after a hit");
                }
            }
            max_cands = std::max(max_cands, rows.size());
            max_init = std::max(max_init, inits.size());
            for (const auto& [i, s] : steps)
                if (s.size() > static_cast<std::size_t>(sc.max_steps) + 1)
                    problems.push_back(p.filename().string() + ": too many steps");
        }
    }
    const bool default_budgets = sc.max_candidates == 100 && sc.k_init == 10 && sc.max_steps == 20 && sc.stop_r2 == 0.99;
    if (!default_budgets) problems.push_back("config budgets differ from 100/10/20/0.99");
    if (max_cands > sc.max_candidates) problems.push_back("candidate budget exceeded");
    if (max_init > static_cast<std::size_t>(sc.k_init)) problems.push_back("too many initial points");
    if (max_step > sc.max_steps) problems.push_back("ascent step budget exceeded");
    std::string detail = std::to_string(logs) + " logs: max candidates " + std::to_string(max_cands) +
                         ", max initial points " + std::to_string(max_init) + ", max step " +
                         std::to_string(max_step) + ", " + std::to_string(early) + " early stops at the hit";
    for (const auto& p : problems) detail += "; " + p;
    return {problems.empty() && logs > 0, detail};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance criteria"};
    std::vector<int> criteria;
    Env env;
    env.config_path = std::string(EQUATE_SOURCE_DIR) + "/data/toy_suite/config.json";
    std::string work = "acceptance_work";
    env.eqd = EQD_BINARY;
    bool prepare_only = false;
    app.add_option("criteria", criteria, "criteria to run (1-10); default all")->check(CLI::Range(1, 10));
    app.add_option("--config", env.config_path, "run config")->check(CLI::ExistingFile);
    app.add_option("--work", work, "cache directory");
    app.add_option("--eqd", env.eqd, "eqd executable");
    app.add_flag("--prepare", prepare_only, "only pretrain (or reuse) the surrogate");
    CLI11_PARSE(app, argc, argv);
    env.work = fs::absolute(work);

    try {
        env.cfg = load_run_config(env.config_path);
        env.pipeline_hash = fnv1a(slurp(env.eqd));
        if (prepare_only) {
            const auto model = load_or_pretrain(env);
            std::cout << "surrogate ready: " << surrogate_path(env).string() << std::endl;
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }

    const std::vector<std::pair<const char*, Outcome (*)(const Env&)>> table{
        {"gradient oracle", gradients},     {"expression properties", expressions},
        {"fitness units", fitness_units},   {"ascent monotonicity", ascent},
        {"freeze contract", freeze_contract}, {"toy recovery", toy_recovery},
        {"lambda trade-off", lambda_tradeoff}, {"noise robustness", noise_robustness},
        {"determinism", determinism},       {"budget compliance", budgets},
    };
    if (criteria.empty()) {
        criteria.resize(table.size());
        std::iota(criteria.begin(), criteria.end(), 1);
    }
    int failed = 0;
    for (int c : criteria) {
        const auto& [name, fn] = table[static_cast<std::size_t>(c - 1)];
        Outcome out;
        try {
            out = fn(env);
        } catch (const std::exception& e) {
            out = {false, std::string("error: ") + e.what()};
        }
        std::cout << (out.pass ? "PASS" : "FAIL") << " criterion " << c << " (" << name << "): " << out.detail
                  << std::endl;
        failed += !out.pass;
    }
    return failed == 0 ? 0 : 1;
}
