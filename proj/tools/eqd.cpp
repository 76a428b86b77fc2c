// eqd: pretrain a surrogate, prepare quadruples, fine-tune, discover and
// benchmark from one JSON run config.
//
// Exit codes: 0 success, 2 config/usage error, 3 pipeline failure,
// 4 no valid candidate.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <set>

#include "CLI11.hpp"
#include "equate/bench.hpp"
#include "equate/config.hpp"
#include "equate/io.hpp"

using namespace equate;
namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0, kUsage = 2, kFailure = 3, kNoCandidate = 4;

// Errors that mean the inputs were wrong rather than the pipeline failing.
const std::set<std::string> kUsageCodes{"InvalidConfig", "InvalidData",   "InvalidSuite",    "InvalidJson",
                                         "InvalidQuadruple", "Io",        "OutputExists",    "BadMagic",
                                         "VersionMismatch",  "CorruptSegment", "TooFewRows", "EmptyData"};

RunConfig config_from(const std::string& path) {
    RunConfig c = path.empty() ? RunConfig{} : load_run_config(path);
    apply_seed_override(c);
    return c;
}

void refuse_overwrite(const std::string& out, bool force) {
    if (!force && fs::exists(out)) throw Error("OutputExists", out + " exists (pass --force to overwrite)");
}

void ensure_parent(const std::string& path) {
    const auto parent = fs::path(path).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
}

std::string num(double v, const char* f = "%.6f") {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

struct Options {
    std::string config, out, data, model, quadruples, suite, logs;
    std::vector<std::string> ablations{"full"};
    double noise = 0.0;
    bool force = false, unfreeze_all = false, quiet = false;
};

int cmd_pretrain(const Options& o) {
    const RunConfig cfg = config_from(o.config);
    refuse_overwrite(o.out, o.force);
    std::vector<surrogate::PretrainExample> corpus;
    if (!cfg.paths.corpus.empty() && fs::exists(cfg.paths.corpus)) {
        corpus = io::read_corpus(cfg.paths.corpus);
        std::cout << "loaded corpus of " << corpus.size() << " examples from " << cfg.paths.corpus << "\n";
    } else {
        corpus = bench::build_run_corpus(cfg);
        std::cout << "built corpus of " << corpus.size() << " examples\n";
        if (!cfg.paths.corpus.empty()) io::write_corpus(cfg.paths.corpus, corpus);
    }
    json meta;
    auto model = bench::pretrain_surrogate(cfg, corpus, meta, [&](int epoch, double loss) {
        if (!o.quiet) std::cout << "epoch " << epoch + 1 << "/" << cfg.pretrain.epochs << "  loss " << num(loss) << std::endl;
    });
    ensure_parent(o.out);
    nn::save_checkpoint(o.out, *model, cfg.master_seed, meta);
    const auto& curve = meta["loss_curve"];
    if (!curve.empty())
        std::cout << "loss " << num(curve.front().get<double>()) << " -> " << num(curve.back().get<double>()) << "\n";
    std::cout << "wrote " << o.out << "\n";
    return kOk;
}

int cmd_prepare(const Options& o) {
    const RunConfig cfg = config_from(o.config);
    const DataTable data = io::read_table(o.data);
    auto loaded = nn::load_checkpoint(o.model);
    const auto sp = bench::split_task(data, cfg.master_seed);
    const auto qs = bench::prepare(sp.train, *loaded.model, cfg, cfg.master_seed);
    ensure_parent(o.out);
    finetune::write_quadruples(o.out, qs);
    double best = cfg.fitness.floor;
    for (const auto& q : qs) best = std::max(best, q.r);
    std::cout << "wrote " << qs.size() << " quadruples to " << o.out << " (best r " << num(best) << ")\n";
    return kOk;
}

int cmd_finetune(const Options& o) {
    RunConfig cfg = config_from(o.config);
    if (o.unfreeze_all) cfg.finetune.unfreeze_all = true;
    refuse_overwrite(o.out, o.force);
    const auto qs = finetune::read_quadruples(o.quadruples);
    auto loaded = nn::load_checkpoint(o.model);
    const auto res = bench::finetune_model(*loaded.model, qs, cfg, cfg.master_seed,
                                           [&](int epoch, const finetune::Losses& l) {
                                               if (o.quiet) return;
                                               std::cout << "epoch " << epoch + 1 << "/" << cfg.finetune.epochs
                                                         << "  L " << num(l.total) << "  L_est " << num(l.est)
                                                         << "  L_rec " << num(l.rec) << std::endl;
                                           });
    json epochs = json::array();
    for (const auto& l : res.epochs) epochs.push_back({{"L", l.total}, {"L_est", l.est}, {"L_rec", l.rec}});
    json meta = loaded.metadata;
    meta["stage"] = "finetune";
    meta["finetune_epochs"] = epochs;
    meta["quadruples"] = qs.size();
    ensure_parent(o.out);
    nn::save_checkpoint(o.out, *loaded.model, cfg.master_seed, meta);
    std::cout << "wrote " << o.out << "\n";
    return kOk;
}

int cmd_discover(const Options& o) {
    const RunConfig cfg = config_from(o.config);
    const DataTable data = io::read_table(o.data);
    auto loaded = nn::load_checkpoint(o.model);
    const auto qs = finetune::read_quadruples(o.quadruples);
    const auto sp = bench::split_task(data, cfg.master_seed);
    try {
        const auto res = bench::discover_task(sp.train, *loaded.model, qs, cfg, cfg.master_seed);
        if (!o.out.empty()) search::write_candidate_log(o.out, res.log);
        const auto r2_test = bench::test_r2(*res.best.tree, sp.test);
        std::cout << "infix:    " << expr::render_infix(*res.best.tree) << "\n"
                  << "prefix:   " << expr::to_prefix_text(res.best.tokens) << "\n"
                  << "r2_train: " << num(*res.best.r2_train) << "\n"
                  << "r2_test:  " << (r2_test ? num(*r2_test) : std::string("undefined")) << "\n"
                  << "complexity " << res.best.complexity << ", " << res.log.size() << " candidates"
                  << (res.stopped_early ? ", stopped early" : "") << "\n";
    } catch (const search::NoValidCandidate& e) {
        if (!o.out.empty()) search::write_candidate_log(o.out, e.log());
        throw;
    }
    return kOk;
}

int cmd_bench(const Options& o) {
    const RunConfig cfg = config_from(o.config);
    const auto suite = bench::load_suite(o.suite);
    std::vector<bench::Ablation> abl;
    for (const auto& a : o.ablations) abl.push_back(bench::ablation_from_name(a));
    std::unique_ptr<nn::Model> model;
    if (!o.model.empty()) {
        model = nn::load_checkpoint(o.model).model;
    } else {
        const std::string cached =
            cfg.paths.checkpoints.empty() ? std::string() : (fs::path(cfg.paths.checkpoints) / "surrogate.eqck").string();
        if (!cached.empty() && fs::exists(cached)) {
            model = nn::load_checkpoint(cached).model;
            std::cout << "using surrogate " << cached << "\n";
        } else {
            std::cout << "pretraining surrogate\n";
            json meta;
            model = bench::pretrain_surrogate(cfg, bench::build_run_corpus(cfg), meta);
            if (!cached.empty()) {
                ensure_parent(cached);
                nn::save_checkpoint(cached, *model, cfg.master_seed, meta);
            }
        }
    }
    bench::SuiteOptions opts;
    opts.noise = o.noise;
    opts.log_dir = o.logs;
    opts.verbose = !o.quiet;
    const auto reports = bench::run_suite(suite, cfg, abl, *model, opts);
    const fs::path out(o.out);
    ensure_parent(o.out);
    for (const auto& r : reports) {
        fs::path base = out;
        if (reports.size() > 1) base = out.parent_path() / (out.stem().string() + "_" + bench::ablation_name(r.ablation) + out.extension().string());
        io::write_json(base.string(), bench::report_to_json(r));
        io::write_text(fs::path(base).replace_extension(".txt").string(), bench::report_table(r));
        io::write_json(fs::path(base).replace_extension(".timing.json").string(), bench::timing_to_json(r));
        std::cout << bench::report_table(r) << "\n";
    }
    if (reports.size() > 1) std::cout << bench::summary_table(reports);
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"eqd: equation discovery by fine-tuning and latent search"};
    app.require_subcommand(1);
    Options o;

    auto* pre = app.add_subcommand("pretrain", "build a corpus and pretrain the surrogate model");
    pre->add_option("--config", o.config, "run config (JSON)")->required()->check(CLI::ExistingFile);
    pre->add_option("--out", o.out, "checkpoint to write")->required();
    pre->add_flag("--force", o.force, "overwrite an existing checkpoint");
    pre->add_flag("--quiet", o.quiet, "no per-epoch output");

    auto* prep = app.add_subcommand("prepare", "sample subsets and write the quadruple file");
    prep->add_option("--data", o.data, "task data (JSON Lines)")->required()->check(CLI::ExistingFile);
    prep->add_option("--model", o.model, "surrogate checkpoint")->required()->check(CLI::ExistingFile);
    prep->add_option("--out", o.out, "quadruple file to write")->required();
    prep->add_option("--config", o.config, "run config (JSON)")->check(CLI::ExistingFile);

    auto* ft = app.add_subcommand("finetune", "fine-tune on a quadruple file");
    ft->add_option("--quadruples", o.quadruples, "quadruple file")->required()->check(CLI::ExistingFile);
    ft->add_option("--model", o.model, "surrogate checkpoint")->required()->check(CLI::ExistingFile);
    ft->add_option("--out", o.out, "fine-tuned checkpoint to write")->required();
    ft->add_option("--config", o.config, "run config (JSON)")->check(CLI::ExistingFile);
    ft->add_flag("--unfreeze-all", o.unfreeze_all, "train every parameter");
    ft->add_flag("--force", o.force, "overwrite an existing checkpoint");
    ft->add_flag("--quiet", o.quiet, "no per-epoch output");

    auto* disc = app.add_subcommand("discover", "search for the best equation on a task");
    disc->add_option("--data", o.data, "task data (JSON Lines)")->required()->check(CLI::ExistingFile);
    disc->add_option("--model", o.model, "fine-tuned checkpoint")->required()->check(CLI::ExistingFile);
    disc->add_option("--quadruples", o.quadruples, "quadruple file")->required()->check(CLI::ExistingFile);
    disc->add_option("--out", o.out, "candidate log to write (JSON Lines)");
    disc->add_option("--config", o.config, "run config (JSON)")->check(CLI::ExistingFile);

    auto* b = app.add_subcommand("bench", "run a task suite under one or more ablations");
    b->add_option("--suite", o.suite, "suite manifest (suite.json)")->required()->check(CLI::ExistingFile);
    b->add_option("--config", o.config, "run config (JSON)")->check(CLI::ExistingFile);
    b->add_option("--ablation", o.ablations, "full, no_search, no_eq_encoder, random_init, unfreeze_all")
        ->delimiter(',');
    b->add_option("--out", o.out, "report to write (JSON; a .txt table is written alongside)")->required();
    b->add_option("--model", o.model, "surrogate checkpoint (default: pretrain from the config)")
        ->check(CLI::ExistingFile);
    b->add_option("--noise", o.noise, "relative label noise on the training split")->check(CLI::NonNegativeNumber);
    b->add_option("--logs", o.logs, "directory for per-task candidate logs");
    b->add_flag("--quiet", o.quiet, "no per-task output");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    try {
        if (pre->parsed()) return cmd_pretrain(o);
        if (prep->parsed()) return cmd_prepare(o);
        if (ft->parsed()) return cmd_finetune(o);
        if (disc->parsed()) return cmd_discover(o);
        return cmd_bench(o);
    } catch (const search::NoValidCandidate& e) {
        std::cerr << "eqd: " << e.what() << "\n";
        return kNoCandidate;
    } catch (const Error& e) {
        std::cerr << "eqd: " << e.what() << "\n";
        return kUsageCodes.count(e.code()) ? kUsage : kFailure;
    } catch (const std::exception& e) {
        std::cerr << "eqd: " << e.what() << "\n";
        return kFailure;
    }
}
