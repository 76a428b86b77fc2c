#include "equate/search.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "equate/io.hpp"
#include "equate/metrics.hpp"
#include "equate/surrogate.hpp"

namespace equate::search {

std::string label_source_name(LabelSource s) { return s == LabelSource::Gold ? "gold" : "pseudo"; }

LabelSource label_source_from_name(const std::string& name) {
    if (name == "gold") return LabelSource::Gold;
    if (name == "pseudo") return LabelSource::Pseudo;
    throw Error("InvalidConfig", "search.label_source must be gold or pseudo, got " + name);
}

void SearchConfig::validate() const {
    auto bad = [](const std::string& field, const std::string& why) {
        throw Error("InvalidConfig", "search." + field + " " + why);
    };
    if (k_init < 1) bad("k_init", "must be >= 1");
    if (max_steps < 0) bad("max_steps", "must be >= 0");
    if (!(eta >= 0.0)) bad("eta", "must be >= 0");
    if (backoff_retries < 0) bad("backoff_retries", "must be >= 0");
    if (max_candidates < 1) bad("max_candidates", "must be >= 1");
    if (!(stop_r2 > 0.0 && stop_r2 <= 1.0)) bad("stop_r2", "must be in (0, 1]");
    if (!(temperature > 0.0)) bad("temperature", "must be > 0");
}

std::vector<std::size_t> select_initial(const std::vector<finetune::Quadruple>& qs, std::size_t k) {
    std::vector<std::size_t> idx(qs.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (qs[a].r != qs[b].r) return qs[a].r > qs[b].r;
        return qs[a].eq.size() < qs[b].eq.size();
    });
    idx.resize(std::min(k, idx.size()));
    return idx;
}

std::vector<double> score_gradient(const nn::Model& model, const ad::Tensor& e, double* score) {
    ad::Tape tape;
    ad::TapeScope scope(tape);
    ad::Tensor x = e.detach();
    x.set_requires_grad(true);
    const ad::Tensor r = model.evaluate_fitness(x);
    if (score) *score = r.item();
    tape.backward(r);
    return x.grad();
}

namespace {

double score_of(const nn::Model& model, const ad::Tensor& e) { return model.evaluate_fitness(e).item(); }

}  // namespace

Trajectory ascend(const nn::Model& model, const ad::Tensor& e_f, double eta, int steps, int backoff_retries) {
    Trajectory t;
    ad::Tensor e = e_f.detach();
    t.points.push_back(e);
    t.scores.push_back(score_of(model, e));
    for (int s = 0; s < steps; ++s) {
        std::vector<double> g;
        try {
            g = score_gradient(model, e);
        } catch (const Error& err) {
            if (err.code() != "NonFiniteValue") throw;
            t.truncated = true;
            break;
        }
        if (!std::all_of(g.begin(), g.end(), [](double v) { return std::isfinite(v); })) {
            t.truncated = true;
            break;
        }
        ad::Tensor next;
        double next_score = 0.0;
        for (int attempt = 0;; ++attempt) {
            std::vector<double> v(e.values().begin(), e.values().end());
            for (std::size_t i = 0; i < v.size(); ++i) v[i] += eta * g[i];
            next = ad::Tensor::from(e.shape(), std::move(v));
            next_score = score_of(model, next);
            if (next_score >= t.scores.back() || attempt >= backoff_retries) break;
            eta *= 0.5;
        }
        e = next;
        t.points.push_back(e);
        t.scores.push_back(next_score);
    }
    return t;
}

json candidate_to_json(const Candidate& c) {
    return {{"init", c.init},
            {"step", c.step},
            {"eq", expr::to_prefix_text(c.tokens)},
            {"infix", c.tree ? expr::render_infix(*c.tree) : std::string()},
            {"r2_train", c.r2_train ? json(*c.r2_train) : json(nullptr)},
            {"complexity", c.complexity},
            {"valid", c.valid}};
}

Candidate score_skeleton(const expr::TokenSeq& skeleton, const DataTable& train, Rng& rng) {
    Candidate c;
    c.tokens = skeleton;
    c.complexity = skeleton.size();
    const auto fitted = refit::refit_constants(expr::parse_prefix(skeleton), train, rng, refit::Scope::AllConstants);
    if (!fitted.ok) {
        c.reason = fitted.reason;
        return c;
    }
    const auto eval = expr::evaluate_rows(fitted.tree, train.x);
    c.tokens = expr::serialize_prefix(fitted.tree);
    c.tree = fitted.tree;
    if (eval.error_count > 0) {
        c.reason = "DomainError";
        return c;
    }
    c.r2_train = r2_score(train.y, eval.values);
    if (!c.r2_train) {
        c.reason = "UndefinedR2";
        return c;
    }
    c.valid = true;
    return c;
}

Candidate decode_and_refit(const nn::Model& model, const ad::Tensor& e, const DataTable& train,
                           const SearchConfig& cfg, Rng& rng) {
    if (train.rows() == 0) {
        Candidate c;
        c.reason = "EmptyData";
        return c;
    }
    const nn::Generation g = model.generate(e, cfg.decode_mode, cfg.temperature, rng);
    if (!g.valid) {
        Candidate c;
        c.tokens = g.tokens;
        c.complexity = g.tokens.size();
        c.reason = "MalformedPrefix";
        return c;
    }
    if (!surrogate::uses_only_variables(g.tokens, static_cast<int>(train.num_vars()))) {
        Candidate c;
        c.tokens = g.tokens;
        c.complexity = g.tokens.size();
        c.reason = "VariableOutOfRange";
        return c;
    }
    return score_skeleton(g.tokens, train, rng);
}

ad::Tensor initial_embedding(const nn::Model& model, const finetune::Quadruple& q, LabelSource src) {
    const DataTable t = src == LabelSource::Gold ? q.data : finetune::pseudo_labelled(q);
    const DataTable& use = t.rows() > 0 ? t : q.data;  // no defined pseudo label: fall back to gold
    const ad::Tensor e_n = model.encode_data(use.x, use.y);
    return model.attentive_fuse(e_n, model.encode_equation_states(q.eq)).fused.detach();
}

namespace {

bool better(const Candidate& a, const Candidate& b) {
    if (*a.r2_train != *b.r2_train) return *a.r2_train > *b.r2_train;
    return a.complexity < b.complexity;  // earlier wins remaining ties
}

}  // namespace

DiscoverResult discover(const DataTable& train, const nn::Model& model,
                        const std::vector<finetune::Quadruple>& quadruples, const SearchConfig& cfg,
                        std::uint64_t seed) {
    cfg.validate();
    if (quadruples.empty()) throw Error("NoQuadruples", "search needs at least one quadruple");
    if (train.rows() == 0) throw Error("EmptyData", "training split is empty");
    const auto init = select_initial(quadruples, static_cast<std::size_t>(cfg.k_init));
    DiscoverResult res;
    res.initial_points = init.size();
    std::optional<std::size_t> best;

    auto record = [&](Candidate c) {
        if (c.valid && (!best || better(c, res.log[*best]))) best = res.log.size();
        const bool stop = c.valid && *c.r2_train > cfg.stop_r2;
        res.log.push_back(std::move(c));
        if (stop) res.stopped_early = true;
        return stop || res.log.size() >= cfg.max_candidates;
    };

    bool done = false;
    if (cfg.include_initial_equations) {
        for (std::size_t i = 0; i < init.size() && !done; ++i) {
            Rng rng = make_rng(seed, "search-initial", i);
            Candidate c = score_skeleton(quadruples[init[i]].eq, train, rng);
            c.init = static_cast<int>(i);
            c.step = -1;
            done = record(std::move(c));
        }
    }
    std::vector<Trajectory> paths;
    if (!done) {
        for (std::size_t idx : init)
            paths.push_back(ascend(model, initial_embedding(model, quadruples[idx], cfg.label_source), cfg.eta,
                                   cfg.max_steps, cfg.backoff_retries));
    }
    for (int s = 0; s <= cfg.max_steps && !done; ++s) {
        for (std::size_t i = 0; i < paths.size() && !done; ++i) {
            if (static_cast<std::size_t>(s) >= paths[i].points.size()) continue;
            Rng rng = make_rng(seed, "search-decode", i, static_cast<std::uint64_t>(s));
            Candidate c = decode_and_refit(model, paths[i].points[static_cast<std::size_t>(s)], train, cfg, rng);
            c.init = static_cast<int>(i);
            c.step = s;
            done = record(std::move(c));
        }
    }
    if (!best) throw NoValidCandidate(std::move(res.log));
    res.best = res.log[*best];
    return res;
}

void write_candidate_log(const std::string& path, const std::vector<Candidate>& log) {
    std::vector<json> lines;
    lines.reserve(log.size());
    for (const auto& c : log) lines.push_back(candidate_to_json(c));
    io::write_jsonl(path, lines);
}

}  // namespace equate::search
