#include "equate/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "equate/io.hpp"
#include "equate/refit.hpp"

namespace equate::finetune {

void FinetuneConfig::validate() const {
    auto bad = [](const std::string& field, const std::string& why) {
        throw Error("InvalidConfig", "finetune." + field + " " + why);
    };
    if (!(alpha > 0.0)) bad("alpha", "must be > 0");
    if (!(beta > 0.0)) bad("beta", "must be > 0");
    if (epochs < 0) bad("epochs", "must be >= 0");
    if (!(lr > 0.0)) bad("lr", "must be > 0");
    if (batch_size < 1) bad("batch_size", "must be >= 1");
    if (num_subsets < 1) bad("num_subsets", "must be >= 1");
    if (subset_rows < 2) bad("subset_rows", "must be >= 2");
    if (random_mix_ratio < 0.0 || random_mix_ratio > 1.0) bad("random_mix_ratio", "must be in [0, 1]");
    if (random_depth < 1) bad("random_depth", "must be >= 1");
}

bool Quadruple::operator==(const Quadruple& o) const {
    if (!(data == o.data) || eq != o.eq || r != o.r || domain_errors != o.domain_errors) return false;
    if (y_hat.size() != o.y_hat.size()) return false;
    for (std::size_t i = 0; i < y_hat.size(); ++i) {
        const bool a = std::isnan(y_hat[i]), b = std::isnan(o.y_hat[i]);
        if (a != b || (!a && y_hat[i] != o.y_hat[i])) return false;
    }
    return true;
}

std::vector<DataTable> sample_subsets(const DataTable& data, std::size_t n, std::size_t rows, Rng& rng) {
    if (data.rows() == 0) throw Error("EmptyData", "cannot sample subsets from an empty table");
    std::vector<DataTable> out;
    out.reserve(n);
    std::vector<std::size_t> idx(rows);
    for (std::size_t i = 0; i < n; ++i) {
        for (auto& k : idx) k = uniform_index(rng, data.rows());
        out.push_back(data.select(idx));
    }
    return out;
}

Quadruple make_quadruple(DataTable subset, expr::TokenSeq eq, const FitnessConfig& fit) {
    Quadruple q;
    q.data = std::move(subset);
    q.eq = std::move(eq);
    const auto eval = expr::evaluate_rows(expr::parse_prefix(q.eq), q.data.x);
    q.y_hat = eval.values;
    q.domain_errors = eval.error_count;
    q.r = recompute_fitness(q, fit);
    return q;
}

double recompute_fitness(const Quadruple& q, const FitnessConfig& fit) {
    return fitness(q.data.y, q.y_hat, q.eq.size(), fit, q.domain_errors);
}

namespace {

bool has_placeholder(const expr::TokenSeq& t) {
    return std::any_of(t.begin(), t.end(), [](const expr::Token& k) { return k.placeholder; });
}

// Placeholders that cannot be fitted fall back to their initial value.
expr::TokenSeq resolve_placeholders(const expr::TokenSeq& tokens, const DataTable& data, Rng& rng) {
    if (!has_placeholder(tokens)) return tokens;
    const auto tree = expr::parse_prefix(tokens);
    const auto fitted = refit::refit_constants(tree, data, rng, refit::Scope::PlaceholdersOnly);
    if (fitted.ok) return expr::serialize_prefix(fitted.tree);
    expr::TokenSeq plain = tokens;
    for (auto& t : plain)
        if (t.placeholder) t = expr::Token::constant(t.value);
    return plain;
}

}  // namespace

std::vector<Quadruple> build_quadruples(const std::vector<DataTable>& subsets, const nn::Model& model,
                                        const FitnessConfig& fit, const FinetuneConfig& cfg,
                                        const surrogate::SuggestConfig& suggest, std::uint64_t seed) {
    std::vector<Quadruple> out;
    out.reserve(subsets.size());
    for (std::size_t i = 0; i < subsets.size(); ++i) {
        const DataTable& s = subsets[i];
        Rng rng = make_rng(seed, "quadruple", i);
        const int vars = static_cast<int>(s.num_vars());
        expr::TokenSeq eq;
        if (uniform01(rng) < cfg.random_mix_ratio) {
            eq = expr::serialize_prefix(
                expr::random_expr(rng, cfg.random_depth, vars, expr::OperatorWeights::uniform()));
        } else {
            eq = surrogate::suggest_equation(model, s.x, s.y, suggest, rng).tokens;
        }
        out.push_back(make_quadruple(s, resolve_placeholders(eq, s, rng), fit));
    }
    return out;
}

json quadruple_to_json(const Quadruple& q) {
    json yh = json::array();
    for (double v : q.y_hat) yh.push_back(std::isfinite(v) ? json(v) : json(nullptr));
    return {{"x", io::matrix_to_json(q.data.x)},
            {"y", q.data.y},
            {"eq", expr::to_prefix_text(q.eq)},
            {"y_hat", std::move(yh)},
            {"r", q.r},
            {"domain_errors", q.domain_errors}};
}

Quadruple quadruple_from_json(const json& j) {
    try {
        Quadruple q;
        q.data.x = io::matrix_from_json(j.at("x"));
        q.data.y = j.at("y").get<std::vector<double>>();
        q.eq = expr::parse_prefix_text(j.at("eq").get<std::string>());
        for (const auto& v : j.at("y_hat"))
            q.y_hat.push_back(v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>());
        q.r = j.at("r").get<double>();
        q.domain_errors = j.at("domain_errors").get<std::size_t>();
        if (q.data.y.size() != q.data.rows() || q.y_hat.size() != q.data.rows())
            throw Error("InvalidQuadruple", "x, y and y_hat row counts differ");
        expr::parse_prefix(q.eq);
        return q;
    } catch (const json::exception& e) {
        throw Error("InvalidQuadruple", e.what());
    } catch (const Error& e) {
        if (e.code() == "InvalidQuadruple") throw;
        throw Error("InvalidQuadruple", e.what());
    }
}

void write_quadruples(const std::string& path, const std::vector<Quadruple>& qs) {
    std::vector<json> lines;
    lines.reserve(qs.size());
    for (const auto& q : qs) lines.push_back(quadruple_to_json(q));
    io::write_jsonl(path, lines);
}

std::vector<Quadruple> read_quadruples(const std::string& path) {
    std::vector<Quadruple> out;
    for (const auto& j : io::read_jsonl(path)) out.push_back(quadruple_from_json(j));
    return out;
}

DataTable pseudo_labelled(const Quadruple& q) {
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < q.y_hat.size(); ++i)
        if (std::isfinite(q.y_hat[i])) keep.push_back(i);
    DataTable t = q.data.select(keep);
    for (std::size_t k = 0; k < keep.size(); ++k) t.y[k] = q.y_hat[keep[k]];
    return t;
}

namespace {

ad::AdamWConfig optimizer_config(const FinetuneConfig& cfg) {
    ad::AdamWConfig oc;
    oc.lr = cfg.lr;
    oc.weight_decay = cfg.weight_decay;
    return oc;
}

bool data_encoder_frozen(const nn::Model& m) {
    for (const auto& p : m.params().params())
        if (p.name.starts_with("data_encoder.") && !p.frozen) return false;
    return true;
}

}  // namespace

Trainer::Trainer(nn::Model& model, const FinetuneConfig& cfg)
    : model_(model), cfg_(cfg), opt_(optimizer_config(cfg)) {
    cfg_.validate();
}

void Trainer::apply_freeze_policy() {
    model_.unfreeze_all();
    if (cfg_.unfreeze_all) return;
    const auto patterns = cfg_.freeze_patterns.empty() ? nn::default_freeze_patterns(model_.config())
                                                       : cfg_.freeze_patterns;
    model_.freeze(patterns);
}

ad::Tensor Trainer::data_embedding(const Quadruple& q) {
    const bool cacheable = data_encoder_frozen(model_);
    if (cacheable) {
        if (auto it = cache_.find(&q); it != cache_.end()) return it->second;
    }
    const DataTable t = pseudo_labelled(q);
    if (t.rows() == 0) return {};
    if (!cacheable) return model_.encode_data(t.x, t.y);
    ad::Tensor e;
    {
        ad::Tape scratch;  // isolates the frozen encoder from the training tape
        ad::TapeScope scope(scratch);
        e = model_.encode_data(t.x, t.y).detach();
    }
    cache_.emplace(&q, e);
    return e;
}

Losses Trainer::step(std::span<const Quadruple* const> batch) {
    Losses out;
    std::size_t used = 0;
    model_.params().zero_grad();
    for (const Quadruple* q : batch)
        if (pseudo_labelled(*q).rows() > 0) ++used;
    if (used == 0) return out;
    const double inv = 1.0 / static_cast<double>(used);
    for (const Quadruple* q : batch) {
        ad::Tape tape;
        ad::TapeScope scope(tape);
        ad::Tensor e_n = data_embedding(*q);
        if (!e_n.defined()) continue;
        double est = 0.0, rec = 0.0;
        try {
            const auto states = model_.encode_equation_states(q->eq);
            const auto fusion = model_.attentive_fuse(e_n, states);
            const ad::Tensor r_hat = model_.evaluate_fitness(fusion.fused);
            const ad::Tensor diff = ad::sub(r_hat, ad::Tensor::from({1, 1}, {q->r}));
            const ad::Tensor l_est = ad::sum(ad::mul(diff, diff));
            const ad::Tensor l_rec = model_.reconstruction_loss(fusion.fused, q->eq);
            est = l_est.item();
            rec = l_rec.item();
            const ad::Tensor loss = ad::add(ad::scale(l_est, cfg_.alpha * inv), ad::scale(l_rec, cfg_.beta * inv));
            tape.backward(loss);
        } catch (const Error& e) {
            if (e.code() != "NonFiniteValue") throw;
            est = rec = std::numeric_limits<double>::quiet_NaN();
        }
        if (!std::isfinite(est) || !std::isfinite(rec))
            throw Error("NonFiniteLoss", "quadruple with equation " + expr::to_prefix_text(q->eq));
        out.est += est * inv;
        out.rec += rec * inv;
    }
    out.total = joint_loss(out.est, out.rec, cfg_);
    ad::clip_grad_norm(model_.params(), cfg_.clip_norm);
    opt_.step(model_.params());
    return out;
}

FinetuneResult run_finetune(nn::Model& model, const std::vector<Quadruple>& quadruples,
                            const FinetuneConfig& cfg, std::uint64_t seed,
                            const std::function<void(int, const Losses&)>& on_epoch) {
    Trainer trainer(model, cfg);
    trainer.apply_freeze_policy();
    FinetuneResult result;
    std::vector<const Quadruple*> order;
    for (const auto& q : quadruples) order.push_back(&q);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng rng = make_rng(seed, "finetune-shuffle", static_cast<std::uint64_t>(epoch));
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
        Losses mean;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            const Losses l = trainer.step(std::span(order).subspan(start, end - start));
            mean.total += l.total;
            mean.est += l.est;
            mean.rec += l.rec;
            ++batches;
        }
        if (batches > 0) {
            mean.total /= static_cast<double>(batches);
            mean.est /= static_cast<double>(batches);
            mean.rec /= static_cast<double>(batches);
        }
        result.epochs.push_back(mean);
        if (on_epoch) on_epoch(epoch, mean);
    }
    return result;
}

}  // namespace equate::finetune
