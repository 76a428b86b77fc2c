#include "equate/surrogate.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace equate::surrogate {

using expr::ExprTree;
using expr::Token;
using expr::TokenSeq;

void CorpusConfig::validate() const {
    auto bad = [](const std::string& field, const std::string& why) {
        throw Error("InvalidConfig", "corpus." + field + " " + why);
    };
    if (size < 1) bad("size", "must be >= 1");
    if (min_vars < 1 || max_vars > expr::kMaxVariables || min_vars > max_vars)
        bad("min_vars", "and max_vars must satisfy 1 <= min <= max <= 10");
    if (min_depth < 1 || min_depth > max_depth) bad("min_depth", "and max_depth must satisfy 1 <= min <= max");
    if (rows_per_example < 2) bad("rows_per_example", "must be >= 2");
    if (!(input_low < input_high)) bad("input_low", "must be below input_high");
    for (const auto& [name, w] : operator_weights) {
        if (!expr::op_from_name(name)) bad("operator_weights", "has unknown operator " + name);
        if (w < 0.0) bad("operator_weights", "must be non-negative");
    }
}

expr::OperatorWeights operator_weights(const CorpusConfig& cfg) {
    expr::OperatorWeights w;
    for (const auto& [name, weight] : cfg.operator_weights) {
        const auto op = expr::op_from_name(name);
        if (!op) throw Error("UnknownOperator", name);
        w.op[static_cast<std::size_t>(*op)] = weight;
    }
    w.leaf_probability = cfg.leaf_probability;
    w.variable_probability = cfg.variable_probability;
    w.placeholder_probability = cfg.placeholder_probability;
    return w;
}

DataTable sample_dataset(const ExprTree& truth, int num_vars, std::size_t rows, double low, double high,
                         Rng& rng) {
    DataTable t;
    t.x = DataMatrix(rows, static_cast<std::size_t>(num_vars));
    t.y.resize(rows);
    std::size_t failures = 0;
    for (std::size_t r = 0; r < rows;) {
        auto row = t.x.row(r);
        for (auto& v : row) v = uniform(rng, low, high);
        const auto e = expr::evaluate(truth, row);
        if (e.ok()) {
            t.y[r++] = e.value;
            continue;
        }
        if (++failures > 20 * rows + 100) throw Error("UnusableEquation", "too many rows outside the domain");
    }
    return t;
}

namespace {

bool has_variable(const ExprTree& t) {
    return std::any_of(t.nodes().begin(), t.nodes().end(),
                       [](const expr::Node& n) { return n.token.kind == expr::TokenKind::Variable; });
}

// Placeholder leaves get an out-of-vocabulary value so the data carries a
// constant the decoder can only express as C.
ExprTree assign_placeholder_values(const ExprTree& t, Rng& rng) {
    TokenSeq seq = expr::serialize_prefix(t);
    for (auto& tok : seq) {
        if (!tok.placeholder) continue;
        double v = 0.0;
        do {
            v = std::round(uniform(rng, -5.0, 5.0) * 100.0) / 100.0;
        } while (expr::Vocabulary::is_literal(v) || v == 0.0);
        tok = Token::placeholder_constant(v);
    }
    return expr::parse_prefix(seq);
}

bool labels_usable(const std::vector<double>& y, double max_abs) {
    double mean = 0.0;
    for (double v : y) {
        if (!std::isfinite(v) || std::abs(v) > max_abs) return false;
        mean += v;
    }
    mean /= static_cast<double>(y.size());
    double var = 0.0;
    for (double v : y) var += (v - mean) * (v - mean);
    return var / static_cast<double>(y.size()) > 1e-6;
}

}  // namespace

std::vector<PretrainExample> build_corpus(std::uint64_t seed, const CorpusConfig& cfg) {
    cfg.validate();
    const auto weights = operator_weights(cfg);
    std::vector<PretrainExample> corpus;
    corpus.reserve(cfg.size);
    for (std::size_t i = 0; i < cfg.size; ++i) {
        Rng rng = make_rng(seed, "corpus-example", i);
        for (int attempt = 0;; ++attempt) {
            if (attempt > 1000) throw Error("CorpusGeneration", "no usable equation for example " + std::to_string(i));
            const int vars = cfg.min_vars + static_cast<int>(uniform_index(rng, cfg.max_vars - cfg.min_vars + 1));
            const int depth = cfg.min_depth + static_cast<int>(uniform_index(rng, cfg.max_depth - cfg.min_depth + 1));
            ExprTree truth = assign_placeholder_values(expr::random_expr(rng, depth, vars, weights), rng);
            if (!has_variable(truth)) continue;
            DataTable data;
            try {
                data = sample_dataset(truth, vars, cfg.rows_per_example, cfg.input_low, cfg.input_high, rng);
            } catch (const Error&) {
                continue;
            }
            if (!labels_usable(data.y, cfg.max_abs_label)) continue;
            TokenSeq target = expr::serialize_prefix(truth);
            for (auto& tok : target)
                if (tok.placeholder) tok = Token::placeholder_constant();  // the value lives in the data only
            corpus.push_back({std::move(data), std::move(target)});
            break;
        }
    }
    return corpus;
}

PretrainResult pretrain(nn::Model& model, const std::vector<PretrainExample>& corpus, const PretrainConfig& cfg,
                        std::uint64_t seed, const std::function<void(int, double)>& on_epoch) {
    if (corpus.empty()) throw Error("EmptyCorpus", "pretraining needs at least one example");
    if (cfg.batch_size < 1) throw Error("InvalidConfig", "pretrain.batch_size must be >= 1");
    ad::AdamWConfig oc;
    oc.lr = cfg.lr;
    oc.weight_decay = cfg.weight_decay;
    ad::AdamW opt(oc);
    PretrainResult result;
    std::vector<std::size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng rng = make_rng(seed, "pretrain-shuffle", static_cast<std::uint64_t>(epoch));
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
        double total = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            const double inv = 1.0 / static_cast<double>(end - start);
            model.params().zero_grad();
            for (std::size_t k = start; k < end; ++k) {
                const auto& ex = corpus[order[k]];
                ad::Tape tape;
                ad::TapeScope scope(tape);
                double value = 0.0;
                try {
                    ad::Tensor e_n = model.encode_data(ex.data.x, ex.data.y);
                    ad::Tensor loss = model.reconstruction_loss(e_n, ex.target);
                    value = loss.item();
                    tape.backward(ad::scale(loss, inv));
                } catch (const Error& e) {
                    if (e.code() != "NonFiniteValue") throw;
                    value = std::numeric_limits<double>::quiet_NaN();
                }
                if (!std::isfinite(value))
                    throw Error("NonFiniteLoss", "epoch " + std::to_string(epoch) + ", example " +
                                                     std::to_string(order[k]) + " (" +
                                                     expr::to_prefix_text(ex.target) + ")");
                total += value;
            }
            ad::clip_grad_norm(model.params(), cfg.clip_norm);
            opt.step(model.params());
        }
        const double mean = total / static_cast<double>(corpus.size());
        result.loss_curve.push_back(mean);
        if (on_epoch) on_epoch(epoch, mean);
    }
    return result;
}

bool uses_only_variables(const TokenSeq& tokens, int num_vars) {
    return std::all_of(tokens.begin(), tokens.end(), [&](const Token& t) {
        return t.kind != expr::TokenKind::Variable || t.var_index() < num_vars;
    });
}

Suggestion suggest_from_embedding(const nn::Model& model, const ad::Tensor& e_n, int num_vars,
                                  const SuggestConfig& cfg, Rng& rng) {
    Suggestion s;
    for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
        ++s.attempts;
        nn::Generation g = model.generate(e_n, cfg.mode, cfg.temperature, rng);
        if (g.valid && uses_only_variables(g.tokens, num_vars)) {
            s.tokens = std::move(g.tokens);
            s.from_model = true;
            return s;
        }
        if (cfg.mode == nn::DecodeMode::Greedy) break;  // a retry would repeat the same output
    }
    s.tokens = expr::serialize_prefix(
        expr::random_expr(rng, cfg.fallback_depth, num_vars, expr::OperatorWeights::uniform()));
    return s;
}

Suggestion suggest_equation(const nn::Model& model, const DataMatrix& x, std::span<const double> y,
                            const SuggestConfig& cfg, Rng& rng) {
    const ad::Tensor e_n = model.encode_data(x, y);
    return suggest_from_embedding(model, e_n, static_cast<int>(x.cols), cfg, rng);
}

}  // namespace equate::surrogate
