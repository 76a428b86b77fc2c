#include "equate/nn.hpp"

#include <fnmatch.h>

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

namespace equate::nn {

using namespace ad;
using expr::Token;
using expr::TokenSeq;
using expr::Vocabulary;

namespace {

constexpr int kValueSlots = expr::kMaxVariables + 1;  // features + label
constexpr int kSignRows = 2;
constexpr int kDigitRows = 40;                         // 4 positions x 10 digits
constexpr int kExponentRows = kMaxExponent - kMinExponent + 1;
constexpr int kDigitBase = kSignRows;
constexpr int kExponentBase = kDigitBase + kDigitRows;
constexpr int kSlotBase = kExponentBase + kExponentRows;
constexpr int kValueTableRows = kSlotBase + kValueSlots;
constexpr double kMaskValue = -1e9;

struct Lin {
    Tensor w, b;
};
struct Norm {
    Tensor g, b;
};
struct Attn {
    Tensor wq, wk, wv, wo, bo;
};
struct Ffn {
    Lin l1, l2;
};
struct EncLayer {
    Norm ln1;
    Attn attn;
    Norm ln2;
    Ffn ffn;
};
struct DecLayer {
    Norm ln1;
    Attn self;
    Norm ln2;
    Attn cross;
    Norm ln3;
    Ffn ffn;
};

class Init {
public:
    Init(ParamStore& store, std::uint64_t seed) : store_(store), rng_(make_rng(seed, "model-init")) {}

    Tensor matrix(const std::string& name, std::size_t in, std::size_t out) {
        const double a = std::sqrt(6.0 / static_cast<double>(in + out));
        return uniform(name, {in, out}, a);
    }
    Tensor uniform(const std::string& name, Shape shape, double a) {
        std::vector<double> v(shape_size(shape));
        for (auto& x : v) x = equate::uniform(rng_, -a, a);
        return store_.add(name, Tensor::from(std::move(shape), std::move(v)));
    }
    Tensor constant(const std::string& name, Shape shape, double c) {
        return store_.add(name, Tensor::full(std::move(shape), c));
    }
    Lin lin(const std::string& name, std::size_t in, std::size_t out) {
        return {matrix(name + ".w", in, out), constant(name + ".b", {1, out}, 0.0)};
    }
    Norm norm(const std::string& name, std::size_t d) {
        return {constant(name + ".g", {1, d}, 1.0), constant(name + ".b", {1, d}, 0.0)};
    }
    Attn attn(const std::string& name, std::size_t d) {
        return {matrix(name + ".wq", d, d), matrix(name + ".wk", d, d), matrix(name + ".wv", d, d),
                matrix(name + ".wo", d, d), constant(name + ".bo", {1, d}, 0.0)};
    }
    Ffn ffn(const std::string& name, std::size_t d, std::size_t h) {
        return {lin(name + ".l1", d, h), lin(name + ".l2", h, d)};
    }

private:
    ParamStore& store_;
    Rng rng_;
};

Tensor linear(const Tensor& x, const Lin& l) { return add_row(matmul(x, l.w), l.b); }
Tensor norm(const Tensor& x, const Norm& n) { return layer_norm(x, n.g, n.b); }
Tensor ffn(const Tensor& x, const Ffn& f) { return linear(relu(linear(x, f.l1)), f.l2); }

Tensor multi_head(const Tensor& xq, const Tensor& xkv, const Attn& a, int heads, const Tensor* mask) {
    Tensor q = matmul(xq, a.wq), k = matmul(xkv, a.wk), v = matmul(xkv, a.wv);
    const std::size_t d = q.cols(), dh = d / static_cast<std::size_t>(heads);
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> outs;
    for (int h = 0; h < heads; ++h) {
        const std::size_t off = static_cast<std::size_t>(h) * dh;
        Tensor qh = heads == 1 ? q : slice(q, 1, off, dh);
        Tensor kh = heads == 1 ? k : slice(k, 1, off, dh);
        Tensor vh = heads == 1 ? v : slice(v, 1, off, dh);
        Tensor s = scale(matmul(qh, transpose(kh)), inv);
        if (mask) s = add(s, *mask);
        outs.push_back(matmul(softmax(s, 1), vh));
    }
    Tensor o = heads == 1 ? outs[0] : concat(outs, 1);
    return add_row(matmul(o, a.wo), a.bo);
}

// Plain row-vector kernels for incremental decoding.
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::RowVectorXd;

Eigen::Map<const RowMat> mat(const Tensor& t) {
    return {t.values().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}
Eigen::Map<const Vec> vec(const Tensor& t) {
    return {t.values().data(), static_cast<Eigen::Index>(t.size())};
}

Vec norm_vec(const Vec& x, const Norm& n) {
    const double mean = x.mean();
    const double var = (x.array() - mean).square().sum() / static_cast<double>(x.size());
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    return ((x.array() - mean) * inv * vec(n.g).array() + vec(n.b).array()).matrix();
}

Vec lin_vec(const Vec& x, const Lin& l) { return x * mat(l.w) + vec(l.b); }

Vec ffn_vec(const Vec& x, const Ffn& f) {
    return lin_vec(lin_vec(x, f.l1).cwiseMax(0.0), f.l2);
}

// Attention of one query row over cached key/value rows.
Vec attend_vec(const Vec& q, const RowMat& keys, const RowMat& values, Eigen::Index n, int heads) {
    const Eigen::Index d = q.size(), dh = d / heads;
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    Vec out(d);
    std::vector<double> w(static_cast<std::size_t>(n));
    for (int h = 0; h < heads; ++h) {
        const Eigen::Index off = h * dh;
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < n; ++j) {
            w[j] = q.segment(off, dh).dot(keys.row(j).segment(off, dh)) * inv;
            mx = std::max(mx, w[j]);
        }
        double total = 0.0;
        for (Eigen::Index j = 0; j < n; ++j) {
            w[j] = std::exp(w[j] - mx);
            total += w[j];
        }
        Vec acc = Vec::Zero(dh);
        for (Eigen::Index j = 0; j < n; ++j) acc += (w[j] / total) * values.row(j).segment(off, dh);
        out.segment(off, dh) = acc;
    }
    return out;
}

Tensor causal_mask(std::size_t n) {
    std::vector<double> m(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) m[i * n + j] = kMaskValue;
    return Tensor::from({n, n}, std::move(m));
}

void require_width(const Tensor& t, int d, const char* what) {
    if (t.size() != static_cast<std::size_t>(d))
        throw Error("ShapeMismatch", std::string(what) + " must have width " + std::to_string(d));
}

}  // namespace

struct Model::Impl {
    Tensor value_table;
    Lin data_in;
    std::vector<EncLayer> enc;
    Norm enc_final;

    Tensor eq_embed, lstm_wx, lstm_wh, lstm_b;
    Lin eq_proj;

    Tensor fq, fk, fv;
    Lin ev1, ev2;

    Tensor tok_embed, pos_embed;
    Lin mem;
    std::vector<DecLayer> dec;
    Norm head_norm;
    Lin head;
};

void ModelConfig::validate() const {
    auto bad = [](const std::string& field, const std::string& why) {
        throw Error("InvalidConfig", "model." + field + " " + why);
    };
    if (d_model <= 0) bad("d_model", "must be positive");
    if (n_heads <= 0 || d_model % n_heads != 0) bad("n_heads", "must divide d_model");
    if (n_encoder_layers < 0) bad("n_encoder_layers", "must be >= 0");
    if (n_decoder_layers < 1) bad("n_decoder_layers", "must be >= 1");
    if (ffn_hidden <= 0) bad("ffn_hidden", "must be positive");
    if (evaluator_hidden <= 0) bad("evaluator_hidden", "must be positive");
    if (value_dim <= 0) bad("value_dim", "must be positive");
    if (token_dim <= 0) bad("token_dim", "must be positive");
    if (lstm_hidden <= 0) bad("lstm_hidden", "must be positive");
    if (memory_slots <= 0) bad("memory_slots", "must be positive");
    if (max_len < 2) bad("max_len", "must be >= 2");
    if (dtype != "float64" && dtype != "float32") bad("dtype", "must be float64 or float32");
}

json to_json(const ModelConfig& c) {
    return json{{"d_model", c.d_model},
                {"n_heads", c.n_heads},
                {"n_encoder_layers", c.n_encoder_layers},
                {"n_decoder_layers", c.n_decoder_layers},
                {"ffn_hidden", c.ffn_hidden},
                {"evaluator_hidden", c.evaluator_hidden},
                {"value_dim", c.value_dim},
                {"token_dim", c.token_dim},
                {"lstm_hidden", c.lstm_hidden},
                {"memory_slots", c.memory_slots},
                {"max_len", c.max_len},
                {"multi_slot", c.multi_slot},
                {"dtype", c.dtype}};
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    if (!j.is_object()) throw Error("InvalidConfig", "model must be an object");
    const json defaults = to_json(c);
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!defaults.contains(it.key())) throw Error("InvalidConfig", "model." + it.key() + " is not a known field");
    auto get = [&](const char* key, auto& field) {
        if (!j.contains(key)) return;
        try {
            j.at(key).get_to(field);
        } catch (const json::exception&) {
            throw Error("InvalidConfig", std::string("model.") + key + " has the wrong type");
        }
    };
    get("d_model", c.d_model);
    get("n_heads", c.n_heads);
    get("n_encoder_layers", c.n_encoder_layers);
    get("n_decoder_layers", c.n_decoder_layers);
    get("ffn_hidden", c.ffn_hidden);
    get("evaluator_hidden", c.evaluator_hidden);
    get("value_dim", c.value_dim);
    get("token_dim", c.token_dim);
    get("lstm_hidden", c.lstm_hidden);
    get("memory_slots", c.memory_slots);
    get("max_len", c.max_len);
    get("multi_slot", c.multi_slot);
    get("dtype", c.dtype);
    c.validate();
    return c;
}

NumericCode encode_number(double v) {
    NumericCode code;
    code.negative = std::signbit(v) && v != 0.0 ? 1 : 0;
    const double a = std::abs(v);
    if (a == 0.0) {
        code.exponent = kMinExponent;
        return code;
    }
    int e = static_cast<int>(std::floor(std::log10(a))) - 3;
    long m = std::lround(a / std::pow(10.0, e));
    // log10 rounding can be off by one near powers of ten.
    if (m >= 10000) {
        ++e;
        m = std::lround(a / std::pow(10.0, e));
    } else if (m < 1000) {
        --e;
        m = std::lround(a / std::pow(10.0, e));
    }
    if (m >= 10000) {
        m = 1000;
        ++e;
    }
    if (e > kMaxExponent) {
        e = kMaxExponent;
        m = 9999;
    } else if (e < kMinExponent) {
        m = std::lround(a / std::pow(10.0, kMinExponent));
        e = kMinExponent;
    }
    code.mantissa = static_cast<int>(m);
    code.exponent = e;
    return code;
}

Model::Model(const ModelConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
    cfg_.validate();
    auto impl = std::make_shared<Impl>();
    Init init(store_, init_seed);
    const auto d = static_cast<std::size_t>(cfg_.d_model);
    const auto f = static_cast<std::size_t>(cfg_.ffn_hidden);
    const auto vd = static_cast<std::size_t>(cfg_.value_dim);
    const auto vocab = static_cast<std::size_t>(Vocabulary::kSize);

    impl->value_table = init.uniform("data_encoder.value_table", {kValueTableRows, vd}, 0.5);
    impl->data_in = init.lin("data_encoder.in", kValueSlots * vd, d);
    for (int l = 0; l < cfg_.n_encoder_layers; ++l) {
        const std::string p = "data_encoder.layer" + std::to_string(l);
        impl->enc.push_back({init.norm(p + ".ln1", d), init.attn(p + ".attn", d), init.norm(p + ".ln2", d),
                             init.ffn(p + ".ffn", d, f)});
    }
    impl->enc_final = init.norm("data_encoder.final_ln", d);

    const auto td = static_cast<std::size_t>(cfg_.token_dim);
    const auto hd = static_cast<std::size_t>(cfg_.lstm_hidden);
    impl->eq_embed = init.uniform("eq_encoder.embed", {vocab, td}, 0.5);
    impl->lstm_wx = init.matrix("eq_encoder.lstm.wx", td, 4 * hd);
    impl->lstm_wh = init.matrix("eq_encoder.lstm.wh", hd, 4 * hd);
    {
        std::vector<double> b(4 * hd, 0.0);
        for (std::size_t i = hd; i < 2 * hd; ++i) b[i] = 1.0;  // forget gate bias
        impl->lstm_b = store_.add("eq_encoder.lstm.b", Tensor::from({1, 4 * hd}, std::move(b)));
    }
    impl->eq_proj = init.lin("eq_encoder.proj", hd, d);

    impl->fq = init.matrix("fusion.wq", d, d);
    impl->fk = init.matrix("fusion.wk", d, d);
    // Zero value map: E_f starts equal to E_n, so a pretrained decoder keeps
    // its behaviour when fine-tuning begins.
    impl->fv = init.constant("fusion.wv", {d, d}, 0.0);

    const auto eh = static_cast<std::size_t>(cfg_.evaluator_hidden);
    impl->ev1 = init.lin("evaluator.l1", d, eh);
    impl->ev2 = init.lin("evaluator.l2", eh, 1);

    const auto slots = static_cast<std::size_t>(cfg_.memory_slots);
    impl->tok_embed = init.uniform("decoder.embed.tok", {vocab, d}, 0.1);
    impl->pos_embed = init.uniform("decoder.embed.pos", {static_cast<std::size_t>(cfg_.max_len) + 1, d}, 0.1);
    impl->mem = init.lin("decoder.memory", d, slots * d);
    for (int l = 0; l < cfg_.n_decoder_layers; ++l) {
        const std::string p = "decoder.layer" + std::to_string(l);
        impl->dec.push_back({init.norm(p + ".ln1", d), init.attn(p + ".self", d), init.norm(p + ".ln2", d),
                             init.attn(p + ".cross", d), init.norm(p + ".ln3", d), init.ffn(p + ".ffn", d, f)});
    }
    impl->head_norm = init.norm("decoder.head.ln", d);
    impl->head = init.lin("decoder.head.out", d, vocab);
    impl_ = std::move(impl);
}

std::unique_ptr<Model> Model::clone() const {
    auto copy = std::make_unique<Model>(cfg_, 0);
    auto& dst = copy->store_.params();
    const auto& src = store_.params();
    for (std::size_t i = 0; i < src.size(); ++i) {
        auto in = src[i].tensor.values();
        std::copy(in.begin(), in.end(), dst[i].tensor.mutable_values().begin());
        dst[i].frozen = src[i].frozen;
    }
    copy->evaluator_linear_ = evaluator_linear_;
    copy->eq_encoder_enabled_ = eq_encoder_enabled_;
    return copy;
}

Tensor Model::encode_data(const DataMatrix& x, std::span<const double> y) const {
    if (x.rows == 0) throw Error("EmptyData", "subset has no rows");
    if (x.cols > static_cast<std::size_t>(expr::kMaxVariables))
        throw Error("TooManyFeatures", std::to_string(x.cols) + " features");
    if (y.size() != x.rows) throw Error("LengthMismatch", "labels do not match rows");
    for (double v : x.values)
        if (!std::isfinite(v)) throw Error("NonFiniteInput", "feature value");
    for (double v : y)
        if (!std::isfinite(v)) throw Error("NonFiniteInput", "label value");

    const std::size_t n = x.rows;
    std::vector<double> hot(n * kValueSlots * kValueTableRows, 0.0);
    auto put = [&](std::size_t r, int slot, double v) {
        double* h = hot.data() + (r * kValueSlots + static_cast<std::size_t>(slot)) * kValueTableRows;
        const NumericCode c = encode_number(v);
        h[c.negative] += 1.0;
        int m = c.mantissa;
        for (int pos = 3; pos >= 0; --pos) {
            h[kDigitBase + pos * 10 + m % 10] += 1.0;
            m /= 10;
        }
        h[kExponentBase + c.exponent - kMinExponent] += 1.0;
        h[kSlotBase + slot] += 1.0;
    };
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < x.cols; ++c) put(r, static_cast<int>(c), x(r, c));
        put(r, kValueSlots - 1, y[r]);
    }
    const Impl& p = *impl_;
    Tensor onehot = Tensor::from({n * kValueSlots, kValueTableRows}, std::move(hot));
    Tensor slots = matmul(onehot, p.value_table);
    Tensor h = linear(reshape(slots, {n, kValueSlots * static_cast<std::size_t>(cfg_.value_dim)}), p.data_in);
    for (const auto& layer : p.enc) {
        Tensor a = norm(h, layer.ln1);
        h = add(h, multi_head(a, a, layer.attn, cfg_.n_heads, nullptr));
        h = add(h, ffn(norm(h, layer.ln2), layer.ffn));
    }
    return mean_rows(norm(h, p.enc_final));
}

EquationStates Model::encode_equation_states(const TokenSeq& tokens) const {
    if (tokens.empty()) throw Error("EmptySequence", "equation has no tokens");
    if (tokens.size() > static_cast<std::size_t>(cfg_.max_len))
        throw Error("SequenceTooLong", std::to_string(tokens.size()) + " > " + std::to_string(cfg_.max_len));
    const Impl& p = *impl_;
    const std::vector<int> ids = Vocabulary::encode(tokens);
    const std::size_t hd = static_cast<std::size_t>(cfg_.lstm_hidden);
    Tensor xw = add_row(matmul(gather_rows(p.eq_embed, ids), p.lstm_wx), p.lstm_b);
    Tensor h, c;
    std::vector<Tensor> hs;
    for (std::size_t t = 0; t < ids.size(); ++t) {
        Tensor g = slice(xw, 0, t, 1);
        if (t > 0) g = add(g, matmul(h, p.lstm_wh));
        Tensor i = sigmoid(slice(g, 1, 0, hd));
        Tensor f = sigmoid(slice(g, 1, hd, hd));
        Tensor cand = ad::tanh(slice(g, 1, 2 * hd, hd));
        Tensor o = sigmoid(slice(g, 1, 3 * hd, hd));
        c = t > 0 ? add(mul(f, c), mul(i, cand)) : mul(i, cand);
        h = mul(o, ad::tanh(c));
        hs.push_back(h);
    }
    Tensor states = linear(hs.size() == 1 ? hs[0] : concat(hs, 0), p.eq_proj);
    Tensor summary = slice(states, 0, ids.size() - 1, 1);
    return {states, summary};
}

Fusion Model::attentive_fuse(const Tensor& e_n, const EquationStates& eq) const {
    if (!eq_encoder_enabled_) {
        require_width(e_n, cfg_.d_model, "E_n");
        const auto d = static_cast<std::size_t>(cfg_.d_model);
        return {reshape(e_n, {1, d}), Tensor::zeros({1, eq.states.rows()}), Tensor::zeros({1, d})};
    }
    return attentive_fuse(e_n, cfg_.multi_slot ? eq.states : eq.summary);
}

Fusion Model::attentive_fuse(const Tensor& e_n, const Tensor& key_values) const {
    require_width(e_n, cfg_.d_model, "E_n");
    if (key_values.rank() != 2 || key_values.cols() != static_cast<std::size_t>(cfg_.d_model))
        throw Error("ShapeMismatch", "key/value states must be [slots x d_model]");
    const Impl& p = *impl_;
    Tensor en = reshape(e_n, {1, static_cast<std::size_t>(cfg_.d_model)});
    Tensor q = matmul(en, p.fq);
    Tensor k = matmul(key_values, p.fk);
    Tensor v = matmul(key_values, p.fv);
    Tensor scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(cfg_.d_model)));
    Tensor w = softmax(scores, 1);
    Tensor context = matmul(w, v);
    return {add(en, context), w, context};
}

Tensor Model::evaluate_fitness(const Tensor& e_f) const {
    require_width(e_f, cfg_.d_model, "E_f");
    const Impl& p = *impl_;
    Tensor h = linear(reshape(e_f, {1, static_cast<std::size_t>(cfg_.d_model)}), p.ev1);
    if (!evaluator_linear_) h = ad::tanh(h);
    return linear(h, p.ev2);
}

Tensor Model::memory(const Tensor& e_f) const {
    require_width(e_f, cfg_.d_model, "E_f");
    const auto d = static_cast<std::size_t>(cfg_.d_model);
    return reshape(linear(reshape(e_f, {1, d}), impl_->mem), {static_cast<std::size_t>(cfg_.memory_slots), d});
}

Tensor Model::decoder_logits(const Tensor& e_f, std::span<const int> input_ids) const {
    const std::size_t n = input_ids.size();
    if (n == 0) throw Error("EmptySequence", "decoder input is empty");
    if (n > static_cast<std::size_t>(cfg_.max_len) + 1)
        throw Error("SequenceTooLong", std::to_string(n - 1) + " tokens");
    const Impl& p = *impl_;
    Tensor mem = memory(e_f);
    Tensor x = add(gather_rows(p.tok_embed, input_ids), slice(p.pos_embed, 0, 0, n));
    Tensor mask = causal_mask(n);
    for (const auto& layer : p.dec) {
        Tensor a = norm(x, layer.ln1);
        x = add(x, multi_head(a, a, layer.self, cfg_.n_heads, &mask));
        x = add(x, multi_head(norm(x, layer.ln2), mem, layer.cross, cfg_.n_heads, nullptr));
        x = add(x, ffn(norm(x, layer.ln3), layer.ffn));
    }
    return linear(norm(x, p.head_norm), p.head);
}

Tensor Model::reconstruction_loss(const Tensor& e_f, const TokenSeq& target) const {
    if (target.size() > static_cast<std::size_t>(cfg_.max_len))
        throw Error("SequenceTooLong", std::to_string(target.size()) + " tokens");
    std::vector<int> ids = Vocabulary::encode(target);
    std::vector<int> input{Vocabulary::kBos};
    input.insert(input.end(), ids.begin(), ids.end());
    ids.push_back(Vocabulary::kEos);
    return cross_entropy_from_logits(decoder_logits(e_f, input), ids);
}

std::vector<double> Model::decode_step(const Tensor& e_f, const TokenSeq& prefix) const {
    if (prefix.size() >= static_cast<std::size_t>(cfg_.max_len))
        throw Error("SequenceTooLong", "prefix already holds " + std::to_string(prefix.size()) + " tokens");
    std::vector<int> input{Vocabulary::kBos};
    for (const Token& t : prefix) input.push_back(Vocabulary::id_of(t));
    Tensor logits = decoder_logits(e_f, input);
    Tensor probs = softmax(slice(logits, 0, input.size() - 1, 1), 1);
    return {probs.values().begin(), probs.values().end()};
}

Generation Model::generate(const Tensor& e_f, DecodeMode mode, double temperature, Rng& rng,
                           std::size_t max_len) const {
    const std::size_t limit = max_len == 0 ? static_cast<std::size_t>(cfg_.max_len)
                                           : std::min(max_len, static_cast<std::size_t>(cfg_.max_len));
    if (mode == DecodeMode::Sample && !(temperature > 0.0))
        throw Error("InvalidArgument", "sampling temperature must be positive");
    const Impl& p = *impl_;
    const int heads = cfg_.n_heads;
    const auto d = static_cast<Eigen::Index>(cfg_.d_model);

    const Tensor mem_t = memory(e_f);
    const auto mem = mat(mem_t);
    struct Cache {
        RowMat k, v, ck, cv;
    };
    std::vector<Cache> caches(p.dec.size());
    for (std::size_t l = 0; l < p.dec.size(); ++l) {
        caches[l].k.resize(static_cast<Eigen::Index>(limit) + 1, d);
        caches[l].v.resize(static_cast<Eigen::Index>(limit) + 1, d);
        caches[l].ck = mem * mat(p.dec[l].cross.wk);
        caches[l].cv = mem * mat(p.dec[l].cross.wv);
    }
    const auto slots = static_cast<Eigen::Index>(cfg_.memory_slots);

    Generation out;
    long counter = 1;
    int id = Vocabulary::kBos;
    std::vector<double> probs(static_cast<std::size_t>(Vocabulary::kSize));
    for (std::size_t pos = 0; pos <= limit; ++pos) {
        Vec x = mat(p.tok_embed).row(id) + mat(p.pos_embed).row(static_cast<Eigen::Index>(pos));
        const auto n = static_cast<Eigen::Index>(pos) + 1;
        for (std::size_t l = 0; l < p.dec.size(); ++l) {
            const DecLayer& layer = p.dec[l];
            Cache& c = caches[l];
            Vec a = norm_vec(x, layer.ln1);
            c.k.row(n - 1) = a * mat(layer.self.wk);
            c.v.row(n - 1) = a * mat(layer.self.wv);
            Vec q = a * mat(layer.self.wq);
            x += attend_vec(q, c.k, c.v, n, heads) * mat(layer.self.wo) + vec(layer.self.bo);
            Vec q2 = norm_vec(x, layer.ln2) * mat(layer.cross.wq);
            x += attend_vec(q2, c.ck, c.cv, slots, heads) * mat(layer.cross.wo) + vec(layer.cross.bo);
            x += ffn_vec(norm_vec(x, layer.ln3), layer.ffn);
        }
        Vec logits = lin_vec(norm_vec(x, p.head_norm), p.head);
        const double inv_t = mode == DecodeMode::Sample ? 1.0 / temperature : 1.0;
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index i = 0; i < logits.size(); ++i) mx = std::max(mx, logits[i] * inv_t);
        double total = 0.0;
        for (Eigen::Index i = 0; i < logits.size(); ++i) {
            probs[i] = std::exp(logits[i] * inv_t - mx);
            total += probs[i];
        }
        int next = 0;
        if (mode == DecodeMode::Greedy) {
            for (int i = 1; i < Vocabulary::kSize; ++i)
                if (logits[i] > logits[next]) next = i;
        } else {
            double u = uniform01(rng) * total;
            next = Vocabulary::kSize - 1;
            for (int i = 0; i < Vocabulary::kSize; ++i) {
                if (u < probs[i]) {
                    next = i;
                    break;
                }
                u -= probs[i];
            }
        }
        if (next == Vocabulary::kEos) {
            out.hit_eos = true;
            break;
        }
        if (next == Vocabulary::kBos || next == Vocabulary::kPad || counter == 0) break;
        if (out.tokens.size() >= limit) break;
        const Token tok = Vocabulary::token_of(next);
        out.tokens.push_back(tok);
        counter += tok.arity() - 1;
        if (counter > static_cast<long>(limit - out.tokens.size())) break;  // cannot complete
        id = next;
    }
    out.valid = !out.tokens.empty() && expr::is_valid_prefix(out.tokens) &&
                (out.hit_eos || out.tokens.size() == limit);
    return out;
}

void Model::freeze(std::span<const std::string> patterns) {
    for (const auto& pat : patterns) {
        bool any = false;
        for (auto& prm : store_.params())
            if (glob_match(pat, prm.name)) {
                prm.frozen = true;
                any = true;
            }
        if (!any) throw Error("PatternMatchesNothing", pat);
    }
}

void Model::unfreeze_all() {
    for (auto& prm : store_.params()) prm.frozen = false;
}

std::uint64_t Model::frozen_hash() const {
    return store_.hash([](const Parameter& prm) { return prm.frozen; });
}

std::vector<std::string> default_freeze_patterns(const ModelConfig& cfg) {
    std::vector<std::string> out{"data_encoder.*", "decoder.embed.*", "decoder.memory.*"};
    for (int l = 0; l + 1 < cfg.n_decoder_layers; ++l) out.push_back("decoder.layer" + std::to_string(l) + ".*");
    out.push_back("decoder.head.*");
    return out;
}

bool glob_match(std::string_view pattern, std::string_view name) {
    return fnmatch(std::string(pattern).c_str(), std::string(name).c_str(), 0) == 0;
}

namespace {

constexpr char kMagic[4] = {'E', 'Q', 'C', 'K'};

template <class T>
void put(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
bool get(std::istream& in, T& v) {
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    return in.gcount() == static_cast<std::streamsize>(sizeof(T));
}

}  // namespace

std::string checkpoint_bytes(const Model& model, std::uint64_t seed, const json& metadata) {
    const DType dtype = model.config().dtype == "float32" ? DType::F32 : DType::F64;
    json manifest = json::array();
    for (const auto& prm : model.params().params())
        manifest.push_back({{"name", prm.name}, {"shape", prm.tensor.shape()}, {"frozen", prm.frozen}});
    const json header{{"config", to_json(model.config())},
                      {"tensors", manifest},
                      {"seed", seed},
                      {"metadata", metadata}};
    const std::string text = header.dump();

    std::ostringstream buf(std::ios::binary);
    buf.write(kMagic, 4);
    put<std::uint32_t>(buf, kCheckpointVersion);
    put<std::uint64_t>(buf, text.size());
    buf.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& prm : model.params().params()) write_tensor_segment(buf, prm.name, prm.tensor, dtype);
    return buf.str();
}

void save_checkpoint(const std::string& path, const Model& model, std::uint64_t seed, const json& metadata) {
    const std::string bytes = checkpoint_bytes(model, seed, metadata);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("Io", "cannot write " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("Io", "short write to " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("Io", "cannot open " + path);
    char magic[4] = {};
    in.read(magic, 4);
    if (in.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0) throw Error("BadMagic", path + " is not a checkpoint");
    std::uint32_t version = 0;
    if (!get(in, version)) throw Error("CorruptSegment", "truncated header");
    if (version != kCheckpointVersion)
        throw Error("VersionMismatch", "checkpoint version " + std::to_string(version) + ", expected " +
                                           std::to_string(kCheckpointVersion));
    std::uint64_t header_len = 0;
    if (!get(in, header_len) || header_len > (1ull << 30)) throw Error("CorruptSegment", "bad header length");
    std::string text(header_len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(header_len));
    if (static_cast<std::uint64_t>(in.gcount()) != header_len) throw Error("CorruptSegment", "truncated header");

    json header;
    try {
        header = json::parse(text);
    } catch (const json::exception& e) {
        throw Error("CorruptSegment", std::string("header: ") + e.what());
    }
    LoadedCheckpoint out;
    try {
        out.seed = header.at("seed").get<std::uint64_t>();
        out.metadata = header.value("metadata", json::object());
        out.model = std::make_unique<Model>(model_config_from_json(header.at("config")), 0);
        const json& manifest = header.at("tensors");
        auto& params = out.model->params().params();
        if (manifest.size() != params.size()) throw Error("CorruptSegment", "tensor count differs from config");
        for (std::size_t i = 0; i < params.size(); ++i) {
            const json& entry = manifest.at(i);
            TensorSegment seg = read_tensor_segment(in);
            if (seg.name != params[i].name || entry.at("name").get<std::string>() != seg.name)
                throw Error("CorruptSegment", "unexpected tensor " + seg.name);
            if (seg.tensor.shape() != params[i].tensor.shape())
                throw Error("CorruptSegment", "shape of " + seg.name);
            auto src = seg.tensor.values();
            std::copy(src.begin(), src.end(), params[i].tensor.mutable_values().begin());
            params[i].frozen = entry.at("frozen").get<bool>();
        }
    } catch (const json::exception& e) {
        throw Error("CorruptSegment", std::string("header: ") + e.what());
    }
    if (in.peek() != std::char_traits<char>::eof()) throw Error("CorruptSegment", "trailing bytes");
    return out;
}

}  // namespace equate::nn
