#include "equate/expr.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <sstream>

namespace equate::expr {

namespace {

constexpr std::array<std::string_view, kNumOps> kOpNames{
    "add", "sub", "mul", "div", "pow2", "sqrt", "sin", "cos", "exp", "log", "abs"};

}  // namespace

bool is_binary(Op op) {
    return op == Op::Add || op == Op::Sub || op == Op::Mul || op == Op::Div;
}

std::string_view op_name(Op op) { return kOpNames[static_cast<std::size_t>(op)]; }

std::optional<Op> op_from_name(std::string_view name) {
    for (std::size_t i = 0; i < kNumOps; ++i)
        if (kOpNames[i] == name) return static_cast<Op>(i);
    return std::nullopt;
}

Token Token::op(Op o) {
    Token t;
    t.kind = is_binary(o) ? TokenKind::BinaryOp : TokenKind::UnaryOp;
    t.code = static_cast<std::uint8_t>(o);
    return t;
}

Token Token::variable(int index) {
    if (index < 0 || index >= kMaxVariables)
        throw Error("VariableOutOfRange", "variable index " + std::to_string(index));
    Token t;
    t.kind = TokenKind::Variable;
    t.code = static_cast<std::uint8_t>(index);
    return t;
}

Token Token::constant(double v) {
    Token t;
    t.kind = TokenKind::Constant;
    t.value = v;
    return t;
}

Token Token::placeholder_constant(double initial) {
    Token t = constant(initial);
    t.placeholder = true;
    return t;
}

Token Token::special(SpecialToken s) {
    Token t;
    t.kind = TokenKind::Special;
    t.code = static_cast<std::uint8_t>(s);
    return t;
}

int Token::arity() const {
    switch (kind) {
        case TokenKind::BinaryOp: return 2;
        case TokenKind::UnaryOp: return 1;
        default: return 0;
    }
}

std::string format_real(double v) {
    if (v == 0.0) return std::signbit(v) ? "-0" : "0";
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

namespace {

std::string literal_text(double v) {
    std::string s = format_real(v);
    if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
    return s;
}

}  // namespace

std::string Token::symbol() const {
    switch (kind) {
        case TokenKind::BinaryOp:
        case TokenKind::UnaryOp: return std::string(op_name(as_op()));
        case TokenKind::Variable: return "x_" + std::to_string(code);
        case TokenKind::Constant: return placeholder ? "C" : literal_text(value);
        case TokenKind::Special:
            switch (static_cast<SpecialToken>(code)) {
                case SpecialToken::Bos: return "<BOS>";
                case SpecialToken::Eos: return "<EOS>";
                case SpecialToken::Pad: return "<PAD>";
            }
    }
    return "?";
}

std::optional<std::size_t> prefix_scan_failure(std::span<const Token> tokens) {
    if (tokens.empty()) return 0;
    long counter = 1;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i].is_special()) return i;
        if (counter == 0) return i;  // leftover tokens after a complete expression
        counter += tokens[i].arity() - 1;
    }
    if (counter != 0) return tokens.size();
    return std::nullopt;
}

ExprTree ExprTree::leaf(Token t) {
    ExprTree tree;
    tree.nodes_.push_back(Node{t, {-1, -1}});
    return tree;
}

namespace {

void append_shifted(std::vector<Node>& dst, const std::vector<Node>& src) {
    const auto offset = static_cast<std::int32_t>(dst.size());
    for (Node n : src) {
        for (auto& c : n.child)
            if (c >= 0) c += offset;
        dst.push_back(n);
    }
}

}  // namespace

ExprTree ExprTree::unary(Op op, ExprTree arg) {
    if (is_binary(op)) throw Error("ArityMismatch", std::string(op_name(op)) + " is binary");
    ExprTree tree;
    tree.nodes_.push_back(Node{Token::op(op), {1, -1}});
    append_shifted(tree.nodes_, arg.nodes_);
    return tree;
}

ExprTree ExprTree::binary(Op op, ExprTree lhs, ExprTree rhs) {
    if (!is_binary(op)) throw Error("ArityMismatch", std::string(op_name(op)) + " is unary");
    ExprTree tree;
    tree.nodes_.push_back(Node{Token::op(op), {1, static_cast<std::int32_t>(1 + lhs.size())}});
    append_shifted(tree.nodes_, lhs.nodes_);
    append_shifted(tree.nodes_, rhs.nodes_);
    return tree;
}

std::vector<std::size_t> ExprTree::constant_nodes() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i)
        if (nodes_[i].token.is_constant()) out.push_back(i);
    return out;
}

void ExprTree::set_constant(std::size_t node, double value) {
    auto& tok = nodes_.at(node).token;
    if (!tok.is_constant()) throw Error("NotAConstant", "node " + std::to_string(node));
    tok.value = value;
    tok.placeholder = false;
}

int ExprTree::depth() const {
    if (nodes_.empty()) return 0;
    std::vector<int> d(nodes_.size(), 1);
    int best = 1;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        best = std::max(best, d[i]);
        for (auto c : nodes_[i].child)
            if (c >= 0) d[static_cast<std::size_t>(c)] = d[i] + 1;
    }
    return best;
}

ExprTree parse_prefix(std::span<const Token> tokens) {
    if (auto bad = prefix_scan_failure(tokens)) {
        if (*bad >= tokens.size()) throw MalformedPrefix(*bad, "unexpected end of input");
        if (tokens[*bad].is_special()) throw MalformedPrefix(*bad, "special token inside expression");
        throw MalformedPrefix(*bad, "leftover tokens");
    }
    // The scan guarantees the pre-order layout matches the token order; only
    // child links need to be recovered.
    ExprTree tree;
    tree.nodes_.resize(tokens.size());
    std::vector<std::size_t> open;  // nodes still waiting for children
    std::vector<int> filled(tokens.size(), 0);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        tree.nodes_[i].token = tokens[i];
        if (!open.empty()) {
            const auto parent = open.back();
            tree.nodes_[parent].child[static_cast<std::size_t>(filled[parent])] =
                static_cast<std::int32_t>(i);
            if (++filled[parent] == tokens[parent].arity()) open.pop_back();
        }
        if (tokens[i].arity() > 0) open.push_back(i);
    }
    return tree;
}

namespace {

void emit(const ExprTree& tree, std::size_t i, TokenSeq& out) {
    const Node& n = tree.node(i);
    out.push_back(n.token);
    for (int k = 0; k < n.token.arity(); ++k) emit(tree, static_cast<std::size_t>(n.child[k]), out);
}

}  // namespace

TokenSeq serialize_prefix(const ExprTree& tree) {
    TokenSeq out;
    out.reserve(tree.size());
    if (!tree.empty()) emit(tree, 0, out);
    return out;
}

std::size_t complexity(const ExprTree& tree) { return serialize_prefix(tree).size(); }

std::string_view domain_error_name(DomainErrorKind k) {
    switch (k) {
        case DomainErrorKind::None: return "None";
        case DomainErrorKind::DivByZero: return "DivByZero";
        case DomainErrorKind::LogNonPositive: return "LogNonPositive";
        case DomainErrorKind::SqrtNegative: return "SqrtNegative";
        case DomainErrorKind::NonFinite: return "NonFinite";
    }
    return "?";
}

namespace {

Evaluation eval_node(const ExprTree& tree, std::size_t i, std::span<const double> row) {
    const Node& n = tree.node(i);
    const Token& t = n.token;
    switch (t.kind) {
        case TokenKind::Constant: return {t.value, DomainErrorKind::None};
        case TokenKind::Variable: {
            if (static_cast<std::size_t>(t.code) >= row.size())
                throw Error("VariableOutOfRange", "x_" + std::to_string(t.code) + " with " +
                                                      std::to_string(row.size()) + " features");
            return {row[t.code], DomainErrorKind::None};
        }
        case TokenKind::Special: throw Error("MalformedTree", "special token in tree");
        default: break;
    }
    const Evaluation a = eval_node(tree, static_cast<std::size_t>(n.child[0]), row);
    if (!a.ok()) return a;
    double v = 0.0;
    if (t.kind == TokenKind::BinaryOp) {
        const Evaluation b = eval_node(tree, static_cast<std::size_t>(n.child[1]), row);
        if (!b.ok()) return b;
        switch (t.as_op()) {
            case Op::Add: v = a.value + b.value; break;
            case Op::Sub: v = a.value - b.value; break;
            case Op::Mul: v = a.value * b.value; break;
            case Op::Div:
                if (b.value == 0.0) return {0.0, DomainErrorKind::DivByZero};
                v = a.value / b.value;
                break;
            default: break;
        }
    } else {
        const double x = a.value;
        switch (t.as_op()) {
            case Op::Pow2: v = x * x; break;
            case Op::Sqrt:
                if (x < 0.0) return {0.0, DomainErrorKind::SqrtNegative};
                v = std::sqrt(x);
                break;
            case Op::Sin: v = std::sin(x); break;
            case Op::Cos: v = std::cos(x); break;
            case Op::Exp: v = std::exp(x); break;
            case Op::Log:
                if (x <= 0.0) return {0.0, DomainErrorKind::LogNonPositive};
                v = std::log(x);
                break;
            case Op::Abs: v = std::fabs(x); break;
            default: break;
        }
    }
    if (!std::isfinite(v)) return {0.0, DomainErrorKind::NonFinite};
    return {v, DomainErrorKind::None};
}

}  // namespace

Evaluation evaluate(const ExprTree& tree, std::span<const double> row) {
    if (tree.empty()) throw Error("MalformedTree", "empty tree");
    return eval_node(tree, 0, row);
}

RowEvaluation evaluate_rows(const ExprTree& tree, const DataMatrix& x) {
    RowEvaluation out;
    out.values.resize(x.rows);
    out.flagged.resize(x.rows, 0);
    for (std::size_t r = 0; r < x.rows; ++r) {
        const Evaluation e = evaluate(tree, x.row(r));
        if (e.ok()) {
            out.values[r] = e.value;
        } else {
            out.values[r] = std::nan("");
            out.flagged[r] = 1;
            ++out.error_count;
        }
    }
    return out;
}

OperatorWeights OperatorWeights::uniform() {
    OperatorWeights w;
    w.op.fill(1.0);
    return w;
}

OperatorWeights OperatorWeights::from_names(std::span<const std::string> names) {
    OperatorWeights w;
    for (const auto& n : names) {
        auto op = op_from_name(n);
        if (!op) throw Error("UnknownOperator", n);
        w.op[static_cast<std::size_t>(*op)] = 1.0;
    }
    return w;
}

namespace {

ExprTree random_leaf(Rng& rng, int num_vars, const OperatorWeights& w) {
    const double u = uniform01(rng);
    if (u < w.variable_probability)
        return ExprTree::leaf(Token::variable(static_cast<int>(uniform_index(rng, num_vars))));
    if (uniform01(rng) < w.placeholder_probability)
        return ExprTree::leaf(Token::placeholder_constant());
    const auto& lits = Vocabulary::kLiterals;
    return ExprTree::leaf(Token::constant(lits[uniform_index(rng, lits.size())]));
}

ExprTree random_subtree(Rng& rng, int depth_left, int num_vars, const OperatorWeights& w,
                        double op_total) {
    if (depth_left <= 1 || op_total <= 0.0 || uniform01(rng) < w.leaf_probability)
        return random_leaf(rng, num_vars, w);
    double pick = uniform01(rng) * op_total;
    std::size_t chosen = 0;
    for (std::size_t i = 0; i < kNumOps; ++i) {
        if (w.op[i] <= 0.0) continue;
        chosen = i;
        if (pick < w.op[i]) break;
        pick -= w.op[i];
    }
    const Op op = static_cast<Op>(chosen);
    if (is_binary(op)) {
        ExprTree lhs = random_subtree(rng, depth_left - 1, num_vars, w, op_total);
        ExprTree rhs = random_subtree(rng, depth_left - 1, num_vars, w, op_total);
        return ExprTree::binary(op, std::move(lhs), std::move(rhs));
    }
    return ExprTree::unary(op, random_subtree(rng, depth_left - 1, num_vars, w, op_total));
}

}  // namespace

ExprTree random_expr(Rng& rng, int max_depth, int num_vars, const OperatorWeights& weights) {
    if (max_depth < 1) throw Error("InvalidArgument", "max_depth must be >= 1");
    if (num_vars < 1 || num_vars > kMaxVariables)
        throw Error("InvalidArgument", "num_vars must be in [1, 10]");
    double total = 0.0;
    for (double v : weights.op) total += std::max(0.0, v);
    return random_subtree(rng, max_depth, num_vars, weights, total);
}

namespace {

void infix(const ExprTree& tree, std::size_t i, std::string& out) {
    const Node& n = tree.node(i);
    const Token& t = n.token;
    switch (t.kind) {
        case TokenKind::Constant: out += t.placeholder ? "C" : format_real(t.value); return;
        case TokenKind::Variable: out += "x_" + std::to_string(t.code); return;
        case TokenKind::Special: out += t.symbol(); return;
        default: break;
    }
    const auto a = static_cast<std::size_t>(n.child[0]);
    if (t.kind == TokenKind::BinaryOp) {
        static constexpr std::array<std::string_view, 4> sym{" + ", " - ", " * ", " / "};
        out += '(';
        infix(tree, a, out);
        out += sym[t.code];
        infix(tree, static_cast<std::size_t>(n.child[1]), out);
        out += ')';
        return;
    }
    if (t.as_op() == Op::Pow2) {
        out += '(';
        infix(tree, a, out);
        out += " ^ 2)";
        return;
    }
    out += op_name(t.as_op());
    out += '(';
    infix(tree, a, out);
    out += ')';
}

}  // namespace

std::string render_infix(const ExprTree& tree) {
    std::string out;
    if (!tree.empty()) infix(tree, 0, out);
    return out;
}

std::string to_prefix_text(std::span<const Token> tokens) {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) out += ' ';
        out += tokens[i].symbol();
    }
    return out;
}

TokenSeq parse_prefix_text(std::string_view text) {
    TokenSeq out;
    std::size_t pos = 0;
    while (pos < text.size()) {
        while (pos < text.size() && std::isspace(static_cast<unsigned char>(text[pos]))) ++pos;
        if (pos >= text.size()) break;
        std::size_t end = pos;
        while (end < text.size() && !std::isspace(static_cast<unsigned char>(text[end]))) ++end;
        const std::string_view sym = text.substr(pos, end - pos);
        if (auto op = op_from_name(sym)) {
            out.push_back(Token::op(*op));
        } else if (sym == "C") {
            out.push_back(Token::placeholder_constant());
        } else if (sym == "<BOS>") {
            out.push_back(Token::special(SpecialToken::Bos));
        } else if (sym == "<EOS>") {
            out.push_back(Token::special(SpecialToken::Eos));
        } else if (sym == "<PAD>") {
            out.push_back(Token::special(SpecialToken::Pad));
        } else if (sym.size() > 2 && sym.substr(0, 2) == "x_") {
            int idx = -1;
            auto res = std::from_chars(sym.data() + 2, sym.data() + sym.size(), idx);
            if (res.ec != std::errc() || res.ptr != sym.data() + sym.size())
                throw Error("UnknownSymbol", std::string(sym));
            out.push_back(Token::variable(idx));
        } else {
            double v = 0.0;
            auto res = std::from_chars(sym.data(), sym.data() + sym.size(), v);
            if (res.ec != std::errc() || res.ptr != sym.data() + sym.size() || !std::isfinite(v))
                throw Error("UnknownSymbol", std::string(sym));
            out.push_back(Token::constant(v));
        }
        pos = end;
    }
    return out;
}

bool Vocabulary::is_literal(double v) {
    return std::find(kLiterals.begin(), kLiterals.end(), v) != kLiterals.end();
}

int Vocabulary::id_of(const Token& t) {
    switch (t.kind) {
        case TokenKind::BinaryOp:
        case TokenKind::UnaryOp: return kFirstOp + t.code;
        case TokenKind::Variable: return kFirstVar + t.code;
        case TokenKind::Constant: {
            if (t.placeholder) return kPlaceholder;
            auto it = std::find(kLiterals.begin(), kLiterals.end(), t.value);
            if (it == kLiterals.end()) return kPlaceholder;
            return kFirstLiteral + static_cast<int>(it - kLiterals.begin());
        }
        case TokenKind::Special:
            switch (static_cast<SpecialToken>(t.code)) {
                case SpecialToken::Bos: return kBos;
                case SpecialToken::Eos: return kEos;
                case SpecialToken::Pad: return kPad;
            }
    }
    return kPad;
}

Token Vocabulary::token_of(int id) {
    if (id == kPad) return Token::special(SpecialToken::Pad);
    if (id == kBos) return Token::special(SpecialToken::Bos);
    if (id == kEos) return Token::special(SpecialToken::Eos);
    if (id >= kFirstOp && id < kFirstVar) return Token::op(static_cast<Op>(id - kFirstOp));
    if (id >= kFirstVar && id < kPlaceholder) return Token::variable(id - kFirstVar);
    if (id == kPlaceholder) return Token::placeholder_constant();
    if (id >= kFirstLiteral && id < kSize)
        return Token::constant(kLiterals[static_cast<std::size_t>(id - kFirstLiteral)]);
    throw Error("IndexOutOfRange", "token id " + std::to_string(id));
}

std::vector<int> Vocabulary::encode(std::span<const Token> tokens) {
    std::vector<int> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) ids.push_back(id_of(t));
    return ids;
}

}  // namespace equate::expr
