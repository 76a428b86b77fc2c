#include "doctest.h"

#include <cmath>
#include <cstring>
#include <set>

#include "equate/expr.hpp"

using namespace equate;
using namespace equate::expr;

namespace {

Token X(int i) { return Token::variable(i); }
Token K(double v) { return Token::constant(v); }
Token O(Op o) { return Token::op(o); }

// Independent recursive-descent reader used as an oracle for the arity scan.
bool recursive_accepts(std::span<const Token> t, std::size_t& pos) {
    if (pos >= t.size()) return false;
    const Token& tok = t[pos++];
    if (tok.is_special()) return false;
    for (int k = 0; k < tok.arity(); ++k)
        if (!recursive_accepts(t, pos)) return false;
    return true;
}

bool oracle_valid(std::span<const Token> t) {
    std::size_t pos = 0;
    return !t.empty() && recursive_accepts(t, pos) && pos == t.size();
}

}  // namespace

TEST_CASE("parse_prefix builds the smallest binary tree") {
    TokenSeq seq{O(Op::Add), X(0), X(1)};
    ExprTree tree = parse_prefix(seq);
    REQUIRE(tree.size() == 3);
    CHECK(tree.node(0).token == O(Op::Add));
    CHECK(tree.node(tree.node(0).child[0]).token == X(0));
    CHECK(tree.node(tree.node(0).child[1]).token == X(1));
    CHECK(render_infix(tree) == "(x_0 + x_1)");
}

TEST_CASE("unary round trip") {
    TokenSeq seq{O(Op::Sin), X(0)};
    CHECK(serialize_prefix(parse_prefix(seq)) == seq);
}

TEST_CASE("incomplete prefix reports end of input") {
    TokenSeq seq{O(Op::Add), X(0)};
    try {
        parse_prefix(seq);
        FAIL("expected MalformedPrefix");
    } catch (const MalformedPrefix& e) {
        CHECK(e.index() == 2);
    }
    CHECK(prefix_scan_failure(seq) == std::optional<std::size_t>(2));
}

TEST_CASE("leftover tokens are rejected at the first extra token") {
    TokenSeq seq{X(0), X(1)};
    CHECK_THROWS_AS(parse_prefix(seq), MalformedPrefix);
    CHECK(prefix_scan_failure(seq) == std::optional<std::size_t>(1));
}

TEST_CASE("specials inside a sequence are rejected") {
    TokenSeq seq{O(Op::Sin), Token::special(SpecialToken::Eos)};
    CHECK_THROWS_AS(parse_prefix(seq), MalformedPrefix);
    CHECK_THROWS_AS(parse_prefix(TokenSeq{}), MalformedPrefix);
}

TEST_CASE("serialize is pre-order and complexity counts tokens") {
    ExprTree t = ExprTree::binary(Op::Add, ExprTree::leaf(X(0)),
                                  ExprTree::binary(Op::Mul, ExprTree::leaf(X(1)), ExprTree::leaf(X(2))));
    TokenSeq expected{O(Op::Add), X(0), O(Op::Mul), X(1), X(2)};
    CHECK(serialize_prefix(t) == expected);
    CHECK(complexity(t) == 5);
    CHECK(complexity(ExprTree::leaf(X(0))) == 1);
    CHECK(complexity(parse_prefix(TokenSeq{O(Op::Add), X(0), X(1)})) == 3);

    TokenSeq lit = serialize_prefix(ExprTree::leaf(K(2.5)));
    REQUIRE(lit.size() == 1);
    CHECK(lit[0] == K(2.5));
}

TEST_CASE("random trees round trip and agree with the recursive oracle") {
    Rng rng(7);
    auto w = OperatorWeights::uniform();
    w.placeholder_probability = 0.2;
    for (int i = 0; i < 1000; ++i) {
        ExprTree t = random_expr(rng, 6, 4, w);
        TokenSeq s = serialize_prefix(t);
        CHECK(complexity(t) == s.size());
        CHECK(parse_prefix(s) == t);
        CHECK(oracle_valid(s));
        CHECK(is_valid_prefix(s));
    }
}

TEST_CASE("scan agrees with recursive reader on arbitrary token soup") {
    Rng rng(11);
    const std::vector<Token> alphabet{O(Op::Add), O(Op::Div), O(Op::Sin), O(Op::Pow2), X(0), X(1), K(1.0)};
    for (int i = 0; i < 5000; ++i) {
        TokenSeq s(1 + uniform_index(rng, 7));
        for (auto& t : s) t = alphabet[uniform_index(rng, alphabet.size())];
        const bool ok = oracle_valid(s);
        CHECK(is_valid_prefix(s) == ok);
        bool parsed = true;
        try {
            parse_prefix(s);
        } catch (const MalformedPrefix&) {
            parsed = false;
        }
        CHECK(parsed == ok);
    }
}

TEST_CASE("evaluate basic cases and domain errors") {
    std::vector<double> zero{0.0};
    auto sinx = parse_prefix(TokenSeq{O(Op::Sin), X(0)});
    CHECK(evaluate(sinx, zero).value == 0.0);

    auto inv = parse_prefix(TokenSeq{O(Op::Div), K(1.0), X(0)});
    CHECK(evaluate(inv, zero).error == DomainErrorKind::DivByZero);

    auto lin = parse_prefix(TokenSeq{O(Op::Add), O(Op::Mul), K(2.0), X(0), K(1.0)});
    std::vector<double> three{3.0};
    CHECK(evaluate(lin, three).value == 7.0);

    std::vector<double> neg{-1.0};
    CHECK(evaluate(parse_prefix(TokenSeq{O(Op::Log), X(0)}), neg).error ==
          DomainErrorKind::LogNonPositive);
    CHECK(evaluate(parse_prefix(TokenSeq{O(Op::Log), X(0)}), zero).error ==
          DomainErrorKind::LogNonPositive);
    CHECK(evaluate(parse_prefix(TokenSeq{O(Op::Sqrt), X(0)}), neg).error ==
          DomainErrorKind::SqrtNegative);
    std::vector<double> big{800.0};
    CHECK(evaluate(parse_prefix(TokenSeq{O(Op::Exp), X(0)}), big).error == DomainErrorKind::NonFinite);

    CHECK_THROWS_AS(evaluate(parse_prefix(TokenSeq{X(3)}), three), Error);
}

TEST_CASE("evaluate_rows flags rows without dropping them") {
    DataMatrix x(3, 1);
    x(0, 0) = 1.0;
    x(1, 0) = 0.0;
    x(2, 0) = 2.0;
    auto inv = parse_prefix(TokenSeq{O(Op::Div), K(1.0), X(0)});
    RowEvaluation r = evaluate_rows(inv, x);
    REQUIRE(r.values.size() == 3);
    CHECK(r.error_count == 1);
    CHECK(r.flagged[1] == 1);
    CHECK(std::isnan(r.values[1]));
    CHECK(r.values[2] == 0.5);
}

TEST_CASE("evaluate is bit-reproducible") {
    Rng rng(3);
    auto w = OperatorWeights::uniform();
    std::vector<double> row{0.3, -1.7, 2.2};
    for (int i = 0; i < 200; ++i) {
        auto t = random_expr(rng, 5, 3, w);
        auto a = evaluate(t, row), b = evaluate(t, row);
        CHECK(a.error == b.error);
        if (a.ok()) CHECK(std::memcmp(&a.value, &b.value, sizeof(double)) == 0);
    }
}

TEST_CASE("random_expr respects depth and variable support") {
    Rng rng(5);
    auto w = OperatorWeights::uniform();
    for (int i = 0; i < 500; ++i) {
        auto leaf = random_expr(rng, 1, 3, w);
        CHECK(leaf.size() == 1);
        CHECK(leaf.node(0).token.arity() == 0);
    }
    std::set<int> seen;
    for (int i = 0; i < 10000; ++i) {
        auto t = random_expr(rng, 5, 2, w);
        CHECK(t.depth() <= 5);
        CHECK(is_valid_prefix(serialize_prefix(t)));
        for (const auto& n : t.nodes())
            if (n.token.kind == TokenKind::Variable) seen.insert(n.token.var_index());
    }
    CHECK(seen == std::set<int>{0, 1});
}

TEST_CASE("render_infix formatting") {
    auto t = ExprTree::binary(Op::Mul, ExprTree::leaf(K(2.0)), ExprTree::unary(Op::Sin, ExprTree::leaf(X(0))));
    CHECK(render_infix(t) == "(2 * sin(x_0))");
    CHECK(render_infix(t) == render_infix(t));
    CHECK(render_infix(parse_prefix(TokenSeq{O(Op::Pow2), X(1)})) == "(x_1 ^ 2)");
}

TEST_CASE("prefix text round trip") {
    TokenSeq seq = parse_prefix_text("add x_0 mul 2.0 x_1");
    REQUIRE(seq.size() == 5);
    CHECK(seq[3] == K(2.0));
    CHECK(to_prefix_text(seq) == "add x_0 mul 2.0 x_1");
    for (double v : Vocabulary::kLiterals) {
        auto back = parse_prefix_text(to_prefix_text(TokenSeq{K(v)}));
        CHECK(back[0].value == v);
    }
    auto c = parse_prefix_text("mul C x_0");
    CHECK(c[1].placeholder);
    CHECK(to_prefix_text(c) == "mul C x_0");
    CHECK_THROWS_AS(parse_prefix_text("add x_0 foo"), Error);
    CHECK_THROWS_AS(parse_prefix_text("x_10"), Error);
}

TEST_CASE("vocabulary ids are a bijection over the finite alphabet") {
    for (int id = 0; id < Vocabulary::kSize; ++id) CHECK(Vocabulary::id_of(Vocabulary::token_of(id)) == id);
    CHECK(Vocabulary::id_of(K(3.7)) == Vocabulary::kPlaceholder);
    CHECK(Vocabulary::is_literal(-2.5));
    CHECK_FALSE(Vocabulary::is_literal(0.25));
}
