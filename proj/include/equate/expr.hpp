#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "equate/common.hpp"
#include "equate/data.hpp"

namespace equate::expr {

enum class TokenKind : std::uint8_t { BinaryOp, UnaryOp, Variable, Constant, Special };

enum class Op : std::uint8_t { Add, Sub, Mul, Div, Pow2, Sqrt, Sin, Cos, Exp, Log, Abs };
inline constexpr std::size_t kNumOps = 11;

enum class SpecialToken : std::uint8_t { Bos, Eos, Pad };

inline constexpr int kMaxVariables = 10;
inline constexpr std::size_t kDefaultMaxLength = 200;

bool is_binary(Op op);
std::string_view op_name(Op op);
std::optional<Op> op_from_name(std::string_view name);

struct Token {
    TokenKind kind = TokenKind::Special;
    std::uint8_t code = 0;     // Op, variable index, or SpecialToken
    double value = 0.0;        // constants only
    bool placeholder = false;  // the fit-me constant C

    static Token op(Op o);
    static Token variable(int index);
    static Token constant(double v);
    static Token placeholder_constant(double initial = 1.0);
    static Token special(SpecialToken s);

    int arity() const;
    Op as_op() const { return static_cast<Op>(code); }
    int var_index() const { return code; }
    bool is_special() const { return kind == TokenKind::Special; }
    bool is_constant() const { return kind == TokenKind::Constant; }

    /// Prefix-text symbol: `add`, `x_3`, `C`, `<EOS>`, or a decimal literal.
    std::string symbol() const;

    bool operator==(const Token&) const = default;
};

using TokenSeq = std::vector<Token>;

class MalformedPrefix : public Error {
public:
    MalformedPrefix(std::size_t index, const std::string& why)
        : Error("MalformedPrefix", why + " at token " + std::to_string(index)), index_(index) {}
    std::size_t index() const noexcept { return index_; }

private:
    std::size_t index_;
};

/// Arity scan: counter starts at 1, each token adds arity-1; valid iff the
/// counter first reaches 0 exactly at the last token. Returns the offending
/// index (tokens.size() for premature end of input), or nullopt when valid.
std::optional<std::size_t> prefix_scan_failure(std::span<const Token> tokens);
inline bool is_valid_prefix(std::span<const Token> tokens) {
    return !prefix_scan_failure(tokens).has_value();
}

struct Node {
    Token token;
    std::array<std::int32_t, 2> child{-1, -1};

    bool operator==(const Node&) const = default;
};

/// Expression tree; nodes are stored in pre-order with the root at index 0.
class ExprTree {
public:
    static ExprTree leaf(Token t);
    static ExprTree unary(Op op, ExprTree arg);
    static ExprTree binary(Op op, ExprTree lhs, ExprTree rhs);

    const std::vector<Node>& nodes() const { return nodes_; }
    const Node& node(std::size_t i) const { return nodes_[i]; }
    std::size_t size() const { return nodes_.size(); }
    bool empty() const { return nodes_.empty(); }

    std::vector<std::size_t> constant_nodes() const;
    void set_constant(std::size_t node, double value);
    int depth() const;

    bool operator==(const ExprTree&) const = default;

private:
    friend ExprTree parse_prefix(std::span<const Token>);
    std::vector<Node> nodes_;
};

ExprTree parse_prefix(std::span<const Token> tokens);
TokenSeq serialize_prefix(const ExprTree& tree);

/// Number of tokens in the prefix serialization.
std::size_t complexity(const ExprTree& tree);

enum class DomainErrorKind : std::uint8_t { None, DivByZero, LogNonPositive, SqrtNegative, NonFinite };
std::string_view domain_error_name(DomainErrorKind k);

struct Evaluation {
    double value = 0.0;
    DomainErrorKind error = DomainErrorKind::None;
    bool ok() const { return error == DomainErrorKind::None; }
};

/// Evaluates the tree on one feature row. Throws Error("VariableOutOfRange")
/// if a variable index is not covered by the row.
Evaluation evaluate(const ExprTree& tree, std::span<const double> row);

/// Row-wise evaluation. Flagged rows keep a NaN value and are counted; they
/// are never dropped.
struct RowEvaluation {
    std::vector<double> values;
    std::vector<std::uint8_t> flagged;
    std::size_t error_count = 0;
};
RowEvaluation evaluate_rows(const ExprTree& tree, const DataMatrix& x);

struct OperatorWeights {
    std::array<double, kNumOps> op{};
    double leaf_probability = 0.3;      // early stop before max depth
    double variable_probability = 0.7;  // otherwise a literal constant
    double placeholder_probability = 0.0;

    static OperatorWeights uniform();
    /// Enables only the listed operators (names as in op_name), weight 1.
    static OperatorWeights from_names(std::span<const std::string> names);
};

/// Random tree of depth <= max_depth over x_0..x_{num_vars-1}.
ExprTree random_expr(Rng& rng, int max_depth, int num_vars, const OperatorWeights& weights);

/// Parenthesised infix rendering.
std::string render_infix(const ExprTree& tree);

std::string to_prefix_text(std::span<const Token> tokens);
TokenSeq parse_prefix_text(std::string_view text);

/// Shortest decimal text that parses back to the same double.
std::string format_real(double v);

/// Fixed token vocabulary shared by the neural modules: specials, operators,
/// variables, the placeholder C and a small literal set. Literals outside the
/// set map to C.
class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kFirstOp = 3;
    static constexpr int kFirstVar = kFirstOp + static_cast<int>(kNumOps);
    static constexpr int kPlaceholder = kFirstVar + kMaxVariables;
    static constexpr int kFirstLiteral = kPlaceholder + 1;
    static constexpr std::array<double, 15> kLiterals{-5.0, -4.0, -3.0, -2.5, -2.0, -1.0, -0.5, 0.0,
                                                      0.5,  1.0,  2.0,  2.5,  3.0,  4.0,  5.0};
    static constexpr int kSize = kFirstLiteral + static_cast<int>(kLiterals.size());

    static int id_of(const Token& t);
    static Token token_of(int id);
    static std::vector<int> encode(std::span<const Token> tokens);
    static bool is_literal(double v);
};

}  // namespace equate::expr
