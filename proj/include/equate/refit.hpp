#pragma once

// Constant re-estimation for decoded skeletons: BFGS on the mean squared
// error with central-difference gradients.

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "equate/common.hpp"
#include "equate/data.hpp"
#include "equate/expr.hpp"

namespace equate::refit {

struct BfgsOptions {
    int max_iterations = 200;
    double grad_tolerance = 1e-10;  // on the infinity norm, relative to 1 + |f|
    double fd_step = 1e-6;          // relative central-difference step
};

struct BfgsResult {
    std::vector<double> x;
    double value = 0.0;
    int iterations = 0;
    bool converged = false;
};

/// Minimises `f`; non-finite values are treated as infeasible by the line
/// search.
BfgsResult bfgs(const std::function<double(std::span<const double>)>& f, std::vector<double> x0,
                const BfgsOptions& opts = {});

enum class Scope { PlaceholdersOnly, AllConstants };

struct RefitResult {
    expr::ExprTree tree;  // fitted constants are plain literals
    double mse = 0.0;
    bool ok = false;
    std::string reason;  // EmptyData, DomainError, VariableOutOfRange
};

/// Fits constants of `skeleton` to `data`. Starts: the current values (C
/// starts at 1.0) plus two perturbed copies with scales 0.1 and 1.0; the
/// lowest error wins.
RefitResult refit_constants(const expr::ExprTree& skeleton, const DataTable& data, Rng& rng,
                            Scope scope = Scope::AllConstants, const BfgsOptions& opts = {});

/// Mean squared error of `tree` on `data`; +inf when any row is flagged.
double mean_squared_error(const expr::ExprTree& tree, const DataTable& data);

}  // namespace equate::refit
