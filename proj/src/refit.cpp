#include "equate/refit.hpp"

#include <Eigen/Core>
#include <cmath>
#include <limits>

namespace equate::refit {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

Eigen::VectorXd gradient(const std::function<double(std::span<const double>)>& f, Eigen::VectorXd x,
                         double rel_step) {
    Eigen::VectorXd g(x.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        const double h = rel_step * std::max(1.0, std::abs(orig));
        x[i] = orig + h;
        const double up = f(std::span<const double>(x.data(), static_cast<std::size_t>(x.size())));
        x[i] = orig - h;
        const double down = f(std::span<const double>(x.data(), static_cast<std::size_t>(x.size())));
        x[i] = orig;
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

}  // namespace

BfgsResult bfgs(const std::function<double(std::span<const double>)>& f, std::vector<double> x0,
                const BfgsOptions& opts) {
    const auto n = static_cast<Eigen::Index>(x0.size());
    auto eval = [&](const Eigen::VectorXd& v) {
        return f(std::span<const double>(v.data(), static_cast<std::size_t>(v.size())));
    };
    BfgsResult res;
    Eigen::VectorXd x = Eigen::Map<Eigen::VectorXd>(x0.data(), n);
    double fx = eval(x);
    if (n == 0 || !std::isfinite(fx)) {
        res.x = x0;
        res.value = fx;
        res.converged = n == 0 && std::isfinite(fx);
        return res;
    }
    Eigen::VectorXd g = gradient(f, x, opts.fd_step);
    Eigen::MatrixXd h = Eigen::MatrixXd::Identity(n, n);
    bool scaled = false;
    int it = 0;
    for (; it < opts.max_iterations; ++it) {
        if (!g.allFinite()) break;
        if (g.lpNorm<Eigen::Infinity>() <= opts.grad_tolerance * (1.0 + std::abs(fx))) {
            res.converged = true;
            break;
        }
        Eigen::VectorXd p = -h * g;
        double slope = g.dot(p);
        if (!(slope < 0.0)) {
            h.setIdentity();
            p = -g;
            slope = -g.squaredNorm();
        }
        double alpha = 1.0, f_new = kInf;
        Eigen::VectorXd x_new;
        bool accepted = false;
        for (int k = 0; k < 50; ++k) {
            x_new = x + alpha * p;
            f_new = eval(x_new);
            if (std::isfinite(f_new) && f_new <= fx + 1e-4 * alpha * slope) {
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if (!accepted) {
            res.converged = true;  // no further descent possible at this resolution
            break;
        }
        Eigen::VectorXd s = x_new - x;
        Eigen::VectorXd g_new = gradient(f, x_new, opts.fd_step);
        Eigen::VectorXd y = g_new - g;
        const double sy = s.dot(y);
        const double f_old = fx;
        x = x_new;
        fx = f_new;
        g = g_new;
        if (sy > 1e-12 * s.norm() * y.norm()) {
            if (!scaled) {
                h *= sy / y.squaredNorm();
                scaled = true;
            }
            const double rho = 1.0 / sy;
            Eigen::MatrixXd left = Eigen::MatrixXd::Identity(n, n) - rho * s * y.transpose();
            h = left * h * left.transpose() + rho * s * s.transpose();
        }
        if (std::abs(f_old - fx) <= 1e-16 * (1.0 + std::abs(fx)) &&
            s.lpNorm<Eigen::Infinity>() <= 1e-14 * (1.0 + x.lpNorm<Eigen::Infinity>())) {
            res.converged = true;
            ++it;
            break;
        }
    }
    res.x.assign(x.data(), x.data() + n);
    res.value = fx;
    res.iterations = it;
    return res;
}

double mean_squared_error(const expr::ExprTree& tree, const DataTable& data) {
    if (data.rows() == 0) return kInf;
    double sse = 0.0;
    for (std::size_t r = 0; r < data.rows(); ++r) {
        const auto e = expr::evaluate(tree, data.x.row(r));
        if (!e.ok()) return kInf;
        const double d = e.value - data.y[r];
        sse += d * d;
    }
    const double mse = sse / static_cast<double>(data.rows());
    return std::isfinite(mse) ? mse : kInf;
}

RefitResult refit_constants(const expr::ExprTree& skeleton, const DataTable& data, Rng& rng, Scope scope,
                            const BfgsOptions& opts) {
    RefitResult out;
    out.tree = skeleton;
    if (data.rows() == 0) {
        out.reason = "EmptyData";
        return out;
    }
    for (const auto& n : skeleton.nodes())
        if (n.token.kind == expr::TokenKind::Variable &&
            static_cast<std::size_t>(n.token.var_index()) >= data.num_vars()) {
            out.reason = "VariableOutOfRange";
            return out;
        }
    std::vector<std::size_t> free;
    for (std::size_t i : skeleton.constant_nodes())
        if (scope == Scope::AllConstants || skeleton.node(i).token.placeholder) free.push_back(i);

    expr::ExprTree work = skeleton;
    for (std::size_t i : free) work.set_constant(i, skeleton.node(i).token.value);
    auto objective = [&](std::span<const double> c) {
        for (std::size_t k = 0; k < free.size(); ++k) work.set_constant(free[k], c[k]);
        return mean_squared_error(work, data);
    };

    std::vector<double> base;
    for (std::size_t i : free) base.push_back(skeleton.node(i).token.value);
    std::vector<std::vector<double>> starts{base};
    if (!free.empty()) {
        for (double scale : {0.1, 1.0}) {
            auto s = base;
            for (auto& v : s) v += scale * standard_normal(rng);
            starts.push_back(std::move(s));
        }
    }
    double best = kInf;
    std::vector<double> best_x = base;
    for (const auto& s : starts) {
        BfgsResult r = bfgs(objective, s, opts);
        if (std::isfinite(r.value) && r.value < best) {
            best = r.value;
            best_x = r.x;
        }
    }
    for (std::size_t k = 0; k < free.size(); ++k) out.tree.set_constant(free[k], best_x[k]);
    out.mse = mean_squared_error(out.tree, data);
    out.ok = std::isfinite(out.mse);
    if (!out.ok) out.reason = "DomainError";
    return out;
}

}  // namespace equate::refit
