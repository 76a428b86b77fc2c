#include "equate/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <numeric>
#include <ostream>

namespace equate::ad {

namespace {

thread_local Tape* g_active_tape = nullptr;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

using DataPtr = std::shared_ptr<TensorData>;

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
    throw Error("ShapeMismatch",
                std::string(op) + " got " + shape_text(a) + " and " + shape_text(b));
}

Tensor make_tensor(Shape shape, std::vector<double> values, const char* op) {
    for (double v : values)
        if (!std::isfinite(v)) throw Error("NonFiniteValue", std::string("output of ") + op);
    auto d = std::make_shared<TensorData>();
    d->shape = std::move(shape);
    d->value = std::move(values);
    return Tensor(std::move(d));
}

bool tracking(std::initializer_list<const Tensor*> inputs) {
    if (g_active_tape == nullptr) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

bool tracking_span(std::span<const Tensor> inputs) {
    if (g_active_tape == nullptr) return false;
    for (const auto& t : inputs)
        if (t.requires_grad()) return true;
    return false;
}

template <class Fn>
void record(Tensor& out, Fn&& fn) {
    out.set_requires_grad(true);
    g_active_tape->record(std::forward<Fn>(fn));
}

// Gradient buffer of an input that wants one, or nullptr.
double* grad_of(const DataPtr& d) {
    if (!d->requires_grad) return nullptr;
    d->ensure_grad();
    return d->grad.data();
}

std::size_t rows_of(const Shape& s) { return s.size() == 2 ? s[0] : 1; }
std::size_t cols_of(const Shape& s) { return s.empty() ? 1 : s.back(); }

template <class F, class G>
Tensor unary_elementwise(const Tensor& a, const char* name, F forward, G derivative) {
    std::vector<double> out(a.size());
    const auto in = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(in[i]);
    Tensor result = make_tensor(a.shape(), std::move(out), name);
    if (tracking({&a})) {
        DataPtr ad = a.data(), od = result.data();
        record(result, [ad, od, derivative] {
            if (od->grad.empty()) return;
            double* ga = grad_of(ad);
            if (!ga) return;
            for (std::size_t i = 0; i < od->grad.size(); ++i)
                ga[i] += od->grad[i] * derivative(ad->value[i], od->value[i]);
        });
    }
    return result;
}

}  // namespace

std::size_t shape_size(const Shape& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

std::string shape_text(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
    const auto n = shape_size(shape);
    return from(std::move(shape), std::vector<double>(n, v), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_size(shape) != values.size())
        throw Error("ShapeMismatch", "data length " + std::to_string(values.size()) +
                                         " for shape " + shape_text(shape));
    Tensor t = make_tensor(std::move(shape), std::move(values), "constructor");
    t.set_requires_grad(requires_grad);
    return t;
}

Tensor Tensor::scalar(double v, bool requires_grad) { return from({}, {v}, requires_grad); }

Tensor Tensor::row(std::vector<double> values, bool requires_grad) {
    const auto n = values.size();
    return from({1, n}, std::move(values), requires_grad);
}

std::size_t Tensor::rows() const { return rows_of(shape()); }
std::size_t Tensor::cols() const { return cols_of(shape()); }

double Tensor::item() const {
    if (size() != 1) throw Error("ShapeMismatch", "item() on " + shape_text(shape()));
    return data_->value[0];
}

std::vector<double> Tensor::grad() const {
    if (has_grad()) return data_->grad;
    return std::vector<double>(size(), 0.0);
}

Tensor Tensor::detach() const { return Tensor::from(shape(), data_->value, false); }

void Tape::backward(const Tensor& loss) {
    if (consumed_) throw Error("GraphConsumed", "tape has already been replayed");
    if (loss.size() != 1) throw Error("ShapeMismatch", "backward needs a scalar loss");
    consumed_ = true;
    if (!loss.requires_grad()) {
        entries_.clear();
        return;
    }
    auto& d = *loss.data();
    d.ensure_grad();
    d.grad[0] += 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
    entries_.clear();
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

void backward(const Tensor& loss) {
    if (g_active_tape == nullptr) throw Error("NoActiveTape", "backward without a tape");
    g_active_tape->backward(loss);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0])
        shape_error("matmul", a.shape(), b.shape());
    const auto m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<double> out(m * n);
    MapMat(out.data(), m, n).noalias() =
        ConstMapMat(a.values().data(), m, k) * ConstMapMat(b.values().data(), k, n);
    Tensor result = make_tensor({m, n}, std::move(out), "matmul");
    if (tracking({&a, &b})) {
        DataPtr ad = a.data(), bd = b.data(), od = result.data();
        record(result, [ad, bd, od, m, k, n] {
            if (od->grad.empty()) return;
            ConstMapMat g(od->grad.data(), m, n);
            if (double* ga = grad_of(ad))
                MapMat(ga, m, k).noalias() += g * ConstMapMat(bd->value.data(), k, n).transpose();
            if (double* gb = grad_of(bd))
                MapMat(gb, k, n).noalias() += ConstMapMat(ad->value.data(), m, k).transpose() * g;
        });
    }
    return result;
}

namespace {

template <class F>
Tensor binary_same_shape(const Tensor& a, const Tensor& b, const char* name, double sa, double sb,
                         F forward) {
    if (a.shape() != b.shape()) shape_error(name, a.shape(), b.shape());
    std::vector<double> out(a.size());
    const auto x = a.values(), y = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(x[i], y[i]);
    Tensor result = make_tensor(a.shape(), std::move(out), name);
    if (tracking({&a, &b})) {
        DataPtr ad = a.data(), bd = b.data(), od = result.data();
        record(result, [ad, bd, od, sa, sb] {
            if (od->grad.empty()) return;
            if (double* ga = grad_of(ad))
                for (std::size_t i = 0; i < od->grad.size(); ++i) ga[i] += sa * od->grad[i];
            if (double* gb = grad_of(bd))
                for (std::size_t i = 0; i < od->grad.size(); ++i) gb[i] += sb * od->grad[i];
        });
    }
    return result;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_same_shape(a, b, "add", 1.0, 1.0, [](double x, double y) { return x + y; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_same_shape(a, b, "sub", 1.0, -1.0, [](double x, double y) { return x - y; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) shape_error("mul", a.shape(), b.shape());
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    Tensor result = make_tensor(a.shape(), std::move(out), "mul");
    if (tracking({&a, &b})) {
        DataPtr ad = a.data(), bd = b.data(), od = result.data();
        record(result, [ad, bd, od] {
            if (od->grad.empty()) return;
            if (double* ga = grad_of(ad))
                for (std::size_t i = 0; i < od->grad.size(); ++i) ga[i] += od->grad[i] * bd->value[i];
            if (double* gb = grad_of(bd))
                for (std::size_t i = 0; i < od->grad.size(); ++i) gb[i] += od->grad[i] * ad->value[i];
        });
    }
    return result;
}

Tensor scale(const Tensor& a, double s) {
    return unary_elementwise(
        a, "scale", [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_row(const Tensor& a, const Tensor& b) {
    const auto n = a.cols();
    if (a.rank() < 1 || b.size() != n || (b.rank() == 2 && b.shape()[0] != 1))
        shape_error("add_row", a.shape(), b.shape());
    const auto m = a.size() / n;
    std::vector<double> out(a.size());
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) out[r * n + c] = a[r * n + c] + b[c];
    Tensor result = make_tensor(a.shape(), std::move(out), "add_row");
    if (tracking({&a, &b})) {
        DataPtr ad = a.data(), bd = b.data(), od = result.data();
        record(result, [ad, bd, od, m, n] {
            if (od->grad.empty()) return;
            if (double* ga = grad_of(ad))
                for (std::size_t i = 0; i < m * n; ++i) ga[i] += od->grad[i];
            if (double* gb = grad_of(bd))
                for (std::size_t r = 0; r < m; ++r)
                    for (std::size_t c = 0; c < n; ++c) gb[c] += od->grad[r * n + c];
        });
    }
    return result;
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
    if (parts.empty()) throw Error("ShapeMismatch", "concat of nothing");
    if (axis > 1) throw Error("ShapeMismatch", "concat axis must be 0 or 1");
    for (const auto& p : parts)
        if (p.rank() != 2) shape_error("concat", p.shape(), parts[0].shape());
    const std::size_t other = parts[0].shape()[1 - axis];
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.shape()[1 - axis] != other) shape_error("concat", parts[0].shape(), p.shape());
        total += p.shape()[axis];
    }
    const Shape shape = axis == 0 ? Shape{total, other} : Shape{other, total};
    const std::size_t out_cols = shape[1];
    std::vector<double> out(shape_size(shape));
    std::vector<std::size_t> offsets;
    std::size_t offset = 0;
    for (const auto& p : parts) {
        offsets.push_back(offset);
        const auto pr = p.shape()[0], pc = p.shape()[1];
        for (std::size_t r = 0; r < pr; ++r)
            for (std::size_t c = 0; c < pc; ++c) {
                const auto dst = axis == 0 ? (offset + r) * out_cols + c : r * out_cols + offset + c;
                out[dst] = p[r * pc + c];
            }
        offset += p.shape()[axis];
    }
    Tensor result = make_tensor(shape, std::move(out), "concat");
    if (tracking_span(parts)) {
        std::vector<DataPtr> pd;
        for (const auto& p : parts) pd.push_back(p.data());
        DataPtr od = result.data();
        record(result, [pd, od, offsets, axis, out_cols] {
            if (od->grad.empty()) return;
            for (std::size_t i = 0; i < pd.size(); ++i) {
                double* g = grad_of(pd[i]);
                if (!g) continue;
                const auto pr = pd[i]->shape[0], pc = pd[i]->shape[1];
                for (std::size_t r = 0; r < pr; ++r)
                    for (std::size_t c = 0; c < pc; ++c) {
                        const auto src = axis == 0 ? (offsets[i] + r) * out_cols + c
                                                   : r * out_cols + offsets[i] + c;
                        g[r * pc + c] += od->grad[src];
                    }
            }
        });
    }
    return result;
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
    if (a.rank() != 2 || axis > 1 || start + length > a.shape()[axis] || length == 0)
        throw Error("ShapeMismatch", "slice [" + std::to_string(start) + ", +" +
                                         std::to_string(length) + ") on axis " +
                                         std::to_string(axis) + " of " + shape_text(a.shape()));
    const auto in_cols = a.shape()[1];
    const Shape shape = axis == 0 ? Shape{length, in_cols} : Shape{a.shape()[0], length};
    const auto out_cols = shape[1];
    std::vector<double> out(shape_size(shape));
    auto src_index = [=](std::size_t r, std::size_t c) {
        return axis == 0 ? (start + r) * in_cols + c : r * in_cols + start + c;
    };
    for (std::size_t r = 0; r < shape[0]; ++r)
        for (std::size_t c = 0; c < out_cols; ++c) out[r * out_cols + c] = a[src_index(r, c)];
    Tensor result = make_tensor(shape, std::move(out), "slice");
    if (tracking({&a})) {
        DataPtr ad = a.data(), od = result.data();
        const auto out_rows = shape[0];
        record(result, [ad, od, out_rows, out_cols, src_index] {
            if (od->grad.empty()) return;
            double* g = grad_of(ad);
            if (!g) return;
            for (std::size_t r = 0; r < out_rows; ++r)
                for (std::size_t c = 0; c < out_cols; ++c)
                    g[src_index(r, c)] += od->grad[r * out_cols + c];
        });
    }
    return result;
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw Error("ShapeMismatch", "transpose of " + shape_text(a.shape()));
    const auto m = a.shape()[0], n = a.shape()[1];
    std::vector<double> out(m * n);
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) out[c * m + r] = a[r * n + c];
    Tensor result = make_tensor({n, m}, std::move(out), "transpose");
    if (tracking({&a})) {
        DataPtr ad = a.data(), od = result.data();
        record(result, [ad, od, m, n] {
            if (od->grad.empty()) return;
            double* g = grad_of(ad);
            if (!g) return;
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t c = 0; c < n; ++c) g[r * n + c] += od->grad[c * m + r];
        });
    }
    return result;
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_size(shape) != a.size()) shape_error("reshape", a.shape(), shape);
    Tensor result = make_tensor(std::move(shape), std::vector<double>(a.values().begin(), a.values().end()),
                                "reshape");
    if (tracking({&a})) {
        DataPtr ad = a.data(), od = result.data();
        record(result, [ad, od] {
            if (od->grad.empty()) return;
            if (double* g = grad_of(ad))
                for (std::size_t i = 0; i < od->grad.size(); ++i) g[i] += od->grad[i];
        });
    }
    return result;
}

Tensor tanh(const Tensor& a) {
    return unary_elementwise(
        a, "tanh", [](double x) { return std::tanh(x); },
        [](double, double y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& a) {
    return unary_elementwise(
        a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
    return unary_elementwise(
        a, "sigmoid",
        [](double x) {
            if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
            const double e = std::exp(x);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& a) {
    return unary_elementwise(
        a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    for (double v : a.values())
        if (!(v > 0.0)) throw Error("NonFiniteValue", "log of non-positive value");
    return unary_elementwise(
        a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

namespace {

// Softmax over `count` slices of `len` elements spaced by `stride`.
struct SliceLayout {
    std::size_t count, len, outer_stride, inner_stride;
    std::size_t index(std::size_t s, std::size_t j) const {
        return (s * outer_stride) + j * inner_stride;
    }
};

SliceLayout layout_for(const Tensor& a, std::size_t axis) {
    if (a.rank() <= 1) return {1, a.size(), 0, 1};
    if (a.rank() != 2 || axis > 1) throw Error("ShapeMismatch", "softmax axis");
    const auto m = a.shape()[0], n = a.shape()[1];
    if (axis == 1) return {m, n, n, 1};
    return {n, m, 1, n};
}

}  // namespace

Tensor softmax(const Tensor& a, std::size_t axis) {
    const SliceLayout L = layout_for(a, axis);
    std::vector<double> out(a.size());
    for (std::size_t s = 0; s < L.count; ++s) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < L.len; ++j) mx = std::max(mx, a[L.index(s, j)]);
        double total = 0.0;
        for (std::size_t j = 0; j < L.len; ++j) {
            const double e = std::exp(a[L.index(s, j)] - mx);
            out[L.index(s, j)] = e;
            total += e;
        }
        for (std::size_t j = 0; j < L.len; ++j) out[L.index(s, j)] /= total;
    }
    Tensor result = make_tensor(a.shape(), std::move(out), "softmax");
    if (tracking({&a})) {
        DataPtr ad = a.data(), od = result.data();
        record(result, [ad, od, L] {
            if (od->grad.empty()) return;
            double* g = grad_of(ad);
            if (!g) return;
            for (std::size_t s = 0; s < L.count; ++s) {
                double dot = 0.0;
                for (std::size_t j = 0; j < L.len; ++j) {
                    const auto i = L.index(s, j);
                    dot += od->grad[i] * od->value[i];
                }
                for (std::size_t j = 0; j < L.len; ++j) {
                    const auto i = L.index(s, j);
                    g[i] += od->value[i] * (od->grad[i] - dot);
                }
            }
        });
    }
    return result;
}

Tensor log_softmax_rows(const Tensor& a) {
    const SliceLayout L = layout_for(a, 1);
    std::vector<double> out(a.size());
    for (std::size_t s = 0; s < L.count; ++s) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < L.len; ++j) mx = std::max(mx, a[L.index(s, j)]);
        double total = 0.0;
        for (std::size_t j = 0; j < L.len; ++j) total += std::exp(a[L.index(s, j)] - mx);
        const double lse = mx + std::log(total);
        for (std::size_t j = 0; j < L.len; ++j) out[L.index(s, j)] = a[L.index(s, j)] - lse;
    }
    Tensor result = make_tensor(a.shape(), std::move(out), "log_softmax");
    if (tracking({&a})) {
        DataPtr ad = a.data(), od = result.data();
        record(result, [ad, od, L] {
            if (od->grad.empty()) return;
            double* g = grad_of(ad);
            if (!g) return;
            for (std::size_t s = 0; s < L.count; ++s) {
                double gsum = 0.0;
                for (std::size_t j = 0; j < L.len; ++j) gsum += od->grad[L.index(s, j)];
                for (std::size_t j = 0; j < L.len; ++j) {
                    const auto i = L.index(s, j);
                    g[i] += od->grad[i] - std::exp(od->value[i]) * gsum;
                }
            }
        });
    }
    return result;
}

Tensor cross_entropy_from_logits(const Tensor& logits, std::span<const int> targets) {
    const auto m = logits.rows(), v = logits.cols();
    if (targets.size() != m)
        throw Error("ShapeMismatch", std::to_string(targets.size()) + " targets for " +
                                         shape_text(logits.shape()));
    for (int t : targets)
        if (t < 0 || static_cast<std::size_t>(t) >= v)
            throw Error("IndexOutOfRange", "target " + std::to_string(t) + " with " +
                                               std::to_string(v) + " classes");
    std::vector<double> probs(m * v);
    double loss = 0.0;
    for (std::size_t r = 0; r < m; ++r) {
        const double* row = logits.values().data() + r * v;
        const double mx = *std::max_element(row, row + v);
        double total = 0.0;
        for (std::size_t c = 0; c < v; ++c) {
            probs[r * v + c] = std::exp(row[c] - mx);
            total += probs[r * v + c];
        }
        for (std::size_t c = 0; c < v; ++c) probs[r * v + c] /= total;
        loss += (mx + std::log(total)) - row[targets[r]];
    }
    Tensor result = make_tensor({}, {loss}, "cross_entropy");
    if (tracking({&logits})) {
        DataPtr ld = logits.data(), od = result.data();
        std::vector<int> tg(targets.begin(), targets.end());
        record(result, [ld, od, probs = std::move(probs), tg = std::move(tg), m, v] {
            if (od->grad.empty()) return;
            double* g = grad_of(ld);
            if (!g) return;
            const double go = od->grad[0];
            for (std::size_t r = 0; r < m; ++r) {
                for (std::size_t c = 0; c < v; ++c) g[r * v + c] += go * probs[r * v + c];
                g[r * v + static_cast<std::size_t>(tg[r])] -= go;
            }
        });
    }
    return result;
}

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += v;
    Tensor result = make_tensor({}, {s}, "sum");
    if (tracking({&a})) {
        DataPtr ad = a.data(), od = result.data();
        record(result, [ad, od] {
            if (od->grad.empty()) return;
            if (double* g = grad_of(ad))
                for (std::size_t i = 0; i < ad->value.size(); ++i) g[i] += od->grad[0];
        });
    }
    return result;
}

Tensor mean_rows(const Tensor& a) {
    const auto m = a.rows(), n = a.cols();
    std::vector<double> out(n, 0.0);
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) out[c] += a[r * n + c];
    for (auto& v : out) v /= static_cast<double>(m);
    Tensor result = make_tensor({1, n}, std::move(out), "mean_rows");
    if (tracking({&a})) {
        DataPtr ad = a.data(), od = result.data();
        record(result, [ad, od, m, n] {
            if (od->grad.empty()) return;
            double* g = grad_of(ad);
            if (!g) return;
            const double inv = 1.0 / static_cast<double>(m);
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t c = 0; c < n; ++c) g[r * n + c] += od->grad[c] * inv;
        });
    }
    return result;
}

Tensor mse(const Tensor& pred, const Tensor& target) {
    if (pred.size() != target.size()) shape_error("mse", pred.shape(), target.shape());
    const auto n = pred.size();
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = pred[i] - target[i];
        s += d * d;
    }
    Tensor result = make_tensor({}, {s / static_cast<double>(n)}, "mse");
    if (tracking({&pred})) {
        DataPtr pd = pred.data(), td = target.data(), od = result.data();
        record(result, [pd, td, od, n] {
            if (od->grad.empty()) return;
            double* g = grad_of(pd);
            if (!g) return;
            const double k = 2.0 * od->grad[0] / static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) g[i] += k * (pd->value[i] - td->value[i]);
        });
    }
    return result;
}

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
    if (table.rank() != 2) throw Error("ShapeMismatch", "gather_rows needs a matrix");
    const auto vocab = table.shape()[0], d = table.shape()[1];
    std::vector<double> out(ids.size() * d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab)
            throw Error("IndexOutOfRange", "row " + std::to_string(ids[i]) + " of " +
                                               std::to_string(vocab));
        std::copy_n(table.values().data() + static_cast<std::size_t>(ids[i]) * d, d,
                    out.data() + i * d);
    }
    Tensor result = make_tensor({ids.size(), d}, std::move(out), "gather_rows");
    if (tracking({&table})) {
        DataPtr td = table.data(), od = result.data();
        std::vector<int> idv(ids.begin(), ids.end());
        record(result, [td, od, idv = std::move(idv), d] {
            if (od->grad.empty()) return;
            double* g = grad_of(td);
            if (!g) return;
            for (std::size_t i = 0; i < idv.size(); ++i)
                for (std::size_t c = 0; c < d; ++c)
                    g[static_cast<std::size_t>(idv[i]) * d + c] += od->grad[i * d + c];
        });
    }
    return result;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const auto m = x.rows(), n = x.cols();
    if (gamma.size() != n || beta.size() != n) shape_error("layer_norm", x.shape(), gamma.shape());
    std::vector<double> out(m * n), xhat(m * n), inv_std(m);
    for (std::size_t r = 0; r < m; ++r) {
        const double* row = x.values().data() + r * n;
        double mean = 0.0;
        for (std::size_t c = 0; c < n; ++c) mean += row[c];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t c = 0; c < n; ++c) var += (row[c] - mean) * (row[c] - mean);
        var /= static_cast<double>(n);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < n; ++c) {
            xhat[r * n + c] = (row[c] - mean) * inv_std[r];
            out[r * n + c] = xhat[r * n + c] * gamma[c] + beta[c];
        }
    }
    Tensor result = make_tensor(x.shape(), std::move(out), "layer_norm");
    if (tracking({&x, &gamma, &beta})) {
        DataPtr xd = x.data(), gd = gamma.data(), bd = beta.data(), od = result.data();
        record(result, [xd, gd, bd, od, xhat = std::move(xhat), inv_std = std::move(inv_std), m, n] {
            if (od->grad.empty()) return;
            const double* go = od->grad.data();
            if (double* gg = grad_of(gd))
                for (std::size_t r = 0; r < m; ++r)
                    for (std::size_t c = 0; c < n; ++c) gg[c] += go[r * n + c] * xhat[r * n + c];
            if (double* gb = grad_of(bd))
                for (std::size_t r = 0; r < m; ++r)
                    for (std::size_t c = 0; c < n; ++c) gb[c] += go[r * n + c];
            if (double* gx = grad_of(xd)) {
                const double nn = static_cast<double>(n);
                for (std::size_t r = 0; r < m; ++r) {
                    double s1 = 0.0, s2 = 0.0;
                    for (std::size_t c = 0; c < n; ++c) {
                        const double dxh = go[r * n + c] * gd->value[c];
                        s1 += dxh;
                        s2 += dxh * xhat[r * n + c];
                    }
                    for (std::size_t c = 0; c < n; ++c) {
                        const double dxh = go[r * n + c] * gd->value[c];
                        gx[r * n + c] +=
                            inv_std[r] / nn * (nn * dxh - s1 - xhat[r * n + c] * s2);
                    }
                }
            }
        });
    }
    return result;
}

Tensor ParamStore::add(const std::string& name, Tensor init) {
    if (find(name) != nullptr) throw Error("DuplicateParameter", name);
    init.set_requires_grad(true);
    params_.push_back(Parameter{name, init, false});
    return init;
}

Parameter* ParamStore::find(const std::string& name) {
    for (auto& p : params_)
        if (p.name == name) return &p;
    return nullptr;
}

const Parameter* ParamStore::find(const std::string& name) const {
    for (const auto& p : params_)
        if (p.name == name) return &p;
    return nullptr;
}

Tensor ParamStore::get(const std::string& name) const {
    const Parameter* p = find(name);
    if (p == nullptr) throw Error("UnknownParameter", name);
    return p->tensor;
}

std::size_t ParamStore::scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.size();
    return n;
}

void ParamStore::zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
}

std::uint64_t ParamStore::hash(const std::function<bool(const Parameter&)>& pred) const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& p : params_) {
        if (!pred(p)) continue;
        h = fnv1a(p.name, h);
        const auto v = p.tensor.values();
        h = fnv1a(std::span(reinterpret_cast<const std::uint8_t*>(v.data()), v.size_bytes()), h);
    }
    return h;
}

double clip_grad_norm(ParamStore& store, double max_norm) {
    double sq = 0.0;
    for (const auto& p : store.params()) {
        if (p.frozen || !p.tensor.has_grad()) continue;
        for (double g : p.tensor.data()->grad) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double k = max_norm / norm;
        for (auto& p : store.params()) {
            if (p.frozen || !p.tensor.has_grad()) continue;
            for (double& g : p.tensor.data()->grad) g *= k;
        }
    }
    return norm;
}

void AdamW::step(ParamStore& store) {
    auto& params = store.params();
    if (m_.size() != params.size()) {
        m_.resize(params.size());
        v_.resize(params.size());
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        if (p.frozen || !p.tensor.has_grad()) continue;
        auto& d = *p.tensor.data();
        if (m_[i].size() != d.value.size()) {
            m_[i].assign(d.value.size(), 0.0);
            v_[i].assign(d.value.size(), 0.0);
        }
        for (std::size_t j = 0; j < d.value.size(); ++j) {
            const double g = d.grad[j];
            m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * g;
            v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * g * g;
            const double mhat = m_[i][j] / bc1;
            const double vhat = v_[i][j] / bc2;
            d.value[j] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * d.value[j]);
        }
    }
}

namespace {

template <class T>
void put_le(std::ostream& out, T v) {
    static_assert(std::endian::native == std::endian::little, "little-endian host required");
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get_le(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (in.gcount() != static_cast<std::streamsize>(sizeof(T)))
        throw Error("CorruptSegment", "truncated tensor segment");
    return v;
}

}  // namespace

void write_tensor_segment(std::ostream& out, const std::string& name, const Tensor& t, DType dtype) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_le<std::uint8_t>(out, static_cast<std::uint8_t>(dtype));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put_le<std::uint64_t>(out, d);
    if (dtype == DType::F64) {
        for (double v : t.values()) put_le<double>(out, v);
    } else {
        for (double v : t.values()) put_le<float>(out, static_cast<float>(v));
    }
}

TensorSegment read_tensor_segment(std::istream& in) {
    TensorSegment seg;
    const auto name_len = get_le<std::uint32_t>(in);
    if (name_len > (1u << 16)) throw Error("CorruptSegment", "implausible name length");
    seg.name.resize(name_len);
    in.read(seg.name.data(), name_len);
    if (in.gcount() != static_cast<std::streamsize>(name_len))
        throw Error("CorruptSegment", "truncated tensor name");
    const auto code = get_le<std::uint8_t>(in);
    if (code != static_cast<std::uint8_t>(DType::F32) && code != static_cast<std::uint8_t>(DType::F64))
        throw Error("CorruptSegment", "unknown dtype code " + std::to_string(code) + " in " + seg.name);
    seg.dtype = static_cast<DType>(code);
    const auto rank = get_le<std::uint32_t>(in);
    if (rank > 8) throw Error("CorruptSegment", "implausible rank in " + seg.name);
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(get_le<std::uint64_t>(in));
    const auto n = shape_size(shape);
    if (n > (1ull << 32)) throw Error("CorruptSegment", "implausible size in " + seg.name);
    std::vector<double> values(n);
    for (auto& v : values)
        v = seg.dtype == DType::F64 ? get_le<double>(in) : static_cast<double>(get_le<float>(in));
    seg.tensor = Tensor::from(std::move(shape), std::move(values));
    return seg;
}

}  // namespace equate::ad
