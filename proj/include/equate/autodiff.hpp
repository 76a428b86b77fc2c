#pragma once

// Dense row-major tensors with a define-by-run reverse-mode tape.
//
// Operations record a backward closure on the thread's active Tape whenever
// one of their inputs requires a gradient. Without an active tape the same
// calls run as plain inference. A tape and the tensors recorded on it belong
// to one thread.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "equate/common.hpp"

namespace equate::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& s);
std::string shape_text(const Shape& s);

struct TensorData {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // allocated on first accumulation
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorData> data) : data_(std::move(data)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double v, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);
    static Tensor row(std::vector<double> values, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(data_); }
    const Shape& shape() const { return data_->shape; }
    std::size_t rank() const { return data_->shape.size(); }
    std::size_t size() const { return data_->value.size(); }
    /// Leading dimension for rank 2, 1 otherwise.
    std::size_t rows() const;
    /// Trailing dimension (1 for scalars).
    std::size_t cols() const;

    std::span<const double> values() const { return data_->value; }
    std::span<double> mutable_values() { return data_->value; }
    double item() const;
    double operator[](std::size_t i) const { return data_->value[i]; }
    double at(std::size_t r, std::size_t c) const { return data_->value[r * cols() + c]; }

    bool requires_grad() const { return data_->requires_grad; }
    void set_requires_grad(bool on) { data_->requires_grad = on; }
    bool has_grad() const { return data_->grad.size() == data_->value.size(); }
    /// Accumulated gradient; all zeros when nothing has been accumulated.
    std::vector<double> grad() const;
    std::span<double> mutable_grad() {
        data_->ensure_grad();
        return data_->grad;
    }
    void zero_grad() { data_->grad.clear(); }

    /// Value copy with no gradient tracking.
    Tensor detach() const;

    const std::shared_ptr<TensorData>& data() const { return data_; }

private:
    std::shared_ptr<TensorData> data_;
};

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(std::function<void()> backward_fn) { entries_.push_back(std::move(backward_fn)); }
    std::size_t size() const { return entries_.size(); }
    bool consumed() const { return consumed_; }

    /// Seeds d(loss)/d(loss) = 1 and replays the recorded closures in exact
    /// reverse order. A tape can be replayed once.
    void backward(const Tensor& loss);

private:
    std::vector<std::function<void()>> entries_;
    bool consumed_ = false;
};

/// Makes `tape` the active tape of this thread for the scope's lifetime.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_;
};

Tape* active_tape();

// Shape-checked operations. Errors: ShapeMismatch, NonFiniteValue,
// IndexOutOfRange.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
/// a[m x n] + b[n] (or [1 x n]) added to every row.
Tensor add_row(const Tensor& a, const Tensor& b);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);

/// Softmax along `axis` (rank 2) or over the whole vector (rank 1); uses the
/// max-shift for stability.
Tensor softmax(const Tensor& a, std::size_t axis);
Tensor log_softmax_rows(const Tensor& a);

/// -sum_j log softmax(logits_j)[targets_j], a scalar.
Tensor cross_entropy_from_logits(const Tensor& logits, std::span<const int> targets);

Tensor sum(const Tensor& a);
Tensor mean_rows(const Tensor& a);
/// Mean of squared differences; `target` is treated as a constant.
Tensor mse(const Tensor& pred, const Tensor& target);
Tensor gather_rows(const Tensor& table, std::span<const int> ids);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

/// Backward through the active tape.
void backward(const Tensor& loss);

struct Parameter {
    std::string name;
    Tensor tensor;
    bool frozen = false;
};

/// Ordered, named collection of trainable tensors.
class ParamStore {
public:
    Tensor add(const std::string& name, Tensor init);
    Parameter* find(const std::string& name);
    const Parameter* find(const std::string& name) const;
    Tensor get(const std::string& name) const;

    std::vector<Parameter>& params() { return params_; }
    const std::vector<Parameter>& params() const { return params_; }
    std::size_t count() const { return params_.size(); }
    std::size_t scalar_count() const;

    void zero_grad();
    /// Hash of the raw bytes of all parameters selected by `pred`.
    std::uint64_t hash(const std::function<bool(const Parameter&)>& pred) const;
    std::uint64_t hash() const {
        return hash([](const Parameter&) { return true; });
    }

private:
    std::vector<Parameter> params_;
};

/// Scales trainable gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_grad_norm(ParamStore& store, double max_norm);

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

/// AdamW with bias correction and decoupled weight decay. Frozen parameters
/// and parameters without a gradient are left untouched.
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}
    void step(ParamStore& store);
    std::size_t steps() const { return t_; }
    const AdamWConfig& config() const { return cfg_; }

private:
    AdamWConfig cfg_;
    std::size_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

enum class DType : std::uint8_t { F32 = 1, F64 = 2 };

/// Segment layout: u32 name length, UTF-8 name, u8 dtype, u32 rank,
/// rank x u64 dims, raw values; all little-endian.
void write_tensor_segment(std::ostream& out, const std::string& name, const Tensor& t, DType dtype);
struct TensorSegment {
    std::string name;
    DType dtype;
    Tensor tensor;
};
/// Throws Error("CorruptSegment") on truncated or inconsistent input.
TensorSegment read_tensor_segment(std::istream& in);

}  // namespace equate::ad
