#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace pg {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major f64 array. `grad`, when present, always has numel() entries.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double v) { return Tensor({}, std::vector<double>{v}); }

    [[nodiscard]] const Shape& shape() const { return shape_; }
    [[nodiscard]] std::size_t ndim() const { return shape_.size(); }
    [[nodiscard]] std::size_t dim(std::size_t i) const { return shape_.at(i); }
    [[nodiscard]] std::size_t numel() const { return data_.size(); }
    [[nodiscard]] bool empty() const { return data_.empty(); }

    [[nodiscard]] std::span<double> data() { return data_; }
    [[nodiscard]] std::span<const double> data() const { return data_; }
    [[nodiscard]] std::vector<double>& values() { return data_; }
    [[nodiscard]] const std::vector<double>& values() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    const double& operator[](std::size_t i) const { return data_[i]; }

    // 2-D element access.
    double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    [[nodiscard]] double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    // Row view of a 2-D tensor.
    [[nodiscard]] std::span<const double> row(std::size_t r) const {
        return std::span<const double>(data_).subspan(r * shape_[1], shape_[1]);
    }
    [[nodiscard]] std::span<double> row(std::size_t r) {
        return std::span<double>(data_).subspan(r * shape_[1], shape_[1]);
    }

    [[nodiscard]] double item() const;

    void zero_grad() { grad.reset(); }
    void reshape(Shape shape);

    bool requires_grad = false;
    std::optional<std::vector<double>> grad;

private:
    Shape shape_;
    std::vector<double> data_;
};

enum class GradMode {
    overwrite,   // leaf grads are replaced by this backward's result
    accumulate,  // leaf grads are added to (explicit opt-in)
};

class Tape;

// Handle to a node recorded on a Tape. Valid only while the tape lives.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    [[nodiscard]] const Tensor& value() const;
    [[nodiscard]] const Shape& shape() const { return value().shape(); }
};

// Records a forward computation in topological order; backward() walks it once
// in reverse. A tape can be consumed only once.
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::span<const double> grad_out)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Leaf bound to a caller-owned tensor. Gradients land in t.grad on backward
    // when t.requires_grad is set; otherwise it behaves like constant().
    Var param(Tensor& t);
    // Borrowed read-only tensor; must outlive the tape.
    Var constant(const Tensor& t);
    // Owned, non-differentiable value.
    Var value(Tensor t);

    void backward(Var loss, GradMode mode = GradMode::overwrite);

    [[nodiscard]] bool consumed() const { return consumed_; }
    [[nodiscard]] std::size_t size() const { return nodes_.size(); }

    // --- used by op implementations ---
    [[nodiscard]] const Tensor& value_of(std::size_t id) const;
    [[nodiscard]] bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
    Var record(Tensor out, std::initializer_list<Var> inputs, BackwardFn fn);
    // Gradient buffer of a node, allocated (zeroed) on first use.
    std::vector<double>& grad_buffer(std::size_t id);

private:
    struct Node {
        Tensor owned;
        const Tensor* borrowed = nullptr;
        Tensor* leaf = nullptr;
        bool needs_grad = false;
        BackwardFn backward;
        std::vector<double> grad;
    };

    void check_owner(Var v) const;

    std::deque<Node> nodes_;  // deque: value() references stay valid while more nodes are recorded
    bool consumed_ = false;
};

// ---- operations ----

// [m x k] . [k x p]
Var matmul(Var a, Var b);
// [m x k] . [p x k]^T, i.e. a linear layer with weight b stored as out x in.
Var matmul_nt(Var a, Var b);

// Elementwise with trailing-dimension broadcasting.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);

Var scale(Var a, double c);
Var sigmoid(Var a);
Var relu(Var a);
Var exp(Var a);
Var log(Var a);
Var square(Var a);

Var sum(Var a);
Var mean(Var a);
Var reshape(Var a, Shape shape);

// Softmax along one axis (negative axis counts from the end).
Var softmax(Var a, int axis = -1);

// Mean negative log-likelihood over positions with mask != 0.
Var cross_entropy(Var logits, std::span<const std::int32_t> targets, std::span<const std::uint8_t> mask);

// Row-wise layer norm of [N x d] with affine [d] parameters.
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);

// Gathers rows of a [V x d] table.
Var embedding(Var table, std::span<const std::int32_t> ids);

struct AttentionLayout {
    std::size_t batch = 1;
    std::size_t q_len = 1;
    std::size_t k_len = 1;
    std::size_t heads = 1;
    bool causal = false;
    // batch x k_len, nonzero for real (non-padding) keys; empty means all valid.
    std::span<const std::uint8_t> key_mask;
};

// Scaled dot-product multi-head attention over row-stacked sequences:
// q is [batch*q_len x D], k and v are [batch*k_len x D].
Var attention(Var q, Var k, Var v, const AttentionLayout& layout);

// Shape helper used by broadcasting ops; throws DimensionError when incompatible.
Shape broadcast_shape(const Shape& a, const Shape& b);

}  // namespace pg
