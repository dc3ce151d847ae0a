#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "streamloc/errors.hpp"
#include "streamloc/rng.hpp"

namespace streamloc {

using Shape = std::vector<std::size_t>;

namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until needed; same length as value after
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    // Scatters this node's grad into the parents' grads.
    std::function<void(TensorNode&)> backward;
    const char* op = "leaf";

    std::size_t size() const { return value.size(); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

// Thread-local switch; when off, ops do not record the graph.
bool& grad_mode();

}  // namespace detail

// RAII guard disabling graph recording (inference paths).
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Dense row-major double tensor with reverse-mode autodiff. Value semantics
// over a shared node, so copies alias the same storage (like the usual
// graph-building tensor types).
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, double fill, bool requires_grad = false);
    explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}

    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double v);
    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0);
    // Glorot uniform for a {fan_in, fan_out} weight matrix.
    static Tensor xavier(Shape shape, Rng& rng);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t size() const { return node_ ? node_->value.size() : 0; }
    std::size_t ndim() const { return node_->shape.size(); }
    // 2-D accessors; 1-D tensors count as a single row.
    std::size_t rows() const;
    std::size_t cols() const;

    double item() const;
    double at(std::size_t i) const { return node_->value[i]; }
    double& at(std::size_t i) { return node_->value[i]; }
    double at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
    double& at(std::size_t r, std::size_t c) { return node_->value[r * cols() + c]; }

    std::vector<double>& data() { return node_->value; }
    const std::vector<double>& data() const { return node_->value; }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }
    bool has_grad() const { return node_ && node_->grad.size() == node_->value.size(); }
    const std::vector<double>& grad() const;
    std::vector<double>& grad();
    void ensure_grad() { node_->ensure_grad(); }
    void zero_grad() {
        node_->ensure_grad();
        std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

    // Same values, fresh leaf, no history, no grad requirement.
    Tensor detach() const;

    // Reverse pass from a scalar output. Visits each reachable node once in
    // reverse topological order; leaf grads accumulate.
    void backward();

    std::shared_ptr<detail::TensorNode> node() const { return node_; }

private:
    std::shared_ptr<detail::TensorNode> node_;
};

// ---- primitive ops ---------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor div(const Tensor& a, const Tensor& b);  // elementwise
Tensor smul(const Tensor& a, double s);
Tensor sadd(const Tensor& a, double s);
Tensor neg(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);     // [n,k]x[k,m]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a . b^T : [n,d]x[m,d] -> [n,m]

Tensor relu(const Tensor& a);
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor pow(const Tensor& a, double p);
Tensor clamp(const Tensor& a, double lo, double hi);
Tensor maximum(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);

Tensor concat_rows(const Tensor& a, const Tensor& b);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1);  // [r0, r1)
Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1);
Tensor stack_rows(const std::vector<Tensor>& rows);  // each {d} or {1,d}

Tensor softmax_rows(const Tensor& a);
Tensor sum(const Tensor& a);        // -> scalar {1}
Tensor mean(const Tensor& a);       // -> scalar {1}
Tensor mean_rows(const Tensor& a);  // [n,d] -> {d} column means (mean pooling)
Tensor add_rowvec(const Tensor& m, const Tensor& v);  // [n,d] + {d} broadcast

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids);

// Causal 1-D convolution over time-major input x [T, d_in] with weight
// {kernel, d_in, d_out} and bias {d_out}. `tail` carries the last (kernel-1)
// rows preceding x (zero rows at stream start); it never receives gradient.
Tensor causal_conv1d(const Tensor& x, const Tensor& w, const Tensor& b, const Tensor& tail);

// Scaled dot-product attention core: softmax(q k^T / sqrt(d)) v.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v);

}  // namespace streamloc
