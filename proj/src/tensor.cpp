#include "streamloc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace streamloc {

namespace detail {
bool& grad_mode() {
    thread_local bool mode = true;
    return mode;
}
}  // namespace detail

using detail::TensorNode;

namespace {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '{';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << '}';
    return os.str();
}

[[noreturn]] void shape_fail(const char* op, const Tensor& a, const Tensor& b) {
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
}

// {d} and {1,d} are interchangeable for elementwise work.
bool same_layout(const Tensor& a, const Tensor& b) {
    if (a.size() != b.size()) return false;
    if (a.shape() == b.shape()) return true;
    return a.ndim() <= 2 && b.ndim() <= 2 && a.rows() == b.rows() && a.cols() == b.cols();
}

std::shared_ptr<TensorNode> new_node(Shape shape, const char* op) {
    auto n = std::make_shared<TensorNode>();
    std::size_t total = 1;
    for (auto e : shape) total *= e;
    n->shape = std::move(shape);
    n->value.resize(total);
    n->op = op;
    return n;
}

bool tracking(std::initializer_list<const Tensor*> inputs) {
    if (!detail::grad_mode()) return false;
    for (const Tensor* t : inputs)
        if (t->defined() && t->requires_grad()) return true;
    return false;
}

void attach(const std::shared_ptr<TensorNode>& out, std::vector<std::shared_ptr<TensorNode>> parents,
            std::function<void(TensorNode&)> bw) {
    out->requires_grad = true;
    out->parents = std::move(parents);
    out->backward = std::move(bw);
}

void accum(TensorNode& p, std::size_t i, double v) {
    p.ensure_grad();
    p.grad[i] += v;
}

}  // namespace

// ---- Tensor basics ---------------------------------------------------------

Tensor::Tensor(Shape shape, double fill, bool requires_grad) {
    node_ = new_node(std::move(shape), "leaf");
    std::fill(node_->value.begin(), node_->value.end(), fill);
    node_->requires_grad = requires_grad;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    std::size_t total = 1;
    for (auto e : shape) total *= e;
    if (total != data.size())
        throw ShapeError("from_data: shape " + shape_str(shape) + " does not match data length " +
                         std::to_string(data.size()));
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(n);
}

Tensor Tensor::scalar(double v) { return from_data({1}, {v}); }

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev) {
    Tensor t(std::move(shape), 0.0);
    for (auto& x : t.data()) x = rng.normal() * stddev;
    return t;
}

Tensor Tensor::xavier(Shape shape, Rng& rng) {
    if (shape.size() != 2) throw ShapeError("xavier: expects a 2-D shape");
    Tensor t(shape, 0.0);
    const double a = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
    for (auto& x : t.data()) x = rng.uniform(-a, a);
    return t;
}

std::size_t Tensor::rows() const {
    if (ndim() == 1) return 1;
    if (ndim() == 2) return node_->shape[0];
    throw ShapeError("rows: tensor is not 1-D or 2-D");
}

std::size_t Tensor::cols() const {
    if (ndim() == 1) return node_->shape[0];
    if (ndim() == 2) return node_->shape[1];
    throw ShapeError("cols: tensor is not 1-D or 2-D");
}

double Tensor::item() const {
    if (size() != 1) throw ShapeError("item: tensor has " + std::to_string(size()) + " elements");
    return node_->value[0];
}

const std::vector<double>& Tensor::grad() const {
    if (!has_grad()) throw StateError("grad: no gradient populated");
    return node_->grad;
}

std::vector<double>& Tensor::grad() {
    if (!has_grad()) throw StateError("grad: no gradient populated");
    return node_->grad;
}

Tensor Tensor::detach() const {
    auto n = std::make_shared<TensorNode>();
    n->shape = node_->shape;
    n->value = node_->value;
    return Tensor(n);
}

void Tensor::backward() {
    if (!node_) throw StateError("backward: undefined tensor");
    if (size() != 1) throw StateError("backward: output must be a scalar");

    // Iterative post-order DFS; reverse gives consumers-before-producers.
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> visited;
    struct Frame {
        TensorNode* n;
        std::size_t next;
    };
    std::vector<Frame> stack;
    stack.push_back({node_.get(), 0});
    visited.insert(node_.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->parents.size()) {
            TensorNode* p = f.n->parents[f.next++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }

    node_->ensure_grad();
    node_->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backward) n->backward(*n);
    }
}

// ---- elementwise -----------------------------------------------------------

namespace {

template <typename Fwd, typename Bwd>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
    if (!same_layout(a, b)) shape_fail(name, a, b);
    auto out = new_node(a.shape(), name);
    const auto& av = a.data();
    const auto& bv = b.data();
    for (std::size_t i = 0; i < av.size(); ++i) out->value[i] = fwd(av[i], bv[i]);
    if (tracking({&a, &b})) attach(out, {a.node(), b.node()}, bwd);
    return Tensor(out);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        "add", a, b, [](double x, double y) { return x + y; },
        [](TensorNode& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                if (pa.requires_grad) accum(pa, i, self.grad[i]);
                if (pb.requires_grad) accum(pb, i, self.grad[i]);
            }
        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        "sub", a, b, [](double x, double y) { return x - y; },
        [](TensorNode& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                if (pa.requires_grad) accum(pa, i, self.grad[i]);
                if (pb.requires_grad) accum(pb, i, -self.grad[i]);
            }
        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        "mul", a, b, [](double x, double y) { return x * y; },
        [](TensorNode& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                if (pa.requires_grad) accum(pa, i, self.grad[i] * pb.value[i]);
                if (pb.requires_grad) accum(pb, i, self.grad[i] * pa.value[i]);
            }
        });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary_op(
        "div", a, b, [](double x, double y) { return x / y; },
        [](TensorNode& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                const double inv = 1.0 / pb.value[i];
                if (pa.requires_grad) accum(pa, i, self.grad[i] * inv);
                if (pb.requires_grad) accum(pb, i, -self.grad[i] * self.value[i] * inv);
            }
        });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
    return binary_op(
        "maximum", a, b, [](double x, double y) { return x >= y ? x : y; },
        [](TensorNode& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                const bool left = pa.value[i] >= pb.value[i];
                if (left && pa.requires_grad) accum(pa, i, self.grad[i]);
                if (!left && pb.requires_grad) accum(pb, i, self.grad[i]);
            }
        });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
    return binary_op(
        "minimum", a, b, [](double x, double y) { return x <= y ? x : y; },
        [](TensorNode& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                const bool left = pa.value[i] <= pb.value[i];
                if (left && pa.requires_grad) accum(pa, i, self.grad[i]);
                if (!left && pb.requires_grad) accum(pb, i, self.grad[i]);
            }
        });
}

namespace {

template <typename Fwd, typename Bwd>
Tensor unary_op(const char* name, const Tensor& a, Fwd fwd, Bwd bwd) {
    auto out = new_node(a.shape(), name);
    const auto& av = a.data();
    for (std::size_t i = 0; i < av.size(); ++i) out->value[i] = fwd(av[i]);
    if (tracking({&a})) attach(out, {a.node()}, bwd);
    return Tensor(out);
}

}  // namespace

Tensor smul(const Tensor& a, double s) {
    return unary_op(
        "smul", a, [s](double x) { return x * s; },
        [s](TensorNode& self) {
            auto& pa = *self.parents[0];
            for (std::size_t i = 0; i < self.grad.size(); ++i) accum(pa, i, self.grad[i] * s);
        });
}

Tensor sadd(const Tensor& a, double s) {
    return unary_op(
        "sadd", a, [s](double x) { return x + s; },
        [](TensorNode& self) {
            auto& pa = *self.parents[0];
            for (std::size_t i = 0; i < self.grad.size(); ++i) accum(pa, i, self.grad[i]);
        });
}

Tensor neg(const Tensor& a) { return smul(a, -1.0); }

Tensor relu(const Tensor& a) {
    return unary_op(
        "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](TensorNode& self) {
            auto& pa = *self.parents[0];
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                if (pa.value[i] > 0.0) accum(pa, i, self.grad[i]);
        });
}

Tensor log(const Tensor& a) {
    return unary_op(
        "log", a, [](double x) { return std::log(x); },
        [](TensorNode& self) {
            auto& pa = *self.parents[0];
            for (std::size_t i = 0; i < self.grad.size(); ++i) accum(pa, i, self.grad[i] / pa.value[i]);
        });
}

Tensor exp(const Tensor& a) {
    return unary_op(
        "exp", a, [](double x) { return std::exp(x); },
        [](TensorNode& self) {
            auto& pa = *self.parents[0];
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                accum(pa, i, self.grad[i] * self.value[i]);
        });
}

Tensor sigmoid(const Tensor& a) {
    return unary_op(
        "sigmoid", a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
        [](TensorNode& self) {
            auto& pa = *self.parents[0];
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                const double s = self.value[i];
                accum(pa, i, self.grad[i] * s * (1.0 - s));
            }
        });
}

Tensor abs(const Tensor& a) {
    return unary_op(
        "abs", a, [](double x) { return std::fabs(x); },
        [](TensorNode& self) {
            auto& pa = *self.parents[0];
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                const double x = pa.value[i];
                if (x > 0.0)
                    accum(pa, i, self.grad[i]);
                else if (x < 0.0)
                    accum(pa, i, -self.grad[i]);
            }
        });
}

Tensor pow(const Tensor& a, double p) {
    return unary_op(
        "pow", a, [p](double x) { return std::pow(x, p); },
        [p](TensorNode& self) {
            auto& pa = *self.parents[0];
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                accum(pa, i, self.grad[i] * p * std::pow(pa.value[i], p - 1.0));
        });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
    return unary_op(
        "clamp", a, [lo, hi](double x) { return std::min(hi, std::max(lo, x)); },
        [lo, hi](TensorNode& self) {
            auto& pa = *self.parents[0];
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                const double x = pa.value[i];
                if (x > lo && x < hi) accum(pa, i, self.grad[i]);
            }
        });
}

// ---- linear algebra --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    const std::size_t n = a.rows(), k = a.cols(), k2 = b.rows(), m = b.cols();
    if (k != k2) shape_fail("matmul", a, b);
    auto out = new_node({n, m}, "matmul");
    const double* av = a.data().data();
    const double* bv = b.data().data();
    double* ov = out->value.data();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            if (aip == 0.0) continue;
            const double* brow = bv + p * m;
            double* orow = ov + i * m;
            for (std::size_t j = 0; j < m; ++j) orow[j] += aip * brow[j];
        }
    }
    if (tracking({&a, &b})) {
        attach(out, {a.node(), b.node()}, [n, k, m](TensorNode& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            const double* g = self.grad.data();
            if (pa.requires_grad) {
                pa.ensure_grad();
                // dA = G . B^T
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        double acc = 0.0;
                        const double* grow = g + i * m;
                        const double* brow = pb.value.data() + p * m;
                        for (std::size_t j = 0; j < m; ++j) acc += grow[j] * brow[j];
                        pa.grad[i * k + p] += acc;
                    }
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                // dB = A^T . G
                for (std::size_t i = 0; i < n; ++i) {
                    const double* grow = g + i * m;
                    for (std::size_t p = 0; p < k; ++p) {
                        const double aip = pa.value[i * k + p];
                        if (aip == 0.0) continue;
                        double* brow = pb.grad.data() + p * m;
                        for (std::size_t j = 0; j < m; ++j) brow[j] += aip * grow[j];
                    }
                }
            }
        });
    }
    return Tensor(out);
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    const std::size_t n = a.rows(), d = a.cols(), m = b.rows();
    if (d != b.cols()) shape_fail("matmul_nt", a, b);
    auto out = new_node({n, m}, "matmul_nt");
    const double* av = a.data().data();
    const double* bv = b.data().data();
    double* ov = out->value.data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            double acc = 0.0;
            const double* arow = av + i * d;
            const double* brow = bv + j * d;
            for (std::size_t t = 0; t < d; ++t) acc += arow[t] * brow[t];
            ov[i * m + j] = acc;
        }
    if (tracking({&a, &b})) {
        attach(out, {a.node(), b.node()}, [n, d, m](TensorNode& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            const double* g = self.grad.data();
            if (pa.requires_grad) {
                pa.ensure_grad();
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < m; ++j) {
                        const double gij = g[i * m + j];
                        if (gij == 0.0) continue;
                        const double* brow = pb.value.data() + j * d;
                        double* arow = pa.grad.data() + i * d;
                        for (std::size_t t = 0; t < d; ++t) arow[t] += gij * brow[t];
                    }
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < m; ++j) {
                        const double gij = g[i * m + j];
                        if (gij == 0.0) continue;
                        const double* arow = pa.value.data() + i * d;
                        double* brow = pb.grad.data() + j * d;
                        for (std::size_t t = 0; t < d; ++t) brow[t] += gij * arow[t];
                    }
            }
        });
    }
    return Tensor(out);
}

// ---- structure ops ---------------------------------------------------------

Tensor concat_rows(const Tensor& a, const Tensor& b) {
    const std::size_t ra = a.rows(), rb = b.rows(), c = a.cols();
    if (b.cols() != c) shape_fail("concat_rows", a, b);
    auto out = new_node({ra + rb, c}, "concat_rows");
    std::copy(a.data().begin(), a.data().end(), out->value.begin());
    std::copy(b.data().begin(), b.data().end(), out->value.begin() + static_cast<long>(ra * c));
    if (tracking({&a, &b})) {
        attach(out, {a.node(), b.node()}, [ra, rb, c](TensorNode& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            if (pa.requires_grad) {
                pa.ensure_grad();
                for (std::size_t i = 0; i < ra * c; ++i) pa.grad[i] += self.grad[i];
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                for (std::size_t i = 0; i < rb * c; ++i) pb.grad[i] += self.grad[ra * c + i];
            }
        });
    }
    return Tensor(out);
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
    const std::size_t n = a.rows(), ca = a.cols(), cb = b.cols();
    if (b.rows() != n) shape_fail("concat_cols", a, b);
    auto out = new_node({n, ca + cb}, "concat_cols");
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < ca; ++j) out->value[i * (ca + cb) + j] = a.data()[i * ca + j];
        for (std::size_t j = 0; j < cb; ++j) out->value[i * (ca + cb) + ca + j] = b.data()[i * cb + j];
    }
    if (tracking({&a, &b})) {
        attach(out, {a.node(), b.node()}, [n, ca, cb](TensorNode& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            for (std::size_t i = 0; i < n; ++i) {
                if (pa.requires_grad)
                    for (std::size_t j = 0; j < ca; ++j)
                        accum(pa, i * ca + j, self.grad[i * (ca + cb) + j]);
                if (pb.requires_grad)
                    for (std::size_t j = 0; j < cb; ++j)
                        accum(pb, i * cb + j, self.grad[i * (ca + cb) + ca + j]);
            }
        });
    }
    return Tensor(out);
}

Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1) {
    const std::size_t n = a.rows(), c = a.cols();
    if (r0 > r1 || r1 > n) throw ShapeError("slice_rows: range out of bounds");
    auto out = new_node({r1 - r0, c}, "slice_rows");
    std::copy(a.data().begin() + static_cast<long>(r0 * c), a.data().begin() + static_cast<long>(r1 * c),
              out->value.begin());
    if (tracking({&a})) {
        attach(out, {a.node()}, [r0, c](TensorNode& self) {
            auto& pa = *self.parents[0];
            pa.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[r0 * c + i] += self.grad[i];
        });
    }
    return Tensor(out);
}

Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1) {
    const std::size_t n = a.rows(), c = a.cols();
    if (c0 > c1 || c1 > c) throw ShapeError("slice_cols: range out of bounds");
    const std::size_t w = c1 - c0;
    auto out = new_node({n, w}, "slice_cols");
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < w; ++j) out->value[i * w + j] = a.data()[i * c + c0 + j];
    if (tracking({&a})) {
        attach(out, {a.node()}, [c0, c, w, n](TensorNode& self) {
            auto& pa = *self.parents[0];
            pa.ensure_grad();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < w; ++j) pa.grad[i * c + c0 + j] += self.grad[i * w + j];
        });
    }
    return Tensor(out);
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
    if (rows.empty()) throw ShapeError("stack_rows: empty input");
    const std::size_t d = rows[0].size();
    auto out = new_node({rows.size(), d}, "stack_rows");
    bool track = false;
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != d) throw ShapeError("stack_rows: inconsistent row widths");
        std::copy(rows[r].data().begin(), rows[r].data().end(), out->value.begin() + static_cast<long>(r * d));
        track = track || rows[r].requires_grad();
    }
    if (detail::grad_mode() && track) {
        std::vector<std::shared_ptr<TensorNode>> parents;
        parents.reserve(rows.size());
        for (const auto& r : rows) parents.push_back(r.node());
        attach(out, std::move(parents), [d](TensorNode& self) {
            for (std::size_t r = 0; r < self.parents.size(); ++r) {
                auto& p = *self.parents[r];
                if (!p.requires_grad) continue;
                p.ensure_grad();
                for (std::size_t j = 0; j < d; ++j) p.grad[j] += self.grad[r * d + j];
            }
        });
    }
    return Tensor(out);
}

// ---- reductions and row ops -------------------------------------------------

Tensor softmax_rows(const Tensor& a) {
    const std::size_t n = a.rows(), c = a.cols();
    auto out = new_node(a.shape(), "softmax_rows");
    for (std::size_t i = 0; i < n; ++i) {
        const double* x = a.data().data() + i * c;
        double* y = out->value.data() + i * c;
        double mx = x[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            y[j] = std::exp(x[j] - mx);
            z += y[j];
        }
        for (std::size_t j = 0; j < c; ++j) y[j] /= z;
    }
    if (tracking({&a})) {
        attach(out, {a.node()}, [n, c](TensorNode& self) {
            auto& pa = *self.parents[0];
            pa.ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                const double* y = self.value.data() + i * c;
                const double* g = self.grad.data() + i * c;
                double dot = 0.0;
                for (std::size_t j = 0; j < c; ++j) dot += y[j] * g[j];
                for (std::size_t j = 0; j < c; ++j) pa.grad[i * c + j] += y[j] * (g[j] - dot);
            }
        });
    }
    return Tensor(out);
}

Tensor sum(const Tensor& a) {
    auto out = new_node({1}, "sum");
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    out->value[0] = acc;
    if (tracking({&a})) {
        attach(out, {a.node()}, [](TensorNode& self) {
            auto& pa = *self.parents[0];
            pa.ensure_grad();
            for (auto& g : pa.grad) g += self.grad[0];
        });
    }
    return Tensor(out);
}

Tensor mean(const Tensor& a) {
    if (a.size() == 0) throw ShapeError("mean: empty tensor");
    return smul(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor mean_rows(const Tensor& a) {
    const std::size_t n = a.rows(), c = a.cols();
    if (n == 0) throw ShapeError("mean_rows: empty tensor");
    auto out = new_node({c}, "mean_rows");
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) out->value[j] += a.data()[i * c + j];
    for (std::size_t j = 0; j < c; ++j) out->value[j] /= static_cast<double>(n);
    if (tracking({&a})) {
        attach(out, {a.node()}, [n, c](TensorNode& self) {
            auto& pa = *self.parents[0];
            pa.ensure_grad();
            const double inv = 1.0 / static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < c; ++j) pa.grad[i * c + j] += self.grad[j] * inv;
        });
    }
    return Tensor(out);
}

Tensor add_rowvec(const Tensor& m, const Tensor& v) {
    const std::size_t n = m.rows(), c = m.cols();
    if (v.size() != c) shape_fail("add_rowvec", m, v);
    auto out = new_node(m.shape(), "add_rowvec");
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) out->value[i * c + j] = m.data()[i * c + j] + v.data()[j];
    if (tracking({&m, &v})) {
        attach(out, {m.node(), v.node()}, [n, c](TensorNode& self) {
            auto& pm = *self.parents[0];
            auto& pv = *self.parents[1];
            if (pm.requires_grad) {
                pm.ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) pm.grad[i] += self.grad[i];
            }
            if (pv.requires_grad) {
                pv.ensure_grad();
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < c; ++j) pv.grad[j] += self.grad[i * c + j];
            }
        });
    }
    return Tensor(out);
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
    const std::size_t v = table.rows(), d = table.cols();
    auto out = new_node({ids.size(), d}, "embedding_lookup");
    for (std::size_t r = 0; r < ids.size(); ++r) {
        if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= v)
            throw VocabularyError("embedding_lookup: token " + std::to_string(ids[r]) +
                                  " outside vocabulary of size " + std::to_string(v));
        std::copy(table.data().begin() + ids[r] * static_cast<long>(d),
                  table.data().begin() + (ids[r] + 1) * static_cast<long>(d),
                  out->value.begin() + static_cast<long>(r * d));
    }
    if (tracking({&table})) {
        auto idcopy = ids;
        attach(out, {table.node()}, [idcopy, d](TensorNode& self) {
            auto& pt = *self.parents[0];
            pt.ensure_grad();
            for (std::size_t r = 0; r < idcopy.size(); ++r)
                for (std::size_t j = 0; j < d; ++j)
                    pt.grad[static_cast<std::size_t>(idcopy[r]) * d + j] += self.grad[r * d + j];
        });
    }
    return Tensor(out);
}

Tensor causal_conv1d(const Tensor& x, const Tensor& w, const Tensor& b, const Tensor& tail) {
    if (x.ndim() != 2 || w.ndim() != 3) throw ShapeError("causal_conv1d: x must be 2-D, w must be 3-D");
    const std::size_t t_len = x.shape()[0], din = x.shape()[1];
    const std::size_t kernel = w.shape()[0], wdin = w.shape()[1], dout = w.shape()[2];
    if (wdin != din || b.size() != dout) shape_fail("causal_conv1d", x, w);
    const std::size_t tail_rows = kernel - 1;
    if (tail.defined() && tail.size() > 0 &&
        (tail.rows() != tail_rows || tail.cols() != din))
        throw ShapeError("causal_conv1d: tail must be {kernel-1, d_in}");

    // padded[r] for r in [0, T + kernel - 1): tail rows then x rows.
    auto padded_row = [&](std::size_t r) -> const double* {
        static const std::vector<double> zeros_small;
        if (r < tail_rows) {
            if (tail.defined() && tail.size() > 0) return tail.data().data() + r * din;
            return nullptr;  // zero row
        }
        return x.data().data() + (r - tail_rows) * din;
    };

    auto out = new_node({t_len, dout}, "causal_conv1d");
    for (std::size_t t = 0; t < t_len; ++t) {
        double* y = out->value.data() + t * dout;
        for (std::size_t o = 0; o < dout; ++o) y[o] = b.data()[o];
        for (std::size_t tap = 0; tap < kernel; ++tap) {
            const double* row = padded_row(t + tap);
            if (!row) continue;
            const double* wrow = w.data().data() + tap * din * dout;
            for (std::size_t i = 0; i < din; ++i) {
                const double xv = row[i];
                if (xv == 0.0) continue;
                const double* wi = wrow + i * dout;
                for (std::size_t o = 0; o < dout; ++o) y[o] += xv * wi[o];
            }
        }
    }
    if (tracking({&x, &w, &b})) {
        // tail is raw history; it never requires grad.
        auto tail_node = (tail.defined() && tail.size() > 0) ? tail.node() : nullptr;
        attach(out, {x.node(), w.node(), b.node()},
               [t_len, din, kernel, dout, tail_node, tail_rows](TensorNode& self) {
                   auto& px = *self.parents[0];
                   auto& pw = *self.parents[1];
                   auto& pb = *self.parents[2];
                   auto padded = [&](std::size_t r) -> const double* {
                       if (r < tail_rows)
                           return tail_node ? tail_node->value.data() + r * din : nullptr;
                       return px.value.data() + (r - tail_rows) * din;
                   };
                   for (std::size_t t = 0; t < t_len; ++t) {
                       const double* g = self.grad.data() + t * dout;
                       if (pb.requires_grad) {
                           pb.ensure_grad();
                           for (std::size_t o = 0; o < dout; ++o) pb.grad[o] += g[o];
                       }
                       for (std::size_t tap = 0; tap < kernel; ++tap) {
                           const std::size_t r = t + tap;
                           const double* row = padded(r);
                           if (pw.requires_grad && row) {
                               pw.ensure_grad();
                               double* wrow = pw.grad.data() + tap * din * dout;
                               for (std::size_t i = 0; i < din; ++i) {
                                   const double xv = row[i];
                                   if (xv == 0.0) continue;
                                   double* wi = wrow + i * dout;
                                   for (std::size_t o = 0; o < dout; ++o) wi[o] += xv * g[o];
                               }
                           }
                           if (px.requires_grad && r >= tail_rows) {
                               px.ensure_grad();
                               const double* wrow = pw.value.data() + tap * din * dout;
                               double* xg = px.grad.data() + (r - tail_rows) * din;
                               for (std::size_t i = 0; i < din; ++i) {
                                   const double* wi = wrow + i * dout;
                                   double acc = 0.0;
                                   for (std::size_t o = 0; o < dout; ++o) acc += wi[o] * g[o];
                                   xg[i] += acc;
                               }
                           }
                       }
                   }
               });
    }
    return Tensor(out);
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v) {
    if (q.cols() != k.cols()) shape_fail("attention", q, k);
    if (k.rows() != v.rows()) shape_fail("attention", k, v);
    if (q.cols() == 0 || k.rows() == 0) throw ShapeError("attention: empty inputs");
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
    Tensor weights = softmax_rows(smul(matmul_nt(q, k), scale));
    return matmul(weights, v);
}

}  // namespace streamloc
