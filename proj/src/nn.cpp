#include "streamloc/nn.hpp"

#include <cmath>

namespace streamloc {

Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const std::size_t n = x.rows(), c = x.cols();
    if (gamma.size() != c || beta.size() != c)
        throw ShapeError("layer_norm_rows: affine parameters must have width " + std::to_string(c));
    auto out = std::make_shared<detail::TensorNode>();
    out->shape = x.shape();
    out->value.resize(n * c);
    out->op = "layer_norm";
    // Cache xhat and inv-std per row for the backward pass.
    std::vector<double> xhat(n * c), inv_std(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = x.data().data() + i * c;
        double mu = 0.0;
        for (std::size_t j = 0; j < c; ++j) mu += row[j];
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(c);
        const double s = 1.0 / std::sqrt(var + eps);
        inv_std[i] = s;
        for (std::size_t j = 0; j < c; ++j) {
            xhat[i * c + j] = (row[j] - mu) * s;
            out->value[i * c + j] = gamma.data()[j] * xhat[i * c + j] + beta.data()[j];
        }
    }
    if (detail::grad_mode() &&
        (x.requires_grad() || gamma.requires_grad() || beta.requires_grad())) {
        out->requires_grad = true;
        out->parents = {x.node(), gamma.node(), beta.node()};
        out->backward = [n, c, xhat = std::move(xhat),
                         inv_std = std::move(inv_std)](detail::TensorNode& self) {
            auto& px = *self.parents[0];
            auto& pg = *self.parents[1];
            auto& pb = *self.parents[2];
            for (std::size_t i = 0; i < n; ++i) {
                const double* g = self.grad.data() + i * c;
                const double* xh = xhat.data() + i * c;
                if (pg.requires_grad) {
                    pg.ensure_grad();
                    for (std::size_t j = 0; j < c; ++j) pg.grad[j] += g[j] * xh[j];
                }
                if (pb.requires_grad) {
                    pb.ensure_grad();
                    for (std::size_t j = 0; j < c; ++j) pb.grad[j] += g[j];
                }
                if (px.requires_grad) {
                    px.ensure_grad();
                    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                    for (std::size_t j = 0; j < c; ++j) {
                        const double dxh = g[j] * pg.value[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xh[j];
                    }
                    mean_dxhat /= static_cast<double>(c);
                    mean_dxhat_xhat /= static_cast<double>(c);
                    for (std::size_t j = 0; j < c; ++j) {
                        const double dxh = g[j] * pg.value[j];
                        px.grad[i * c + j] +=
                            inv_std[i] * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
                    }
                }
            }
        };
    }
    return Tensor(out);
}

Tensor sinusoid_encoding(const std::vector<double>& positions, std::size_t dim) {
    Tensor enc({positions.size(), dim}, 0.0);
    for (std::size_t r = 0; r < positions.size(); ++r) {
        for (std::size_t j = 0; j < dim; j += 2) {
            const double freq = std::pow(10000.0, -static_cast<double>(j) / static_cast<double>(dim));
            enc.at(r, j) = std::sin(positions[r] * freq);
            if (j + 1 < dim) enc.at(r, j + 1) = std::cos(positions[r] * freq);
        }
    }
    return enc;
}

Linear Linear::create(ModelParameters& p, const std::string& prefix, std::size_t in,
                      std::size_t out, Rng& rng, bool bias) {
    Linear l;
    l.w = p.create(prefix + ".w", Tensor::xavier({in, out}, rng));
    if (bias) l.b = p.create(prefix + ".b", Tensor({out}, 0.0));
    return l;
}

Mlp Mlp::create(ModelParameters& p, const std::string& prefix, std::size_t in, std::size_t hidden,
                std::size_t out, Rng& rng) {
    Mlp m;
    m.fc1 = Linear::create(p, prefix + ".fc1", in, hidden, rng);
    m.fc2 = Linear::create(p, prefix + ".fc2", hidden, out, rng);
    return m;
}

LayerNorm LayerNorm::create(ModelParameters& p, const std::string& prefix, std::size_t dim) {
    LayerNorm ln;
    ln.gamma = p.create(prefix + ".gamma", Tensor({dim}, 1.0));
    ln.beta = p.create(prefix + ".beta", Tensor({dim}, 0.0));
    return ln;
}

Tensor MultiheadAttention::operator()(const Tensor& q_in, const Tensor& kv_in) const {
    Tensor q = wq(q_in), k = wk(kv_in), v = wv(kv_in);
    Tensor mixed;
    if (heads <= 1) {
        mixed = attention(q, k, v);
    } else {
        const std::size_t dim = q.cols();
        if (dim % static_cast<std::size_t>(heads) != 0)
            throw ShapeError("attention: head count must divide model width");
        const std::size_t hd = dim / static_cast<std::size_t>(heads);
        for (int h = 0; h < heads; ++h) {
            const std::size_t c0 = static_cast<std::size_t>(h) * hd;
            Tensor part = attention(slice_cols(q, c0, c0 + hd), slice_cols(k, c0, c0 + hd),
                                    slice_cols(v, c0, c0 + hd));
            mixed = (h == 0) ? part : concat_cols(mixed, part);
        }
    }
    return wo(mixed);
}

MultiheadAttention MultiheadAttention::create(ModelParameters& p, const std::string& prefix,
                                              std::size_t dim, int heads, Rng& rng) {
    MultiheadAttention a;
    a.heads = heads;
    a.wq = Linear::create(p, prefix + ".wq", dim, dim, rng);
    // A key bias cancels inside the softmax, so its gradient is identically
    // zero; the projection goes without one.
    a.wk = Linear::create(p, prefix + ".wk", dim, dim, rng, false);
    a.wv = Linear::create(p, prefix + ".wv", dim, dim, rng);
    a.wo = Linear::create(p, prefix + ".wo", dim, dim, rng);
    return a;
}

Tensor EncoderLayer::operator()(const Tensor& x, const Tensor& kv) const {
    Tensor h;
    if (kv.node() == x.node()) {
        Tensor nx = ln1(x);
        h = add(x, attn(nx, nx));
    } else {
        h = add(x, attn(ln1(x), ln1(kv)));
    }
    return add(h, mlp(ln2(h)));
}

EncoderLayer EncoderLayer::create(ModelParameters& p, const std::string& prefix, std::size_t dim,
                                  std::size_t hidden, int heads, Rng& rng) {
    EncoderLayer e;
    e.ln1 = LayerNorm::create(p, prefix + ".ln1", dim);
    e.ln2 = LayerNorm::create(p, prefix + ".ln2", dim);
    e.attn = MultiheadAttention::create(p, prefix + ".attn", dim, heads, rng);
    e.mlp = Mlp::create(p, prefix + ".mlp", dim, hidden, dim, rng);
    return e;
}

Tensor DecoderLayer::operator()(const Tensor& x, const Tensor& cross_kv) const {
    Tensor n1 = ln1(x);
    Tensor h = add(x, self_attn(n1, n1));
    h = add(h, cross_attn(ln2(h), cross_kv));
    return add(h, mlp(ln3(h)));
}

DecoderLayer DecoderLayer::create(ModelParameters& p, const std::string& prefix, std::size_t dim,
                                  std::size_t hidden, int heads, Rng& rng) {
    DecoderLayer d;
    d.ln1 = LayerNorm::create(p, prefix + ".ln1", dim);
    d.ln2 = LayerNorm::create(p, prefix + ".ln2", dim);
    d.ln3 = LayerNorm::create(p, prefix + ".ln3", dim);
    d.self_attn = MultiheadAttention::create(p, prefix + ".self", dim, heads, rng);
    d.cross_attn = MultiheadAttention::create(p, prefix + ".cross", dim, heads, rng);
    d.mlp = Mlp::create(p, prefix + ".mlp", dim, hidden, dim, rng);
    return d;
}

CausalConv1d CausalConv1d::create(ModelParameters& p, const std::string& prefix, std::size_t kernel,
                                  std::size_t d_in, std::size_t d_out, Rng& rng) {
    CausalConv1d c;
    const double a = std::sqrt(6.0 / static_cast<double>(kernel * d_in + d_out));
    Tensor w({kernel, d_in, d_out}, 0.0);
    for (auto& x : w.data()) x = rng.uniform(-a, a);
    c.w = p.create(prefix + ".w", w);
    c.b = p.create(prefix + ".b", Tensor({d_out}, 0.0));
    return c;
}

}  // namespace streamloc
