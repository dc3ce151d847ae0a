#pragma once

#include <string>
#include <vector>

#include "streamloc/params.hpp"
#include "streamloc/tensor.hpp"

namespace streamloc {

// Row-wise layer normalization with affine parameters.
Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-10);

// Sinusoidal encoding of scalar positions, one row per position.
Tensor sinusoid_encoding(const std::vector<double>& positions, std::size_t dim);

struct Linear {
    Tensor w;  // {in, out}
    Tensor b;  // {out}; undefined when the layer is bias-free

    Tensor operator()(const Tensor& x) const {
        Tensor y = matmul(x, w);
        return b.defined() ? add_rowvec(y, b) : y;
    }

    static Linear create(ModelParameters& p, const std::string& prefix, std::size_t in,
                         std::size_t out, Rng& rng, bool bias = true);
};

struct Mlp {
    Linear fc1, fc2;

    Tensor operator()(const Tensor& x) const { return fc2(relu(fc1(x))); }

    static Mlp create(ModelParameters& p, const std::string& prefix, std::size_t in,
                      std::size_t hidden, std::size_t out, Rng& rng);
};

struct LayerNorm {
    Tensor gamma, beta;
    double eps = 1e-10;

    Tensor operator()(const Tensor& x) const { return layer_norm_rows(x, gamma, beta, eps); }

    static LayerNorm create(ModelParameters& p, const std::string& prefix, std::size_t dim);
};

struct MultiheadAttention {
    Linear wq, wk, wv, wo;
    int heads = 1;

    Tensor operator()(const Tensor& q_in, const Tensor& kv_in) const;

    static MultiheadAttention create(ModelParameters& p, const std::string& prefix, std::size_t dim,
                                     int heads, Rng& rng);
};

// Pre-norm encoder layer: ln -> attention -> residual -> ln -> mlp -> residual.
// The key/value set may extend the query set (memory-augmented attention).
struct EncoderLayer {
    LayerNorm ln1, ln2;
    MultiheadAttention attn;
    Mlp mlp;

    Tensor operator()(const Tensor& x) const { return (*this)(x, x); }
    Tensor operator()(const Tensor& x, const Tensor& kv) const;

    static EncoderLayer create(ModelParameters& p, const std::string& prefix, std::size_t dim,
                               std::size_t hidden, int heads, Rng& rng);
};

// Pre-norm decoder layer: self-attention, then cross-attention over an
// external sequence, then the MLP.
struct DecoderLayer {
    LayerNorm ln1, ln2, ln3;
    MultiheadAttention self_attn, cross_attn;
    Mlp mlp;

    Tensor operator()(const Tensor& x, const Tensor& cross_kv) const;

    static DecoderLayer create(ModelParameters& p, const std::string& prefix, std::size_t dim,
                               std::size_t hidden, int heads, Rng& rng);
};

struct CausalConv1d {
    Tensor w;  // {kernel, d_in, d_out}
    Tensor b;  // {d_out}

    // `tail` holds the last (kernel-1) input rows from the previous call;
    // pass an undefined tensor at stream start (zero padding).
    Tensor operator()(const Tensor& x, const Tensor& tail) const {
        return causal_conv1d(x, w, b, tail);
    }
    std::size_t kernel() const { return w.shape()[0]; }

    static CausalConv1d create(ModelParameters& p, const std::string& prefix, std::size_t kernel,
                               std::size_t d_in, std::size_t d_out, Rng& rng);
};

}  // namespace streamloc
