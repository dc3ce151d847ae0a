#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "streamloc/nn.hpp"
#include "streamloc/params.hpp"
#include "streamloc/rng.hpp"
#include "streamloc/tensor.hpp"

using namespace streamloc;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = false) {
    Tensor t = Tensor::randn(std::move(shape), rng);
    t.set_requires_grad(requires_grad);
    return t;
}

// Scalar-loop attention reference, independent of the tensor op stack.
std::vector<double> attention_oracle(const std::vector<double>& q, const std::vector<double>& k,
                                     const std::vector<double>& v, std::size_t n, std::size_t m,
                                     std::size_t d) {
    std::vector<double> out(n * d, 0.0);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> scores(m, 0.0);
        double mx = -1e300;
        for (std::size_t j = 0; j < m; ++j) {
            double s = 0.0;
            for (std::size_t t = 0; t < d; ++t) s += q[i * d + t] * k[j * d + t];
            scores[j] = s * scale;
            mx = std::max(mx, scores[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            scores[j] = std::exp(scores[j] - mx);
            z += scores[j];
        }
        for (std::size_t j = 0; j < m; ++j)
            for (std::size_t t = 0; t < d; ++t) out[i * d + t] += scores[j] / z * v[j * d + t];
    }
    return out;
}

}  // namespace

TEST_CASE("elementwise ops and shapes") {
    Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from_data({2, 2}, {5, 6, 7, 8});
    CHECK(add(a, b).data() == std::vector<double>{6, 8, 10, 12});
    CHECK(sub(b, a).data() == std::vector<double>{4, 4, 4, 4});
    CHECK(mul(a, b).data() == std::vector<double>{5, 12, 21, 32});
    CHECK(smul(a, 2.0).data() == std::vector<double>{2, 4, 6, 8});
    CHECK_THROWS_AS(add(a, Tensor::from_data({3}, {1, 2, 3})), ShapeError);
}

TEST_CASE("matmul against hand computation") {
    Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor b = Tensor::from_data({3, 2}, {7, 8, 9, 10, 11, 12});
    Tensor c = matmul(a, b);
    CHECK(c.data() == std::vector<double>{58, 64, 139, 154});
    CHECK_THROWS_AS(matmul(a, a), ShapeError);
}

TEST_CASE("softmax rows sum to one") {
    Rng rng(7);
    Tensor x = random_tensor({5, 9}, rng);
    Tensor y = softmax_rows(x);
    for (std::size_t i = 0; i < 5; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < 9; ++j) s += y.at(i, j);
        CHECK(std::fabs(s - 1.0) < 1e-12);
    }
}

TEST_CASE("backward accumulates through shared subexpressions") {
    Tensor x = Tensor::scalar(3.0);
    x.set_requires_grad(true);
    Tensor y = add(x, x);
    y.backward();
    CHECK(x.grad()[0] == doctest::Approx(2.0));
}

TEST_CASE("grad of x^2 at 3 is 6") {
    ModelParameters params;
    Tensor x = params.create("x", Tensor::scalar(3.0));
    auto f = [&]() { return mul(params.get("x"), params.get("x")); };
    const double err = grad_check(f, params, 1e-5);
    CHECK(err < 1e-9);
}

TEST_CASE("attention: single key broadcasts the value row") {
    Rng rng(11);
    Tensor q = random_tensor({3, 4}, rng);
    Tensor k = random_tensor({1, 4}, rng);
    Tensor v = random_tensor({1, 4}, rng);
    Tensor out = attention(q, k, v);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 4; ++j) CHECK(out.at(i, j) == doctest::Approx(v.at(0, j)));
}

TEST_CASE("attention: identical keys average the values") {
    Rng rng(13);
    Tensor q = random_tensor({2, 4}, rng);
    std::vector<double> krow(4);
    for (auto& x : krow) x = rng.normal();
    std::vector<double> kdata;
    for (int r = 0; r < 3; ++r) kdata.insert(kdata.end(), krow.begin(), krow.end());
    Tensor k = Tensor::from_data({3, 4}, kdata);
    Tensor v = random_tensor({3, 4}, rng);
    Tensor out = attention(q, k, v);
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 4; ++j) {
            const double mean = (v.at(0, j) + v.at(1, j) + v.at(2, j)) / 3.0;
            CHECK(out.at(i, j) == doctest::Approx(mean).epsilon(1e-12));
        }
}

TEST_CASE("attention matches scalar-loop oracle on random 3x4 inputs") {
    Rng rng(17);
    for (int rep = 0; rep < 10; ++rep) {
        Tensor q = random_tensor({3, 4}, rng);
        Tensor k = random_tensor({3, 4}, rng);
        Tensor v = random_tensor({3, 4}, rng);
        Tensor out = attention(q, k, v);
        auto ref = attention_oracle(q.data(), k.data(), v.data(), 3, 3, 4);
        double worst = 0.0;
        for (std::size_t i = 0; i < ref.size(); ++i)
            worst = std::max(worst, std::fabs(out.data()[i] - ref[i]));
        CHECK(worst < 1e-12);
    }
}

TEST_CASE("attention output rows are convex combinations of value rows") {
    // With a single value column the output must stay inside [min v, max v].
    Rng rng(19);
    Tensor q = random_tensor({4, 3}, rng);
    Tensor k = random_tensor({5, 3}, rng);
    Tensor v = random_tensor({5, 1}, rng);
    double lo = 1e300, hi = -1e300;
    for (double x : v.data()) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    Tensor out = attention(q, k, v);
    for (double x : out.data()) {
        CHECK(x >= lo - 1e-12);
        CHECK(x <= hi + 1e-12);
    }
}

TEST_CASE("grad_check covers every primitive") {
    Rng rng(23);
    auto run = [&](const char* name, auto&& build, Shape shape) {
        for (int rep = 0; rep < 20; ++rep) {
            ModelParameters params;
            params.create("x", Tensor::randn(shape, rng));
            auto f = [&]() { return build(params.get("x")); };
            const double err = grad_check(f, params, 1e-5);
            INFO(name << " rep " << rep);
            CHECK(err < 1e-6);
        }
    };

    run("add", [&](Tensor x) { return sum(add(x, mul(x, x))); }, {3, 4});
    run("matmul", [&](Tensor x) { return sum(matmul(x, x)); }, {3, 3});
    run("matmul_nt", [&](Tensor x) { return sum(matmul_nt(x, x)); }, {3, 4});
    run("concat_rows", [&](Tensor x) { return sum(mul(concat_rows(x, x), concat_rows(x, x))); }, {2, 3});
    run("concat_cols", [&](Tensor x) { return sum(pow(concat_cols(x, x), 2.0)); }, {2, 3});
    run("slice", [&](Tensor x) {
        return add(sum(mul(slice_rows(x, 1, 3), slice_rows(x, 0, 2))),
                   sum(pow(slice_cols(x, 1, 3), 2.0)));
    }, {4, 4});
    run("softmax", [&](Tensor x) { return sum(mul(softmax_rows(x), x)); }, {3, 5});
    run("relu", [&](Tensor x) { return sum(mul(relu(x), x)); }, {4, 4});
    run("mean_pool", [&](Tensor x) { return sum(mul(mean_rows(x), mean_rows(x))); }, {4, 3});
    run("sigmoid_log", [&](Tensor x) { return sum(log(sigmoid(x))); }, {3, 3});
    run("div_abs", [&](Tensor x) { return sum(div(abs(x), sadd(mul(x, x), 1.0))); }, {3, 3});
    run("softmax_attention",
        [&](Tensor x) { return sum(attention(x, x, x)); }, {3, 4});
}

TEST_CASE("grad_check: layer-norm and causal conv primitives") {
    Rng rng(29);
    for (int rep = 0; rep < 20; ++rep) {
        ModelParameters params;
        params.create("x", Tensor::randn({3, 6}, rng));
        params.create("gamma", Tensor::randn({6}, rng));
        params.create("beta", Tensor::randn({6}, rng));
        auto f = [&]() {
            Tensor y = layer_norm_rows(params.get("x"), params.get("gamma"), params.get("beta"));
            return sum(mul(y, y));
        };
        CHECK(grad_check(f, params, 1e-5) < 1e-6);
    }
    for (int rep = 0; rep < 20; ++rep) {
        ModelParameters params;
        params.create("x", Tensor::randn({5, 3}, rng));
        params.create("w", Tensor::randn({3, 3, 2}, rng));
        params.create("b", Tensor::randn({2}, rng));
        Tensor tail = Tensor::randn({2, 3}, rng);
        auto f = [&]() {
            Tensor y = causal_conv1d(params.get("x"), params.get("w"), params.get("b"), tail);
            return sum(mul(y, y));
        };
        CHECK(grad_check(f, params, 1e-5) < 1e-6);
    }
}

TEST_CASE("grad_check: sum of attention output over random small inputs") {
    Rng rng(31);
    ModelParameters params;
    params.create("q", Tensor::randn({3, 4}, rng));
    params.create("k", Tensor::randn({5, 4}, rng));
    params.create("v", Tensor::randn({5, 4}, rng));
    auto f = [&]() { return sum(attention(params.get("q"), params.get("k"), params.get("v"))); };
    CHECK(grad_check(f, params, 1e-5) < 1e-6);
}

TEST_CASE("causal conv1d ignores future inputs") {
    Rng rng(37);
    Tensor w = Tensor::randn({3, 2, 2}, rng);
    Tensor b = Tensor::randn({2}, rng);
    Tensor x = Tensor::randn({6, 2}, rng);
    Tensor y0 = causal_conv1d(x, w, b, Tensor());
    Tensor x2 = x.detach();
    x2.at(5, 0) += 100.0;  // perturb the last frame
    x2.at(5, 1) -= 50.0;
    Tensor y1 = causal_conv1d(x2, w, b, Tensor());
    for (std::size_t t = 0; t < 5; ++t)
        for (std::size_t o = 0; o < 2; ++o) CHECK(y0.at(t, o) == y1.at(t, o));
}

TEST_CASE("layer norm rows are standardized") {
    Rng rng(41);
    Tensor x = random_tensor({4, 16}, rng);
    Tensor gamma({16}, 1.0), beta({16}, 0.0);
    Tensor y = layer_norm_rows(x, gamma, beta);
    for (std::size_t i = 0; i < 4; ++i) {
        double mu = 0.0, var = 0.0;
        for (std::size_t j = 0; j < 16; ++j) mu += y.at(i, j);
        mu /= 16.0;
        for (std::size_t j = 0; j < 16; ++j) var += (y.at(i, j) - mu) * (y.at(i, j) - mu);
        var /= 16.0;
        CHECK(std::fabs(mu) < 1e-10);
        CHECK(std::fabs(var - 1.0) < 1e-8);
    }
}

TEST_CASE("adamw: weight decay only") {
    ModelParameters params;
    Tensor p = params.create("p", Tensor::from_data({2}, {1.0, -2.0}));
    params.zero_grads();
    AdamWConfig cfg;
    cfg.lr = 0.01;
    cfg.weight_decay = 0.1;
    params.adamw_step(cfg);
    CHECK(p.data()[0] == doctest::Approx(0.999).epsilon(1e-12));
    CHECK(p.data()[1] == doctest::Approx(-1.998).epsilon(1e-12));

    ModelParameters params2;
    Tensor q = params2.create("q", Tensor::from_data({2}, {1.0, -2.0}));
    params2.zero_grads();
    cfg.weight_decay = 0.0;
    params2.adamw_step(cfg);
    CHECK(q.data()[0] == 1.0);
    CHECK(q.data()[1] == -2.0);
}

TEST_CASE("adamw: missing grad is a state error") {
    ModelParameters params;
    params.create("p", Tensor::from_data({2}, {1.0, -2.0}));
    AdamWConfig cfg;
    CHECK_THROWS_AS(params.adamw_step(cfg), StateError);
}

TEST_CASE("adamw trajectory matches scalar re-implementation") {
    ModelParameters params;
    Tensor p = params.create("p", Tensor::from_data({1}, {0.5}));
    AdamWConfig cfg;
    cfg.lr = 1e-3;
    cfg.weight_decay = 0.01;

    // Independent scalar replay of the decoupled-decay Adam recurrence.
    double x = 0.5, m = 0.0, v = 0.0;
    double prev = p.data()[0];
    for (int step = 1; step <= 1000; ++step) {
        p.zero_grad();
        p.grad()[0] += 1.0;
        params.adamw_step(cfg);

        const double g = 1.0;
        m = cfg.beta1 * m + (1 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g;
        const double mhat = m / (1 - std::pow(cfg.beta1, step));
        const double vhat = v / (1 - std::pow(cfg.beta2, step));
        x -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * x);

        CHECK(std::fabs(p.data()[0] - x) < 1e-10);
        CHECK(p.data()[0] < prev);  // constant positive gradient: monotone decrease
        prev = p.data()[0];
    }
    CHECK(params.step_count() == 1000);
}

TEST_CASE("no-grad mode skips graph construction") {
    Tensor x = Tensor::scalar(2.0);
    x.set_requires_grad(true);
    NoGradGuard guard;
    Tensor y = mul(x, x);
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("embedding lookup rejects out-of-vocabulary ids") {
    Rng rng(43);
    Tensor table = Tensor::randn({4, 3}, rng);
    CHECK_THROWS_AS(embedding_lookup(table, {0, 4}), VocabularyError);
    Tensor rowsel = embedding_lookup(table, {2, 0});
    CHECK(rowsel.at(0, 1) == table.at(2, 1));
    CHECK(rowsel.at(1, 2) == table.at(0, 2));
}
