#include "streamloc/params.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "streamloc/errors.hpp"

namespace streamloc {

namespace {

constexpr std::uint32_t kMagic = 0x534c434bu;  // "SLCK"
constexpr std::uint32_t kFormatVersion = 1;

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw CheckpointError("checkpoint: truncated file");
    return v;
}

}  // namespace

Tensor ModelParameters::create(const std::string& name, Tensor init) {
    if (params_.count(name)) throw StateError("parameter already registered: " + name);
    init.set_requires_grad(true);
    params_.emplace(name, init);
    state_[name] = Moments{std::vector<double>(init.size(), 0.0), std::vector<double>(init.size(), 0.0)};
    return init;
}

Tensor ModelParameters::get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw StateError("unknown parameter: " + name);
    return it->second;
}

std::size_t ModelParameters::scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params_) n += t.size();
    return n;
}

void ModelParameters::zero_grads() {
    for (auto& [name, t] : params_) t.zero_grad();
}

double ModelParameters::grad_norm() const {
    double sq = 0.0;
    for (const auto& [name, t] : params_) {
        if (!t.has_grad()) continue;
        for (double g : t.grad()) sq += g * g;
    }
    return std::sqrt(sq);
}

void ModelParameters::clip_grad_norm(double max_norm) {
    const double norm = grad_norm();
    if (norm <= max_norm || norm == 0.0) return;
    const double scale = max_norm / norm;
    for (auto& [name, t] : params_) {
        if (!t.has_grad()) continue;
        for (double& g : t.grad()) g *= scale;
    }
}

bool ModelParameters::updatable(const std::string& name) const {
    return trainable_prefix_.empty() || name.rfind(trainable_prefix_, 0) == 0;
}

void ModelParameters::adamw_step(const AdamWConfig& cfg) {
    if (cfg.lr <= 0.0) throw DomainError("adamw_step: learning rate must be positive");
    for (const auto& [name, t] : params_) {
        if (updatable(name) && !t.has_grad())
            throw StateError("adamw_step: missing gradient for " + name);
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_));
    for (auto& [name, t] : params_) {
        if (!updatable(name)) continue;
        auto& mom = state_[name];
        const auto& g = t.grad();
        auto& x = t.data();
        for (std::size_t i = 0; i < x.size(); ++i) {
            mom.m[i] = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * g[i];
            mom.v[i] = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            const double mhat = mom.m[i] / bc1;
            const double vhat = mom.v[i] / bc2;
            x[i] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * x[i]);
        }
    }
}

void ModelParameters::save_stream(std::ostream& os, const std::string& meta_json) const {
    write_pod(os, kMagic);
    write_pod(os, kFormatVersion);
    write_pod(os, static_cast<std::uint64_t>(meta_json.size()));
    os.write(meta_json.data(), static_cast<long>(meta_json.size()));
    write_pod(os, static_cast<std::uint64_t>(params_.size()));
    for (const auto& [name, t] : params_) {
        write_pod(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<long>(name.size()));
        write_pod(os, static_cast<std::uint32_t>(t.shape().size()));
        for (auto e : t.shape()) write_pod(os, static_cast<std::uint64_t>(e));
        os.write(reinterpret_cast<const char*>(t.data().data()),
                 static_cast<long>(t.size() * sizeof(double)));
    }
}

std::string ModelParameters::load_stream(std::istream& is) {
    if (read_pod<std::uint32_t>(is) != kMagic) throw CheckpointError("checkpoint: bad magic");
    const auto version = read_pod<std::uint32_t>(is);
    if (version != kFormatVersion)
        throw CheckpointError("checkpoint: unsupported format version " + std::to_string(version));
    const auto meta_len = read_pod<std::uint64_t>(is);
    std::string meta(meta_len, '\0');
    is.read(meta.data(), static_cast<long>(meta_len));
    const auto count = read_pod<std::uint64_t>(is);
    const bool adopt = params_.empty();
    std::size_t matched = 0;
    for (std::uint64_t n = 0; n < count; ++n) {
        const auto name_len = read_pod<std::uint32_t>(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const auto ndim = read_pod<std::uint32_t>(is);
        Shape shape(ndim);
        std::size_t total = 1;
        for (auto& e : shape) {
            e = static_cast<std::size_t>(read_pod<std::uint64_t>(is));
            total *= e;
        }
        std::vector<double> data(total);
        is.read(reinterpret_cast<char*>(data.data()), static_cast<long>(total * sizeof(double)));
        if (!is) throw CheckpointError("checkpoint: truncated tensor data for " + name);
        if (adopt) {
            create(name, Tensor::from_data(shape, std::move(data)));
        } else {
            auto it = params_.find(name);
            if (it == params_.end())
                throw CheckpointError("checkpoint: unexpected tensor " + name);
            if (it->second.shape() != shape)
                throw CheckpointError("checkpoint: shape mismatch for " + name);
            it->second.data() = std::move(data);
            ++matched;
        }
    }
    if (!adopt && matched != params_.size())
        throw CheckpointError("checkpoint: file is missing " +
                              std::to_string(params_.size() - matched) + " tensors");
    return meta;
}

void ModelParameters::save(const std::filesystem::path& path, const std::string& meta_json) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw CheckpointError("checkpoint: cannot open for write: " + path.string());
    save_stream(os, meta_json);
    if (!os) throw CheckpointError("checkpoint: write failed: " + path.string());
}

std::string ModelParameters::load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("checkpoint: cannot open: " + path.string());
    return load_stream(is);
}

double grad_check(const std::function<Tensor()>& f, ModelParameters& params, double eps) {
    if (!(eps > 0.0 && eps <= 1e-3)) throw DomainError("grad_check: eps must be in (0, 1e-3]");

    params.zero_grads();
    Tensor out = f();
    if (!std::isfinite(out.item())) throw EvalError("grad_check: non-finite function value");
    out.backward();

    std::map<std::string, std::vector<double>> autodiff;
    for (const auto& [name, t] : params.all()) autodiff[name] = t.grad();

    double worst = 0.0;
    NoGradGuard no_grad;
    for (auto& [name, t] : params.all()) {
        auto& x = const_cast<Tensor&>(t).data();
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double orig = x[i];
            x[i] = orig + eps;
            const double fp = f().item();
            x[i] = orig - eps;
            const double fm = f().item();
            x[i] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw EvalError("grad_check: non-finite perturbed value at " + name);
            const double fd = (fp - fm) / (2.0 * eps);
            const double rel = std::fabs(autodiff[name][i] - fd) / (std::fabs(fd) + 1e-12);
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // namespace streamloc
