#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "streamloc/tensor.hpp"

namespace streamloc {

struct AdamWConfig {
    double lr = 2e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

// Named trainable tensors plus AdamW state. Names are ordered (std::map), so
// every traversal — updates, checkpoints, gradient checks — is deterministic.
class ModelParameters {
public:
    Tensor create(const std::string& name, Tensor init);
    Tensor get(const std::string& name) const;
    bool has(const std::string& name) const { return params_.count(name) != 0; }
    std::size_t count() const { return params_.size(); }
    std::size_t scalar_count() const;

    const std::map<std::string, Tensor>& all() const { return params_; }

    void zero_grads();
    double grad_norm() const;
    // Scales grads so the global norm is at most max_norm.
    void clip_grad_norm(double max_norm);

    // Decoupled weight-decay Adam. Throws StateError when a gradient is
    // missing; grads are left untouched for the caller to clear.
    void adamw_step(const AdamWConfig& cfg);
    // Restrict updates to parameters whose name starts with `prefix` (empty
    // means everything). Other parameters are left untouched entirely.
    void set_trainable_prefix(std::string prefix) { trainable_prefix_ = std::move(prefix); }
    const std::string& trainable_prefix() const { return trainable_prefix_; }

    std::int64_t step_count() const { return step_; }

    // Checkpoint container: versioned binary with a JSON metadata blob and
    // named shape-tagged float64 tensors. Byte-identical for identical state.
    void save(const std::filesystem::path& path, const std::string& meta_json) const;
    // Loads values into existing parameters (shapes must match) or, when the
    // object is empty, recreates parameters from the file.
    std::string load(const std::filesystem::path& path);

    void save_stream(std::ostream& os, const std::string& meta_json) const;
    std::string load_stream(std::istream& is);

private:
    bool updatable(const std::string& name) const;

    std::map<std::string, Tensor> params_;
    struct Moments {
        std::vector<double> m, v;
    };
    std::map<std::string, Moments> state_;
    std::int64_t step_ = 0;
    std::string trainable_prefix_;
};

// Max over all parameter scalars of
// |autodiff - central_difference| / (|central_difference| + 1e-12),
// for a scalar-valued function rebuilt from the current parameter values.
// `f` must construct a fresh graph on every call.
double grad_check(const std::function<Tensor()>& f, ModelParameters& params, double eps);

}  // namespace streamloc
