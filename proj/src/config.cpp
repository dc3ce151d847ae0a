#include "streamloc/config.hpp"

#include <fstream>
#include <functional>
#include <sstream>

#include "streamloc/errors.hpp"

namespace streamloc {

using nlohmann::json;

namespace {

enum class FieldType { Double, Int, Int64, Uint64, Bool, String };

struct FieldSpec {
    const char* path;
    FieldType type;
    std::function<void(RunConfig&, const json&)> set;
    std::function<json(const RunConfig&)> get;
    const char* doc;
};

json type_checked(const char* path, FieldType type, const json& v) {
    const bool ok = (type == FieldType::Double && v.is_number()) ||
                    ((type == FieldType::Int || type == FieldType::Int64 ||
                      type == FieldType::Uint64) &&
                     v.is_number_integer()) ||
                    (type == FieldType::Bool && v.is_boolean()) ||
                    (type == FieldType::String && v.is_string());
    if (!ok) throw ConfigError(std::string("config: bad value type for ") + path);
    return v;
}

#define FIELD(PATH, TYPE, MEMBER, DOC)                                                     \
    FieldSpec {                                                                            \
        PATH, TYPE,                                                                        \
            [](RunConfig& c, const json& v) {                                              \
                c.MEMBER = v.get<std::decay_t<decltype(c.MEMBER)>>();                      \
            },                                                                             \
            [](const RunConfig& c) { return json(c.MEMBER); }, DOC                         \
    }

const std::vector<FieldSpec>& fields() {
    static const std::vector<FieldSpec> table = {
        // data
        FIELD("data.length", FieldType::Int64, data.stream.length, "frames per synthetic stream"),
        FIELD("data.feature_dim", FieldType::Uint64, data.stream.feature_dim,
              "raw feature width of each frame"),
        FIELD("data.event_types", FieldType::Int, data.stream.event_types,
              "number of distinct event prototypes"),
        FIELD("data.noise", FieldType::Double, data.stream.noise, "gaussian noise level"),
        FIELD("data.duration_min", FieldType::Double, data.stream.duration_min,
              "log-uniform event duration lower bound, frames"),
        FIELD("data.duration_max", FieldType::Double, data.stream.duration_max,
              "log-uniform event duration upper bound, frames"),
        FIELD("data.gap_min", FieldType::Double, data.stream.gap_min,
              "uniform inter-event gap lower bound, frames"),
        FIELD("data.gap_max", FieldType::Double, data.stream.gap_max,
              "uniform inter-event gap upper bound, frames"),
        FIELD("data.repeat_gap", FieldType::Int64, data.stream.repeat_gap,
              "planted long-range repeat separation, frames"),
        FIELD("data.seed", FieldType::Uint64, data.stream.seed, "corpus master seed"),
        FIELD("data.train_streams", FieldType::Int, data.train_streams, "training split size"),
        FIELD("data.test_streams", FieldType::Int, data.test_streams, "test split size"),
        FIELD("data.queries_per_stream", FieldType::Int, data.queries_per_stream,
              "queries generated per stream"),
        FIELD("data.ordinal_fraction", FieldType::Double, data.ordinal_fraction,
              "share of second-occurrence queries"),
        FIELD("data.min_ordinal_gap", FieldType::Int64, data.min_ordinal_gap,
              "minimum first-to-second occurrence gap, frames"),
        // model
        FIELD("model.model_dim", FieldType::Uint64, model.model_dim, "embedding width"),
        FIELD("model.hidden_dim", FieldType::Uint64, model.hidden_dim, "MLP hidden width"),
        FIELD("model.heads", FieldType::Int, model.heads, "attention head count"),
        FIELD("model.num_scales", FieldType::Int, model.num_scales, "proposal scale count"),
        FIELD("model.window", FieldType::Int, model.window, "short-term window length, frames"),
        FIELD("model.conv_kernel", FieldType::Uint64, model.conv_kernel,
              "causal convolution kernel width"),
        // train
        FIELD("train.lr", FieldType::Double, train.lr, "AdamW learning rate"),
        FIELD("train.lr_final_fraction", FieldType::Double, train.lr_final_fraction,
              "cosine decay floor as a fraction of lr"),
        FIELD("train.epochs", FieldType::Int, train.epochs, "training epochs"),
        FIELD("train.clip_norm", FieldType::Double, train.clip_norm, "global gradient norm clip"),
        FIELD("train.weight_decay", FieldType::Double, train.weight_decay, "AdamW weight decay"),
        FIELD("train.seed", FieldType::Uint64, train.seed, "model init and shuffle seed"),
        FIELD("train.checkpoint_every", FieldType::Int, train.checkpoint_every,
              "checkpoint cadence in epochs (0 = final only)"),
        FIELD("train.accumulate_streams", FieldType::Int, train.accumulate_streams,
              "streams per optimizer step"),
        FIELD("train.positive_iou", FieldType::Double, train.loss.positive_iou,
              "IoU bound for a proposal to count as positive"),
        FIELD("train.focal_alpha", FieldType::Double, train.loss.focal_alpha,
              "focal loss alpha"),
        FIELD("train.focal_gamma", FieldType::Double, train.loss.focal_gamma,
              "focal loss gamma"),
        FIELD("train.future_lo", FieldType::Int, train.loss.future_lo,
              "future window lower offset from the window close, frames"),
        FIELD("train.future_hi", FieldType::Int, train.loss.future_hi,
              "future window upper offset from the window close, frames"),
        FIELD("train.weights_iou", FieldType::Double, train.weights_iou,
              "IoU bound when counting per-scale positive frequencies"),
        // memory
        FIELD("memory.total", FieldType::Int, train.memory.total, "total memory capacity"),
        FIELD("memory.merge_threshold", FieldType::Double, train.memory.merge_threshold,
              "cosine similarity bound for adjacent merging"),
        FIELD("memory.dynamic_size", FieldType::Bool, train.memory.dynamic_size,
              "weighted per-scale capacities instead of uniform"),
        FIELD("memory.adaptive_update", FieldType::Bool, train.memory.adaptive_update,
              "merge redundant neighbors instead of pure FIFO eviction"),
        FIELD("memory.frame_fifo", FieldType::Bool, train.memory.frame_fifo,
              "replace the event memory with a frame-level FIFO"),
        // engine
        FIELD("engine.cls_threshold", FieldType::Double, engine.cls_threshold,
              "emission bound on the classification probability"),
        FIELD("engine.future_threshold", FieldType::Double, engine.future_threshold,
              "firing bound on the start-soon probability"),
        FIELD("engine.pair_horizon", FieldType::Int, engine.pair_horizon,
              "frames a start firing waits for an end, then expires"),
        FIELD("engine.pair_tolerance", FieldType::Double, engine.pair_tolerance,
              "containment slack when pairing a firing with a candidate, frames"),
        FIELD("engine.future_prediction", FieldType::Bool, engine.future_prediction,
              "enable the start-soon branch (training and inference)"),
        FIELD("engine.min_length", FieldType::Double, engine.min_length,
              "minimum regressed interval length, frames"),
        // eval
        FIELD("eval.m_match", FieldType::Double, eval.m_match,
              "IoU bound for delay-metric matching"),
        FIELD("eval.nms_iou", FieldType::Double, eval.nms_iou,
              "temporal NMS suppression bound"),
        // sweep
        FIELD("sweep.windows", FieldType::String, sweep_windows,
              "future windows to sweep, e.g. \"0:0,-4:4,-8:8\""),
        FIELD("sweep.epochs", FieldType::Int, sweep_epochs,
              "head-only retraining epochs per sweep point"),
    };
    return table;
}

#undef FIELD

const FieldSpec* find_field(const std::string& path) {
    for (const auto& f : fields())
        if (path == f.path) return &f;
    return nullptr;
}

}  // namespace

void RunConfig::apply_json(const json& j) {
    if (!j.is_object()) throw ConfigError("config: top level must be an object");
    for (const auto& [section, body] : j.items()) {
        if (!body.is_object())
            throw ConfigError("config: section '" + section + "' must be an object");
        for (const auto& [key, value] : body.items()) {
            const std::string path = section + "." + key;
            const FieldSpec* f = find_field(path);
            if (!f) throw ConfigError("config: unknown key '" + path + "'");
            f->set(*this, type_checked(f->path, f->type, value));
        }
    }
}

void RunConfig::apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos)
        throw ConfigError("override must look like section.key=value: " + assignment);
    const std::string path = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    const FieldSpec* f = find_field(path);
    if (!f) throw ConfigError("config: unknown key '" + path + "'");
    json value;
    if (f->type == FieldType::String) {
        value = text;
    } else {
        try {
            value = json::parse(text);
        } catch (const json::exception&) {
            throw ConfigError("config: cannot parse value for " + path + ": " + text);
        }
    }
    f->set(*this, type_checked(f->path, f->type, value));
}

void RunConfig::finalize() {
    model.input_dim = data.stream.feature_dim;
    model.vocab_size = vocabulary_size(data.stream.event_types);
    train.loss.future_prediction = engine.future_prediction;
    data.validate();
    model.validate();
    train.validate();
    parse_sweep_windows(sweep_windows);
    if (eval.m_match <= 0.0 || eval.m_match > 1.0)
        throw ConfigError("config: eval.m_match must be in (0,1]");
    if (eval.nms_iou <= 0.0 || eval.nms_iou > 1.0)
        throw ConfigError("config: eval.nms_iou must be in (0,1]");
}

json RunConfig::to_json() const {
    json out;
    for (const auto& f : fields()) {
        const std::string path = f.path;
        const auto dot = path.find('.');
        out[path.substr(0, dot)][path.substr(dot + 1)] = f.get(*this);
    }
    return out;
}

std::string RunConfig::help_text() {
    RunConfig defaults;
    std::ostringstream os;
    os << "config keys (file sections or --set section.key=value):\n";
    for (const auto& f : fields()) {
        os << "  " << f.path << " (default " << f.get(defaults).dump() << ") — " << f.doc << "\n";
    }
    return os.str();
}

RunConfig load_run_config(const std::filesystem::path& file,
                          const std::vector<std::string>& overrides) {
    RunConfig cfg;
    if (!file.empty()) {
        std::ifstream is(file);
        if (!is) throw ConfigError("config: cannot open " + file.string());
        json j;
        try {
            is >> j;
        } catch (const json::exception& e) {
            throw ConfigError(std::string("config: parse error: ") + e.what());
        }
        cfg.apply_json(j);
    }
    for (const auto& o : overrides) cfg.apply_override(o);
    cfg.finalize();
    return cfg;
}

RunConfig default_run_config(const std::vector<std::string>& overrides) {
    return load_run_config({}, overrides);
}

std::vector<std::pair<int, int>> parse_sweep_windows(const std::string& text) {
    std::vector<std::pair<int, int>> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        const auto colon = item.find(':');
        if (colon == std::string::npos)
            throw ConfigError("sweep.windows entries must look like lo:hi, got " + item);
        try {
            const int lo = std::stoi(item.substr(0, colon));
            const int hi = std::stoi(item.substr(colon + 1));
            if (hi < lo) throw ConfigError("sweep.windows: empty window " + item);
            out.emplace_back(lo, hi);
        } catch (const std::invalid_argument&) {
            throw ConfigError("sweep.windows: cannot parse " + item);
        } catch (const std::out_of_range&) {
            throw ConfigError("sweep.windows: value out of range in " + item);
        }
    }
    if (out.empty()) throw ConfigError("sweep.windows: no windows given");
    return out;
}

}  // namespace streamloc
