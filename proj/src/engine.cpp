#include "streamloc/engine.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>

#include "streamloc/errors.hpp"

namespace streamloc {

void MemoryStackConfig::resolve(int num_scales, const ScaleWeights* weights) {
    if (frame_fifo) {
        capacities.clear();
        return;
    }
    ScaleWeights w;
    if (dynamic_size && weights) {
        if (weights->values.size() != static_cast<std::size_t>(num_scales))
            throw ConfigError("memory: weight vector does not match scale count");
        w = *weights;
    } else {
        w.values.assign(static_cast<std::size_t>(num_scales), 1.0);
    }
    capacities = allocate_sizes(total, w);
}

StreamPipeline::StreamPipeline(const GroundingModel& model, MemoryStackConfig mem)
    : model_(&model), mem_cfg_(std::move(mem)) {
    const auto& cfg = model.config();
    if (mem_cfg_.frame_fifo) {
        if (mem_cfg_.total < 1) throw ConfigError("memory: frame FIFO needs positive capacity");
    } else {
        if (mem_cfg_.capacities.empty()) mem_cfg_.resolve(cfg.num_scales, nullptr);
        tree_.emplace(model.backbone(), cfg.window, cfg.num_scales);
        memory_.emplace(mem_cfg_.capacities, mem_cfg_.merge_threshold, mem_cfg_.adaptive_update);
    }
}

StreamPipeline::WindowResult StreamPipeline::process_window(const Tensor& frames) {
    if (frames.rows() == 0) throw StreamOrderError("process_window: empty batch");
    if (frames.cols() != model_->config().input_dim)
        throw ShapeError("process_window: expected feature width " +
                         std::to_string(model_->config().input_dim) + ", got " +
                         std::to_string(frames.cols()));
    WindowResult result = mem_cfg_.frame_fifo ? process_fifo(frames) : process_tree(frames);
    frames_seen_ += static_cast<std::int64_t>(frames.rows());
    return result;
}

StreamPipeline::WindowResult StreamPipeline::process_tree(const Tensor& frames) {
    WindowResult out;
    auto by_scale = tree_->ingest(frames);
    out.closes_at = tree_->frames_seen();
    for (const auto& level : by_scale)
        for (const auto& p : level) out.proposals.push_back(p);
    if (out.proposals.empty()) throw StateError("process_window: no proposals produced");

    out.refined = model_->refine_with_memory(out.proposals, memory_->snapshot(), out.closes_at);

    // Memory sees this window only from the next one onwards.
    for (const auto& p : out.proposals) {
        EventProposal stored = p;
        stored.feature = p.feature.detach();
        memory_->insert(p.scale, std::move(stored));
    }
    return out;
}

StreamPipeline::WindowResult StreamPipeline::process_fifo(const Tensor& frames) {
    WindowResult out;
    const std::int64_t window_start = frames_seen_ + 1;
    out.closes_at = frames_seen_ + static_cast<std::int64_t>(frames.rows());

    Tensor feats = model_->backbone().frame_features(frames, fifo_tail_);
    const std::size_t keep = model_->backbone().conv.kernel() - 1;
    if (keep > 0) {
        Tensor joined =
            fifo_tail_.defined() ? concat_rows(fifo_tail_.detach(), frames.detach()) : frames.detach();
        const std::size_t have = joined.rows();
        fifo_tail_ = (have <= keep) ? joined : slice_rows(joined, have - keep, have).detach();
    }

    for (std::size_t i = 0; i < frames.rows(); ++i) {
        fifo_.push_back({window_start + static_cast<std::int64_t>(i), slice_rows(feats, i, i + 1)});
        while (fifo_.size() > static_cast<std::size_t>(mem_cfg_.total)) fifo_.pop_front();
    }
    const std::int64_t oldest = fifo_.front().frame;

    // Rebuild every aligned span that ends inside this window and fits the
    // retained frames; features merge bottom-up with per-flush memoization.
    std::map<std::pair<int, std::int64_t>, Tensor> nodes;
    std::function<Tensor(int, std::int64_t)> node_feature = [&](int scale,
                                                                std::int64_t index) -> Tensor {
        auto key = std::make_pair(scale, index);
        auto it = nodes.find(key);
        if (it != nodes.end()) return it->second;
        Tensor feat;
        if (scale == 1) {
            const std::int64_t frame = index;
            feat = fifo_[static_cast<std::size_t>(frame - oldest)].feature;
        } else {
            feat = model_->backbone().merge_pair(scale - 1, node_feature(scale - 1, 2 * index - 1),
                                                 node_feature(scale - 1, 2 * index));
        }
        nodes.emplace(key, feat);
        return feat;
    };

    for (int scale = 1; scale <= model_->config().num_scales; ++scale) {
        const std::int64_t dur = std::int64_t{1} << (scale - 1);
        if (dur > static_cast<std::int64_t>(mem_cfg_.total)) break;
        for (std::int64_t end = ((window_start + dur - 1) / dur) * dur; end <= out.closes_at;
             end += dur) {
            const std::int64_t start = end - dur + 1;
            if (start < oldest) continue;
            EventProposal p;
            p.scale = scale;
            p.index = end / dur;
            p.start_frame = start;
            p.end_frame = end;
            p.completed_at = out.closes_at;
            p.feature = node_feature(scale, p.index);
            out.proposals.push_back(std::move(p));
        }
    }
    if (out.proposals.empty()) throw StateError("process_window: no proposals produced");

    // Historical context: retained frames older than this window.
    std::vector<EventProposal> snapshot;
    for (const auto& entry : fifo_) {
        if (entry.frame >= window_start) break;
        EventProposal ev;
        ev.scale = 1;
        ev.index = entry.frame;
        ev.start_frame = ev.end_frame = entry.frame;
        ev.completed_at = entry.frame;
        ev.feature = entry.feature;
        snapshot.push_back(std::move(ev));
    }
    out.refined = model_->refine_with_memory(out.proposals, snapshot, out.closes_at);
    return out;
}

// ---- engine -------------------------------------------------------------------

StreamingEngine::StreamingEngine(const GroundingModel& model, EngineConfig cfg, MemoryStackConfig mem)
    : model_(&model), cfg_(cfg), pipeline_(model, std::move(mem)) {}

void StreamingEngine::add_query(const QueryTask& query) {
    NoGradGuard no_grad;
    QueryState qs;
    qs.task = query;
    qs.encoding = model_->encode_query(query.tokens);
    queries_.push_back(std::move(qs));
}

std::vector<Prediction> StreamingEngine::step(std::int64_t frame_index,
                                              const std::vector<double>& features) {
    if (frame_index != now_ + 1)
        throw StreamOrderError("step: expected frame " + std::to_string(now_ + 1) + ", got " +
                               std::to_string(frame_index));
    if (features.size() != model_->config().input_dim)
        throw ShapeError("step: expected feature width " +
                         std::to_string(model_->config().input_dim) + ", got " +
                         std::to_string(features.size()));
    now_ = frame_index;
    buffer_.push_back(features);
    if (buffer_.size() == static_cast<std::size_t>(model_->config().window)) return flush_window();
    return {};
}

std::vector<Prediction> StreamingEngine::finish() {
    if (buffer_.empty()) return {};
    return flush_window();
}

std::vector<Prediction> StreamingEngine::flush_window() {
    NoGradGuard no_grad;
    const std::size_t n = buffer_.size();
    const std::size_t d = model_->config().input_dim;
    Tensor frames({n, d}, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        std::copy(buffer_[i].begin(), buffer_[i].end(), frames.data().begin() + static_cast<long>(i * d));
    buffer_.clear();

    auto window = pipeline_.process_window(frames);
    ++windows_closed_;

    std::vector<Prediction> fresh;
    for (auto& qs : queries_) {
        auto scores = model_->score_window(window.refined, qs.encoding);
        Tensor probs = sigmoid(scores.cls_logits);

        std::vector<Prediction> mode_e;
        for (std::size_t i = 0; i < window.proposals.size(); ++i) {
            const double c = probs.at(i);
            if (c < cfg_.cls_threshold) continue;
            const auto& p = window.proposals[i];
            Prediction pred;
            pred.query_id = qs.task.id;
            pred.mode = 'E';
            pred.start = static_cast<double>(p.start_frame) + scores.offsets.at(i, 0);
            pred.end = static_cast<double>(p.end_frame) + scores.offsets.at(i, 1);
            pred.end = std::max(pred.end, pred.start + cfg_.min_length);
            pred.score = c;
            pred.start_emit = pred.end_emit = p.completed_at;
            mode_e.push_back(std::move(pred));
        }

        if (cfg_.future_prediction) {
            const double fprob = 1.0 / (1.0 + std::exp(-scores.future_logit.item()));
            if (fprob >= cfg_.future_threshold) {
                PendingFiring firing;
                firing.fired_at = window.closes_at;
                firing.predicted_start =
                    static_cast<double>(window.closes_at) + scores.future_offset.item();
                firing.probability = fprob;
                qs.firings.push_back(firing);
            }
        }

        for (const auto& pred : mode_e) fresh.push_back(pred);

        // Pair pending start firings with this window's candidates, oldest
        // firing first, earliest candidate wins. Unpairable firings expire
        // silently once the horizon passes.
        std::vector<PendingFiring> still_pending;
        for (const auto& firing : qs.firings) {
            const Prediction* match = nullptr;
            if (window.closes_at <= firing.fired_at + cfg_.pair_horizon) {
                for (const auto& c : mode_e) {
                    if (c.start - cfg_.pair_tolerance <= firing.predicted_start &&
                        firing.predicted_start <= c.end + cfg_.pair_tolerance) {
                        match = &c;
                        break;
                    }
                }
            }
            if (match) {
                Prediction pred;
                pred.query_id = qs.task.id;
                pred.mode = 'F';
                pred.start = firing.predicted_start;
                pred.end = match->end;
                pred.score = firing.probability * match->score;
                pred.start_emit = firing.fired_at;
                pred.end_emit = match->end_emit;
                fresh.push_back(std::move(pred));
            } else if (window.closes_at > firing.fired_at + cfg_.pair_horizon) {
                ++expired_firings_;
            } else {
                still_pending.push_back(firing);
            }
        }
        qs.firings = std::move(still_pending);
    }

    log_.insert(log_.end(), fresh.begin(), fresh.end());
    return fresh;
}

}  // namespace streamloc
