#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <string>
#include <vector>

#include "streamloc/event_memory.hpp"
#include "streamloc/model.hpp"
#include "streamloc/prediction.hpp"
#include "streamloc/proposal_tree.hpp"

namespace streamloc {

// How historical context is stored and offered to refinement.
struct MemoryStackConfig {
    int total = 64;                // overall capacity K
    double merge_threshold = 0.8;  // adjacent-merge cosine bound
    bool dynamic_size = true;      // weighted per-scale split vs uniform
    bool adaptive_update = true;   // merge rule vs pure FIFO eviction
    bool frame_fifo = false;       // ablation: frame-level FIFO memory

    // Per-scale capacities; resolve() fills them from weights (or uniformly).
    std::vector<int> capacities;

    void resolve(int num_scales, const ScaleWeights* weights);
};

// Query-independent part of one stream's forward pass: proposal construction
// (segment tree or frame-FIFO rebuild) and memory-driven refinement. Memory
// updates strictly after each window's refinement, so predictions never see
// same-window entries. Grad-agnostic: runs under whatever grad mode the
// caller sets.
class StreamPipeline {
public:
    StreamPipeline(const GroundingModel& model, MemoryStackConfig mem);

    struct WindowResult {
        std::vector<EventProposal> proposals;  // scale-ascending, index-ascending
        Tensor refined;                        // {n, d} refined features
        std::int64_t closes_at = 0;
    };

    // Frames is the next batch of raw rows (full window mid-stream, shorter
    // only at stream end).
    WindowResult process_window(const Tensor& frames);

    std::int64_t frames_seen() const { return frames_seen_; }
    const HierarchicalMemory* memory() const { return memory_ ? &*memory_ : nullptr; }
    const MemoryStackConfig& memory_config() const { return mem_cfg_; }

private:
    WindowResult process_tree(const Tensor& frames);
    WindowResult process_fifo(const Tensor& frames);

    const GroundingModel* model_;
    MemoryStackConfig mem_cfg_;
    std::optional<ProposalTree> tree_;
    std::optional<HierarchicalMemory> memory_;
    // frame-FIFO mode state
    struct FifoEntry {
        std::int64_t frame;
        Tensor feature;  // {1, d}
    };
    std::deque<FifoEntry> fifo_;
    Tensor fifo_tail_;
    std::int64_t frames_seen_ = 0;
};

struct EngineConfig {
    double cls_threshold = 0.5;     // mode-E emission bound on c
    double future_threshold = 0.5;  // mode-F firing bound on c^f
    int pair_horizon = 256;         // frames a firing waits for an end
    double pair_tolerance = 2.0;    // containment slack when pairing
    bool future_prediction = true;
    double min_length = 1.0;  // regressed intervals never collapse below this
};

// A start-soon firing waiting for a proposal end.
struct PendingFiring {
    std::int64_t fired_at = 0;
    double predicted_start = 0.0;
    double probability = 0.0;
};

struct PairingOutcome {
    std::vector<Prediction> paired;
    std::vector<PendingFiring> still_pending;
    std::int64_t expired = 0;
};

// Each firing pairs with the first candidate whose interval contains its
// predicted start (within the tolerance) and whose end arrives inside the
// horizon; leftover firings expire silently once the horizon passes.
PairingOutcome pair_future_with_proposals(const std::vector<PendingFiring>& firings,
                                          const std::vector<Prediction>& candidates,
                                          std::int64_t now, int horizon, double tolerance);

// The online driver: buffers frames, runs the pipeline at window closes,
// scores per query, and emits predictions. Emitted records are never revised.
class StreamingEngine {
public:
    StreamingEngine(const GroundingModel& model, EngineConfig cfg, MemoryStackConfig mem);

    void add_query(const QueryTask& query);

    // Feed the next frame (indices are 1-based and contiguous). Returns the
    // predictions emitted by this step (non-empty only at window closes).
    std::vector<Prediction> step(std::int64_t frame_index, const std::vector<double>& features);

    // Flush the final partial window, if any.
    std::vector<Prediction> finish();

    const std::vector<Prediction>& emissions() const { return log_; }
    std::int64_t now() const { return now_; }
    std::int64_t windows_closed() const { return windows_closed_; }
    std::int64_t expired_firings() const { return expired_firings_; }
    const StreamPipeline& pipeline() const { return pipeline_; }

private:
    std::vector<Prediction> flush_window();

    struct PendingFiring {
        std::int64_t fired_at = 0;
        double predicted_start = 0.0;
        double probability = 0.0;
    };
    struct QueryState {
        QueryTask task;
        Tensor encoding;
        std::vector<PendingFiring> firings;
    };

    const GroundingModel* model_;
    EngineConfig cfg_;
    StreamPipeline pipeline_;
    std::vector<QueryState> queries_;
    std::vector<std::vector<double>> buffer_;
    std::int64_t now_ = 0;
    std::int64_t windows_closed_ = 0;
    std::int64_t expired_firings_ = 0;
    std::vector<Prediction> log_;
};

}  // namespace streamloc
