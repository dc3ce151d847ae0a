#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "streamloc/engine.hpp"
#include "streamloc/metrics.hpp"
#include "streamloc/model.hpp"
#include "streamloc/synth.hpp"

namespace streamloc {

struct TrainConfig {
    double lr = 2e-3;
    double lr_final_fraction = 0.1;  // cosine decay floor
    int epochs = 12;
    double clip_norm = 5.0;
    double weight_decay = 0.01;
    LossConfig loss;
    MemoryStackConfig memory;
    double weights_iou = 0.5;  // positive threshold when counting scale weights
    std::uint64_t seed = 1;
    int checkpoint_every = 0;  // epochs; 0 = final only
    int accumulate_streams = 1;
    std::string train_only_prefix;  // restrict updates (head-only sweeps)

    void validate() const;
};

struct EpochMetrics {
    double total = 0.0, classification = 0.0, regression = 0.0, future = 0.0;
    double seconds = 0.0;
};

// Replays one stream online (training-mode pipeline, memory built from the
// model's own detached features), accumulating scores and labels per query.
struct StreamReplay {
    std::vector<StreamScores> per_query;  // aligned with the queries passed in
    std::vector<std::int64_t> window_closes;
};

StreamReplay replay_stream(const GroundingModel& model, const MemoryStackConfig& mem,
                           const std::vector<std::vector<double>>& frames,
                           const std::vector<QueryTask>& queries);

class Trainer {
public:
    Trainer(GroundingModel& model, TrainConfig cfg);

    // Scale weights estimated once from the training annotations and frozen.
    void fit_memory_sizes(const Corpus& corpus);

    EpochMetrics train_epoch(const Corpus& corpus, int epoch_index);

    // Loss of the current parameters without updates (grad-free).
    EpochMetrics evaluate_loss(const std::vector<CorpusStream>& streams);

    // Full loop: epochs, CSV log, checkpoints. Returns per-epoch metrics.
    std::vector<EpochMetrics> run(const Corpus& corpus, const std::filesystem::path& out_dir);

    // Streams the test split through an engine and reports metrics.
    MetricReport evaluate(const std::vector<CorpusStream>& streams, const EngineConfig& engine_cfg,
                          const EvalOptions& eval_opts) const;

    const MemoryStackConfig& memory_config() const { return cfg_.memory; }
    double current_lr(int epoch_index) const;

private:
    LossBreakdown stream_loss(const CorpusStream& cs);

    GroundingModel& model_;
    TrainConfig cfg_;
};

// Accuracy-latency sweep: retrains the future head per (lo, hi) window on a
// copy of the base checkpoint, then measures mode-F recall and start delay.
struct SweepPoint {
    int future_lo = -4;
    int future_hi = 4;
    double recall_f = 0.0;  // R@1 at IoU 0.5, mode F
    double sd_mean = 0.0;
    double matched_fraction = 0.0;
};

std::vector<SweepPoint> tradeoff_sweep(const std::filesystem::path& base_checkpoint,
                                       const Corpus& corpus,
                                       const std::vector<std::pair<int, int>>& windows,
                                       TrainConfig cfg, const EngineConfig& engine_cfg);

std::string sweep_to_csv(const std::vector<SweepPoint>& points);

}  // namespace streamloc
