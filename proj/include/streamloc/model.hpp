#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "streamloc/event_memory.hpp"
#include "streamloc/nn.hpp"
#include "streamloc/params.hpp"
#include "streamloc/proposal_tree.hpp"

namespace streamloc {

struct ModelConfig {
    std::size_t input_dim = 32;   // raw frame feature width
    std::size_t model_dim = 32;   // embedding width
    std::size_t hidden_dim = 64;  // MLP hidden width
    int heads = 1;
    int num_scales = 8;
    int window = 8;
    std::size_t conv_kernel = 3;
    std::size_t vocab_size = 8;

    void validate() const;
};

// A query task: token sequence plus, for training/eval, the target interval.
struct QueryTask {
    std::string id;
    std::vector<int> tokens;
    Interval target{0.0, 0.0};
};

// Per-window prediction tensors for one query.
struct QueryWindowScores {
    Tensor cls_logits;     // {n, 1}
    Tensor offsets;        // {n, 2} start/end offsets in frames
    Tensor future_logit;   // {1, 1}
    Tensor future_offset;  // {1, 1} start offset from the window close, frames
};

// The full scoring model: proposal backbone, text encoder, memory-driven
// refinement, query fusion, and the prediction heads.
class GroundingModel {
public:
    GroundingModel(ModelConfig cfg, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    ModelParameters& params() { return *params_; }
    const ModelParameters& params() const { return *params_; }
    const ProposalBackbone& backbone() const { return backbone_; }

    // Embedding lookup + positional encoding + one encoder layer.
    Tensor encode_query(const std::vector<int>& tokens) const;

    // One encoder pass: queries are the window proposals, keys/values extend
    // them with the memory snapshot. Entries carry additive scale and
    // center-age encodings. An empty snapshot degenerates to self-attention.
    Tensor refine_with_memory(const std::vector<EventProposal>& window_proposals,
                              const std::vector<EventProposal>& memory_snapshot,
                              std::int64_t now) const;

    // One decoder pass fusing refined proposals with the encoded query.
    Tensor fuse_with_query(const Tensor& refined, const Tensor& query_encoding) const;

    Tensor classify(const Tensor& fused) const;         // {n,1} logits
    Tensor regress_offsets(const Tensor& fused) const;  // {n,2}
    // Mean-pooled fused features -> (start-soon logit, start offset).
    std::pair<Tensor, Tensor> predict_future(const Tensor& fused) const;

    // Heads for a full window in one go.
    QueryWindowScores score_window(const Tensor& refined, const Tensor& query_encoding) const;

    // Checkpoint io. Metadata records the config; loading verifies it.
    void save_checkpoint(const std::filesystem::path& path) const;
    static std::unique_ptr<GroundingModel> load_checkpoint(const std::filesystem::path& path);

private:
    Tensor entry_matrix(const std::vector<EventProposal>& entries, std::int64_t now) const;

    ModelConfig cfg_;
    std::unique_ptr<ModelParameters> params_;
    ProposalBackbone backbone_;
    Tensor scale_embed_;  // {num_scales, model_dim}
    Tensor token_embed_;  // {vocab, model_dim}
    EncoderLayer text_encoder_;
    EncoderLayer refine_encoder_;
    DecoderLayer fusion_decoder_;
    Mlp cls_head_;
    Mlp reg_head_;
    Mlp future_head_;  // {1, 2}: logit and offset
};

// ---- labels and losses -------------------------------------------------------

struct LossConfig {
    double positive_iou = 0.5;  // proposal-positive threshold
    double focal_alpha = 0.25;
    double focal_gamma = 2.0;
    int future_lo = -4;  // window close + lo <= target start
    int future_hi = 4;   // target start <= window close + hi
    double min_length = 1.0;
    bool future_prediction = true;
};

struct WindowLabels {
    std::vector<int> proposal_positive;  // one per proposal
    int future_positive = 0;
};

// Pure labeling rule: a proposal is positive when its span IoU with the
// target reaches positive_iou; the window's future label fires when the
// target start lies in [close + lo, close + hi].
WindowLabels assign_labels(const std::vector<EventProposal>& proposals, const Interval& target,
                           double positive_iou, std::int64_t window_close, int future_lo,
                           int future_hi);

// Focal loss terms for probabilities already in (0,1); labels are 0/1.
Tensor focal_loss_terms(const Tensor& probs, const std::vector<int>& labels, double alpha,
                        double gamma);
// Closed-form single-probability value (reference/reporting path).
double focal_loss_value(double prob, int label, double alpha, double gamma);

// Differentiable 1-D distance-IoU of predicted intervals (rows of starts and
// ends) against a fixed target.
Tensor diou_loss_rows(const Tensor& pred_start, const Tensor& pred_end, const Interval& target);

// Everything total_loss needs, accumulated over the windows of one stream.
struct StreamScores {
    std::vector<EventProposal> proposals;  // all scored proposals in order
    Tensor cls_logits;                     // {N,1}
    Tensor offsets;                        // {N,2}
    Tensor future_logits;                  // {n_windows,1}
    Tensor future_offsets;                 // {n_windows,1}
    std::vector<std::int64_t> window_closes;
};

struct StreamLabels {
    std::vector<int> proposal_positive;  // length N
    std::vector<int> future_positive;    // length n_windows
};

struct LossBreakdown {
    Tensor total, classification, regression, future;
};

// Classification focal mean over all proposals; regression DIoU mean over
// positives; future focal mean over windows plus L1 start-offset mean over
// positive windows. Unit weights.
LossBreakdown total_loss(const StreamScores& scores, const StreamLabels& labels,
                         const Interval& target, const LossConfig& cfg);

StreamLabels label_stream(const StreamScores& scores, const Interval& target, const LossConfig& cfg);

}  // namespace streamloc
