#include "streamloc/model.hpp"

#include <cmath>
#include <sstream>

#include "streamloc/errors.hpp"

// The metadata blob in checkpoints is JSON.
#include <json.hpp>

namespace streamloc {

void ModelConfig::validate() const {
    if (input_dim == 0 || model_dim == 0 || hidden_dim == 0 || vocab_size == 0)
        throw ConfigError("model: dimensions must be positive");
    if (heads < 1 || model_dim % static_cast<std::size_t>(heads) != 0)
        throw ConfigError("model: head count must divide model_dim");
    if (window < 1 || (window & (window - 1)) != 0)
        throw ConfigError("model: window must be a power of two");
    int log2w = 0;
    while ((1 << log2w) < window) ++log2w;
    if (num_scales < log2w + 1 || num_scales > 62)
        throw ConfigError("model: num_scales must be at least log2(window)+1");
    if (conv_kernel < 1) throw ConfigError("model: conv kernel must be positive");
}

GroundingModel::GroundingModel(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    params_ = std::make_unique<ModelParameters>();
    Rng rng(seed);
    backbone_ = ProposalBackbone::create(*params_, cfg_.conv_kernel, cfg_.input_dim, cfg_.model_dim,
                                         cfg_.hidden_dim, cfg_.num_scales, rng);
    scale_embed_ = params_->create(
        "embed.scale", Tensor::randn({static_cast<std::size_t>(cfg_.num_scales), cfg_.model_dim}, rng, 0.1));
    token_embed_ = params_->create("embed.token", Tensor::randn({cfg_.vocab_size, cfg_.model_dim}, rng, 0.1));
    text_encoder_ = EncoderLayer::create(*params_, "text.enc", cfg_.model_dim, cfg_.hidden_dim,
                                         cfg_.heads, rng);
    refine_encoder_ = EncoderLayer::create(*params_, "refine.enc", cfg_.model_dim, cfg_.hidden_dim,
                                           cfg_.heads, rng);
    fusion_decoder_ = DecoderLayer::create(*params_, "fusion.dec", cfg_.model_dim, cfg_.hidden_dim,
                                           cfg_.heads, rng);
    cls_head_ = Mlp::create(*params_, "head.cls", cfg_.model_dim, cfg_.hidden_dim, 1, rng);
    reg_head_ = Mlp::create(*params_, "head.reg", cfg_.model_dim, cfg_.hidden_dim, 2, rng);
    future_head_ = Mlp::create(*params_, "future.head", cfg_.model_dim, cfg_.hidden_dim, 2, rng);
}

Tensor GroundingModel::encode_query(const std::vector<int>& tokens) const {
    if (tokens.empty()) throw VocabularyError("encode_query: empty token sequence");
    Tensor emb = embedding_lookup(token_embed_, tokens);
    std::vector<double> positions(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) positions[i] = static_cast<double>(i);
    Tensor enc = add(emb, sinusoid_encoding(positions, cfg_.model_dim));
    return text_encoder_(enc);
}

Tensor GroundingModel::entry_matrix(const std::vector<EventProposal>& entries, std::int64_t now) const {
    std::vector<Tensor> feats;
    std::vector<int> scales;
    std::vector<double> ages;
    feats.reserve(entries.size());
    for (const auto& ev : entries) {
        feats.push_back(ev.feature);
        scales.push_back(ev.scale - 1);
        // Center age keeps the encoding relative: how far behind the current
        // window close this entry's span midpoint lies.
        ages.push_back(static_cast<double>(now) - ev.interval().center());
    }
    Tensor m = stack_rows(feats);
    m = add(m, embedding_lookup(scale_embed_, scales));
    return add(m, sinusoid_encoding(ages, cfg_.model_dim));
}

Tensor GroundingModel::refine_with_memory(const std::vector<EventProposal>& window_proposals,
                                          const std::vector<EventProposal>& memory_snapshot,
                                          std::int64_t now) const {
    if (window_proposals.empty()) throw ShapeError("refine_with_memory: no proposals");
    Tensor queries = entry_matrix(window_proposals, now);
    if (memory_snapshot.empty()) return refine_encoder_(queries);
    Tensor kv = concat_rows(queries, entry_matrix(memory_snapshot, now));
    return refine_encoder_(queries, kv);
}

Tensor GroundingModel::fuse_with_query(const Tensor& refined, const Tensor& query_encoding) const {
    return fusion_decoder_(refined, query_encoding);
}

Tensor GroundingModel::classify(const Tensor& fused) const { return cls_head_(fused); }

Tensor GroundingModel::regress_offsets(const Tensor& fused) const { return reg_head_(fused); }

std::pair<Tensor, Tensor> GroundingModel::predict_future(const Tensor& fused) const {
    Tensor pooled = stack_rows({mean_rows(fused)});
    Tensor out = future_head_(pooled);  // {1, 2}
    return {slice_cols(out, 0, 1), slice_cols(out, 1, 2)};
}

QueryWindowScores GroundingModel::score_window(const Tensor& refined,
                                               const Tensor& query_encoding) const {
    QueryWindowScores s;
    Tensor fused = fuse_with_query(refined, query_encoding);
    s.cls_logits = classify(fused);
    s.offsets = regress_offsets(fused);
    auto [flogit, foffset] = predict_future(fused);
    s.future_logit = flogit;
    s.future_offset = foffset;
    return s;
}

void GroundingModel::save_checkpoint(const std::filesystem::path& path) const {
    nlohmann::json meta;
    meta["format_version"] = 1;
    meta["model"] = {{"input_dim", cfg_.input_dim},   {"model_dim", cfg_.model_dim},
                     {"hidden_dim", cfg_.hidden_dim}, {"heads", cfg_.heads},
                     {"num_scales", cfg_.num_scales}, {"window", cfg_.window},
                     {"conv_kernel", cfg_.conv_kernel}, {"vocab_size", cfg_.vocab_size}};
    params_->save(path, meta.dump());
}

std::unique_ptr<GroundingModel> GroundingModel::load_checkpoint(const std::filesystem::path& path) {
    ModelParameters raw;
    std::string meta_text = raw.load(path);
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(meta_text);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint: bad metadata: ") + e.what());
    }
    if (!meta.contains("model")) throw CheckpointError("checkpoint: missing model metadata");
    const auto& m = meta["model"];
    ModelConfig cfg;
    cfg.input_dim = m.at("input_dim").get<std::size_t>();
    cfg.model_dim = m.at("model_dim").get<std::size_t>();
    cfg.hidden_dim = m.at("hidden_dim").get<std::size_t>();
    cfg.heads = m.at("heads").get<int>();
    cfg.num_scales = m.at("num_scales").get<int>();
    cfg.window = m.at("window").get<int>();
    cfg.conv_kernel = m.at("conv_kernel").get<std::size_t>();
    cfg.vocab_size = m.at("vocab_size").get<std::size_t>();
    auto model = std::make_unique<GroundingModel>(cfg, 0);
    model->params_->load(path);  // shape-checked against the fresh parameters
    return model;
}

// ---- labels and losses -------------------------------------------------------

WindowLabels assign_labels(const std::vector<EventProposal>& proposals, const Interval& target,
                           double positive_iou, std::int64_t window_close, int future_lo,
                           int future_hi) {
    WindowLabels labels;
    labels.proposal_positive.reserve(proposals.size());
    for (const auto& p : proposals)
        labels.proposal_positive.push_back(iou(p.interval(), target) >= positive_iou ? 1 : 0);
    const double close = static_cast<double>(window_close);
    labels.future_positive =
        (close + future_lo <= target.start && target.start <= close + future_hi) ? 1 : 0;
    return labels;
}

double focal_loss_value(double prob, int label, double alpha, double gamma) {
    const double c = std::min(1.0 - 1e-7, std::max(1e-7, prob));
    if (label == 1) return -alpha * std::pow(1.0 - c, gamma) * std::log(c);
    return -(1.0 - alpha) * std::pow(c, gamma) * std::log(1.0 - c);
}

Tensor focal_loss_terms(const Tensor& probs, const std::vector<int>& labels, double alpha,
                        double gamma) {
    if (probs.size() != labels.size())
        throw ShapeError("focal_loss_terms: probability/label count mismatch");
    Tensor pos_mask({labels.size(), 1}, 0.0);
    Tensor neg_mask({labels.size(), 1}, 0.0);
    for (std::size_t i = 0; i < labels.size(); ++i)
        (labels[i] == 1 ? pos_mask : neg_mask).at(i) = 1.0;
    Tensor c = clamp(probs, 1e-7, 1.0 - 1e-7);
    Tensor one_minus = sub(Tensor(c.shape(), 1.0), c);
    Tensor pos_terms = smul(mul(pow(one_minus, gamma), log(c)), -alpha);
    Tensor neg_terms = smul(mul(pow(c, gamma), log(one_minus)), -(1.0 - alpha));
    return add(mul(pos_mask, pos_terms), mul(neg_mask, neg_terms));
}

Tensor diou_loss_rows(const Tensor& pred_start, const Tensor& pred_end, const Interval& target) {
    const std::size_t n = pred_start.size();
    if (pred_end.size() != n) throw ShapeError("diou_loss_rows: start/end count mismatch");
    Tensor gs(Shape{n, 1}, target.start);
    Tensor ge(Shape{n, 1}, target.end);
    Tensor inter = maximum(sub(minimum(pred_end, ge), maximum(pred_start, gs)), Tensor(Shape{n, 1}, 0.0));
    Tensor uni = sub(add(sub(pred_end, pred_start), Tensor(Shape{n, 1}, target.length())), inter);
    Tensor iou_rows = div(inter, uni);
    Tensor enclose = sub(maximum(pred_end, ge), minimum(pred_start, gs));
    Tensor center_delta = smul(sub(add(pred_start, pred_end), Tensor(Shape{n, 1}, target.start + target.end)), 0.5);
    Tensor penalty = div(mul(center_delta, center_delta), mul(enclose, enclose));
    return add(sub(Tensor(Shape{n, 1}, 1.0), iou_rows), penalty);
}

StreamLabels label_stream(const StreamScores& scores, const Interval& target, const LossConfig& cfg) {
    StreamLabels labels;
    labels.proposal_positive.reserve(scores.proposals.size());
    for (const auto& p : scores.proposals)
        labels.proposal_positive.push_back(iou(p.interval(), target) >= cfg.positive_iou ? 1 : 0);
    labels.future_positive.reserve(scores.window_closes.size());
    for (std::int64_t close : scores.window_closes) {
        const double c = static_cast<double>(close);
        labels.future_positive.push_back(
            (c + cfg.future_lo <= target.start && target.start <= c + cfg.future_hi) ? 1 : 0);
    }
    return labels;
}

LossBreakdown total_loss(const StreamScores& scores, const StreamLabels& labels,
                         const Interval& target, const LossConfig& cfg) {
    const std::size_t n = scores.proposals.size();
    if (labels.proposal_positive.size() != n)
        throw ShapeError("total_loss: label count does not match proposals");
    if (labels.future_positive.size() != scores.window_closes.size())
        throw ShapeError("total_loss: future label count does not match windows");

    LossBreakdown out;

    Tensor cls_probs = sigmoid(scores.cls_logits);
    out.classification = mean(focal_loss_terms(cls_probs, labels.proposal_positive,
                                               cfg.focal_alpha, cfg.focal_gamma));

    // Regression only over positive proposals (mean over positives).
    std::vector<std::size_t> positives;
    for (std::size_t i = 0; i < n; ++i)
        if (labels.proposal_positive[i] == 1) positives.push_back(i);
    if (positives.empty()) {
        out.regression = Tensor::scalar(0.0);
    } else {
        std::vector<Tensor> srows, erows;
        srows.reserve(positives.size());
        for (std::size_t i : positives) {
            Tensor row = slice_rows(scores.offsets, i, i + 1);
            const auto& p = scores.proposals[i];
            Tensor ps = sadd(slice_cols(row, 0, 1), static_cast<double>(p.start_frame));
            Tensor pe = sadd(slice_cols(row, 1, 2), static_cast<double>(p.end_frame));
            pe = maximum(pe, sadd(ps, cfg.min_length));
            srows.push_back(ps);
            erows.push_back(pe);
        }
        Tensor pred_start = stack_rows(srows);
        Tensor pred_end = stack_rows(erows);
        out.regression = mean(diou_loss_rows(pred_start, pred_end, target));
    }

    if (cfg.future_prediction && scores.future_logits.defined() && scores.future_logits.size() > 0) {
        Tensor fprobs = sigmoid(scores.future_logits);
        Tensor ffocal = mean(focal_loss_terms(fprobs, labels.future_positive, cfg.focal_alpha,
                                              cfg.focal_gamma));
        std::vector<std::size_t> fpos;
        for (std::size_t i = 0; i < labels.future_positive.size(); ++i)
            if (labels.future_positive[i] == 1) fpos.push_back(i);
        if (fpos.empty()) {
            out.future = ffocal;
        } else {
            std::vector<Tensor> rows;
            rows.reserve(fpos.size());
            for (std::size_t i : fpos) {
                Tensor off = slice_rows(scores.future_offsets, i, i + 1);
                const double want = target.start - static_cast<double>(scores.window_closes[i]);
                rows.push_back(abs(sadd(off, -want)));
            }
            out.future = add(ffocal, mean(stack_rows(rows)));
        }
    } else {
        out.future = Tensor::scalar(0.0);
    }

    out.total = add(add(out.classification, out.regression), out.future);
    return out;
}

}  // namespace streamloc
