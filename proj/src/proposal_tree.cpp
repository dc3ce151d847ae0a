#include "streamloc/proposal_tree.hpp"

#include <string>

#include "streamloc/errors.hpp"

namespace streamloc {

std::pair<std::int64_t, std::int64_t> span_of(int scale, std::int64_t index) {
    if (scale < 1 || scale > 62) throw DomainError("span_of: scale out of range: " + std::to_string(scale));
    if (index < 1) throw DomainError("span_of: index must be positive");
    const std::int64_t dur = std::int64_t{1} << (scale - 1);
    return {(index - 1) * dur + 1, index * dur};
}

std::int64_t max_reach(int num_scales) {
    if (num_scales < 1 || num_scales > 62)
        throw DomainError("max_reach: scale count out of range");
    return std::int64_t{1} << (num_scales - 1);
}

Tensor ProposalBackbone::merge_pair(int child_scale, const Tensor& left, const Tensor& right) const {
    if (child_scale < 1 || child_scale >= num_scales)
        throw DomainError("merge_pair: no merge above scale " + std::to_string(num_scales));
    // Children concatenate left-then-right along the feature axis.
    Tensor both = concat_cols(left, right);
    return merge[static_cast<std::size_t>(child_scale - 1)](both);
}

ProposalBackbone ProposalBackbone::create(ModelParameters& p, std::size_t kernel, std::size_t d_in,
                                          std::size_t d_model, std::size_t hidden, int num_scales,
                                          Rng& rng) {
    ProposalBackbone net;
    net.num_scales = num_scales;
    net.conv = CausalConv1d::create(p, "backbone.conv", kernel, d_in, d_model, rng);
    net.merge.reserve(static_cast<std::size_t>(num_scales - 1));
    for (int j = 1; j < num_scales; ++j)
        net.merge.push_back(
            Mlp::create(p, "backbone.merge" + std::to_string(j), 2 * d_model, hidden, d_model, rng));
    return net;
}

ProposalTree::ProposalTree(const ProposalBackbone& net, int window, int num_scales)
    : net_(&net), window_(window), num_scales_(num_scales) {
    if (window < 1 || (window & (window - 1)) != 0)
        throw DomainError("proposal tree: window must be a power of two");
    int log2w = 0;
    while ((1 << log2w) < window) ++log2w;
    if (num_scales < log2w + 1)
        throw DomainError("proposal tree: need at least log2(window)+1 scales");
    pending_.resize(static_cast<std::size_t>(num_scales));
}

std::vector<std::vector<EventProposal>> ProposalTree::ingest(const Tensor& frames) {
    const std::size_t n = frames.rows();
    if (n == 0 || n > static_cast<std::size_t>(window_))
        throw StreamOrderError("ingest: batch of " + std::to_string(n) + " frames, window is " +
                               std::to_string(window_));

    Tensor feats = net_->frame_features(frames, tail_);

    // Retain the last (kernel-1) raw rows for the next batch.
    const std::size_t keep = net_->conv.kernel() - 1;
    if (keep > 0) {
        Tensor joined = tail_.defined() ? concat_rows(tail_.detach(), frames.detach()) : frames.detach();
        const std::size_t have = joined.rows();
        tail_ = (have <= keep) ? joined : slice_rows(joined, have - keep, have).detach();
    }

    const std::int64_t closes_at = next_frame_ + static_cast<std::int64_t>(n) - 1;
    std::vector<std::vector<EventProposal>> by_scale(static_cast<std::size_t>(num_scales_));

    for (std::size_t i = 0; i < n; ++i) {
        EventProposal p;
        p.scale = 1;
        p.index = next_frame_ + static_cast<std::int64_t>(i);
        p.start_frame = p.end_frame = p.index;
        p.feature = slice_rows(feats, i, i + 1);
        p.completed_at = closes_at;
        by_scale[0].push_back(std::move(p));
    }

    for (int j = 1; j < num_scales_; ++j) {
        auto& level = by_scale[static_cast<std::size_t>(j - 1)];
        auto& up = by_scale[static_cast<std::size_t>(j)];
        auto& slot = pending_[static_cast<std::size_t>(j - 1)];
        for (auto& p : level) {
            if (p.index % 2 == 1) {
                slot = p;
                continue;
            }
            if (!slot || slot->index != p.index - 1)
                throw StateError("proposal tree: right child without its left sibling");
            EventProposal parent;
            parent.scale = j + 1;
            parent.index = p.index / 2;
            parent.start_frame = slot->start_frame;
            parent.end_frame = p.end_frame;
            parent.feature = net_->merge_pair(j, slot->feature, p.feature);
            parent.completed_at = closes_at;
            up.push_back(std::move(parent));
            slot.reset();
        }
    }

    next_frame_ += static_cast<std::int64_t>(n);
    return by_scale;
}

}  // namespace streamloc
