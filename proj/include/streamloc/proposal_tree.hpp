#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "streamloc/interval.hpp"
#include "streamloc/nn.hpp"
#include "streamloc/tensor.hpp"

namespace streamloc {

// A candidate event: an aligned segment-tree node. Scale j covers exactly
// 2^(j-1) frames; index i is 1-based within the scale. Merged memory entries
// reuse this struct with a widened span (index then refers to the left child).
struct EventProposal {
    int scale = 1;
    std::int64_t index = 1;
    std::int64_t start_frame = 1;
    std::int64_t end_frame = 1;
    Tensor feature;  // {1, d} or {d}
    std::int64_t completed_at = 0;

    Interval interval() const {
        return Interval{static_cast<double>(start_frame), static_cast<double>(end_frame)};
    }
    std::int64_t duration() const { return end_frame - start_frame + 1; }
};

// Closed form of the aligned layout: ((i-1)*2^(j-1)+1, i*2^(j-1)).
std::pair<std::int64_t, std::int64_t> span_of(int scale, std::int64_t index);

// Longest proposal duration constructible once every scale retains at least
// one historical event: 2^(num_scales - 1) frames.
std::int64_t max_reach(int num_scales);

// The trainable feature pipeline behind proposal construction: a causal
// convolution producing frame-level features and one merge MLP per scale
// transition.
struct ProposalBackbone {
    CausalConv1d conv;
    std::vector<Mlp> merge;  // merge[j-1] maps two scale-j features to scale j+1
    int num_scales = 0;

    Tensor frame_features(const Tensor& frames, const Tensor& tail) const {
        return conv(frames, tail);
    }
    Tensor merge_pair(int child_scale, const Tensor& left, const Tensor& right) const;

    static ProposalBackbone create(ModelParameters& p, std::size_t kernel, std::size_t d_in,
                                   std::size_t d_model, std::size_t hidden, int num_scales,
                                   Rng& rng);
};

// Streaming segment-tree construction. Frames arrive in window batches; a
// parent is emitted as soon as its right child completes, with left children
// finished in earlier windows held in per-scale pending slots (the newest
// historical event at that scale).
class ProposalTree {
public:
    ProposalTree(const ProposalBackbone& net, int window, int num_scales);

    // Ingest the next batch of raw frame rows. Mid-stream batches must have
    // exactly `window` rows; a shorter batch is the end-of-stream flush.
    // Returns new proposals grouped by scale (index 0 = scale 1).
    std::vector<std::vector<EventProposal>> ingest(const Tensor& frames);

    std::int64_t frames_seen() const { return next_frame_ - 1; }
    int window() const { return window_; }
    int num_scales() const { return num_scales_; }

private:
    const ProposalBackbone* net_;
    int window_;
    int num_scales_;
    std::int64_t next_frame_ = 1;
    std::vector<std::optional<EventProposal>> pending_;  // per scale, odd-index left children
    Tensor tail_;                                        // last (kernel-1) raw rows
};

}  // namespace streamloc
