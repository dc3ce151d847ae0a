#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

#include "streamloc/interval.hpp"
#include "streamloc/proposal_tree.hpp"

namespace streamloc {

// Frequency of positive events per scale, estimated from training annotations.
struct ScaleWeights {
    std::vector<double> values;
};

// Splits a total capacity across scales: every scale gets one slot, the rest
// is shared proportionally to the weights with largest-remainder rounding
// (ties to the lower scale). All-zero weights fall back to uniform.
std::vector<int> allocate_sizes(int total, const ScaleWeights& weights);

// Counts, over all (annotation, aligned span) pairs, the spans at each scale
// whose IoU with the annotation reaches the threshold. All-zero counts fall
// back to uniform weights.
ScaleWeights estimate_scale_weights(const std::vector<Interval>& annotations, double iou_threshold,
                                    int num_scales);

// Per-scale bounded stores of historical proposals, ordered oldest to newest.
// On overflow the most similar adjacent pair merges by average pooling when
// its cosine similarity clears the threshold; otherwise the oldest entry is
// evicted.
class HierarchicalMemory {
public:
    HierarchicalMemory(std::vector<int> capacities, double merge_threshold, bool adaptive = true);

    void insert(int scale, EventProposal event);

    // All stored events ordered by (end_frame, scale). Entries are copies and
    // safe to hand to a concurrent evaluation.
    std::vector<EventProposal> snapshot() const;

    const std::vector<EventProposal>& at_scale(int scale) const;
    std::size_t size() const;
    int num_scales() const { return static_cast<int>(stores_.size()); }
    const std::vector<int>& capacities() const { return capacities_; }
    double merge_threshold() const { return merge_threshold_; }

    std::int64_t merges() const { return merges_; }
    std::int64_t evictions() const { return evictions_; }

    // Suspend/resume serialization; format versioned.
    void save_state(std::ostream& os) const;
    static HierarchicalMemory load_state(std::istream& is);

private:
    std::vector<std::vector<EventProposal>> stores_;
    std::vector<int> capacities_;
    double merge_threshold_;
    bool adaptive_;
    std::int64_t merges_ = 0;
    std::int64_t evictions_ = 0;
};

}  // namespace streamloc
