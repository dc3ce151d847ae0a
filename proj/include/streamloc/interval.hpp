#pragma once

#include <algorithm>
#include <cstdint>

namespace streamloc {

// A temporal interval [start, end] in frame units. Lengths are continuous
// (end - start), which is what all IoU-style metrics here use; integer frame
// spans convert via their inclusive endpoints.
struct Interval {
    double start = 0.0;
    double end = 0.0;

    double length() const { return end - start; }
    double center() const { return 0.5 * (start + end); }
};

// Temporal intersection-over-union. Degenerate or disjoint pairs give 0.
inline double iou(const Interval& a, const Interval& b) {
    const double inter = std::min(a.end, b.end) - std::max(a.start, b.start);
    if (inter <= 0.0) return 0.0;
    const double uni = a.length() + b.length() - inter;
    if (uni <= 0.0) return 0.0;
    return inter / uni;
}

// 1-D distance-IoU loss: 1 - IoU + squared center distance over squared
// enclosing length.
inline double diou_loss_1d(const Interval& pred, const Interval& gt) {
    const double enclose = std::max(pred.end, gt.end) - std::min(pred.start, gt.start);
    const double dc = pred.center() - gt.center();
    return 1.0 - iou(pred, gt) + (dc * dc) / (enclose * enclose);
}

}  // namespace streamloc
