#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "streamloc/interval.hpp"

namespace streamloc {

// An emitted localization. Mode 'E' predictions come straight from a scored
// proposal (both boundaries known when its window closes); mode 'F' pairs an
// early start estimate with a later proposal's regressed end.
struct Prediction {
    std::string query_id;
    char mode = 'E';
    double start = 0.0;
    double end = 0.0;
    double score = 0.0;
    std::int64_t start_emit = 0;  // stream time the start became known
    std::int64_t end_emit = 0;    // stream time the end became known

    Interval interval() const { return Interval{start, end}; }
};

// JSONL record round-trip for emission logs.
std::string prediction_to_json(const Prediction& p);
Prediction prediction_from_json(const std::string& line);

// Offline ranking: score-descending sort (deterministic tie-breaks), greedy
// temporal NMS at the given IoU, then the top n. Emit-times pass through
// untouched.
std::vector<Prediction> finalize_predictions(std::vector<Prediction> candidates, int top_n,
                                             double nms_iou);

}  // namespace streamloc
