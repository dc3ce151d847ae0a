#pragma once

#include <map>
#include <string>
#include <vector>

#include "streamloc/interval.hpp"
#include "streamloc/prediction.hpp"
#include "streamloc/synth.hpp"

namespace streamloc {

// Percentage of queries whose top-n list holds at least one prediction with
// IoU >= threshold against the query's target. Queries without predictions
// count as misses.
double recall_at(const std::vector<std::vector<Prediction>>& finalized_per_query,
                 const std::vector<Interval>& targets, int top_n, double iou_threshold);

struct DelayStats {
    double sd_mean = 0.0;  // start_emit - target start, mean over matched queries
    double ed_mean = 0.0;  // end_emit - target end
    int matched = 0;
    double matched_fraction = 0.0;
};

// Top-1 predictions matched at IoU >= m_match contribute their emit-time
// deltas; negative values mean the boundary was predicted before it occurred.
DelayStats delay_metrics(const std::vector<std::vector<Prediction>>& finalized_per_query,
                         const std::vector<Interval>& targets, double m_match);

struct EvalOptions {
    std::vector<int> top_ns{1, 5};
    std::vector<double> iou_thresholds{0.3, 0.5, 0.7};
    double m_match = 0.5;
    double nms_iou = 0.5;

    int max_top_n() const;
};

struct SubsetMetrics {
    int queries = 0;
    std::map<std::pair<int, double>, double> recall;  // (n, iou) -> percent
    DelayStats delay;
};

// One report per inference mode, each broken down by query subset
// ("all", "first", "again").
struct MetricReport {
    EvalOptions options;
    std::map<std::string, std::map<std::string, SubsetMetrics>> by_mode;

    std::string to_text() const;
    std::string to_csv() const;
};

MetricReport build_report(const std::vector<Annotation>& annotations,
                          const std::vector<Prediction>& emissions, const EvalOptions& options);

}  // namespace streamloc
