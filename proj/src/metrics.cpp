#include "streamloc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <json.hpp>

#include "streamloc/errors.hpp"

namespace streamloc {

using nlohmann::json;

std::string prediction_to_json(const Prediction& p) {
    json rec{{"query_id", p.query_id}, {"mode", std::string(1, p.mode)},
             {"start", p.start},       {"end", p.end},
             {"score", p.score},       {"start_emit", p.start_emit},
             {"end_emit", p.end_emit}};
    return rec.dump();
}

Prediction prediction_from_json(const std::string& line) {
    json rec;
    try {
        rec = json::parse(line);
    } catch (const json::exception& e) {
        throw InputError(std::string("emission record: ") + e.what());
    }
    Prediction p;
    p.query_id = rec.at("query_id").get<std::string>();
    const auto mode = rec.at("mode").get<std::string>();
    if (mode != "E" && mode != "F") throw InputError("emission record: mode must be E or F");
    p.mode = mode[0];
    p.start = rec.at("start").get<double>();
    p.end = rec.at("end").get<double>();
    p.score = rec.at("score").get<double>();
    p.start_emit = rec.at("start_emit").get<std::int64_t>();
    p.end_emit = rec.at("end_emit").get<std::int64_t>();
    return p;
}

std::vector<Prediction> finalize_predictions(std::vector<Prediction> candidates, int top_n,
                                             double nms_iou) {
    std::sort(candidates.begin(), candidates.end(), [](const Prediction& a, const Prediction& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.start_emit != b.start_emit) return a.start_emit < b.start_emit;
        if (a.end_emit != b.end_emit) return a.end_emit < b.end_emit;
        if (a.start != b.start) return a.start < b.start;
        return a.end < b.end;
    });
    std::vector<Prediction> kept;
    for (const auto& c : candidates) {
        bool suppressed = false;
        for (const auto& k : kept) {
            if (iou(c.interval(), k.interval()) >= nms_iou ||
                (c.start == k.start && c.end == k.end)) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) {
            kept.push_back(c);
            if (static_cast<int>(kept.size()) >= top_n) break;
        }
    }
    return kept;
}

double recall_at(const std::vector<std::vector<Prediction>>& finalized_per_query,
                 const std::vector<Interval>& targets, int top_n, double iou_threshold) {
    if (finalized_per_query.size() != targets.size())
        throw DomainError("recall_at: query/target count mismatch");
    if (targets.empty()) return 0.0;
    int hits = 0;
    for (std::size_t q = 0; q < targets.size(); ++q) {
        const auto& preds = finalized_per_query[q];
        const std::size_t limit = std::min<std::size_t>(preds.size(), static_cast<std::size_t>(top_n));
        for (std::size_t i = 0; i < limit; ++i) {
            if (iou(preds[i].interval(), targets[q]) >= iou_threshold) {
                ++hits;
                break;
            }
        }
    }
    return 100.0 * static_cast<double>(hits) / static_cast<double>(targets.size());
}

DelayStats delay_metrics(const std::vector<std::vector<Prediction>>& finalized_per_query,
                         const std::vector<Interval>& targets, double m_match) {
    if (finalized_per_query.size() != targets.size())
        throw DomainError("delay_metrics: query/target count mismatch");
    DelayStats stats;
    double sd = 0.0, ed = 0.0;
    for (std::size_t q = 0; q < targets.size(); ++q) {
        if (finalized_per_query[q].empty()) continue;
        const Prediction& top = finalized_per_query[q].front();
        if (iou(top.interval(), targets[q]) < m_match) continue;
        sd += static_cast<double>(top.start_emit) - targets[q].start;
        ed += static_cast<double>(top.end_emit) - targets[q].end;
        ++stats.matched;
    }
    if (stats.matched > 0) {
        stats.sd_mean = sd / stats.matched;
        stats.ed_mean = ed / stats.matched;
    }
    stats.matched_fraction =
        targets.empty() ? 0.0 : static_cast<double>(stats.matched) / static_cast<double>(targets.size());
    return stats;
}

int EvalOptions::max_top_n() const {
    int n = 1;
    for (int v : top_ns) n = std::max(n, v);
    return n;
}

MetricReport build_report(const std::vector<Annotation>& annotations,
                          const std::vector<Prediction>& emissions, const EvalOptions& options) {
    MetricReport report;
    report.options = options;

    std::map<std::string, std::map<std::string, std::vector<Prediction>>> by_mode_query;
    for (const auto& p : emissions) by_mode_query[std::string(1, p.mode)][p.query_id].push_back(p);

    for (auto& [mode, per_query] : by_mode_query) {
        // Finalized list per annotation, in annotation order.
        std::vector<std::vector<Prediction>> finalized;
        finalized.reserve(annotations.size());
        for (const auto& a : annotations) {
            auto it = per_query.find(a.query_id);
            if (it == per_query.end())
                finalized.emplace_back();
            else
                finalized.push_back(finalize_predictions(it->second, options.max_top_n(), options.nms_iou));
        }

        auto compute_subset = [&](auto&& keep) {
            SubsetMetrics sm;
            std::vector<std::vector<Prediction>> preds;
            std::vector<Interval> targets;
            for (std::size_t i = 0; i < annotations.size(); ++i) {
                if (!keep(annotations[i])) continue;
                preds.push_back(finalized[i]);
                targets.push_back(annotations[i].target);
            }
            sm.queries = static_cast<int>(targets.size());
            if (!targets.empty()) {
                for (int n : options.top_ns)
                    for (double m : options.iou_thresholds)
                        sm.recall[{n, m}] = recall_at(preds, targets, n, m);
                sm.delay = delay_metrics(preds, targets, options.m_match);
            }
            return sm;
        };

        auto& subsets = report.by_mode[mode];
        subsets["all"] = compute_subset([](const Annotation&) { return true; });
        subsets["first"] = compute_subset([](const Annotation& a) { return !a.second_occurrence; });
        subsets["again"] = compute_subset([](const Annotation& a) { return a.second_occurrence; });
    }
    return report;
}

std::string MetricReport::to_text() const {
    std::ostringstream os;
    for (const auto& [mode, subsets] : by_mode) {
        os << "mode " << mode << "\n";
        for (const auto& [name, sm] : subsets) {
            os << "  " << name << " (" << sm.queries << " queries)\n";
            for (const auto& [key, value] : sm.recall) {
                os << "    R@" << key.first << ",IoU=" << key.second << ": ";
                char buf[32];
                std::snprintf(buf, sizeof(buf), "%.2f", value);
                os << buf << "\n";
            }
            char buf[128];
            std::snprintf(buf, sizeof(buf), "    SD: %.3f  ED: %.3f  matched: %d (%.1f%%)\n",
                          sm.delay.sd_mean, sm.delay.ed_mean, sm.delay.matched,
                          100.0 * sm.delay.matched_fraction);
            os << buf;
        }
    }
    return os.str();
}

std::string MetricReport::to_csv() const {
    std::ostringstream os;
    os << "mode,subset,queries,metric,value\n";
    for (const auto& [mode, subsets] : by_mode) {
        for (const auto& [name, sm] : subsets) {
            for (const auto& [key, value] : sm.recall)
                os << mode << ',' << name << ',' << sm.queries << ",R@" << key.first << "_iou"
                   << key.second << ',' << value << "\n";
            os << mode << ',' << name << ',' << sm.queries << ",SD," << sm.delay.sd_mean << "\n";
            os << mode << ',' << name << ',' << sm.queries << ",ED," << sm.delay.ed_mean << "\n";
            os << mode << ',' << name << ',' << sm.queries << ",matched_fraction,"
               << sm.delay.matched_fraction << "\n";
        }
    }
    return os.str();
}

}  // namespace streamloc
