#include "streamloc/event_memory.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <string>

#include "streamloc/errors.hpp"

namespace streamloc {

namespace {

constexpr std::uint32_t kStateMagic = 0x534c4d53u;  // "SLMS"
constexpr std::uint32_t kStateVersion = 1;

double cosine(const Tensor& a, const Tensor& b) {
    const auto& x = a.data();
    const auto& y = b.data();
    double dot = 0.0, nx = 0.0, ny = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        dot += x[i] * y[i];
        nx += x[i] * x[i];
        ny += y[i] * y[i];
    }
    if (nx <= 0.0 || ny <= 0.0) return 0.0;
    return dot / std::sqrt(nx * ny);
}

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw CheckpointError("memory state: truncated stream");
    return v;
}

}  // namespace

std::vector<int> allocate_sizes(int total, const ScaleWeights& weights) {
    const int scales = static_cast<int>(weights.values.size());
    if (scales < 1) throw DomainError("allocate_sizes: no scales");
    if (total < scales)
        throw CapacityError("allocate_sizes: total capacity " + std::to_string(total) +
                            " below scale count " + std::to_string(scales));
    for (double w : weights.values)
        if (w < 0.0 || !std::isfinite(w)) throw DomainError("allocate_sizes: weights must be finite and non-negative");

    double sum = std::accumulate(weights.values.begin(), weights.values.end(), 0.0);
    std::vector<double> w = weights.values;
    if (sum <= 0.0) {
        std::fill(w.begin(), w.end(), 1.0);
        sum = static_cast<double>(scales);
    }

    const int spare = total - scales;
    std::vector<int> caps(static_cast<std::size_t>(scales), 1);
    std::vector<double> frac(static_cast<std::size_t>(scales));
    int used = 0;
    for (int i = 0; i < scales; ++i) {
        const double share = static_cast<double>(spare) * w[static_cast<std::size_t>(i)] / sum;
        const int base = static_cast<int>(std::floor(share));
        caps[static_cast<std::size_t>(i)] += base;
        frac[static_cast<std::size_t>(i)] = share - static_cast<double>(base);
        used += base;
    }
    int leftover = spare - used;
    std::vector<int> order(static_cast<std::size_t>(scales));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        if (frac[static_cast<std::size_t>(a)] != frac[static_cast<std::size_t>(b)])
            return frac[static_cast<std::size_t>(a)] > frac[static_cast<std::size_t>(b)];
        return a < b;
    });
    for (int r = 0; r < leftover; ++r) ++caps[static_cast<std::size_t>(order[static_cast<std::size_t>(r)])];
    return caps;
}

ScaleWeights estimate_scale_weights(const std::vector<Interval>& annotations, double iou_threshold,
                                    int num_scales) {
    if (annotations.empty()) throw DomainError("estimate_scale_weights: no annotations");
    if (!(iou_threshold > 0.0 && iou_threshold <= 1.0))
        throw DomainError("estimate_scale_weights: threshold must be in (0, 1]");
    ScaleWeights w;
    w.values.assign(static_cast<std::size_t>(num_scales), 0.0);
    for (const auto& gt : annotations) {
        for (int scale = 1; scale <= num_scales; ++scale) {
            const std::int64_t dur = std::int64_t{1} << (scale - 1);
            // Only spans near the annotation can clear a positive threshold.
            const auto lo = static_cast<std::int64_t>(std::floor(gt.start / static_cast<double>(dur))) - 1;
            const auto hi = static_cast<std::int64_t>(std::ceil(gt.end / static_cast<double>(dur))) + 1;
            for (std::int64_t idx = std::max<std::int64_t>(1, lo); idx <= hi; ++idx) {
                const auto [s, e] = span_of(scale, idx);
                const Interval span{static_cast<double>(s), static_cast<double>(e)};
                if (iou(span, gt) >= iou_threshold) w.values[static_cast<std::size_t>(scale - 1)] += 1.0;
            }
        }
    }
    const double sum = std::accumulate(w.values.begin(), w.values.end(), 0.0);
    if (sum <= 0.0) std::fill(w.values.begin(), w.values.end(), 1.0);
    return w;
}

HierarchicalMemory::HierarchicalMemory(std::vector<int> capacities, double merge_threshold,
                                       bool adaptive)
    : capacities_(std::move(capacities)), merge_threshold_(merge_threshold), adaptive_(adaptive) {
    if (capacities_.empty()) throw DomainError("memory: no scales");
    for (int c : capacities_)
        if (c < 1) throw CapacityError("memory: every scale needs capacity of at least 1");
    stores_.resize(capacities_.size());
}

void HierarchicalMemory::insert(int scale, EventProposal event) {
    if (scale < 1 || scale > num_scales())
        throw DomainError("memory insert: scale out of range: " + std::to_string(scale));
    auto& store = stores_[static_cast<std::size_t>(scale - 1)];
    if (!store.empty() && event.end_frame <= store.back().end_frame)
        throw StreamOrderError("memory insert: event ends at " + std::to_string(event.end_frame) +
                               ", newest stored entry ends at " + std::to_string(store.back().end_frame));
    store.push_back(std::move(event));

    const auto cap = static_cast<std::size_t>(capacities_[static_cast<std::size_t>(scale - 1)]);
    while (store.size() > cap) {
        std::size_t best = 0;
        double best_sim = -2.0;
        if (adaptive_) {
            for (std::size_t i = 0; i + 1 < store.size(); ++i) {
                const double sim = cosine(store[i].feature, store[i + 1].feature);
                if (sim > best_sim) {
                    best_sim = sim;
                    best = i;
                }
            }
        }
        if (adaptive_ && best_sim > merge_threshold_) {
            EventProposal& left = store[best];
            EventProposal& right = store[best + 1];
            std::vector<double> avg(left.feature.size());
            for (std::size_t i = 0; i < avg.size(); ++i)
                avg[i] = 0.5 * (left.feature.data()[i] + right.feature.data()[i]);
            left.feature = Tensor::from_data(left.feature.shape(), std::move(avg));
            left.end_frame = right.end_frame;
            left.completed_at = std::max(left.completed_at, right.completed_at);
            store.erase(store.begin() + static_cast<long>(best) + 1);
            ++merges_;
        } else {
            store.erase(store.begin());
            ++evictions_;
        }
    }
}

std::vector<EventProposal> HierarchicalMemory::snapshot() const {
    std::vector<EventProposal> all;
    all.reserve(size());
    for (const auto& store : stores_) all.insert(all.end(), store.begin(), store.end());
    std::stable_sort(all.begin(), all.end(), [](const EventProposal& a, const EventProposal& b) {
        if (a.end_frame != b.end_frame) return a.end_frame < b.end_frame;
        return a.scale < b.scale;
    });
    return all;
}

const std::vector<EventProposal>& HierarchicalMemory::at_scale(int scale) const {
    if (scale < 1 || scale > num_scales()) throw DomainError("memory: scale out of range");
    return stores_[static_cast<std::size_t>(scale - 1)];
}

std::size_t HierarchicalMemory::size() const {
    std::size_t n = 0;
    for (const auto& s : stores_) n += s.size();
    return n;
}

void HierarchicalMemory::save_state(std::ostream& os) const {
    write_pod(os, kStateMagic);
    write_pod(os, kStateVersion);
    write_pod(os, static_cast<std::uint32_t>(stores_.size()));
    write_pod(os, merge_threshold_);
    write_pod(os, static_cast<std::uint8_t>(adaptive_ ? 1 : 0));
    for (std::size_t s = 0; s < stores_.size(); ++s) {
        write_pod(os, static_cast<std::int32_t>(capacities_[s]));
        write_pod(os, static_cast<std::uint64_t>(stores_[s].size()));
        for (const auto& ev : stores_[s]) {
            write_pod(os, static_cast<std::int32_t>(ev.scale));
            write_pod(os, ev.index);
            write_pod(os, ev.start_frame);
            write_pod(os, ev.end_frame);
            write_pod(os, ev.completed_at);
            write_pod(os, static_cast<std::uint64_t>(ev.feature.size()));
            os.write(reinterpret_cast<const char*>(ev.feature.data().data()),
                     static_cast<long>(ev.feature.size() * sizeof(double)));
        }
    }
}

HierarchicalMemory HierarchicalMemory::load_state(std::istream& is) {
    if (read_pod<std::uint32_t>(is) != kStateMagic)
        throw CheckpointError("memory state: bad magic");
    const auto version = read_pod<std::uint32_t>(is);
    if (version != kStateVersion)
        throw CheckpointError("memory state: unsupported version " + std::to_string(version));
    const auto scales = read_pod<std::uint32_t>(is);
    const auto threshold = read_pod<double>(is);
    const bool adaptive = read_pod<std::uint8_t>(is) != 0;
    std::vector<int> caps;
    std::vector<std::vector<EventProposal>> stores;
    for (std::uint32_t s = 0; s < scales; ++s) {
        caps.push_back(read_pod<std::int32_t>(is));
        const auto count = read_pod<std::uint64_t>(is);
        std::vector<EventProposal> store;
        for (std::uint64_t i = 0; i < count; ++i) {
            EventProposal ev;
            ev.scale = read_pod<std::int32_t>(is);
            ev.index = read_pod<std::int64_t>(is);
            ev.start_frame = read_pod<std::int64_t>(is);
            ev.end_frame = read_pod<std::int64_t>(is);
            ev.completed_at = read_pod<std::int64_t>(is);
            const auto len = read_pod<std::uint64_t>(is);
            std::vector<double> data(len);
            is.read(reinterpret_cast<char*>(data.data()), static_cast<long>(len * sizeof(double)));
            if (!is) throw CheckpointError("memory state: truncated feature data");
            ev.feature = Tensor::from_data({1, static_cast<std::size_t>(len)}, std::move(data));
            store.push_back(std::move(ev));
        }
        stores.push_back(std::move(store));
    }
    HierarchicalMemory mem(std::move(caps), threshold, adaptive);
    mem.stores_ = std::move(stores);
    return mem;
}

}  // namespace streamloc
