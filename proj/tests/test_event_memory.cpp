#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>
#include <sstream>

#include "streamloc/event_memory.hpp"
#include "streamloc/rng.hpp"

using namespace streamloc;

namespace {

EventProposal make_event(int scale, std::int64_t index, std::vector<double> feature) {
    EventProposal ev;
    ev.scale = scale;
    ev.index = index;
    const auto [s, e] = span_of(scale, index);
    ev.start_frame = s;
    ev.end_frame = e;
    ev.completed_at = e;
    ev.feature = Tensor::from_data({1, feature.size()}, std::move(feature));
    return ev;
}

// Step-by-step scalar replay of the insert rule, kept independent of the
// HierarchicalMemory implementation.
struct ScalarMemory {
    struct Entry {
        std::vector<double> feature;
        std::int64_t start, end;
    };
    std::deque<Entry> entries;
    std::size_t cap;
    double delta;

    static double cosine(const std::vector<double>& a, const std::vector<double>& b) {
        double dot = 0, na = 0, nb = 0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            dot += a[i] * b[i];
            na += a[i] * a[i];
            nb += b[i] * b[i];
        }
        if (na <= 0 || nb <= 0) return 0;
        return dot / std::sqrt(na * nb);
    }

    void insert(Entry e) {
        entries.push_back(std::move(e));
        while (entries.size() > cap) {
            std::size_t best = 0;
            double best_sim = -2;
            for (std::size_t i = 0; i + 1 < entries.size(); ++i) {
                const double s = cosine(entries[i].feature, entries[i + 1].feature);
                if (s > best_sim) {
                    best_sim = s;
                    best = i;
                }
            }
            if (best_sim > delta) {
                for (std::size_t k = 0; k < entries[best].feature.size(); ++k)
                    entries[best].feature[k] =
                        0.5 * (entries[best].feature[k] + entries[best + 1].feature[k]);
                entries[best].end = entries[best + 1].end;
                entries.erase(entries.begin() + static_cast<long>(best) + 1);
            } else {
                entries.pop_front();
            }
        }
    }
};

}  // namespace

TEST_CASE("allocate_sizes: uniform and weighted splits") {
    CHECK(allocate_sizes(64, ScaleWeights{std::vector<double>(8, 1.0)}) ==
          std::vector<int>{8, 8, 8, 8, 8, 8, 8, 8});
    CHECK(allocate_sizes(10, ScaleWeights{{3, 1}}) == std::vector<int>{7, 3});
    CHECK(allocate_sizes(10, ScaleWeights{{1, 1, 1}}) == std::vector<int>{4, 3, 3});
    CHECK_THROWS_AS(allocate_sizes(2, ScaleWeights{{1, 1, 1}}), CapacityError);
}

TEST_CASE("allocate_sizes matches a largest-remainder oracle and is scale-invariant") {
    Rng rng(31);
    for (int rep = 0; rep < 200; ++rep) {
        const int scales = 1 + static_cast<int>(rng.uniform_int(0, 9));
        const int total = scales + static_cast<int>(rng.uniform_int(0, 100));
        ScaleWeights w;
        for (int i = 0; i < scales; ++i)
            w.values.push_back(rng.uniform() < 0.2 ? 0.0 : rng.uniform(0, 10));

        auto caps = allocate_sizes(total, w);
        CHECK(std::accumulate(caps.begin(), caps.end(), 0) == total);
        for (int c : caps) CHECK(c >= 1);

        // Independent largest-remainder computation.
        double sum = std::accumulate(w.values.begin(), w.values.end(), 0.0);
        std::vector<double> weights = w.values;
        if (sum <= 0) {
            weights.assign(static_cast<std::size_t>(scales), 1.0);
            sum = scales;
        }
        std::vector<int> expect(static_cast<std::size_t>(scales), 1);
        std::vector<std::pair<double, int>> rem;
        int used = 0;
        for (int i = 0; i < scales; ++i) {
            const double share = (total - scales) * weights[static_cast<std::size_t>(i)] / sum;
            expect[static_cast<std::size_t>(i)] += static_cast<int>(std::floor(share));
            used += static_cast<int>(std::floor(share));
            rem.push_back({share - std::floor(share), i});
        }
        std::stable_sort(rem.begin(), rem.end(), [](auto a, auto b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        for (int k = 0; k < (total - scales) - used; ++k)
            ++expect[static_cast<std::size_t>(rem[static_cast<std::size_t>(k)].second)];
        CHECK(caps == expect);

        // Scaling all weights leaves integer capacities unchanged.
        ScaleWeights scaled;
        for (double v : w.values) scaled.values.push_back(v * 7.5);
        CHECK(allocate_sizes(total, scaled) == caps);
    }
}

TEST_CASE("estimate_scale_weights: exact alignment and fallback") {
    // One annotation spanning frames 1..8 exactly at threshold 0.7.
    auto w = estimate_scale_weights({{1.0, 8.0}}, 0.7, 8);
    CHECK(w.values == std::vector<double>{0, 0, 0, 1, 0, 0, 0, 0});

    // Nothing clears the threshold anywhere: uniform fallback.
    auto fallback = estimate_scale_weights({{1.5, 1.6}}, 0.99, 4);
    CHECK(fallback.values == std::vector<double>(4, 1.0));

    CHECK_THROWS_AS(estimate_scale_weights({}, 0.5, 4), DomainError);
}

TEST_CASE("estimate_scale_weights matches an exhaustive scan") {
    Rng rng(37);
    std::vector<Interval> gts;
    for (int i = 0; i < 100; ++i) {
        const double dur = std::exp(rng.uniform(std::log(2.0), std::log(128.0)));
        const double start = rng.uniform(1.0, 4096.0 - dur);
        gts.push_back({start, start + dur - 1.0});
    }
    auto w = estimate_scale_weights(gts, 0.5, 8);

    std::vector<double> expect(8, 0.0);
    for (const auto& gt : gts)
        for (int scale = 1; scale <= 8; ++scale)
            for (std::int64_t idx = 1; span_of(scale, idx).first <= 5000; ++idx) {
                const auto [s, e] = span_of(scale, idx);
                if (iou({static_cast<double>(s), static_cast<double>(e)}, gt) >= 0.5)
                    expect[static_cast<std::size_t>(scale - 1)] += 1.0;
            }
    CHECK(w.values == expect);
}

TEST_CASE("insert: hand-checkable merge of the most similar adjacent pair") {
    HierarchicalMemory mem({2}, 0.9);
    mem.insert(1, make_event(1, 1, {1, 0}));
    mem.insert(1, make_event(1, 2, {1, 0}));
    mem.insert(1, make_event(1, 3, {0, 1}));  // sims: (1.0, 0.0) -> merge the first pair
    const auto& store = mem.at_scale(1);
    REQUIRE(store.size() == 2);
    CHECK(store[0].feature.data() == std::vector<double>{1, 0});
    CHECK(store[0].start_frame == 1);
    CHECK(store[0].end_frame == 2);  // merged span is the union
    CHECK(store[1].feature.data() == std::vector<double>{0, 1});
    CHECK(mem.merges() == 1);
}

TEST_CASE("insert: merging disabled reduces to an exact FIFO") {
    Rng rng(41);
    HierarchicalMemory mem({3}, 2.0);  // cosine never exceeds 1
    std::deque<std::vector<double>> fifo;
    for (int i = 1; i <= 20; ++i) {
        std::vector<double> f{rng.normal(), rng.normal(), rng.normal()};
        mem.insert(1, make_event(1, i, f));
        fifo.push_back(f);
        if (fifo.size() > 3) fifo.pop_front();
    }
    const auto& store = mem.at_scale(1);
    REQUIRE(store.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) CHECK(store[i].feature.data() == fifo[i]);
}

TEST_CASE("insert matches the scalar replay oracle on random unit features") {
    Rng rng(43);
    for (int rep = 0; rep < 20; ++rep) {
        HierarchicalMemory mem({4}, 0.8);
        ScalarMemory oracle{{}, 4, 0.8};
        for (int i = 1; i <= 50; ++i) {
            std::vector<double> f(6);
            double norm = 0;
            for (auto& x : f) {
                x = rng.normal();
                norm += x * x;
            }
            norm = std::sqrt(norm);
            for (auto& x : f) x /= norm;
            // Bias features into a few clusters so merges actually happen.
            if (rng.uniform() < 0.5)
                for (std::size_t k = 0; k < f.size(); ++k) f[k] = 0.9 * (k == 0) + 0.1 * f[k];
            auto ev = make_event(1, i, f);
            oracle.insert({ev.feature.data(), ev.start_frame, ev.end_frame});
            mem.insert(1, std::move(ev));
        }
        const auto& store = mem.at_scale(1);
        REQUIRE(store.size() == oracle.entries.size());
        for (std::size_t i = 0; i < store.size(); ++i) {
            CHECK(store[i].feature.data() == oracle.entries[i].feature);
            CHECK(store[i].start_frame == oracle.entries[i].start);
            CHECK(store[i].end_frame == oracle.entries[i].end);
        }
    }
}

TEST_CASE("insert rejects out-of-order events") {
    HierarchicalMemory mem({4}, 0.8);
    mem.insert(1, make_event(1, 5, {1, 0}));
    CHECK_THROWS_AS(mem.insert(1, make_event(1, 5, {1, 0})), StreamOrderError);
    CHECK_THROWS_AS(mem.insert(1, make_event(1, 3, {1, 0})), StreamOrderError);
    CHECK_THROWS_AS(mem.insert(0, make_event(1, 9, {1, 0})), DomainError);
}

TEST_CASE("snapshot ordering matches a comparison sort") {
    Rng rng(47);
    HierarchicalMemory mem({3, 3, 3}, 2.0);
    CHECK(mem.snapshot().empty());
    for (int i = 1; i <= 12; ++i)
        for (int scale = 1; scale <= 3; ++scale) mem.insert(scale, make_event(scale, i, {1.0 * i}));
    auto snap = mem.snapshot();
    auto sorted = snap;
    std::stable_sort(sorted.begin(), sorted.end(), [](const EventProposal& a, const EventProposal& b) {
        if (a.end_frame != b.end_frame) return a.end_frame < b.end_frame;
        return a.scale < b.scale;
    });
    REQUIRE(snap.size() == sorted.size());
    for (std::size_t i = 0; i < snap.size(); ++i) {
        CHECK(snap[i].end_frame == sorted[i].end_frame);
        CHECK(snap[i].scale == sorted[i].scale);
    }
}

TEST_CASE("capacity and span monotonicity hold through random workloads") {
    Rng rng(53);
    auto caps = allocate_sizes(64, ScaleWeights{{5, 3, 1, 1, 0.5, 0.2, 0.1, 0.1}});
    HierarchicalMemory mem(caps, 0.8);
    std::vector<std::int64_t> next_index(9, 1);
    for (int step = 0; step < 10000; ++step) {
        const int scale = 1 + static_cast<int>(rng.uniform_int(0, 7));
        auto& idx = next_index[static_cast<std::size_t>(scale)];
        std::vector<double> f(4);
        for (auto& x : f) x = rng.normal();
        mem.insert(scale, make_event(scale, idx, f));
        idx += 1 + rng.uniform_int(0, 2);

        std::size_t total = 0;
        for (int s = 1; s <= 8; ++s) {
            const auto& store = mem.at_scale(s);
            total += store.size();
            CHECK(store.size() <= static_cast<std::size_t>(caps[static_cast<std::size_t>(s - 1)]));
            for (std::size_t i = 0; i + 1 < store.size(); ++i)
                CHECK(store[i].start_frame < store[i + 1].start_frame);
        }
        CHECK(total <= 64);
    }
    CHECK(mem.merges() + mem.evictions() > 0);
}

TEST_CASE("memory state serialization round-trips") {
    Rng rng(59);
    HierarchicalMemory mem({2, 3}, 0.8);
    for (int i = 1; i <= 6; ++i) {
        mem.insert(1, make_event(1, i, {rng.normal(), rng.normal()}));
        mem.insert(2, make_event(2, i, {rng.normal(), rng.normal()}));
    }
    std::stringstream ss;
    mem.save_state(ss);
    auto loaded = HierarchicalMemory::load_state(ss);
    CHECK(loaded.capacities() == mem.capacities());
    auto a = mem.snapshot(), b = loaded.snapshot();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].scale == b[i].scale);
        CHECK(a[i].start_frame == b[i].start_frame);
        CHECK(a[i].end_frame == b[i].end_frame);
        CHECK(a[i].completed_at == b[i].completed_at);
        CHECK(a[i].feature.data() == b[i].feature.data());
    }
}
