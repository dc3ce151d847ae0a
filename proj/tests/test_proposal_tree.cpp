#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>

#include "streamloc/proposal_tree.hpp"

using namespace streamloc;

namespace {

struct TreeFixture {
    ModelParameters params;
    ProposalBackbone net;
    Rng rng{99};

    TreeFixture(std::size_t d_in = 4, std::size_t d_model = 4, int scales = 8) {
        net = ProposalBackbone::create(params, 3, d_in, d_model, 8, scales, rng);
    }

    Tensor frames(std::size_t n, std::size_t d = 4) {
        NoGradGuard g;
        return Tensor::randn({n, d}, rng);
    }
};

std::vector<std::size_t> counts(const std::vector<std::vector<EventProposal>>& by_scale) {
    std::vector<std::size_t> c;
    for (const auto& level : by_scale) c.push_back(level.size());
    return c;
}

}  // namespace

TEST_CASE("span arithmetic") {
    CHECK(span_of(1, 5) == std::make_pair<std::int64_t, std::int64_t>(5, 5));
    CHECK(span_of(4, 1) == std::make_pair<std::int64_t, std::int64_t>(1, 8));
    CHECK(span_of(5, 2) == std::make_pair<std::int64_t, std::int64_t>(17, 32));
    CHECK_THROWS_AS(span_of(0, 1), DomainError);
    CHECK_THROWS_AS(span_of(3, 0), DomainError);
}

TEST_CASE("max reach doubles per scale") {
    CHECK(max_reach(8) == 128);
    CHECK(max_reach(1) == 1);
    CHECK_THROWS_AS(max_reach(0), DomainError);
}

TEST_CASE("first two windows produce the expected per-scale counts") {
    TreeFixture fx;
    NoGradGuard no_grad;
    ProposalTree tree(fx.net, 8, 8);

    auto w1 = tree.ingest(fx.frames(8));
    CHECK(counts(w1) == std::vector<std::size_t>{8, 4, 2, 1, 0, 0, 0, 0});

    auto w2 = tree.ingest(fx.frames(8));
    CHECK(counts(w2) == std::vector<std::size_t>{8, 4, 2, 1, 1, 0, 0, 0});
    // The scale-5 proposal spans the full first 16 frames: its left child
    // completed in window 1.
    REQUIRE(w2[4].size() == 1);
    CHECK(w2[4][0].start_frame == 1);
    CHECK(w2[4][0].end_frame == 16);
    CHECK(w2[4][0].completed_at == 16);
}

TEST_CASE("proposal spans and completion times obey the layout") {
    TreeFixture fx;
    NoGradGuard no_grad;
    ProposalTree tree(fx.net, 8, 8);
    for (int w = 0; w < 16; ++w) {
        auto out = tree.ingest(fx.frames(8));
        const std::int64_t closes = (w + 1) * 8;
        for (const auto& level : out) {
            for (const auto& p : level) {
                const auto [s, e] = span_of(p.scale, p.index);
                CHECK(p.start_frame == s);
                CHECK(p.end_frame == e);
                CHECK(p.duration() == (std::int64_t{1} << (p.scale - 1)));
                CHECK(p.completed_at == closes);
                CHECK(p.feature.size() == 4);
            }
        }
    }
}

TEST_CASE("count law over random stream lengths") {
    // Some random lengths up to 4096 plus the forced total at T = 2^11.
    Rng lengths_rng(3);
    for (int rep = 0; rep < 8; ++rep) {
        const std::int64_t total_frames = 8 * lengths_rng.uniform_int(1, 512);
        TreeFixture fx;
        NoGradGuard no_grad;
        ProposalTree tree(fx.net, 8, 8);
        std::vector<std::size_t> totals(8, 0);
        std::int64_t fed = 0;
        while (fed < total_frames) {
            auto out = tree.ingest(fx.frames(8));
            fed += 8;
            for (int j = 0; j < 8; ++j) totals[static_cast<std::size_t>(j)] += out[static_cast<std::size_t>(j)].size();
        }
        for (int j = 1; j <= 8; ++j) {
            const auto expected = total_frames / (std::int64_t{1} << (j - 1));
            CHECK(totals[static_cast<std::size_t>(j - 1)] == static_cast<std::size_t>(expected));
        }
    }
}

TEST_CASE("grand total after 2^11 frames is 4080") {
    TreeFixture fx;
    NoGradGuard no_grad;
    ProposalTree tree(fx.net, 8, 8);
    std::size_t total = 0;
    for (int w = 0; w < 2048 / 8; ++w) {
        auto out = tree.ingest(fx.frames(8));
        for (const auto& level : out) total += level.size();
    }
    // Brute-force enumeration of aligned spans inside [1, 2048].
    std::size_t expected = 0;
    for (int j = 1; j <= 8; ++j)
        for (std::int64_t i = 1; span_of(j, i).second <= 2048; ++i) ++expected;
    CHECK(expected == 4080);
    CHECK(total == expected);
}

TEST_CASE("partial final window still pairs what it can") {
    TreeFixture fx;
    NoGradGuard no_grad;
    ProposalTree tree(fx.net, 8, 8);
    tree.ingest(fx.frames(8));
    auto out = tree.ingest(fx.frames(4));  // frames 9..12
    CHECK(counts(out) == std::vector<std::size_t>{4, 2, 1, 0, 0, 0, 0, 0});
    CHECK(out[2][0].end_frame == 12);
    CHECK(out[2][0].completed_at == 12);
    CHECK_THROWS_AS(tree.ingest(fx.frames(9)), StreamOrderError);
}

TEST_CASE("ingest is deterministic and causal") {
    TreeFixture fx;
    NoGradGuard no_grad;
    // Two trees fed identical frames emit identical features; a third fed a
    // different continuation after the cut matches on everything before it.
    std::vector<Tensor> batches;
    for (int w = 0; w < 6; ++w) batches.push_back(fx.frames(8));

    ProposalTree t1(fx.net, 8, 8), t2(fx.net, 8, 8), t3(fx.net, 8, 8);
    std::map<std::pair<int, std::int64_t>, std::vector<double>> seen;
    for (int w = 0; w < 6; ++w) {
        auto a = t1.ingest(batches[static_cast<std::size_t>(w)]);
        auto b = t2.ingest(batches[static_cast<std::size_t>(w)]);
        for (std::size_t j = 0; j < a.size(); ++j) {
            REQUIRE(a[j].size() == b[j].size());
            for (std::size_t i = 0; i < a[j].size(); ++i) {
                CHECK(a[j][i].feature.data() == b[j][i].feature.data());
                seen[{a[j][i].scale, a[j][i].index}] = a[j][i].feature.data();
            }
        }
        // Divergent stream: same first 4 windows, then different frames.
        auto c = t3.ingest(w < 4 ? batches[static_cast<std::size_t>(w)] : fx.frames(8));
        if (w < 4)
            for (std::size_t j = 0; j < a.size(); ++j)
                for (std::size_t i = 0; i < a[j].size(); ++i)
                    CHECK(c[j][i].feature.data() == a[j][i].feature.data());
    }
}

TEST_CASE("alignment: parent span is the union of its children") {
    TreeFixture fx;
    NoGradGuard no_grad;
    ProposalTree tree(fx.net, 8, 8);
    std::map<std::pair<int, std::int64_t>, std::pair<std::int64_t, std::int64_t>> spans;
    for (int w = 0; w < 8; ++w) {
        auto out = tree.ingest(fx.frames(8));
        for (const auto& level : out)
            for (const auto& p : level) {
                spans[{p.scale, p.index}] = {p.start_frame, p.end_frame};
                if (p.scale > 1) {
                    auto l = spans.at({p.scale - 1, 2 * p.index - 1});
                    auto r = spans.at({p.scale - 1, 2 * p.index});
                    CHECK(p.start_frame == l.first);
                    CHECK(p.end_frame == r.second);
                    CHECK(l.second + 1 == r.first);
                }
            }
    }
}

TEST_CASE("feature width mismatch is a shape error") {
    TreeFixture fx;
    NoGradGuard no_grad;
    ProposalTree tree(fx.net, 8, 8);
    CHECK_THROWS_AS(tree.ingest(fx.frames(8, 5)), ShapeError);
}
