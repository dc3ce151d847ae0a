#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "streamloc/interval.hpp"
#include "streamloc/model.hpp"
#include "streamloc/rng.hpp"

namespace streamloc {

// Parameters for one synthetic feature stream. Streams carry Gaussian noise
// with planted prototype-plus-noise events; everything is a pure function of
// the seed.
struct StreamSpec {
    std::int64_t length = 512;
    std::size_t feature_dim = 32;
    int event_types = 5;
    double noise = 0.3;
    double duration_min = 2.0;
    double duration_max = 128.0;  // log-uniform durations
    double gap_min = 4.0;
    double gap_max = 64.0;  // uniform inter-event gaps
    // When the layout allows, one late event re-uses the type of an event that
    // ended at least this many frames earlier (the long-range repeat plan).
    std::int64_t repeat_gap = 128;
    std::uint64_t seed = 1;

    void validate() const;
};

struct CorpusSpec {
    StreamSpec stream;
    int train_streams = 200;
    int test_streams = 50;
    int queries_per_stream = 3;
    double ordinal_fraction = 0.3;       // share of "second occurrence" queries
    std::int64_t min_ordinal_gap = 128;  // frames between the paired occurrences

    void validate() const;
};

struct PlantedEvent {
    int type = 0;
    std::int64_t start = 0;
    std::int64_t end = 0;  // inclusive

    Interval interval() const {
        return Interval{static_cast<double>(start), static_cast<double>(end)};
    }
};

struct GeneratedStream {
    std::vector<std::vector<double>> frames;  // [length][feature_dim]
    std::vector<PlantedEvent> events;
    std::uint64_t stream_seed = 0;
};

struct Annotation {
    std::string query_id;
    int stream_index = 0;
    std::string split;
    std::vector<int> tokens;  // {type token, ordinal token}
    Interval target{0.0, 0.0};
    bool second_occurrence = false;
};

// Token layout: 0 reserved, 1..E event types, E+1 "first", E+2 "second".
int type_token(int event_type);
int ordinal_token_first(int event_types);
int ordinal_token_second(int event_types);
std::size_t vocabulary_size(int event_types);

// Shared per-corpus prototype vectors: unit norm, pairwise |cosine| < 0.5.
std::vector<std::vector<double>> make_prototypes(const StreamSpec& spec);

GeneratedStream generate_stream(const StreamSpec& spec,
                                const std::vector<std::vector<double>>& prototypes,
                                std::uint64_t stream_index);

// Queries over one stream's planted events. `want_ordinal` of them target the
// second occurrence of a repeated type when an eligible pair (gap at or above
// min_gap) exists; the rest target first occurrences.
std::vector<Annotation> generate_queries(const GeneratedStream& stream, int stream_index,
                                         const std::string& split, int count, double ordinal_fraction,
                                         std::int64_t min_gap, int event_types, Rng& rng);

struct CorpusStream {
    int index = 0;
    GeneratedStream stream;
    std::vector<Annotation> annotations;
};

struct Corpus {
    CorpusSpec spec;
    std::vector<CorpusStream> train;
    std::vector<CorpusStream> test;
};

Corpus generate_corpus(const CorpusSpec& spec);

// On-disk layout: <dir>/{train,test}/stream_NNNN.jsonl frame files, one
// annotations.jsonl per split, and manifest.json recording spec and seed.
void write_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus load_corpus(const std::filesystem::path& dir);

std::vector<QueryTask> to_query_tasks(const std::vector<Annotation>& annotations);

}  // namespace streamloc
