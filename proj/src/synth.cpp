#include "streamloc/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "streamloc/errors.hpp"

namespace streamloc {

using nlohmann::json;

void StreamSpec::validate() const {
    if (length < 8) throw ConfigError("stream spec: length must cover at least one window");
    if (feature_dim < 4) throw ConfigError("stream spec: feature_dim must be at least 4");
    if (event_types < 1) throw ConfigError("stream spec: need at least one event type");
    if (noise < 0.0) throw ConfigError("stream spec: noise must be non-negative");
    if (duration_min < 1.0 || duration_max < duration_min)
        throw ConfigError("stream spec: bad duration range");
    if (gap_min < 0.0 || gap_max < gap_min) throw ConfigError("stream spec: bad gap range");
    if (duration_max > static_cast<double>(length))
        throw ConfigError("stream spec: durations exceed the stream length");
}

void CorpusSpec::validate() const {
    stream.validate();
    if (train_streams < 1 || test_streams < 0) throw ConfigError("corpus spec: bad split sizes");
    if (queries_per_stream < 1) throw ConfigError("corpus spec: need at least one query per stream");
    if (ordinal_fraction < 0.0 || ordinal_fraction > 1.0)
        throw ConfigError("corpus spec: ordinal_fraction must be in [0,1]");
    if (min_ordinal_gap < 0) throw ConfigError("corpus spec: min_ordinal_gap must be non-negative");
}

int type_token(int event_type) { return 1 + event_type; }
int ordinal_token_first(int event_types) { return event_types + 1; }
int ordinal_token_second(int event_types) { return event_types + 2; }
std::size_t vocabulary_size(int event_types) { return static_cast<std::size_t>(event_types) + 3; }

std::vector<std::vector<double>> make_prototypes(const StreamSpec& spec) {
    Rng rng(Rng::child_seed(spec.seed, 0xA11CE));
    std::vector<std::vector<double>> protos;
    int attempts = 0;
    while (static_cast<int>(protos.size()) < spec.event_types) {
        if (++attempts > 10000)
            throw ConfigError("prototypes: cannot satisfy pairwise-similarity bound; raise feature_dim");
        std::vector<double> v(spec.feature_dim);
        double norm = 0.0;
        for (auto& x : v) {
            x = rng.normal();
            norm += x * x;
        }
        norm = std::sqrt(norm);
        for (auto& x : v) x /= norm;
        bool ok = true;
        for (const auto& p : protos) {
            double dot = 0.0;
            for (std::size_t i = 0; i < v.size(); ++i) dot += v[i] * p[i];
            if (std::fabs(dot) >= 0.5) {
                ok = false;
                break;
            }
        }
        if (ok) protos.push_back(std::move(v));
    }
    return protos;
}

GeneratedStream generate_stream(const StreamSpec& spec,
                                const std::vector<std::vector<double>>& prototypes,
                                std::uint64_t stream_index) {
    spec.validate();
    if (prototypes.size() != static_cast<std::size_t>(spec.event_types))
        throw ConfigError("generate_stream: prototype count mismatch");

    GeneratedStream out;
    out.stream_seed = Rng::child_seed(spec.seed, stream_index + 1);
    Rng rng(out.stream_seed);

    // Place non-overlapping events left to right; types are assigned below.
    std::int64_t cursor = 0;
    while (true) {
        const auto gap = static_cast<std::int64_t>(std::llround(rng.uniform(spec.gap_min, spec.gap_max)));
        const auto dur = std::max<std::int64_t>(
            1, static_cast<std::int64_t>(std::llround(rng.log_uniform(spec.duration_min, spec.duration_max))));
        const std::int64_t start = cursor + std::max<std::int64_t>(1, gap);
        const std::int64_t end = start + dur - 1;
        if (end > spec.length) break;
        out.events.push_back(PlantedEvent{0, start, end});
        cursor = end;
    }

    // Random types, then force one long-range repeat when the layout allows:
    // a later event re-uses the type of an earlier one that ended well before.
    for (auto& ev : out.events) ev.type = static_cast<int>(rng.uniform_int(0, spec.event_types - 1));
    const std::int64_t wanted_gap = spec.repeat_gap;
    int pick_from = -1, pick_to = -1;
    for (int j = static_cast<int>(out.events.size()) - 1; j >= 0 && pick_to < 0; --j) {
        for (int i = 0; i < j; ++i) {
            if (out.events[static_cast<std::size_t>(j)].start -
                    out.events[static_cast<std::size_t>(i)].end >=
                wanted_gap) {
                pick_from = i;
                pick_to = j;
            }
        }
    }
    if (pick_to >= 0) {
        auto& first = out.events[static_cast<std::size_t>(pick_from)];
        auto& second = out.events[static_cast<std::size_t>(pick_to)];
        second.type = first.type;
        // The pair must be occurrences #1 and #2 of that type: clear clashes.
        for (int i = 0; i < static_cast<int>(out.events.size()); ++i) {
            if (i == pick_from || i == pick_to) continue;
            if (out.events[static_cast<std::size_t>(i)].type == first.type)
                out.events[static_cast<std::size_t>(i)].type =
                    (first.type + 1 + static_cast<int>(rng.uniform_int(0, spec.event_types - 2))) %
                    spec.event_types;
        }
    }

    out.frames.assign(static_cast<std::size_t>(spec.length),
                      std::vector<double>(spec.feature_dim, 0.0));
    for (auto& row : out.frames)
        for (auto& x : row) x = rng.normal(0.0, spec.noise);
    for (const auto& ev : out.events) {
        for (std::int64_t t = ev.start; t <= ev.end; ++t) {
            auto& row = out.frames[static_cast<std::size_t>(t - 1)];
            const auto& proto = prototypes[static_cast<std::size_t>(ev.type)];
            for (std::size_t i = 0; i < row.size(); ++i) row[i] += proto[i];
        }
    }
    return out;
}

namespace {

// First and (when present) second occurrence per type, with the gap between
// them measured from first end to second start.
struct OccurrencePair {
    int type;
    const PlantedEvent* first;
    const PlantedEvent* second;  // null when the type occurs once
    std::int64_t gap() const { return second ? second->start - first->end : -1; }
};

std::vector<OccurrencePair> occurrences_by_type(const GeneratedStream& stream, int event_types) {
    std::vector<OccurrencePair> out;
    for (int type = 0; type < event_types; ++type) {
        OccurrencePair pair{type, nullptr, nullptr};
        for (const auto& ev : stream.events) {
            if (ev.type != type) continue;
            if (!pair.first)
                pair.first = &ev;
            else if (!pair.second)
                pair.second = &ev;
        }
        if (pair.first) out.push_back(pair);
    }
    return out;
}

}  // namespace

std::vector<Annotation> generate_queries(const GeneratedStream& stream, int stream_index,
                                         const std::string& split, int count, double ordinal_fraction,
                                         std::int64_t min_gap, int event_types, Rng& rng) {
    auto occs = occurrences_by_type(stream, event_types);
    if (occs.empty()) throw ConfigError("generate_queries: stream has no events");

    std::vector<const OccurrencePair*> ordinal_eligible;
    for (const auto& o : occs)
        if (o.second && o.gap() >= min_gap) ordinal_eligible.push_back(&o);

    std::vector<Annotation> out;
    for (int q = 0; q < count; ++q) {
        Annotation a;
        a.stream_index = stream_index;
        a.split = split;
        std::ostringstream id;
        id << split << "_s" << stream_index << "_q" << q;
        a.query_id = id.str();
        const bool want_ordinal = rng.uniform() < ordinal_fraction && !ordinal_eligible.empty();
        if (want_ordinal) {
            const auto& pair = *ordinal_eligible[static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<std::int64_t>(ordinal_eligible.size()) - 1))];
            a.tokens = {type_token(pair.type), ordinal_token_second(event_types)};
            a.target = pair.second->interval();
            a.second_occurrence = true;
        } else {
            const auto& pair = occs[static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<std::int64_t>(occs.size()) - 1))];
            a.tokens = {type_token(pair.type), ordinal_token_first(event_types)};
            a.target = pair.first->interval();
            a.second_occurrence = false;
        }
        out.push_back(std::move(a));
    }
    return out;
}

Corpus generate_corpus(const CorpusSpec& spec) {
    spec.validate();
    Corpus corpus;
    corpus.spec = spec;
    const auto prototypes = make_prototypes(spec.stream);

    auto build_split = [&](const std::string& split, int n, int index_offset) {
        std::vector<CorpusStream> streams;
        for (int i = 0; i < n; ++i) {
            CorpusStream cs;
            cs.index = i;
            cs.stream =
                generate_stream(spec.stream, prototypes, static_cast<std::uint64_t>(index_offset + i));
            Rng qrng(Rng::child_seed(spec.stream.seed, 0xBEEF + static_cast<std::uint64_t>(index_offset + i)));
            cs.annotations =
                generate_queries(cs.stream, i, split, spec.queries_per_stream, spec.ordinal_fraction,
                                 spec.min_ordinal_gap, spec.stream.event_types, qrng);
            streams.push_back(std::move(cs));
        }
        return streams;
    };
    corpus.train = build_split("train", spec.train_streams, 0);
    corpus.test = build_split("test", spec.test_streams, spec.train_streams);
    if (spec.ordinal_fraction > 0.0) {
        int ordinal = 0, total = 0;
        for (const auto* split : {&corpus.train, &corpus.test})
            for (const auto& cs : *split)
                for (const auto& a : cs.annotations) {
                    ++total;
                    ordinal += a.second_occurrence ? 1 : 0;
                }
        if (ordinal == 0)
            throw ConfigError("generate_corpus: no stream produced an eligible repeated event (0 of " +
                              std::to_string(total) + " queries are ordinal; wanted fraction " +
                              std::to_string(spec.ordinal_fraction) + ")");
    }
    return corpus;
}

// ---- disk layout ---------------------------------------------------------------

namespace {

json spec_to_json(const CorpusSpec& spec) {
    return json{{"stream",
                 {{"length", spec.stream.length},
                  {"feature_dim", spec.stream.feature_dim},
                  {"event_types", spec.stream.event_types},
                  {"noise", spec.stream.noise},
                  {"duration_min", spec.stream.duration_min},
                  {"duration_max", spec.stream.duration_max},
                  {"gap_min", spec.stream.gap_min},
                  {"gap_max", spec.stream.gap_max},
                  {"repeat_gap", spec.stream.repeat_gap},
                  {"seed", spec.stream.seed}}},
                {"train_streams", spec.train_streams},
                {"test_streams", spec.test_streams},
                {"queries_per_stream", spec.queries_per_stream},
                {"ordinal_fraction", spec.ordinal_fraction},
                {"min_ordinal_gap", spec.min_ordinal_gap}};
}

CorpusSpec spec_from_json(const json& j) {
    CorpusSpec spec;
    const auto& s = j.at("stream");
    spec.stream.length = s.at("length").get<std::int64_t>();
    spec.stream.feature_dim = s.at("feature_dim").get<std::size_t>();
    spec.stream.event_types = s.at("event_types").get<int>();
    spec.stream.noise = s.at("noise").get<double>();
    spec.stream.duration_min = s.at("duration_min").get<double>();
    spec.stream.duration_max = s.at("duration_max").get<double>();
    spec.stream.gap_min = s.at("gap_min").get<double>();
    spec.stream.gap_max = s.at("gap_max").get<double>();
    spec.stream.repeat_gap = s.value("repeat_gap", std::int64_t{128});
    spec.stream.seed = s.at("seed").get<std::uint64_t>();
    spec.train_streams = j.at("train_streams").get<int>();
    spec.test_streams = j.at("test_streams").get<int>();
    spec.queries_per_stream = j.at("queries_per_stream").get<int>();
    spec.ordinal_fraction = j.at("ordinal_fraction").get<double>();
    spec.min_ordinal_gap = j.at("min_ordinal_gap").get<std::int64_t>();
    return spec;
}

std::string stream_file_name(int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "stream_%04d.jsonl", index);
    return buf;
}

void write_split(const std::vector<CorpusStream>& streams, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream ann(dir / "annotations.jsonl");
    if (!ann) throw InputError("write_corpus: cannot write " + (dir / "annotations.jsonl").string());
    for (const auto& cs : streams) {
        std::ofstream os(dir / stream_file_name(cs.index));
        if (!os) throw InputError("write_corpus: cannot write stream file");
        for (std::size_t t = 0; t < cs.stream.frames.size(); ++t) {
            json rec{{"frame_index", t + 1}, {"features", cs.stream.frames[t]}};
            os << rec.dump() << '\n';
        }
        for (const auto& a : cs.annotations) {
            json rec{{"query_id", a.query_id},
                     {"stream_index", a.stream_index},
                     {"split", a.split},
                     {"tokens", a.tokens},
                     {"interval", {a.target.start, a.target.end}},
                     {"ordinal", a.second_occurrence ? "second" : "first"}};
            ann << rec.dump() << '\n';
        }
    }
}

std::vector<CorpusStream> load_split(const std::filesystem::path& dir, int expect) {
    std::vector<CorpusStream> streams;
    for (int i = 0; i < expect; ++i) {
        CorpusStream cs;
        cs.index = i;
        std::ifstream is(dir / stream_file_name(i));
        if (!is) throw InputError("load_corpus: missing " + (dir / stream_file_name(i)).string());
        std::string line;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            json rec;
            try {
                rec = json::parse(line);
            } catch (const json::exception& e) {
                throw InputError(std::string("load_corpus: bad frame record: ") + e.what());
            }
            cs.stream.frames.push_back(rec.at("features").get<std::vector<double>>());
        }
        streams.push_back(std::move(cs));
    }
    std::ifstream ann(dir / "annotations.jsonl");
    if (!ann) throw InputError("load_corpus: missing annotations in " + dir.string());
    std::string line;
    while (std::getline(ann, line)) {
        if (line.empty()) continue;
        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::exception& e) {
            throw InputError(std::string("load_corpus: bad annotation record: ") + e.what());
        }
        Annotation a;
        a.query_id = rec.at("query_id").get<std::string>();
        a.stream_index = rec.at("stream_index").get<int>();
        a.split = rec.value("split", "");
        a.tokens = rec.at("tokens").get<std::vector<int>>();
        a.target.start = rec.at("interval")[0].get<double>();
        a.target.end = rec.at("interval")[1].get<double>();
        a.second_occurrence = rec.value("ordinal", "first") == std::string("second");
        if (a.stream_index < 0 || a.stream_index >= expect)
            throw InputError("load_corpus: annotation points at missing stream");
        streams[static_cast<std::size_t>(a.stream_index)].annotations.push_back(std::move(a));
    }
    return streams;
}

}  // namespace

void write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    json manifest{{"format_version", 1}, {"spec", spec_to_json(corpus.spec)}};
    std::ofstream mf(dir / "manifest.json");
    if (!mf) throw InputError("write_corpus: cannot write manifest");
    mf << manifest.dump(2) << '\n';
    write_split(corpus.train, dir / "train");
    write_split(corpus.test, dir / "test");
}

Corpus load_corpus(const std::filesystem::path& dir) {
    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw InputError("load_corpus: missing manifest.json in " + dir.string());
    json manifest;
    try {
        mf >> manifest;
    } catch (const json::exception& e) {
        throw InputError(std::string("load_corpus: bad manifest: ") + e.what());
    }
    Corpus corpus;
    corpus.spec = spec_from_json(manifest.at("spec"));
    corpus.train = load_split(dir / "train", corpus.spec.train_streams);
    corpus.test = load_split(dir / "test", corpus.spec.test_streams);
    return corpus;
}

std::vector<QueryTask> to_query_tasks(const std::vector<Annotation>& annotations) {
    std::vector<QueryTask> tasks;
    tasks.reserve(annotations.size());
    for (const auto& a : annotations) tasks.push_back(QueryTask{a.query_id, a.tokens, a.target});
    return tasks;
}

}  // namespace streamloc
