// streamloc: streaming temporal localization over feature streams.
//
// Commands: gen-data, train, stream, eval, ablate, sweep. A JSON config file
// plus repeated --set overrides drive everything; see --help-config.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "streamloc/config.hpp"
#include "streamloc/engine.hpp"
#include "streamloc/errors.hpp"
#include "streamloc/metrics.hpp"
#include "streamloc/model.hpp"
#include "streamloc/synth.hpp"
#include "streamloc/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace streamloc;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitBadInput = 2;
constexpr int kExitBadConfig = 3;
constexpr int kExitBadCheckpoint = 4;

struct CommonArgs {
    std::string config_file;
    std::vector<std::string> overrides;
};

RunConfig resolve_config(const CommonArgs& args) {
    return load_run_config(args.config_file.empty() ? fs::path{} : fs::path(args.config_file),
                           args.overrides);
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path);
    if (!os) throw InputError("cannot write " + path.string());
    os << text;
}

int cmd_gen_data(const CommonArgs& common, const std::string& out_dir) {
    RunConfig cfg = resolve_config(common);
    Corpus corpus = generate_corpus(cfg.data);
    write_corpus(corpus, out_dir);
    std::size_t queries = 0;
    for (const auto* split : {&corpus.train, &corpus.test})
        for (const auto& cs : *split) queries += cs.annotations.size();
    std::cout << "wrote " << corpus.train.size() << " train / " << corpus.test.size()
              << " test streams, " << queries << " queries to " << out_dir << "\n";
    return kExitOk;
}

int cmd_train(const CommonArgs& common, const std::string& corpus_dir, const std::string& out_dir) {
    RunConfig cfg = resolve_config(common);
    Corpus corpus = load_corpus(corpus_dir);
    cfg.data = corpus.spec;  // the corpus on disk wins over config data keys
    cfg.finalize();

    GroundingModel model(cfg.model, cfg.train.seed);
    Trainer trainer(model, cfg.train);
    fs::create_directories(out_dir);
    write_text(fs::path(out_dir) / "config.json", cfg.to_json().dump(2) + "\n");
    auto history = trainer.run(corpus, out_dir);
    std::cout << "trained " << cfg.train.epochs << " epochs; final loss "
              << (history.empty() ? 0.0 : history.back().total) << "\n"
              << "checkpoint: " << (fs::path(out_dir) / "checkpoint.slck").string() << "\n";
    return kExitOk;
}

std::vector<Annotation> load_annotations(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw InputError("cannot open annotations: " + path.string());
    std::vector<Annotation> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::exception& e) {
            throw InputError(std::string("bad annotation record: ") + e.what());
        }
        Annotation a;
        a.query_id = rec.at("query_id").get<std::string>();
        a.stream_index = rec.value("stream_index", 0);
        a.split = rec.value("split", "");
        a.tokens = rec.at("tokens").get<std::vector<int>>();
        if (rec.contains("interval")) {
            a.target.start = rec["interval"][0].get<double>();
            a.target.end = rec["interval"][1].get<double>();
        }
        a.second_occurrence = rec.value("ordinal", "first") == std::string("second");
        out.push_back(std::move(a));
    }
    return out;
}

int cmd_stream(const CommonArgs& common, const std::string& checkpoint, const std::string& input,
               const std::string& queries_file, int stream_index, const std::string& output,
               bool realtime, double fps) {
    RunConfig cfg = resolve_config(common);
    auto model = GroundingModel::load_checkpoint(checkpoint);

    MemoryStackConfig mem = cfg.train.memory;
    mem.resolve(model->config().num_scales, nullptr);
    StreamingEngine engine(*model, cfg.engine, mem);

    auto annotations = load_annotations(queries_file);
    int attached = 0;
    for (const auto& a : annotations) {
        if (stream_index >= 0 && a.stream_index != stream_index) continue;
        engine.add_query(QueryTask{a.query_id, a.tokens, a.target});
        ++attached;
    }
    if (attached == 0) throw InputError("no queries matched the requested stream");

    std::istream* in = &std::cin;
    std::ifstream file_in;
    if (input != "-") {
        file_in.open(input);
        if (!file_in) throw InputError("cannot open stream input: " + input);
        in = &file_in;
    }
    std::ofstream out(output);
    if (!out) throw InputError("cannot write emissions: " + output);

    const auto frame_interval = std::chrono::duration<double>(fps > 0.0 ? 1.0 / fps : 0.0);
    auto next_deadline = std::chrono::steady_clock::now();

    std::string line;
    std::int64_t windows_flushed = 0;
    while (std::getline(*in, line)) {
        if (line.empty()) continue;
        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::exception& e) {
            throw InputError(std::string("bad frame record: ") + e.what());
        }
        const auto idx = rec.at("frame_index").get<std::int64_t>();
        const auto feats = rec.at("features").get<std::vector<double>>();
        auto fresh = engine.step(idx, feats);
        if (engine.windows_closed() > windows_flushed) {
            // The online contract: emissions leave the process at every
            // window close.
            for (const auto& p : fresh) out << prediction_to_json(p) << '\n';
            out.flush();
            windows_flushed = engine.windows_closed();
        }
        if (realtime) {
            next_deadline +=
                std::chrono::duration_cast<std::chrono::steady_clock::duration>(frame_interval);
            std::this_thread::sleep_until(next_deadline);
        }
    }
    for (const auto& p : engine.finish()) out << prediction_to_json(p) << '\n';
    out.flush();
    std::cout << "processed " << engine.now() << " frames, " << engine.windows_closed()
              << " windows, " << engine.emissions().size() << " emissions\n";
    return kExitOk;
}

int cmd_eval(const CommonArgs& common, const std::string& emissions_file,
             const std::string& annotations_file, const std::string& out_prefix) {
    RunConfig cfg = resolve_config(common);
    auto annotations = load_annotations(annotations_file);

    std::ifstream is(emissions_file);
    if (!is) throw InputError("cannot open emissions: " + emissions_file);
    std::vector<Prediction> emissions;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        emissions.push_back(prediction_from_json(line));
    }

    MetricReport report = build_report(annotations, emissions, cfg.eval);
    const std::string text = report.to_text();
    std::cout << text;
    if (!out_prefix.empty()) {
        write_text(out_prefix + ".txt", text);
        write_text(out_prefix + ".csv", report.to_csv());
    }
    return kExitOk;
}

struct AblationRow {
    std::string name;
    bool event_memory, dynamic_size, adaptive_update, future_prediction;
};

int cmd_ablate(const CommonArgs& common, const std::string& corpus_dir, const std::string& out_dir) {
    RunConfig base = resolve_config(common);
    Corpus corpus = load_corpus(corpus_dir);
    base.data = corpus.spec;
    base.finalize();
    fs::create_directories(out_dir);

    const std::vector<AblationRow> rows = {
        {"frame_fifo", false, false, false, false},
        {"event_memory", true, false, false, false},
        {"plus_dynamic_size", true, true, false, false},
        {"plus_adaptive_update", true, true, true, false},
        {"plus_future_prediction", true, true, true, true},
    };

    std::ostringstream csv;
    csv << "row,event_memory,dynamic_size,adaptive_update,future_prediction,mode,"
           "r1_05,r1_07,sd,ed,matched_fraction\n";
    for (const auto& row : rows) {
        RunConfig cfg = base;
        cfg.train.memory.frame_fifo = !row.event_memory;
        cfg.train.memory.dynamic_size = row.dynamic_size;
        cfg.train.memory.adaptive_update = row.adaptive_update;
        cfg.engine.future_prediction = row.future_prediction;
        cfg.finalize();

        GroundingModel model(cfg.model, cfg.train.seed);
        Trainer trainer(model, cfg.train);
        auto row_dir = fs::path(out_dir) / row.name;
        trainer.run(corpus, row_dir);
        MetricReport report = trainer.evaluate(corpus.test, cfg.engine, cfg.eval);

        const std::string mode = row.future_prediction ? "F" : "E";
        const auto mit = report.by_mode.find(mode);
        double r105 = 0, r107 = 0, sd = 0, ed = 0, mf = 0;
        if (mit != report.by_mode.end()) {
            const auto& all = mit->second.at("all");
            auto get = [&](int n, double m) {
                auto it = all.recall.find({n, m});
                return it == all.recall.end() ? 0.0 : it->second;
            };
            r105 = get(1, 0.5);
            r107 = get(1, 0.7);
            sd = all.delay.sd_mean;
            ed = all.delay.ed_mean;
            mf = all.delay.matched_fraction;
        }
        csv << row.name << ',' << row.event_memory << ',' << row.dynamic_size << ','
            << row.adaptive_update << ',' << row.future_prediction << ',' << mode << ',' << r105
            << ',' << r107 << ',' << sd << ',' << ed << ',' << mf << '\n';
        std::cout << "ablation row " << row.name << ": R@1,0.5 = " << r105 << " (mode " << mode
                  << ")\n";
    }
    write_text(fs::path(out_dir) / "ablation.csv", csv.str());
    return kExitOk;
}

int cmd_sweep(const CommonArgs& common, const std::string& corpus_dir, const std::string& checkpoint,
              const std::string& out_dir) {
    RunConfig cfg = resolve_config(common);
    Corpus corpus = load_corpus(corpus_dir);
    cfg.data = corpus.spec;
    cfg.finalize();
    fs::create_directories(out_dir);

    TrainConfig sweep_cfg = cfg.train;
    sweep_cfg.epochs = cfg.sweep_epochs;
    auto points = tradeoff_sweep(checkpoint, corpus, parse_sweep_windows(cfg.sweep_windows),
                                 sweep_cfg, cfg.engine);
    const std::string csv = sweep_to_csv(points);
    write_text(fs::path(out_dir) / "sweep.csv", csv);
    std::cout << csv;
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"streamloc: online temporal localization in feature streams"};
    app.require_subcommand(0, 1);

    CommonArgs common;
    bool show_config_help = false;
    app.add_flag("--help-config", show_config_help, "list every config key with its default");

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", common.config_file, "JSON config file");
        cmd->add_option("--set", common.overrides, "override: section.key=value")->take_all();
    };

    std::string out_dir, corpus_dir, checkpoint, input, queries_file, emissions_file, out_prefix,
        output;
    int stream_index = -1;
    bool realtime = false;
    double fps = 30.0;

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic corpus");
    add_common(gen);
    gen->add_option("--out", out_dir, "corpus output directory")->required();

    auto* train = app.add_subcommand("train", "train a model on a corpus");
    add_common(train);
    train->add_option("--corpus", corpus_dir, "corpus directory")->required();
    train->add_option("--out", out_dir, "run output directory")->required();

    auto* stream = app.add_subcommand("stream", "run online inference over a frame stream");
    add_common(stream);
    stream->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    stream->add_option("--input", input, "frame JSONL file, or - for stdin")->required();
    stream->add_option("--queries", queries_file, "annotations JSONL with the queries")->required();
    stream->add_option("--stream-index", stream_index,
                       "only attach queries with this stream_index (-1 = all)");
    stream->add_option("--output", output, "emission JSONL output")->required();
    stream->add_flag("--realtime", realtime, "pace ingestion to a frame rate");
    stream->add_option("--fps", fps, "frame rate for --realtime");

    auto* eval = app.add_subcommand("eval", "score an emission log against annotations");
    add_common(eval);
    eval->add_option("--emissions", emissions_file, "emission JSONL")->required();
    eval->add_option("--annotations", queries_file, "annotations JSONL")->required();
    eval->add_option("--out", out_prefix, "report file prefix (.txt/.csv)");

    auto* ablate = app.add_subcommand("ablate", "train and score the component ablation grid");
    add_common(ablate);
    ablate->add_option("--corpus", corpus_dir, "corpus directory")->required();
    ablate->add_option("--out", out_dir, "output directory")->required();

    auto* sweep = app.add_subcommand("sweep", "accuracy-latency sweep over future windows");
    add_common(sweep);
    sweep->add_option("--corpus", corpus_dir, "corpus directory")->required();
    sweep->add_option("--checkpoint", checkpoint, "base checkpoint")->required();
    sweep->add_option("--out", out_dir, "output directory")->required();

    CLI11_PARSE(app, argc, argv);

    if (show_config_help) {
        std::cout << RunConfig::help_text();
        return kExitOk;
    }
    if (app.get_subcommands().empty()) {
        std::cout << app.help();
        return kExitOk;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(common, out_dir);
        if (train->parsed()) return cmd_train(common, corpus_dir, out_dir);
        if (stream->parsed())
            return cmd_stream(common, checkpoint, input, queries_file, stream_index, output,
                              realtime, fps);
        if (eval->parsed()) return cmd_eval(common, emissions_file, queries_file, out_prefix);
        if (ablate->parsed()) return cmd_ablate(common, corpus_dir, out_dir);
        if (sweep->parsed()) return cmd_sweep(common, corpus_dir, checkpoint, out_dir);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitBadConfig;
    } catch (const CheckpointError& e) {
        std::cerr << "checkpoint error: " << e.what() << "\n";
        return kExitBadCheckpoint;
    } catch (const InputError& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return kExitBadInput;
    } catch (const StreamOrderError& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return kExitBadInput;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailure;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitFailure;
}
