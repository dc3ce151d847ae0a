#include "streamloc/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "streamloc/errors.hpp"

namespace streamloc {

void TrainConfig::validate() const {
    if (lr <= 0.0) throw ConfigError("train: lr must be positive");
    if (lr_final_fraction <= 0.0 || lr_final_fraction > 1.0)
        throw ConfigError("train: lr_final_fraction must be in (0,1]");
    if (epochs < 1) throw ConfigError("train: epochs must be positive");
    if (clip_norm <= 0.0) throw ConfigError("train: clip_norm must be positive");
    if (accumulate_streams < 1) throw ConfigError("train: accumulate_streams must be positive");
    if (loss.positive_iou <= 0.0 || loss.positive_iou > 1.0)
        throw ConfigError("train: positive_iou must be in (0,1]");
    if (loss.future_hi < loss.future_lo) throw ConfigError("train: future window is empty");
    if (memory.total < 1) throw ConfigError("train: memory total must be positive");
}

StreamReplay replay_stream(const GroundingModel& model, const MemoryStackConfig& mem,
                           const std::vector<std::vector<double>>& frames,
                           const std::vector<QueryTask>& queries) {
    const auto& cfg = model.config();
    StreamPipeline pipeline(model, mem);

    StreamReplay replay;
    replay.per_query.resize(queries.size());

    std::vector<Tensor> query_encodings;
    query_encodings.reserve(queries.size());
    for (const auto& q : queries) query_encodings.push_back(model.encode_query(q.tokens));

    struct Accum {
        std::vector<Tensor> cls, off, flog, foff;
    };
    std::vector<Accum> acc(queries.size());

    const std::size_t total = frames.size();
    std::size_t pos = 0;
    while (pos < total) {
        const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(cfg.window), total - pos);
        Tensor batch({n, cfg.input_dim}, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            if (frames[pos + i].size() != cfg.input_dim)
                throw ShapeError("replay_stream: frame width mismatch");
            std::copy(frames[pos + i].begin(), frames[pos + i].end(),
                      batch.data().begin() + static_cast<long>(i * cfg.input_dim));
        }
        pos += n;

        auto window = pipeline.process_window(batch);
        replay.window_closes.push_back(window.closes_at);

        for (std::size_t qi = 0; qi < queries.size(); ++qi) {
            auto scores = model.score_window(window.refined, query_encodings[qi]);
            auto& sq = replay.per_query[qi];
            for (const auto& p : window.proposals) sq.proposals.push_back(p);
            acc[qi].cls.push_back(scores.cls_logits);
            acc[qi].off.push_back(scores.offsets);
            acc[qi].flog.push_back(scores.future_logit);
            acc[qi].foff.push_back(scores.future_offset);
        }
    }

    auto fold = [](const std::vector<Tensor>& parts) {
        Tensor out = parts.front();
        for (std::size_t i = 1; i < parts.size(); ++i) out = concat_rows(out, parts[i]);
        return out;
    };
    for (std::size_t qi = 0; qi < queries.size(); ++qi) {
        auto& sq = replay.per_query[qi];
        sq.cls_logits = fold(acc[qi].cls);
        sq.offsets = fold(acc[qi].off);
        sq.future_logits = fold(acc[qi].flog);
        sq.future_offsets = fold(acc[qi].foff);
        sq.window_closes = replay.window_closes;
    }
    return replay;
}

Trainer::Trainer(GroundingModel& model, TrainConfig cfg) : model_(model), cfg_(std::move(cfg)) {
    cfg_.validate();
}

void Trainer::fit_memory_sizes(const Corpus& corpus) {
    if (cfg_.memory.frame_fifo) return;
    std::vector<Interval> targets;
    for (const auto& cs : corpus.train)
        for (const auto& a : cs.annotations) targets.push_back(a.target);
    ScaleWeights weights =
        estimate_scale_weights(targets, cfg_.weights_iou, model_.config().num_scales);
    if (!cfg_.memory.dynamic_size) weights.values.assign(weights.values.size(), 1.0);
    cfg_.memory.resolve(model_.config().num_scales, &weights);
}

LossBreakdown Trainer::stream_loss(const CorpusStream& cs) {
    auto queries = to_query_tasks(cs.annotations);
    if (queries.empty()) throw StateError("stream_loss: stream has no queries");
    auto replay = replay_stream(model_, cfg_.memory, cs.stream.frames, queries);

    LossBreakdown total;
    for (std::size_t qi = 0; qi < queries.size(); ++qi) {
        const auto& sq = replay.per_query[qi];
        StreamLabels labels = label_stream(sq, queries[qi].target, cfg_.loss);
        LossBreakdown lb = total_loss(sq, labels, queries[qi].target, cfg_.loss);
        if (qi == 0) {
            total = lb;
        } else {
            total.total = add(total.total, lb.total);
            total.classification = add(total.classification, lb.classification);
            total.regression = add(total.regression, lb.regression);
            total.future = add(total.future, lb.future);
        }
    }
    const double inv = 1.0 / static_cast<double>(queries.size());
    total.total = smul(total.total, inv);
    total.classification = smul(total.classification, inv);
    total.regression = smul(total.regression, inv);
    total.future = smul(total.future, inv);
    return total;
}

double Trainer::current_lr(int epoch_index) const {
    if (cfg_.epochs <= 1) return cfg_.lr;
    const double t = static_cast<double>(epoch_index) / static_cast<double>(cfg_.epochs - 1);
    const double floor = cfg_.lr * cfg_.lr_final_fraction;
    return floor + 0.5 * (cfg_.lr - floor) * (1.0 + std::cos(M_PI * t));
}

EpochMetrics Trainer::train_epoch(const Corpus& corpus, int epoch_index) {
    const auto start = std::chrono::steady_clock::now();
    EpochMetrics metrics;

    std::vector<std::size_t> order(corpus.train.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(Rng::child_seed(cfg_.seed, 0x5EED + static_cast<std::uint64_t>(epoch_index)));
    for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1],
                  order[static_cast<std::size_t>(shuffle_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);

    AdamWConfig adam;
    adam.lr = current_lr(epoch_index);
    adam.weight_decay = cfg_.weight_decay;

    model_.params().set_trainable_prefix(cfg_.train_only_prefix);
    model_.params().zero_grads();
    int accumulated = 0;

    for (std::size_t pos = 0; pos < order.size(); ++pos) {
        const auto& cs = corpus.train[order[pos]];
        LossBreakdown lb = stream_loss(cs);
        const double value = lb.total.item();
        if (!std::isfinite(value)) {
            std::ostringstream os;
            os << "train_epoch: non-finite loss on train stream " << cs.index << " (epoch "
               << epoch_index << ", window count " << cs.stream.frames.size() << ")";
            throw EvalError(os.str());
        }
        metrics.total += value;
        metrics.classification += lb.classification.item();
        metrics.regression += lb.regression.item();
        metrics.future += lb.future.item();

        lb.total.backward();
        if (++accumulated >= cfg_.accumulate_streams || pos + 1 == order.size()) {
            model_.params().clip_grad_norm(cfg_.clip_norm);
            model_.params().adamw_step(adam);
            model_.params().zero_grads();
            accumulated = 0;
        }
    }

    const double inv = corpus.train.empty() ? 0.0 : 1.0 / static_cast<double>(corpus.train.size());
    metrics.total *= inv;
    metrics.classification *= inv;
    metrics.regression *= inv;
    metrics.future *= inv;
    metrics.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return metrics;
}

EpochMetrics Trainer::evaluate_loss(const std::vector<CorpusStream>& streams) {
    NoGradGuard no_grad;
    EpochMetrics metrics;
    for (const auto& cs : streams) {
        LossBreakdown lb = stream_loss(cs);
        metrics.total += lb.total.item();
        metrics.classification += lb.classification.item();
        metrics.regression += lb.regression.item();
        metrics.future += lb.future.item();
    }
    const double inv = streams.empty() ? 0.0 : 1.0 / static_cast<double>(streams.size());
    metrics.total *= inv;
    metrics.classification *= inv;
    metrics.regression *= inv;
    metrics.future *= inv;
    return metrics;
}

std::vector<EpochMetrics> Trainer::run(const Corpus& corpus, const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir);
    fit_memory_sizes(corpus);

    std::ofstream log(out_dir / "train_log.csv");
    log << "epoch,lr,total,classification,regression,future,seconds\n";

    std::vector<EpochMetrics> history;
    for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
        EpochMetrics m = train_epoch(corpus, epoch);
        history.push_back(m);
        log << epoch << ',' << current_lr(epoch) << ',' << m.total << ',' << m.classification << ','
            << m.regression << ',' << m.future << ',' << m.seconds << '\n';
        log.flush();
        if (cfg_.checkpoint_every > 0 && (epoch + 1) % cfg_.checkpoint_every == 0) {
            std::ostringstream name;
            name << "checkpoint_epoch" << (epoch + 1) << ".slck";
            model_.save_checkpoint(out_dir / name.str());
        }
    }
    model_.save_checkpoint(out_dir / "checkpoint.slck");
    return history;
}

MetricReport Trainer::evaluate(const std::vector<CorpusStream>& streams,
                               const EngineConfig& engine_cfg, const EvalOptions& eval_opts) const {
    std::vector<Annotation> annotations;
    std::vector<Prediction> emissions;
    for (const auto& cs : streams) {
        StreamingEngine engine(model_, engine_cfg, cfg_.memory);
        for (const auto& a : cs.annotations) {
            annotations.push_back(a);
            engine.add_query(QueryTask{a.query_id, a.tokens, a.target});
        }
        for (std::size_t t = 0; t < cs.stream.frames.size(); ++t)
            engine.step(static_cast<std::int64_t>(t) + 1, cs.stream.frames[t]);
        engine.finish();
        const auto& log = engine.emissions();
        emissions.insert(emissions.end(), log.begin(), log.end());
    }
    return build_report(annotations, emissions, eval_opts);
}

std::vector<SweepPoint> tradeoff_sweep(const std::filesystem::path& base_checkpoint,
                                       const Corpus& corpus,
                                       const std::vector<std::pair<int, int>>& windows,
                                       TrainConfig cfg, const EngineConfig& engine_cfg) {
    std::vector<SweepPoint> points;
    for (const auto& [lo, hi] : windows) {
        auto model = GroundingModel::load_checkpoint(base_checkpoint);
        cfg.loss.future_lo = lo;
        cfg.loss.future_hi = hi;
        cfg.train_only_prefix = "future.";  // the backbone stays frozen
        Trainer trainer(*model, cfg);
        trainer.fit_memory_sizes(corpus);
        for (int epoch = 0; epoch < cfg.epochs; ++epoch) trainer.train_epoch(corpus, epoch);

        EngineConfig ecfg = engine_cfg;
        MetricReport report = trainer.evaluate(corpus.test, ecfg, EvalOptions{});
        SweepPoint p;
        p.future_lo = lo;
        p.future_hi = hi;
        const auto fit = report.by_mode.find("F");
        if (fit != report.by_mode.end()) {
            const auto& all = fit->second.at("all");
            auto rit = all.recall.find({1, 0.5});
            p.recall_f = rit == all.recall.end() ? 0.0 : rit->second;
            p.sd_mean = all.delay.sd_mean;
            p.matched_fraction = all.delay.matched_fraction;
        }
        points.push_back(p);
    }
    return points;
}

std::string sweep_to_csv(const std::vector<SweepPoint>& points) {
    std::ostringstream os;
    os << "future_lo,future_hi,recall_f_1_0.5,sd_mean,matched_fraction,sd_no_worse_than_prev\n";
    for (std::size_t i = 0; i < points.size(); ++i) {
        const auto& p = points[i];
        // Wider windows should not degrade achievable start delay; flag
        // violations instead of failing (training noise).
        std::string flag = "n/a";
        if (i > 0) {
            const auto& prev = points[i - 1];
            const bool wider = p.future_lo <= prev.future_lo && p.future_hi >= prev.future_hi;
            if (wider) flag = (p.sd_mean <= prev.sd_mean + 1.0) ? "yes" : "violation";
        }
        os << p.future_lo << ',' << p.future_hi << ',' << p.recall_f << ',' << p.sd_mean << ','
           << p.matched_fraction << ',' << flag << '\n';
    }
    return os.str();
}

}  // namespace streamloc
