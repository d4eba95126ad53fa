#include "geoformer/checkpoint.hpp"
#include "geoformer/generator.hpp"
#include "geoformer/metrics.hpp"
#include "geoformer/synth.hpp"
#include "geoformer/trainer.hpp"
#include "plots.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace geoformer;

namespace {

/// Missing or unreadable config files are usage errors, not runtime ones.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

json load_config(const std::string& path) {
    if (path.empty()) return json::object();
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config file '" + path + "'");
    try {
        json j = json::parse(in);
        if (!j.is_object()) throw UsageError("config file '" + path + "' must hold a JSON object");
        return j;
    } catch (const json::parse_error& e) {
        throw UsageError("config file '" + path + "' is not valid JSON: " + e.what());
    }
}

json section(const json& cfg, const char* key) { return cfg.contains(key) ? cfg.at(key) : json::object(); }

void write_file(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write '" + path.string() + "'");
    out << text;
}

void write_json(const fs::path& path, const json& j) { write_file(path, j.dump(2) + "\n"); }

/// Config file next to a single-file output: data.csv -> data.csv.config.json
fs::path config_beside(const fs::path& out) { return fs::path(out.string() + ".config.json"); }

template <typename T>
void override_if(const std::optional<T>& flag, T& field) {
    if (flag) field = *flag;
}

// ---------------------------------------------------------------- data

struct DataConfig {
    std::string path;
    int horizon = kDefaultHorizonDay;
    int n_val = 10;
    int n_test = 20;
    std::uint64_t split_seed = 0;
    int day_min = 0;
    int day_max = kDefaultHorizonDay;
    int dow_offset = 0;
};

void to_json(json& j, const DataConfig& c) {
    j = {{"path", c.path},       {"horizon", c.horizon}, {"n_val", c.n_val},     {"n_test", c.n_test},
         {"split_seed", c.split_seed}, {"day_min", c.day_min}, {"day_max", c.day_max}, {"dow_offset", c.dow_offset}};
}

void from_json(const json& j, DataConfig& c) {
    DataConfig d;
    c.path = j.value("path", d.path);
    c.horizon = j.value("horizon", d.horizon);
    c.n_val = j.value("n_val", d.n_val);
    c.n_test = j.value("n_test", d.n_test);
    c.split_seed = j.value("split_seed", d.split_seed);
    c.day_min = j.value("day_min", d.day_min);
    c.day_max = j.value("day_max", d.day_max);
    c.dow_offset = j.value("dow_offset", d.dow_offset);
}

struct DataFlags {
    std::optional<std::string> path;
    std::optional<int> horizon, n_val, n_test, day_min, day_max, dow_offset;
    std::optional<std::uint64_t> split_seed;

    void add(CLI::App* app, bool with_days) {
        app->add_option("--data", path, "Ping CSV (uid,d,t,x,y)");
        app->add_option("--horizon", horizon, "First prediction day");
        app->add_option("--n-val", n_val, "Validation users");
        app->add_option("--n-test", n_test, "Test users");
        app->add_option("--split-seed", split_seed, "Seed of the user split");
        app->add_option("--dow-offset", dow_offset, "Weekday of day 0");
        if (with_days) {
            app->add_option("--day-min", day_min, "First training day");
            app->add_option("--day-max", day_max, "One past the last training day");
        }
    }

    DataConfig resolve(const json& cfg) const {
        auto c = section(cfg, "data").get<DataConfig>();
        override_if(path, c.path);
        override_if(horizon, c.horizon);
        override_if(n_val, c.n_val);
        override_if(n_test, c.n_test);
        override_if(split_seed, c.split_seed);
        override_if(day_min, c.day_min);
        override_if(day_max, c.day_max);
        override_if(dow_offset, c.dow_offset);
        if (c.path.empty()) throw UsageError("no data file given (--data or data.path)");
        return c;
    }
};

struct Dataset {
    HistoryMap histories;
    DatasetSplit split;
};

Dataset load_dataset(const DataConfig& dc) {
    Dataset d;
    d.histories = build_histories(ingest_csv(dc.path), dc.dow_offset);
    d.split = split_users(d.histories, dc.n_val, dc.n_test, dc.split_seed, dc.horizon);
    return d;
}

json split_json(const DatasetSplit& s) {
    return {{"horizon", s.horizon_day},
            {"train", std::vector<UserId>(s.train_uids.begin(), s.train_uids.end())},
            {"val", std::vector<UserId>(s.val_uids.begin(), s.val_uids.end())},
            {"test", std::vector<UserId>(s.test_uids.begin(), s.test_uids.end())}};
}

/// Jobs for the chosen users: context before the horizon, signatures and
/// truth read from the days at and after it. Users without pings after the
/// horizon or without a week of history before it are skipped.
struct EvalSet {
    std::vector<PredictionJob> jobs;
    std::vector<PingRecord> truth;
    std::vector<UserId> skipped;
};

EvalSet make_eval_set(const Dataset& d, const std::string& which, int horizon) {
    std::set<UserId> uids;
    if (which == "test")
        uids = d.split.test_uids;
    else if (which == "val")
        uids = d.split.val_uids;
    else if (which == "all")
        for (const auto& [uid, h] : d.histories) uids.insert(uid);
    else
        throw UsageError("--users must be test, val or all");
    EvalSet es;
    for (UserId uid : uids) {
        const auto& full = d.histories.at(uid);
        auto sigs = signatures_from_history(full, horizon);
        bool any = false;
        for (const auto& [day, s] : sigs) any = any || s.predict_count() > 0;
        if (!any || full.first_day() > horizon - kContextDays) {
            es.skipped.push_back(uid);
            continue;
        }
        es.jobs.push_back({full.truncated_before(horizon), std::move(sigs)});
        for (const auto& p : full.pings())
            if (p.day >= horizon) es.truth.push_back(p);
    }
    return es;
}

struct GenFlags {
    std::optional<double> temperature, top_p;
    std::optional<int> top_k, window;
    std::optional<std::uint64_t> seed;
    bool no_roll = false;

    void add(CLI::App* app) {
        app->add_option("--temperature", temperature, "Sampling temperature");
        app->add_option("--top-k", top_k, "Top-k cutoff");
        app->add_option("--top-p", top_p, "Nucleus cutoff");
        app->add_option("--candidate-window", window, "Slot half-width of candidate sets");
        app->add_option("--gen-seed", seed, "Generation seed");
        app->add_flag("--no-roll", no_roll, "Use all-Absent days instead of generated ones as post-horizon context");
    }

    GenConfig resolve(const json& cfg) const {
        auto g = section(cfg, "generate").get<GenConfig>();
        override_if(temperature, g.temperature);
        override_if(top_p, g.top_p);
        override_if(top_k, g.top_k);
        override_if(window, g.candidate_window);
        override_if(seed, g.seed);
        if (no_roll) g.roll = false;
        g.validate();
        return g;
    }
};

struct EvalFlags {
    std::optional<std::string> geobleu_grouping, dtw_grouping;
    std::optional<int> max_n;
    std::optional<double> beta;

    void add(CLI::App* app) {
        app->add_option("--geobleu-grouping", geobleu_grouping, "per_user_day or per_user_trajectory");
        app->add_option("--dtw-grouping", dtw_grouping, "per_user_day or per_user_trajectory");
        app->add_option("--max-n", max_n, "GEO-BLEU n-gram order");
        app->add_option("--beta", beta, "GEO-BLEU distance decay");
    }

    EvalOptions resolve(const json& cfg) const {
        const json e = section(cfg, "evaluate");
        EvalOptions o;
        o.geobleu_grouping = parse_grouping(geobleu_grouping.value_or(e.value("geobleu_grouping", "per_user_day")));
        o.dtw_grouping = parse_grouping(dtw_grouping.value_or(e.value("dtw_grouping", "per_user_trajectory")));
        o.geobleu.max_n = max_n.value_or(e.value("max_n", o.geobleu.max_n));
        o.geobleu.beta = beta.value_or(e.value("beta", o.geobleu.beta));
        o.geobleu.validate();
        return o;
    }
};

json eval_json(const EvalOptions& o) {
    return {{"geobleu_grouping", grouping_name(o.geobleu_grouping)},
            {"dtw_grouping", grouping_name(o.dtw_grouping)},
            {"max_n", o.geobleu.max_n},
            {"beta", o.geobleu.beta}};
}

void print_scores(double geobleu, double dtw_score) {
    std::printf("GEO-BLEU %.6f\nDTW %.6f\n", geobleu, dtw_score);
}

// ---------------------------------------------------------------- subcommands

struct SynthCmd {
    std::string config, out;
    std::optional<int> users, days, emergency_day, dow_offset;
    std::optional<double> emergency_bias;
    std::optional<std::uint64_t> seed;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("synth", "Generate a synthetic ping CSV");
        c->add_option("--config", config, "JSON config (section 'synth')");
        c->add_option("--out", out, "Output CSV")->required();
        c->add_option("--users", users, "Number of users");
        c->add_option("--days", days, "Number of days");
        c->add_option("--seed", seed, "Generator seed");
        c->add_option("--emergency-day", emergency_day, "Day the emergency starts");
        c->add_option("--emergency-bias", emergency_bias, "Chance a day out becomes a day at home");
        c->add_option("--dow-offset", dow_offset, "Weekday of day 0");
        c->callback([this] { run(); });
    }

    void run() {
        auto sc = section(load_config(config), "synth").get<SynthConfig>();
        override_if(users, sc.n_users);
        override_if(days, sc.n_days);
        override_if(seed, sc.seed);
        override_if(dow_offset, sc.dow_offset);
        if (emergency_day) sc.emergency_day = *emergency_day;
        override_if(emergency_bias, sc.emergency_home_bias);
        const auto recs = generate_synthetic(sc);
        write_csv(out, recs);
        write_json(config_beside(out), {{"synth", sc}});
        std::printf("wrote %zu records for %d users to %s\n", recs.size(), sc.n_users, out.c_str());
    }
};

struct EdaCmd {
    std::string data, out_dir;
    int horizon = kDefaultHorizonDay;
    int dow_offset = 0;
    bool vocab = false;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("eda", "Exploratory statistics and plots of a ping CSV");
        c->add_option("--data", data, "Ping CSV")->required();
        c->add_option("--out-dir", out_dir, "Output directory")->required();
        c->add_option("--horizon", horizon, "Split day for out-of-vocabulary rates");
        c->add_option("--dow-offset", dow_offset, "Weekday of day 0");
        c->add_flag("--dump-vocab", vocab, "Also write the token vocabulary as JSON");
        c->callback([this] { run(); });
    }

    void run() {
        const fs::path dir(out_dir);
        fs::create_directories(dir);
        const auto recs = ingest_csv(data);
        const auto report = synth_properties_report(recs, horizon);

        std::ostringstream eps, daily, oov, hist, ac;
        eps << "slot,mean_events\n";
        for (int t = 0; t < kSlotsPerDay; ++t) eps << t << ',' << report.events_per_slot[t] << '\n';
        daily << "day,count\n";
        for (int d = 0; d < kNumDays; ++d) daily << d << ',' << report.daily_counts[d] << '\n';
        oov << "uid,rate_x,rate_y,rate_xy\n";
        for (std::size_t i = 0; i < report.oov.size(); ++i)
            oov << report.oov_users[i] << ',' << report.oov[i].rate_x << ',' << report.oov[i].rate_y << ','
                << report.oov[i].rate_xy << '\n';
        ac << "lag,autocorrelation\n";
        for (std::size_t k = 0; k < report.autocorrelation.size(); ++k) ac << k << ',' << report.autocorrelation[k] << '\n';

        // share of users per 0.1-wide rate bin; a rate of exactly 1 goes in the last bin
        constexpr int kBins = 10;
        std::array<std::vector<double>, 3> bins;
        for (auto& b : bins) b.assign(kBins, 0.0);
        for (const auto& o : report.oov) {
            const double rates[3] = {o.rate_x, o.rate_y, o.rate_xy};
            for (int k = 0; k < 3; ++k) bins[k][std::min(kBins - 1, static_cast<int>(rates[k] * kBins))] += 1.0;
        }
        if (!report.oov.empty())
            for (auto& b : bins)
                for (auto& v : b) v /= static_cast<double>(report.oov.size());
        hist << "bin_lo,bin_hi,share_x,share_y,share_xy\n";
        for (int b = 0; b < kBins; ++b)
            hist << b / 10.0 << ',' << (b + 1) / 10.0 << ',' << bins[0][b] << ',' << bins[1][b] << ',' << bins[2][b]
                 << '\n';

        write_file(dir / "events_per_slot.csv", eps.str());
        write_file(dir / "daily_counts.csv", daily.str());
        write_file(dir / "oov_rates.csv", oov.str());
        write_file(dir / "oov_histogram.csv", hist.str());
        write_file(dir / "autocorrelation.csv", ac.str());

        const std::vector<plots::Series> slot_series{{"mean pings per user-day", report.events_per_slot}};
        write_file(dir / "events_per_slot.svg", plots::svg_lines("Events per slot", "slot", slot_series));
        const std::vector<plots::Series> daily_series{{"pings", report.daily_counts}};
        write_file(dir / "daily_counts.svg", plots::svg_lines("Daily movement count", "day", daily_series));
        const std::vector<plots::Series> oov_series{{"x", bins[0]}, {"y", bins[1]}, {"(x, y)", bins[2]}};
        write_file(dir / "oov_histogram.svg",
                   plots::svg_histogram("Out-of-history coordinate rate after day " + std::to_string(horizon),
                                        oov_series));

        std::string ascii = plots::ascii_bars("events per slot", report.events_per_slot) + "\n" +
                            plots::ascii_bars("daily movement count", report.daily_counts) + "\n" +
                            plots::ascii_bars("share of users per (x, y) out-of-history rate bin (x10)", bins[2]);
        write_file(dir / "plots.txt", ascii);
        std::cout << ascii;

        auto summary = report.to_json();
        summary["records"] = recs.size();
        write_json(dir / "summary.json", summary);
        write_json(dir / "eda_config.json",
                   {{"data", {{"path", data}, {"horizon", horizon}, {"dow_offset", dow_offset}}}});
        if (vocab) write_file(dir / "vocab.json", vocabulary().to_json() + "\n");
        std::printf("lag-1 %.4f lag-7 %.4f mean (x, y) out-of-history rate %.4f over %zu users\n", report.lag(1),
                    report.lag(7), report.mean_oov.rate_xy, report.oov.size());
    }
};

std::string trace_csv(const std::vector<LossPoint>& trace) {
    std::ostringstream o;
    o.precision(10);
    o << "step,lr,train_loss,eval_loss\n";
    for (const auto& p : trace) {
        o << p.step << ',' << p.lr << ',' << p.train_loss << ',';
        if (p.eval_loss) o << *p.eval_loss;
        o << '\n';
    }
    return o.str();
}

struct TrainFlags {
    std::string config, out_dir;
    DataFlags data;
    std::optional<std::int64_t> max_steps, total_steps, warmup;
    std::optional<int> epochs, batch_size, eval_windows;
    std::optional<std::int64_t> eval_interval;
    std::optional<double> lr;
    std::optional<std::uint64_t> seed;
    bool target_only = false;

    void add(CLI::App* c) {
        c->add_option("--config", config, "JSON config (sections data, model, train)");
        c->add_option("--out-dir", out_dir, "Output directory")->required();
        data.add(c, true);
        c->add_option("--max-steps", max_steps, "Stop after this many steps");
        c->add_option("--total-steps", total_steps, "Length of the cosine schedule");
        c->add_option("--warmup", warmup, "Warm-up steps");
        c->add_option("--epochs", epochs, "Epochs when total-steps is 0");
        c->add_option("--batch-size", batch_size, "Windows per batch");
        c->add_option("--eval-interval", eval_interval, "Steps between validation passes");
        c->add_option("--eval-windows", eval_windows, "Validation windows per pass (0 = all)");
        c->add_option("--lr", lr, "Peak learning rate");
        c->add_option("--seed", seed, "Training seed");
        c->add_flag("--target-only", target_only, "Loss on the target day only");
    }

    TrainConfig resolve_train(const json& cfg, const char* key) const {
        auto tc = section(cfg, key).get<TrainConfig>();
        override_if(max_steps, tc.max_steps);
        override_if(total_steps, tc.total_steps);
        override_if(warmup, tc.warmup_steps);
        override_if(epochs, tc.epochs);
        override_if(batch_size, tc.batch_size);
        override_if(eval_interval, tc.eval_interval);
        override_if(eval_windows, tc.eval_windows);
        override_if(lr, tc.lr_max);
        override_if(seed, tc.seed);
        if (target_only) tc.target_only_loss = true;
        return tc;
    }
};

void save_training_outputs(const fs::path& dir, TrainState& state, const TrainResult& res, const TrainConfig& tc,
                           json resolved, const DatasetSplit& split) {
    save_checkpoint(dir / "model.geof", state.snapshot(tc));
    if (res.best) save_checkpoint(dir / "best.geof", *res.best);
    write_file(dir / "loss_trace.csv", trace_csv(res.trace));
    std::vector<double> train, eval;
    for (const auto& p : res.trace) {
        train.push_back(p.train_loss);
        if (p.eval_loss) eval.push_back(*p.eval_loss);
    }
    const std::vector<plots::Series> s{{"train loss", train}};
    write_file(dir / "train_loss.svg", plots::svg_lines("Training loss", "step", s));
    if (!eval.empty()) {
        const std::vector<plots::Series> e{{"evaluation loss", eval}};
        write_file(dir / "eval_loss.svg", plots::svg_lines("Evaluation loss", "evaluation", e));
    }
    write_json(dir / "split.json", split_json(split));
    write_json(dir / "resolved_config.json", resolved);
    std::printf("trained %zu steps; final train loss %.4f", res.trace.size(),
                res.trace.empty() ? 0.0 : res.trace.back().train_loss);
    if (res.best_step >= 0) std::printf("; best eval loss %.4f at step %lld", res.best_eval_loss,
                                        static_cast<long long>(res.best_step));
    std::printf("\n");
}

struct TrainCmd {
    TrainFlags f;
    std::string resume;
    std::optional<int> layers, heads, d_model;
    std::optional<double> dropout;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("train", "Pretrain a model on 8-day windows");
        f.add(c);
        c->add_option("--resume", resume, "Continue from a checkpoint written by train");
        c->add_option("--layers", layers, "Transformer blocks");
        c->add_option("--heads", heads, "Attention heads");
        c->add_option("--d-model", d_model, "Embedding width");
        c->add_option("--dropout", dropout, "Dropout rate");
        c->callback([this] { run(); });
    }

    void run() {
        const json cfg = load_config(f.config);
        const DataConfig dc = f.data.resolve(cfg);
        auto mc = section(cfg, "model").get<ModelConfig>();
        override_if(layers, mc.n_layers);
        override_if(heads, mc.n_heads);
        override_if(d_model, mc.d_model);
        override_if(dropout, mc.dropout_rate);
        const TrainConfig tc = f.resolve_train(cfg, "train");
        if (!f.seed && !section(section(cfg, "model"), "seed").is_number()) mc.seed = tc.seed;
        mc.validate();
        tc.validate();

        const Dataset d = load_dataset(dc);
        const auto data = prepare_training_data(d.histories, d.split, dc.day_min, dc.day_max);
        std::optional<TrainState> state;
        if (resume.empty()) {
            state.emplace(mc, tc.seed);
        } else {
            state.emplace(load_checkpoint(resume), true);
            mc = state->model.config();
        }

        const fs::path dir(f.out_dir);
        fs::create_directories(dir);
        std::ofstream log(dir / "train_log.jsonl", resume.empty() ? std::ios::trunc : std::ios::app);
        TrainOptions opts;
        opts.checkpoint_dir = dir / "checkpoints";
        opts.log = &log;
        std::printf("training on %zu windows from %zu users\n", data.train_windows.size(), data.train_views.size());
        const auto res = run_training(*state, data, tc, opts);
        json resolved = {{"data", dc}, {"model", mc}, {"train", resolve_schedule(tc, data.train_windows.size())}};
        if (!resume.empty()) resolved["resume"] = resume;
        save_training_outputs(dir, *state, res, tc, resolved, d.split);
    }
};

struct FinetuneCmd {
    TrainFlags f;
    std::string ckpt;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("finetune", "Continue training a checkpoint on another day range");
        f.add(c);
        c->add_option("--ckpt", ckpt, "Pretrained checkpoint")->required();
        c->callback([this] { run(); });
    }

    void run() {
        const json cfg = load_config(f.config);
        DataConfig dc = f.data.resolve(cfg);
        // fine-tuning reads the post-horizon range unless told otherwise
        const json fd = section(cfg, "finetune_data");
        if (!f.data.day_min) dc.day_min = fd.value("day_min", dc.horizon);
        if (!f.data.day_max) dc.day_max = fd.value("day_max", kNumDays);
        const json ft = cfg.contains("finetune") ? cfg : json{{"finetune", finetune_config(section(cfg, "train").get<TrainConfig>())}};
        const TrainConfig tc = f.resolve_train(ft, "finetune");
        tc.validate();

        const Dataset d = load_dataset(dc);
        const auto data = prepare_training_data(d.histories, d.split, dc.day_min, dc.day_max);
        const Checkpoint base = load_checkpoint(ckpt);
        const fs::path dir(f.out_dir);
        fs::create_directories(dir);
        std::ofstream log(dir / "train_log.jsonl");
        TrainOptions opts;
        opts.checkpoint_dir = dir / "checkpoints";
        opts.log = &log;
        std::printf("fine-tuning on %zu windows from days [%d, %d)\n", data.train_windows.size(), dc.day_min,
                    dc.day_max);
        TrainState state = finetune_state(base, tc);
        const auto res = run_training(state, data, tc, opts);
        json resolved = {{"data", dc},
                         {"model", base.model},
                         {"finetune", resolve_schedule(tc, data.train_windows.size())},
                         {"base_checkpoint", ckpt}};
        save_training_outputs(dir, state, res, tc, resolved, d.split);
    }
};

struct PredictCmd {
    std::string config, ckpt, out, audit, truth_out, users = "test";
    DataFlags data;
    GenFlags gen;
    int jobs = 1;
    bool baseline = false;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("predict", "Generate the days from the horizon on for held-out users");
        c->add_option("--config", config, "JSON config (sections data, generate)");
        c->add_option("--ckpt", ckpt, "Model checkpoint");
        c->add_option("--out", out, "Prediction CSV")->required();
        c->add_option("--users", users, "Which users: test, val or all");
        c->add_option("--audit", audit, "Write a JSON-lines decoding audit here");
        c->add_option("--truth-out", truth_out, "Also write the matching ground truth CSV");
        c->add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);
        c->add_flag("--baseline", baseline, "Uniform draw from the candidate sets instead of the model");
        data.add(c, false);
        gen.add(c);
        c->callback([this] { run(); });
    }

    void run() {
        const json cfg = load_config(config);
        const DataConfig dc = data.resolve(cfg);
        const GenConfig gc = gen.resolve(cfg);
        if (ckpt.empty() && !baseline) throw UsageError("predict needs --ckpt (or --baseline)");
        const Dataset d = load_dataset(dc);
        const EvalSet es = make_eval_set(d, users, dc.horizon);

        std::vector<PingRecord> pred;
        std::vector<AuditRecord> records;
        if (baseline) {
            for (const auto& j : es.jobs) {
                const auto p = predict_uniform_baseline(j.history, j.signatures, gc.candidate_window,
                                                        mix_seed(gc.seed, static_cast<std::uint64_t>(j.history.uid())));
                pred.insert(pred.end(), p.begin(), p.end());
            }
        } else {
            const auto model = load_checkpoint(ckpt).make_model();
            pred = predict_many(model, es.jobs, gc, jobs, audit.empty() ? nullptr : &records);
        }
        write_csv(out, pred);
        if (!truth_out.empty()) write_csv(truth_out, es.truth);
        if (!audit.empty()) {
            std::ofstream a(audit);
            write_audit_jsonl(a, records);
        }
        write_json(config_beside(out), {{"data", dc},
                                        {"generate", gc},
                                        {"users", users},
                                        {"checkpoint", ckpt},
                                        {"baseline", baseline},
                                        {"jobs", jobs}});
        std::printf("predicted %zu pings for %zu users (%zu skipped)\n", pred.size(), es.jobs.size(),
                    es.skipped.size());
    }
};

struct EvaluateCmd {
    std::string config, pred, truth, out;
    EvalFlags ev;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("evaluate", "Score predictions against ground truth");
        c->add_option("--config", config, "JSON config (section evaluate)");
        c->add_option("--pred", pred, "Prediction CSV")->required();
        c->add_option("--truth", truth, "Ground truth CSV")->required();
        c->add_option("--out", out, "Report JSON");
        ev.add(c);
        c->callback([this] { run(); });
    }

    void run() {
        const json cfg = load_config(config);
        const EvalOptions o = ev.resolve(cfg);
        auto report = evaluate(ingest_csv(pred), ingest_csv(truth), o);
        report.config_echo = {{"pred", pred}, {"truth", truth}, {"evaluate", eval_json(o)}};
        if (!out.empty()) {
            write_json(out, report.to_json());
            write_json(config_beside(out), report.config_echo);
        }
        print_scores(report.mean_geobleu, report.mean_dtw);
    }
};

struct SweepCmd {
    std::string config, ckpt, out_dir, users = "test";
    std::vector<double> temperatures{0.2, 0.6, 1.0};
    std::vector<int> top_ks{5};
    DataFlags data;
    GenFlags gen;
    EvalFlags ev;
    int jobs = 1;

    void add(CLI::App& app) {
        auto* c = cmd_ = app.add_subcommand("sweep", "Score a temperature x top-k grid");
        c->add_option("--config", config, "JSON config (sections data, generate, evaluate, sweep)");
        c->add_option("--ckpt", ckpt, "Model checkpoint")->required();
        c->add_option("--out-dir", out_dir, "Output directory")->required();
        c->add_option("--temperatures", temperatures, "Temperatures")->delimiter(',');
        c->add_option("--top-ks", top_ks, "Top-k values")->delimiter(',');
        c->add_option("--users", users, "Which users: test, val or all");
        c->add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);
        data.add(c, false);
        gen.add(c);
        ev.add(c);
        c->callback([this] { run(); });
    }

    void run() {
        const json cfg = load_config(config);
        const json sw = section(cfg, "sweep");
        if (sw.contains("temperatures") && cmd_->count("--temperatures") == 0) temperatures = sw.at("temperatures").get<std::vector<double>>();
        if (sw.contains("top_ks") && cmd_->count("--top-ks") == 0) top_ks = sw.at("top_ks").get<std::vector<int>>();
        const DataConfig dc = data.resolve(cfg);
        const GenConfig gc = gen.resolve(cfg);
        const EvalOptions o = ev.resolve(cfg);
        const Dataset d = load_dataset(dc);
        const EvalSet es = make_eval_set(d, users, dc.horizon);
        const auto model = load_checkpoint(ckpt).make_model();
        const auto rows = sweep_generation(model, es.jobs, es.truth, temperatures, top_ks, gc, o, jobs);

        const fs::path dir(out_dir);
        std::ostringstream csv;
        write_sweep_csv(csv, rows);
        write_file(dir / "sweep.csv", csv.str());
        write_json(dir / "sweep.json", sweep_to_json(rows));
        write_json(dir / "resolved_config.json", {{"data", dc},
                                                  {"generate", gc},
                                                  {"evaluate", eval_json(o)},
                                                  {"sweep", {{"temperatures", temperatures}, {"top_ks", top_ks}}},
                                                  {"users", users},
                                                  {"checkpoint", ckpt}});
        std::cout << csv.str();
    }

    CLI::App* cmd_ = nullptr;
};

struct InspectCmd {
    std::string ckpt;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("inspect-ckpt", "Verify a checkpoint and print its metadata");
        c->add_option("ckpt", ckpt, "Checkpoint file")->required();
        c->callback([this] { run(); });
    }

    void run() {
        const Checkpoint c = load_checkpoint(ckpt);
        std::size_t params = 0, moments = 0;
        json tensors = json::array();
        for (const auto& t : c.tensors) {
            (t.name.rfind("adam.", 0) == 0 ? moments : params) += t.values.size();
            tensors.push_back({{"name", t.name}, {"dims", t.dims}});
        }
        const json j = {{"file", ckpt},
                        {"version", kCheckpointVersion},
                        {"checksum", "ok"},
                        {"model", c.model},
                        {"step", c.step},
                        {"optimizer_steps", c.optimizer_steps},
                        {"has_rng", !c.rng_state.empty()},
                        {"parameters", params},
                        {"optimizer_values", moments},
                        {"tensors", tensors},
                        {"extra", c.extra}};
        std::cout << j.dump(2) << '\n';
    }
};

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"GeoFormer mobility trajectory toolkit"};
    app.require_subcommand(1);
    SynthCmd synth;
    EdaCmd eda;
    TrainCmd train;
    FinetuneCmd ft;
    PredictCmd predict;
    EvaluateCmd evaluate_cmd;
    SweepCmd sweep;
    InspectCmd inspect;
    synth.add(app);
    eda.add(app);
    train.add(app);
    ft.add(app);
    predict.add(app);
    evaluate_cmd.add(app);
    sweep.add(app);
    inspect.add(app);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        if (app.get_subcommands().empty()) std::cerr << app.help();
        return 1;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const geoformer::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
