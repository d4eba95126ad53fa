#include "geoformer/synth.hpp"
#include "geoformer/trainer.hpp"
#include "support.hpp"

#include <doctest.h>

#include <fstream>
#include <sstream>

using namespace geoformer;
using geoformer::testing::read_text;
using geoformer::testing::TempDir;

namespace {

ModelConfig tiny_model() {
    ModelConfig c;
    c.n_layers = 1;
    c.n_heads = 2;
    c.d_model = 16;
    c.dropout_rate = 0.1;
    c.seed = 3;
    return c;
}

TrainConfig quick_train(std::int64_t steps) {
    TrainConfig tc;
    tc.lr_max = 3e-3;
    tc.warmup_steps = 2;
    tc.batch_size = 2;
    tc.total_steps = 20;
    tc.max_steps = steps;
    tc.eval_interval = 2;
    tc.eval_windows = 2;
    tc.seed = 11;
    return tc;
}

HistoryMap synthetic_histories(int users, std::uint64_t seed) {
    SynthConfig sc;
    sc.n_users = users;
    sc.seed = seed;
    return build_histories(generate_synthetic(sc));
}

/// Brute force: try every start day and test every constituent day directly.
std::size_t count_windows_brute(const UserHistory& view, int day_min, int day_max) {
    std::size_t n = 0;
    for (int s = -10; s < kNumDays + 10; ++s) {
        bool ok = true;
        for (int d = s; d < s + kWindowDays; ++d) ok = ok && d >= day_min && d < day_max && view.has_day(d);
        n += ok;
    }
    return n;
}

} // namespace

TEST_CASE("window counting examples") {
    UserHistory h(5, 0);
    for (int d = 0; d < 60; ++d) h.day_mut(d);
    HistoryMap hm{{5, h}};
    DatasetSplit split;
    split.train_uids = {5};
    const auto w = make_windows(split, hm, 0, kNumDays);
    // days 0..59 hold 60 - 8 + 1 windows, starts 0..52
    CHECK(w.size() == 53);
    CHECK(w.front().start_day == 0);
    CHECK(w.back().start_day == 52);
    CHECK(w.back().days().back() == 59);

    UserHistory full(6, 0);
    for (int d = 0; d < kNumDays; ++d) full.day_mut(d);
    HistoryMap hf{{6, full}};
    split.train_uids = {6};
    const auto ft = make_windows(split, hf, 60, 75);
    CHECK(ft.size() == 8);
    for (const auto& win : ft) CHECK(win.start_day >= 60);

    CHECK_THROWS_AS(make_windows(split, hf, 60, 67), ConfigError);
}

TEST_CASE("window count matches brute force on random histories") {
    Rng rng(21);
    for (int trial = 0; trial < 40; ++trial) {
        HistoryMap hm;
        DatasetSplit split;
        split.horizon_day = 30 + static_cast<int>(rng.below(40));
        for (UserId uid = 0; uid < 6; ++uid) {
            UserHistory h(uid, 0);
            for (int d = 0; d < kNumDays; ++d)
                if (rng.bernoulli(0.9)) h.day_mut(d);
            hm.emplace(uid, h);
            (uid < 2 ? split.val_uids : (uid < 3 ? split.test_uids : split.train_uids)).insert(uid);
        }
        const int lo = static_cast<int>(rng.below(30));
        const int hi = lo + 8 + static_cast<int>(rng.below(static_cast<std::uint64_t>(kNumDays - lo - 7)));
        const auto windows = make_windows(split, hm, lo, hi);
        std::size_t expected = 0;
        for (const auto& [uid, h] : hm) expected += count_windows_brute(split.training_view(h), lo, hi);
        CHECK(windows.size() == expected);
        for (const auto& w : windows)
            if (split.is_held_out(w.uid)) CHECK(w.days().back() < split.horizon_day);
    }
}

TEST_CASE("make_batch pads with ignored targets") {
    const auto hm = synthetic_histories(3, 1);
    DatasetSplit split;
    for (const auto& [uid, h] : hm) split.train_uids.insert(uid);
    const auto windows = make_windows(split, hm, 0, 20);
    const std::vector<TrainingWindow> pick{windows[0], windows[20]};
    const auto b = make_batch(pick, hm);
    CHECK(b.batch == 2);
    CHECK(b.seq_len == std::max(b.lengths[0], b.lengths[1]));
    const auto targets = b.targets(false);
    for (std::size_t r = 0; r < 2; ++r) {
        const auto lw = linearize_window(hm.at(pick[r].uid), pick[r].start_day);
        CHECK(std::equal(lw.ids.begin(), lw.ids.end(), b.ids.begin() + static_cast<std::ptrdiff_t>(r * b.seq_len)));
        CHECK(b.sep_positions[r] == lw.sep_pos);
        for (std::size_t t = 0; t < b.seq_len; ++t) {
            const int tg = targets[r * b.seq_len + t];
            if (t + 1 < b.lengths[r])
                CHECK(tg == b.ids[r * b.seq_len + t + 1]);
            else
                CHECK(tg == ag::kIgnoreTarget);
        }
        const auto only = b.targets(true);
        for (std::size_t t = 0; t < b.sep_positions[r]; ++t) CHECK(only[r * b.seq_len + t] == ag::kIgnoreTarget);
    }
    CHECK_THROWS_AS(make_batch(std::span<const TrainingWindow>{}, hm), ConfigError);
}

TEST_CASE("resolve_schedule") {
    TrainConfig tc;
    tc.epochs = 3;
    tc.batch_size = 4;
    tc.warmup_steps = 200;
    const auto r = resolve_schedule(tc, 10);
    CHECK(r.total_steps == 9);
    CHECK(r.warmup_steps == 9);
    tc.total_steps = 500;
    CHECK(resolve_schedule(tc, 10).total_steps == 500);
}

TEST_CASE("training: determinism, resume, best selection, logging") {
    const auto hm = synthetic_histories(6, 2);
    const auto split = split_users(hm, 1, 1, 5);
    const auto data = prepare_training_data(hm, split, 0, 30);
    REQUIRE_FALSE(data.train_windows.empty());
    REQUIRE_FALSE(data.eval_windows.empty());

    auto trace_of = [](const TrainResult& r) {
        std::vector<double> v;
        for (const auto& p : r.trace) v.push_back(p.train_loss);
        return v;
    };

    TempDir dir("trainer_run");
    std::ostringstream log;
    TrainOptions opts;
    opts.checkpoint_dir = dir.path();
    opts.log = &log;

    TrainState a(tiny_model(), 7);
    const auto ra = run_training(a, data, quick_train(6), opts);
    TrainState b(tiny_model(), 7);
    const auto rb = run_training(b, data, quick_train(6));

    SUBCASE("identical seeds give identical traces") {
        REQUIRE(ra.trace.size() == 6);
        CHECK(trace_of(ra) == trace_of(rb));
        CHECK(ra.eval_trace() == rb.eval_trace());
    }

    SUBCASE("resume from a checkpoint matches the uninterrupted run") {
        TrainState first(tiny_model(), 7);
        run_training(first, data, quick_train(3));
        save_checkpoint(dir / "mid.geof", first.snapshot(quick_train(3)));
        TrainState resumed(load_checkpoint(dir / "mid.geof"));
        CHECK(resumed.step == 3);
        const auto rest = run_training(resumed, data, quick_train(6));
        REQUIRE(rest.trace.size() == 3);
        for (std::size_t i = 0; i < 3; ++i) {
            CHECK(rest.trace[i].step == ra.trace[i + 3].step);
            CHECK(rest.trace[i].train_loss == ra.trace[i + 3].train_loss);
        }
        for (std::size_t i = 0; i < a.model.params().size(); ++i) {
            const auto x = a.model.params()[i].tensor.data();
            const auto y = resumed.model.params()[i].tensor.data();
            CHECK(std::equal(x.begin(), x.end(), y.begin()));
        }
    }

    SUBCASE("best checkpoint is the argmin of the eval trace") {
        const auto evals = ra.eval_trace();
        REQUIRE(evals.size() == 3);
        const auto it = std::min_element(evals.begin(), evals.end());
        std::vector<std::int64_t> eval_steps;
        for (const auto& p : ra.trace)
            if (p.eval_loss) eval_steps.push_back(p.step);
        CHECK(ra.best_step == eval_steps[static_cast<std::size_t>(it - evals.begin())]);
        CHECK(ra.best_eval_loss == *it);
        REQUIRE(ra.best.has_value());
        CHECK(ra.best->step == ra.best_step);
        // the marker names the best file, and that file loads
        const auto marker = read_text(dir / "best");
        CHECK(marker == "ckpt_step" + std::to_string(ra.best_step) + ".geof\n");
        CHECK(load_checkpoint(dir / ("ckpt_step" + std::to_string(ra.best_step) + ".geof")).step == ra.best_step);
        for (int s : {2, 4, 6}) CHECK(std::filesystem::exists(dir / ("ckpt_step" + std::to_string(s) + ".geof")));
    }

    SUBCASE("JSON-lines log") {
        std::istringstream in(log.str());
        std::string line;
        int lines = 0, with_eval = 0;
        while (std::getline(in, line)) {
            const auto j = nlohmann::json::parse(line);
            CHECK(j.contains("step"));
            CHECK(j.contains("lr"));
            CHECK(j.contains("train_loss"));
            with_eval += j.contains("eval_loss");
            ++lines;
        }
        CHECK(lines == 6);
        CHECK(with_eval == 3);
    }
}

TEST_CASE("leakage guard: held-out users never contribute post-horizon tokens") {
    const auto hm = synthetic_histories(10, 3);
    const auto split = split_users(hm, 2, 2, 9);
    const auto data = prepare_training_data(hm, split, 0, kNumDays);
    TrainConfig tc = quick_train(0);
    tc.batch_size = 8;
    tc.total_steps = static_cast<std::int64_t>((data.train_windows.size() + 7) / 8);
    tc.max_steps = 3;

    std::size_t rows = 0;
    TrainOptions opts;
    opts.batch_observer = [&](const Batch& b) {
        for (std::size_t r = 0; r < b.batch; ++r) {
            const auto& w = b.windows[r];
            ++rows;
            if (!split.is_held_out(w.uid)) continue;
            CHECK(w.days().back() < split.horizon_day);
            // the tokens come from the truncated view, and so cannot carry later days
            const auto lw = linearize_window(split.training_view(hm.at(w.uid)), w.start_day);
            CHECK(std::equal(lw.ids.begin(), lw.ids.end(), b.ids.begin() + static_cast<std::ptrdiff_t>(r * b.seq_len)));
        }
    };
    TrainState st(tiny_model(), 1);
    run_training(st, data, tc, opts);
    CHECK(rows == 24);

    // exhaustive: every window the trainer could ever draw
    for (const auto& w : data.train_windows)
        if (split.is_held_out(w.uid)) CHECK(w.days().back() < split.horizon_day);
    for (const auto& [uid, view] : data.train_views)
        if (split.is_held_out(uid) && !view.empty()) CHECK(view.last_day() < split.horizon_day);
}

TEST_CASE("fine-tuning") {
    const auto hm = synthetic_histories(6, 4);
    const auto split = split_users(hm, 1, 1, 2);
    const auto pre = prepare_training_data(hm, split, 0, 40);
    TrainState st(tiny_model(), 5);
    run_training(st, pre, quick_train(2));
    const auto ckpt = st.snapshot(quick_train(2));

    const auto ft_data = prepare_training_data(hm, split, 60, kNumDays);
    for (const auto& w : ft_data.train_windows) {
        CHECK(w.start_day >= 60);
        CHECK_FALSE(split.is_held_out(w.uid));
    }

    SUBCASE("lr 0 leaves parameters unchanged") {
        auto tc = finetune_config(quick_train(3));
        tc.lr_max = 0.0;
        TrainOptions opts;
        const auto r = finetune(ckpt, ft_data, tc, opts);
        REQUIRE(r.best.has_value());
        const auto after = r.best->make_model();
        for (std::size_t i = 0; i < after.params().size(); ++i) {
            const auto x = after.params()[i].tensor.data();
            const auto y = st.model.params()[i].tensor.data();
            CHECK(std::equal(x.begin(), x.end(), y.begin()));
        }
    }
    SUBCASE("shorter warm-up and fresh optimizer") {
        auto tc = quick_train(1);
        tc.warmup_steps = 200;
        tc.total_steps = 400;
        CHECK(finetune_config(tc).warmup_steps == 20);
        const auto r = finetune(ckpt, ft_data, finetune_config(tc));
        REQUIRE(r.best.has_value());
        CHECK(r.best->optimizer_steps == 1);
        CHECK(r.trace.front().lr == 0.0);
    }
}

TEST_CASE("empty training data is rejected") {
    TrainingData empty;
    TrainState st(tiny_model(), 1);
    CHECK_THROWS_AS(run_training(st, empty, quick_train(1)), ConfigError);
}
