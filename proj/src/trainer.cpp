#include "geoformer/trainer.hpp"

#include "geoformer/error.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <mutex>
#include <ostream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace geoformer {

std::array<int, kWindowDays> TrainingWindow::days() const {
    std::array<int, kWindowDays> out{};
    for (int i = 0; i < kWindowDays; ++i) out[i] = start_day + i;
    return out;
}

namespace {

void add_user_windows(const UserHistory& view, int day_min, int day_max, std::vector<TrainingWindow>& out) {
    if (view.empty()) return;
    const int lo = std::max(day_min, view.first_day());
    const int hi = std::min(day_max, view.last_day() + 1);
    for (int start = lo; start + kWindowDays <= hi; ++start) {
        bool complete = true;
        for (int d = start; d < start + kWindowDays && complete; ++d) complete = view.has_day(d);
        if (complete) out.push_back({view.uid(), start});
    }
}

} // namespace

std::vector<TrainingWindow> make_windows(const DatasetSplit& split, const HistoryMap& histories, int day_min,
                                         int day_max) {
    if (day_max - day_min < kWindowDays)
        throw ConfigError("day range [" + std::to_string(day_min) + ", " + std::to_string(day_max) +
                          ") is shorter than an 8-day window");
    std::vector<TrainingWindow> out;
    for (const auto& [uid, h] : histories) {
        if (split.is_held_out(uid))
            add_user_windows(split.training_view(h), day_min, day_max, out);
        else
            add_user_windows(h, day_min, day_max, out);
    }
    return out;
}

std::vector<TrainingWindow> make_eval_windows(const DatasetSplit& split, const HistoryMap& histories) {
    std::vector<TrainingWindow> out;
    for (auto uid : split.val_uids) {
        auto it = histories.find(uid);
        if (it == histories.end()) continue;
        add_user_windows(it->second, split.horizon_day - kContextDays, kNumDays, out);
    }
    return out;
}

TrainingData prepare_training_data(const HistoryMap& histories, const DatasetSplit& split, int day_min,
                                   int day_max) {
    TrainingData data;
    for (const auto& [uid, h] : histories) data.train_views.emplace(uid, split.training_view(h));
    data.train_windows = make_windows(split, histories, day_min, day_max);
    for (auto uid : split.val_uids)
        if (auto it = histories.find(uid); it != histories.end()) data.eval_histories.emplace(uid, it->second);
    data.eval_windows = make_eval_windows(split, histories);
    return data;
}

std::vector<int> Batch::targets(bool target_only) const {
    if (target_only) return next_token_targets(ids, batch, seq_len, lengths, sep_positions);
    return next_token_targets(ids, batch, seq_len, lengths);
}

Batch make_batch(std::span<const TrainingWindow> windows, const HistoryMap& histories) {
    if (windows.empty()) throw ConfigError("empty batch");
    std::vector<LinearizedWindow> seqs;
    seqs.reserve(windows.size());
    for (const auto& w : windows) {
        auto it = histories.find(w.uid);
        if (it == histories.end()) throw RangeError("no history for user " + std::to_string(w.uid));
        seqs.push_back(linearize_window(it->second, w.start_day));
    }
    Batch b;
    b.batch = seqs.size();
    for (const auto& s : seqs) b.seq_len = std::max(b.seq_len, s.ids.size());
    b.ids.assign(b.batch * b.seq_len, tok::kEos);
    for (std::size_t i = 0; i < seqs.size(); ++i) {
        std::copy(seqs[i].ids.begin(), seqs[i].ids.end(), b.ids.begin() + static_cast<std::ptrdiff_t>(i * b.seq_len));
        b.lengths.push_back(seqs[i].ids.size());
        b.sep_positions.push_back(seqs[i].sep_pos);
    }
    b.windows.assign(windows.begin(), windows.end());
    return b;
}

TrainState::TrainState(const ModelConfig& cfg, std::uint64_t seed)
    : model(cfg), optimizer(model.params()), rng(mix_seed(seed, 0xD50F)) {}

TrainState::TrainState(const Checkpoint& ckpt, bool with_optimizer)
    : model(ckpt.make_model()), optimizer(model.params()), step(0) {
    if (with_optimizer) {
        ckpt.restore_optimizer(model, optimizer);
        step = ckpt.step;
        if (auto r = ckpt.restore_rng()) rng = *r;
    }
}

Checkpoint TrainState::snapshot(const TrainConfig& tc) const {
    nlohmann::json extra;
    extra["train"] = tc;
    return Checkpoint::capture(model, &optimizer, step, &rng, extra);
}

std::vector<double> TrainResult::eval_trace() const {
    std::vector<double> out;
    for (const auto& p : trace)
        if (p.eval_loss) out.push_back(*p.eval_loss);
    return out;
}

TrainConfig resolve_schedule(const TrainConfig& tc, std::size_t n_windows) {
    TrainConfig out = tc;
    const auto bs = static_cast<std::size_t>(tc.batch_size);
    const auto steps_per_epoch = static_cast<std::int64_t>((n_windows + bs - 1) / bs);
    if (out.total_steps == 0) out.total_steps = static_cast<std::int64_t>(tc.epochs) * steps_per_epoch;
    out.warmup_steps = std::min(out.warmup_steps, out.total_steps);
    return out;
}

double evaluation_loss(const GptModel<float>& model, std::span<const TrainingWindow> windows,
                       const HistoryMap& histories, const TrainConfig& tc) {
    if (windows.empty()) throw ConfigError("no evaluation windows");
    const std::size_t bs = static_cast<std::size_t>(tc.batch_size);
    double total = 0.0;
    std::size_t counted = 0;
    for (std::size_t i = 0; i < windows.size(); i += bs) {
        const auto chunk = windows.subspan(i, std::min(bs, windows.size() - i));
        const Batch b = make_batch(chunk, histories);
        const auto targets = b.targets(tc.target_only_loss);
        const auto n = static_cast<std::size_t>(
            std::count_if(targets.begin(), targets.end(), [](int t) { return t != ag::kIgnoreTarget; }));
        const auto logits = model.forward(nullptr, b.ids, b.batch, b.seq_len, false);
        total += static_cast<double>(next_token_loss<float>(nullptr, logits, targets).item()) * static_cast<double>(n);
        counted += n;
    }
    return total / static_cast<double>(counted);
}

namespace {

std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, std::int64_t epoch) {
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    return perm;
}

void write_log(std::ostream* log, const LossPoint& p) {
    if (!log) return;
    nlohmann::json j{{"step", p.step}, {"lr", p.lr}, {"train_loss", p.train_loss}};
    if (p.eval_loss) j["eval_loss"] = *p.eval_loss;
    *log << j.dump() << '\n';
    log->flush();
}

} // namespace

namespace {

// Attention buffers run to tens of megabytes per step. glibc serves blocks
// that large with fresh mmaps, so every step would page-fault them in again.
void keep_large_blocks_in_heap() {
#if defined(__GLIBC__)
    static std::once_flag once;
    std::call_once(once, [] {
        mallopt(M_MMAP_THRESHOLD, 1 << 30);
        mallopt(M_TRIM_THRESHOLD, 1 << 30);
    });
#endif
}

} // namespace

TrainResult run_training(TrainState& state, const TrainingData& data, const TrainConfig& tc_in,
                         const TrainOptions& opts) {
    tc_in.validate();
    keep_large_blocks_in_heap();
    if (data.train_windows.empty()) throw ConfigError("no training windows");
    const TrainConfig tc = resolve_schedule(tc_in, data.train_windows.size());
    const std::size_t n = data.train_windows.size();
    const std::size_t bs = static_cast<std::size_t>(tc.batch_size);
    const std::int64_t steps_per_epoch = static_cast<std::int64_t>((n + bs - 1) / bs);
    const std::int64_t stop = tc.max_steps > 0 ? std::min(tc.max_steps, tc.total_steps) : tc.total_steps;

    std::vector<TrainingWindow> eval_windows = data.eval_windows;
    if (tc.eval_windows > 0 && eval_windows.size() > static_cast<std::size_t>(tc.eval_windows)) {
        const auto perm = epoch_permutation(eval_windows.size(), mix_seed(tc.seed, 0xE7A1), 0);
        std::vector<TrainingWindow> picked;
        for (int i = 0; i < tc.eval_windows; ++i) picked.push_back(eval_windows[perm[static_cast<std::size_t>(i)]]);
        eval_windows = std::move(picked);
    }

    if (opts.checkpoint_dir) std::filesystem::create_directories(*opts.checkpoint_dir);

    TrainResult result;
    std::int64_t cached_epoch = -1;
    std::vector<std::size_t> perm;
    std::vector<TrainingWindow> chunk;

    while (state.step < stop) {
        const std::int64_t epoch = state.step / steps_per_epoch;
        const std::size_t pos = static_cast<std::size_t>(state.step % steps_per_epoch);
        if (epoch != cached_epoch) {
            perm = epoch_permutation(n, tc.seed, epoch);
            cached_epoch = epoch;
        }
        chunk.clear();
        for (std::size_t i = pos * bs; i < std::min(n, (pos + 1) * bs); ++i) chunk.push_back(data.train_windows[perm[i]]);
        const Batch batch = make_batch(chunk, data.train_views);
        if (opts.batch_observer) opts.batch_observer(batch);

        const auto targets = batch.targets(tc.target_only_loss);
        state.model.zero_grad();
        ag::Tape<float> tape;
        const auto logits = state.model.forward(&tape, batch.ids, batch.batch, batch.seq_len, true, &state.rng);
        const auto loss = next_token_loss(&tape, logits, targets);
        const double loss_value = loss.item();
        if (!std::isfinite(loss_value))
            throw NumericError("loss diverged (" + std::to_string(loss_value) + ") at step " + std::to_string(state.step));
        tape.backward(loss);
        tape.clear();
        clip_gradients(state.model.params(), tc.clip_norm);
        const double lr = lr_at(state.step, tc);
        state.optimizer.step(state.model.params(), tc, lr);
        ++state.step;

        LossPoint point{state.step, lr, loss_value, std::nullopt};
        if (state.step % tc.eval_interval == 0 || state.step == stop) {
            if (!eval_windows.empty()) {
                point.eval_loss = evaluation_loss(state.model, eval_windows, data.eval_histories, tc);
                if (!std::isfinite(*point.eval_loss)) throw NumericError("evaluation loss diverged");
            }
            const double score = point.eval_loss.value_or(loss_value);
            const bool improved = result.best_step < 0 || score < result.best_eval_loss;
            Checkpoint ckpt = state.snapshot(tc);
            std::optional<std::filesystem::path> path;
            if (opts.checkpoint_dir) {
                path = *opts.checkpoint_dir / ("ckpt_step" + std::to_string(state.step) + ".geof");
                save_checkpoint(*path, ckpt);
            }
            if (improved) {
                result.best_step = state.step;
                result.best_eval_loss = score;
                result.best = std::move(ckpt);
                result.best_path = path;
                if (path) {
                    std::ofstream marker(*opts.checkpoint_dir / "best");
                    marker << path->filename().string() << '\n';
                }
            }
        }
        write_log(opts.log, point);
        result.trace.push_back(point);
    }
    return result;
}

TrainConfig finetune_config(const TrainConfig& base) {
    TrainConfig out = base;
    out.warmup_steps = base.warmup_steps / 10;
    return out;
}

TrainState finetune_state(const Checkpoint& ckpt, const TrainConfig& tc) {
    TrainState state(ckpt, false);
    state.rng = Rng(mix_seed(tc.seed, 0xF17E));
    return state;
}

TrainResult finetune(const Checkpoint& ckpt, const TrainingData& data, const TrainConfig& tc,
                     const TrainOptions& opts) {
    TrainState state = finetune_state(ckpt, tc);
    return run_training(state, data, tc, opts);
}

} // namespace geoformer
