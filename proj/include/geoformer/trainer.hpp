#pragma once

#include "geoformer/checkpoint.hpp"
#include "geoformer/linearizer.hpp"
#include "geoformer/mobility.hpp"
#include "geoformer/model.hpp"
#include "geoformer/optim.hpp"

#include <array>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <vector>

namespace geoformer {

/// Eight consecutive days of one user, starting at `start_day`.
struct TrainingWindow {
    UserId uid = 0;
    int start_day = 0;

    std::array<int, kWindowDays> days() const;
    int target_day() const { return start_day + kContextDays; }

    friend bool operator==(const TrainingWindow&, const TrainingWindow&) = default;
};

/// Stride-1 windows lying inside [day_min, day_max) and inside each user's
/// training view, so held-out users only contribute windows that end before
/// the split horizon.
std::vector<TrainingWindow> make_windows(const DatasetSplit& split, const HistoryMap& histories, int day_min,
                                         int day_max);

/// Windows of validation users whose target day is at or after the horizon,
/// read from their full histories. Used only to score validation loss.
std::vector<TrainingWindow> make_eval_windows(const DatasetSplit& split, const HistoryMap& histories);

struct TrainingData {
    HistoryMap train_views;
    std::vector<TrainingWindow> train_windows;
    HistoryMap eval_histories;
    std::vector<TrainingWindow> eval_windows;
};

TrainingData prepare_training_data(const HistoryMap& histories, const DatasetSplit& split, int day_min = 0,
                                   int day_max = kNumDays);

/// A padded batch. Row b holds lengths[b] real tokens followed by padding.
struct Batch {
    std::vector<TokenId> ids;
    std::size_t batch = 0;
    std::size_t seq_len = 0;
    std::vector<std::size_t> lengths;
    std::vector<std::size_t> sep_positions;
    std::vector<TrainingWindow> windows;

    std::vector<int> targets(bool target_only) const;
};

Batch make_batch(std::span<const TrainingWindow> windows, const HistoryMap& histories);

struct TrainState {
    GptModel<float> model;
    AdamW<float> optimizer;
    Rng rng;
    std::int64_t step = 0;

    explicit TrainState(const ModelConfig& cfg, std::uint64_t seed);
    explicit TrainState(const Checkpoint& ckpt, bool with_optimizer = true);

    Checkpoint snapshot(const TrainConfig& tc) const;
};

struct LossPoint {
    std::int64_t step = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    std::optional<double> eval_loss;
};

struct TrainOptions {
    /// Checkpoints go to `<dir>/ckpt_step{N}.geof` plus a `best` marker file.
    std::optional<std::filesystem::path> checkpoint_dir;
    /// JSON-lines loss log.
    std::ostream* log = nullptr;
    /// Sees every batch before it is used; for audits.
    std::function<void(const Batch&)> batch_observer;
};

struct TrainResult {
    std::vector<LossPoint> trace;
    std::int64_t best_step = -1;
    double best_eval_loss = 0.0;
    std::optional<Checkpoint> best;
    std::optional<std::filesystem::path> best_path;

    std::vector<double> eval_trace() const;
};

/// Length of the cosine horizon and the effective config for `n_windows`.
TrainConfig resolve_schedule(const TrainConfig& tc, std::size_t n_windows);

/// Mean next-token loss over `windows` in inference mode.
double evaluation_loss(const GptModel<float>& model, std::span<const TrainingWindow> windows,
                       const HistoryMap& histories, const TrainConfig& tc);

/// Runs the epoch loop from `state.step` until the schedule (or max_steps)
/// is exhausted. Windows are reshuffled every epoch with a permutation that
/// depends only on (seed, epoch), so a run resumed from a checkpoint takes
/// the same batches as an uninterrupted one.
TrainResult run_training(TrainState& state, const TrainingData& data, const TrainConfig& tc,
                         const TrainOptions& opts = {});

/// The fine-tuning config derived from a pretraining config: warm-up ten
/// times shorter, everything else unchanged.
TrainConfig finetune_config(const TrainConfig& base);

/// Weights from `ckpt` with fresh optimizer moments, step 0 and an rng
/// derived from tc.seed.
TrainState finetune_state(const Checkpoint& ckpt, const TrainConfig& tc);

/// Continues training from `ckpt` with fresh optimizer moments and a fresh
/// schedule.
TrainResult finetune(const Checkpoint& ckpt, const TrainingData& data, const TrainConfig& tc,
                     const TrainOptions& opts = {});

} // namespace geoformer
