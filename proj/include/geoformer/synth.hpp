#pragma once

#include "geoformer/mobility.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <optional>
#include <span>
#include <vector>

namespace geoformer {

struct UserAnchors {
    GridCell home{0, 0};
    GridCell work{0, 0};
    GridCell leisure{0, 0};
};

/// Slot-wise observation profile: low at night, high during the day.
std::array<double, kSlotsPerDay> default_observe_profile();

struct SynthConfig {
    int n_users = 200;
    int n_days = kNumDays;
    std::array<double, kSlotsPerDay> p_observe = default_observe_profile();
    /// Multiplies p_observe while the user is at home, so days spent out
    /// produce more pings. 1 makes dropping depend on the slot only.
    double home_observe_scale = 0.6;
    /// Jitter per axis is a rounded normal with sd radius/2, clamped to
    /// [-radius, radius].
    int noise_radius = 2;
    /// Chance that a slot is spent at a random cell near the current anchor.
    double explore_prob = 0.03;
    int explore_radius = 30;
    /// Chance of a weekend outing to the leisure anchor.
    double leisure_prob = 0.5;
    /// Day-to-day shift of departure and return slots, uniform in +-value.
    int routine_variation = 2;
    std::optional<int> emergency_day;
    /// After emergency_day, probability that a day out becomes a day at home.
    double emergency_home_bias = 0.0;
    int dow_offset = 0;
    std::uint64_t seed = 0;
    /// Explicit anchors, one per user; drawn from the seed when empty.
    std::vector<UserAnchors> anchors;

    void validate() const;
};

void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);

/// Anchors for user `uid` when none are given explicitly.
UserAnchors draw_anchors(std::uint64_t seed, UserId uid);

/// Users 0..n_users-1, each generated from its own seed, sorted by
/// (uid, day, slot).
std::vector<PingRecord> generate_synthetic(const SynthConfig& cfg);

/// Pearson correlation between series[0, n-lag) and series[lag, n). 0 when
/// either segment is constant.
double lagged_correlation(std::span<const double> series, int lag);

struct SynthReport {
    std::array<double, kSlotsPerDay> events_per_slot{};
    std::array<double, kNumDays> daily_counts{};
    /// autocorrelation[k] for lags 0..14
    std::vector<double> autocorrelation;
    std::vector<UserId> oov_users;
    std::vector<OovStats> oov;
    OovStats mean_oov;
    int users = 0;
    int first_day = 0;
    int last_day = 0;

    double lag(int k) const { return autocorrelation.at(static_cast<std::size_t>(k)); }
    nlohmann::json to_json() const;
};

/// Users without pings on both sides of the horizon are left out of the
/// OOV arrays.
SynthReport synth_properties_report(std::span<const PingRecord> records, int horizon_day = kDefaultHorizonDay);

} // namespace geoformer
