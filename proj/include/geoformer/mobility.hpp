#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <vector>

namespace geoformer {

inline constexpr int kGridSize = 500;
inline constexpr int kSlotsPerDay = 48;
inline constexpr int kNumDays = 75;
inline constexpr int kDaysPerWeek = 7;
inline constexpr int kDefaultHorizonDay = 60;

using UserId = std::int64_t;

/// One observation: user `uid` was in cell (x, y) during half-hour `slot` of
/// `day`. Coordinates are 0-based inside the library.
struct PingRecord {
    UserId uid = 0;
    int day = 0;
    int slot = 0;
    int x = 0;
    int y = 0;

    friend bool operator==(const PingRecord&, const PingRecord&) = default;
    friend auto operator<=>(const PingRecord&, const PingRecord&) = default;
};

/// Throws RangeError when any field is outside its documented range.
void validate(const PingRecord& r);

class GridCell {
  public:
    GridCell(int x, int y);

    int x() const { return x_; }
    int y() const { return y_; }

    friend bool operator==(const GridCell&, const GridCell&) = default;
    friend auto operator<=>(const GridCell&, const GridCell&) = default;

  private:
    int x_;
    int y_;
};

using SlotValue = std::optional<GridCell>;

struct DayTrajectory {
    int dow = 0;
    std::array<SlotValue, kSlotsPerDay> slots{};

    DayTrajectory() = default;
    explicit DayTrajectory(int day_of_week);

    int observed_count() const;

    friend bool operator==(const DayTrajectory&, const DayTrajectory&) = default;
};

class UserHistory {
  public:
    UserHistory() = default;
    UserHistory(UserId uid, int dow_offset);

    UserId uid() const { return uid_; }
    int dow_offset() const { return dow_offset_; }
    int dow_of(int day) const { return (day + dow_offset_) % kDaysPerWeek; }

    const std::map<int, DayTrajectory>& days() const { return days_; }
    bool has_day(int day) const { return days_.contains(day); }
    const DayTrajectory& day(int d) const;

    /// Returns the day, creating an all-Absent one if it does not exist yet.
    DayTrajectory& day_mut(int d);

    /// First and last materialized day; the history must be non-empty.
    int first_day() const;
    int last_day() const;
    bool empty() const { return days_.empty(); }

    /// Copy restricted to days strictly before `day`.
    UserHistory truncated_before(int day) const;

    /// All pings in (day, slot) order.
    std::vector<PingRecord> pings() const;

  private:
    UserId uid_ = 0;
    int dow_offset_ = 0;
    std::map<int, DayTrajectory> days_;
};

using HistoryMap = std::map<UserId, UserHistory>;

/// Train/validation/test partition of users.
struct DatasetSplit {
    std::set<UserId> train_uids;
    std::set<UserId> val_uids;
    std::set<UserId> test_uids;
    int horizon_day = kDefaultHorizonDay;

    bool is_held_out(UserId uid) const { return val_uids.contains(uid) || test_uids.contains(uid); }

    /// What training may see of a user: the full history for training users,
    /// days before the horizon for validation and test users.
    UserHistory training_view(const UserHistory& h) const;
};

struct OovStats {
    double rate_x = 0.0;
    double rate_y = 0.0;
    double rate_xy = 0.0;
};

/// Reads `uid,d,t,x,y` rows with 1-based coordinates. The result is 0-based
/// and sorted by (uid, day, slot).
std::vector<PingRecord> ingest_csv(const std::filesystem::path& path);

/// Inverse of ingest_csv: writes the header and 1-based coordinates.
void write_csv(const std::filesystem::path& path, std::span<const PingRecord> records);

/// Groups records per user. Days without pings that fall between a user's
/// first and last observed day are materialized as all-Absent days.
HistoryMap build_histories(std::span<const PingRecord> records, int dow_offset = 0);

DatasetSplit split_users(const HistoryMap& histories, int n_val, int n_test, std::uint64_t seed,
                         int horizon_day = kDefaultHorizonDay);

/// Mean ping count per slot per day over days [day_min, day_max), averaged
/// over all users in `histories`.
std::array<double, kSlotsPerDay> events_per_slot(const HistoryMap& histories, int day_min,
                                                 int day_max);

/// Total ping count per day over all users, indexed by day number.
std::array<double, kNumDays> daily_movement_counts(const HistoryMap& histories);

/// Share of post-horizon pings whose x / y / (x, y) never occurs before the
/// horizon. Throws when either side of the horizon has no pings.
OovStats oov_rates(const UserHistory& history, int horizon_day);

} // namespace geoformer
