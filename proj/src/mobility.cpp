#include "geoformer/mobility.hpp"

#include "geoformer/error.hpp"
#include "geoformer/rng.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <string>
#include <string_view>
#include <tuple>

namespace geoformer {

void validate(const PingRecord& r) {
    if (r.uid < 0) throw RangeError("uid must be non-negative, got " + std::to_string(r.uid));
    if (r.day < 0 || r.day >= kNumDays)
        throw RangeError("day " + std::to_string(r.day) + " outside [0, 74]");
    if (r.slot < 0 || r.slot >= kSlotsPerDay)
        throw RangeError("slot " + std::to_string(r.slot) + " outside [0, 47]");
    if (r.x < 0 || r.x >= kGridSize || r.y < 0 || r.y >= kGridSize)
        throw RangeError("cell (" + std::to_string(r.x) + ", " + std::to_string(r.y) +
                         ") outside the 500x500 grid");
}

GridCell::GridCell(int x, int y) : x_(x), y_(y) {
    if (x < 0 || x >= kGridSize || y < 0 || y >= kGridSize)
        throw RangeError("cell (" + std::to_string(x) + ", " + std::to_string(y) +
                         ") outside the 500x500 grid");
}

DayTrajectory::DayTrajectory(int day_of_week) : dow(day_of_week) {
    if (dow < 0 || dow >= kDaysPerWeek)
        throw RangeError("day-of-week " + std::to_string(dow) + " outside [0, 6]");
}

int DayTrajectory::observed_count() const {
    return static_cast<int>(std::count_if(slots.begin(), slots.end(),
                                          [](const SlotValue& s) { return s.has_value(); }));
}

UserHistory::UserHistory(UserId uid, int dow_offset) : uid_(uid), dow_offset_(dow_offset) {
    if (dow_offset < 0 || dow_offset >= kDaysPerWeek)
        throw RangeError("dow_offset " + std::to_string(dow_offset) + " outside [0, 6]");
}

const DayTrajectory& UserHistory::day(int d) const {
    auto it = days_.find(d);
    if (it == days_.end())
        throw RangeError("user " + std::to_string(uid_) + " has no day " + std::to_string(d));
    return it->second;
}

DayTrajectory& UserHistory::day_mut(int d) {
    if (d < 0 || d >= kNumDays) throw RangeError("day " + std::to_string(d) + " outside [0, 74]");
    auto it = days_.find(d);
    if (it == days_.end()) it = days_.emplace(d, DayTrajectory(dow_of(d))).first;
    return it->second;
}

int UserHistory::first_day() const {
    if (days_.empty()) throw RangeError("empty history");
    return days_.begin()->first;
}

int UserHistory::last_day() const {
    if (days_.empty()) throw RangeError("empty history");
    return days_.rbegin()->first;
}

UserHistory UserHistory::truncated_before(int day) const {
    UserHistory out(uid_, dow_offset_);
    for (const auto& [d, traj] : days_) {
        if (d >= day) break;
        out.days_.emplace(d, traj);
    }
    return out;
}

std::vector<PingRecord> UserHistory::pings() const {
    std::vector<PingRecord> out;
    for (const auto& [d, traj] : days_) {
        for (int t = 0; t < kSlotsPerDay; ++t) {
            if (const auto& c = traj.slots[t]) out.push_back({uid_, d, t, c->x(), c->y()});
        }
    }
    return out;
}

UserHistory DatasetSplit::training_view(const UserHistory& h) const {
    if (is_held_out(h.uid())) return h.truncated_before(horizon_day);
    return h;
}

namespace {

std::vector<std::string_view> split_fields(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto comma = line.find(',', start);
        out.push_back(line.substr(start, comma - start));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

std::int64_t parse_int(std::string_view field, std::size_t line) {
    std::int64_t value = 0;
    const auto* end = field.data() + field.size();
    auto [ptr, ec] = std::from_chars(field.data(), end, value);
    if (ec != std::errc{} || ptr != end || field.empty())
        throw ParseError(line, "not an integer: '" + std::string(field) + "'");
    return value;
}

} // namespace

std::vector<PingRecord> ingest_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path.string());

    std::string line;
    if (!std::getline(in, line)) throw ParseError(1, "missing header");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "uid,d,t,x,y") throw ParseError(1, "expected header 'uid,d,t,x,y', got '" + line + "'");

    std::vector<PingRecord> records;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto fields = split_fields(line);
        if (fields.size() != 5)
            throw ParseError(line_no, "expected 5 fields, got " + std::to_string(fields.size()));
        PingRecord r;
        r.uid = parse_int(fields[0], line_no);
        r.day = static_cast<int>(parse_int(fields[1], line_no));
        r.slot = static_cast<int>(parse_int(fields[2], line_no));
        const auto raw_x = parse_int(fields[3], line_no);
        const auto raw_y = parse_int(fields[4], line_no);
        if (raw_x < 1 || raw_x > kGridSize || raw_y < 1 || raw_y > kGridSize)
            throw RangeError("line " + std::to_string(line_no) + ": coordinate (" +
                             std::to_string(raw_x) + ", " + std::to_string(raw_y) +
                             ") outside [1, 500]");
        r.x = static_cast<int>(raw_x) - 1;
        r.y = static_cast<int>(raw_y) - 1;
        try {
            validate(r);
        } catch (const RangeError& e) {
            throw RangeError("line " + std::to_string(line_no) + ": " + e.what());
        }
        records.push_back(r);
    }

    std::sort(records.begin(), records.end(), [](const PingRecord& a, const PingRecord& b) {
        return std::tie(a.uid, a.day, a.slot) < std::tie(b.uid, b.day, b.slot);
    });
    for (std::size_t i = 1; i < records.size(); ++i) {
        const auto& a = records[i - 1];
        const auto& b = records[i];
        if (a.uid == b.uid && a.day == b.day && a.slot == b.slot)
            throw DuplicateError("duplicate ping for uid " + std::to_string(a.uid) + ", day " +
                                 std::to_string(a.day) + ", slot " + std::to_string(a.slot));
    }
    return records;
}

void write_csv(const std::filesystem::path& path, std::span<const PingRecord> records) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out << "uid,d,t,x,y\n";
    for (const auto& r : records)
        out << r.uid << ',' << r.day << ',' << r.slot << ',' << r.x + 1 << ',' << r.y + 1 << '\n';
    if (!out) throw Error("write failed for " + path.string());
}

HistoryMap build_histories(std::span<const PingRecord> records, int dow_offset) {
    HistoryMap out;
    for (const auto& r : records) {
        validate(r);
        auto it = out.find(r.uid);
        if (it == out.end()) it = out.emplace(r.uid, UserHistory(r.uid, dow_offset)).first;
        auto& slot = it->second.day_mut(r.day).slots[r.slot];
        if (slot)
            throw DuplicateError("duplicate ping for uid " + std::to_string(r.uid) + ", day " +
                                 std::to_string(r.day) + ", slot " + std::to_string(r.slot));
        slot = GridCell(r.x, r.y);
    }
    for (auto& [uid, h] : out) {
        const int lo = h.first_day();
        const int hi = h.last_day();
        for (int d = lo; d <= hi; ++d) h.day_mut(d);
    }
    return out;
}

DatasetSplit split_users(const HistoryMap& histories, int n_val, int n_test, std::uint64_t seed,
                         int horizon_day) {
    if (n_val < 0 || n_test < 0) throw ConfigError("n_val and n_test must be non-negative");
    if (static_cast<std::size_t>(n_val) + static_cast<std::size_t>(n_test) > histories.size())
        throw ConfigError("cannot hold out " + std::to_string(n_val) + " + " +
                          std::to_string(n_test) + " users from " +
                          std::to_string(histories.size()));

    std::vector<UserId> uids;
    uids.reserve(histories.size());
    for (const auto& [uid, h] : histories) uids.push_back(uid);

    Rng rng(seed);
    for (std::size_t i = uids.size(); i > 1; --i) std::swap(uids[i - 1], uids[rng.below(i)]);

    DatasetSplit split;
    split.horizon_day = horizon_day;
    for (std::size_t i = 0; i < uids.size(); ++i) {
        if (i < static_cast<std::size_t>(n_val))
            split.val_uids.insert(uids[i]);
        else if (i < static_cast<std::size_t>(n_val + n_test))
            split.test_uids.insert(uids[i]);
        else
            split.train_uids.insert(uids[i]);
    }
    return split;
}

std::array<double, kSlotsPerDay> events_per_slot(const HistoryMap& histories, int day_min,
                                                 int day_max) {
    if (day_max <= day_min) throw RangeError("empty day range");
    std::array<double, kSlotsPerDay> out{};
    if (histories.empty()) return out;
    const double n_days = day_max - day_min;
    for (const auto& [uid, h] : histories) {
        for (const auto& [d, traj] : h.days()) {
            if (d < day_min || d >= day_max) continue;
            for (int t = 0; t < kSlotsPerDay; ++t)
                if (traj.slots[t]) out[t] += 1.0 / n_days;
        }
    }
    for (auto& v : out) v /= static_cast<double>(histories.size());
    return out;
}

std::array<double, kNumDays> daily_movement_counts(const HistoryMap& histories) {
    std::array<double, kNumDays> out{};
    for (const auto& [uid, h] : histories)
        for (const auto& [d, traj] : h.days()) out[d] += traj.observed_count();
    return out;
}

OovStats oov_rates(const UserHistory& history, int horizon_day) {
    std::set<int> seen_x, seen_y;
    std::set<std::pair<int, int>> seen_xy;
    std::vector<GridCell> post;
    for (const auto& [d, traj] : history.days()) {
        for (const auto& s : traj.slots) {
            if (!s) continue;
            if (d < horizon_day) {
                seen_x.insert(s->x());
                seen_y.insert(s->y());
                seen_xy.emplace(s->x(), s->y());
            } else {
                post.push_back(*s);
            }
        }
    }
    if (seen_xy.empty())
        throw RangeError("user " + std::to_string(history.uid()) + " has no pings before day " +
                         std::to_string(horizon_day));
    if (post.empty())
        throw RangeError("user " + std::to_string(history.uid()) + " has no pings from day " +
                         std::to_string(horizon_day) + " on; rates are undefined");

    double nx = 0, ny = 0, nxy = 0;
    for (const auto& c : post) {
        nx += !seen_x.contains(c.x());
        ny += !seen_y.contains(c.y());
        nxy += !seen_xy.contains({c.x(), c.y()});
    }
    const double n = static_cast<double>(post.size());
    return {nx / n, ny / n, nxy / n};
}

} // namespace geoformer
