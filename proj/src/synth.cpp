#include "geoformer/synth.hpp"

#include "geoformer/error.hpp"
#include "geoformer/rng.hpp"

#include <algorithm>
#include <cmath>

namespace geoformer {

std::array<double, kSlotsPerDay> default_observe_profile() {
    std::array<double, kSlotsPerDay> p{};
    for (int t = 0; t < kSlotsPerDay; ++t) {
        // ramps 06:00-07:00 up and 22:00-23:00 down
        double day = 0.0;
        if (t >= 14 && t < 44)
            day = 1.0;
        else if (t >= 12 && t < 14)
            day = (t - 11) / 3.0;
        else if (t >= 44 && t < 46)
            day = (46 - t) / 3.0;
        p[t] = 0.25 + 0.55 * day;
    }
    return p;
}

namespace {

void check_prob(double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string(name) + " must be in [0, 1]");
}

int clamp_grid(int v) { return std::clamp(v, 0, kGridSize - 1); }

GridCell offset_cell(const GridCell& c, int dx, int dy) { return {clamp_grid(c.x() + dx), clamp_grid(c.y() + dy)}; }

GridCell around(Rng& rng, const GridCell& c, double lo, double hi) {
    const double r = lo + (hi - lo) * rng.uniform();
    const double a = 2.0 * M_PI * rng.uniform();
    return offset_cell(c, static_cast<int>(std::lround(r * std::cos(a))), static_cast<int>(std::lround(r * std::sin(a))));
}

int jitter(Rng& rng, int radius) {
    if (radius == 0) return 0;
    const long v = std::lround(rng.normal() * radius / 2.0);
    return static_cast<int>(std::clamp<long>(v, -radius, radius));
}

int vary(Rng& rng, int amount) {
    if (amount == 0) return 0;
    return static_cast<int>(rng.below(static_cast<std::uint64_t>(2 * amount + 1))) - amount;
}

enum class Place { Home, Work, Leisure };

struct Routine {
    int leave = 16;      // weekday departure slot
    int back = 36;       // weekday return slot
    int outing = 22;     // weekend outing start
    int outing_len = 8;
};

} // namespace

void SynthConfig::validate() const {
    if (n_users < 0) throw ConfigError("n_users must be non-negative");
    if (n_days < 1 || n_days > kNumDays) throw ConfigError("n_days must be in [1, 75]");
    for (double p : p_observe) check_prob(p, "p_observe");
    check_prob(home_observe_scale, "home_observe_scale");
    check_prob(explore_prob, "explore_prob");
    check_prob(leisure_prob, "leisure_prob");
    check_prob(emergency_home_bias, "emergency_home_bias");
    if (noise_radius < 0 || noise_radius >= kGridSize) throw ConfigError("noise_radius out of range");
    if (explore_radius < 0 || explore_radius >= kGridSize) throw ConfigError("explore_radius out of range");
    if (routine_variation < 0 || routine_variation > 8) throw ConfigError("routine_variation must be in [0, 8]");
    if (emergency_day && (*emergency_day < 0 || *emergency_day >= kNumDays))
        throw ConfigError("emergency_day must be in [0, 74]");
    if (dow_offset < 0 || dow_offset >= kDaysPerWeek) throw ConfigError("dow_offset must be in [0, 6]");
    if (!anchors.empty() && anchors.size() != static_cast<std::size_t>(n_users))
        throw ConfigError("anchors must list exactly one entry per user");
}

void to_json(nlohmann::json& j, const SynthConfig& c) {
    j = {{"n_users", c.n_users},
         {"n_days", c.n_days},
         {"p_observe", c.p_observe},
         {"home_observe_scale", c.home_observe_scale},
         {"noise_radius", c.noise_radius},
         {"explore_prob", c.explore_prob},
         {"explore_radius", c.explore_radius},
         {"leisure_prob", c.leisure_prob},
         {"routine_variation", c.routine_variation},
         {"emergency_day", c.emergency_day ? nlohmann::json(*c.emergency_day) : nlohmann::json(nullptr)},
         {"emergency_home_bias", c.emergency_home_bias},
         {"dow_offset", c.dow_offset},
         {"seed", c.seed}};
    if (!c.anchors.empty()) {
        auto& a = j["anchors"] = nlohmann::json::array();
        for (const auto& u : c.anchors)
            a.push_back({{"home", {u.home.x(), u.home.y()}},
                         {"work", {u.work.x(), u.work.y()}},
                         {"leisure", {u.leisure.x(), u.leisure.y()}}});
    }
}

void from_json(const nlohmann::json& j, SynthConfig& c) {
    c = SynthConfig{};
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) j.at(key).get_to(field);
    };
    get("n_users", c.n_users);
    get("n_days", c.n_days);
    if (j.contains("p_observe")) {
        const auto& p = j.at("p_observe");
        if (p.is_number())
            c.p_observe.fill(p.get<double>());
        else if (p.is_array() && p.size() == kSlotsPerDay)
            p.get_to(c.p_observe);
        else
            throw ConfigError("p_observe must be a number or an array of 48 numbers");
    }
    get("home_observe_scale", c.home_observe_scale);
    get("noise_radius", c.noise_radius);
    get("explore_prob", c.explore_prob);
    get("explore_radius", c.explore_radius);
    get("leisure_prob", c.leisure_prob);
    get("routine_variation", c.routine_variation);
    if (j.contains("emergency_day") && !j.at("emergency_day").is_null())
        c.emergency_day = j.at("emergency_day").get<int>();
    get("emergency_home_bias", c.emergency_home_bias);
    get("dow_offset", c.dow_offset);
    get("seed", c.seed);
    if (j.contains("anchors")) {
        for (const auto& a : j.at("anchors")) {
            auto cell = [&](const char* k) { return GridCell(a.at(k).at(0).get<int>(), a.at(k).at(1).get<int>()); };
            c.anchors.push_back({cell("home"), cell("work"), cell("leisure")});
        }
    }
}

UserAnchors draw_anchors(std::uint64_t seed, UserId uid) {
    Rng rng(mix_seed(mix_seed(seed, 0xA4C8), static_cast<std::uint64_t>(uid)));
    const int margin = 40;
    const GridCell home(margin + static_cast<int>(rng.below(kGridSize - 2 * margin)),
                        margin + static_cast<int>(rng.below(kGridSize - 2 * margin)));
    const GridCell work = around(rng, home, 15.0, 60.0);
    const GridCell leisure = around(rng, home, 8.0, 40.0);
    return {home, work, leisure};
}

std::vector<PingRecord> generate_synthetic(const SynthConfig& cfg) {
    cfg.validate();
    std::vector<PingRecord> out;
    for (int u = 0; u < cfg.n_users; ++u) {
        const UserId uid = u;
        const UserAnchors anchors = cfg.anchors.empty() ? draw_anchors(cfg.seed, uid) : cfg.anchors[u];
        Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(uid)));

        Routine base;
        base.leave = 14 + static_cast<int>(rng.below(6));
        base.back = 34 + static_cast<int>(rng.below(6));
        base.outing = 20 + static_cast<int>(rng.below(6));
        base.outing_len = 6 + static_cast<int>(rng.below(7));

        for (int d = 0; d < cfg.n_days; ++d) {
            const int dow = (d + cfg.dow_offset) % kDaysPerWeek;
            const bool weekend = dow >= 5;
            const bool emergency = cfg.emergency_day && d >= *cfg.emergency_day;

            std::array<Place, kSlotsPerDay> plan;
            plan.fill(Place::Home);
            if (!weekend) {
                const int leave = base.leave + vary(rng, cfg.routine_variation);
                const int back = base.back + vary(rng, cfg.routine_variation);
                const bool stay = emergency && rng.bernoulli(cfg.emergency_home_bias);
                if (!stay)
                    for (int t = leave; t < back; ++t) plan[t] = Place::Work;
            } else if (rng.bernoulli(cfg.leisure_prob)) {
                const int start = base.outing + vary(rng, cfg.routine_variation);
                const bool stay = emergency && rng.bernoulli(cfg.emergency_home_bias);
                if (!stay)
                    for (int t = start; t < std::min(start + base.outing_len, kSlotsPerDay); ++t)
                        plan[t] = Place::Leisure;
            }

            for (int t = 0; t < kSlotsPerDay; ++t) {
                const GridCell& anchor = plan[t] == Place::Home   ? anchors.home
                                         : plan[t] == Place::Work ? anchors.work
                                                                  : anchors.leisure;
                GridCell cell = anchor;
                if (cfg.explore_prob > 0.0 && rng.bernoulli(cfg.explore_prob))
                    cell = around(rng, anchor, cfg.noise_radius + 1.0, std::max(cfg.explore_radius, cfg.noise_radius + 1));
                const int jx = jitter(rng, cfg.noise_radius);
                const int jy = jitter(rng, cfg.noise_radius);
                cell = offset_cell(cell, jx, jy);

                const double p = cfg.p_observe[t] * (plan[t] == Place::Home ? cfg.home_observe_scale : 1.0);
                // draw even when p is 0 or 1 so the stream does not depend on p
                const bool seen = rng.uniform() < p;
                if (seen) out.push_back({uid, d, t, cell.x(), cell.y()});
            }
        }
    }
    return out;
}

double lagged_correlation(std::span<const double> series, int lag) {
    if (lag < 0) throw RangeError("negative lag");
    const std::size_t n = series.size();
    if (static_cast<std::size_t>(lag) + 2 > n) return 0.0;
    const std::size_t m = n - static_cast<std::size_t>(lag);
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        ma += series[i];
        mb += series[i + lag];
    }
    ma /= static_cast<double>(m);
    mb /= static_cast<double>(m);
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        const double a = series[i] - ma;
        const double b = series[i + lag] - mb;
        sab += a * b;
        saa += a * a;
        sbb += b * b;
    }
    if (saa <= 0.0 || sbb <= 0.0) return 0.0;
    return sab / std::sqrt(saa * sbb);
}

SynthReport synth_properties_report(std::span<const PingRecord> records, int horizon_day) {
    SynthReport r;
    if (records.empty()) return r;
    const HistoryMap histories = build_histories(records);
    r.users = static_cast<int>(histories.size());
    r.first_day = kNumDays;
    r.last_day = 0;
    for (const auto& [uid, h] : histories) {
        r.first_day = std::min(r.first_day, h.first_day());
        r.last_day = std::max(r.last_day, h.last_day());
    }
    r.events_per_slot = events_per_slot(histories, r.first_day, r.last_day + 1);
    r.daily_counts = daily_movement_counts(histories);

    const std::span<const double> active(r.daily_counts.data() + r.first_day,
                                         static_cast<std::size_t>(r.last_day - r.first_day + 1));
    for (int k = 0; k <= 14; ++k) r.autocorrelation.push_back(lagged_correlation(active, k));

    for (const auto& [uid, h] : histories) {
        try {
            r.oov.push_back(oov_rates(h, horizon_day));
            r.oov_users.push_back(uid);
        } catch (const RangeError&) {
            // one side of the horizon is empty
        }
    }
    for (const auto& o : r.oov) {
        r.mean_oov.rate_x += o.rate_x;
        r.mean_oov.rate_y += o.rate_y;
        r.mean_oov.rate_xy += o.rate_xy;
    }
    if (!r.oov.empty()) {
        const double n = static_cast<double>(r.oov.size());
        r.mean_oov.rate_x /= n;
        r.mean_oov.rate_y /= n;
        r.mean_oov.rate_xy /= n;
    }
    return r;
}

nlohmann::json SynthReport::to_json() const {
    nlohmann::json j;
    j["users"] = users;
    j["first_day"] = first_day;
    j["last_day"] = last_day;
    j["events_per_slot"] = events_per_slot;
    j["daily_counts"] = daily_counts;
    j["autocorrelation"] = autocorrelation;
    nlohmann::json rx = nlohmann::json::array(), ry = nlohmann::json::array(), rxy = nlohmann::json::array();
    for (const auto& o : oov) {
        rx.push_back(o.rate_x);
        ry.push_back(o.rate_y);
        rxy.push_back(o.rate_xy);
    }
    j["oov"] = {{"uid", oov_users}, {"rate_x", rx}, {"rate_y", ry}, {"rate_xy", rxy}};
    j["mean_oov"] = {{"rate_x", mean_oov.rate_x}, {"rate_y", mean_oov.rate_y}, {"rate_xy", mean_oov.rate_xy}};
    return j;
}

} // namespace geoformer
