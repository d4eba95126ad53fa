#include "geoformer/error.hpp"
#include "geoformer/mobility.hpp"
#include "support.hpp"

#include <doctest.h>

#include <algorithm>

using namespace geoformer;
using geoformer::testing::TempDir;
using geoformer::testing::write_text;
using geoformer::testing::read_text;

namespace {

std::vector<PingRecord> records_of(std::initializer_list<PingRecord> rs) { return rs; }

HistoryMap histories_of(std::initializer_list<PingRecord> rs, int dow_offset = 0) {
    const auto v = records_of(rs);
    return build_histories(v, dow_offset);
}

} // namespace

TEST_CASE("ingest shifts coordinates to 0-based") {
    TempDir dir("ingest");
    write_text(dir / "a.csv", "uid,d,t,x,y\n0,0,19,130,89\n");
    const auto r = ingest_csv(dir / "a.csv");
    REQUIRE(r.size() == 1);
    CHECK(r[0] == PingRecord{0, 0, 19, 129, 88});
}

TEST_CASE("ingest of a header-only file is empty") {
    TempDir dir("ingest");
    write_text(dir / "a.csv", "uid,d,t,x,y\n");
    CHECK(ingest_csv(dir / "a.csv").empty());
}

TEST_CASE("ingest errors") {
    TempDir dir("ingest");
    SUBCASE("coordinate beyond the grid") {
        write_text(dir / "a.csv", "uid,d,t,x,y\n0,0,19,501,10\n");
        CHECK_THROWS_AS(ingest_csv(dir / "a.csv"), RangeError);
    }
    SUBCASE("coordinate 0 is below the 1-based range") {
        write_text(dir / "a.csv", "uid,d,t,x,y\n0,0,19,0,10\n");
        CHECK_THROWS_AS(ingest_csv(dir / "a.csv"), RangeError);
    }
    SUBCASE("day out of range") {
        write_text(dir / "a.csv", "uid,d,t,x,y\n0,75,19,1,10\n");
        CHECK_THROWS_AS(ingest_csv(dir / "a.csv"), RangeError);
    }
    SUBCASE("malformed row reports its line") {
        write_text(dir / "a.csv", "uid,d,t,x,y\n0,0,1,1,1\n0,0,2,abc,1\n");
        try {
            ingest_csv(dir / "a.csv");
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(e.line() == 3);
        }
    }
    SUBCASE("wrong field count") {
        write_text(dir / "a.csv", "uid,d,t,x,y\n0,0,1,1\n");
        CHECK_THROWS_AS(ingest_csv(dir / "a.csv"), ParseError);
    }
    SUBCASE("bad header") {
        write_text(dir / "a.csv", "uid,day,t,x,y\n");
        CHECK_THROWS_AS(ingest_csv(dir / "a.csv"), ParseError);
    }
    SUBCASE("duplicate key") {
        write_text(dir / "a.csv", "uid,d,t,x,y\n0,0,1,1,1\n0,0,1,2,2\n");
        CHECK_THROWS_AS(ingest_csv(dir / "a.csv"), DuplicateError);
    }
    SUBCASE("missing file") { CHECK_THROWS_AS(ingest_csv(dir / "nope.csv"), Error); }
}

TEST_CASE("ingest sorts rows and round-trips through write_csv") {
    TempDir dir("roundtrip");
    const std::string text = "uid,d,t,x,y\n3,1,0,5,6\n0,2,4,500,1\n0,2,3,1,500\n1,0,47,250,250\n";
    write_text(dir / "a.csv", text);
    const auto r = ingest_csv(dir / "a.csv");
    REQUIRE(r.size() == 4);
    CHECK(std::is_sorted(r.begin(), r.end(), [](const PingRecord& a, const PingRecord& b) {
        return std::tie(a.uid, a.day, a.slot) < std::tie(b.uid, b.day, b.slot);
    }));
    write_csv(dir / "b.csv", r);
    CHECK(ingest_csv(dir / "b.csv") == r);
    // rows come back in key order; the set of lines matches the input
    auto lines = [](const std::string& s) {
        std::vector<std::string> out;
        std::size_t pos = 0;
        while (pos < s.size()) {
            const auto nl = s.find('\n', pos);
            out.push_back(s.substr(pos, nl - pos));
            pos = nl + 1;
        }
        std::sort(out.begin() + 1, out.end());
        return out;
    };
    CHECK(lines(read_text(dir / "b.csv")) == lines(text));
}

TEST_CASE("random records survive a write/ingest round trip") {
    TempDir dir("roundtrip_random");
    Rng rng(11);
    std::vector<PingRecord> recs;
    for (int u = 0; u < 5; ++u)
        for (int d = 0; d < kNumDays; ++d)
            for (int t = 0; t < kSlotsPerDay; ++t)
                if (rng.bernoulli(0.05))
                    recs.push_back({u, d, t, static_cast<int>(rng.below(kGridSize)), static_cast<int>(rng.below(kGridSize))});
    write_csv(dir / "r.csv", recs);
    CHECK(ingest_csv(dir / "r.csv") == recs);
}

TEST_CASE("build_histories places a single record") {
    const auto h = histories_of({{5, 0, 3, 10, 10}}, 6);
    REQUIRE(h.size() == 1);
    const auto& u = h.at(5);
    REQUIRE(u.has_day(0));
    const auto& d = u.day(0);
    CHECK(d.dow == 6);
    CHECK(d.slots[3] == GridCell(10, 10));
    CHECK(d.observed_count() == 1);
}

TEST_CASE("build_histories fills days inside the observed span") {
    const auto h = histories_of({{1, 0, 0, 1, 1}, {1, 2, 5, 2, 2}});
    const auto& u = h.at(1);
    REQUIRE(u.has_day(1));
    CHECK(u.day(1).observed_count() == 0);
    CHECK(u.day(1).dow == 1);
    CHECK_FALSE(u.has_day(3));
    CHECK(u.first_day() == 0);
    CHECK(u.last_day() == 2);
}

TEST_CASE("build_histories of nothing is empty") {
    const std::vector<PingRecord> none;
    CHECK(build_histories(none).empty());
}

TEST_CASE("dow follows the dataset offset") {
    UserHistory h(0, 3);
    for (int d = 0; d < 14; ++d) CHECK(h.dow_of(d) == (d + 3) % 7);
    CHECK_THROWS_AS(UserHistory(0, 7), RangeError);
}

TEST_CASE("domain types are range-checked") {
    CHECK_THROWS_AS(GridCell(500, 0), RangeError);
    CHECK_THROWS_AS(GridCell(0, -1), RangeError);
    CHECK_THROWS_AS(DayTrajectory(7), RangeError);
    CHECK_THROWS_AS(validate(PingRecord{-1, 0, 0, 0, 0}), RangeError);
    CHECK_THROWS_AS(validate(PingRecord{0, 0, 48, 0, 0}), RangeError);
    CHECK_NOTHROW(validate(PingRecord{0, 74, 47, 499, 499}));
}

namespace {

HistoryMap n_users(int n) {
    std::vector<PingRecord> recs;
    for (int u = 0; u < n; ++u) recs.push_back({u, 0, 0, 0, 0});
    return build_histories(recs);
}

} // namespace

TEST_CASE("split_users partitions deterministically") {
    const auto h = n_users(10);
    const auto a = split_users(h, 2, 2, 7);
    CHECK(a.train_uids.size() == 6);
    CHECK(a.val_uids.size() == 2);
    CHECK(a.test_uids.size() == 2);
    std::set<UserId> all;
    for (const auto* s : {&a.train_uids, &a.val_uids, &a.test_uids}) all.insert(s->begin(), s->end());
    CHECK(all.size() == 10);

    const auto b = split_users(h, 2, 2, 7);
    CHECK(a.train_uids == b.train_uids);
    CHECK(a.val_uids == b.val_uids);
    CHECK(a.test_uids == b.test_uids);

    CHECK_THROWS_AS(split_users(n_users(100), 2000, 0, 1), ConfigError);
}

TEST_CASE("split depends only on the uid set, counts and seed") {
    // same uids built from different records
    std::vector<PingRecord> r1, r2;
    for (int u = 0; u < 20; ++u) {
        r1.push_back({u, 0, 0, 0, 0});
        r2.push_back({u, 40, 7, 3, 3});
    }
    const auto a = split_users(build_histories(r1), 3, 4, 99);
    const auto b = split_users(build_histories(r2), 3, 4, 99);
    CHECK(a.val_uids == b.val_uids);
    CHECK(a.test_uids == b.test_uids);
    const auto c = split_users(build_histories(r1), 3, 4, 100);
    CHECK((c.val_uids != a.val_uids || c.test_uids != a.test_uids));
}

TEST_CASE("training views truncate held-out users at the horizon") {
    std::vector<PingRecord> recs;
    for (int u = 0; u < 4; ++u)
        for (int d = 0; d < kNumDays; ++d) recs.push_back({u, d, 0, 1, 1});
    const auto h = build_histories(recs);
    const auto split = split_users(h, 1, 1, 3);
    for (const auto& [uid, hist] : h) {
        const auto view = split.training_view(hist);
        if (split.is_held_out(uid)) {
            CHECK(view.last_day() == 59);
        } else {
            CHECK(view.last_day() == 74);
        }
        CHECK(hist.last_day() == 74); // full history retained
    }
}

TEST_CASE("events_per_slot") {
    SUBCASE("single day") {
        const auto h = histories_of({{0, 0, 0, 1, 1}, {0, 0, 1, 1, 1}});
        const auto v = events_per_slot(h, 0, 1);
        CHECK(v[0] == 1.0);
        CHECK(v[1] == 1.0);
        for (int t = 2; t < kSlotsPerDay; ++t) CHECK(v[t] == 0.0);
    }
    SUBCASE("two identical days give the same vector") {
        const auto one = histories_of({{0, 0, 0, 1, 1}, {0, 0, 1, 1, 1}});
        const auto two = histories_of({{0, 0, 0, 1, 1}, {0, 0, 1, 1, 1}, {0, 1, 0, 1, 1}, {0, 1, 1, 1, 1}});
        CHECK(events_per_slot(one, 0, 1) == events_per_slot(two, 0, 2));
    }
    SUBCASE("empty range") {
        const auto h = histories_of({{0, 0, 0, 1, 1}});
        CHECK_THROWS_AS(events_per_slot(h, 3, 3), RangeError);
    }
    SUBCASE("range mean equals the mean of per-day vectors") {
        Rng rng(5);
        std::vector<PingRecord> recs;
        for (int u = 0; u < 3; ++u)
            for (int d = 0; d < 10; ++d)
                for (int t = 0; t < kSlotsPerDay; ++t)
                    if (rng.bernoulli(0.3)) recs.push_back({u, d, t, 0, 0});
        const auto h = build_histories(recs);
        const auto whole = events_per_slot(h, 0, 10);
        std::array<double, kSlotsPerDay> mean{};
        for (int d = 0; d < 10; ++d) {
            const auto one = events_per_slot(h, d, d + 1);
            for (int t = 0; t < kSlotsPerDay; ++t) mean[t] += one[t] / 10.0;
        }
        for (int t = 0; t < kSlotsPerDay; ++t) CHECK(whole[t] == doctest::Approx(mean[t]).epsilon(1e-12));
    }
}

TEST_CASE("oov_rates examples") {
    SUBCASE("one new x") {
        const auto h = histories_of({{0, 0, 0, 10, 10}, {0, 60, 0, 10, 10}, {0, 60, 1, 11, 10}});
        const auto s = oov_rates(h.at(0), 60);
        CHECK(s.rate_x == 0.5);
        CHECK(s.rate_y == 0.0);
        CHECK(s.rate_xy == 0.5);
    }
    SUBCASE("all repeats") {
        const auto h = histories_of({{0, 0, 0, 10, 10}, {0, 1, 0, 20, 30}, {0, 61, 0, 20, 30}, {0, 62, 0, 10, 10}});
        const auto s = oov_rates(h.at(0), 60);
        CHECK(s.rate_x == 0.0);
        CHECK(s.rate_y == 0.0);
        CHECK(s.rate_xy == 0.0);
    }
    SUBCASE("new y only") {
        const auto h = histories_of({{0, 0, 0, 1, 1}, {0, 60, 0, 1, 2}});
        const auto s = oov_rates(h.at(0), 60);
        CHECK(s.rate_x == 0.0);
        CHECK(s.rate_y == 1.0);
        CHECK(s.rate_xy == 1.0);
    }
    SUBCASE("undefined without post-horizon pings") {
        const auto h = histories_of({{0, 0, 0, 1, 1}});
        CHECK_THROWS_AS(oov_rates(h.at(0), 60), RangeError);
    }
}

TEST_CASE("rate_xy dominates rate_x and rate_y on random histories") {
    Rng rng(21);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<PingRecord> recs;
        const int span = 2 + static_cast<int>(rng.below(8));
        for (int d = 0; d < kNumDays; ++d)
            for (int t = 0; t < kSlotsPerDay; t += 6)
                if (rng.bernoulli(0.3))
                    recs.push_back({0, d, t, 100 + static_cast<int>(rng.below(span)), 200 + static_cast<int>(rng.below(span))});
        const auto h = build_histories(recs);
        const int horizon = 10 + static_cast<int>(rng.below(55));
        try {
            const auto s = oov_rates(h.at(0), horizon);
            CHECK(s.rate_xy >= s.rate_x);
            CHECK(s.rate_xy >= s.rate_y);
        } catch (const RangeError&) {
        }
    }
}
