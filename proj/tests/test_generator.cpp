#include "geoformer/generator.hpp"
#include "geoformer/synth.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>
#include <set>
#include <sstream>

using namespace geoformer;

namespace {

GptModel<float> small_model(std::uint64_t seed = 2) {
    ModelConfig c;
    c.n_layers = 1;
    c.n_heads = 2;
    c.d_model = 16;
    c.seed = seed;
    return GptModel<float>(c);
}

bool contains(std::span<const TokenId> s, TokenId t) { return std::find(s.begin(), s.end(), t) != s.end(); }

TargetSignature all_skip(int dow) {
    TargetSignature s;
    s.dow = dow;
    s.slots.fill(SlotFlag::Skip);
    return s;
}

std::vector<float> random_logits(Rng& rng, std::size_t n = tok::kVocabSize) {
    std::vector<float> l(n);
    for (auto& v : l) v = static_cast<float>(rng.normal() * 2);
    return l;
}

/// A user observed on days 0..n-1 with a few pings each, and the matching
/// prediction job for days [horizon, horizon + span).
PredictionJob make_job(UserId uid, int horizon, int span, std::uint64_t seed) {
    SynthConfig sc;
    sc.n_users = 1;
    sc.n_days = kNumDays;
    sc.seed = seed;
    auto recs = generate_synthetic(sc);
    for (auto& r : recs) r.uid = uid;
    const auto hm = build_histories(recs);
    const auto& full = hm.at(uid);
    PredictionJob job;
    job.history = full.truncated_before(horizon);
    for (const auto& [d, sig] : signatures_from_history(full, horizon))
        if (d < horizon + span) job.signatures.emplace(d, sig);
    return job;
}

} // namespace

TEST_CASE("GenConfig validation and JSON") {
    GenConfig c;
    CHECK(c.temperature == 1.0);
    CHECK(c.top_k == 5);
    CHECK(c.top_p == 1.0);
    CHECK(c.candidate_window == 2);
    CHECK_NOTHROW(c.validate());
    c.temperature = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = GenConfig{};
    c.top_k = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = GenConfig{};
    c.top_p = 1.5;
    CHECK_THROWS_AS(c.validate(), ConfigError);

    GenConfig custom;
    custom.temperature = 0.6;
    custom.top_k = 3;
    custom.roll = false;
    const nlohmann::json j = custom;
    const auto back = j.get<GenConfig>();
    CHECK(back.temperature == 0.6);
    CHECK(back.top_k == 3);
    CHECK_FALSE(back.roll);
}

TEST_CASE("candidate index examples") {
    // dow offset chosen so that day 12 is a dow-5 day
    UserHistory h(1, 0);
    for (int d = 0; d < 14; ++d) h.day_mut(d);
    h.day_mut(5).slots[12] = GridCell(129, 88);
    REQUIRE(h.dow_of(5) == 5);
    const auto idx = CandidateIndex::build(h, 14);

    SUBCASE("single ping spreads over slots 10..14 of its dow") {
        for (int t = 0; t < kSlotsPerDay; ++t) {
            const auto xs = idx.tier_set(Axis::X, FallbackTier::SlotWindow, 5, t);
            const auto ys = idx.tier_set(Axis::Y, FallbackTier::SlotWindow, 5, t);
            if (t >= 10 && t <= 14) {
                CHECK(xs.size() == 1);
                CHECK(xs[0] == vocabulary().id("x129"));
                CHECK(ys[0] == vocabulary().id("y088"));
            } else {
                CHECK(xs.empty());
                CHECK(ys.empty());
            }
        }
    }
    SUBCASE("other dows are empty at the slot tier") {
        for (int w = 0; w < kDaysPerWeek; ++w)
            if (w != 5)
                for (int t = 0; t < kSlotsPerDay; ++t) CHECK(idx.tier_set(Axis::X, FallbackTier::SlotWindow, w, t).empty());
    }
    SUBCASE("fallback tiers") {
        const auto at_slot = idx.resolve(Axis::X, 5, 12);
        CHECK(at_slot.tier == FallbackTier::SlotWindow);
        const auto same_dow = idx.resolve(Axis::X, 5, 30);
        CHECK(same_dow.tier == FallbackTier::DayOfWeek);
        CHECK(same_dow.tokens.size() == 1);
        const auto other = idx.resolve(Axis::Y, 2, 30);
        CHECK(other.tier == FallbackTier::History);
        CHECK(other.tokens[0] == vocabulary().id("y088"));
        UserHistory empty(2, 0);
        for (int d = 0; d < 10; ++d) empty.day_mut(d);
        const auto none = CandidateIndex::build(empty, 10).resolve(Axis::Y, 0, 0);
        CHECK(none.tier == FallbackTier::Unconstrained);
        CHECK(none.tokens.size() == kGridSize);
        for (auto t : none.tokens) CHECK(tok::is_y(t));
    }
    SUBCASE("window clamps at slot 0") {
        UserHistory e(3, 0);
        for (int d = 0; d < 7; ++d) e.day_mut(d);
        e.day_mut(0).slots[0] = GridCell(1, 2);
        e.day_mut(0).slots[3] = GridCell(3, 4);
        const auto i = CandidateIndex::build(e, 7);
        CHECK(i.tier_set(Axis::X, FallbackTier::SlotWindow, 0, 0).size() == 1);
        CHECK(i.tier_set(Axis::X, FallbackTier::SlotWindow, 0, 1).size() == 2);
        CHECK(i.tier_set(Axis::X, FallbackTier::SlotWindow, 0, 2).size() == 2);
        CHECK(i.tier_set(Axis::X, FallbackTier::SlotWindow, 0, 6).empty());
    }
    SUBCASE("only pre-horizon pings count") {
        UserHistory late(4, 0);
        for (int d = 0; d < 20; ++d) late.day_mut(d);
        late.day_mut(15).slots[20] = GridCell(7, 7);
        const auto i = CandidateIndex::build(late, 15);
        CHECK(i.resolve(Axis::X, late.dow_of(15), 20).tier == FallbackTier::Unconstrained);
    }
}

TEST_CASE("candidate sets against a brute-force oracle") {
    Rng rng(40);
    UserHistory h(9, 3);
    for (int d = 0; d < 30; ++d) {
        auto& day = h.day_mut(d);
        for (auto& s : day.slots)
            if (rng.bernoulli(0.1)) s = GridCell(static_cast<int>(rng.below(20)), static_cast<int>(rng.below(20)));
    }
    const int horizon = 25;
    const auto idx = CandidateIndex::build(h, horizon);
    for (int w = 0; w < kDaysPerWeek; ++w)
        for (int t = 0; t < kSlotsPerDay; ++t) {
            std::set<TokenId> xs, ys;
            for (int d = 0; d < horizon; ++d) {
                if (h.dow_of(d) != w) continue;
                for (int u = std::max(0, t - 2); u <= std::min(47, t + 2); ++u)
                    if (const auto& c = h.day(d).slots[u]) {
                        xs.insert(tok::x(c->x()));
                        ys.insert(tok::y(c->y()));
                    }
            }
            const auto gx = idx.tier_set(Axis::X, FallbackTier::SlotWindow, w, t);
            const auto gy = idx.tier_set(Axis::Y, FallbackTier::SlotWindow, w, t);
            CHECK(std::set<TokenId>(gx.begin(), gx.end()) == xs);
            CHECK(std::set<TokenId>(gy.begin(), gy.end()) == ys);
        }
}

TEST_CASE("sample_token") {
    Rng rng(41);
    const auto logits = random_logits(rng);
    const auto argmax = static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());

    SUBCASE("near-zero temperature is greedy") {
        GenConfig c;
        c.temperature = 1e-4;
        c.top_k = 1021;
        for (int i = 0; i < 50; ++i) CHECK(sample_token(logits, c, std::nullopt, rng).token == argmax);
    }
    SUBCASE("top_k 1 is greedy at any temperature") {
        GenConfig c;
        c.top_k = 1;
        c.temperature = 5.0;
        for (int i = 0; i < 50; ++i) CHECK(sample_token(logits, c, std::nullopt, rng).token == argmax);
    }
    SUBCASE("greedy within the allowed set") {
        GenConfig c;
        c.top_k = 1;
        const std::vector<TokenId> allowed{30, 40, 50};
        TokenId best = 30;
        for (auto t : allowed)
            if (logits[static_cast<std::size_t>(t)] > logits[static_cast<std::size_t>(best)]) best = t;
        CHECK(sample_token(logits, c, std::span<const TokenId>(allowed), rng).token == best);
    }
    SUBCASE("a single allowed token has probability 1") {
        const std::vector<TokenId> one{777};
        const auto s = sample_token(logits, GenConfig{}, std::span<const TokenId>(one), rng);
        CHECK(s.token == 777);
        CHECK(s.probability == 1.0);
        CHECK(s.support == 1);
    }
    SUBCASE("all allowed logits -inf") {
        auto l = logits;
        l[5] = -std::numeric_limits<float>::infinity();
        const std::vector<TokenId> only{5};
        CHECK_THROWS_AS(sample_token(l, GenConfig{}, std::span<const TokenId>(only), rng), DecodeError);
    }
    SUBCASE("empirical frequencies follow the tempered softmax") {
        std::vector<float> l(8, 0.0f);
        l[1] = 1.0f;
        l[2] = 2.0f;
        GenConfig c;
        c.top_k = 3;
        c.temperature = 0.5;
        const std::vector<TokenId> allowed{0, 1, 2};
        std::array<int, 3> counts{};
        const int n = 40000;
        for (int i = 0; i < n; ++i) ++counts[static_cast<std::size_t>(sample_token(l, c, std::span<const TokenId>(allowed), rng).token)];
        const double z = 1 + std::exp(2.0) + std::exp(4.0);
        CHECK(counts[0] / double(n) == doctest::Approx(1 / z).epsilon(0.1));
        CHECK(counts[2] / double(n) == doctest::Approx(std::exp(4.0) / z).epsilon(0.02));
    }
    SUBCASE("top_p keeps the smallest covering prefix") {
        std::vector<float> l{std::log(0.5f), std::log(0.3f), std::log(0.2f)};
        GenConfig c;
        c.top_k = 3;
        c.top_p = 0.7;
        CHECK(reachable_tokens(l, c, std::nullopt) == std::vector<TokenId>{0, 1});
        c.top_p = 0.5;
        CHECK(reachable_tokens(l, c, std::nullopt) == std::vector<TokenId>{0});
        c.top_p = 1.0;
        CHECK(reachable_tokens(l, c, std::nullopt).size() == 3);
    }
}

TEST_CASE("reachable sets grow monotonically with top_k") {
    Rng rng(42);
    for (int trial = 0; trial < 30; ++trial) {
        const auto logits = random_logits(rng);
        std::vector<TokenId> allowed;
        for (TokenId t = tok::kX0; t < tok::kX0 + kGridSize; ++t)
            if (rng.bernoulli(0.05)) allowed.push_back(t);
        if (allowed.empty()) allowed.push_back(tok::kX0);
        GenConfig c;
        c.temperature = 0.2 + rng.uniform();
        std::vector<TokenId> prev;
        for (int k = 1; k <= 30; ++k) {
            c.top_k = k;
            const auto r = reachable_tokens(logits, c, std::span<const TokenId>(allowed));
            CHECK(std::includes(r.begin(), r.end(), prev.begin(), prev.end()));
            for (auto t : r) CHECK(contains(allowed, t));
            CHECK(r.size() <= static_cast<std::size_t>(k));
            prev = r;
        }
    }
}

TEST_CASE("generate_day") {
    const auto model = small_model();
    UserHistory h(12, 0);
    for (int d = 0; d < 7; ++d) h.day_mut(d);
    h.day_mut(2).slots[10] = GridCell(40, 41);
    std::vector<DayTrajectory> ctx_days;
    for (int d = 0; d < 7; ++d) ctx_days.push_back(h.day(d));
    const auto ctx = linearize_context(12, ctx_days);
    const auto idx = CandidateIndex::build(h, 7);

    SUBCASE("all-Skip signature draws nothing") {
        Rng rng(1);
        const Rng before = rng;
        std::vector<AuditRecord> audit;
        const auto day = generate_day(model, ctx, all_skip(0), idx, GenConfig{}, rng, &audit);
        CHECK(day.observed_count() == 0);
        CHECK(day.dow == 0);
        CHECK(audit.empty());
        CHECK(rng == before);
    }
    SUBCASE("singleton candidates make the output seed-independent") {
        auto sig = all_skip(2);
        sig.slots[10] = SlotFlag::Predict;
        sig.slots[11] = SlotFlag::Predict;
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            Rng rng(seed);
            GenConfig c;
            c.temperature = 3.0;
            const auto day = generate_day(model, ctx, sig, idx, c, rng);
            CHECK(day.slots[10] == GridCell(40, 41));
            CHECK(day.slots[11] == GridCell(40, 41));
            CHECK(day.observed_count() == 2);
        }
    }
    SUBCASE("signature compliance and audit") {
        Rng rng(2);
        TargetSignature sig;
        sig.dow = 4;
        for (auto& s : sig.slots) s = rng.bernoulli(0.5) ? SlotFlag::Predict : SlotFlag::Skip;
        std::vector<AuditRecord> audit;
        const auto day = generate_day(model, ctx, sig, idx, GenConfig{}, rng, &audit, 12, 7);
        CHECK(signature_from_day(day) == sig);
        CHECK(audit.size() == 2 * static_cast<std::size_t>(sig.predict_count()));
        for (const auto& a : audit) {
            CHECK(a.in_candidates);
            CHECK(a.uid == 12);
            CHECK(a.day == 7);
            CHECK(a.tier == FallbackTier::History);
        }
    }
    SUBCASE("context must end with <|sep|>") {
        Rng rng(3);
        std::vector<TokenId> bad(ctx.begin(), ctx.end() - 1);
        CHECK_THROWS_AS(generate_day(model, bad, all_skip(0), idx, GenConfig{}, rng), DecodeError);
    }
    SUBCASE("context overflow") {
        Rng rng(4);
        std::vector<TokenId> huge(1000, tok::kEmpty);
        huge.push_back(tok::kSep);
        auto sig = all_skip(0);
        for (int t = 0; t < 20; ++t) sig.slots[t] = SlotFlag::Predict;
        CHECK_THROWS_AS(generate_day(model, huge, sig, idx, GenConfig{}, rng), RangeError);
    }
}

TEST_CASE("generation is output-equivalent to full recomputation") {
    const auto model = small_model(5);
    auto job = make_job(3, 14, 1, 8);
    std::vector<DayTrajectory> ctx_days;
    for (int d = 7; d < 14; ++d) ctx_days.push_back(job.history.has_day(d) ? job.history.day(d) : DayTrajectory(d % 7));
    const auto ctx = linearize_context(3, ctx_days);
    const auto idx = CandidateIndex::build(job.history, 14);
    const auto& sig = job.signatures.at(14);
    GenConfig c;
    c.top_k = 1;
    Rng rng(0);
    const auto day = generate_day(model, ctx, sig, idx, c, rng);

    // greedy decode again, recomputing the whole sequence for every token
    std::vector<TokenId> seq(ctx.begin(), ctx.end());
    seq.push_back(tok::dow(sig.dow));
    for (int t = 0; t < kSlotsPerDay; ++t) {
        if (sig.slots[t] == SlotFlag::Skip) {
            seq.push_back(tok::kEmpty);
            continue;
        }
        for (auto axis : {Axis::X, Axis::Y}) {
            const auto logits = model.forward(nullptr, seq, 1, seq.size());
            const auto last = logits.data().subspan((seq.size() - 1) * tok::kVocabSize, tok::kVocabSize);
            const auto allowed = idx.resolve(axis, sig.dow, t).tokens;
            TokenId best = allowed[0];
            for (auto a : allowed)
                if (last[static_cast<std::size_t>(a)] > last[static_cast<std::size_t>(best)]) best = a;
            seq.push_back(best);
        }
        const auto x = seq[seq.size() - 2], y = seq.back();
        CHECK(day.slots[t] == GridCell(tok::x_value(x), tok::y_value(y)));
    }
}

TEST_CASE("predict_horizon") {
    const auto model = small_model(6);
    auto job = make_job(77, 60, 15, 9);

    SUBCASE("output matches the Predict flags and constraints") {
        std::vector<AuditRecord> audit;
        GenConfig c;
        c.seed = 5;
        const auto pred = predict_horizon(model, job.history, job.signatures, c, &audit);
        int flags = 0;
        for (const auto& [d, s] : job.signatures) flags += s.predict_count();
        CHECK(pred.size() == static_cast<std::size_t>(flags));
        CHECK(audit.size() == 2 * pred.size());
        for (const auto& a : audit) CHECK(a.in_candidates);
        for (const auto& p : pred) {
            CHECK(p.uid == 77);
            CHECK(job.signatures.at(p.day).slots[p.slot] == SlotFlag::Predict);
        }
        // deterministic
        CHECK(predict_horizon(model, job.history, job.signatures, c) == pred);
    }
    SUBCASE("all-Skip signatures give an empty prediction") {
        auto sigs = job.signatures;
        for (auto& [d, s] : sigs) s.slots.fill(SlotFlag::Skip);
        CHECK(predict_horizon(model, job.history, sigs, GenConfig{}).empty());
    }
    SUBCASE("no-roll changes only the context") {
        GenConfig c;
        c.roll = false;
        c.top_k = 1;
        const auto pred = predict_horizon(model, job.history, job.signatures, c);
        int flags = 0;
        for (const auto& [d, s] : job.signatures) flags += s.predict_count();
        CHECK(pred.size() == static_cast<std::size_t>(flags));
    }
    SUBCASE("too little context") {
        auto short_job = make_job(5, 6, 3, 1);
        CHECK_THROWS_AS(predict_horizon(model, short_job.history, short_job.signatures, GenConfig{}), RangeError);
    }
    SUBCASE("audit JSON lines") {
        std::vector<AuditRecord> audit;
        predict_horizon(model, job.history, job.signatures, GenConfig{}, &audit);
        std::ostringstream out;
        write_audit_jsonl(out, audit);
        std::istringstream in(out.str());
        std::string line;
        std::size_t n = 0;
        while (std::getline(in, line)) {
            const auto j = nlohmann::json::parse(line);
            CHECK(j.at("in_candidates").get<bool>());
            CHECK(j.at("tier").get<int>() >= 1);
            CHECK(j.at("tier").get<int>() <= 4);
            CHECK(j.contains("probability"));
            CHECK(j.contains("rank"));
            ++n;
        }
        CHECK(n == audit.size());
    }
}

TEST_CASE("uniform baseline respects the same candidate sets") {
    auto job = make_job(8, 60, 15, 10);
    const auto pred = predict_uniform_baseline(job.history, job.signatures, 2, 3);
    const auto idx = CandidateIndex::build(job.history, 60);
    int flags = 0;
    for (const auto& [d, s] : job.signatures) flags += s.predict_count();
    CHECK(pred.size() == static_cast<std::size_t>(flags));
    for (const auto& p : pred) {
        const int dow = job.signatures.at(p.day).dow;
        CHECK(contains(idx.resolve(Axis::X, dow, p.slot).tokens, tok::x(p.x)));
        CHECK(contains(idx.resolve(Axis::Y, dow, p.slot).tokens, tok::y(p.y)));
    }
    CHECK(predict_uniform_baseline(job.history, job.signatures, 2, 3) == pred);
}

TEST_CASE("predict_many is independent of the worker count") {
    const auto model = small_model(7);
    std::vector<PredictionJob> work;
    for (UserId u = 0; u < 4; ++u) work.push_back(make_job(u, 60, 3, 20 + static_cast<std::uint64_t>(u)));
    GenConfig c;
    c.seed = 9;
    const auto one = predict_many(model, work, c, 1);
    const auto three = predict_many(model, work, c, 3);
    CHECK(one == three);
    std::vector<PingRecord> serial;
    for (const auto& j : work) {
        const auto p = predict_horizon(model, j.history, j.signatures, c);
        serial.insert(serial.end(), p.begin(), p.end());
    }
    CHECK(one == serial);
}
