#include "geoformer/generator.hpp"

#include "geoformer/error.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <mutex>
#include <numeric>
#include <ostream>
#include <thread>

namespace geoformer {

void GenConfig::validate() const {
    if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
    if (top_k < 1) throw ConfigError("top_k must be at least 1");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("top_p must be in (0, 1]");
    if (candidate_window < 0) throw ConfigError("candidate_window must be non-negative");
}

void to_json(nlohmann::json& j, const GenConfig& c) {
    j = nlohmann::json{{"temperature", c.temperature}, {"top_k", c.top_k},
                       {"top_p", c.top_p},             {"candidate_window", c.candidate_window},
                       {"seed", c.seed},               {"roll", c.roll}};
}

void from_json(const nlohmann::json& j, GenConfig& c) {
    GenConfig d;
    c.temperature = j.value("temperature", d.temperature);
    c.top_k = j.value("top_k", d.top_k);
    c.top_p = j.value("top_p", d.top_p);
    c.candidate_window = j.value("candidate_window", d.candidate_window);
    c.seed = j.value("seed", d.seed);
    c.roll = j.value("roll", d.roll);
}

const char* tier_name(FallbackTier t) {
    switch (t) {
    case FallbackTier::SlotWindow: return "slot_window";
    case FallbackTier::DayOfWeek: return "day_of_week";
    case FallbackTier::History: return "history";
    case FallbackTier::Unconstrained: return "unconstrained";
    }
    return "?";
}

namespace {

void sort_unique(std::vector<TokenId>& v) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
}

const std::vector<TokenId>& full_range(Axis axis) {
    static const auto xs = [] {
        std::vector<TokenId> v(kGridSize);
        std::iota(v.begin(), v.end(), tok::kX0);
        return v;
    }();
    static const auto ys = [] {
        std::vector<TokenId> v(kGridSize);
        std::iota(v.begin(), v.end(), tok::kY0);
        return v;
    }();
    return axis == Axis::X ? xs : ys;
}

} // namespace

CandidateIndex CandidateIndex::build(const UserHistory& history, int horizon_day, int window) {
    if (window < 0) throw ConfigError("candidate window must be non-negative");
    CandidateIndex idx;
    idx.window_ = window;
    for (const auto& [d, traj] : history.days()) {
        if (d >= horizon_day) break;
        const int dow = traj.dow;
        for (int s = 0; s < kSlotsPerDay; ++s) {
            const auto& cell = traj.slots[s];
            if (!cell) continue;
            const TokenId xt = tok::x(cell->x());
            const TokenId yt = tok::y(cell->y());
            for (int t = std::max(0, s - window); t <= std::min(kSlotsPerDay - 1, s + window); ++t) {
                idx.x_slot_[dow][t].push_back(xt);
                idx.y_slot_[dow][t].push_back(yt);
            }
            idx.x_dow_[dow].push_back(xt);
            idx.y_dow_[dow].push_back(yt);
            idx.x_all_.push_back(xt);
            idx.y_all_.push_back(yt);
        }
    }
    for (int w = 0; w < kDaysPerWeek; ++w) {
        for (int t = 0; t < kSlotsPerDay; ++t) {
            sort_unique(idx.x_slot_[w][t]);
            sort_unique(idx.y_slot_[w][t]);
        }
        sort_unique(idx.x_dow_[w]);
        sort_unique(idx.y_dow_[w]);
    }
    sort_unique(idx.x_all_);
    sort_unique(idx.y_all_);
    return idx;
}

std::span<const TokenId> CandidateIndex::tier_set(Axis axis, FallbackTier tier, int dow, int slot) const {
    if (dow < 0 || dow >= kDaysPerWeek || slot < 0 || slot >= kSlotsPerDay)
        throw RangeError("candidate lookup outside (dow, slot) range");
    const bool x = axis == Axis::X;
    switch (tier) {
    case FallbackTier::SlotWindow: return x ? x_slot_[dow][slot] : y_slot_[dow][slot];
    case FallbackTier::DayOfWeek: return x ? x_dow_[dow] : y_dow_[dow];
    case FallbackTier::History: return x ? x_all_ : y_all_;
    case FallbackTier::Unconstrained: return full_range(axis);
    }
    throw RangeError("unknown fallback tier");
}

CandidateIndex::Resolved CandidateIndex::resolve(Axis axis, int dow, int slot) const {
    for (auto tier : {FallbackTier::SlotWindow, FallbackTier::DayOfWeek, FallbackTier::History}) {
        auto s = tier_set(axis, tier, dow, slot);
        if (!s.empty()) return {s, tier};
    }
    return {full_range(axis), FallbackTier::Unconstrained};
}

namespace {

struct Candidate {
    TokenId id;
    double logit;
};

/// The filtered distribution, sorted by descending probability.
std::vector<std::pair<TokenId, double>> filtered_distribution(std::span<const float> logits, const GenConfig& cfg,
                                                              std::optional<std::span<const TokenId>> allowed) {
    std::vector<Candidate> cands;
    const auto consider = [&](TokenId id) {
        if (id < 0 || static_cast<std::size_t>(id) >= logits.size())
            throw RangeError("allowed token " + std::to_string(id) + " outside the logits");
        const double l = logits[static_cast<std::size_t>(id)];
        if (std::isfinite(l)) cands.push_back({id, l / cfg.temperature});
    };
    if (allowed) {
        for (auto id : *allowed) consider(id);
    } else {
        for (std::size_t i = 0; i < logits.size(); ++i) consider(static_cast<TokenId>(i));
    }
    if (cands.empty()) throw DecodeError("no feasible token: every allowed logit is -inf");

    std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
        return a.logit != b.logit ? a.logit > b.logit : a.id < b.id;
    });
    if (cands.size() > static_cast<std::size_t>(cfg.top_k)) cands.resize(static_cast<std::size_t>(cfg.top_k));

    const double mx = cands.front().logit;
    std::vector<std::pair<TokenId, double>> dist;
    double z = 0.0;
    for (const auto& c : cands) {
        const double p = std::exp(c.logit - mx);
        dist.emplace_back(c.id, p);
        z += p;
    }
    for (auto& [id, p] : dist) p /= z;

    if (cfg.top_p < 1.0) {
        double cum = 0.0;
        std::size_t keep = 0;
        while (keep < dist.size()) {
            cum += dist[keep].second;
            ++keep;
            if (cum >= cfg.top_p) break;
        }
        dist.resize(keep);
        double z2 = 0.0;
        for (const auto& [id, p] : dist) z2 += p;
        for (auto& [id, p] : dist) p /= z2;
    }
    return dist;
}

} // namespace

SampledToken sample_token(std::span<const float> logits, const GenConfig& cfg,
                          std::optional<std::span<const TokenId>> allowed, Rng& rng) {
    const auto dist = filtered_distribution(logits, cfg, allowed);
    const double u = rng.uniform();
    double cum = 0.0;
    std::size_t pick = dist.size() - 1;
    for (std::size_t i = 0; i < dist.size(); ++i) {
        cum += dist[i].second;
        if (u < cum) {
            pick = i;
            break;
        }
    }
    return {dist[pick].first, dist[pick].second, static_cast<int>(pick), static_cast<int>(dist.size())};
}

std::vector<TokenId> reachable_tokens(std::span<const float> logits, const GenConfig& cfg,
                                      std::optional<std::span<const TokenId>> allowed) {
    std::vector<TokenId> out;
    for (const auto& [id, p] : filtered_distribution(logits, cfg, allowed))
        if (p > 0.0) out.push_back(id);
    std::sort(out.begin(), out.end());
    return out;
}

void write_audit_jsonl(std::ostream& out, std::span<const AuditRecord> records) {
    for (const auto& r : records) {
        nlohmann::json j{{"uid", r.uid},
                         {"day", r.day},
                         {"slot", r.slot},
                         {"axis", r.axis == Axis::X ? "x" : "y"},
                         {"token", vocabulary().token(r.token)},
                         {"tier", static_cast<int>(r.tier)},
                         {"tier_name", tier_name(r.tier)},
                         {"candidates", r.candidate_count},
                         {"rank", r.rank},
                         {"probability", r.probability},
                         {"in_candidates", r.in_candidates}};
        out << j.dump() << '\n';
    }
}

namespace {

TokenId sample_location(std::span<const float> logits, Axis axis, int dow, int slot,
                        const CandidateIndex& candidates, const GenConfig& cfg, Rng& rng,
                        std::vector<AuditRecord>* audit, UserId uid, int day) {
    const auto resolved = candidates.resolve(axis, dow, slot);
    const auto s = sample_token(logits, cfg, resolved.tokens, rng);
    if (audit) {
        AuditRecord r;
        r.uid = uid;
        r.day = day;
        r.slot = slot;
        r.axis = axis;
        r.token = s.token;
        r.tier = resolved.tier;
        r.candidate_count = static_cast<int>(resolved.tokens.size());
        r.rank = s.rank;
        r.probability = s.probability;
        r.in_candidates = std::binary_search(resolved.tokens.begin(), resolved.tokens.end(), s.token);
        audit->push_back(r);
    }
    return s.token;
}

} // namespace

GeneratedDay generate_day(const GptModel<float>& model, std::span<const TokenId> context,
                          const TargetSignature& signature, const CandidateIndex& candidates, const GenConfig& cfg,
                          Rng& rng, std::vector<AuditRecord>* audit, UserId uid, int day) {
    cfg.validate();
    if (context.empty() || context.back() != tok::kSep) throw DecodeError("generation context must end with <|sep|>");
    if (signature.dow < 0 || signature.dow >= kDaysPerWeek) throw RangeError("signature dow out of range");

    InferenceSession session(model);
    session.append(context);
    const TokenId dow_token = tok::dow(signature.dow);
    std::vector<float> logits = session.append(std::span<const TokenId>(&dow_token, 1));

    GeneratedDay out(signature.dow);
    for (int slot = 0; slot < kSlotsPerDay; ++slot) {
        if (signature.slots[slot] == SlotFlag::Skip) {
            const TokenId n = tok::kEmpty;
            logits = session.append(std::span<const TokenId>(&n, 1));
            continue;
        }
        const TokenId xt = sample_location(logits, Axis::X, signature.dow, slot, candidates, cfg, rng, audit, uid, day);
        logits = session.append(std::span<const TokenId>(&xt, 1));
        const TokenId yt = sample_location(logits, Axis::Y, signature.dow, slot, candidates, cfg, rng, audit, uid, day);
        logits = session.append(std::span<const TokenId>(&yt, 1));
        out.slots[slot] = GridCell(tok::x_value(xt), tok::y_value(yt));
    }
    return out;
}

namespace {

std::vector<DayTrajectory> context_for(int day, int horizon, const UserHistory& history,
                                       const std::map<int, GeneratedDay>& generated,
                                       const std::map<int, TargetSignature>& signatures, bool roll) {
    std::vector<DayTrajectory> ctx;
    for (int k = day - kContextDays; k < day; ++k) {
        if (k < horizon) {
            ctx.push_back(history.has_day(k) ? history.day(k) : DayTrajectory(history.dow_of(k)));
        } else if (roll) {
            ctx.push_back(generated.at(k));
        } else {
            auto it = signatures.find(k);
            ctx.emplace_back(it != signatures.end() ? it->second.dow : history.dow_of(k));
        }
    }
    return ctx;
}

int check_horizon(const UserHistory& history, const std::map<int, TargetSignature>& signatures) {
    const int horizon = signatures.begin()->first;
    if (horizon < kContextDays) throw RangeError("the first signature day leaves fewer than 7 context days");
    int before = 0;
    for (const auto& [d, traj] : history.days()) before += d < horizon;
    if (before < kContextDays)
        throw RangeError("user " + std::to_string(history.uid()) + " has " + std::to_string(before) +
                         " days before day " + std::to_string(horizon) + "; at least 7 are needed");
    int expected = horizon;
    for (const auto& [d, sig] : signatures) {
        if (d != expected) throw RangeError("signature days must be consecutive");
        ++expected;
    }
    return horizon;
}

} // namespace

std::vector<PingRecord> predict_horizon(const GptModel<float>& model, const UserHistory& history,
                                        const std::map<int, TargetSignature>& signatures, const GenConfig& cfg,
                                        std::vector<AuditRecord>* audit) {
    cfg.validate();
    if (signatures.empty()) return {};
    const int horizon = check_horizon(history, signatures);
    const auto candidates = CandidateIndex::build(history, horizon, cfg.candidate_window);
    Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(history.uid())));

    std::vector<PingRecord> out;
    std::map<int, GeneratedDay> generated;
    for (const auto& [day, sig] : signatures) {
        const auto ctx_days = context_for(day, horizon, history, generated, signatures, cfg.roll);
        const auto context = linearize_context(history.uid(), ctx_days);
        auto g = generate_day(model, context, sig, candidates, cfg, rng, audit, history.uid(), day);
        for (int t = 0; t < kSlotsPerDay; ++t)
            if (const auto& c = g.slots[t]) out.push_back({history.uid(), day, t, c->x(), c->y()});
        generated.emplace(day, std::move(g));
    }
    return out;
}

std::vector<PingRecord> predict_uniform_baseline(const UserHistory& history,
                                                 const std::map<int, TargetSignature>& signatures,
                                                 int candidate_window, std::uint64_t seed) {
    if (signatures.empty()) return {};
    const int horizon = check_horizon(history, signatures);
    const auto candidates = CandidateIndex::build(history, horizon, candidate_window);
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(history.uid())));
    std::vector<PingRecord> out;
    for (const auto& [day, sig] : signatures) {
        for (int t = 0; t < kSlotsPerDay; ++t) {
            if (sig.slots[t] == SlotFlag::Skip) continue;
            const auto xs = candidates.resolve(Axis::X, sig.dow, t).tokens;
            const auto ys = candidates.resolve(Axis::Y, sig.dow, t).tokens;
            const TokenId xt = xs[rng.below(xs.size())];
            const TokenId yt = ys[rng.below(ys.size())];
            out.push_back({history.uid(), day, t, tok::x_value(xt), tok::y_value(yt)});
        }
    }
    return out;
}

std::map<int, TargetSignature> signatures_from_history(const UserHistory& history, int horizon_day) {
    std::map<int, TargetSignature> out;
    for (int d = horizon_day; d < kNumDays; ++d) {
        if (history.has_day(d)) {
            out.emplace(d, signature_from_day(history.day(d)));
        } else {
            TargetSignature empty;
            empty.dow = history.dow_of(d);
            empty.slots.fill(SlotFlag::Skip);
            out.emplace(d, empty);
        }
    }
    return out;
}

std::vector<PingRecord> predict_many(const GptModel<float>& model, std::span<const PredictionJob> work,
                                     const GenConfig& cfg, int jobs, std::vector<AuditRecord>* audit) {
    std::vector<std::vector<PingRecord>> outputs(work.size());
    std::vector<std::vector<AuditRecord>> audits(work.size());
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    const auto worker = [&] {
        while (true) {
            const std::size_t i = next.fetch_add(1);
            if (i >= work.size()) return;
            try {
                outputs[i] = predict_horizon(model, work[i].history, work[i].signatures, cfg,
                                             audit ? &audits[i] : nullptr);
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
            }
        }
    };
    const int n_threads = std::max(1, std::min<int>(jobs, static_cast<int>(work.size())));
    if (n_threads == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    }
    if (failure) std::rethrow_exception(failure);

    std::vector<PingRecord> out;
    for (std::size_t i = 0; i < work.size(); ++i) {
        out.insert(out.end(), outputs[i].begin(), outputs[i].end());
        if (audit) audit->insert(audit->end(), audits[i].begin(), audits[i].end());
    }
    return out;
}

} // namespace geoformer
