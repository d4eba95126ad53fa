#include "geoformer/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <ostream>
#include <tuple>

namespace geoformer {

double euclid(const SeqPoint& a, const SeqPoint& b) {
    const double dx = a.x - b.x;
    const double dy = a.y - b.y;
    return std::sqrt(dx * dx + dy * dy);
}

double dtw(std::span<const SeqPoint> a, std::span<const SeqPoint> b) {
    if (a.empty() || b.empty()) throw RangeError("dtw of an empty sequence");
    const std::size_t n = a.size(), m = b.size();
    std::vector<double> prev(m), cur(m);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            const double d = euclid(a[i], b[j]);
            if (i == 0 && j == 0)
                cur[j] = d;
            else if (i == 0)
                cur[j] = d + cur[j - 1];
            else if (j == 0)
                cur[j] = d + prev[j];
            else
                cur[j] = d + std::min({prev[j], cur[j - 1], prev[j - 1]});
        }
        std::swap(prev, cur);
    }
    return prev[m - 1];
}

namespace {

void enumerate_paths(std::span<const SeqPoint> a, std::span<const SeqPoint> b, std::size_t i, std::size_t j,
                     double acc, double& best) {
    acc += euclid(a[i], b[j]);
    if (i + 1 == a.size() && j + 1 == b.size()) {
        best = std::min(best, acc);
        return;
    }
    if (i + 1 < a.size()) enumerate_paths(a, b, i + 1, j, acc, best);
    if (j + 1 < b.size()) enumerate_paths(a, b, i, j + 1, acc, best);
    if (i + 1 < a.size() && j + 1 < b.size()) enumerate_paths(a, b, i + 1, j + 1, acc, best);
}

} // namespace

double dtw_bruteforce(std::span<const SeqPoint> a, std::span<const SeqPoint> b) {
    if (a.empty() || b.empty()) throw RangeError("dtw of an empty sequence");
    if (a.size() > kBruteForceMaxLen || b.size() > kBruteForceMaxLen)
        throw RangeError("dtw_bruteforce is limited to sequences of at most 6 points");
    double best = std::numeric_limits<double>::infinity();
    enumerate_paths(a, b, 0, 0, 0.0, best);
    return best;
}

void GeoBleuParams::validate() const {
    if (max_n < 1) throw ConfigError("GEO-BLEU max_n must be at least 1");
    if (!(beta > 0.0)) throw ConfigError("GEO-BLEU beta must be positive");
}

namespace {

double ngram_precision(std::span<const SeqPoint> gen, std::span<const SeqPoint> ref, std::size_t n, double beta) {
    const std::size_t ng = gen.size() - n + 1;
    const std::size_t nr = ref.size() - n + 1;
    struct Pair {
        double sim;
        std::size_t g, r;
    };
    std::vector<Pair> pairs;
    pairs.reserve(ng * nr);
    for (std::size_t g = 0; g < ng; ++g) {
        for (std::size_t r = 0; r < nr; ++r) {
            double sim = 1.0;
            for (std::size_t k = 0; k < n; ++k) sim *= std::exp(-beta * euclid(gen[g + k], ref[r + k]));
            pairs.push_back({sim, g, r});
        }
    }
    std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
        return std::tie(b.sim, a.g, a.r) < std::tie(a.sim, b.g, b.r);
    });
    std::vector<bool> used_g(ng, false), used_r(nr, false);
    double matched = 0.0;
    std::size_t assigned = 0;
    for (const auto& p : pairs) {
        if (used_g[p.g] || used_r[p.r]) continue;
        used_g[p.g] = used_r[p.r] = true;
        matched += p.sim;
        if (++assigned == std::min(ng, nr)) break;
    }
    return matched / static_cast<double>(ng);
}

} // namespace

double geo_bleu(std::span<const SeqPoint> gen, std::span<const SeqPoint> ref, const GeoBleuParams& p) {
    p.validate();
    if (gen.empty() || ref.empty()) throw RangeError("geo_bleu of an empty sequence");
    const std::size_t top = std::min({static_cast<std::size_t>(p.max_n), gen.size(), ref.size()});
    const double weight = 1.0 / static_cast<double>(top);
    double log_sum = 0.0;
    for (std::size_t n = 1; n <= top; ++n) {
        const double pn = ngram_precision(gen, ref, n, p.beta);
        if (pn <= 0.0) return 0.0;
        log_sum += weight * std::log(pn);
    }
    const double bp = std::min(1.0, std::exp(1.0 - static_cast<double>(ref.size()) / static_cast<double>(gen.size())));
    return std::clamp(bp * std::exp(log_sum), 0.0, 1.0);
}

const char* grouping_name(Grouping g) {
    return g == Grouping::PerUserDay ? "per_user_day" : "per_user_trajectory";
}

Grouping parse_grouping(const std::string& s) {
    if (s == "per_user_day") return Grouping::PerUserDay;
    if (s == "per_user_trajectory") return Grouping::PerUserTrajectory;
    throw ConfigError("unknown grouping '" + s + "' (expected per_user_day or per_user_trajectory)");
}

namespace {

std::string describe(const std::vector<PingRecord>& keys) {
    std::string out;
    for (std::size_t i = 0; i < keys.size() && i < 5; ++i)
        out += (i ? ", " : "") + std::string("(") + std::to_string(keys[i].uid) + ", " + std::to_string(keys[i].day) +
               ", " + std::to_string(keys[i].slot) + ")";
    if (keys.size() > 5) out += ", ... (" + std::to_string(keys.size()) + " total)";
    return out;
}

using Key = std::tuple<UserId, int, int>;
using Table = std::map<Key, PingRecord>;

Table index_records(std::span<const PingRecord> records, const char* what) {
    Table t;
    for (const auto& r : records)
        if (!t.emplace(Key{r.uid, r.day, r.slot}, r).second)
            throw DuplicateError(std::string("duplicate key in ") + what + ": (" + std::to_string(r.uid) + ", " +
                                 std::to_string(r.day) + ", " + std::to_string(r.slot) + ")");
    return t;
}

SeqPoint point_of(const PingRecord& r) { return {r.day, r.slot, r.x, r.y}; }

} // namespace

KeyMismatchError::KeyMismatchError(std::vector<PingRecord> missing_in_prediction,
                                   std::vector<PingRecord> missing_in_truth)
    : Error("prediction and truth keys differ; missing in prediction: [" + describe(missing_in_prediction) +
            "], missing in truth: [" + describe(missing_in_truth) + "]"),
      missing_pred_(std::move(missing_in_prediction)), missing_truth_(std::move(missing_in_truth)) {}

nlohmann::json EvalReport::to_json() const {
    nlohmann::json j;
    j["config"] = config_echo;
    j["geobleu_grouping"] = grouping_name(options.geobleu_grouping);
    j["dtw_grouping"] = grouping_name(options.dtw_grouping);
    j["geobleu_params"] = {{"max_n", options.geobleu.max_n}, {"beta", options.geobleu.beta}};
    j["geobleu"] = mean_geobleu;
    j["dtw"] = mean_dtw;
    j["users"] = users;
    j["user_days"] = user_days;
    nlohmann::json uids = nlohmann::json::array(), d = nlohmann::json::array(), g = nlohmann::json::array(),
                   n = nlohmann::json::array();
    for (const auto& u : per_user) {
        uids.push_back(u.uid);
        d.push_back(u.dtw);
        g.push_back(u.geobleu);
        n.push_back(u.points);
    }
    j["per_user"] = {{"uid", uids}, {"dtw", d}, {"geobleu", g}, {"points", n}};
    return j;
}

EvalReport evaluate(std::span<const PingRecord> predictions, std::span<const PingRecord> truth,
                    const EvalOptions& options) {
    options.geobleu.validate();
    const Table pred = index_records(predictions, "predictions");
    const Table ref = index_records(truth, "truth");

    std::vector<PingRecord> missing_pred, missing_truth;
    for (const auto& [k, r] : ref)
        if (!pred.contains(k)) missing_pred.push_back(r);
    for (const auto& [k, r] : pred)
        if (!ref.contains(k)) missing_truth.push_back(r);
    if (!missing_pred.empty() || !missing_truth.empty())
        throw KeyMismatchError(std::move(missing_pred), std::move(missing_truth));

    // (uid, day) -> slot-ordered points; std::map iteration keeps the order.
    std::map<UserId, std::map<int, std::pair<PointSeq, PointSeq>>> grouped;
    for (const auto& [k, r] : ref) {
        auto& cell = grouped[r.uid][r.day];
        cell.second.push_back(point_of(r));
        cell.first.push_back(point_of(pred.at(k)));
    }

    EvalReport report;
    report.options = options;
    double geo_total = 0.0, dtw_total = 0.0;
    std::size_t geo_count = 0, dtw_count = 0;
    for (const auto& [uid, days] : grouped) {
        UserScore us;
        us.uid = uid;
        PointSeq all_gen, all_ref;
        double user_geo = 0.0, user_dtw = 0.0;
        for (const auto& [day, seqs] : days) {
            all_gen.insert(all_gen.end(), seqs.first.begin(), seqs.first.end());
            all_ref.insert(all_ref.end(), seqs.second.begin(), seqs.second.end());
            us.points += seqs.first.size();
            if (options.geobleu_grouping == Grouping::PerUserDay) {
                const double g = geo_bleu(seqs.first, seqs.second, options.geobleu);
                user_geo += g;
                geo_total += g;
                ++geo_count;
            }
            if (options.dtw_grouping == Grouping::PerUserDay) {
                const double d = dtw(seqs.first, seqs.second);
                user_dtw += d;
                dtw_total += d;
                ++dtw_count;
            }
        }
        report.user_days += days.size();
        if (options.geobleu_grouping == Grouping::PerUserTrajectory) {
            user_geo = geo_bleu(all_gen, all_ref, options.geobleu);
            geo_total += user_geo;
            ++geo_count;
        } else {
            user_geo /= static_cast<double>(days.size());
        }
        if (options.dtw_grouping == Grouping::PerUserTrajectory) {
            user_dtw = dtw(all_gen, all_ref);
            dtw_total += user_dtw;
            ++dtw_count;
        } else {
            user_dtw /= static_cast<double>(days.size());
        }
        us.geobleu = user_geo;
        us.dtw = user_dtw;
        report.per_user.push_back(us);
    }
    report.users = grouped.size();
    if (geo_count) report.mean_geobleu = geo_total / static_cast<double>(geo_count);
    if (dtw_count) report.mean_dtw = dtw_total / static_cast<double>(dtw_count);
    return report;
}

std::vector<SweepRow> sweep_generation(const GptModel<float>& model, std::span<const PredictionJob> work,
                                       std::span<const PingRecord> truth, std::span<const double> temperatures,
                                       std::span<const int> top_ks, const GenConfig& base,
                                       const EvalOptions& options, int jobs) {
    std::vector<SweepRow> rows;
    for (double t : temperatures) {
        for (int k : top_ks) {
            GenConfig cfg = base;
            cfg.temperature = t;
            cfg.top_k = k;
            const auto pred = predict_many(model, work, cfg, jobs);
            const auto report = evaluate(pred, truth, options);
            rows.push_back({t, k, report.mean_geobleu, report.mean_dtw, cfg.seed});
        }
    }
    return rows;
}

void write_sweep_csv(std::ostream& out, std::span<const SweepRow> rows) {
    out << "temperature,top_k,geobleu,dtw,seed\n";
    out.precision(10);
    for (const auto& r : rows)
        out << r.temperature << ',' << r.top_k << ',' << r.geobleu << ',' << r.dtw << ',' << r.seed << '\n';
}

nlohmann::json sweep_to_json(std::span<const SweepRow> rows) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : rows)
        j.push_back({{"temperature", r.temperature},
                     {"top_k", r.top_k},
                     {"geobleu", r.geobleu},
                     {"dtw", r.dtw},
                     {"seed", r.seed}});
    return j;
}

} // namespace geoformer
