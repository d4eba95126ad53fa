#pragma once

#include "geoformer/error.hpp"
#include "geoformer/generator.hpp"
#include "geoformer/mobility.hpp"

#include <nlohmann/json.hpp>

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace geoformer {

/// A location with the (day, slot) it came from.
struct SeqPoint {
    int day = 0;
    int slot = 0;
    int x = 0;
    int y = 0;
};

using PointSeq = std::vector<SeqPoint>;

double euclid(const SeqPoint& a, const SeqPoint& b);

/// Dynamic time warping with a Euclidean ground distance.
double dtw(std::span<const SeqPoint> a, std::span<const SeqPoint> b);

/// Minimum over every monotone warping path, by enumeration. Inputs are
/// capped at 6 points.
double dtw_bruteforce(std::span<const SeqPoint> a, std::span<const SeqPoint> b);

inline constexpr std::size_t kBruteForceMaxLen = 6;

struct GeoBleuParams {
    int max_n = 3;
    double beta = 0.5;

    void validate() const;
};

/// BLEU over n-grams of points where an n-gram pair scores
/// prod exp(-beta * distance) instead of an exact-match indicator, with
/// greedy one-to-one matching and a brevity penalty.
double geo_bleu(std::span<const SeqPoint> gen, std::span<const SeqPoint> ref, const GeoBleuParams& p = {});

enum class Grouping {
    PerUserDay,       // score each (user, day), average over user-days
    PerUserTrajectory // score each user's concatenated days, average over users
};

const char* grouping_name(Grouping g);
Grouping parse_grouping(const std::string& s);

struct EvalOptions {
    Grouping geobleu_grouping = Grouping::PerUserDay;
    Grouping dtw_grouping = Grouping::PerUserTrajectory;
    GeoBleuParams geobleu;
};

struct UserScore {
    UserId uid = 0;
    double dtw = 0.0;
    double geobleu = 0.0;
    std::size_t points = 0;
};

struct EvalReport {
    double mean_dtw = 0.0;
    double mean_geobleu = 0.0;
    std::size_t users = 0;
    std::size_t user_days = 0;
    std::vector<UserScore> per_user;
    EvalOptions options;
    nlohmann::json config_echo = nlohmann::json::object();

    nlohmann::json to_json() const;
};

/// Prediction and truth do not cover the same (uid, day, slot) keys.
class KeyMismatchError : public Error {
  public:
    KeyMismatchError(std::vector<PingRecord> missing_in_prediction, std::vector<PingRecord> missing_in_truth);

    const std::vector<PingRecord>& missing_in_prediction() const { return missing_pred_; }
    const std::vector<PingRecord>& missing_in_truth() const { return missing_truth_; }

  private:
    std::vector<PingRecord> missing_pred_, missing_truth_;
};

EvalReport evaluate(std::span<const PingRecord> predictions, std::span<const PingRecord> truth,
                    const EvalOptions& options = {});

struct SweepRow {
    double temperature = 0.0;
    int top_k = 0;
    double geobleu = 0.0;
    double dtw = 0.0;
    std::uint64_t seed = 0;
};

/// Full factorial sweep over temperature x top_k. Every cell uses
/// `base.seed`, so cells differ only in the swept parameters.
std::vector<SweepRow> sweep_generation(const GptModel<float>& model, std::span<const PredictionJob> work,
                                       std::span<const PingRecord> truth, std::span<const double> temperatures,
                                       std::span<const int> top_ks, const GenConfig& base,
                                       const EvalOptions& options = {}, int jobs = 1);

void write_sweep_csv(std::ostream& out, std::span<const SweepRow> rows);
nlohmann::json sweep_to_json(std::span<const SweepRow> rows);

} // namespace geoformer
