#pragma once

#include "geoformer/linearizer.hpp"
#include "geoformer/mobility.hpp"
#include "geoformer/model.hpp"
#include "geoformer/rng.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <vector>

namespace geoformer {

struct GenConfig {
    double temperature = 1.0;
    int top_k = 5;
    double top_p = 1.0;
    int candidate_window = 2;
    std::uint64_t seed = 0;
    /// Feed generated days back as context for later days. When false,
    /// generated days are replaced by all-Absent days in the context.
    bool roll = true;

    void validate() const;
};

void to_json(nlohmann::json& j, const GenConfig& c);
void from_json(const nlohmann::json& j, GenConfig& c);

/// Which set constrained a sampled location token. Tiers are tried in order
/// and the first non-empty one is used.
enum class FallbackTier : int {
    SlotWindow = 1,   // same dow, slot +-window
    DayOfWeek = 2,    // same dow, any slot
    History = 3,      // any pre-horizon ping
    Unconstrained = 4 // every x (resp. y) token
};

const char* tier_name(FallbackTier t);

enum class Axis { X, Y };

/// Per-user location tokens seen before the horizon, keyed by (dow, slot).
class CandidateIndex {
  public:
    CandidateIndex() = default;

    static CandidateIndex build(const UserHistory& history, int horizon_day, int window = 2);

    /// The raw set of one tier, possibly empty.
    std::span<const TokenId> tier_set(Axis axis, FallbackTier tier, int dow, int slot) const;

    struct Resolved {
        std::span<const TokenId> tokens;
        FallbackTier tier;
    };
    /// First non-empty tier for (dow, slot).
    Resolved resolve(Axis axis, int dow, int slot) const;

    int window() const { return window_; }

  private:
    using Sets = std::array<std::array<std::vector<TokenId>, kSlotsPerDay>, kDaysPerWeek>;
    Sets x_slot_, y_slot_;
    std::array<std::vector<TokenId>, kDaysPerWeek> x_dow_, y_dow_;
    std::vector<TokenId> x_all_, y_all_;
    int window_ = 2;
};

struct SampledToken {
    TokenId token = 0;
    double probability = 0.0;
    /// 0-based position of the token in the filtered, sorted distribution.
    int rank = 0;
    /// Tokens that survived the constraint, top-k, and top-p filters.
    int support = 0;
};

/// Samples one token: constraint mask, temperature, top-k, top-p,
/// renormalize, inverse CDF. Throws DecodeError when no allowed token has a
/// finite logit.
SampledToken sample_token(std::span<const float> logits, const GenConfig& cfg,
                          std::optional<std::span<const TokenId>> allowed, Rng& rng);

/// The tokens sample_token can return at all for these inputs.
std::vector<TokenId> reachable_tokens(std::span<const float> logits, const GenConfig& cfg,
                                      std::optional<std::span<const TokenId>> allowed);

struct AuditRecord {
    UserId uid = 0;
    int day = 0;
    int slot = 0;
    Axis axis = Axis::X;
    TokenId token = 0;
    FallbackTier tier = FallbackTier::SlotWindow;
    int candidate_count = 0;
    int rank = 0;
    double probability = 0.0;
    bool in_candidates = false;
};

void write_audit_jsonl(std::ostream& out, std::span<const AuditRecord> records);

using GeneratedDay = DayTrajectory;

/// Generates one day after `context`, which must end with <|sep|>. Skip
/// slots are forced to `N`; Predict slots sample an x token and then a y
/// token from the candidate sets for (signature.dow, slot).
GeneratedDay generate_day(const GptModel<float>& model, std::span<const TokenId> context,
                          const TargetSignature& signature, const CandidateIndex& candidates,
                          const GenConfig& cfg, Rng& rng, std::vector<AuditRecord>* audit = nullptr,
                          UserId uid = 0, int day = 0);

/// Rolls generation forward over the signature days in order. The context
/// for day d is the 7 days before it, taken from `history` before the
/// horizon (the first signature day) and from earlier generated days after
/// it. Candidates come from pre-horizon data only.
std::vector<PingRecord> predict_horizon(const GptModel<float>& model, const UserHistory& history,
                                        const std::map<int, TargetSignature>& signatures, const GenConfig& cfg,
                                        std::vector<AuditRecord>* audit = nullptr);

/// Baseline: every Predict slot draws x and y uniformly from the same
/// candidate sets the model would be restricted to.
std::vector<PingRecord> predict_uniform_baseline(const UserHistory& history,
                                                 const std::map<int, TargetSignature>& signatures,
                                                 int candidate_window, std::uint64_t seed);

/// Signatures for days [horizon_day, 75) read off a user's full history.
std::map<int, TargetSignature> signatures_from_history(const UserHistory& history, int horizon_day);

struct PredictionJob {
    UserHistory history;
    std::map<int, TargetSignature> signatures;
};

/// Runs predict_horizon over independent users on `jobs` worker threads.
/// Output is ordered by job and identical for any worker count.
std::vector<PingRecord> predict_many(const GptModel<float>& model, std::span<const PredictionJob> work,
                                     const GenConfig& cfg, int jobs = 1, std::vector<AuditRecord>* audit = nullptr);

} // namespace geoformer
