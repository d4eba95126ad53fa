#pragma once

#include "geoformer/mobility.hpp"

#include <array>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace geoformer {

using TokenId = int;

// Fixed id layout. Checkpoints depend on it, so never reorder.
namespace tok {
inline constexpr TokenId kEos = 0;
inline constexpr TokenId kData = 1;
inline constexpr TokenId kSep = 2;
inline constexpr TokenId kDow0 = 3;
inline constexpr TokenId kDigit0 = 10;
inline constexpr TokenId kEmpty = 20;
inline constexpr TokenId kX0 = 21;
inline constexpr TokenId kY0 = 521;
inline constexpr int kVocabSize = 1021;

constexpr TokenId dow(int d) { return kDow0 + d; }
constexpr TokenId digit(int d) { return kDigit0 + d; }
constexpr TokenId x(int v) { return kX0 + v; }
constexpr TokenId y(int v) { return kY0 + v; }

constexpr bool is_dow(TokenId t) { return t >= kDow0 && t < kDow0 + kDaysPerWeek; }
constexpr bool is_digit(TokenId t) { return t >= kDigit0 && t < kDigit0 + 10; }
constexpr bool is_x(TokenId t) { return t >= kX0 && t < kX0 + kGridSize; }
constexpr bool is_y(TokenId t) { return t >= kY0 && t < kY0 + kGridSize; }

constexpr int x_value(TokenId t) { return t - kX0; }
constexpr int y_value(TokenId t) { return t - kY0; }
} // namespace tok

class Vocabulary {
  public:
    Vocabulary();

    int size() const { return static_cast<int>(tokens_.size()); }
    const std::string& token(TokenId id) const;
    TokenId id(std::string_view token) const;

    /// Concatenated token strings, e.g. "<|dow6|>NNx129y088".
    std::string render(std::span<const TokenId> ids) const;

    /// token -> id object, for inspection.
    std::string to_json() const;

  private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> ids_;
};

/// The process-wide immutable vocabulary.
const Vocabulary& vocabulary();

inline constexpr int kWindowDays = 8;
inline constexpr int kContextDays = kWindowDays - 1;
inline constexpr int kContextLen = 1024;

std::vector<TokenId> encode_uid(UserId uid);
std::vector<TokenId> encode_day(const DayTrajectory& day);
void append_day(std::vector<TokenId>& out, const DayTrajectory& day);

/// Inverse of encode_day. Throws DecodeError on a dow mismatch, a dangling
/// x token, or a slot count other than 48.
DayTrajectory decode_day(std::span<const TokenId> tokens, int expected_dow);

/// An 8-day training sequence:
///   uid digits, <|data|>, 7 x (dow, day body), <|sep|>, dow, day body, <eos>
struct LinearizedWindow {
    std::vector<TokenId> ids;
    std::size_t sep_pos = 0;
};

/// Builds the window covering days start_day .. start_day + 7. Every one of
/// those days must be materialized in `history`.
LinearizedWindow linearize_window(const UserHistory& history, int start_day);

/// Generation prompt: uid digits, <|data|>, the context days, <|sep|>.
std::vector<TokenId> linearize_context(UserId uid, std::span<const DayTrajectory> context_days);

enum class SlotFlag : unsigned char { Skip, Predict };

struct TargetSignature {
    int dow = 0;
    std::array<SlotFlag, kSlotsPerDay> slots{};

    int predict_count() const;
    friend bool operator==(const TargetSignature&, const TargetSignature&) = default;
};

/// Parses "6NNNNxy..." : one dow digit, then 48 items of `N` or `xy`.
TargetSignature parse_signature(std::string_view text);
std::string render_signature(const TargetSignature& sig);
TargetSignature signature_from_day(const DayTrajectory& day);

} // namespace geoformer
