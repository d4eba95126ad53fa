#include "geoformer/linearizer.hpp"

#include "geoformer/error.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>

namespace geoformer {

namespace {

std::string three_digits(int v) {
    char buf[8];
    std::snprintf(buf, sizeof buf, "%03d", v);
    return buf;
}

} // namespace

Vocabulary::Vocabulary() {
    tokens_ = {"<eos>", "<|data|>", "<|sep|>"};
    for (int d = 0; d < kDaysPerWeek; ++d) tokens_.push_back("<|dow" + std::to_string(d) + "|>");
    for (int d = 0; d < 10; ++d) tokens_.push_back(std::to_string(d));
    tokens_.push_back("N");
    for (int v = 0; v < kGridSize; ++v) tokens_.push_back("x" + three_digits(v));
    for (int v = 0; v < kGridSize; ++v) tokens_.push_back("y" + three_digits(v));
    for (std::size_t i = 0; i < tokens_.size(); ++i) ids_.emplace(tokens_[i], static_cast<TokenId>(i));
}

const std::string& Vocabulary::token(TokenId id) const {
    if (id < 0 || id >= size()) throw RangeError("token id " + std::to_string(id) + " outside vocabulary");
    return tokens_[static_cast<std::size_t>(id)];
}

TokenId Vocabulary::id(std::string_view token) const {
    auto it = ids_.find(std::string(token));
    if (it == ids_.end()) throw RangeError("unknown token '" + std::string(token) + "'");
    return it->second;
}

std::string Vocabulary::render(std::span<const TokenId> ids) const {
    std::string out;
    for (auto id : ids) out += token(id);
    return out;
}

std::string Vocabulary::to_json() const {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (std::size_t i = 0; i < tokens_.size(); ++i) j[tokens_[i]] = i;
    return j.dump(1);
}

const Vocabulary& vocabulary() {
    static const Vocabulary v;
    return v;
}

std::vector<TokenId> encode_uid(UserId uid) {
    if (uid < 0) throw RangeError("uid must be non-negative");
    std::vector<TokenId> out;
    for (char c : std::to_string(uid)) out.push_back(tok::digit(c - '0'));
    return out;
}

void append_day(std::vector<TokenId>& out, const DayTrajectory& day) {
    out.push_back(tok::dow(day.dow));
    for (const auto& s : day.slots) {
        if (s) {
            out.push_back(tok::x(s->x()));
            out.push_back(tok::y(s->y()));
        } else {
            out.push_back(tok::kEmpty);
        }
    }
}

std::vector<TokenId> encode_day(const DayTrajectory& day) {
    std::vector<TokenId> out;
    out.reserve(1 + 2 * kSlotsPerDay);
    append_day(out, day);
    return out;
}

DayTrajectory decode_day(std::span<const TokenId> tokens, int expected_dow) {
    if (tokens.empty() || !tok::is_dow(tokens[0])) throw DecodeError("day block must start with a dow token");
    const int dow = tokens[0] - tok::kDow0;
    if (dow != expected_dow)
        throw DecodeError("dow mismatch: expected " + std::to_string(expected_dow) + ", got " +
                          std::to_string(dow));
    DayTrajectory day(dow);
    std::size_t slot = 0;
    for (std::size_t i = 1; i < tokens.size(); ++i) {
        if (slot == kSlotsPerDay) throw DecodeError("more than 48 slot encodings");
        const TokenId t = tokens[i];
        if (t == tok::kEmpty) {
            ++slot;
        } else if (tok::is_x(t)) {
            if (i + 1 >= tokens.size() || !tok::is_y(tokens[i + 1]))
                throw DecodeError("x token at position " + std::to_string(i) + " not followed by a y token");
            day.slots[slot++] = GridCell(tok::x_value(t), tok::y_value(tokens[i + 1]));
            ++i;
        } else {
            throw DecodeError("unexpected token " + vocabulary().token(t) + " inside a day block");
        }
    }
    if (slot != kSlotsPerDay) throw DecodeError("expected 48 slots, got " + std::to_string(slot));
    return day;
}

LinearizedWindow linearize_window(const UserHistory& history, int start_day) {
    for (int d = start_day; d < start_day + kWindowDays; ++d) {
        if (!history.has_day(d))
            throw RangeError("window starting at day " + std::to_string(start_day) + " needs day " +
                             std::to_string(d) + ", which user " + std::to_string(history.uid()) +
                             " does not have");
    }
    LinearizedWindow w;
    w.ids = encode_uid(history.uid());
    w.ids.push_back(tok::kData);
    for (int d = start_day; d < start_day + kContextDays; ++d) append_day(w.ids, history.day(d));
    w.sep_pos = w.ids.size();
    w.ids.push_back(tok::kSep);
    append_day(w.ids, history.day(start_day + kContextDays));
    w.ids.push_back(tok::kEos);
    if (w.ids.size() > static_cast<std::size_t>(kContextLen))
        throw RangeError("window of " + std::to_string(w.ids.size()) + " tokens exceeds the context");
    return w;
}

std::vector<TokenId> linearize_context(UserId uid, std::span<const DayTrajectory> context_days) {
    std::vector<TokenId> out = encode_uid(uid);
    out.push_back(tok::kData);
    for (const auto& d : context_days) append_day(out, d);
    out.push_back(tok::kSep);
    return out;
}

int TargetSignature::predict_count() const {
    int n = 0;
    for (auto f : slots) n += f == SlotFlag::Predict;
    return n;
}

TargetSignature parse_signature(std::string_view text) {
    if (text.empty() || text[0] < '0' || text[0] > '6')
        throw DecodeError("signature must start with a day-of-week digit 0-6");
    TargetSignature sig;
    sig.dow = text[0] - '0';
    std::size_t slot = 0;
    for (std::size_t i = 1; i < text.size(); ++i) {
        if (slot == kSlotsPerDay) throw DecodeError("signature has more than 48 items");
        if (text[i] == 'N') {
            sig.slots[slot++] = SlotFlag::Skip;
        } else if (text[i] == 'x' && i + 1 < text.size() && text[i + 1] == 'y') {
            sig.slots[slot++] = SlotFlag::Predict;
            ++i;
        } else {
            throw DecodeError("illegal character '" + std::string(1, text[i]) + "' at offset " +
                              std::to_string(i) + " in signature");
        }
    }
    if (slot != kSlotsPerDay) throw DecodeError("signature has " + std::to_string(slot) + " items, expected 48");
    return sig;
}

std::string render_signature(const TargetSignature& sig) {
    std::string out(1, static_cast<char>('0' + sig.dow));
    for (auto f : sig.slots) out += f == SlotFlag::Predict ? "xy" : "N";
    return out;
}

TargetSignature signature_from_day(const DayTrajectory& day) {
    TargetSignature sig;
    sig.dow = day.dow;
    for (int t = 0; t < kSlotsPerDay; ++t)
        sig.slots[t] = day.slots[t] ? SlotFlag::Predict : SlotFlag::Skip;
    return sig;
}

} // namespace geoformer
