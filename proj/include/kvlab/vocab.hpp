#pragma once

#include <span>
#include <string>
#include <vector>

#include "kvlab/errors.hpp"

namespace kvlab {

// Fixed 96-token vocabulary shared by the corpus and the policy.
//
//   0..9    digits '0'..'9'
//   10..35  letters 'a'..'z'
//   36..38  '-' '.' ':'
//   39..43  structural markers [BEGIN] [SEP] [ASK] [EOS] [PAD]
//   44..48  field-kind markers <date> <amount> <code> <name> <cell>
//   49..95  per-key markers K0..K46, assigned by schema position

using Token = int;

inline constexpr int kVocabSize = 96;

inline constexpr Token kDigit0 = 0;
inline constexpr Token kLetterA = 10;
inline constexpr Token kDash = 36;
inline constexpr Token kDot = 37;
inline constexpr Token kColon = 38;

inline constexpr Token kBegin = 39;
inline constexpr Token kSep = 40;
inline constexpr Token kAsk = 41;
inline constexpr Token kEos = 42;
inline constexpr Token kPad = 43;

inline constexpr Token kKindMarkerBase = 44;
inline constexpr int kKindCount = 5;
inline constexpr Token kKeyMarkerBase = 49;
inline constexpr int kMaxKeys = kVocabSize - kKeyMarkerBase;

enum class FieldKind { date = 0, amount = 1, code = 2, name = 3, table_cell = 4 };

inline Token kind_marker(FieldKind k) { return kKindMarkerBase + static_cast<int>(k); }

inline bool is_char_token(Token t) { return t >= 0 && t < kBegin; }
inline bool is_kind_marker(Token t) { return t >= kKindMarkerBase && t < kKeyMarkerBase; }
inline bool is_key_marker(Token t) { return t >= kKeyMarkerBase && t < kVocabSize; }
inline bool in_vocab(Token t) { return t >= 0 && t < kVocabSize; }

inline Token key_marker(int field_index) {
  if (field_index < 0 || field_index >= kMaxKeys) throw InputError("key marker index out of range");
  return kKeyMarkerBase + field_index;
}

inline Token char_token(char c) {
  if (c >= '0' && c <= '9') return kDigit0 + (c - '0');
  if (c >= 'a' && c <= 'z') return kLetterA + (c - 'a');
  if (c == '-') return kDash;
  if (c == '.') return kDot;
  if (c == ':') return kColon;
  throw InputError(std::string("character not in vocabulary: '") + c + "'");
}

inline char token_char(Token t) {
  if (t >= kDigit0 && t < kDigit0 + 10) return static_cast<char>('0' + (t - kDigit0));
  if (t >= kLetterA && t < kLetterA + 26) return static_cast<char>('a' + (t - kLetterA));
  if (t == kDash) return '-';
  if (t == kDot) return '.';
  if (t == kColon) return ':';
  throw InputError("token " + std::to_string(t) + " is not a character token");
}

inline std::vector<Token> encode_chars(const std::string& s) {
  std::vector<Token> out;
  out.reserve(s.size());
  for (char c : s) out.push_back(char_token(c));
  return out;
}

// Renders character tokens, skipping markers and [PAD].
inline std::string decode_chars(std::span<const Token> tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (Token t : tokens) {
    if (is_char_token(t)) out.push_back(token_char(t));
  }
  return out;
}

inline std::string kind_name(FieldKind k) {
  switch (k) {
    case FieldKind::date: return "date";
    case FieldKind::amount: return "amount";
    case FieldKind::code: return "code";
    case FieldKind::name: return "name";
    case FieldKind::table_cell: return "table_cell";
  }
  return "?";
}

inline FieldKind kind_from_name(const std::string& s) {
  if (s == "date") return FieldKind::date;
  if (s == "amount") return FieldKind::amount;
  if (s == "code") return FieldKind::code;
  if (s == "name") return FieldKind::name;
  if (s == "table_cell") return FieldKind::table_cell;
  throw InputError("unknown field kind: " + s);
}

inline std::string token_name(Token t) {
  if (is_char_token(t)) return std::string(1, token_char(t));
  switch (t) {
    case kBegin: return "[BEGIN]";
    case kSep: return "[SEP]";
    case kAsk: return "[ASK]";
    case kEos: return "[EOS]";
    case kPad: return "[PAD]";
  }
  if (is_kind_marker(t)) return "<" + kind_name(static_cast<FieldKind>(t - kKindMarkerBase)) + ">";
  if (is_key_marker(t)) return "K" + std::to_string(t - kKeyMarkerBase);
  return "tok" + std::to_string(t);
}

}  // namespace kvlab
