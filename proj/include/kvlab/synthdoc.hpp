#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "kvlab/errors.hpp"
#include "kvlab/rng.hpp"
#include "kvlab/vocab.hpp"

namespace kvlab {

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

struct Box {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  bool valid() const {
    return x0 >= 0 && y0 >= 0 && x1 <= 1 && y1 <= 1 && x0 < x1 && y0 < y1;
  }
};

// Generation rule for one field's value space. Every space produces values of
// a fixed token width; width stability is what keeps prompt layouts rigid
// enough for the tiny policy to exploit.
struct ValueSpace {
  // date
  int year_min = 2018, year_max = 2025;
  // amount, in cents
  long cents_min = 10000, cents_max = 99999;
  // code
  int code_len = 8;
  // name / table_cell
  std::vector<std::string> lexicon;
  // table_cell box rule bounds
  double box_min_extent = 0.08, box_max_extent = 0.20;
};

struct FieldSchema {
  std::string key;
  FieldKind kind = FieldKind::name;
  ValueSpace space;
};

using Schema = std::vector<FieldSchema>;

struct FieldAnnotation {
  std::string key;
  std::vector<Token> value;
  FieldKind kind = FieldKind::name;
  std::optional<Box> box;
  double confidence = 1.0;
};

struct Document {
  int64_t doc_id = 0;
  std::vector<Token> observation;
  std::vector<FieldAnnotation> truth;
};

enum class PseudoSource { ocr_sim, mllm_sim, merged };

inline std::string pseudo_source_name(PseudoSource s) {
  switch (s) {
    case PseudoSource::ocr_sim: return "ocr_sim";
    case PseudoSource::mllm_sim: return "mllm_sim";
    case PseudoSource::merged: return "merged";
  }
  return "?";
}

struct PseudoLabelSet {
  int64_t doc_id = 0;
  std::vector<FieldAnnotation> annotations;
  PseudoSource source = PseudoSource::ocr_sim;
  // Aligned one-to-one with the concatenation of annotation values in schema
  // order: 1.0 where the token equals the truth token.
  std::vector<double> per_token_agreement;
};

struct NoiseProfile {
  double digit_substitution_rate = 0.0;
  double truncation_rate = 0.0;
  double field_swap_rate = 0.0;
  double plausible_replacement_rate = 0.0;
  uint64_t seed = 0;
};

inline void validate(const NoiseProfile& p) {
  auto in01 = [](double r) { return r >= 0.0 && r <= 1.0; };
  if (!in01(p.digit_substitution_rate) || !in01(p.truncation_rate) || !in01(p.field_swap_rate) ||
      !in01(p.plausible_replacement_rate)) {
    throw ConfigError("noise profile rates must lie in [0,1]");
  }
}

inline void validate(const Schema& schema) {
  if (schema.empty()) throw ConfigError("schema must contain at least one field");
  if (static_cast<int>(schema.size()) > kMaxKeys) throw ConfigError("schema exceeds key-marker capacity");
  for (size_t i = 0; i < schema.size(); ++i) {
    for (size_t j = i + 1; j < schema.size(); ++j) {
      if (schema[i].key == schema[j].key) throw ConfigError("duplicate schema key: " + schema[i].key);
    }
    const auto& f = schema[i];
    if ((f.kind == FieldKind::name || f.kind == FieldKind::table_cell) && f.space.lexicon.empty()) {
      throw ConfigError("empty lexicon for field " + f.key);
    }
  }
}

inline int schema_index(const Schema& schema, const std::string& key) {
  for (size_t i = 0; i < schema.size(); ++i) {
    if (schema[i].key == key) return static_cast<int>(i);
  }
  throw StructuralError("key not in schema: " + key);
}

inline const FieldAnnotation& find_annotation(const std::vector<FieldAnnotation>& annots,
                                              const std::string& key) {
  for (const auto& a : annots) {
    if (a.key == key) return a;
  }
  throw StructuralError("annotation list missing key: " + key);
}

// ---------------------------------------------------------------------------
// Value sampling and validity
// ---------------------------------------------------------------------------

namespace detail {

inline std::string two_digits(int v) {
  std::string s = std::to_string(v);
  return s.size() < 2 ? "0" + s : s;
}

}  // namespace detail

inline std::string render_date(int year, int month, int day) {
  return std::to_string(year) + "-" + detail::two_digits(month) + "-" + detail::two_digits(day);
}

inline std::string render_amount_cents(long cents) {
  return std::to_string(cents / 100) + "." + detail::two_digits(static_cast<int>(cents % 100));
}

inline std::vector<Token> sample_value(const FieldSchema& field, Rng& rng) {
  const ValueSpace& sp = field.space;
  switch (field.kind) {
    case FieldKind::date: {
      int y = rng.range(sp.year_min, sp.year_max + 1);
      int m = rng.range(1, 13);
      int d = rng.range(1, 29);
      return encode_chars(render_date(y, m, d));
    }
    case FieldKind::amount: {
      long cents = sp.cents_min + static_cast<long>(rng.below(static_cast<uint64_t>(sp.cents_max - sp.cents_min + 1)));
      return encode_chars(render_amount_cents(cents));
    }
    case FieldKind::code: {
      static const char alphabet[] = "abcdefghijklmnopqrstuvwxyz0123456789";
      std::string s;
      for (int i = 0; i < sp.code_len; ++i) s.push_back(alphabet[rng.below(36)]);
      return encode_chars(s);
    }
    case FieldKind::name:
    case FieldKind::table_cell: {
      return encode_chars(sp.lexicon[rng.below(sp.lexicon.size())]);
    }
  }
  throw InputError("unknown field kind");
}

inline Box sample_box(const ValueSpace& sp, Rng& rng) {
  Box b;
  double w = sp.box_min_extent + rng.uniform01() * (sp.box_max_extent - sp.box_min_extent);
  double h = sp.box_min_extent + rng.uniform01() * (sp.box_max_extent - sp.box_min_extent);
  b.x0 = rng.uniform01() * (1.0 - w);
  b.y0 = rng.uniform01() * (1.0 - h);
  b.x1 = b.x0 + w;
  b.y1 = b.y0 + h;
  return b;
}

// Checks that a value could have been produced by the field's value space.
inline bool value_in_space(const FieldSchema& field, const std::vector<Token>& value) {
  std::string s;
  for (Token t : value) {
    if (!is_char_token(t)) return false;
    s.push_back(token_char(t));
  }
  const ValueSpace& sp = field.space;
  switch (field.kind) {
    case FieldKind::date: {
      if (s.size() != 10 || s[4] != '-' || s[7] != '-') return false;
      for (size_t i : {0u, 1u, 2u, 3u, 5u, 6u, 8u, 9u}) {
        if (!isdigit(static_cast<unsigned char>(s[i]))) return false;
      }
      int y = std::stoi(s.substr(0, 4)), m = std::stoi(s.substr(5, 2)), d = std::stoi(s.substr(8, 2));
      return y >= sp.year_min && y <= sp.year_max && m >= 1 && m <= 12 && d >= 1 && d <= 28;
    }
    case FieldKind::amount: {
      auto dot = s.find('.');
      if (dot == std::string::npos || s.size() < dot + 3 || s.size() != dot + 3) return false;
      for (size_t i = 0; i < s.size(); ++i) {
        if (i == dot) continue;
        if (!isdigit(static_cast<unsigned char>(s[i]))) return false;
      }
      if (dot == 0) return false;
      long cents = std::stol(s.substr(0, dot)) * 100 + std::stol(s.substr(dot + 1));
      return cents >= sp.cents_min && cents <= sp.cents_max;
    }
    case FieldKind::code: {
      if (static_cast<int>(s.size()) != sp.code_len) return false;
      for (char c : s) {
        if (!(isdigit(static_cast<unsigned char>(c)) || (c >= 'a' && c <= 'z'))) return false;
      }
      return true;
    }
    case FieldKind::name:
    case FieldKind::table_cell:
      return std::find(sp.lexicon.begin(), sp.lexicon.end(), s) != sp.lexicon.end();
  }
  return false;
}

// Kind-consistent wrong value: rejection-sample up to 16 fresh draws, then
// force a single in-space edit so the result always differs from `original`.
inline std::vector<Token> plausible_replacement(const FieldSchema& field,
                                                const std::vector<Token>& original, Rng& rng) {
  for (int attempt = 0; attempt < 16; ++attempt) {
    auto v = sample_value(field, rng);
    if (v != original) return v;
  }
  std::vector<Token> v = original;
  const ValueSpace& sp = field.space;
  switch (field.kind) {
    case FieldKind::date: {
      int d = (token_char(v[8]) - '0') * 10 + (token_char(v[9]) - '0');
      d = d == 28 ? 1 : d + 1;
      v[8] = char_token(static_cast<char>('0' + d / 10));
      v[9] = char_token(static_cast<char>('0' + d % 10));
      return v;
    }
    case FieldKind::amount: {
      int last = v.back();
      v.back() = kDigit0 + ((last - kDigit0 + 1) % 10);
      return v;
    }
    case FieldKind::code: {
      Token t = v.back();
      v.back() = (t >= kLetterA && t < kLetterA + 25) ? t + 1 : kLetterA;
      return v;
    }
    case FieldKind::name:
    case FieldKind::table_cell: {
      std::string cur = decode_chars(v);
      for (size_t i = 0; i < sp.lexicon.size(); ++i) {
        if (sp.lexicon[i] == cur) return encode_chars(sp.lexicon[(i + 1) % sp.lexicon.size()]);
      }
      return encode_chars(sp.lexicon[0]);
    }
  }
  return v;
}

// ---------------------------------------------------------------------------
// Linearization and corpus generation
// ---------------------------------------------------------------------------

// Schema-order key-value serialization: K_i followed by value tokens. Used for
// observations, the pseudo section of prompts, and decode targets alike, so
// that the three regions share one rigid layout.
inline std::vector<Token> linearize_annotations(const Schema& schema,
                                                const std::vector<FieldAnnotation>& annots) {
  std::vector<Token> out;
  for (size_t i = 0; i < schema.size(); ++i) {
    const FieldAnnotation& a = find_annotation(annots, schema[i].key);
    if (a.value.empty()) throw StructuralError("empty annotation value for key: " + schema[i].key);
    out.push_back(key_marker(static_cast<int>(i)));
    out.insert(out.end(), a.value.begin(), a.value.end());
  }
  return out;
}

namespace detail {

inline bool contains_subsequence(const std::vector<Token>& haystack, const std::vector<Token>& needle,
                                 int* count_out = nullptr) {
  int count = 0;
  if (needle.empty() || haystack.size() < needle.size()) return false;
  for (size_t i = 0; i + needle.size() <= haystack.size(); ++i) {
    if (std::equal(needle.begin(), needle.end(), haystack.begin() + static_cast<long>(i))) ++count;
  }
  if (count_out) *count_out = count;
  return count > 0;
}

}  // namespace detail

inline std::vector<Document> generate_corpus(const Schema& schema, int count, uint64_t seed) {
  validate(schema);
  if (count < 1) throw ConfigError("corpus count must be >= 1");
  std::vector<Document> docs;
  docs.reserve(static_cast<size_t>(count));
  for (int d = 0; d < count; ++d) {
    Rng rng(mix_seed(seed, 0xd0c5ull, static_cast<uint64_t>(d)));
    Document doc;
    doc.doc_id = d;
    for (int attempt = 0;; ++attempt) {
      doc.truth.clear();
      for (const auto& field : schema) {
        FieldAnnotation a;
        a.key = field.key;
        a.kind = field.kind;
        a.value = sample_value(field, rng);
        if (field.kind == FieldKind::table_cell) a.box = sample_box(field.space, rng);
        a.confidence = 1.0;
        doc.truth.push_back(std::move(a));
      }
      doc.observation = linearize_annotations(schema, doc.truth);
      bool clean = true;
      for (const auto& a : doc.truth) {
        int occurrences = 0;
        detail::contains_subsequence(doc.observation, a.value, &occurrences);
        if (occurrences != 1) {
          clean = false;
          break;
        }
      }
      if (clean) break;
      if (attempt >= 64) throw StructuralError("unable to build collision-free document");
    }
    docs.push_back(std::move(doc));
  }
  return docs;
}

// ---------------------------------------------------------------------------
// Channel simulation
// ---------------------------------------------------------------------------

inline PseudoLabelSet simulate_ocr(const Document& doc, const Schema& schema,
                                   const NoiseProfile& profile, PseudoSource source) {
  validate(profile);
  validate(schema);
  if (doc.truth.size() != schema.size()) throw StructuralError("document does not match schema");

  Rng rng(mix_seed(profile.seed, static_cast<uint64_t>(doc.doc_id),
                   static_cast<uint64_t>(source) + 0xc4a11ull));
  PseudoLabelSet out;
  out.doc_id = doc.doc_id;
  out.source = source;
  out.annotations.clear();
  for (const auto& field : schema) out.annotations.push_back(find_annotation(doc.truth, field.key));

  // Field swaps between same-kind keys.
  for (size_t i = 0; i < schema.size(); ++i) {
    for (size_t j = i + 1; j < schema.size(); ++j) {
      if (schema[i].kind != schema[j].kind) continue;
      if (rng.uniform01() < profile.field_swap_rate) {
        std::swap(out.annotations[i].value, out.annotations[j].value);
      }
    }
  }

  // Per-field plausible replacement; a corrupted table cell also gets a fresh
  // box, standing in for a misaligned detection.
  for (size_t i = 0; i < schema.size(); ++i) {
    if (rng.uniform01() < profile.plausible_replacement_rate) {
      out.annotations[i].value = plausible_replacement(schema[i], out.annotations[i].value, rng);
      if (schema[i].kind == FieldKind::table_cell) out.annotations[i].box = sample_box(schema[i].space, rng);
    }
  }

  // Per-field truncation: the suffix is blanked with [PAD], width preserved.
  for (size_t i = 0; i < schema.size(); ++i) {
    auto& v = out.annotations[i].value;
    if (v.size() > 1 && rng.uniform01() < profile.truncation_rate) {
      int cut = rng.range(1, static_cast<int>(v.size()));
      for (size_t p = static_cast<size_t>(cut); p < v.size(); ++p) v[p] = kPad;
    }
  }

  // Per-digit substitution.
  for (auto& a : out.annotations) {
    for (auto& t : a.value) {
      if (t >= kDigit0 && t < kDigit0 + 10 && rng.uniform01() < profile.digit_substitution_rate) {
        t = kDigit0 + static_cast<Token>((t - kDigit0 + 1 + rng.below(9)) % 10);
      }
    }
  }

  const double wrong_agreement = source == PseudoSource::mllm_sim ? 0.5 : 0.6;
  out.per_token_agreement.clear();
  for (size_t i = 0; i < schema.size(); ++i) {
    const auto& truth = find_annotation(doc.truth, schema[i].key).value;
    const auto& got = out.annotations[i].value;
    double sum = 0;
    for (size_t p = 0; p < got.size(); ++p) {
      double agree = (p < truth.size() && got[p] == truth[p]) ? 1.0 : wrong_agreement;
      out.per_token_agreement.push_back(agree);
      sum += agree;
    }
    out.annotations[i].confidence = got.empty() ? 0.0 : sum / static_cast<double>(got.size());
  }
  return out;
}

// Replaces exactly round(ratio * total pairs) values with kind-consistent
// plausible-but-wrong alternatives; selection is a seeded shuffle.
inline std::vector<std::vector<FieldAnnotation>> inject_annotation_noise(
    const std::vector<std::vector<FieldAnnotation>>& truth_sets, const Schema& schema, double ratio,
    uint64_t seed) {
  if (ratio < 0.0 || ratio > 1.0) throw ConfigError("noise ratio must lie in [0,1]");
  validate(schema);
  std::vector<std::vector<FieldAnnotation>> out = truth_sets;

  std::vector<std::pair<int, int>> slots;
  for (size_t d = 0; d < out.size(); ++d) {
    for (size_t f = 0; f < out[d].size(); ++f) slots.emplace_back(static_cast<int>(d), static_cast<int>(f));
  }
  const auto n_corrupt = static_cast<size_t>(std::llround(ratio * static_cast<double>(slots.size())));

  Rng rng(mix_seed(seed, 0x4015eull, slots.size()));
  for (size_t i = slots.size(); i > 1; --i) {
    std::swap(slots[i - 1], slots[rng.below(i)]);
  }
  for (size_t i = 0; i < n_corrupt; ++i) {
    auto [d, f] = slots[i];
    auto& a = out[static_cast<size_t>(d)][static_cast<size_t>(f)];
    const FieldSchema& field = schema[static_cast<size_t>(schema_index(schema, a.key))];
    a.value = plausible_replacement(field, a.value, rng);
    if (field.kind == FieldKind::table_cell) a.box = sample_box(field.space, rng);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Prompt synthesis
// ---------------------------------------------------------------------------

// Pseudo-label value region inside a prompt.
struct FieldSpan {
  int field_index = 0;
  int begin = 0;
  int length = 0;
};

struct Prompt {
  std::vector<Token> tokens;
  std::vector<FieldSpan> field_spans;  // one per schema field, schema order
  int observation_end = 0;             // prompt[1 .. observation_end) is the observation
};

// [BEGIN] observation [SEP] pseudo-section [ASK], pseudo section in schema
// order using the shared linearization.
inline Prompt synthesize_prompt(const Document& doc, const PseudoLabelSet& pseudo, const Schema& schema) {
  if (pseudo.doc_id != doc.doc_id) throw StructuralError("pseudo label set does not belong to document");
  if (pseudo.annotations.empty()) throw StructuralError("pseudo label set has no annotations");
  if (pseudo.annotations.size() != schema.size()) {
    throw StructuralError("pseudo label set does not cover the schema");
  }
  for (const auto& a : pseudo.annotations) {
    schema_index(schema, a.key);  // throws on unknown keys
  }

  Prompt p;
  p.tokens.push_back(kBegin);
  p.tokens.insert(p.tokens.end(), doc.observation.begin(), doc.observation.end());
  p.observation_end = static_cast<int>(p.tokens.size());
  p.tokens.push_back(kSep);
  for (size_t i = 0; i < schema.size(); ++i) {
    const FieldAnnotation& a = find_annotation(pseudo.annotations, schema[i].key);
    if (a.value.empty()) throw StructuralError("empty pseudo value for key: " + schema[i].key);
    p.tokens.push_back(key_marker(static_cast<int>(i)));
    FieldSpan span;
    span.field_index = static_cast<int>(i);
    span.begin = static_cast<int>(p.tokens.size());
    span.length = static_cast<int>(a.value.size());
    p.field_spans.push_back(span);
    p.tokens.insert(p.tokens.end(), a.value.begin(), a.value.end());
  }
  p.tokens.push_back(kAsk);
  return p;
}

// Inverse of linearize_annotations for decoded output: a key marker opens a
// field (first occurrence wins), its value is the run of character tokens up
// to the next marker or [EOS]. Fields that never appear or collect no
// characters come back empty.
inline std::vector<std::optional<std::vector<Token>>> parse_decoded(std::span<const Token> tokens,
                                                                    const Schema& schema) {
  std::vector<std::optional<std::vector<Token>>> out(schema.size());
  int field = -1;
  std::vector<Token> current;
  auto flush = [&]() {
    if (field >= 0 && field < static_cast<int>(schema.size()) && !current.empty() &&
        !out[static_cast<size_t>(field)].has_value()) {
      out[static_cast<size_t>(field)] = current;
    }
    current.clear();
  };
  for (Token t : tokens) {
    if (is_key_marker(t)) {
      flush();
      field = t - kKeyMarkerBase;
      continue;
    }
    if (t == kEos) break;
    if (is_char_token(t) && field >= 0) current.push_back(t);
  }
  flush();
  return out;
}

// Wraps plain annotation lists (noisy or refined data) so they can feed
// prompt synthesis; agreement is computed against the document truth.
inline PseudoLabelSet wrap_annotations(const Document& doc, const Schema& schema,
                                       const std::vector<FieldAnnotation>& annots,
                                       PseudoSource source = PseudoSource::merged) {
  PseudoLabelSet out;
  out.doc_id = doc.doc_id;
  out.source = source;
  for (size_t i = 0; i < schema.size(); ++i) {
    out.annotations.push_back(find_annotation(annots, schema[i].key));
  }
  for (size_t i = 0; i < schema.size(); ++i) {
    const auto& truth = find_annotation(doc.truth, schema[i].key).value;
    const auto& got = out.annotations[i].value;
    double sum = 0;
    for (size_t p = 0; p < got.size(); ++p) {
      double agree = (p < truth.size() && got[p] == truth[p]) ? 1.0 : 0.5;
      out.per_token_agreement.push_back(agree);
      sum += agree;
    }
    out.annotations[i].confidence = got.empty() ? 0.0 : sum / static_cast<double>(got.size());
  }
  return out;
}

}  // namespace kvlab
