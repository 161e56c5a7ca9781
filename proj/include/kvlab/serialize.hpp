#pragma once

#include <bit>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "kvlab/errors.hpp"
#include "kvlab/eval.hpp"
#include "kvlab/grpo.hpp"
#include "kvlab/sft.hpp"
#include "kvlab/policy.hpp"
#include "kvlab/synthdoc.hpp"
#include "kvlab/tlr.hpp"

namespace kvlab {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

using Json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// JSON-lines corpus and annotation files
// ---------------------------------------------------------------------------

inline Json annotation_to_json(const FieldAnnotation& a) {
  Json j;
  j["key"] = a.key;
  j["value"] = a.value;
  j["kind"] = kind_name(a.kind);
  if (a.box) {
    j["box"] = {a.box->x0, a.box->y0, a.box->x1, a.box->y1};
  } else {
    j["box"] = nullptr;
  }
  j["confidence"] = a.confidence;
  return j;
}

inline FieldAnnotation annotation_from_json(const Json& j) {
  FieldAnnotation a;
  a.key = j.at("key").get<std::string>();
  a.value = j.at("value").get<std::vector<Token>>();
  a.kind = kind_from_name(j.at("kind").get<std::string>());
  if (!j.at("box").is_null()) {
    const auto b = j.at("box").get<std::vector<double>>();
    if (b.size() != 4) throw StructuralError("box must have four coordinates");
    a.box = Box{b[0], b[1], b[2], b[3]};
  }
  a.confidence = j.at("confidence").get<double>();
  return a;
}

inline std::string corpus_to_jsonl(std::span<const Document> docs) {
  std::ostringstream out;
  for (const auto& doc : docs) {
    Json j;
    j["doc_id"] = doc.doc_id;
    j["observation"] = doc.observation;
    Json truth = Json::array();
    for (const auto& a : doc.truth) truth.push_back(annotation_to_json(a));
    j["truth"] = truth;
    out << j.dump() << "\n";
  }
  return out.str();
}

inline std::vector<Document> corpus_from_jsonl(const std::string& text) {
  std::vector<Document> docs;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const Json j = Json::parse(line);
    Document d;
    d.doc_id = j.at("doc_id").get<int64_t>();
    d.observation = j.at("observation").get<std::vector<Token>>();
    for (const auto& a : j.at("truth")) d.truth.push_back(annotation_from_json(a));
    docs.push_back(std::move(d));
  }
  return docs;
}

// Annotation files share the corpus line format plus a source tag.
inline std::string annotations_to_jsonl(std::span<const int64_t> doc_ids,
                                        std::span<const std::vector<FieldAnnotation>> annotations,
                                        const std::string& source) {
  if (doc_ids.size() != annotations.size()) throw StructuralError("doc ids must cover annotation lists");
  std::ostringstream out;
  for (size_t i = 0; i < annotations.size(); ++i) {
    Json j;
    j["doc_id"] = doc_ids[i];
    j["source"] = source;
    Json list = Json::array();
    for (const auto& a : annotations[i]) list.push_back(annotation_to_json(a));
    j["annotations"] = list;
    out << j.dump() << "\n";
  }
  return out.str();
}

struct AnnotationFile {
  std::vector<int64_t> doc_ids;
  std::vector<std::vector<FieldAnnotation>> annotations;
  std::string source;
};

inline AnnotationFile annotations_from_jsonl(const std::string& text) {
  AnnotationFile out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const Json j = Json::parse(line);
    out.doc_ids.push_back(j.at("doc_id").get<int64_t>());
    out.source = j.at("source").get<std::string>();
    std::vector<FieldAnnotation> list;
    for (const auto& a : j.at("annotations")) list.push_back(annotation_from_json(a));
    out.annotations.push_back(std::move(list));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Preference pairs
// ---------------------------------------------------------------------------

inline std::string preference_pairs_to_jsonl(std::span<const PreferencePair> pairs) {
  std::ostringstream out;
  for (const auto& p : pairs) {
    Json j;
    j["prompt"] = p.prompt;
    j["y_plus"] = p.y_plus;
    j["y_minus"] = p.y_minus;
    j["token_weights"] = p.token_weights;
    j["provenance"] = provenance_name(p.provenance);
    out << j.dump() << "\n";
  }
  return out.str();
}

inline std::vector<PreferencePair> preference_pairs_from_jsonl(const std::string& text) {
  std::vector<PreferencePair> pairs;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const Json j = Json::parse(line);
    PreferencePair p;
    p.prompt = j.at("prompt").get<std::vector<Token>>();
    p.y_plus = j.at("y_plus").get<std::vector<Token>>();
    p.y_minus = j.at("y_minus").get<std::vector<Token>>();
    p.token_weights = j.at("token_weights").get<std::vector<double>>();
    const std::string prov = j.at("provenance").get<std::string>();
    if (prov == "refined_vs_candidate") {
      p.provenance = Provenance::refined_vs_candidate;
    } else if (prov == "candidate_vs_candidate") {
      p.provenance = Provenance::candidate_vs_candidate;
    } else if (prov == "validator") {
      p.provenance = Provenance::validator;
    } else {
      throw StructuralError("unknown provenance: " + prov);
    }
    validate(p);
    pairs.push_back(std::move(p));
  }
  return pairs;
}

inline std::string sft_pairs_to_jsonl(std::span<const SftPair> pairs) {
  std::ostringstream out;
  for (const auto& p : pairs) {
    Json j;
    j["prompt"] = p.prompt;
    j["target"] = p.target;
    j["category"] = sft_category_name(p.category);
    out << j.dump() << "\n";
  }
  return out.str();
}

inline std::string perturbations_to_jsonl(std::span<const PerturbationLogRow> rows) {
  std::ostringstream out;
  for (const auto& r : rows) {
    Json j;
    j["step"] = r.step;
    j["batch_item"] = r.batch_item;
    j["field_index"] = r.field_index;
    j["action"] = perturb_action_name(r.action);
    j["draw"] = r.draw;
    out << j.dump() << "\n";
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Checkpoints: int64 header fields then the flat float64 array, little-endian
// ---------------------------------------------------------------------------

inline void save_checkpoint(const std::string& path, const PolicyParams& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write checkpoint: " + path);
  const int64_t header[6] = {static_cast<int64_t>(params.config.vocab_size),
                             static_cast<int64_t>(params.config.context_window),
                             static_cast<int64_t>(params.config.embed_dim),
                             static_cast<int64_t>(params.config.hidden_dim),
                             static_cast<int64_t>(params.config.seed),
                             static_cast<int64_t>(params.values.size())};
  out.write(reinterpret_cast<const char*>(header), sizeof(header));
  out.write(reinterpret_cast<const char*>(params.values.data()),
            static_cast<std::streamsize>(params.values.size() * sizeof(double)));
  if (!out) throw InputError("short write on checkpoint: " + path);
}

inline PolicyParams load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read checkpoint: " + path);
  int64_t header[6];
  in.read(reinterpret_cast<char*>(header), sizeof(header));
  if (!in) throw StructuralError("checkpoint header truncated: " + path);
  PolicyParams p;
  p.config.vocab_size = static_cast<int>(header[0]);
  p.config.context_window = static_cast<int>(header[1]);
  p.config.embed_dim = static_cast<int>(header[2]);
  p.config.hidden_dim = static_cast<int>(header[3]);
  p.config.seed = static_cast<uint64_t>(header[4]);
  validate(p.config);
  const size_t expected = param_count(p.config);
  if (static_cast<size_t>(header[5]) != expected) {
    throw StructuralError("checkpoint param_count " + std::to_string(header[5]) +
                          " does not match config (" + std::to_string(expected) + ")");
  }
  p.values.resize(expected);
  in.read(reinterpret_cast<char*>(p.values.data()), static_cast<std::streamsize>(expected * sizeof(double)));
  if (!in) throw StructuralError("checkpoint payload truncated: " + path);
  return p;
}

// ---------------------------------------------------------------------------
// CSV logs and reports
// ---------------------------------------------------------------------------

namespace detail {

inline std::string csv_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);  // shortest round-trip form
  return std::string(buf, res.ptr);
}

}  // namespace detail

inline std::string distill_log_to_csv(std::span<const DistillLogRow> rows) {
  std::ostringstream out;
  out << "step,l_kd,l_cls,l_seq,l_align,l_sp,l_klp,l_total\n";
  for (const auto& r : rows) {
    out << r.step << ',' << detail::csv_double(r.l_kd) << ',' << detail::csv_double(r.l_cls) << ','
        << detail::csv_double(r.l_seq) << ',' << detail::csv_double(r.l_align) << ','
        << detail::csv_double(r.l_sp) << ',' << detail::csv_double(r.l_klp) << ','
        << detail::csv_double(r.l_total) << "\n";
  }
  return out.str();
}

inline std::string rl_log_to_csv(std::span<const RlLogRow> rows) {
  std::ostringstream out;
  out << "step,loss,l_pref,l_kl,mean_gap\n";
  for (const auto& r : rows) {
    out << r.step << ',' << detail::csv_double(r.loss) << ',' << detail::csv_double(r.l_pref) << ','
        << detail::csv_double(r.l_kl) << ',' << detail::csv_double(r.mean_gap) << "\n";
  }
  return out.str();
}

inline std::string train_log_to_csv(std::span<const TrainLogRow> rows) {
  std::ostringstream out;
  out << "step,loss\n";
  for (const auto& r : rows) out << r.step << ',' << detail::csv_double(r.loss) << "\n";
  return out.str();
}

inline std::string sweep_report_to_csv(const SweepReport& rep) {
  std::ostringstream out;
  out << "condition,seed,fmr_micro,fmr_macro\n";
  for (const auto& r : rep.rows) {
    out << r.condition << ',' << r.seed << ',' << detail::csv_double(r.fmr_micro) << ','
        << detail::csv_double(r.fmr_macro) << "\n";
  }
  return out.str();
}

inline std::string ablation_report_to_csv(const AblationReport& rep) {
  std::ostringstream out;
  out << "condition,seed,fmr_micro,fmr_macro\n";
  for (const auto& r : rep.rows) {
    out << r.configuration << ',' << r.seed << ',' << detail::csv_double(r.fmr_micro) << ','
        << detail::csv_double(r.fmr_macro) << "\n";
  }
  return out.str();
}

inline Json means_to_json(std::span<const ConditionMean> means, std::span<const uint64_t> seeds) {
  Json j;
  j["seeds"] = std::vector<uint64_t>(seeds.begin(), seeds.end());
  Json m = Json::array();
  for (const auto& cm : means) {
    Json row;
    row["condition"] = cm.condition;
    row["mean_fmr_micro"] = cm.mean_micro;
    row["mean_fmr_macro"] = cm.mean_macro;
    m.push_back(row);
  }
  j["means"] = m;
  return j;
}

inline Json fmr_report_to_json(const FMRReport& rep) {
  Json j;
  j["fmr_micro"] = rep.micro;
  j["fmr_macro"] = rep.macro;
  j["doc_count"] = rep.doc_count;
  Json per_key = Json::array();
  for (const auto& kc : rep.per_key) {
    Json row;
    row["key"] = kc.key;
    row["correct"] = kc.correct;
    row["total"] = kc.total;
    per_key.push_back(row);
  }
  j["per_key"] = per_key;
  return j;
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write file: " + path);
  out << text;
  if (!out) throw InputError("short write: " + path);
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace kvlab
