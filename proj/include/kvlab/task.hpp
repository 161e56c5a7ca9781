#pragma once

#include <atomic>
#include <cstdint>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "kvlab/distill.hpp"
#include "kvlab/grpo.hpp"
#include "kvlab/policy.hpp"
#include "kvlab/sft.hpp"
#include "kvlab/synthdoc.hpp"
#include "kvlab/tlr.hpp"

namespace kvlab {

// The default synthetic world: a six-field invoice-style schema, two
// simulator noise profiles, and the pair builders shared by pretraining,
// SFT, RL and evaluation.
//
// All value spaces produce fixed-width values and every noise channel is
// width-preserving, so prompts share one rigid layout. Each response token
// then sits at a constant distance from its counterpart in the pseudo
// section and in the observation, which is what makes the extraction task
// learnable for a fixed-window policy.

inline const std::vector<std::string>& patient_lexicon() {
  static const std::vector<std::string> words = {
      "aurora", "bennet", "carlos", "dmitri", "esther", "farida", "gustav", "helena",
      "ingrid", "jasper", "kirill", "lorena", "marcus", "nadine", "oliver", "pamela",
      "quincy", "rashid", "serena", "tobias", "ursula", "viktor", "walter", "ximena",
      "yasmin", "zuzana", "adrian", "brigit", "camila", "daniel", "edmund", "fabian"};
  return words;
}

inline const std::vector<std::string>& dept_lexicon() {
  static const std::vector<std::string> words = {"cardio", "dental", "trauma", "vision", "speech", "clinic",
                                                 "triage", "remedy", "physio", "immuno", "neurol", "radiol",
                                                 "pharma", "hemato", "urgent", "biopsy"};
  return words;
}

inline const std::vector<std::string>& item_lexicon() {
  static const std::vector<std::string> words = {"gauzes", "lancet", "saline", "splint", "suture", "tablet",
                                                 "gloves", "oxygen", "plasma", "iodine", "elixir", "lotion",
                                                 "powder", "syrups", "needle", "thermo"};
  return words;
}

inline Schema default_schema() {
  Schema s;
  {
    FieldSchema f;
    f.key = "invoice_no";
    f.kind = FieldKind::code;
    f.space.code_len = 8;
    s.push_back(f);
  }
  {
    FieldSchema f;
    f.key = "date";
    f.kind = FieldKind::date;
    s.push_back(f);
  }
  {
    FieldSchema f;
    f.key = "total";
    f.kind = FieldKind::amount;
    s.push_back(f);
  }
  {
    FieldSchema f;
    f.key = "patient";
    f.kind = FieldKind::name;
    f.space.lexicon = patient_lexicon();
    s.push_back(f);
  }
  {
    FieldSchema f;
    f.key = "dept";
    f.kind = FieldKind::name;
    f.space.lexicon = dept_lexicon();
    s.push_back(f);
  }
  {
    FieldSchema f;
    f.key = "item_cell";
    f.kind = FieldKind::table_cell;
    f.space.lexicon = item_lexicon();
    s.push_back(f);
  }
  return s;
}

// OCR-style channel: mostly character damage.
inline NoiseProfile default_ocr_profile(uint64_t seed = 0) {
  NoiseProfile p;
  p.digit_substitution_rate = 0.18;
  p.truncation_rate = 0.06;
  p.field_swap_rate = 0.03;
  p.plausible_replacement_rate = 0.10;
  p.seed = seed;
  return p;
}

// MLLM-style channel: more field confusion, cleaner characters.
inline NoiseProfile default_mllm_profile(uint64_t seed = 0) {
  NoiseProfile p;
  p.digit_substitution_rate = 0.06;
  p.truncation_rate = 0.03;
  p.field_swap_rate = 0.10;
  p.plausible_replacement_rate = 0.14;
  p.seed = seed;
  return p;
}

// Everything one experiment needs; flat so the plain-text config can map
// onto it key by key.
struct LabConfig {
  PolicyConfig policy;
  int train_count = 700;
  int test_count = 100;
  int expert_count = 100;
  NoiseProfile ocr = default_ocr_profile();
  NoiseProfile mllm = default_mllm_profile();
  DistillConfig distill;
  GrpoConfig grpo;
  DynPromptConfig dyn;
  int pretrain_steps = 600;
  double pretrain_lr = 0.2;
  int pretrain_batch = 8;
  int sft_steps = 700;
  double sft_lr = 0.5;
  int sft_batch = 8;
  int distill_steps = 700;
  double distill_lr = 0.5;
  int distill_batch = 8;
  // Sequence-level preference stages need a stronger anchor to stay stable;
  // chosen separately, as the KL weight is in practice.
  double rl_lambda_vanilla = 0.5;
  int rl_candidates = 4;
  double rl_cand_temperature = 0.5;
  int replay_size = 4;
  int max_decode_len = 64;
  double noise_ratio = 0.3;
  int threads = 0;  // 0 = hardware concurrency
  bool apply_normalization = true;
};

inline int resolve_threads(const LabConfig& cfg) {
  if (cfg.threads > 0) return cfg.threads;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<int>(hw) : 1;
}

// The merged simulator output for one document; the fixed "what the
// annotation systems said" view used in prompts everywhere.
inline PseudoLabelSet make_merged_pseudo(const Document& doc, const Schema& schema, const LabConfig& cfg,
                                         uint64_t channel_seed) {
  NoiseProfile ocr = cfg.ocr;
  NoiseProfile mllm = cfg.mllm;
  ocr.seed = mix_seed(channel_seed, 0x0c4ull);
  mllm.seed = mix_seed(channel_seed, 0x111ull);
  const PseudoLabelSet po = simulate_ocr(doc, schema, ocr, PseudoSource::ocr_sim);
  const PseudoLabelSet pm = simulate_ocr(doc, schema, mllm, PseudoSource::mllm_sim);
  return merge_pseudo_sets(po, pm, schema);
}

// (prompt, target) pairs whose prompts carry the simulated pseudo labels and
// whose targets linearize the given annotations.
inline std::vector<SftPair> make_training_pairs(std::span<const Document> docs,
                                                std::span<const std::vector<FieldAnnotation>> targets,
                                                const Schema& schema, const LabConfig& cfg,
                                                uint64_t channel_seed) {
  if (docs.size() != targets.size()) throw StructuralError("targets must cover the documents");
  std::vector<SftPair> out;
  out.reserve(docs.size());
  for (size_t d = 0; d < docs.size(); ++d) {
    const PseudoLabelSet pseudo = make_merged_pseudo(docs[d], schema, cfg, channel_seed);
    const Prompt prompt = synthesize_prompt(docs[d], pseudo, schema);
    SftPair pair;
    pair.prompt = prompt.tokens;
    pair.field_spans = prompt.field_spans;
    pair.target = linearize_annotations(schema, targets[d]);
    pair.target.push_back(kEos);
    pair.category = static_cast<SftCategory>(d % 3);
    out.push_back(std::move(pair));
  }
  return out;
}

inline std::vector<std::vector<FieldAnnotation>> truth_annotations(std::span<const Document> docs) {
  std::vector<std::vector<FieldAnnotation>> out;
  out.reserve(docs.size());
  for (const auto& d : docs) out.push_back(d.truth);
  return out;
}

// Seeded SGD on sequence NLL over prompt -> truth pairs; the resulting
// parameters play the pretrained-backbone role for every later stage.
inline TrainResult pretrain_reference(const PolicyConfig& config, std::span<const Document> clean_corpus,
                                      const Schema& schema, const LabConfig& cfg, int steps, double lr,
                                      uint64_t seed) {
  if (clean_corpus.empty()) throw ConfigError("pretraining requires a non-empty corpus");
  const auto targets = truth_annotations(clean_corpus);
  const auto sft_pairs = make_training_pairs(clean_corpus, targets, schema, cfg, mix_seed(seed, 0xc4a7ull));
  std::vector<TrainPair> pairs;
  pairs.reserve(sft_pairs.size());
  for (const auto& p : sft_pairs) pairs.push_back({p.prompt, p.target});
  return train_seq_sgd(init_params(config), pairs, steps, lr, cfg.pretrain_batch, mix_seed(seed, 0x97ull));
}

// Small general-data buffer for the logit-preservation term.
inline ReplayBuffer make_replay(const Schema& schema, const LabConfig& cfg, int count, uint64_t seed) {
  if (count < 1) return {};
  const auto docs = generate_corpus(schema, count, mix_seed(seed, 0x9e9ull));
  const auto pairs = make_training_pairs(docs, truth_annotations(docs), schema, cfg, mix_seed(seed, 0x9eaull));
  ReplayBuffer out;
  for (const auto& p : pairs) out.push_back({p.prompt, p.target});
  return out;
}

// Simple indexed fork-join used by the sweep and ablation runners; cells are
// independent and results land in preassigned slots.
template <typename Fn>
inline void parallel_for_indexed(size_t n, int threads, Fn&& fn) {
  if (threads <= 1 || n <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  const size_t n_threads = static_cast<size_t>(threads) < n ? static_cast<size_t>(threads) : n;
  std::atomic<size_t> next{0};
  for (size_t t = 0; t < n_threads; ++t) {
    pool.emplace_back([&]() {
      for (;;) {
        const size_t i = next.fetch_add(1);
        if (i >= n) return;
        fn(i);
      }
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace kvlab
