#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "kvlab/distill.hpp"
#include "kvlab/errors.hpp"
#include "kvlab/policy.hpp"
#include "kvlab/synthdoc.hpp"

namespace kvlab {

// Three-stage label refinement: build correction prompts from simulated
// pseudo labels over the expert set, train the refiner with the distillation
// objectives, then run it over noisy annotations at scale.

// Per-field merge of two simulator outputs: the annotation with the higher
// mean agreement wins, ties go to the first (OCR) source.
inline PseudoLabelSet merge_pseudo_sets(const PseudoLabelSet& a, const PseudoLabelSet& b,
                                        const Schema& schema) {
  if (a.doc_id != b.doc_id) throw StructuralError("cannot merge pseudo labels of different documents");
  if (a.annotations.size() != schema.size() || b.annotations.size() != schema.size()) {
    throw StructuralError("pseudo label sets do not cover the schema");
  }
  PseudoLabelSet out;
  out.doc_id = a.doc_id;
  out.source = PseudoSource::merged;

  std::vector<size_t> off_a(schema.size() + 1, 0), off_b(schema.size() + 1, 0);
  for (size_t i = 0; i < schema.size(); ++i) {
    off_a[i + 1] = off_a[i] + find_annotation(a.annotations, schema[i].key).value.size();
    off_b[i + 1] = off_b[i] + find_annotation(b.annotations, schema[i].key).value.size();
  }
  for (size_t i = 0; i < schema.size(); ++i) {
    const FieldAnnotation& fa = find_annotation(a.annotations, schema[i].key);
    const FieldAnnotation& fb = find_annotation(b.annotations, schema[i].key);
    const bool take_a = fa.confidence >= fb.confidence;
    const FieldAnnotation& winner = take_a ? fa : fb;
    out.annotations.push_back(winner);
    const auto& agree = take_a ? a.per_token_agreement : b.per_token_agreement;
    const auto& off = take_a ? off_a : off_b;
    for (size_t p = 0; p < winner.value.size(); ++p) {
      out.per_token_agreement.push_back(agree[off[i] + p]);
    }
  }
  return out;
}

struct Stage1Pair {
  int64_t doc_id = 0;
  std::vector<Token> prompt;
  std::vector<FieldSpan> field_spans;
  std::vector<Token> target;  // expert linearization + [EOS]
  PseudoLabelSet pseudo;      // merged simulator output behind the prompt
  std::vector<FieldAnnotation> expert;
};

// Pairs emitted per expert document: the OCR view, the MLLM view, and their
// merge. Seeing the same document under different error patterns is what
// pushes the refiner to verify against the observation instead of echoing
// whatever pseudo labels it was shown.
inline constexpr int kStage1Arity = 3;

// Stage 1: simulate both channels over the expert documents and turn each
// document into (prompt, expert target) pairs, one per pseudo-label view.
// Pseudo labels are kept structurally complete even where they are wrong.
inline std::vector<Stage1Pair> stage1_build(std::span<const Document> expert_docs, const Schema& schema,
                                            const NoiseProfile& ocr_profile, const NoiseProfile& mllm_profile,
                                            uint64_t seed) {
  if (expert_docs.empty()) throw ConfigError("stage1 requires a non-empty expert set");
  NoiseProfile ocr = ocr_profile;
  NoiseProfile mllm = mllm_profile;
  ocr.seed = mix_seed(seed, 0x0c4ull);
  mllm.seed = mix_seed(seed, 0x111ull);

  std::vector<Stage1Pair> out;
  out.reserve(expert_docs.size() * kStage1Arity);
  for (const auto& doc : expert_docs) {
    const PseudoLabelSet po = simulate_ocr(doc, schema, ocr, PseudoSource::ocr_sim);
    const PseudoLabelSet pm = simulate_ocr(doc, schema, mllm, PseudoSource::mllm_sim);
    const PseudoLabelSet merged = merge_pseudo_sets(po, pm, schema);
    for (const PseudoLabelSet* pseudo : {&po, &pm, &merged}) {
      Stage1Pair pair;
      pair.doc_id = doc.doc_id;
      pair.pseudo = *pseudo;
      const Prompt prompt = synthesize_prompt(doc, pair.pseudo, schema);
      pair.prompt = prompt.tokens;
      pair.field_spans = prompt.field_spans;
      pair.target = linearize_annotations(schema, doc.truth);
      pair.target.push_back(kEos);
      pair.expert = doc.truth;
      out.push_back(std::move(pair));
    }
  }
  return out;
}

struct DistillLogRow {
  int step = 0;
  double l_kd = 0, l_cls = 0, l_seq = 0, l_align = 0, l_sp = 0, l_klp = 0, l_total = 0;
};

struct Stage2Result {
  PolicyParams params;
  std::vector<DistillLogRow> log;
};

// Stage 2: correction distillation. The refiner starts from the pretrained
// reference, which also anchors the stay-close regularizers.
inline Stage2Result stage2_train_refiner(const PolicyParams& reference, std::span<const Stage1Pair> pairs,
                                         const Schema& schema, const DistillConfig& config,
                                         const ReplayBuffer& replay, int steps, double lr, int batch_size,
                                         uint64_t seed) {
  validate(config);
  if (steps < 1) throw ConfigError("steps must be >= 1");
  if (pairs.empty()) throw ConfigError("stage2 requires stage1 pairs");
  if (config.epsilon > 0 && replay.empty()) {
    throw ConfigError("logit preservation enabled but replay buffer is empty");
  }

  Stage2Result res;
  res.params = reference;
  Rng order(mix_seed(seed, 0x57a2ull));
  const size_t n_params = res.params.values.size();

  std::vector<KdSample> kd_batch;
  std::vector<SeqSample> seq_batch;
  std::vector<ClsSample> cls_batch;
  std::vector<FieldAnnotation> pred_cells, truth_cells;
  for (int step = 0; step < steps; ++step) {
    kd_batch.clear();
    seq_batch.clear();
    cls_batch.clear();
    pred_cells.clear();
    truth_cells.clear();
    for (int b = 0; b < batch_size; ++b) {
      const Stage1Pair& pair = pairs[order.below(pairs.size())];
      KdSample kd;
      kd.prompt = pair.prompt;
      kd.target = pair.target;
      kd.teacher = make_teacher(schema, pair.pseudo, pair.target, res.params.config.vocab_size,
                                config.label_smoothing);
      kd_batch.push_back(std::move(kd));
      seq_batch.push_back({pair.prompt, pair.target});

      // One rotating field-kind query per sample. The [SEP] before the key
      // marker keeps this context distinguishable from a response context,
      // where a key marker is always followed by value characters.
      const int f = static_cast<int>(order.below(schema.size()));
      ClsSample cls;
      cls.context = pair.prompt;
      cls.context.push_back(kSep);
      cls.context.push_back(key_marker(f));
      cls.label = kind_marker(schema[static_cast<size_t>(f)].kind);
      cls_batch.push_back(std::move(cls));

      for (size_t i = 0; i < schema.size(); ++i) {
        if (schema[i].kind != FieldKind::table_cell) continue;
        const auto& pc = find_annotation(pair.pseudo.annotations, schema[i].key);
        const auto& tc = find_annotation(pair.expert, schema[i].key);
        if (pc.box && tc.box) {
          pred_cells.push_back(pc);
          truth_cells.push_back(tc);
        }
      }
    }

    DistillComponents comps;
    if (config.alpha > 0) comps.kd = kd_loss(res.params, kd_batch, config);
    if (config.beta_kd > 0) comps.cls = cls_loss(res.params, cls_batch);
    if (config.gamma > 0) comps.seq = seq_loss(res.params, seq_batch);
    if (config.delta > 0 && !pred_cells.empty()) {
      comps.align = align_loss(pred_cells, truth_cells, config.align_l1, config.align_iou, config.align_cls);
    }
    if (config.epsilon > 0) {
      comps.sp = sp_reg(res.params, reference, config.sp_weights);
      comps.klp = klp_loss(res.params, reference, replay);
    }
    const LossGrad total = total_loss(comps, config, n_params);
    if (!std::isfinite(total.loss)) throw TrainingError("non-finite distillation loss", step);
    for (size_t i = 0; i < n_params; ++i) res.params.values[i] -= lr * total.grad[i];
    res.log.push_back({step, comps.kd.loss, comps.cls.loss, comps.seq.loss, comps.align, comps.sp.loss,
                       comps.klp.loss, total.loss});
  }
  return res;
}

struct RefinedData {
  std::vector<std::vector<FieldAnnotation>> annotations;  // one complete list per document
  std::vector<int64_t> flagged_docs;                      // nothing parseable, pseudo passed through
  int fallback_fields = 0;
};

// Stage 3: greedy-decode the refiner on the stage1-format prompt built over
// the annotations being refined; unparseable fields fall back to their input
// pseudo value so the output stays structurally complete.
inline RefinedData stage3_refine(const PolicyParams& refiner, std::span<const Document> docs,
                                 std::span<const std::vector<FieldAnnotation>> noisy, const Schema& schema,
                                 int max_len) {
  if (docs.size() != noisy.size()) throw StructuralError("noisy annotations must cover the documents");
  RefinedData out;
  out.annotations.reserve(docs.size());
  for (size_t d = 0; d < docs.size(); ++d) {
    const PseudoLabelSet pseudo = wrap_annotations(docs[d], schema, noisy[d]);
    const Prompt prompt = synthesize_prompt(docs[d], pseudo, schema);
    const std::vector<Token> decoded = decode(refiner, prompt.tokens, DecodeMode::greedy(), max_len);
    const auto parsed = parse_decoded(decoded, schema);

    std::vector<FieldAnnotation> refined;
    int parsed_fields = 0;
    for (size_t i = 0; i < schema.size(); ++i) {
      const FieldAnnotation& input = find_annotation(pseudo.annotations, schema[i].key);
      FieldAnnotation a = input;
      if (parsed[i] && !parsed[i]->empty()) {
        a.value = *parsed[i];
        a.confidence = 1.0;
        ++parsed_fields;
      } else {
        ++out.fallback_fields;
      }
      refined.push_back(std::move(a));
    }
    if (parsed_fields == 0) out.flagged_docs.push_back(docs[d].doc_id);
    out.annotations.push_back(std::move(refined));
  }
  return out;
}

}  // namespace kvlab
