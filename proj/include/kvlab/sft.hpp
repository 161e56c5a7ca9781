#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kvlab/errors.hpp"
#include "kvlab/policy.hpp"
#include "kvlab/synthdoc.hpp"

namespace kvlab {

// Precision-consolidation SFT: plain sequence training on clean pairs, with
// optional per-step perturbation of the pseudo-label spans in the prompt.
// The observation region and the supervision target are never touched, so a
// perturbed field can only be resolved by reading the observation.

struct DynPromptConfig {
  double perturb_threshold = 0.3;
  double mask_vs_replace_ratio = 0.5;
  uint64_t seed = 0;
};

inline void validate(const DynPromptConfig& c) {
  if (c.perturb_threshold < 0 || c.perturb_threshold > 1) {
    throw ConfigError("perturb_threshold must lie in [0,1]");
  }
  if (c.mask_vs_replace_ratio < 0 || c.mask_vs_replace_ratio > 1) {
    throw ConfigError("mask_vs_replace_ratio must lie in [0,1]");
  }
}

enum class PerturbAction { none, mask, replace };

inline std::string perturb_action_name(PerturbAction a) {
  switch (a) {
    case PerturbAction::none: return "none";
    case PerturbAction::mask: return "mask";
    case PerturbAction::replace: return "replace";
  }
  return "?";
}

struct PerturbationRecord {
  int field_index = 0;
  PerturbAction action = PerturbAction::none;
  double draw = 0.0;
  int begin = 0;  // span position in the perturbed prompt
  int length = 0;
};

struct PerturbResult {
  std::vector<Token> tokens;
  std::vector<FieldSpan> field_spans;  // spans remapped to the perturbed prompt
  std::vector<PerturbationRecord> records;
};

// Each field draws an independent uniform; draws above the threshold are
// modified, either masked with [PAD] or replaced with a plausible wrong value
// of the same kind.
inline PerturbResult perturb_prompt(std::span<const Token> prompt, std::span<const FieldSpan> spans,
                                    const Schema& schema, const DynPromptConfig& config) {
  validate(config);
  for (const auto& span : spans) {
    if (span.begin < 0 || span.length < 1 ||
        static_cast<size_t>(span.begin + span.length) > prompt.size()) {
      throw StructuralError("field span outside prompt bounds");
    }
    if (span.field_index < 0 || span.field_index >= static_cast<int>(schema.size())) {
      throw StructuralError("field span index outside schema");
    }
  }

  Rng rng(mix_seed(config.seed, 0xd92ull));
  PerturbResult out;
  out.tokens.reserve(prompt.size());
  size_t cursor = 0;
  for (const auto& span : spans) {
    // copy untouched region before the span
    out.tokens.insert(out.tokens.end(), prompt.begin() + static_cast<long>(cursor),
                      prompt.begin() + span.begin);
    cursor = static_cast<size_t>(span.begin + span.length);

    PerturbationRecord rec;
    rec.field_index = span.field_index;
    rec.draw = rng.uniform01();
    rec.begin = static_cast<int>(out.tokens.size());
    std::vector<Token> value(prompt.begin() + span.begin, prompt.begin() + static_cast<long>(cursor));
    if (rec.draw > config.perturb_threshold) {
      const bool mask = rng.uniform01() < config.mask_vs_replace_ratio;
      if (mask) {
        rec.action = PerturbAction::mask;
        std::fill(value.begin(), value.end(), kPad);
      } else {
        rec.action = PerturbAction::replace;
        value = plausible_replacement(schema[static_cast<size_t>(span.field_index)], value, rng);
      }
    }
    rec.length = static_cast<int>(value.size());
    out.tokens.insert(out.tokens.end(), value.begin(), value.end());
    out.field_spans.push_back({span.field_index, rec.begin, rec.length});
    out.records.push_back(rec);
  }
  out.tokens.insert(out.tokens.end(), prompt.begin() + static_cast<long>(cursor), prompt.end());
  return out;
}

// Instruction-data category analogue; equal shares, consumed jointly.
enum class SftCategory { free_form, tabular, mixed };

inline std::string sft_category_name(SftCategory c) {
  switch (c) {
    case SftCategory::free_form: return "free_form";
    case SftCategory::tabular: return "tabular";
    case SftCategory::mixed: return "mixed";
  }
  return "?";
}

struct SftPair {
  std::vector<Token> prompt;
  std::vector<Token> target;
  std::vector<FieldSpan> field_spans;
  SftCategory category = SftCategory::free_form;
};

// One perturbation event inside a training step, kept for audit logs.
struct PerturbationLogRow {
  int step = 0;
  int batch_item = 0;
  int field_index = 0;
  PerturbAction action = PerturbAction::none;
  double draw = 0.0;
};

struct SftResult {
  PolicyParams params;
  std::vector<TrainLogRow> log;
  std::vector<PerturbationLogRow> perturbations;  // empty without augmentation
};

// Seeded SGD on sequence NLL; with a DynPrompt config every batch item's
// prompt is freshly perturbed each step while the target stays clean. The
// perturbation stream is separate from the batch-order stream, so disabling
// perturbation (threshold 1.0) reproduces the plain run bit for bit.
inline SftResult sft_train(const PolicyParams& initial, std::span<const SftPair> pairs,
                           const std::optional<DynPromptConfig>& dyn, const Schema& schema, int steps,
                           double lr, int batch_size, uint64_t seed) {
  if (steps < 1) throw ConfigError("steps must be >= 1");
  if (pairs.empty()) throw ConfigError("sft_train requires at least one pair");
  if (dyn) validate(*dyn);

  SftResult res;
  res.params = initial;
  Rng order(mix_seed(seed, 0x07de7ull));
  GradVector grad(res.params.values.size());
  for (int step = 0; step < steps; ++step) {
    std::fill(grad.begin(), grad.end(), 0.0);
    double loss = 0.0;
    for (int b = 0; b < batch_size; ++b) {
      const auto& pair = pairs[order.below(pairs.size())];
      LossGrad lg;
      if (dyn) {
        DynPromptConfig item_cfg = *dyn;
        item_cfg.seed = mix_seed(dyn->seed, static_cast<uint64_t>(step), static_cast<uint64_t>(b));
        const PerturbResult perturbed = perturb_prompt(pair.prompt, pair.field_spans, schema, item_cfg);
        for (const auto& rec : perturbed.records) {
          res.perturbations.push_back({step, b, rec.field_index, rec.action, rec.draw});
        }
        lg = grad_nll(res.params, perturbed.tokens, pair.target);
      } else {
        lg = grad_nll(res.params, pair.prompt, pair.target);
      }
      loss += lg.loss;
      for (size_t i = 0; i < grad.size(); ++i) grad[i] += lg.grad[i];
    }
    const double scale = 1.0 / batch_size;
    loss *= scale;
    if (!std::isfinite(loss)) throw TrainingError("non-finite SFT loss", step);
    for (size_t i = 0; i < grad.size(); ++i) res.params.values[i] -= lr * scale * grad[i];
    res.log.push_back({step, loss});
  }
  return res;
}

}  // namespace kvlab
