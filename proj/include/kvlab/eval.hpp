#pragma once

#include <algorithm>
#include <cctype>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kvlab/errors.hpp"
#include "kvlab/task.hpp"

namespace kvlab {

// Field Match Ratio evaluation with value normalization, plus the noise-sweep
// and ablation experiment runners.

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

namespace detail {

inline bool all_digits(const std::string& s) {
  if (s.empty()) return false;
  for (char c : s) {
    if (!std::isdigit(static_cast<unsigned char>(c))) return false;
  }
  return true;
}

}  // namespace detail

// Canonical string form: case folding always; dates reformatted to
// YYYY-MM-DD; amounts stripped of leading zeros with exactly two decimals.
// Unparseable values pass through case-folded. Idempotent.
inline std::string normalize_string(std::string value, FieldKind kind) {
  for (auto& c : value) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  switch (kind) {
    case FieldKind::date: {
      std::vector<std::string> groups;
      std::string cur;
      for (char c : value) {
        if (std::isdigit(static_cast<unsigned char>(c))) {
          cur.push_back(c);
        } else if (!cur.empty()) {
          groups.push_back(cur);
          cur.clear();
        }
      }
      if (!cur.empty()) groups.push_back(cur);
      if (groups.size() != 3 || groups[0].size() > 4 || groups[1].size() > 2 || groups[2].size() > 2) {
        return value;
      }
      auto pad = [](const std::string& s, size_t width) {
        std::string out = s;
        while (out.size() < width) out.insert(out.begin(), '0');
        return out;
      };
      return pad(groups[0], 4) + "-" + pad(groups[1], 2) + "-" + pad(groups[2], 2);
    }
    case FieldKind::amount: {
      const auto dot = value.find('.');
      std::string whole = dot == std::string::npos ? value : value.substr(0, dot);
      std::string frac = dot == std::string::npos ? "" : value.substr(dot + 1);
      if (frac.find('.') != std::string::npos) return value;
      if (whole.empty() && frac.empty()) return value;
      if (!whole.empty() && !detail::all_digits(whole)) return value;
      if (!frac.empty() && !detail::all_digits(frac)) return value;
      while (whole.size() > 1 && whole.front() == '0') whole.erase(whole.begin());
      if (whole.empty()) whole = "0";
      while (frac.size() < 2) frac.push_back('0');
      frac.resize(2);
      return whole + "." + frac;
    }
    default:
      return value;
  }
}

inline std::string normalize_value(std::span<const Token> value, FieldKind kind, bool apply_phi = true) {
  const std::string raw = decode_chars(value);  // strips [PAD] and markers
  return apply_phi ? normalize_string(raw, kind) : raw;
}

// ---------------------------------------------------------------------------
// FMR
// ---------------------------------------------------------------------------

struct EvalEntry {
  std::string key;
  FieldKind kind = FieldKind::name;
  std::vector<Token> truth;
  std::optional<std::vector<Token>> predicted;  // absent counts as wrong
};

struct EvalDoc {
  int64_t doc_id = 0;
  std::vector<EvalEntry> entries;
};

struct EvalBatch {
  std::vector<EvalDoc> docs;
  bool apply_phi = true;
};

struct KeyCount {
  std::string key;
  int correct = 0;
  int total = 0;
};

struct FMRReport {
  double micro = 0.0;
  double macro = 0.0;
  std::vector<KeyCount> per_key;
  int doc_count = 0;
};

namespace detail {

inline bool entry_correct(const EvalEntry& e, bool apply_phi) {
  if (!e.predicted) return false;
  return normalize_value(*e.predicted, e.kind, apply_phi) == normalize_value(e.truth, e.kind, apply_phi);
}

}  // namespace detail

inline FMRReport fmr_report(const EvalBatch& batch) {
  std::map<std::string, KeyCount> counts;
  int total = 0;
  for (const auto& doc : batch.docs) {
    for (const auto& e : doc.entries) {
      auto& kc = counts[e.key];
      kc.key = e.key;
      ++kc.total;
      ++total;
      if (detail::entry_correct(e, batch.apply_phi)) ++kc.correct;
    }
  }
  if (total == 0) throw InputError("FMR is undefined for an empty batch");

  FMRReport rep;
  rep.doc_count = static_cast<int>(batch.docs.size());
  int correct = 0;
  double ratio_sum = 0;
  for (auto& [key, kc] : counts) {
    rep.per_key.push_back(kc);
    correct += kc.correct;
    ratio_sum += static_cast<double>(kc.correct) / static_cast<double>(kc.total);
  }
  rep.micro = static_cast<double>(correct) / static_cast<double>(total);
  rep.macro = ratio_sum / static_cast<double>(counts.size());
  return rep;
}

inline double fmr_micro(const EvalBatch& batch) { return fmr_report(batch).micro; }
inline double fmr_macro(const EvalBatch& batch) { return fmr_report(batch).macro; }

// Greedy-decodes the policy over the test documents and scores the parsed
// fields against ground truth.
inline FMRReport evaluate_policy(const PolicyParams& params, std::span<const Document> test_docs,
                                 const Schema& schema, const LabConfig& cfg, uint64_t channel_seed) {
  EvalBatch batch;
  batch.apply_phi = cfg.apply_normalization;
  for (const auto& doc : test_docs) {
    const PseudoLabelSet pseudo = make_merged_pseudo(doc, schema, cfg, channel_seed);
    const Prompt prompt = synthesize_prompt(doc, pseudo, schema);
    const auto decoded = decode(params, prompt.tokens, DecodeMode::greedy(), cfg.max_decode_len);
    const auto parsed = parse_decoded(decoded, schema);
    EvalDoc ed;
    ed.doc_id = doc.doc_id;
    for (size_t i = 0; i < schema.size(); ++i) {
      EvalEntry e;
      e.key = schema[i].key;
      e.kind = schema[i].kind;
      e.truth = find_annotation(doc.truth, schema[i].key).value;
      e.predicted = parsed[i];
      ed.entries.push_back(std::move(e));
    }
    batch.docs.push_back(std::move(ed));
  }
  return fmr_report(batch);
}

// ---------------------------------------------------------------------------
// Shared experiment world
// ---------------------------------------------------------------------------

// Everything derived from one run seed: corpus, split, channel draws,
// pretrained reference.
struct SeedWorld {
  std::vector<Document> corpus;
  std::span<const Document> train;
  std::span<const Document> test;
  uint64_t channel_seed = 0;
  PolicyParams pretrained;
};

// Corpus, split and channel seed only; no training.
inline SeedWorld build_world_base(const Schema& schema, const LabConfig& cfg, uint64_t seed) {
  SeedWorld w;
  w.corpus = generate_corpus(schema, cfg.train_count + cfg.test_count, mix_seed(seed, 0xc0ull));
  w.train = std::span<const Document>(w.corpus.data(), static_cast<size_t>(cfg.train_count));
  w.test = std::span<const Document>(w.corpus.data() + cfg.train_count, static_cast<size_t>(cfg.test_count));
  w.channel_seed = mix_seed(seed, 0xc1ull);
  return w;
}

inline SeedWorld build_seed_world(const Schema& schema, const LabConfig& cfg, uint64_t seed) {
  SeedWorld w = build_world_base(schema, cfg, seed);
  w.pretrained = pretrain_reference(cfg.policy, w.train, schema, cfg, cfg.pretrain_steps, cfg.pretrain_lr,
                                    mix_seed(seed, 0xc2ull))
                     .params;
  return w;
}

// Runs the TLR pipeline against the given noisy annotations of the train
// split and returns the refined annotation lists.
inline std::vector<std::vector<FieldAnnotation>> run_tlr(const SeedWorld& w, const Schema& schema,
                                                         const LabConfig& cfg,
                                                         std::span<const std::vector<FieldAnnotation>> noisy,
                                                         uint64_t seed) {
  const size_t n_expert = static_cast<size_t>(cfg.expert_count) < w.train.size()
                              ? static_cast<size_t>(cfg.expert_count)
                              : w.train.size();
  const auto expert = w.train.subspan(0, n_expert);
  const auto stage1 = stage1_build(expert, schema, cfg.ocr, cfg.mllm, mix_seed(seed, 0x511ull));
  const ReplayBuffer replay = make_replay(schema, cfg, cfg.replay_size, mix_seed(seed, 0x512ull));
  const Stage2Result refiner = stage2_train_refiner(w.pretrained, stage1, schema, cfg.distill, replay,
                                                    cfg.distill_steps, cfg.distill_lr, cfg.distill_batch,
                                                    mix_seed(seed, 0x513ull));
  return stage3_refine(refiner.params, w.train, noisy, schema, cfg.max_decode_len).annotations;
}

// ---------------------------------------------------------------------------
// Noise sweep
// ---------------------------------------------------------------------------

struct SweepRow {
  std::string condition;
  uint64_t seed = 0;
  double fmr_micro = 0.0;
  double fmr_macro = 0.0;
};

struct ConditionMean {
  std::string condition;
  double mean_micro = 0.0;
  double mean_macro = 0.0;
};

struct SweepReport {
  std::vector<SweepRow> rows;
  std::vector<ConditionMean> means;
};

inline std::string ratio_condition(double ratio) {
  return "noise_" + std::to_string(static_cast<int>(std::llround(ratio * 100)));
}

namespace detail {

inline void append_means(SweepReport& rep, std::span<const std::string> order) {
  for (const auto& cond : order) {
    double mi = 0, ma = 0;
    int n = 0;
    for (const auto& row : rep.rows) {
      if (row.condition != cond) continue;
      mi += row.fmr_micro;
      ma += row.fmr_macro;
      ++n;
    }
    if (n > 0) rep.means.push_back({cond, mi / n, ma / n});
  }
}

}  // namespace detail

// For every ratio x seed: inject annotation noise, SFT from the pretrained
// reference on the noisy targets, score on the clean test split. One extra
// condition refines the `noise_ratio` corpus through TLR and fine-tunes on
// the result.
inline SweepReport run_noise_sweep(const LabConfig& cfg, std::span<const double> ratios,
                                   std::span<const uint64_t> seeds) {
  for (double r : ratios) {
    if (r < 0 || r > 1) throw ConfigError("sweep ratios must lie in [0,1]");
  }
  const Schema schema = default_schema();
  const std::string refined_cond = "refined_" + std::to_string(static_cast<int>(std::llround(cfg.noise_ratio * 100)));

  struct Cell {
    size_t seed_idx;
    double ratio;
    bool refined;
    SweepRow row;
    std::string error;
  };
  std::vector<Cell> cells;
  for (size_t s = 0; s < seeds.size(); ++s) {
    for (double r : ratios) cells.push_back({s, r, false, {}, {}});
    cells.push_back({s, cfg.noise_ratio, true, {}, {}});
  }

  // Shared per-seed artifacts first, then the independent cells.
  std::vector<SeedWorld> worlds(seeds.size());
  std::vector<std::vector<std::vector<FieldAnnotation>>> refined(seeds.size());
  const int threads = resolve_threads(cfg);
  parallel_for_indexed(seeds.size(), threads, [&](size_t s) {
    worlds[s] = build_seed_world(schema, cfg, seeds[s]);
    const auto noisy = inject_annotation_noise(truth_annotations(worlds[s].train), schema, cfg.noise_ratio,
                                               mix_seed(seeds[s], 0x401ull,
                                                        static_cast<uint64_t>(std::llround(cfg.noise_ratio * 1000))));
    refined[s] = run_tlr(worlds[s], schema, cfg, noisy, seeds[s]);
  });

  parallel_for_indexed(cells.size(), threads, [&](size_t i) {
    Cell& cell = cells[i];
    const SeedWorld& w = worlds[cell.seed_idx];
    const uint64_t seed = seeds[cell.seed_idx];
    try {
      std::vector<std::vector<FieldAnnotation>> targets;
      if (cell.refined) {
        targets = refined[cell.seed_idx];
      } else {
        targets = inject_annotation_noise(truth_annotations(w.train), schema, cell.ratio,
                                          mix_seed(seed, 0x401ull,
                                                   static_cast<uint64_t>(std::llround(cell.ratio * 1000))));
      }
      const auto pairs = make_training_pairs(w.train, targets, schema, cfg, w.channel_seed);
      const SftResult trained = sft_train(w.pretrained, pairs, std::nullopt, schema, cfg.sft_steps,
                                          cfg.sft_lr, cfg.sft_batch, mix_seed(seed, 0x5f7ull));
      const FMRReport rep = evaluate_policy(trained.params, w.test, schema, cfg, w.channel_seed);
      cell.row = {cell.refined ? refined_cond : ratio_condition(cell.ratio), seed, rep.micro, rep.macro};
    } catch (const std::exception& e) {
      cell.error = e.what();
      cell.row = {cell.refined ? refined_cond : ratio_condition(cell.ratio), seed, -1.0, -1.0};
    }
  });

  SweepReport rep;
  std::vector<std::string> order;
  for (double r : ratios) order.push_back(ratio_condition(r));
  order.push_back(refined_cond);
  for (const auto& cond : order) {
    for (const auto& cell : cells) {
      if (cell.row.condition == cond) rep.rows.push_back(cell.row);
    }
  }
  detail::append_means(rep, order);
  return rep;
}

// ---------------------------------------------------------------------------
// Ablation grid
// ---------------------------------------------------------------------------

struct AblationRow {
  std::string configuration;
  uint64_t seed = 0;
  double fmr_micro = 0.0;
  double fmr_macro = 0.0;
};

struct AblationReport {
  std::vector<AblationRow> rows;
  std::vector<ConditionMean> means;
};

inline std::vector<std::string> default_ablation_grid() {
  return {"baseline",
          "sft_clean",
          "sft_refined",
          "vanilla_rl",
          "tok_grpo",
          "sft_refined+sft",
          "sft_refined+vanilla_rl",
          "vanilla_rl+sft",
          "tok_grpo+sft",
          "sft_clean+tok_grpo",
          "tok_grpo+sft+dyn"};
}

namespace detail {

struct AblationStagePlan {
  std::vector<std::string> stages;
  bool dyn = false;
};

inline AblationStagePlan parse_ablation_config(const std::string& name) {
  AblationStagePlan plan;
  std::string token;
  std::vector<std::string> parts;
  for (char c : name) {
    if (c == '+') {
      parts.push_back(token);
      token.clear();
    } else {
      token.push_back(c);
    }
  }
  parts.push_back(token);
  for (const auto& part : parts) {
    if (part == "dyn") {
      plan.dyn = true;
    } else {
      plan.stages.push_back(part);
    }
  }
  if (plan.stages.empty() || plan.stages.size() > 2) {
    throw ConfigError("unsupported ablation configuration: " + name);
  }
  static const std::vector<std::string> first = {"baseline", "sft_clean", "sft_refined", "vanilla_rl",
                                                 "tok_grpo"};
  static const std::vector<std::string> second = {"sft", "vanilla_rl", "tok_grpo"};
  if (std::find(first.begin(), first.end(), plan.stages[0]) == first.end()) {
    throw ConfigError("unsupported ablation configuration: " + name);
  }
  if (plan.stages.size() == 2 &&
      std::find(second.begin(), second.end(), plan.stages[1]) == second.end()) {
    throw ConfigError("unsupported ablation configuration: " + name);
  }
  if (plan.stages[0] == "baseline" && (plan.stages.size() > 1 || plan.dyn)) {
    throw ConfigError("unsupported ablation configuration: " + name);
  }
  return plan;
}

}  // namespace detail

// Per-seed artifacts shared by every ablation configuration.
struct AblationArtifacts {
  SeedWorld world;
  std::vector<std::vector<FieldAnnotation>> refined;  // TLR over the simulator channel output
  std::vector<SftPair> clean_pairs;                   // expert subset, truth targets
  std::vector<SftPair> refined_pairs;                 // full train split, refined targets
  std::vector<SftPair> consolidation_pairs;           // clean and refined sources jointly
};

inline AblationArtifacts build_ablation_artifacts(const Schema& schema, const LabConfig& cfg, uint64_t seed) {
  AblationArtifacts art;
  art.world = build_seed_world(schema, cfg, seed);

  // The ablation's noisy source is the channel itself: the merged simulator
  // values stand in for the raw annotation dump TLR is asked to clean up.
  std::vector<std::vector<FieldAnnotation>> channel;
  channel.reserve(art.world.train.size());
  for (const auto& doc : art.world.train) {
    channel.push_back(make_merged_pseudo(doc, schema, cfg, art.world.channel_seed).annotations);
  }
  art.refined = run_tlr(art.world, schema, cfg, channel, seed);

  const size_t n_expert = static_cast<size_t>(cfg.expert_count) < art.world.train.size()
                              ? static_cast<size_t>(cfg.expert_count)
                              : art.world.train.size();
  const auto expert = art.world.train.subspan(0, n_expert);
  art.clean_pairs = make_training_pairs(expert, truth_annotations(expert), schema, cfg, art.world.channel_seed);
  art.refined_pairs = make_training_pairs(art.world.train, art.refined, schema, cfg, art.world.channel_seed);
  art.consolidation_pairs = art.clean_pairs;
  art.consolidation_pairs.insert(art.consolidation_pairs.end(), art.refined_pairs.begin(),
                                 art.refined_pairs.end());
  return art;
}

namespace detail {

inline PolicyParams run_ablation_stage(const std::string& stage, bool dyn, const PolicyParams& start,
                                       const AblationArtifacts& art, const Schema& schema,
                                       const LabConfig& cfg, uint64_t seed, int stage_index) {
  const uint64_t stage_seed = mix_seed(seed, 0xab1ull, static_cast<uint64_t>(stage_index));
  if (stage == "sft_clean" || stage == "sft") {
    std::optional<DynPromptConfig> d;
    if (dyn) {
      d = cfg.dyn;
      d->seed = mix_seed(stage_seed, 0xd1ull);
    }
    // A consolidation stage (second position) mixes the clean and refined
    // sources into one SFT phase; the single-stage sft_clean row trains on
    // the expert subset alone.
    const auto& pairs = stage == "sft" ? art.consolidation_pairs : art.clean_pairs;
    return sft_train(start, pairs, d, schema, cfg.sft_steps, cfg.sft_lr, cfg.sft_batch, stage_seed).params;
  }
  if (stage == "sft_refined") {
    return sft_train(start, art.refined_pairs, std::nullopt, schema, cfg.sft_steps, cfg.sft_lr,
                     cfg.sft_batch, stage_seed)
        .params;
  }
  if (stage == "vanilla_rl" || stage == "tok_grpo") {
    std::vector<PseudoLabelSet> prompt_pseudo;
    prompt_pseudo.reserve(art.world.train.size());
    for (const auto& doc : art.world.train) {
      prompt_pseudo.push_back(make_merged_pseudo(doc, schema, cfg, art.world.channel_seed));
    }
    BuildOptions opts;
    opts.max_len = cfg.max_decode_len;
    opts.n_candidates = cfg.rl_candidates;
    opts.temperature = cfg.rl_cand_temperature;
    const auto validators = default_validators(schema);
    const auto pairs = build_preferences(art.world.train, prompt_pseudo, art.refined, schema, start,
                                         validators, opts, mix_seed(stage_seed, 0xb1dull));
    GrpoConfig rl = cfg.grpo;
    rl.sequence_level = (stage == "vanilla_rl");
    if (rl.sequence_level) rl.lambda_kl = cfg.rl_lambda_vanilla;
    rl.seed = stage_seed;
    // The frozen reference is the policy entering this stage: the pretrained
    // backbone for first-stage RL, the consolidated model for later stages.
    return rl_train(start, start, pairs, rl).params;
  }
  throw ConfigError("unsupported ablation stage: " + stage);
}

}  // namespace detail

// Executes every configuration from the same pretrained initialization and
// reports clean-test FMR per cell.
inline AblationReport run_ablation(const LabConfig& cfg, std::span<const std::string> configurations,
                                   std::span<const uint64_t> seeds) {
  const Schema schema = default_schema();
  std::vector<detail::AblationStagePlan> plans;
  for (const auto& name : configurations) plans.push_back(detail::parse_ablation_config(name));

  const int threads = resolve_threads(cfg);
  std::vector<AblationArtifacts> artifacts(seeds.size());
  parallel_for_indexed(seeds.size(), threads, [&](size_t s) {
    artifacts[s] = build_ablation_artifacts(schema, cfg, seeds[s]);
  });

  struct Cell {
    size_t config_idx;
    size_t seed_idx;
    AblationRow row;
  };
  std::vector<Cell> cells;
  for (size_t c = 0; c < configurations.size(); ++c) {
    for (size_t s = 0; s < seeds.size(); ++s) cells.push_back({c, s, {}});
  }
  parallel_for_indexed(cells.size(), threads, [&](size_t i) {
    Cell& cell = cells[i];
    const auto& plan = plans[cell.config_idx];
    const auto& art = artifacts[cell.seed_idx];
    const uint64_t seed = seeds[cell.seed_idx];
    PolicyParams params = art.world.pretrained;
    for (size_t st = 0; st < plan.stages.size(); ++st) {
      if (plan.stages[st] == "baseline") continue;
      const bool dyn_here = plan.dyn && st + 1 == plan.stages.size();
      params = detail::run_ablation_stage(plan.stages[st], dyn_here, params, art, schema, cfg, seed,
                                          static_cast<int>(st));
    }
    const FMRReport rep = evaluate_policy(params, art.world.test, schema, cfg, art.world.channel_seed);
    cell.row = {configurations[cell.config_idx], seed, rep.micro, rep.macro};
  });

  AblationReport rep;
  for (size_t c = 0; c < configurations.size(); ++c) {
    for (size_t s = 0; s < seeds.size(); ++s) {
      for (const auto& cell : cells) {
        if (cell.config_idx == c && cell.seed_idx == s) rep.rows.push_back(cell.row);
      }
    }
  }
  for (const auto& name : configurations) {
    double mi = 0, ma = 0;
    int n = 0;
    for (const auto& row : rep.rows) {
      if (row.configuration != name) continue;
      mi += row.fmr_micro;
      ma += row.fmr_macro;
      ++n;
    }
    if (n > 0) rep.means.push_back({name, mi / n, ma / n});
  }
  return rep;
}

}  // namespace kvlab
