// Command-line shell binding the lab modules into reproducible pipelines.
// Every subcommand writes its outputs and a manifest under --out and never
// touches anything outside it.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "kvlab/config.hpp"
#include "kvlab/eval.hpp"
#include "kvlab/manifest.hpp"
#include "kvlab/serialize.hpp"

namespace fs = std::filesystem;
using namespace kvlab;

namespace {

using Clock = std::chrono::steady_clock;

struct GlobalArgs {
  std::string config_path;
  std::string out_dir = "out";
  uint64_t seed = 1;
};

struct RunContext {
  GlobalArgs args;
  LabConfig cfg;
  Manifest manifest;
  Clock::time_point started = Clock::now();

  fs::path out() const { return fs::path(args.out_dir); }

  std::string write_output(const std::string& name, const std::string& text) {
    const fs::path path = out() / name;
    write_text_file(path.string(), text);
    const std::string digest = sha256_hex(text);
    manifest.outputs.emplace_back(name, digest);
    return digest;
  }

  void note_input(const std::string& name, const std::string& path) {
    manifest.inputs.emplace_back(name, sha256_file_hex(path));
  }

  void finish(const std::string& subcommand) {
    manifest.subcommand = subcommand;
    manifest.config_digest = sha256_hex(dump_config(cfg));
    manifest.seeds = {args.seed};
    manifest.wall_time_s = std::chrono::duration<double>(Clock::now() - started).count();
    write_manifest((out() / (subcommand + "_manifest.json")).string(), manifest);
  }
};

RunContext make_context(const GlobalArgs& args) {
  RunContext ctx;
  ctx.args = args;
  ctx.cfg = args.config_path.empty() ? LabConfig{} : load_config(args.config_path);
  fs::create_directories(ctx.out());
  return ctx;
}

std::vector<uint64_t> seed_list(uint64_t base, int count) {
  std::vector<uint64_t> seeds;
  for (int i = 0; i < count; ++i) seeds.push_back(base + static_cast<uint64_t>(i));
  return seeds;
}

// gen: corpus -> corpus.jsonl
int cmd_gen(const GlobalArgs& args) {
  RunContext ctx = make_context(args);
  const Schema schema = default_schema();
  const auto docs = generate_corpus(schema, ctx.cfg.train_count + ctx.cfg.test_count,
                                    mix_seed(args.seed, 0xc0ull));
  ctx.write_output("corpus.jsonl", corpus_to_jsonl(docs));
  ctx.finish("gen");
  return 0;
}

// noise: corpus.jsonl -> noisy annotations
int cmd_noise(const GlobalArgs& args, const std::string& in_path) {
  RunContext ctx = make_context(args);
  const Schema schema = default_schema();
  ctx.note_input("corpus", in_path);
  const auto docs = corpus_from_jsonl(read_text_file(in_path));
  std::vector<std::vector<FieldAnnotation>> truth;
  std::vector<int64_t> ids;
  for (const auto& d : docs) {
    truth.push_back(d.truth);
    ids.push_back(d.doc_id);
  }
  const auto noisy = inject_annotation_noise(
      truth, schema, ctx.cfg.noise_ratio,
      mix_seed(args.seed, 0x401ull, static_cast<uint64_t>(std::llround(ctx.cfg.noise_ratio * 1000))));
  ctx.write_output("noisy.jsonl", annotations_to_jsonl(ids, noisy, "noisy"));
  ctx.finish("noise");
  return 0;
}

// pretrain: default world -> reference checkpoint
int cmd_pretrain(const GlobalArgs& args) {
  RunContext ctx = make_context(args);
  const Schema schema = default_schema();
  const SeedWorld world = build_seed_world(schema, ctx.cfg, args.seed);
  save_checkpoint((ctx.out() / "reference.ckpt").string(), world.pretrained);
  ctx.manifest.outputs.emplace_back("reference.ckpt",
                                    sha256_file_hex((ctx.out() / "reference.ckpt").string()));
  const FMRReport rep = evaluate_policy(world.pretrained, world.test, schema, ctx.cfg, world.channel_seed);
  ctx.write_output("pretrain_eval.json", fmr_report_to_json(rep).dump(2) + "\n");
  ctx.finish("pretrain");
  return 0;
}

// tlr stage1|stage2|stage3|all within the default world
int cmd_tlr(const GlobalArgs& args, const std::string& stage) {
  RunContext ctx = make_context(args);
  const Schema schema = default_schema();
  const SeedWorld world = stage == "stage1" ? build_world_base(schema, ctx.cfg, args.seed)
                                            : build_seed_world(schema, ctx.cfg, args.seed);
  const size_t n_expert = std::min<size_t>(static_cast<size_t>(ctx.cfg.expert_count), world.train.size());
  const auto expert = world.train.subspan(0, n_expert);
  const uint64_t seed = args.seed;

  const bool all = stage == "all";
  std::string stage1_digest, refiner_digest;

  const auto stage1 = stage1_build(expert, schema, ctx.cfg.ocr, ctx.cfg.mllm, mix_seed(seed, 0x511ull));
  if (all || stage == "stage1") {
    std::ostringstream out;
    for (const auto& pair : stage1) {
      Json j;
      j["doc_id"] = pair.doc_id;
      j["prompt"] = pair.prompt;
      j["target"] = pair.target;
      j["pseudo_source"] = pseudo_source_name(pair.pseudo.source);
      out << j.dump() << "\n";
    }
    stage1_digest = ctx.write_output("stage1_pairs.jsonl", out.str());
    if (stage == "stage1") {
      ctx.finish("tlr");
      return 0;
    }
  }

  const ReplayBuffer replay = make_replay(schema, ctx.cfg, ctx.cfg.replay_size, mix_seed(seed, 0x512ull));
  const Stage2Result refiner =
      stage2_train_refiner(world.pretrained, stage1, schema, ctx.cfg.distill, replay, ctx.cfg.distill_steps,
                           ctx.cfg.distill_lr, ctx.cfg.distill_batch, mix_seed(seed, 0x513ull));
  if (all || stage == "stage2") {
    save_checkpoint((ctx.out() / "refiner.ckpt").string(), refiner.params);
    refiner_digest = sha256_file_hex((ctx.out() / "refiner.ckpt").string());
    ctx.manifest.outputs.emplace_back("refiner.ckpt", refiner_digest);
    ctx.write_output("stage2_log.csv", distill_log_to_csv(refiner.log));
    if (stage == "stage2") {
      ctx.finish("tlr");
      return 0;
    }
  }

  const auto truth = truth_annotations(world.train);
  const auto noisy = inject_annotation_noise(
      truth, schema, ctx.cfg.noise_ratio,
      mix_seed(seed, 0x401ull, static_cast<uint64_t>(std::llround(ctx.cfg.noise_ratio * 1000))));
  const RefinedData refined =
      stage3_refine(refiner.params, world.train, noisy, schema, ctx.cfg.max_decode_len);
  std::vector<int64_t> ids;
  for (const auto& d : world.train) ids.push_back(d.doc_id);
  ctx.write_output("noisy.jsonl", annotations_to_jsonl(ids, noisy, "noisy"));
  ctx.write_output("refined.jsonl", annotations_to_jsonl(ids, refined.annotations, "refined"));

  Json pipeline;
  pipeline["stage1_pairs"] = stage1_digest;
  pipeline["refiner_ckpt"] = refiner_digest;
  pipeline["fallback_fields"] = refined.fallback_fields;
  pipeline["flagged_docs"] = refined.flagged_docs;
  ctx.write_output("pipeline.json", pipeline.dump(2) + "\n");
  ctx.finish("tlr");
  return 0;
}

// rl: checkpoint + refined annotations -> RL-trained checkpoint
int cmd_rl(const GlobalArgs& args, const std::string& ckpt_path, const std::string& refined_path,
           bool sequence_level) {
  RunContext ctx = make_context(args);
  const Schema schema = default_schema();
  const SeedWorld world = build_seed_world(schema, ctx.cfg, args.seed);

  PolicyParams start = world.pretrained;
  if (!ckpt_path.empty()) {
    ctx.note_input("checkpoint", ckpt_path);
    start = load_checkpoint(ckpt_path);
  }
  std::vector<std::vector<FieldAnnotation>> refined;
  if (!refined_path.empty()) {
    ctx.note_input("refined", refined_path);
    refined = annotations_from_jsonl(read_text_file(refined_path)).annotations;
  } else {
    refined = truth_annotations(world.train);
  }
  if (refined.size() != world.train.size()) {
    throw StructuralError("refined annotations do not cover the training split");
  }

  std::vector<PseudoLabelSet> prompt_pseudo;
  for (const auto& doc : world.train) {
    prompt_pseudo.push_back(make_merged_pseudo(doc, schema, ctx.cfg, world.channel_seed));
  }
  BuildOptions opts;
  opts.max_len = ctx.cfg.max_decode_len;
  opts.n_candidates = ctx.cfg.rl_candidates;
  opts.temperature = ctx.cfg.rl_cand_temperature;
  const auto validators = default_validators(schema);
  BuildReport report;
  const auto pairs = build_preferences(world.train, prompt_pseudo, refined, schema, start, validators, opts,
                                       mix_seed(args.seed, 0xb1dull), &report);
  ctx.write_output("preferences.jsonl", preference_pairs_to_jsonl(pairs));

  GrpoConfig rl = ctx.cfg.grpo;
  rl.sequence_level = sequence_level;
  if (sequence_level) rl.lambda_kl = ctx.cfg.rl_lambda_vanilla;
  rl.seed = mix_seed(args.seed, 0xab1ull);
  // the stage's entry policy doubles as the frozen reference
  const RlResult res = rl_train(start, start, pairs, rl);
  save_checkpoint((ctx.out() / "rl.ckpt").string(), res.params);
  ctx.manifest.outputs.emplace_back("rl.ckpt", sha256_file_hex((ctx.out() / "rl.ckpt").string()));
  ctx.write_output("rl_log.csv", rl_log_to_csv(res.log));
  const FMRReport rep = evaluate_policy(res.params, world.test, schema, ctx.cfg, world.channel_seed);
  ctx.write_output("rl_eval.json", fmr_report_to_json(rep).dump(2) + "\n");
  ctx.finish("rl");
  return 0;
}

// sft: checkpoint + annotation targets -> fine-tuned checkpoint
int cmd_sft(const GlobalArgs& args, const std::string& ckpt_path, const std::string& targets_path,
            bool dyn_prompt, bool clean_subset) {
  RunContext ctx = make_context(args);
  const Schema schema = default_schema();
  const SeedWorld world = build_seed_world(schema, ctx.cfg, args.seed);

  PolicyParams start = world.pretrained;
  if (!ckpt_path.empty()) {
    ctx.note_input("checkpoint", ckpt_path);
    start = load_checkpoint(ckpt_path);
  }

  std::span<const Document> docs = world.train;
  std::vector<std::vector<FieldAnnotation>> targets;
  if (!targets_path.empty()) {
    ctx.note_input("targets", targets_path);
    targets = annotations_from_jsonl(read_text_file(targets_path)).annotations;
  } else if (clean_subset) {
    const size_t n_expert = std::min<size_t>(static_cast<size_t>(ctx.cfg.expert_count), world.train.size());
    docs = world.train.subspan(0, n_expert);
    targets = truth_annotations(docs);
  } else {
    targets = truth_annotations(world.train);
  }
  if (targets.size() != docs.size()) throw StructuralError("targets do not cover the training documents");

  const auto pairs = make_training_pairs(docs, targets, schema, ctx.cfg, world.channel_seed);
  std::optional<DynPromptConfig> dyn;
  if (dyn_prompt) {
    dyn = ctx.cfg.dyn;
    dyn->seed = mix_seed(args.seed, 0xd1ull);
  }
  const SftResult res = sft_train(start, pairs, dyn, schema, ctx.cfg.sft_steps, ctx.cfg.sft_lr,
                                  ctx.cfg.sft_batch, mix_seed(args.seed, 0x5f7ull));
  save_checkpoint((ctx.out() / "sft.ckpt").string(), res.params);
  ctx.manifest.outputs.emplace_back("sft.ckpt", sha256_file_hex((ctx.out() / "sft.ckpt").string()));
  ctx.write_output("sft_pairs.jsonl", sft_pairs_to_jsonl(pairs));
  ctx.write_output("sft_log.csv", train_log_to_csv(res.log));
  if (dyn) ctx.write_output("perturbations.jsonl", perturbations_to_jsonl(res.perturbations));
  const FMRReport rep = evaluate_policy(res.params, world.test, schema, ctx.cfg, world.channel_seed);
  ctx.write_output("sft_eval.json", fmr_report_to_json(rep).dump(2) + "\n");
  ctx.finish("sft");
  return 0;
}

// eval: checkpoint -> FMR report on the held-out split
int cmd_eval(const GlobalArgs& args, const std::string& ckpt_path, bool raw) {
  RunContext ctx = make_context(args);
  if (raw) ctx.cfg.apply_normalization = false;
  const Schema schema = default_schema();
  const SeedWorld world = build_seed_world(schema, ctx.cfg, args.seed);
  PolicyParams params = world.pretrained;
  if (!ckpt_path.empty()) {
    ctx.note_input("checkpoint", ckpt_path);
    params = load_checkpoint(ckpt_path);
  }
  const FMRReport rep = evaluate_policy(params, world.test, schema, ctx.cfg, world.channel_seed);
  ctx.write_output("eval.json", fmr_report_to_json(rep).dump(2) + "\n");
  std::ostringstream csv;
  csv << "key,correct,total\n";
  for (const auto& kc : rep.per_key) csv << kc.key << ',' << kc.correct << ',' << kc.total << "\n";
  ctx.write_output("eval_per_key.csv", csv.str());
  std::printf("fmr_micro %.4f fmr_macro %.4f\n", rep.micro, rep.macro);
  ctx.finish("eval");
  return 0;
}

// sweep: the annotation-noise experiment
int cmd_sweep(const GlobalArgs& args, int n_seeds, bool check) {
  RunContext ctx = make_context(args);
  const auto seeds = seed_list(args.seed, n_seeds);
  const std::vector<double> ratios = {0.2, 0.3, 0.5, 0.7};
  const SweepReport rep = run_noise_sweep(ctx.cfg, ratios, seeds);
  ctx.write_output("sweep.csv", sweep_report_to_csv(rep));
  ctx.write_output("sweep_summary.json", means_to_json(rep.means, seeds).dump(2) + "\n");
  ctx.manifest.seeds = seeds;
  ctx.finish("sweep");

  if (check) {
    auto mean_of = [&](const std::string& cond) -> double {
      for (const auto& m : rep.means) {
        if (m.condition == cond) return m.mean_micro;
      }
      throw InputError("missing sweep condition: " + cond);
    };
    bool ok = true;
    const double f20 = mean_of("noise_20"), f30 = mean_of("noise_30"), f50 = mean_of("noise_50"),
                 f70 = mean_of("noise_70"), fr = mean_of("refined_30");
    if (!(f20 > f30 && f30 > f50 && f50 > f70)) {
      std::fprintf(stderr, "check failed: degradation not monotone\n");
      ok = false;
    }
    if (!(f70 < f20 - 0.15)) {
      std::fprintf(stderr, "check failed: 70%% noise within 0.15 of 20%%\n");
      ok = false;
    }
    if (!(fr >= f30 + 0.02)) {
      std::fprintf(stderr, "check failed: refined condition does not recover\n");
      ok = false;
    }
    return ok ? 0 : 1;
  }
  return 0;
}

// ablate: the pipeline-configuration grid
int cmd_ablate(const GlobalArgs& args, int n_seeds, bool check) {
  RunContext ctx = make_context(args);
  const auto seeds = seed_list(args.seed, n_seeds);
  const auto grid = default_ablation_grid();
  const AblationReport rep = run_ablation(ctx.cfg, grid, seeds);
  ctx.write_output("ablation.csv", ablation_report_to_csv(rep));
  ctx.write_output("ablation_summary.json", means_to_json(rep.means, seeds).dump(2) + "\n");
  ctx.manifest.seeds = seeds;
  ctx.finish("ablate");

  if (check) {
    auto mean_of = [&](const std::string& cond) -> double {
      for (const auto& m : rep.means) {
        if (m.condition == cond) return m.mean_micro;
      }
      throw InputError("missing ablation configuration: " + cond);
    };
    bool ok = true;
    const double baseline = mean_of("baseline");
    double best = 0;
    for (const auto& m : rep.means) best = std::max(best, m.mean_micro);
    for (const auto& m : rep.means) {
      if (m.condition == "baseline") continue;
      if (!(m.mean_micro >= baseline + 0.10)) {
        std::fprintf(stderr, "check failed: %s does not beat baseline by 0.10\n", m.condition.c_str());
        ok = false;
      }
    }
    if (!(mean_of("tok_grpo+sft") >= mean_of("sft_clean+tok_grpo"))) {
      std::fprintf(stderr, "check failed: RL-before-SFT ordering\n");
      ok = false;
    }
    if (!(mean_of("tok_grpo+sft+dyn") >= best - 0.01)) {
      std::fprintf(stderr, "check failed: full pipeline not within 0.01 of the best cell\n");
      ok = false;
    }
    return ok ? 0 : 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"synthetic key-value extraction lab"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the subcommand name

  GlobalArgs args;
  app.add_option("--config", args.config_path, "key=value configuration file");
  app.add_option("--seed", args.seed, "base seed for the run");
  app.add_option("--out", args.out_dir, "output directory; all files are written under it");
  std::string config_reference_path;
  app.add_option("--config-reference", config_reference_path,
                 "write the generated configuration reference to this path and exit");

  auto* gen = app.add_subcommand("gen", "generate the synthetic corpus");
  auto* noise = app.add_subcommand("noise", "inject annotation noise into a corpus");
  std::string noise_in;
  noise->add_option("--in", noise_in, "corpus JSONL")->required();
  auto* pretrain = app.add_subcommand("pretrain", "train the reference policy");
  auto* tlr = app.add_subcommand("tlr", "run the label-refinement pipeline");
  std::string tlr_stage = "all";
  tlr->add_option("stage", tlr_stage, "stage1|stage2|stage3|all")
      ->check(CLI::IsMember({"stage1", "stage2", "stage3", "all"}));
  auto* rl = app.add_subcommand("rl", "preference-based reinforcement learning");
  std::string rl_ckpt, rl_refined;
  bool rl_vanilla = false;
  rl->add_option("--ckpt", rl_ckpt, "initial checkpoint (default: pretrained reference)");
  rl->add_option("--refined", rl_refined, "refined annotations JSONL (default: ground truth)");
  rl->add_flag("--vanilla", rl_vanilla, "sequence-level aggregation instead of token-wise");
  auto* sft = app.add_subcommand("sft", "supervised fine-tuning");
  std::string sft_ckpt, sft_targets;
  bool sft_dyn = false, sft_clean = false;
  sft->add_option("--ckpt", sft_ckpt, "initial checkpoint (default: pretrained reference)");
  sft->add_option("--targets", sft_targets, "annotation targets JSONL (default: ground truth)");
  sft->add_flag("--dyn", sft_dyn, "enable dynamic prompt augmentation");
  sft->add_flag("--clean", sft_clean, "train on the expert subset only");
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  std::string eval_ckpt;
  bool eval_raw = false;
  eval_cmd->add_option("--ckpt", eval_ckpt, "checkpoint to evaluate (default: pretrained reference)");
  eval_cmd->add_flag("--raw", eval_raw, "disable value normalization");
  auto* sweep = app.add_subcommand("sweep", "annotation-noise sweep with the refined condition");
  int sweep_seeds = 3;
  bool sweep_check = false;
  sweep->add_option("--seeds", sweep_seeds, "number of consecutive seeds");
  sweep->add_flag("--check", sweep_check, "exit nonzero if the expected trends fail");
  auto* ablate = app.add_subcommand("ablate", "pipeline-configuration grid");
  int ablate_seeds = 3;
  bool ablate_check = false;
  ablate->add_option("--seeds", ablate_seeds, "number of consecutive seeds");
  ablate->add_flag("--check", ablate_check, "exit nonzero if the expected orderings fail");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (!config_reference_path.empty()) {
      write_text_file(config_reference_path, config_reference());
      return 0;
    }
    if (gen->parsed()) return cmd_gen(args);
    if (noise->parsed()) return cmd_noise(args, noise_in);
    if (pretrain->parsed()) return cmd_pretrain(args);
    if (tlr->parsed()) return cmd_tlr(args, tlr_stage);
    if (rl->parsed()) return cmd_rl(args, rl_ckpt, rl_refined, rl_vanilla);
    if (sft->parsed()) return cmd_sft(args, sft_ckpt, sft_targets, sft_dyn, sft_clean);
    if (eval_cmd->parsed()) return cmd_eval(args, eval_ckpt, eval_raw);
    if (sweep->parsed()) return cmd_sweep(args, sweep_seeds, sweep_check);
    if (ablate->parsed()) return cmd_ablate(args, ablate_seeds, ablate_check);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
