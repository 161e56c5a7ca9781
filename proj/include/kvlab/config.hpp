#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "kvlab/errors.hpp"
#include "kvlab/task.hpp"

namespace kvlab {

// Plain-text key=value configuration mapped onto LabConfig. '#' starts a
// comment, blank lines are skipped, unknown keys and out-of-range values are
// rejected by name.

namespace config_detail {

enum class Kind { integer, real, boolean };

struct Entry {
  std::string key;
  Kind kind;
  double min;
  double max;
  std::string doc;
  std::function<double(const LabConfig&)> get;
  std::function<void(LabConfig&, double)> set;
};

inline const std::vector<Entry>& registry() {
  static const std::vector<Entry> entries = [] {
    std::vector<Entry> r;
    auto add_int = [&r](const std::string& key, double mn, double mx, const std::string& doc,
                        std::function<double(const LabConfig&)> get,
                        std::function<void(LabConfig&, double)> set) {
      r.push_back({key, Kind::integer, mn, mx, doc, std::move(get), std::move(set)});
    };
    auto add_real = [&r](const std::string& key, double mn, double mx, const std::string& doc,
                         std::function<double(const LabConfig&)> get,
                         std::function<void(LabConfig&, double)> set) {
      r.push_back({key, Kind::real, mn, mx, doc, std::move(get), std::move(set)});
    };
    auto add_bool = [&r](const std::string& key, const std::string& doc,
                         std::function<double(const LabConfig&)> get,
                         std::function<void(LabConfig&, double)> set) {
      r.push_back({key, Kind::boolean, 0, 1, doc, std::move(get), std::move(set)});
    };

    // world
    add_int("train_count", 1, 1e9, "documents in the training split",
            [](const LabConfig& c) { return c.train_count; },
            [](LabConfig& c, double v) { c.train_count = static_cast<int>(v); });
    add_int("test_count", 1, 1e9, "documents in the held-out test split",
            [](const LabConfig& c) { return c.test_count; },
            [](LabConfig& c, double v) { c.test_count = static_cast<int>(v); });
    add_int("expert_count", 1, 1e9, "expert-annotated documents available to the refiner",
            [](const LabConfig& c) { return c.expert_count; },
            [](LabConfig& c, double v) { c.expert_count = static_cast<int>(v); });

    // policy
    add_int("vocab_size", 1, 4096, "token vocabulary size",
            [](const LabConfig& c) { return c.policy.vocab_size; },
            [](LabConfig& c, double v) { c.policy.vocab_size = static_cast<int>(v); });
    add_int("context_window", 1, 4096, "tokens of context visible to the policy",
            [](const LabConfig& c) { return c.policy.context_window; },
            [](LabConfig& c, double v) { c.policy.context_window = static_cast<int>(v); });
    add_int("embed_dim", 1, 4096, "token embedding width",
            [](const LabConfig& c) { return c.policy.embed_dim; },
            [](LabConfig& c, double v) { c.policy.embed_dim = static_cast<int>(v); });
    add_int("hidden_dim", 1, 65536, "hidden layer width",
            [](const LabConfig& c) { return c.policy.hidden_dim; },
            [](LabConfig& c, double v) { c.policy.hidden_dim = static_cast<int>(v); });

    // channels
    add_real("ocr_digit_sub_rate", 0, 1, "OCR channel per-digit substitution rate",
             [](const LabConfig& c) { return c.ocr.digit_substitution_rate; },
             [](LabConfig& c, double v) { c.ocr.digit_substitution_rate = v; });
    add_real("ocr_truncation_rate", 0, 1, "OCR channel per-field truncation rate",
             [](const LabConfig& c) { return c.ocr.truncation_rate; },
             [](LabConfig& c, double v) { c.ocr.truncation_rate = v; });
    add_real("ocr_field_swap_rate", 0, 1, "OCR channel same-kind field swap rate",
             [](const LabConfig& c) { return c.ocr.field_swap_rate; },
             [](LabConfig& c, double v) { c.ocr.field_swap_rate = v; });
    add_real("ocr_plausible_rate", 0, 1, "OCR channel plausible replacement rate",
             [](const LabConfig& c) { return c.ocr.plausible_replacement_rate; },
             [](LabConfig& c, double v) { c.ocr.plausible_replacement_rate = v; });
    add_real("mllm_digit_sub_rate", 0, 1, "MLLM channel per-digit substitution rate",
             [](const LabConfig& c) { return c.mllm.digit_substitution_rate; },
             [](LabConfig& c, double v) { c.mllm.digit_substitution_rate = v; });
    add_real("mllm_truncation_rate", 0, 1, "MLLM channel per-field truncation rate",
             [](const LabConfig& c) { return c.mllm.truncation_rate; },
             [](LabConfig& c, double v) { c.mllm.truncation_rate = v; });
    add_real("mllm_field_swap_rate", 0, 1, "MLLM channel same-kind field swap rate",
             [](const LabConfig& c) { return c.mllm.field_swap_rate; },
             [](LabConfig& c, double v) { c.mllm.field_swap_rate = v; });
    add_real("mllm_plausible_rate", 0, 1, "MLLM channel plausible replacement rate",
             [](const LabConfig& c) { return c.mllm.plausible_replacement_rate; },
             [](LabConfig& c, double v) { c.mllm.plausible_replacement_rate = v; });

    // distillation
    add_real("tau", 1e-9, 1e9, "distillation temperature",
             [](const LabConfig& c) { return c.distill.tau; },
             [](LabConfig& c, double v) { c.distill.tau = v; });
    add_real("conf_threshold", 0, 1, "teacher confidence gate",
             [](const LabConfig& c) { return c.distill.conf_threshold; },
             [](LabConfig& c, double v) { c.distill.conf_threshold = v; });
    add_real("label_smoothing", 0, 0.999, "teacher label smoothing mass",
             [](const LabConfig& c) { return c.distill.label_smoothing; },
             [](LabConfig& c, double v) { c.distill.label_smoothing = v; });
    add_real("alpha", 0, 1e9, "weight of the distillation term",
             [](const LabConfig& c) { return c.distill.alpha; },
             [](LabConfig& c, double v) { c.distill.alpha = v; });
    add_real("beta_kd", 0, 1e9, "weight of the classification term",
             [](const LabConfig& c) { return c.distill.beta_kd; },
             [](LabConfig& c, double v) { c.distill.beta_kd = v; });
    add_real("gamma", 0, 1e9, "weight of the sequence term",
             [](const LabConfig& c) { return c.distill.gamma; },
             [](LabConfig& c, double v) { c.distill.gamma = v; });
    add_real("delta", 0, 1e9, "weight of the alignment term",
             [](const LabConfig& c) { return c.distill.delta; },
             [](LabConfig& c, double v) { c.distill.delta = v; });
    add_real("epsilon", 0, 1e9, "weight of the preservation terms",
             [](const LabConfig& c) { return c.distill.epsilon; },
             [](LabConfig& c, double v) { c.distill.epsilon = v; });
    add_real("align_l1", 0, 1e9, "alignment L1 weight",
             [](const LabConfig& c) { return c.distill.align_l1; },
             [](LabConfig& c, double v) { c.distill.align_l1 = v; });
    add_real("align_iou", 0, 1e9, "alignment IoU weight",
             [](const LabConfig& c) { return c.distill.align_iou; },
             [](LabConfig& c, double v) { c.distill.align_iou = v; });
    add_real("align_cls", 0, 1e9, "alignment kind-mismatch weight",
             [](const LabConfig& c) { return c.distill.align_cls; },
             [](LabConfig& c, double v) { c.distill.align_cls = v; });

    // RL
    add_real("beta_pref", 1e-9, 1e9, "preference sharpness",
             [](const LabConfig& c) { return c.grpo.beta_pref; },
             [](LabConfig& c, double v) { c.grpo.beta_pref = v; });
    add_real("kappa", 0, 1e9, "reference-gap correction",
             [](const LabConfig& c) { return c.grpo.kappa; },
             [](LabConfig& c, double v) { c.grpo.kappa = v; });
    add_real("lambda_kl", 0, 1e9, "KL stabilization weight",
             [](const LabConfig& c) { return c.grpo.lambda_kl; },
             [](LabConfig& c, double v) { c.grpo.lambda_kl = v; });
    add_int("rl_steps", 1, 1e9, "RL optimization steps",
            [](const LabConfig& c) { return c.grpo.steps; },
            [](LabConfig& c, double v) { c.grpo.steps = static_cast<int>(v); });
    add_int("rl_batch", 1, 1e6, "preference pairs per RL step",
            [](const LabConfig& c) { return c.grpo.batch_size; },
            [](LabConfig& c, double v) { c.grpo.batch_size = static_cast<int>(v); });
    add_real("rl_lr", 1e-12, 1e3, "RL learning rate",
             [](const LabConfig& c) { return c.grpo.lr; },
             [](LabConfig& c, double v) { c.grpo.lr = v; });
    add_real("lambda_kl_vanilla", 0, 1e9, "KL weight used by sequence-level RL stages",
             [](const LabConfig& c) { return c.rl_lambda_vanilla; },
             [](LabConfig& c, double v) { c.rl_lambda_vanilla = v; });
    add_int("rl_candidates", 0, 64, "candidate samples per document when building preferences",
            [](const LabConfig& c) { return c.rl_candidates; },
            [](LabConfig& c, double v) { c.rl_candidates = static_cast<int>(v); });
    add_real("rl_cand_temperature", 1e-6, 100, "sampling temperature for preference candidates",
             [](const LabConfig& c) { return c.rl_cand_temperature; },
             [](LabConfig& c, double v) { c.rl_cand_temperature = v; });
    add_bool("freeze_embeddings", "freeze the embedding table during RL",
             [](const LabConfig& c) { return c.grpo.freeze_embeddings ? 1.0 : 0.0; },
             [](LabConfig& c, double v) { c.grpo.freeze_embeddings = v != 0.0; });

    // dynamic prompt augmentation
    add_real("perturb_threshold", 0, 1, "fields with draws above this are modified",
             [](const LabConfig& c) { return c.dyn.perturb_threshold; },
             [](LabConfig& c, double v) { c.dyn.perturb_threshold = v; });
    add_real("mask_vs_replace_ratio", 0, 1, "share of modifications that mask instead of replace",
             [](const LabConfig& c) { return c.dyn.mask_vs_replace_ratio; },
             [](LabConfig& c, double v) { c.dyn.mask_vs_replace_ratio = v; });

    // training loops
    add_int("pretrain_steps", 1, 1e9, "pretraining steps",
            [](const LabConfig& c) { return c.pretrain_steps; },
            [](LabConfig& c, double v) { c.pretrain_steps = static_cast<int>(v); });
    add_real("pretrain_lr", 1e-12, 1e3, "pretraining learning rate",
             [](const LabConfig& c) { return c.pretrain_lr; },
             [](LabConfig& c, double v) { c.pretrain_lr = v; });
    add_int("pretrain_batch", 1, 1e6, "pretraining batch size",
            [](const LabConfig& c) { return c.pretrain_batch; },
            [](LabConfig& c, double v) { c.pretrain_batch = static_cast<int>(v); });
    add_int("sft_steps", 1, 1e9, "SFT steps",
            [](const LabConfig& c) { return c.sft_steps; },
            [](LabConfig& c, double v) { c.sft_steps = static_cast<int>(v); });
    add_real("sft_lr", 1e-12, 1e3, "SFT learning rate",
             [](const LabConfig& c) { return c.sft_lr; },
             [](LabConfig& c, double v) { c.sft_lr = v; });
    add_int("sft_batch", 1, 1e6, "SFT batch size",
            [](const LabConfig& c) { return c.sft_batch; },
            [](LabConfig& c, double v) { c.sft_batch = static_cast<int>(v); });
    add_int("distill_steps", 1, 1e9, "refiner distillation steps",
            [](const LabConfig& c) { return c.distill_steps; },
            [](LabConfig& c, double v) { c.distill_steps = static_cast<int>(v); });
    add_real("distill_lr", 1e-12, 1e3, "refiner distillation learning rate",
             [](const LabConfig& c) { return c.distill_lr; },
             [](LabConfig& c, double v) { c.distill_lr = v; });
    add_int("distill_batch", 1, 1e6, "refiner distillation batch size",
            [](const LabConfig& c) { return c.distill_batch; },
            [](LabConfig& c, double v) { c.distill_batch = static_cast<int>(v); });
    add_int("replay_size", 0, 1e6, "replay buffer documents for logit preservation",
            [](const LabConfig& c) { return c.replay_size; },
            [](LabConfig& c, double v) { c.replay_size = static_cast<int>(v); });

    // running
    add_int("max_decode_len", 1, 1e6, "decode length cap",
            [](const LabConfig& c) { return c.max_decode_len; },
            [](LabConfig& c, double v) { c.max_decode_len = static_cast<int>(v); });
    add_real("noise_ratio", 0, 1, "annotation corruption ratio for the noise and refined conditions",
             [](const LabConfig& c) { return c.noise_ratio; },
             [](LabConfig& c, double v) { c.noise_ratio = v; });
    add_int("threads", 0, 1024, "worker threads for sweep and ablation cells, 0 = auto",
            [](const LabConfig& c) { return c.threads; },
            [](LabConfig& c, double v) { c.threads = static_cast<int>(v); });
    add_bool("apply_normalization", "apply value normalization before field matching",
             [](const LabConfig& c) { return c.apply_normalization ? 1.0 : 0.0; },
             [](LabConfig& c, double v) { c.apply_normalization = v != 0.0; });
    return r;
  }();
  return entries;
}

inline std::string format_value(const Entry& e, double v) {
  if (e.kind == Kind::integer || e.kind == Kind::boolean) {
    return std::to_string(static_cast<long long>(v));
  }
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);  // shortest round-trip form
  return std::string(buf, res.ptr);
}

}  // namespace config_detail

inline LabConfig parse_config_text(const std::string& text) {
  LabConfig cfg;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("malformed config line " + std::to_string(line_no) + ": expected key=value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const config_detail::Entry* entry = nullptr;
    for (const auto& e : config_detail::registry()) {
      if (e.key == key) {
        entry = &e;
        break;
      }
    }
    if (!entry) throw ConfigError("unknown config key: " + key);
    double v = 0;
    try {
      size_t used = 0;
      v = std::stod(value, &used);
      if (used != value.size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw ConfigError("invalid value for " + key + ": '" + value + "'");
    }
    if (entry->kind != config_detail::Kind::real && v != static_cast<double>(static_cast<long long>(v))) {
      throw ConfigError("value for " + key + " must be an integer");
    }
    if (v < entry->min || v > entry->max) {
      throw ConfigError("value for " + key + " out of range [" +
                        config_detail::format_value(*entry, entry->min) + ", " +
                        config_detail::format_value(*entry, entry->max) + "]");
    }
    entry->set(cfg, v);
  }
  return cfg;
}

inline LabConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

inline std::string dump_config(const LabConfig& cfg) {
  std::ostringstream out;
  for (const auto& e : config_detail::registry()) {
    out << e.key << " = " << config_detail::format_value(e, e.get(cfg)) << "\n";
  }
  return out.str();
}

// Generated reference of every key, default, range and meaning.
inline std::string config_reference() {
  const LabConfig defaults;
  std::ostringstream out;
  out << "# Configuration reference (key = default). Ranges are inclusive.\n";
  for (const auto& e : config_detail::registry()) {
    out << e.key << " = " << config_detail::format_value(e, e.get(defaults)) << "\n";
    out << "#   " << e.doc;
    if (e.kind == config_detail::Kind::boolean) {
      out << " (0 or 1)";
    } else {
      out << " (range " << config_detail::format_value(e, e.min) << " .. "
          << config_detail::format_value(e, e.max) << ")";
    }
    out << "\n";
  }
  return out.str();
}

}  // namespace kvlab
