#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "kvlab/errors.hpp"
#include "kvlab/policy.hpp"
#include "kvlab/synthdoc.hpp"

namespace kvlab {

// Token-wise preference optimization: per-token log-probability gaps with
// reference correction, sigmoid preference loss with confidence weights, and
// symmetric KL stabilization toward the frozen reference policy.

struct GrpoConfig {
  double beta_pref = 1.0;  // preference sharpness
  double kappa = 1.0;      // reference-gap correction
  double lambda_kl = 0.1;
  int steps = 400;
  int batch_size = 8;
  double lr = 0.5;
  uint64_t seed = 7;
  // Vanilla-RL ablation: gaps are summed over the sequence before the
  // sigmoid and the per-token weights collapse to their mean.
  bool sequence_level = false;
  // Analogue of keeping the backbone's encoder frozen during RL.
  bool freeze_embeddings = false;
};

inline void validate(const GrpoConfig& c) {
  if (!(c.beta_pref > 0)) throw ConfigError("beta_pref must be > 0");
  if (c.kappa < 0) throw ConfigError("kappa must be >= 0");
  if (c.lambda_kl < 0) throw ConfigError("lambda_kl must be >= 0");
  if (c.batch_size < 1) throw ConfigError("batch_size must be >= 1");
}

enum class Provenance { refined_vs_candidate, candidate_vs_candidate, validator };

inline std::string provenance_name(Provenance p) {
  switch (p) {
    case Provenance::refined_vs_candidate: return "refined_vs_candidate";
    case Provenance::candidate_vs_candidate: return "candidate_vs_candidate";
    case Provenance::validator: return "validator";
  }
  return "?";
}

struct PreferencePair {
  std::vector<Token> prompt;
  std::vector<Token> y_plus;
  std::vector<Token> y_minus;
  std::vector<double> token_weights;  // length = min(|y+|, |y-|)
  Provenance provenance = Provenance::refined_vs_candidate;
};

inline size_t effective_len(const PreferencePair& p) {
  return p.y_plus.size() < p.y_minus.size() ? p.y_plus.size() : p.y_minus.size();
}

inline void validate(const PreferencePair& p) {
  if (p.y_plus.empty() || p.y_minus.empty()) throw StructuralError("preference responses must be non-empty");
  if (p.y_plus == p.y_minus) throw StructuralError("preference pair requires y_plus != y_minus");
  if (p.token_weights.size() != effective_len(p)) {
    throw StructuralError("token_weights length must equal min response length");
  }
  for (double w : p.token_weights) {
    if (w < 0 || w > 1) throw StructuralError("token weights must lie in [0,1]");
  }
}

// ---------------------------------------------------------------------------
// Preference-pair construction
// ---------------------------------------------------------------------------

struct ResponseValidator {
  std::string name;
  std::function<bool(const std::vector<Token>&)> ok;
};

// Format and consistency validators over decoded responses.
inline std::vector<ResponseValidator> default_validators(const Schema& schema) {
  std::vector<ResponseValidator> out;
  out.push_back({"date_format", [schema](const std::vector<Token>& resp) {
                   auto parsed = parse_decoded(resp, schema);
                   for (size_t i = 0; i < schema.size(); ++i) {
                     if (schema[i].kind != FieldKind::date || !parsed[i]) continue;
                     const std::string s = decode_chars(*parsed[i]);
                     if (s.size() != 10 || s[4] != '-' || s[7] != '-') return false;
                     for (size_t p : {0u, 1u, 2u, 3u, 5u, 6u, 8u, 9u}) {
                       if (!isdigit(static_cast<unsigned char>(s[p]))) return false;
                     }
                     const int m = std::stoi(s.substr(5, 2)), d = std::stoi(s.substr(8, 2));
                     if (m < 1 || m > 12 || d < 1 || d > 31) return false;
                   }
                   return true;
                 }});
  out.push_back({"amount_format", [schema](const std::vector<Token>& resp) {
                   auto parsed = parse_decoded(resp, schema);
                   for (size_t i = 0; i < schema.size(); ++i) {
                     if (schema[i].kind != FieldKind::amount || !parsed[i]) continue;
                     const std::string s = decode_chars(*parsed[i]);
                     const auto dot = s.find('.');
                     if (dot == std::string::npos || dot == 0 || s.size() != dot + 3) return false;
                     for (size_t p = 0; p < s.size(); ++p) {
                       if (p == dot) continue;
                       if (!isdigit(static_cast<unsigned char>(s[p]))) return false;
                     }
                   }
                   return true;
                 }});
  out.push_back({"field_consistency", [schema](const std::vector<Token>& resp) {
                   auto parsed = parse_decoded(resp, schema);
                   for (size_t i = 0; i < schema.size(); ++i) {
                     if (!parsed[i] || parsed[i]->empty()) return false;
                     for (Token t : *parsed[i]) {
                       const char c = token_char(t);
                       const bool letter = c >= 'a' && c <= 'z';
                       const bool digit = c >= '0' && c <= '9';
                       switch (schema[i].kind) {
                         case FieldKind::code:
                           if (!letter && !digit) return false;
                           break;
                         case FieldKind::name:
                         case FieldKind::table_cell:
                           if (!letter) return false;
                           break;
                         default: break;
                       }
                     }
                   }
                   return true;
                 }});
  return out;
}

enum class WeightMode { mask, confidence };

struct BuildOptions {
  int n_candidates = 4;
  // Near-greedy sampling keeps candidates plausible near-misses instead of
  // noise, which is what makes them useful negatives.
  double temperature = 0.5;
  int max_len = 64;
  WeightMode weight_mode = WeightMode::mask;
};

struct BuildReport {
  int emitted = 0;
  int skipped = 0;
  int from_validator = 0;
  int from_exact_match = 0;
  int from_corruption = 0;
};

namespace detail {

// Preference weights live on field-value tokens where the two responses
// actually disagree; structural tokens and agreeing spans carry none, keeping
// the preference signal localized to the contested fields.
inline std::vector<double> make_token_weights(const PreferencePair& pair, const Schema& schema,
                                              const PseudoLabelSet& pseudo, WeightMode mode) {
  const size_t T = effective_len(pair);
  std::vector<double> w(T, 0.0);
  int field = -1;
  for (size_t t = 0; t < T; ++t) {
    const Token tok = pair.y_plus[t];
    if (is_key_marker(tok)) {
      field = tok - kKeyMarkerBase;
      continue;  // structural token, weight stays 0
    }
    if (!is_char_token(tok)) continue;
    if (pair.y_plus[t] == pair.y_minus[t]) continue;  // no preference information here
    if (mode == WeightMode::mask) {
      w[t] = 1.0;
    } else if (field >= 0 && field < static_cast<int>(schema.size())) {
      w[t] = find_annotation(pseudo.annotations, schema[static_cast<size_t>(field)].key).confidence;
    }
  }
  return w;
}

}  // namespace detail

// y+ is the linearized refined annotation; y- is the first sampled candidate
// that fails a validator, else the first that misses exact match, else a
// single-field corruption of y+.
inline std::vector<PreferencePair> build_preferences(
    std::span<const Document> docs, std::span<const PseudoLabelSet> prompt_pseudo,
    std::span<const std::vector<FieldAnnotation>> refined, const Schema& schema,
    const PolicyParams& policy, std::span<const ResponseValidator> validators, const BuildOptions& options,
    uint64_t seed, BuildReport* report = nullptr) {
  if (docs.size() != refined.size() || docs.size() != prompt_pseudo.size()) {
    throw StructuralError("refined annotations must cover the documents");
  }
  BuildReport rep;
  std::vector<PreferencePair> out;
  out.reserve(docs.size());
  for (size_t d = 0; d < docs.size(); ++d) {
    PreferencePair pair;
    pair.prompt = synthesize_prompt(docs[d], prompt_pseudo[d], schema).tokens;
    pair.y_plus = linearize_annotations(schema, refined[d]);
    pair.y_plus.push_back(kEos);

    std::vector<std::vector<Token>> candidates;
    for (int j = 0; j < options.n_candidates; ++j) {
      candidates.push_back(decode(
          policy, pair.prompt,
          DecodeMode::sample(options.temperature,
                             mix_seed(seed, static_cast<uint64_t>(docs[d].doc_id), static_cast<uint64_t>(j))),
          options.max_len));
    }

    bool found = false;
    for (const auto& cand : candidates) {
      if (cand == pair.y_plus || cand.empty()) continue;
      bool fails = false;
      for (const auto& v : validators) {
        if (!v.ok(cand)) {
          fails = true;
          break;
        }
      }
      if (fails) {
        pair.y_minus = cand;
        pair.provenance = Provenance::validator;
        ++rep.from_validator;
        found = true;
        break;
      }
    }
    if (!found) {
      for (const auto& cand : candidates) {
        if (cand == pair.y_plus || cand.empty()) continue;
        pair.y_minus = cand;
        pair.provenance = Provenance::refined_vs_candidate;
        ++rep.from_exact_match;
        found = true;
        break;
      }
    }
    if (!found) {
      // All candidates reproduce y+: corrupt one field through the
      // annotation-noise channel to manufacture a near-miss.
      const double one_field = 1.0 / static_cast<double>(schema.size());
      auto corrupted = inject_annotation_noise({refined[d]}, schema, one_field,
                                               mix_seed(seed, static_cast<uint64_t>(docs[d].doc_id), 0xbadull));
      pair.y_minus = linearize_annotations(schema, corrupted[0]);
      pair.y_minus.push_back(kEos);
      if (pair.y_minus == pair.y_plus) {
        ++rep.skipped;
        continue;
      }
      pair.provenance = Provenance::candidate_vs_candidate;
      ++rep.from_corruption;
    }

    pair.token_weights = detail::make_token_weights(pair, schema, prompt_pseudo[d], options.weight_mode);
    validate(pair);
    out.push_back(std::move(pair));
    ++rep.emitted;
  }
  if (report) *report = rep;
  return out;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

struct TokenGaps {
  std::vector<double> gaps;      // Delta_t under the trained policy
  std::vector<double> ref_gaps;  // Delta_t under the frozen reference
};

inline TokenGaps token_gaps(const PolicyParams& params, const PolicyParams& reference,
                            const PreferencePair& pair) {
  validate(pair);
  const size_t T = effective_len(pair);
  TokenGaps out;
  out.gaps.resize(T);
  out.ref_gaps.resize(T);
  const auto lp_plus = sequence_logprob(params, pair.prompt, pair.y_plus);
  const auto lp_minus = sequence_logprob(params, pair.prompt, pair.y_minus);
  const auto rp_plus = sequence_logprob(reference, pair.prompt, pair.y_plus);
  const auto rp_minus = sequence_logprob(reference, pair.prompt, pair.y_minus);
  for (size_t t = 0; t < T; ++t) {
    out.gaps[t] = lp_plus[t] - lp_minus[t];
    out.ref_gaps[t] = rp_plus[t] - rp_minus[t];
  }
  return out;
}

namespace detail {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// log(sigmoid(x)) without overflow for large negative x.
inline double log_sigmoid(double x) { return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); }

// Runs one response chain, returning per-position traces for backprop.
inline void forward_chain(const PolicyParams& params, std::span<const Token> prompt,
                          std::span<const Token> response, std::vector<PolicyTrace>& traces) {
  traces.resize(response.size());
  std::vector<Token> ctx(prompt.begin(), prompt.end());
  for (size_t t = 0; t < response.size(); ++t) {
    fill_window(params.config, ctx, traces[t].window);
    forward_window(params, traces[t]);
    ctx.push_back(response[t]);
  }
}

}  // namespace detail

// Token-wise preference loss. Reference gaps are constants; the gradient
// flows only through the trained policy's gaps.
inline LossGrad tok_grpo_loss(const PolicyParams& params, const PolicyParams& reference,
                              std::span<const PreferencePair> pairs, const GrpoConfig& config,
                              double* mean_gap_out = nullptr) {
  validate(config);
  if (pairs.empty()) throw InputError("tok_grpo_loss requires at least one pair");
  const int V = params.config.vocab_size;
  LossGrad out;
  out.grad.assign(params.values.size(), 0.0);
  const double invN = 1.0 / static_cast<double>(pairs.size());
  double gap_sum = 0.0;
  size_t gap_n = 0;

  std::vector<PolicyTrace> plus_traces, minus_traces;
  std::vector<double> dlogits(static_cast<size_t>(V));
  for (const auto& pair : pairs) {
    validate(pair);
    const size_t T = effective_len(pair);
    const double invT = 1.0 / static_cast<double>(T);
    detail::forward_chain(params, pair.prompt, pair.y_plus, plus_traces);
    detail::forward_chain(params, pair.prompt, pair.y_minus, minus_traces);
    const auto rp_plus = sequence_logprob(reference, pair.prompt, pair.y_plus);
    const auto rp_minus = sequence_logprob(reference, pair.prompt, pair.y_minus);

    std::vector<double> coeff(T, 0.0);  // dLoss/dDelta_t
    if (!config.sequence_level) {
      for (size_t t = 0; t < T; ++t) {
        const double gap = plus_traces[t].logprobs[static_cast<size_t>(pair.y_plus[t])] -
                           minus_traces[t].logprobs[static_cast<size_t>(pair.y_minus[t])];
        gap_sum += gap;
        ++gap_n;
        const double u = config.beta_pref * (gap - config.kappa * (rp_plus[t] - rp_minus[t]));
        out.loss -= invN * invT * pair.token_weights[t] * detail::log_sigmoid(u);
        coeff[t] = -invN * invT * pair.token_weights[t] * config.beta_pref * detail::sigmoid(-u);
      }
    } else {
      double pair_gap_sum = 0, ref_sum = 0, w_sum = 0;
      for (size_t t = 0; t < T; ++t) {
        pair_gap_sum += plus_traces[t].logprobs[static_cast<size_t>(pair.y_plus[t])] -
                        minus_traces[t].logprobs[static_cast<size_t>(pair.y_minus[t])];
        ref_sum += rp_plus[t] - rp_minus[t];
        w_sum += pair.token_weights[t];
      }
      gap_sum += pair_gap_sum;
      gap_n += T;
      const double w_mean = w_sum / static_cast<double>(T);
      const double u = config.beta_pref * (pair_gap_sum - config.kappa * ref_sum);
      out.loss -= invN * w_mean * detail::log_sigmoid(u);
      const double c = -invN * w_mean * config.beta_pref * detail::sigmoid(-u);
      for (size_t t = 0; t < T; ++t) coeff[t] = c;
    }

    for (size_t t = 0; t < T; ++t) {
      if (coeff[t] == 0.0) continue;
      // d gap / dz_plus = onehot(y+_t) - p ; d gap / dz_minus = -(onehot(y-_t) - p)
      for (int v = 0; v < V; ++v) {
        dlogits[static_cast<size_t>(v)] = -coeff[t] * plus_traces[t].probs[static_cast<size_t>(v)];
      }
      dlogits[static_cast<size_t>(pair.y_plus[t])] += coeff[t];
      detail::backward_window(params, plus_traces[t], dlogits, out.grad);

      for (int v = 0; v < V; ++v) {
        dlogits[static_cast<size_t>(v)] = coeff[t] * minus_traces[t].probs[static_cast<size_t>(v)];
      }
      dlogits[static_cast<size_t>(pair.y_minus[t])] -= coeff[t];
      detail::backward_window(params, minus_traces[t], dlogits, out.grad);
    }
  }
  if (mean_gap_out) *mean_gap_out = gap_n ? gap_sum / static_cast<double>(gap_n) : 0.0;
  return out;
}

// Symmetric token-averaged KL(policy || reference) along both trajectories.
inline LossGrad kl_stabilization(const PolicyParams& params, const PolicyParams& reference,
                                 std::span<const PreferencePair> pairs) {
  if (pairs.empty()) throw InputError("kl_stabilization requires at least one pair");
  const int V = params.config.vocab_size;
  LossGrad out;
  out.grad.assign(params.values.size(), 0.0);
  const double invN = 1.0 / static_cast<double>(pairs.size());

  PolicyTrace trace, ref_trace;
  std::vector<double> dlogits(static_cast<size_t>(V));
  for (const auto& pair : pairs) {
    validate(pair);
    for (const auto* resp : {&pair.y_plus, &pair.y_minus}) {
      const double invT = 1.0 / static_cast<double>(resp->size());
      std::vector<Token> ctx = pair.prompt;
      for (Token y : *resp) {
        detail::fill_window(params.config, ctx, trace.window);
        detail::forward_window(params, trace);
        detail::fill_window(reference.config, ctx, ref_trace.window);
        detail::forward_window(reference, ref_trace);
        double kl = 0;
        for (int v = 0; v < V; ++v) {
          const double p = trace.probs[static_cast<size_t>(v)];
          if (p > 0) {
            kl += p * (trace.logprobs[static_cast<size_t>(v)] - ref_trace.logprobs[static_cast<size_t>(v)]);
          }
        }
        out.loss += invN * invT * kl;
        // d KL(p_theta || p_ref) / dz_j = p_j * (log p_j - log r_j - KL)
        for (int v = 0; v < V; ++v) {
          dlogits[static_cast<size_t>(v)] =
              invN * invT * trace.probs[static_cast<size_t>(v)] *
              (trace.logprobs[static_cast<size_t>(v)] - ref_trace.logprobs[static_cast<size_t>(v)] - kl);
        }
        detail::backward_window(params, trace, dlogits, out.grad);
        ctx.push_back(y);
      }
    }
  }
  return out;
}

struct RlObjective {
  double loss = 0.0;
  GradVector grad;
  double pref_component = 0.0;
  double kl_component = 0.0;
  double mean_gap = 0.0;
};

// Total RL objective: preference loss plus lambda_KL times KL stabilization.
// Fused so each (chain, position) is forwarded and backpropagated once; both
// terms contribute to one per-position dlogits vector.
inline RlObjective rl_objective(const PolicyParams& params, const PolicyParams& reference,
                                std::span<const PreferencePair> pairs, const GrpoConfig& config) {
  validate(config);
  if (pairs.empty()) throw InputError("rl_objective requires at least one pair");
  const int V = params.config.vocab_size;
  RlObjective out;
  out.grad.assign(params.values.size(), 0.0);
  const double invN = 1.0 / static_cast<double>(pairs.size());
  double gap_sum = 0.0;
  size_t gap_n = 0;

  std::vector<PolicyTrace> traces;
  PolicyTrace ref_trace;
  std::vector<std::vector<double>> ref_logprobs;  // per position, full distribution
  std::vector<double> dlogits(static_cast<size_t>(V));
  for (const auto& pair : pairs) {
    validate(pair);
    const size_t T = effective_len(pair);
    const double invT = 1.0 / static_cast<double>(T);

    // forward both chains under the policy and the reference
    std::array<const std::vector<Token>*, 2> chains = {&pair.y_plus, &pair.y_minus};
    std::array<std::vector<PolicyTrace>, 2> chain_traces;
    std::array<std::vector<std::vector<double>>, 2> chain_ref;
    std::array<std::vector<double>, 2> chain_kl;  // per-position KL(policy || ref)
    for (int c = 0; c < 2; ++c) {
      detail::forward_chain(params, pair.prompt, *chains[static_cast<size_t>(c)],
                            chain_traces[static_cast<size_t>(c)]);
      auto& refs = chain_ref[static_cast<size_t>(c)];
      auto& kls = chain_kl[static_cast<size_t>(c)];
      refs.resize(chains[static_cast<size_t>(c)]->size());
      kls.assign(chains[static_cast<size_t>(c)]->size(), 0.0);
      std::vector<Token> ctx = pair.prompt;
      for (size_t t = 0; t < chains[static_cast<size_t>(c)]->size(); ++t) {
        detail::fill_window(reference.config, ctx, ref_trace.window);
        detail::forward_window(reference, ref_trace);
        refs[t] = ref_trace.logprobs;
        const auto& trace = chain_traces[static_cast<size_t>(c)][t];
        double kl = 0;
        for (int v = 0; v < V; ++v) {
          const double p = trace.probs[static_cast<size_t>(v)];
          if (p > 0) kl += p * (trace.logprobs[static_cast<size_t>(v)] - refs[t][static_cast<size_t>(v)]);
        }
        kls[t] = kl;
        out.kl_component +=
            invN * kl / static_cast<double>(chains[static_cast<size_t>(c)]->size());
        ctx.push_back((*chains[static_cast<size_t>(c)])[t]);
      }
    }

    // preference coefficients dLoss/dDelta_t
    std::vector<double> coeff(T, 0.0);
    if (!config.sequence_level) {
      for (size_t t = 0; t < T; ++t) {
        const double gap = chain_traces[0][t].logprobs[static_cast<size_t>(pair.y_plus[t])] -
                           chain_traces[1][t].logprobs[static_cast<size_t>(pair.y_minus[t])];
        const double ref_gap = chain_ref[0][t][static_cast<size_t>(pair.y_plus[t])] -
                               chain_ref[1][t][static_cast<size_t>(pair.y_minus[t])];
        gap_sum += gap;
        ++gap_n;
        const double u = config.beta_pref * (gap - config.kappa * ref_gap);
        out.pref_component -= invN * invT * pair.token_weights[t] * detail::log_sigmoid(u);
        coeff[t] = -invN * invT * pair.token_weights[t] * config.beta_pref * detail::sigmoid(-u);
      }
    } else {
      double pair_gap = 0, pair_ref = 0, w_sum = 0;
      for (size_t t = 0; t < T; ++t) {
        pair_gap += chain_traces[0][t].logprobs[static_cast<size_t>(pair.y_plus[t])] -
                    chain_traces[1][t].logprobs[static_cast<size_t>(pair.y_minus[t])];
        pair_ref += chain_ref[0][t][static_cast<size_t>(pair.y_plus[t])] -
                    chain_ref[1][t][static_cast<size_t>(pair.y_minus[t])];
        w_sum += pair.token_weights[t];
      }
      gap_sum += pair_gap;
      gap_n += T;
      const double w_mean = w_sum / static_cast<double>(T);
      const double u = config.beta_pref * (pair_gap - config.kappa * pair_ref);
      out.pref_component -= invN * w_mean * detail::log_sigmoid(u);
      const double c = -invN * w_mean * config.beta_pref * detail::sigmoid(-u);
      for (size_t t = 0; t < T; ++t) coeff[t] = c;
    }

    // one backward per (chain, position) with combined dlogits
    for (int c = 0; c < 2; ++c) {
      const auto& chain = *chains[static_cast<size_t>(c)];
      const double sign = c == 0 ? 1.0 : -1.0;
      const double kl_w = config.lambda_kl * invN / static_cast<double>(chain.size());
      for (size_t t = 0; t < chain.size(); ++t) {
        const auto& trace = chain_traces[static_cast<size_t>(c)][t];
        const double pref_c = t < T ? sign * coeff[t] : 0.0;
        bool any = pref_c != 0.0 || config.lambda_kl != 0.0;
        if (!any) continue;
        const double kl = chain_kl[static_cast<size_t>(c)][t];
        for (int v = 0; v < V; ++v) {
          const double p = trace.probs[static_cast<size_t>(v)];
          double d = -pref_c * p;
          if (config.lambda_kl != 0.0) {
            d += kl_w * p *
                 (trace.logprobs[static_cast<size_t>(v)] -
                  chain_ref[static_cast<size_t>(c)][t][static_cast<size_t>(v)] - kl);
          }
          dlogits[static_cast<size_t>(v)] = d;
        }
        dlogits[static_cast<size_t>(chain[t])] += pref_c;
        detail::backward_window(params, trace, dlogits, out.grad);
      }
    }
  }
  out.mean_gap = gap_n ? gap_sum / static_cast<double>(gap_n) : 0.0;
  out.loss = out.pref_component + config.lambda_kl * out.kl_component;
  return out;
}

struct RlLogRow {
  int step = 0;
  double loss = 0.0;
  double l_pref = 0.0;
  double l_kl = 0.0;
  double mean_gap = 0.0;
};

struct RlResult {
  PolicyParams params;
  std::vector<RlLogRow> log;
};

// Seeded mini-batch SGD on the RL objective.
inline RlResult rl_train(const PolicyParams& initial, const PolicyParams& reference,
                         std::span<const PreferencePair> pairs, const GrpoConfig& config) {
  validate(config);
  if (config.steps < 1) throw ConfigError("steps must be >= 1");
  if (pairs.empty()) throw InputError("rl_train requires at least one pair");
  RlResult res;
  res.params = initial;
  Rng order(mix_seed(config.seed, 0x91ull));
  const ParamLayout layout(initial.config);
  std::vector<PreferencePair> batch;
  for (int step = 0; step < config.steps; ++step) {
    batch.clear();
    for (int b = 0; b < config.batch_size; ++b) batch.push_back(pairs[order.below(pairs.size())]);
    RlObjective obj = rl_objective(res.params, reference, batch, config);
    if (!std::isfinite(obj.loss)) throw TrainingError("non-finite RL loss", step);
    if (config.freeze_embeddings) {
      std::fill(obj.grad.begin(), obj.grad.begin() + static_cast<long>(layout.wh), 0.0);
    }
    for (size_t i = 0; i < res.params.values.size(); ++i) res.params.values[i] -= config.lr * obj.grad[i];
    res.log.push_back({step, obj.loss, obj.pref_component, obj.kl_component, obj.mean_gap});
  }
  return res;
}

}  // namespace kvlab
