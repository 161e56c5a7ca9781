#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "kvlab/errors.hpp"
#include "kvlab/rng.hpp"
#include "kvlab/vocab.hpp"

namespace kvlab {

// Tiny autoregressive token policy: the last `context_window` tokens are
// embedded, concatenated, pushed through one tanh layer and a softmax output.
// Everything is a pure function of (params, inputs), gradients are derived by
// hand and checked against finite differences in the tests.

struct PolicyConfig {
  int vocab_size = kVocabSize;
  int context_window = 98;
  int embed_dim = 16;
  int hidden_dim = 32;
  uint64_t seed = 0x5eedull;
};

inline void validate(const PolicyConfig& c) {
  if (c.vocab_size < 1 || c.context_window < 1 || c.embed_dim < 1 || c.hidden_dim < 1) {
    throw ConfigError("policy dimensions must be >= 1");
  }
}

// Flat parameter vector layout:
//   [0, V*E)                     embedding table, row per token
//   [.., +K*E*H)                 hidden weights, row per hidden unit
//   [.., +H)                     hidden bias
//   [.., +H*V)                   output weights, row per hidden unit
//   [.., +V)                     output bias
struct ParamLayout {
  int V, K, E, H;
  size_t embed, wh, bh, wo, bo, total;

  explicit ParamLayout(const PolicyConfig& c)
      : V(c.vocab_size), K(c.context_window), E(c.embed_dim), H(c.hidden_dim) {
    embed = 0;
    wh = embed + static_cast<size_t>(V) * E;
    bh = wh + static_cast<size_t>(K) * E * H;
    wo = bh + static_cast<size_t>(H);
    bo = wo + static_cast<size_t>(H) * V;
    total = bo + static_cast<size_t>(V);
  }
};

struct PolicyParams {
  PolicyConfig config;
  std::vector<double> values;
};

using GradVector = std::vector<double>;

inline size_t param_count(const PolicyConfig& c) { return ParamLayout(c).total; }

inline PolicyParams init_params(const PolicyConfig& config) {
  validate(config);
  PolicyParams p;
  p.config = config;
  p.values.resize(param_count(config));
  Rng rng(mix_seed(config.seed, 0x1417ull));
  for (auto& v : p.values) v = (rng.uniform01() * 2.0 - 1.0) * 0.1;
  return p;
}

// Per-position forward state kept around for backprop.
struct PolicyTrace {
  std::vector<Token> window;        // exactly K tokens, left-padded
  std::vector<double> input;        // K*E gathered embeddings
  std::vector<double> hidden;       // H, post-tanh
  std::vector<double> logprobs;     // V, log softmax
  std::vector<double> probs;        // V
};

namespace detail {

inline void fill_window(const PolicyConfig& c, std::span<const Token> context, std::vector<Token>& window) {
  const int K = c.context_window;
  window.assign(static_cast<size_t>(K), kPad);
  const size_t n = context.size();
  const size_t take = n < static_cast<size_t>(K) ? n : static_cast<size_t>(K);
  for (size_t i = 0; i < take; ++i) {
    window[static_cast<size_t>(K) - take + i] = context[n - take + i];
  }
}

inline void forward_window(const PolicyParams& p, PolicyTrace& t) {
  const ParamLayout L(p.config);
  const double* w = p.values.data();

  t.input.resize(static_cast<size_t>(L.K) * L.E);
  for (int s = 0; s < L.K; ++s) {
    const Token tok = t.window[static_cast<size_t>(s)];
    if (!(tok >= 0 && tok < L.V)) throw InputError("token out of vocabulary: " + std::to_string(tok));
    const double* row = w + L.embed + static_cast<size_t>(tok) * L.E;
    double* dst = t.input.data() + static_cast<size_t>(s) * L.E;
    for (int e = 0; e < L.E; ++e) dst[e] = row[e];
  }

  const size_t in_dim = static_cast<size_t>(L.K) * L.E;
  t.hidden.resize(static_cast<size_t>(L.H));
  for (int h = 0; h < L.H; ++h) {
    const double* row = w + L.wh + static_cast<size_t>(h) * in_dim;
    double acc = w[L.bh + static_cast<size_t>(h)];
    for (size_t i = 0; i < in_dim; ++i) acc += row[i] * t.input[i];
    t.hidden[static_cast<size_t>(h)] = std::tanh(acc);
  }

  t.logprobs.assign(static_cast<size_t>(L.V), 0.0);
  for (int v = 0; v < L.V; ++v) t.logprobs[static_cast<size_t>(v)] = w[L.bo + static_cast<size_t>(v)];
  for (int h = 0; h < L.H; ++h) {
    const double* row = w + L.wo + static_cast<size_t>(h) * L.V;
    const double hv = t.hidden[static_cast<size_t>(h)];
    for (int v = 0; v < L.V; ++v) t.logprobs[static_cast<size_t>(v)] += hv * row[v];
  }

  double mx = t.logprobs[0];
  for (double z : t.logprobs) mx = z > mx ? z : mx;
  double sum = 0;
  for (double z : t.logprobs) sum += std::exp(z - mx);
  const double lse = mx + std::log(sum);
  t.probs.resize(static_cast<size_t>(L.V));
  for (int v = 0; v < L.V; ++v) {
    double lp = t.logprobs[static_cast<size_t>(v)] - lse;
    if (lp > 0.0) lp = 0.0;
    t.logprobs[static_cast<size_t>(v)] = lp;
    t.probs[static_cast<size_t>(v)] = std::exp(lp);
  }
}

// Accumulates the gradient of a scalar objective whose per-logit derivative
// is `dlogits`, given the forward trace of the same window.
inline void backward_window(const PolicyParams& p, const PolicyTrace& t,
                            std::span<const double> dlogits, GradVector& grad) {
  const ParamLayout L(p.config);
  const double* w = p.values.data();
  double* g = grad.data();
  const size_t in_dim = static_cast<size_t>(L.K) * L.E;

  for (int v = 0; v < L.V; ++v) g[L.bo + static_cast<size_t>(v)] += dlogits[static_cast<size_t>(v)];

  std::vector<double> dhidden(static_cast<size_t>(L.H), 0.0);
  for (int h = 0; h < L.H; ++h) {
    const double hv = t.hidden[static_cast<size_t>(h)];
    double* grow = g + L.wo + static_cast<size_t>(h) * L.V;
    const double* wrow = w + L.wo + static_cast<size_t>(h) * L.V;
    double acc = 0;
    for (int v = 0; v < L.V; ++v) {
      grow[v] += hv * dlogits[static_cast<size_t>(v)];
      acc += wrow[v] * dlogits[static_cast<size_t>(v)];
    }
    dhidden[static_cast<size_t>(h)] = acc * (1.0 - hv * hv);  // tanh'
  }

  std::vector<double> dinput(in_dim, 0.0);
  for (int h = 0; h < L.H; ++h) {
    const double dh = dhidden[static_cast<size_t>(h)];
    if (dh == 0.0) continue;
    g[L.bh + static_cast<size_t>(h)] += dh;
    double* grow = g + L.wh + static_cast<size_t>(h) * in_dim;
    const double* wrow = w + L.wh + static_cast<size_t>(h) * in_dim;
    for (size_t i = 0; i < in_dim; ++i) {
      grow[i] += dh * t.input[i];
      dinput[i] += dh * wrow[i];
    }
  }

  for (int s = 0; s < L.K; ++s) {
    const Token tok = t.window[static_cast<size_t>(s)];
    double* erow = g + L.embed + static_cast<size_t>(tok) * L.E;
    const double* src = dinput.data() + static_cast<size_t>(s) * L.E;
    for (int e = 0; e < L.E; ++e) erow[e] += src[e];
  }
}

}  // namespace detail

// Log-probability vector over the vocabulary for the next token.
inline std::vector<double> forward_logprobs(const PolicyParams& params, std::span<const Token> context) {
  PolicyTrace t;
  detail::fill_window(params.config, context, t.window);
  detail::forward_window(params, t);
  return t.logprobs;
}

// Per-token log-probabilities of `response` given `prompt`.
inline std::vector<double> sequence_logprob(const PolicyParams& params, std::span<const Token> prompt,
                                            std::span<const Token> response) {
  if (response.empty()) throw InputError("response must be non-empty");
  std::vector<Token> ctx(prompt.begin(), prompt.end());
  ctx.reserve(prompt.size() + response.size());
  std::vector<double> out;
  out.reserve(response.size());
  PolicyTrace t;
  for (Token y : response) {
    if (!in_vocab(y) || y >= params.config.vocab_size) {
      throw InputError("response token out of vocabulary: " + std::to_string(y));
    }
    detail::fill_window(params.config, ctx, t.window);
    detail::forward_window(params, t);
    out.push_back(t.logprobs[static_cast<size_t>(y)]);
    ctx.push_back(y);
  }
  return out;
}

struct DecodeMode {
  enum class Kind { greedy, sample } kind = Kind::greedy;
  double temperature = 1.0;
  uint64_t seed = 0;

  static DecodeMode greedy() { return DecodeMode{}; }
  static DecodeMode sample(double temperature, uint64_t seed) {
    return DecodeMode{Kind::sample, temperature, seed};
  }
};

// Decodes until [EOS] (included) or max_len tokens. Greedy breaks ties toward
// the lowest token id; sampling is seeded and temperature-scaled.
inline std::vector<Token> decode(const PolicyParams& params, std::span<const Token> prompt,
                                 const DecodeMode& mode, int max_len) {
  if (max_len < 1) throw InputError("max_len must be >= 1");
  std::vector<Token> ctx(prompt.begin(), prompt.end());
  std::vector<Token> out;
  Rng rng(mix_seed(mode.seed, 0xdecull));
  PolicyTrace t;
  for (int step = 0; step < max_len; ++step) {
    detail::fill_window(params.config, ctx, t.window);
    detail::forward_window(params, t);
    Token next = 0;
    if (mode.kind == DecodeMode::Kind::greedy) {
      double best = t.logprobs[0];
      for (int v = 1; v < params.config.vocab_size; ++v) {
        if (t.logprobs[static_cast<size_t>(v)] > best) {
          best = t.logprobs[static_cast<size_t>(v)];
          next = v;
        }
      }
    } else {
      const double temp = mode.temperature > 1e-6 ? mode.temperature : 1e-6;
      double mx = t.logprobs[0];
      for (double z : t.logprobs) mx = z > mx ? z : mx;
      double sum = 0;
      std::vector<double> weights(static_cast<size_t>(params.config.vocab_size));
      for (int v = 0; v < params.config.vocab_size; ++v) {
        weights[static_cast<size_t>(v)] = std::exp((t.logprobs[static_cast<size_t>(v)] - mx) / temp);
        sum += weights[static_cast<size_t>(v)];
      }
      double u = rng.uniform01() * sum;
      double acc = 0;
      next = params.config.vocab_size - 1;
      for (int v = 0; v < params.config.vocab_size; ++v) {
        acc += weights[static_cast<size_t>(v)];
        if (u <= acc) {
          next = v;
          break;
        }
      }
    }
    out.push_back(next);
    ctx.push_back(next);
    if (next == kEos) break;
  }
  return out;
}

struct LossGrad {
  double loss = 0.0;
  GradVector grad;
};

// Mean per-token negative log-likelihood of `response` and its exact gradient.
inline LossGrad grad_nll(const PolicyParams& params, std::span<const Token> prompt,
                         std::span<const Token> response) {
  if (response.empty()) throw InputError("response must be non-empty");
  const double invT = 1.0 / static_cast<double>(response.size());
  LossGrad out;
  out.grad.assign(params.values.size(), 0.0);
  std::vector<Token> ctx(prompt.begin(), prompt.end());
  PolicyTrace t;
  std::vector<double> dlogits(static_cast<size_t>(params.config.vocab_size));
  for (Token y : response) {
    if (!(y >= 0 && y < params.config.vocab_size)) {
      throw InputError("response token out of vocabulary: " + std::to_string(y));
    }
    detail::fill_window(params.config, ctx, t.window);
    detail::forward_window(params, t);
    out.loss -= invT * t.logprobs[static_cast<size_t>(y)];
    // d(-log p_y)/dz = p - onehot(y)
    for (int v = 0; v < params.config.vocab_size; ++v) {
      dlogits[static_cast<size_t>(v)] = invT * t.probs[static_cast<size_t>(v)];
    }
    dlogits[static_cast<size_t>(y)] -= invT;
    detail::backward_window(params, t, dlogits, out.grad);
    ctx.push_back(y);
  }
  return out;
}

struct TrainPair {
  std::vector<Token> prompt;
  std::vector<Token> target;
};

struct TrainLogRow {
  int step = 0;
  double loss = 0.0;
};

struct TrainResult {
  PolicyParams params;
  std::vector<TrainLogRow> log;
};

// Seeded mini-batch SGD on the mean sequence NLL. Shared by pretraining and
// the SFT stages.
inline TrainResult train_seq_sgd(const PolicyParams& initial, std::span<const TrainPair> pairs,
                                 int steps, double lr, int batch_size, uint64_t seed) {
  if (steps < 1) throw ConfigError("steps must be >= 1");
  if (pairs.empty()) throw ConfigError("training requires at least one pair");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");

  TrainResult res;
  res.params = initial;
  Rng order(mix_seed(seed, 0x07de7ull));
  GradVector grad(res.params.values.size());
  for (int step = 0; step < steps; ++step) {
    std::fill(grad.begin(), grad.end(), 0.0);
    double loss = 0.0;
    for (int b = 0; b < batch_size; ++b) {
      const auto& pair = pairs[order.below(pairs.size())];
      LossGrad lg = grad_nll(res.params, pair.prompt, pair.target);
      loss += lg.loss;
      for (size_t i = 0; i < grad.size(); ++i) grad[i] += lg.grad[i];
    }
    const double scale = 1.0 / batch_size;
    loss *= scale;
    if (!std::isfinite(loss)) throw TrainingError("non-finite training loss", step);
    for (size_t i = 0; i < grad.size(); ++i) res.params.values[i] -= lr * scale * grad[i];
    res.log.push_back({step, loss});
  }
  return res;
}

}  // namespace kvlab
