#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "kvlab/errors.hpp"
#include "kvlab/policy.hpp"
#include "kvlab/synthdoc.hpp"

namespace kvlab {

// Correction-distillation objectives for the refiner: temperature-scaled
// token distillation with confidence gating, field-kind classification,
// sequence NLL, cell alignment scoring, and two stay-close regularizers,
// combined by a weighted total.

struct DistillConfig {
  double tau = 2.0;
  double conf_threshold = 0.7;
  double label_smoothing = 0.1;
  // total-loss weights
  double alpha = 1.0;    // kd
  double beta_kd = 0.5;  // cls
  double gamma = 1.0;    // seq
  double delta = 0.25;    // align
  double epsilon = 0.001;  // sp + klp
  // per-parameter weights for sp_reg; empty means uniform 1.0
  std::vector<double> sp_weights;
  // align term weights
  double align_l1 = 1.0;
  double align_iou = 1.0;
  double align_cls = 1.0;
};

inline void validate(const DistillConfig& c) {
  if (!(c.tau > 0)) throw ConfigError("tau must be > 0");
  if (c.conf_threshold < 0 || c.conf_threshold > 1) throw ConfigError("conf_threshold must lie in [0,1]");
  if (c.label_smoothing < 0 || c.label_smoothing >= 1) throw ConfigError("label_smoothing must lie in [0,1)");
  for (double w : {c.alpha, c.beta_kd, c.gamma, c.delta, c.epsilon, c.align_l1, c.align_iou, c.align_cls}) {
    if (w < 0) throw ConfigError("loss weights must be >= 0");
  }
  for (double w : c.sp_weights) {
    if (w < 0) throw ConfigError("sp_weights must be >= 0");
  }
}

// Per-target-position teacher distributions and confidences.
struct TeacherPositions {
  std::vector<std::vector<double>> dist;
  std::vector<double> confidence;
};

struct KdSample {
  std::vector<Token> prompt;
  std::vector<Token> target;
  TeacherPositions teacher;
};

struct ClsSample {
  std::vector<Token> context;
  Token label = 0;  // a field-kind marker token
};

struct SeqSample {
  std::vector<Token> prompt;
  std::vector<Token> target;
};

using ReplayBuffer = std::vector<SeqSample>;

inline std::vector<double> smoothed_onehot(Token t, int vocab, double smoothing) {
  std::vector<double> p(static_cast<size_t>(vocab), smoothing / vocab);
  p[static_cast<size_t>(t)] += 1.0 - smoothing;
  return p;
}

// Builds the teacher signal for one (prompt, expert target) pair from the
// pseudo labels: marker and [EOS] positions are trusted, value positions take
// the pseudo token at the same field offset with the recorded agreement as
// confidence. Value positions past the end of the pseudo value get zero
// confidence and drop out of the distillation sum.
inline TeacherPositions make_teacher(const Schema& schema, const PseudoLabelSet& pseudo,
                                     std::span<const Token> target, int vocab, double smoothing) {
  // Offsets of each field's value inside per_token_agreement.
  std::vector<size_t> agree_offset(schema.size() + 1, 0);
  for (size_t i = 0; i < schema.size(); ++i) {
    agree_offset[i + 1] = agree_offset[i] + find_annotation(pseudo.annotations, schema[i].key).value.size();
  }

  TeacherPositions out;
  out.dist.reserve(target.size());
  out.confidence.reserve(target.size());
  int field = -1;
  int value_pos = 0;
  for (Token t : target) {
    if (is_key_marker(t)) {
      field = t - kKeyMarkerBase;
      value_pos = 0;
      out.dist.push_back(smoothed_onehot(t, vocab, smoothing));
      out.confidence.push_back(1.0);
      continue;
    }
    if (t == kEos) {
      out.dist.push_back(smoothed_onehot(t, vocab, smoothing));
      out.confidence.push_back(1.0);
      continue;
    }
    if (field < 0 || field >= static_cast<int>(schema.size())) {
      out.dist.push_back(smoothed_onehot(t, vocab, smoothing));
      out.confidence.push_back(0.0);
      continue;
    }
    const auto& pv = find_annotation(pseudo.annotations, schema[static_cast<size_t>(field)].key).value;
    if (value_pos < static_cast<int>(pv.size())) {
      const size_t idx = agree_offset[static_cast<size_t>(field)] + static_cast<size_t>(value_pos);
      out.dist.push_back(smoothed_onehot(pv[static_cast<size_t>(value_pos)], vocab, smoothing));
      out.confidence.push_back(idx < pseudo.per_token_agreement.size() ? pseudo.per_token_agreement[idx]
                                                                       : 0.0);
    } else {
      out.dist.push_back(smoothed_onehot(t, vocab, smoothing));
      out.confidence.push_back(0.0);
    }
    ++value_pos;
  }
  return out;
}

namespace detail {

inline void log_softmax_scaled(std::span<const double> logits, double inv_tau, std::vector<double>& out) {
  out.resize(logits.size());
  double mx = logits[0] * inv_tau;
  for (size_t i = 0; i < logits.size(); ++i) {
    out[i] = logits[i] * inv_tau;
    if (out[i] > mx) mx = out[i];
  }
  double sum = 0;
  for (double v : out) sum += std::exp(v - mx);
  const double lse = mx + std::log(sum);
  for (auto& v : out) v -= lse;
}

}  // namespace detail

// Temperature-scaled token distillation, gated by teacher confidence.
inline LossGrad kd_loss(const PolicyParams& student, std::span<const KdSample> batch,
                        const DistillConfig& config) {
  validate(config);
  if (batch.empty()) throw InputError("kd_loss requires a non-empty batch");
  const int V = student.config.vocab_size;
  const double inv_tau = 1.0 / config.tau;
  LossGrad out;
  out.grad.assign(student.values.size(), 0.0);

  std::vector<double> teacher_log, teacher_soft, student_soft, dlogits(static_cast<size_t>(V));
  PolicyTrace trace;
  for (const auto& sample : batch) {
    if (sample.teacher.dist.size() != sample.target.size() ||
        sample.teacher.confidence.size() != sample.target.size()) {
      throw StructuralError("teacher positions misaligned with target");
    }
    const double invT = 1.0 / static_cast<double>(sample.target.size());
    std::vector<Token> ctx = sample.prompt;
    for (size_t t = 0; t < sample.target.size(); ++t) {
      if (sample.teacher.confidence[t] >= config.conf_threshold) {
        // softened teacher: softmax(log p / tau)
        teacher_log.resize(static_cast<size_t>(V));
        for (int v = 0; v < V; ++v) {
          const double p = sample.teacher.dist[t][static_cast<size_t>(v)];
          teacher_log[static_cast<size_t>(v)] = p > 0 ? std::log(p) : -745.0;
        }
        detail::log_softmax_scaled(teacher_log, inv_tau, teacher_soft);

        detail::fill_window(student.config, ctx, trace.window);
        detail::forward_window(student, trace);
        detail::log_softmax_scaled(trace.logprobs, inv_tau, student_soft);

        double kl = 0;
        for (int v = 0; v < V; ++v) {
          const double r = std::exp(teacher_soft[static_cast<size_t>(v)]);
          if (r > 0) kl += r * (teacher_soft[static_cast<size_t>(v)] - student_soft[static_cast<size_t>(v)]);
        }
        const double w = invT / static_cast<double>(batch.size());
        out.loss += w * config.tau * config.tau * kl;
        // d(tau^2 KL)/dz = tau * (q - r)
        for (int v = 0; v < V; ++v) {
          dlogits[static_cast<size_t>(v)] =
              w * config.tau *
              (std::exp(student_soft[static_cast<size_t>(v)]) - std::exp(teacher_soft[static_cast<size_t>(v)]));
        }
        detail::backward_window(student, trace, dlogits, out.grad);
      }
      ctx.push_back(sample.target[t]);
    }
  }
  return out;
}

// Field-kind classification as one-step prediction of a kind marker.
inline LossGrad cls_loss(const PolicyParams& student, std::span<const ClsSample> batch) {
  if (batch.empty()) throw InputError("cls_loss requires a non-empty batch");
  LossGrad out;
  out.grad.assign(student.values.size(), 0.0);
  const double invN = 1.0 / static_cast<double>(batch.size());
  PolicyTrace trace;
  std::vector<double> dlogits(static_cast<size_t>(student.config.vocab_size));
  for (const auto& sample : batch) {
    if (!is_kind_marker(sample.label)) {
      throw InputError("cls label must be a field-kind marker token");
    }
    detail::fill_window(student.config, sample.context, trace.window);
    detail::forward_window(student, trace);
    out.loss -= invN * trace.logprobs[static_cast<size_t>(sample.label)];
    for (int v = 0; v < student.config.vocab_size; ++v) {
      dlogits[static_cast<size_t>(v)] = invN * trace.probs[static_cast<size_t>(v)];
    }
    dlogits[static_cast<size_t>(sample.label)] -= invN;
    detail::backward_window(student, trace, dlogits, out.grad);
  }
  return out;
}

// Mean sequence NLL over the batch.
inline LossGrad seq_loss(const PolicyParams& student, std::span<const SeqSample> batch) {
  if (batch.empty()) throw InputError("seq_loss requires a non-empty batch");
  LossGrad out;
  out.grad.assign(student.values.size(), 0.0);
  const double invN = 1.0 / static_cast<double>(batch.size());
  for (const auto& sample : batch) {
    LossGrad lg = grad_nll(student, sample.prompt, sample.target);
    out.loss += invN * lg.loss;
    for (size_t i = 0; i < out.grad.size(); ++i) out.grad[i] += invN * lg.grad[i];
  }
  return out;
}

inline double iou(const Box& a, const Box& b) {
  const double ix = std::max(0.0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
  const double iy = std::max(0.0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
  const double inter = ix * iy;
  const double uni = (a.x1 - a.x0) * (a.y1 - a.y0) + (b.x1 - b.x0) * (b.y1 - b.y0) - inter;
  return uni > 0 ? inter / uni : 0.0;
}

// Greedy IoU-descending matching over cells; a data-quality score, not a
// differentiable objective.
inline double align_loss(std::span<const FieldAnnotation> predicted, std::span<const FieldAnnotation> truth,
                         double l1_weight, double iou_weight, double cls_weight) {
  for (const auto& c : predicted) {
    if (!c.box) throw InputError("predicted cell missing box");
  }
  for (const auto& c : truth) {
    if (!c.box) throw InputError("truth cell missing box");
  }
  const size_t np = predicted.size(), nt = truth.size();
  if (np == 0 && nt == 0) return 0.0;

  std::vector<bool> used_p(np, false), used_t(nt, false);
  double total = 0.0;
  const size_t n_match = np < nt ? np : nt;
  for (size_t m = 0; m < n_match; ++m) {
    double best = -1.0;
    size_t bi = 0, bj = 0;
    for (size_t i = 0; i < np; ++i) {
      if (used_p[i]) continue;
      for (size_t j = 0; j < nt; ++j) {
        if (used_t[j]) continue;
        const double v = iou(*predicted[i].box, *truth[j].box);
        if (v > best) {
          best = v;
          bi = i;
          bj = j;
        }
      }
    }
    used_p[bi] = true;
    used_t[bj] = true;
    const Box& a = *predicted[bi].box;
    const Box& b = *truth[bj].box;
    const double l1 =
        (std::abs(a.x0 - b.x0) + std::abs(a.y0 - b.y0) + std::abs(a.x1 - b.x1) + std::abs(a.y1 - b.y1)) / 4.0;
    total += l1_weight * l1 + iou_weight * (1.0 - best) +
             cls_weight * (predicted[bi].kind == truth[bj].kind ? 0.0 : 1.0);
  }
  total += iou_weight * static_cast<double>((np > nt ? np - nt : nt - np));
  return total / static_cast<double>(np > nt ? np : nt);
}

// Weighted squared distance to the reference parameters.
inline LossGrad sp_reg(const PolicyParams& params, const PolicyParams& reference,
                       std::span<const double> sp_weights) {
  if (params.values.size() != reference.values.size()) {
    throw StructuralError("parameter vectors differ in length");
  }
  if (!sp_weights.empty() && sp_weights.size() != params.values.size()) {
    throw StructuralError("sp_weights length does not match parameter count");
  }
  LossGrad out;
  out.grad.assign(params.values.size(), 0.0);
  for (size_t i = 0; i < params.values.size(); ++i) {
    const double w = sp_weights.empty() ? 1.0 : sp_weights[i];
    const double d = params.values[i] - reference.values[i];
    out.loss += w * d * d;
    out.grad[i] = 2.0 * w * d;
  }
  return out;
}

// Mean per-token KL from the frozen reference distribution to the student.
inline LossGrad klp_loss(const PolicyParams& params, const PolicyParams& reference,
                         std::span<const SeqSample> replay) {
  if (replay.empty()) throw ConfigError("logit preservation requires a non-empty replay buffer");
  if (params.values.size() != reference.values.size()) {
    throw StructuralError("parameter vectors differ in length");
  }
  const int V = params.config.vocab_size;
  LossGrad out;
  out.grad.assign(params.values.size(), 0.0);
  const double invN = 1.0 / static_cast<double>(replay.size());
  PolicyTrace t_student, t_ref;
  std::vector<double> dlogits(static_cast<size_t>(V));
  for (const auto& sample : replay) {
    if (sample.target.empty()) throw InputError("replay target must be non-empty");
    const double invT = 1.0 / static_cast<double>(sample.target.size());
    std::vector<Token> ctx = sample.prompt;
    for (Token y : sample.target) {
      detail::fill_window(params.config, ctx, t_student.window);
      detail::forward_window(params, t_student);
      detail::fill_window(reference.config, ctx, t_ref.window);
      detail::forward_window(reference, t_ref);
      double kl = 0;
      for (int v = 0; v < V; ++v) {
        const double r = t_ref.probs[static_cast<size_t>(v)];
        if (r > 0) kl += r * (t_ref.logprobs[static_cast<size_t>(v)] - t_student.logprobs[static_cast<size_t>(v)]);
      }
      const double w = invN * invT;
      out.loss += w * kl;
      // d KL(ref || softmax(z)) / dz = p_theta - p_ref
      for (int v = 0; v < V; ++v) {
        dlogits[static_cast<size_t>(v)] =
            w * (t_student.probs[static_cast<size_t>(v)] - t_ref.probs[static_cast<size_t>(v)]);
      }
      detail::backward_window(params, t_student, dlogits, out.grad);
      ctx.push_back(y);
    }
  }
  return out;
}

struct DistillComponents {
  LossGrad kd;
  LossGrad cls;
  LossGrad seq;
  LossGrad sp;
  LossGrad klp;
  double align = 0.0;
};

// Weighted combination. The align term is a score without a policy gradient;
// components with empty gradients are treated as zero.
inline LossGrad total_loss(const DistillComponents& c, const DistillConfig& config, size_t n_params) {
  validate(config);
  LossGrad out;
  out.grad.assign(n_params, 0.0);
  auto add = [&](const LossGrad& lg, double w) {
    if (w == 0.0) return;
    out.loss += w * lg.loss;
    if (lg.grad.empty()) return;
    if (lg.grad.size() != n_params) throw StructuralError("component gradient length mismatch");
    for (size_t i = 0; i < n_params; ++i) out.grad[i] += w * lg.grad[i];
  };
  add(c.kd, config.alpha);
  add(c.cls, config.beta_kd);
  add(c.seq, config.gamma);
  out.loss += config.delta * c.align;
  add(c.sp, config.epsilon);
  add(c.klp, config.epsilon);
  return out;
}

}  // namespace kvlab
