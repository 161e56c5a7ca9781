#include <doctest.h>

#include <cmath>

#include "fd_check.hpp"
#include "kvlab/distill.hpp"
#include "kvlab/task.hpp"
#include "kvlab/tlr.hpp"

using namespace kvlab;

namespace {

PolicyConfig small_config(uint64_t seed = 1) {
  PolicyConfig c;
  c.context_window = 6;
  c.embed_dim = 5;
  c.hidden_dim = 7;
  c.seed = seed;
  return c;
}

// A tiny world with real pseudo labels for teacher construction.
struct Fixture {
  Schema schema = default_schema();
  std::vector<Document> docs;
  LabConfig cfg;

  Fixture() {
    cfg.policy = small_config();
    docs = generate_corpus(schema, 6, 77);
  }

  KdSample kd_sample(size_t d, const DistillConfig& dc, uint64_t channel_seed = 5) const {
    NoiseProfile profile = default_ocr_profile(channel_seed);
    const auto pseudo = simulate_ocr(docs[d], schema, profile, PseudoSource::ocr_sim);
    KdSample s;
    s.prompt = synthesize_prompt(docs[d], pseudo, schema).tokens;
    s.target = linearize_annotations(schema, docs[d].truth);
    s.target.push_back(kEos);
    s.teacher = make_teacher(schema, pseudo, s.target, kVocabSize, dc.label_smoothing);
    return s;
  }
};

}  // namespace

TEST_CASE("teacher distributions are normalized and aligned") {
  Fixture fx;
  DistillConfig dc;
  const KdSample s = fx.kd_sample(0, dc);
  REQUIRE(s.teacher.dist.size() == s.target.size());
  REQUIRE(s.teacher.confidence.size() == s.target.size());
  for (const auto& dist : s.teacher.dist) {
    double sum = 0;
    for (double p : dist) sum += p;
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
  }
  for (double c : s.teacher.confidence) {
    CHECK(c >= 0.0);
    CHECK(c <= 1.0);
  }
}

TEST_CASE("kd_loss vanishes when the student equals the teacher") {
  // single-position sample whose teacher equals the student's softmax output
  PolicyParams student = init_params(small_config(4));
  KdSample s;
  s.prompt = {1, 2, 3};
  s.target = {7};
  const auto lp = forward_logprobs(student, s.prompt);
  std::vector<double> dist;
  for (double v : lp) dist.push_back(std::exp(v));
  s.teacher.dist = {dist};
  s.teacher.confidence = {1.0};
  DistillConfig dc;
  dc.tau = 2.0;
  const LossGrad lg = kd_loss(student, std::vector<KdSample>{s}, dc);
  CHECK(lg.loss == doctest::Approx(0.0).epsilon(1e-9));
  for (double g : lg.grad) CHECK(std::abs(g) < 1e-9);
}

TEST_CASE("kd_loss is fully gated when every confidence is below threshold") {
  Fixture fx;
  DistillConfig dc;
  dc.conf_threshold = 0.7;
  KdSample s = fx.kd_sample(1, dc);
  for (auto& c : s.teacher.confidence) c = 0.3;
  const PolicyParams student = init_params(small_config(9));
  const LossGrad lg = kd_loss(student, std::vector<KdSample>{s}, dc);
  CHECK(lg.loss == 0.0);
  for (double g : lg.grad) CHECK(g == 0.0);
}

TEST_CASE("perturbing gated teacher positions changes nothing") {
  Fixture fx;
  DistillConfig dc;
  const PolicyParams student = init_params(small_config(11));
  KdSample s = fx.kd_sample(2, dc);
  const LossGrad before = kd_loss(student, std::vector<KdSample>{s}, dc);
  // scramble every below-threshold position's distribution
  bool scrambled_any = false;
  for (size_t t = 0; t < s.teacher.confidence.size(); ++t) {
    if (s.teacher.confidence[t] < dc.conf_threshold) {
      std::fill(s.teacher.dist[t].begin(), s.teacher.dist[t].end(), 1.0 / kVocabSize);
      scrambled_any = true;
    }
  }
  const LossGrad after = kd_loss(student, std::vector<KdSample>{s}, dc);
  CHECK(before.loss == after.loss);
  CHECK(before.grad == after.grad);
  CHECK(scrambled_any);  // fixture must exercise the gate
}

TEST_CASE("kd_loss gradient matches finite differences") {
  Fixture fx;
  DistillConfig dc;
  dc.conf_threshold = 0.7;
  for (int instance = 0; instance < 5; ++instance) {
    const PolicyParams student = init_params(small_config(40 + static_cast<uint64_t>(instance)));
    const std::vector<KdSample> batch = {fx.kd_sample(static_cast<size_t>(instance), dc),
                                         fx.kd_sample(static_cast<size_t>(instance + 1), dc)};
    const LossGrad lg = kd_loss(student, batch, dc);
    const auto rep = fd::check_gradient(
        student, [&](const PolicyParams& p) { return kd_loss(p, batch, dc).loss; }, lg.grad, 20,
        900 + static_cast<uint64_t>(instance));
    CHECK(rep.max_rel_err <= 1e-4);
  }
}

TEST_CASE("kd_loss decreases monotonically in tau on a fixed instance") {
  Fixture fx;
  DistillConfig dc;
  const PolicyParams student = init_params(small_config(13));
  const std::vector<KdSample> batch = {fx.kd_sample(0, dc)};
  double prev = std::numeric_limits<double>::infinity();
  for (double tau : {1.0, 2.0, 4.0, 8.0}) {
    DistillConfig c = dc;
    c.tau = tau;
    const double loss = kd_loss(student, batch, c).loss;
    CHECK(loss < prev);
    prev = loss;
  }
}

TEST_CASE("cls_loss on perfect and uniform classifiers") {
  PolicyParams uniform = init_params(small_config());
  std::fill(uniform.values.begin(), uniform.values.end(), 0.0);
  ClsSample s;
  s.context = {1, 2, 3};
  s.label = kind_marker(FieldKind::amount);
  CHECK(cls_loss(uniform, std::vector<ClsSample>{s}).loss ==
        doctest::Approx(std::log(96.0)).epsilon(1e-12));

  ClsSample bad = s;
  bad.label = kBegin;
  CHECK_THROWS_AS(cls_loss(uniform, std::vector<ClsSample>{bad}), InputError);

  // push the bias of the label token far up: probability approaches 1, loss 0
  PolicyParams sharp = uniform;
  const ParamLayout L(sharp.config);
  sharp.values[L.bo + static_cast<size_t>(s.label)] = 50.0;
  CHECK(cls_loss(sharp, std::vector<ClsSample>{s}).loss == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("cls_loss gradient matches finite differences") {
  for (int instance = 0; instance < 5; ++instance) {
    const PolicyParams student = init_params(small_config(60 + static_cast<uint64_t>(instance)));
    std::vector<ClsSample> batch;
    Rng rng(200 + static_cast<uint64_t>(instance));
    for (int i = 0; i < 3; ++i) {
      ClsSample s;
      for (int j = 0; j < 5; ++j) s.context.push_back(static_cast<Token>(rng.below(kVocabSize)));
      s.label = kKindMarkerBase + static_cast<Token>(rng.below(kKindCount));
      batch.push_back(std::move(s));
    }
    const LossGrad lg = cls_loss(student, batch);
    const auto rep = fd::check_gradient(
        student, [&](const PolicyParams& p) { return cls_loss(p, batch).loss; }, lg.grad, 20,
        300 + static_cast<uint64_t>(instance));
    CHECK(rep.max_rel_err <= 1e-4);
  }
}

TEST_CASE("seq_loss equals grad_nll on singletons and averages over batches") {
  const PolicyParams student = init_params(small_config(15));
  Rng rng(99);
  std::vector<SeqSample> batch;
  for (int i = 0; i < 10; ++i) {
    SeqSample s;
    for (int j = 0; j < 4; ++j) s.prompt.push_back(static_cast<Token>(rng.below(kVocabSize)));
    for (int j = 0; j < 3; ++j) s.target.push_back(static_cast<Token>(rng.below(kVocabSize)));
    batch.push_back(std::move(s));
  }
  const LossGrad single = seq_loss(student, std::span<const SeqSample>(batch.data(), 1));
  const LossGrad direct = grad_nll(student, batch[0].prompt, batch[0].target);
  CHECK(single.loss == direct.loss);
  CHECK(single.grad == direct.grad);

  const LossGrad full = seq_loss(student, batch);
  double mean = 0;
  for (const auto& s : batch) mean += grad_nll(student, s.prompt, s.target).loss;
  mean /= static_cast<double>(batch.size());
  CHECK(full.loss == doctest::Approx(mean).epsilon(1e-12));

  PolicyParams uniform = student;
  std::fill(uniform.values.begin(), uniform.values.end(), 0.0);
  CHECK(seq_loss(uniform, batch).loss == doctest::Approx(std::log(96.0)).epsilon(1e-12));
}

TEST_CASE("align_loss on identical, overlapping, and disjoint cells") {
  FieldAnnotation a;
  a.key = "cell";
  a.kind = FieldKind::table_cell;
  a.box = Box{0, 0, 1, 1};
  // identical sets
  CHECK(align_loss(std::vector<FieldAnnotation>{a}, std::vector<FieldAnnotation>{a}, 1, 1, 1) == 0.0);

  // hand-computed IoU = 0.5: (0,0,1,1) vs (0,0,0.5,1)
  FieldAnnotation b = a;
  b.box = Box{0, 0, 0.5, 1};
  CHECK(align_loss(std::vector<FieldAnnotation>{a}, std::vector<FieldAnnotation>{b}, 0, 1, 0) ==
        doctest::Approx(0.5).epsilon(1e-12));

  // disjoint boxes, same kind: IoU term 1, L1 term = mean coordinate gap
  FieldAnnotation c = a;
  c.box = Box{0, 0, 0.2, 0.2};
  FieldAnnotation d = a;
  d.box = Box{0.8, 0.8, 1.0, 1.0};
  const double l1 = (0.8 + 0.8 + 0.8 + 0.8) / 4.0;
  CHECK(align_loss(std::vector<FieldAnnotation>{c}, std::vector<FieldAnnotation>{d}, 1, 1, 1) ==
        doctest::Approx(1.0 + l1).epsilon(1e-12));

  // kind mismatch costs cls weight
  FieldAnnotation e = a;
  e.kind = FieldKind::name;
  CHECK(align_loss(std::vector<FieldAnnotation>{a}, std::vector<FieldAnnotation>{e}, 0, 0, 1) ==
        doctest::Approx(1.0).epsilon(1e-12));

  // unmatched surplus cells each add the IoU weight
  CHECK(align_loss(std::vector<FieldAnnotation>{a, c}, std::vector<FieldAnnotation>{a}, 0, 1, 0) ==
        doctest::Approx(0.5).epsilon(1e-12));

  FieldAnnotation no_box = a;
  no_box.box.reset();
  CHECK_THROWS_AS(align_loss(std::vector<FieldAnnotation>{no_box}, std::vector<FieldAnnotation>{a}, 1, 1, 1),
                  InputError);
}

TEST_CASE("sp_reg quadratic identities") {
  const PolicyParams ref = init_params(small_config(17));
  PolicyParams params = ref;
  CHECK(sp_reg(params, ref, {}).loss == 0.0);

  params.values[10] = ref.values[10] + 2.0;
  const LossGrad lg = sp_reg(params, ref, {});
  CHECK(lg.loss == doctest::Approx(4.0).epsilon(1e-12));
  CHECK(lg.grad[10] == doctest::Approx(4.0).epsilon(1e-12));

  std::vector<double> w(params.values.size(), 2.0);
  CHECK(sp_reg(params, ref, w).loss == doctest::Approx(8.0).epsilon(1e-12));

  PolicyParams short_ref = ref;
  short_ref.values.pop_back();
  CHECK_THROWS_AS(sp_reg(params, short_ref, {}), StructuralError);
}

TEST_CASE("klp_loss vanishes at the reference and matches finite differences") {
  const PolicyParams ref = init_params(small_config(19));
  ReplayBuffer replay;
  Rng rng(7);
  for (int i = 0; i < 2; ++i) {
    SeqSample s;
    for (int j = 0; j < 4; ++j) s.prompt.push_back(static_cast<Token>(rng.below(kVocabSize)));
    for (int j = 0; j < 3; ++j) s.target.push_back(static_cast<Token>(rng.below(kVocabSize)));
    replay.push_back(std::move(s));
  }
  CHECK(klp_loss(ref, ref, replay).loss == doctest::Approx(0.0).epsilon(1e-12));
  CHECK_THROWS_AS(klp_loss(ref, ref, ReplayBuffer{}), ConfigError);

  for (int instance = 0; instance < 5; ++instance) {
    const PolicyParams student = init_params(small_config(80 + static_cast<uint64_t>(instance)));
    const LossGrad lg = klp_loss(student, ref, replay);
    CHECK(lg.loss >= 0.0);
    const auto rep = fd::check_gradient(
        student, [&](const PolicyParams& p) { return klp_loss(p, ref, replay).loss; }, lg.grad, 20,
        700 + static_cast<uint64_t>(instance));
    CHECK(rep.max_rel_err <= 1e-4);
  }
}

TEST_CASE("total_loss selects, annihilates, and matches hand-summed components") {
  Fixture fx;
  DistillConfig dc;
  const PolicyParams student = init_params(small_config(23));
  const PolicyParams ref = init_params(small_config(24));
  const std::vector<KdSample> kd_batch = {fx.kd_sample(0, dc)};
  std::vector<SeqSample> seq_batch = {{kd_batch[0].prompt, kd_batch[0].target}};
  std::vector<ClsSample> cls_batch = {{kd_batch[0].prompt, kind_marker(FieldKind::code)}};

  DistillComponents comps;
  comps.kd = kd_loss(student, kd_batch, dc);
  comps.cls = cls_loss(student, cls_batch);
  comps.seq = seq_loss(student, seq_batch);
  comps.sp = sp_reg(student, ref, {});
  comps.klp = klp_loss(student, ref, seq_batch);
  comps.align = 0.37;

  const size_t n = student.values.size();

  DistillConfig zero = dc;
  zero.alpha = zero.beta_kd = zero.gamma = zero.delta = zero.epsilon = 0.0;
  const LossGrad nothing = total_loss(comps, zero, n);
  CHECK(nothing.loss == 0.0);
  for (double g : nothing.grad) CHECK(g == 0.0);

  DistillConfig only_kd = zero;
  only_kd.alpha = 1.0;
  const LossGrad kd_only = total_loss(comps, only_kd, n);
  CHECK(kd_only.loss == comps.kd.loss);
  CHECK(kd_only.grad == comps.kd.grad);

  Rng rng(31);
  for (int trial = 0; trial < 10; ++trial) {
    DistillConfig c = dc;
    c.alpha = rng.uniform01();
    c.beta_kd = rng.uniform01();
    c.gamma = rng.uniform01();
    c.delta = rng.uniform01();
    c.epsilon = rng.uniform01();
    const LossGrad total = total_loss(comps, c, n);
    const double hand = c.alpha * comps.kd.loss + c.beta_kd * comps.cls.loss + c.gamma * comps.seq.loss +
                        c.delta * comps.align + c.epsilon * (comps.sp.loss + comps.klp.loss);
    CHECK(total.loss == doctest::Approx(hand).epsilon(1e-12));
    for (size_t i = 0; i < n; i += 997) {
      const double hg = c.alpha * comps.kd.grad[i] + c.beta_kd * comps.cls.grad[i] +
                        c.gamma * comps.seq.grad[i] + c.epsilon * (comps.sp.grad[i] + comps.klp.grad[i]);
      CHECK(total.grad[i] == doctest::Approx(hg).epsilon(1e-12));
    }
  }
}

TEST_CASE("distill config validation names bad values") {
  DistillConfig c;
  c.tau = 0.0;
  CHECK_THROWS_AS(validate(c), ConfigError);
  c = DistillConfig{};
  c.conf_threshold = 1.5;
  CHECK_THROWS_AS(validate(c), ConfigError);
  c = DistillConfig{};
  c.alpha = -1.0;
  CHECK_THROWS_AS(validate(c), ConfigError);
}
