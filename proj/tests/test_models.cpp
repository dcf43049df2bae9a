#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "tpkd/error.hpp"
#include "tpkd/models.hpp"

using namespace tpkd;
using nnet::Tensor;

namespace {

FirstPassDims tiny_first() {
  FirstPassDims d;
  d.enc_layers = 2;
  d.enc_width = 6;
  d.pool_layers = 1;
  d.pred_embed = 3;
  d.pred_width = 5;
  d.joint_width = 4;
  return d;
}

SecondPassDims tiny_second() {
  SecondPassDims d;
  d.addenc_width = 6;
  d.las_embed = 3;
  d.las_width = 5;
  d.att_dim = 4;
  d.heads = 2;
  return d;
}

Tensor features(int frames, int dim, std::mt19937_64& rng) {
  Tensor f = Tensor::matrix(static_cast<size_t>(frames), static_cast<size_t>(dim));
  for (double& v : f.storage()) v = oracle::uniform(rng, -1.0, 1.0);
  return f;
}

void zero(nnet::ParamStore& ps, const std::string& name) {
  ps.get(name).value.fill(0.0);
}

}  // namespace

TEST_CASE("first-pass lattice is normalized and has pooled length") {
  std::mt19937_64 rng(1);
  const RnntModel m(4, 3, tiny_first(), 7);
  for (int frames : {1, 2, 5, 8}) {
    const LabelSequence y({1, 3});
    const LatticeDist d = rnnt_forward_pass(m, features(frames, 3, rng), y);
    CHECK(d.frames() == (frames + 1) / 2);
    CHECK(d.target_len() == 2);
    CHECK(d.vocab() == 4);
    CHECK(d.max_normalization_error() <= 1e-6);
  }
}

TEST_CASE("zero joint projection gives uniform nodes") {
  std::mt19937_64 rng(2);
  RnntModel m(4, 3, tiny_first(), 7);
  zero(m.params(), "joint.out_w");
  zero(m.params(), "joint.out_b");
  const LatticeDist d = rnnt_forward_pass(m, features(6, 3, rng), LabelSequence({2}));
  for (double v : d.data()) CHECK(v == doctest::Approx(-std::log(5.0)).epsilon(1e-12));
}

TEST_CASE("first pass is causal in the input frames") {
  std::mt19937_64 rng(3);
  const RnntModel m(3, 3, tiny_first(), 9);
  const Tensor full = features(9, 3, rng);
  const LabelSequence y({1, 2});
  const LatticeDist ref = rnnt_forward_pass(m, full, y);
  for (int t0 = 1; t0 < 9; ++t0) {
    Tensor part = Tensor::matrix(static_cast<size_t>(t0), 3);
    for (size_t i = 0; i < part.size(); ++i) part[i] = full[i];
    const LatticeDist d = rnnt_forward_pass(m, part, y);
    // A pooled frame is complete once both of its input frames are present.
    for (int t = 0; t < t0 / m.pooling_factor(); ++t) {
      for (int u = 0; u <= 2; ++u) {
        for (int k = 0; k <= 3; ++k) CHECK(d.at(t, u, k) == ref.at(t, u, k));
      }
    }
  }
}

TEST_CASE("incremental scorer reproduces lattice nodes") {
  std::mt19937_64 rng(4);
  const RnntModel m(4, 3, tiny_first(), 11);
  const Tensor f = features(7, 3, rng);
  const LabelSequence y({4, 1, 2});
  const LatticeDist d = rnnt_forward_pass(m, f, y);
  const FirstPassScorer scorer(m, f);
  REQUIRE(scorer.frames() == d.frames());
  FirstPassScorer::PredState s = scorer.start();
  for (int u = 0; u <= y.size(); ++u) {
    for (int t = 0; t < d.frames(); ++t) {
      const std::vector<double> lp = scorer.joint(t, s);
      for (int k = 0; k <= 4; ++k) CHECK(lp[static_cast<size_t>(k)] == doctest::Approx(d.at(t, u, k)).epsilon(1e-9));
    }
    if (u < y.size()) s = scorer.advance(s, y[u]);
  }
}

TEST_CASE("teacher-forced rescorer steps") {
  std::mt19937_64 rng(5);
  TwoPassModel m(RnntModel(4, 3, tiny_first(), 1), tiny_second(), 2);
  const Tensor f = features(6, 3, rng);
  const LabelSequence y({3, 1, 4});
  const std::vector<StepDist> steps = las_forward_teacher_forced(m, f, y);
  REQUIRE(steps.size() == 4);
  for (const StepDist& s : steps) {
    CHECK(s.logp.size() == static_cast<size_t>(las_vocab(4)));
    double z = 0.0;
    for (double v : s.logp) z += std::exp(v);
    CHECK(z == doctest::Approx(1.0).epsilon(1e-9));
  }
  CHECK(las_targets(y, 4) == std::vector<int>{3, 1, 4, eos_token(4)});
  CHECK(sos_token(4) == 5);

  // The sequence score is the sum of the target entries of the steps.
  double expected = 0.0;
  const std::vector<int> tg = las_targets(y, 4);
  for (size_t i = 0; i < steps.size(); ++i) expected += steps[i].logp[static_cast<size_t>(tg[i])];
  CHECK(las_sequence_logprob(m, additional_encoder_output(m, f), y) ==
        doctest::Approx(expected).epsilon(1e-9));

  SUBCASE("zero output projection gives uniform steps") {
    zero(m.second(), "las.out_w");
    zero(m.second(), "las.out_b");
    for (const StepDist& s : las_forward_teacher_forced(m, f, y)) {
      for (double v : s.logp) CHECK(v == doctest::Approx(-std::log(7.0)).epsilon(1e-12));
    }
  }
  SUBCASE("empty features are rejected") {
    CHECK_THROWS_AS(las_forward_teacher_forced(m, Tensor::matrix(0, 3), y), Error);
  }
}

TEST_CASE("freezing") {
  TwoPassModel m(RnntModel(3, 3, tiny_first(), 1), tiny_second(), 2);
  auto ones = [](const nnet::ParamStore& ps) {
    nnet::GradMap g;
    for (const auto& [name, p] : ps.all()) g[name] = Tensor(p.value.shape(), 1.0);
    return g;
  };
  auto step_all = [&] {
    nnet::AdamState a, b;
    nnet::adam_step(m.shared().params(), ones(m.shared().params()), 1e-2, 1, a);
    nnet::adam_step(m.second(), ones(m.second()), 1e-2, 1, b);
  };

  SUBCASE("shared encoder") {
    freeze(m, FreezeSelector::kSharedEncoder);
    const uint32_t enc = m.shared().params().hash(kEncoderPrefix);
    const uint32_t pred = m.shared().params().hash(kPredPrefix);
    step_all();
    CHECK(m.shared().params().hash(kEncoderPrefix) == enc);
    CHECK(m.shared().params().hash(kPredPrefix) != pred);
  }
  SUBCASE("all, then none") {
    freeze(m, FreezeSelector::kAll);
    const uint32_t a = m.shared().params().hash(), b = m.second().hash();
    step_all();
    CHECK(m.shared().params().hash() == a);
    CHECK(m.second().hash() == b);
    freeze(m, FreezeSelector::kNone);
    step_all();
    CHECK(m.shared().params().hash() != a);
    CHECK(m.second().hash() != b);
  }
  SUBCASE("selectors compose") {
    freeze(m, FreezeSelector::kRnntDecoder);
    freeze(m, FreezeSelector::kLas);
    for (const auto& [name, p] : m.shared().params().all()) {
      CHECK(p.frozen == (name.rfind(kPredPrefix, 0) == 0 || name.rfind(kJointPrefix, 0) == 0));
    }
    for (const auto& [name, p] : m.second().all()) CHECK(p.frozen);
  }
  SUBCASE("unknown selector") {
    CHECK(parse_freeze_selector("shared_encoder") == FreezeSelector::kSharedEncoder);
    CHECK_THROWS_AS(parse_freeze_selector("decoder"), Error);
  }
}

TEST_CASE("role widths reproduce the compression ratios") {
  const RoleTable table;
  const RoleConfig t = role_config(Role::kTeacher, table);
  const RoleConfig s = role_config(Role::kStudent, table);
  const RoleConfig m = role_config(Role::kSmall, table);
  const RoleConfig ss = role_config(Role::kStudent, table, LasSize::kSmall);
  CHECK(s.first.enc_width == m.first.enc_width);
  CHECK(s.first.enc_layers == m.first.enc_layers);

  const int K = 8, F = 8;
  auto first = [&](const RoleConfig& r) {
    return static_cast<double>(RnntModel(K, F, r.first, 1).params().count());
  };
  auto two = [&](const RoleConfig& r) {
    const TwoPassModel tp(RnntModel(K, F, r.first, 1), r.second, 2);
    return static_cast<double>(tp.shared().params().count() + tp.second().count());
  };
  CHECK(std::abs(nnet::reduction_exact(first(t), first(s)) - 55.0) <= 2.0);
  CHECK(std::abs(nnet::reduction_exact(two(t), two(s)) - 36.0) <= 2.0);
  CHECK(std::abs(nnet::reduction_exact(two(t), two(ss)) - 55.0) <= 2.0);
  CHECK(std::abs(nnet::reduction_exact(two(t), two(m)) - 55.0) <= 2.0);
}

TEST_CASE("end-to-end first-pass gradient on a 3-frame utterance") {
  std::mt19937_64 rng(6);
  FirstPassDims dims = tiny_first();
  dims.pool_layers = 0;
  RnntModel m(3, 3, dims, 5, nnet::Precision::kFloat64);
  const Tensor f = features(3, 3, rng);
  const LabelSequence y({2, 1});
  auto loss = [&](nnet::GradMap* grads) {
    nnet::Tape tape;
    nnet::Binding bind(tape, {&m.params()});
    const nnet::Var enc = encode(m, bind, f);
    const nnet::Var lp = rnnt_logprobs(m, bind, enc, y);
    const nnet::Var l = nnet::rnnt_loss(lp, static_cast<int>(enc.rows()), y);
    if (grads) {
      tape.backward(l);
      *grads = bind.grads();
    }
    return l.scalar();
  };
  nnet::GradMap grads;
  const double base = loss(&grads);
  // The forward value equals -ln P from the evaluation-mode lattice.
  CHECK(base == doctest::Approx(-rnnt_forward(rnnt_forward_pass(m, f, y), y)).epsilon(1e-12));
  for (auto& [name, p] : m.params().all()) {
    for (int s = 0; s < 4; ++s) {
      const size_t k = static_cast<size_t>(rng() % p.value.size());
      const double orig = p.value[k], h = 1e-6;
      p.value[k] = orig + h;
      const double up = loss(nullptr);
      p.value[k] = orig - h;
      const double down = loss(nullptr);
      p.value[k] = orig;
      INFO(name << "[" << k << "]");
      CHECK(oracle::rel_err(grads.at(name)[k], (up - down) / (2 * h)) <= 1e-4);
    }
  }
}
