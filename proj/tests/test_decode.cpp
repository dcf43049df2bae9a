#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "oracles.hpp"
#include "tpkd/decode.hpp"
#include "tpkd/error.hpp"

using namespace tpkd;
using nnet::Tensor;

namespace {

FirstPassDims small_first() {
  FirstPassDims d;
  d.enc_layers = 2;
  d.enc_width = 5;
  d.pool_layers = 1;
  d.pred_embed = 3;
  d.pred_width = 4;
  d.joint_width = 4;
  return d;
}

Tensor features(int frames, int dim, std::mt19937_64& rng, double scale = 1.0) {
  Tensor f = Tensor::matrix(static_cast<size_t>(frames), static_cast<size_t>(dim));
  for (double& v : f.storage()) v = oracle::uniform(rng, -scale, scale);
  return f;
}

// Sharpens the joint output so that decoding choices are not near-ties.
void sharpen(RnntModel& m, double factor) {
  for (double& v : m.params().get("joint.out_w").value.storage()) v *= factor;
}

Hypothesis hyp(std::vector<int> tokens, double first, double rescore) {
  return Hypothesis{LabelSequence(std::move(tokens)), first, rescore};
}

// Rescorer whose teacher-forced distribution follows a fixed successor map
// regardless of the audio: SOS -> 1 -> 2 -> 3 -> EOS for K = 3.
TwoPassModel chain_rescorer() {
  const int K = 3, V = las_vocab(K);
  SecondPassDims sd;
  sd.addenc_width = 4;
  sd.las_embed = V;
  sd.las_width = V;
  sd.att_dim = 2;
  sd.heads = 1;
  TwoPassModel m(RnntModel(K, 2, small_first(), 3), sd, 4);
  auto& ps = m.second();
  const size_t H = static_cast<size_t>(V);
  Tensor& emb = ps.get("las.embed").value;
  emb.fill(0.0);
  for (size_t a = 0; a < H; ++a) emb.at(a, a) = 1.0;
  Tensor& wx = ps.get("las.wx").value;
  wx.fill(0.0);
  for (size_t a = 0; a < H; ++a) wx.at(a, 2 * H + a) = 20.0;  // cell input g
  ps.get("las.wh").value.fill(0.0);
  Tensor& b = ps.get("las.b").value;
  for (size_t j = 0; j < H; ++j) {
    b[j] = 20.0;           // input gate open
    b[H + j] = -20.0;      // forget gate closed
    b[2 * H + j] = 0.0;
    b[3 * H + j] = 20.0;   // output gate open
  }
  Tensor& out = ps.get("las.out_w").value;
  out.fill(0.0);
  const int next[] = {-1, 2, 3, eos_token(K), 1, -1};  // indexed by input token
  for (int a = 0; a < V; ++a) {
    if (next[a] >= 0) out.at(static_cast<size_t>(a), static_cast<size_t>(next[a])) = 30.0;
  }
  ps.get("las.out_b").value.fill(0.0);
  return m;
}

}  // namespace

TEST_CASE("certain blanks decode to one empty hypothesis") {
  std::mt19937_64 rng(1);
  RnntModel m(3, 2, small_first(), 5);
  m.params().get("joint.out_w").value.fill(0.0);
  Tensor& b = m.params().get("joint.out_b").value;
  b.fill(kLogZero);
  b[kBlank] = 0.0;
  const std::vector<Hypothesis> hyps = beam_search(m, features(6, 2, rng));
  REQUIRE(hyps.size() == 1);
  CHECK(hyps[0].tokens.empty());
  CHECK(hyps[0].first_pass_logp == 0.0);
}

TEST_CASE("unpruned beam search finds the exhaustive optimum") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    RnntModel m(2, 2, small_first(), 100 + static_cast<uint64_t>(trial));
    sharpen(m, 3.0);
    const Tensor f = features(4, 2, rng, 2.0);
    BeamConfig cfg;
    cfg.max_symbols_per_frame = 3;
    const oracle::Exhaustive ex = oracle::exhaustive_decode(m, f, cfg.max_symbols_per_frame);
    CHECK(ex.candidates == 127);
    cfg.beam_size = static_cast<int>(ex.candidates);
    const std::vector<Hypothesis> hyps = beam_search(m, f, cfg);
    REQUIRE(!hyps.empty());
    CHECK(hyps[0].tokens == ex.best);
    CHECK(hyps[0].first_pass_logp == doctest::Approx(ex.best_logp).epsilon(1e-9));
  }
}

TEST_CASE("beam output is sorted, bounded and duplicate-free") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    RnntModel m(4, 2, small_first(), 200 + static_cast<uint64_t>(trial));
    sharpen(m, 2.0);
    const Tensor f = features(8, 2, rng, 2.0);
    const std::vector<Hypothesis> hyps = beam_search(m, f);
    CHECK(hyps.size() <= 8);
    for (size_t i = 0; i < hyps.size(); ++i) {
      CHECK(hyps[i].first_pass_logp <= 0.0);
      CHECK(!hyps[i].rescore.has_value());
      if (i > 0) CHECK(hyps[i - 1].first_pass_logp >= hyps[i].first_pass_logp);
      for (size_t j = 0; j < i; ++j) CHECK(hyps[i].tokens != hyps[j].tokens);
    }
  }
}

TEST_CASE("wider beams never find a worse top hypothesis") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    RnntModel m(4, 2, small_first(), 300 + static_cast<uint64_t>(trial));
    sharpen(m, 2.0);
    const Tensor f = features(8, 2, rng, 2.0);
    double prev = kLogZero;
    for (int beam : {1, 2, 4, 8}) {
      BeamConfig cfg;
      cfg.beam_size = beam;
      const double top = beam_search(m, f, cfg)[0].first_pass_logp;
      CHECK(top >= prev - 1e-12);
      prev = top;
    }
  }
}

TEST_CASE("beam search input checks") {
  const RnntModel m(3, 2, small_first(), 5);
  CHECK_THROWS_AS(beam_search(m, Tensor::matrix(0, 2)), Error);
  BeamConfig bad;
  bad.beam_size = 0;
  std::mt19937_64 rng(5);
  CHECK_THROWS_AS(beam_search(m, features(4, 2, rng), bad), Error);
}

TEST_CASE("rescoring") {
  std::mt19937_64 rng(6);
  const int K = 3;
  SecondPassDims sd;
  sd.addenc_width = 4;
  sd.las_embed = 3;
  sd.las_width = 5;
  sd.att_dim = 4;
  sd.heads = 2;
  const TwoPassModel m(RnntModel(K, 2, small_first(), 7), sd, 8);
  const Tensor f = features(6, 2, rng);
  const std::vector<Hypothesis> in{hyp({1, 2}, -1.5, 0.0), hyp({3}, -2.0, 0.0),
                                   hyp({}, -4.0, 0.0), hyp({2, 2, 1}, -4.5, 0.0)};
  std::vector<Hypothesis> stripped = in;
  for (Hypothesis& h : stripped) h.rescore.reset();
  const std::vector<Hypothesis> out = rescore(m, f, stripped);
  const Tensor addenc = additional_encoder_output(m, f);

  SUBCASE("scores are teacher-forced log-probabilities; tokens untouched") {
    REQUIRE(out.size() == in.size());
    for (size_t i = 0; i < in.size(); ++i) {
      CHECK(out[i].tokens == in[i].tokens);
      CHECK(out[i].first_pass_logp == in[i].first_pass_logp);
      REQUIRE(out[i].rescore.has_value());
      CHECK(*out[i].rescore == doctest::Approx(las_sequence_logprob(m, addenc, in[i].tokens)));
      CHECK(*out[i].rescore < 0.0);
    }
  }
  SUBCASE("single hypothesis") {
    const std::vector<Hypothesis> one = rescore(m, f, {stripped[1]});
    REQUIRE(one.size() == 1);
    CHECK(&pick_best(one) == &one[0]);
    CHECK(*one[0].rescore == *out[1].rescore);
  }
  SUBCASE("order of the input does not change any score") {
    std::vector<Hypothesis> shuffled = stripped;
    std::reverse(shuffled.begin(), shuffled.end());
    std::swap(shuffled[0], shuffled[2]);
    for (const Hypothesis& h : rescore(m, f, shuffled)) {
      const auto it = std::find_if(out.begin(), out.end(),
                                   [&](const Hypothesis& o) { return o.tokens == h.tokens; });
      REQUIRE(it != out.end());
      CHECK(*h.rescore == *it->rescore);
    }
  }
  SUBCASE("length normalization and interpolation") {
    RescoreConfig norm;
    norm.length_normalize = true;
    RescoreConfig mix;
    mix.interpolate_lambda = 0.25;
    const std::vector<Hypothesis> a = rescore(m, f, stripped, norm);
    const std::vector<Hypothesis> b = rescore(m, f, stripped, mix);
    for (size_t i = 0; i < in.size(); ++i) {
      const double las = *out[i].rescore;
      CHECK(*a[i].rescore == doctest::Approx(las / (in[i].tokens.size() + 1)));
      CHECK(*b[i].rescore == doctest::Approx(0.25 * in[i].first_pass_logp + 0.75 * las));
    }
  }
}

TEST_CASE("a rescorer built to emit one sequence ranks it first") {
  std::mt19937_64 rng(7);
  const TwoPassModel m = chain_rescorer();
  const Tensor f = features(5, 2, rng);
  const LabelSequence target({1, 2, 3});
  std::vector<Hypothesis> hyps;
  for (const LabelSequence& s : oracle::all_sequences(3, 4)) hyps.push_back({s, -1.0, {}});
  const std::vector<Hypothesis> out = rescore(m, f, hyps);
  const Hypothesis& best = pick_best(out);
  CHECK(best.tokens == target);
  CHECK(*best.rescore > -1e-3);
  for (const Hypothesis& h : out) {
    if (h.tokens != target) CHECK(*h.rescore < -10.0);
  }
}

TEST_CASE("pick_best tie rules") {
  CHECK(pick_best({hyp({1}, -5.0, -1.0), hyp({2}, -1.0, -2.0)}).tokens == LabelSequence({1}));
  CHECK(pick_best({hyp({1}, -3.0, -1.0), hyp({2}, -2.0, -1.0)}).tokens == LabelSequence({2}));
  CHECK(pick_best({hyp({2, 1}, -2.0, -1.0), hyp({1, 3}, -2.0, -1.0)}).tokens ==
        LabelSequence({1, 3}));
  CHECK(pick_best({hyp({4}, -2.0, -7.0)}).tokens == LabelSequence({4}));
  CHECK_THROWS_AS(pick_best({}), Error);
  CHECK_THROWS_AS(pick_best({Hypothesis{LabelSequence({1}), -1.0, {}}}), Error);
}

TEST_CASE("error rates") {
  const LabelSequence abc({1, 2, 3});
  CHECK(wer(abc, abc) == 0.0);
  CHECK(round2(wer(abc, LabelSequence({1, 3}))) == 33.33);
  CHECK(wer(LabelSequence(), LabelSequence({1})) == 100.0);
  CHECK(ser({{abc, abc}, {abc, LabelSequence({1, 2})}}) == 50.0);
  CHECK(corpus_wer({{abc, abc}, {LabelSequence({1}), LabelSequence({2})}}) == 25.0);
  CHECK(round2(100.0 / 3.0) == 33.33);
}

TEST_CASE("edit distance properties") {
  std::mt19937_64 rng(8);
  auto seq = [&] {
    const int n = static_cast<int>(rng() % 6);
    return oracle::random_target(n, 3, rng);
  };
  for (int i = 0; i < 500; ++i) {
    const LabelSequence a = seq(), b = seq(), c = seq();
    CHECK(levenshtein(a, b) == levenshtein(b, a));
    CHECK(levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c));
    CHECK(levenshtein(a, b) >= std::abs(a.size() - b.size()));
    if (b.size() <= a.size()) CHECK(wer(a, b) <= 100.0);
  }
}
