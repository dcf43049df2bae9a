#include <doctest.h>

#include <cmath>
#include <functional>
#include <memory>
#include <random>

#include "oracles.hpp"
#include "tpkd/distill.hpp"
#include "tpkd/error.hpp"
#include "tpkd/gradcheck.hpp"
#include "tpkd/nnet.hpp"
#include "tpkd/params.hpp"

using namespace tpkd;
using namespace tpkd::nnet;

namespace {

Tensor random_tensor(size_t r, size_t c, std::mt19937_64& rng, double scale = 1.0) {
  Tensor t = Tensor::matrix(r, c);
  for (double& v : t.storage()) v = oracle::uniform(rng, -scale, scale);
  return t;
}

using Build = std::function<Var(Tape&, const std::vector<Var>&)>;

// Worst relative error between tape gradients and central differences of a
// scalar-valued graph, over every input entry.
double fd_check(std::vector<Tensor> inputs, const Build& build) {
  auto value = [&](const std::vector<Tensor>& in) {
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& t : in) vars.push_back(tape.leaf(t, true));
    return build(tape, vars).scalar();
  };
  Tape tape;
  std::vector<Var> vars;
  for (const Tensor& t : inputs) vars.push_back(tape.leaf(t, true));
  const Var root = build(tape, vars);
  tape.backward(root);
  double worst = 0.0;
  for (size_t i = 0; i < inputs.size(); ++i) {
    const Tensor* g = tape.grad_if_any(vars[i].id());
    for (size_t k = 0; k < inputs[i].size(); ++k) {
      const double h = 1e-6, orig = inputs[i][k];
      inputs[i][k] = orig + h;
      const double up = value(inputs);
      inputs[i][k] = orig - h;
      const double down = value(inputs);
      inputs[i][k] = orig;
      const double analytic = g && !g->empty() ? (*g)[k] : 0.0;
      worst = std::max(worst, oracle::rel_err(analytic, (up - down) / (2 * h)));
    }
  }
  return worst;
}

// sum(tanh(x) * w) with fixed, distinct column weights.
Var weighted_sum(const Var& x) {
  Tensor w = Tensor::matrix(x.cols(), 1);
  for (size_t j = 0; j < w.size(); ++j) w[j] = std::sin(1.0 + static_cast<double>(j));
  return sum(matmul(tanh(x), x.tape().constant(w)));
}

}  // namespace

TEST_CASE("tensor shapes") {
  const Tensor t({2, 3}, 1.5);
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK(t.size() == 6);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), Error);
  Tape tape;
  CHECK_THROWS_AS(matmul(tape.constant(Tensor::matrix(2, 3)), tape.constant(Tensor::matrix(2, 3))),
                  Error);
}

TEST_CASE("elementwise and shape ops match finite differences") {
  std::mt19937_64 rng(1);
  CHECK(fd_check({random_tensor(3, 4, rng), random_tensor(4, 2, rng)},
              [&](Tape&, const std::vector<Var>& v) { return weighted_sum(matmul(v[0], v[1])); }) <= 1e-4);
  CHECK(fd_check({random_tensor(3, 4, rng), random_tensor(1, 4, rng)},
              [&](Tape&, const std::vector<Var>& v) { return weighted_sum(add_row(v[0], v[1])); }) <= 1e-4);
  CHECK(fd_check({random_tensor(3, 4, rng)},
              [&](Tape&, const std::vector<Var>& v) { return weighted_sum(sigmoid(v[0])); }) <= 1e-4);
  CHECK(fd_check({random_tensor(3, 4, rng), random_tensor(3, 2, rng)},
              [&](Tape&, const std::vector<Var>& v) {
                return weighted_sum(slice_cols(concat_cols(v[0], v[1]), 1, 5));
              }) <= 1e-4);
  CHECK(fd_check({random_tensor(3, 2, rng), random_tensor(4, 2, rng)},
              [&](Tape&, const std::vector<Var>& v) {
                return weighted_sum(broadcast_add_tanh(v[0], v[1]));
              }) <= 1e-4);
  CHECK(fd_check({random_tensor(3, 5, rng, 3.0)},
              [&](Tape&, const std::vector<Var>& v) { return weighted_sum(log_softmax_rows(v[0])); }) <=
        1e-4);
  const std::vector<int> ids{2, 0, 2, 1};
  CHECK(fd_check({random_tensor(3, 4, rng)},
              [&](Tape&, const std::vector<Var>& v) { return weighted_sum(embedding(v[0], ids)); }) <=
        1e-4);
}

TEST_CASE("LSTM") {
  std::mt19937_64 rng(2);
  const size_t in = 3, H = 4;

  SUBCASE("zero weights give zero output") {
    Tape tape;
    const Var out = lstm_sequence(tape.constant(random_tensor(5, in, rng)),
                                  tape.constant(Tensor::matrix(in, 4 * H)),
                                  tape.constant(Tensor::matrix(H, 4 * H)),
                                  tape.constant(Tensor::matrix(1, 4 * H)));
    for (double v : out.value().values()) CHECK(v == 0.0);
  }
  SUBCASE("one step equals one cell and the eval step") {
    const Tensor x = random_tensor(1, in, rng), wx = random_tensor(in, 4 * H, rng),
                 wh = random_tensor(H, 4 * H, rng), b = random_tensor(1, 4 * H, rng);
    Tape tape;
    const Var seq = lstm_sequence(tape.constant(x), tape.constant(wx), tape.constant(wh),
                                  tape.constant(b));
    const Var cell = lstm_cell(tape.constant(x), tape.constant(Tensor::matrix(1, H)),
                               tape.constant(Tensor::matrix(1, H)), tape.constant(wx),
                               tape.constant(wh), tape.constant(b));
    std::vector<double> h(H, 0.0), c(H, 0.0);
    lstm_step(x.values(), h, c, wx, wh, b);
    for (size_t j = 0; j < H; ++j) {
      CHECK(seq.value()[j] == doctest::Approx(cell.value()[j]).epsilon(1e-14));
      CHECK(seq.value()[j] == doctest::Approx(h[j]).epsilon(1e-14));
    }
  }
  SUBCASE("outputs never depend on later frames") {
    const Tensor wx = random_tensor(in, 4 * H, rng), wh = random_tensor(H, 4 * H, rng),
                 b = random_tensor(1, 4 * H, rng);
    Tensor x = random_tensor(6, in, rng);
    auto run = [&](const Tensor& input) {
      Tape tape;
      return lstm_sequence(tape.constant(input), tape.constant(wx), tape.constant(wh),
                           tape.constant(b))
          .value();
    };
    const Tensor before = run(x);
    for (size_t t = 0; t < 6; ++t) {
      Tensor y = x;
      for (size_t j = 0; j < in; ++j) y.at(t, j) += 0.5;
      const Tensor after = run(y);
      for (size_t r = 0; r < t; ++r) {
        for (size_t j = 0; j < H; ++j) CHECK(after.at(r, j) == before.at(r, j));
      }
    }
  }
  SUBCASE("gradient on a 3-step input") {
    const double err = fd_check(
        {random_tensor(3, in, rng), random_tensor(in, 4 * H, rng),
         random_tensor(H, 4 * H, rng), random_tensor(1, 4 * H, rng)},
        [&](Tape&, const std::vector<Var>& v) {
          return weighted_sum(lstm_sequence(v[0], v[1], v[2], v[3]));
        });
    CHECK(err <= 1e-4);
  }
}

TEST_CASE("time max-pooling") {
  Tape tape;
  const Var c4 = maxpool_time(tape.constant(Tensor({4, 2}, 0.7)));
  CHECK(c4.rows() == 2);
  for (double v : c4.value().values()) CHECK(v == 0.7);

  const Var odd = maxpool_time(tape.constant(Tensor({3, 1}, std::vector<double>{1, 5, 2})));
  CHECK(odd.rows() == 2);
  CHECK(odd.value()[0] == 5.0);
  CHECK(odd.value()[1] == 2.0);

  SUBCASE("gradient reaches only the maxima") {
    Tape t2;
    const Var x = t2.leaf(Tensor({4, 2}, std::vector<double>{1, 8, 3, 2, -1, 0, -4, 6}), true);
    t2.backward(sum(maxpool_time(x)));
    const Tensor& g = t2.grad(x.id());
    CHECK(g.storage() == std::vector<double>{0, 1, 1, 0, 1, 0, 0, 1});
    std::mt19937_64 rng(3);
    CHECK(fd_check({random_tensor(5, 3, rng)}, [&](Tape&, const std::vector<Var>& v) {
            return weighted_sum(maxpool_time(v[0]));
          }) <= 1e-4);
  }
}

TEST_CASE("dot attention") {
  std::mt19937_64 rng(4);
  SUBCASE("identical keys average the values") {
    Tape tape;
    const Tensor key = random_tensor(1, 4, rng);
    Tensor keys = Tensor::matrix(3, 4);
    for (size_t r = 0; r < 3; ++r) {
      for (size_t j = 0; j < 4; ++j) keys.at(r, j) = key[j];
    }
    const Tensor values = random_tensor(3, 4, rng);
    const Var out = dot_attention(tape.constant(random_tensor(2, 4, rng)),
                                  tape.constant(keys), tape.constant(values), 2);
    for (size_t m = 0; m < 2; ++m) {
      for (size_t j = 0; j < 4; ++j) {
        const double mean = (values.at(0, j) + values.at(1, j) + values.at(2, j)) / 3.0;
        CHECK(out.value().at(m, j) == doctest::Approx(mean).epsilon(1e-12));
      }
    }
  }
  SUBCASE("a single key returns its value") {
    Tape tape;
    const Tensor v = random_tensor(1, 4, rng);
    const Var out = dot_attention(tape.constant(random_tensor(3, 4, rng)),
                                  tape.constant(random_tensor(1, 4, rng)),
                                  tape.constant(v), 4);
    for (size_t m = 0; m < 3; ++m) {
      for (size_t j = 0; j < 4; ++j) CHECK(out.value().at(m, j) == doctest::Approx(v[j]));
    }
  }
  SUBCASE("weights are normalized per head") {
    for (int trial = 0; trial < 20; ++trial) {
      const Tensor w = attention_weights(random_tensor(3, 8, rng, 3.0),
                                         random_tensor(5, 8, rng, 3.0), 4);
      for (size_t m = 0; m < 3; ++m) {
        for (size_t h = 0; h < 4; ++h) {
          double s = 0.0;
          for (size_t n = 0; n < 5; ++n) s += w[(m * 4 + h) * 5 + n];
          CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
        }
      }
    }
  }
  SUBCASE("head count must divide the width") {
    Tape tape;
    const Var x = tape.constant(random_tensor(2, 6, rng));
    CHECK_THROWS_AS(dot_attention(x, x, x, 4), Error);
  }
  SUBCASE("gradient") {
    CHECK(fd_check({random_tensor(2, 4, rng), random_tensor(3, 4, rng), random_tensor(3, 4, rng)},
                   [&](Tape&, const std::vector<Var>& v) {
                     return weighted_sum(dot_attention(v[0], v[1], v[2], 2));
                   }) <= 1e-4);
  }
}

TEST_CASE("dropout") {
  std::mt19937_64 rng(5);
  Tape tape;
  const Var x = tape.constant(Tensor({100, 100}, 1.0));
  const Var eval = dropout(x, 0.2, false, rng);
  CHECK(eval.value() == x.value());

  // Each kept entry becomes 1/0.8, each dropped one 0: mean 1, variance 0.25.
  const Var train = dropout(x, 0.2, true, rng);
  double mean = 0.0;
  size_t zeros = 0;
  for (double v : train.value().values()) {
    mean += v;
    if (v == 0.0) ++zeros;
    else CHECK(v == doctest::Approx(1.25));
  }
  const double n = 1e4;
  mean /= n;
  CHECK(std::abs(mean - 1.0) <= 3.0 * std::sqrt(0.25 / n));
  CHECK(zeros > 0);
}

TEST_CASE("Adam") {
  std::mt19937_64 rng(6);
  auto store_with = [&](Tensor t) {
    ParamStore ps(Precision::kFloat64);
    ps.add("w", std::move(t));
    return ps;
  };

  SUBCASE("first step moves each entry by about lr") {
    ParamStore ps = store_with(Tensor({2, 3}, 0.5));
    AdamState st;
    adam_step(ps, {{"w", Tensor({2, 3}, 1.0)}}, 1e-3, 1, st);
    for (double v : ps.get("w").value.values()) CHECK(v == doctest::Approx(0.5 - 1e-3).epsilon(1e-6));
  }
  SUBCASE("matches the reference update over several steps") {
    const Tensor init = random_tensor(2, 2, rng);
    ParamStore ps = store_with(init);
    AdamState st;
    std::vector<double> x(init.values().begin(), init.values().end()), m(4, 0.0), v(4, 0.0);
    for (int step = 1; step <= 5; ++step) {
      const Tensor g = random_tensor(2, 2, rng);
      adam_step(ps, {{"w", g}}, 0.01, step, st);
      for (size_t i = 0; i < 4; ++i) {
        m[i] = 0.9 * m[i] + 0.1 * g[i];
        v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
        const double mh = m[i] / (1 - std::pow(0.9, step));
        const double vh = v[i] / (1 - std::pow(0.999, step));
        x[i] -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
      }
    }
    for (size_t i = 0; i < 4; ++i) {
      CHECK(ps.get("w").value[i] == doctest::Approx(x[i]).epsilon(1e-12));
    }
  }
  SUBCASE("frozen and zero-gradient tensors stay put") {
    ParamStore ps(Precision::kFloat64);
    ps.add("a", random_tensor(2, 2, rng));
    ps.add("b", random_tensor(2, 2, rng));
    ps.set_frozen("a", true);
    const ParamStore before = ps;
    AdamState st;
    adam_step(ps, {{"a", Tensor({2, 2}, 1.0)}, {"b", Tensor({2, 2}, 0.0)}}, 0.1, 1, st);
    CHECK(ps.get("a").value == before.get("a").value);
    CHECK(ps.get("b").value == before.get("b").value);
    ps.set_all_frozen(true);
    adam_step(ps, {{"a", Tensor({2, 2}, 1.0)}, {"b", Tensor({2, 2}, 1.0)}}, 0.1, 2, st);
    CHECK(ps.hash() == before.hash());
  }
}

TEST_CASE("float32 storage keeps values exactly representable") {
  std::mt19937_64 rng(7);
  ParamStore ps(Precision::kFloat32);
  ps.add("w", random_tensor(3, 3, rng));
  for (double v : ps.get("w").value.values()) CHECK(static_cast<double>(static_cast<float>(v)) == v);
  AdamState st;
  adam_step(ps, {{"w", random_tensor(3, 3, rng)}}, 1e-3, 1, st);
  for (double v : ps.get("w").value.values()) CHECK(static_cast<double>(static_cast<float>(v)) == v);
}

TEST_CASE("learning-rate schedule") {
  CHECK(lr_at(0) == 5e-4);
  CHECK(lr_at(2 * 20000) == doctest::Approx(5e-4 * 0.81).epsilon(1e-14));
  CHECK(lr_at(19999) == 5e-4);
  CHECK(lr_at(1000, 5e-4, 0.9, 500) == doctest::Approx(5e-4 * 0.81));
  CHECK(lr_at(123456, 2e-3, 1.0, 10) == 2e-3);
}

TEST_CASE("parameter counts and reductions") {
  ParamStore ps;
  ps.add("a", Tensor({3, 4}));
  ps.add("b", Tensor({1, 5}));
  CHECK(count_params(ps) == 17);
  CHECK(ps.count("a") == 12);
  CHECK(reduction_percent(110, 70) == 36);
  CHECK(reduction_percent(110, 50) == 55);
  CHECK(reduction_percent(40, 40) == 0);
  CHECK(reduction_exact(72, 32) == doctest::Approx(55.5556).epsilon(1e-5));
}

TEST_CASE("parameter hashes track names and values") {
  ParamStore a;
  a.add("enc.w", Tensor({2, 2}, 0.25));
  a.add("pred.w", Tensor({2, 2}, 0.5));
  ParamStore b = a;
  CHECK(a.hash() == b.hash());
  b.get("pred.w").value[3] = 0.75;
  CHECK(a.hash("enc.") == b.hash("enc."));
  CHECK(a.hash("pred.") != b.hash("pred."));
  CHECK(a.hash() != b.hash());
}

TEST_CASE("library gradient checks all pass") {
  const std::vector<GradCheckItem> items = run_grad_checks(1);
  CHECK(items.size() >= 20);
  for (const GradCheckItem& it : items) {
    INFO(it.name << " rel " << it.max_rel_error);
    CHECK(it.checked > 0);
    CHECK(it.passed());
  }
}
