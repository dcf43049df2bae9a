#include "tpkd/gradcheck.hpp"

#include <cmath>
#include <functional>
#include <json.hpp>
#include <memory>
#include <random>

#include "tpkd/distill.hpp"
#include "tpkd/lattice.hpp"
#include "tpkd/models.hpp"
#include "tpkd/nnet.hpp"
#include "tpkd/params.hpp"

namespace tpkd {

using nnet::Binding;
using nnet::ParamStore;
using nnet::Tape;
using nnet::Tensor;
using nnet::Var;

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

std::string to_json_line(const GradCheckItem& item) {
  return nlohmann::json{{"name", item.name},
                        {"max_rel_error", item.max_rel_error},
                        {"tolerance", item.tolerance},
                        {"checked", item.checked},
                        {"passed", item.passed()}}
      .dump();
}

namespace {

constexpr double kStep = 1e-6;
constexpr double kOpTol = 1e-4;
constexpr double kLatticeTol = 1e-5;

Tensor random_tensor(size_t r, size_t c, std::mt19937_64& rng, double scale = 1.0) {
  Tensor t = Tensor::matrix(r, c);
  for (double& v : t.storage()) v = (2.0 * nnet::uniform01(rng) - 1.0) * scale;
  return t;
}

using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

// Reduces a matrix output to a scalar with a fixed nonlinear readout so that
// every output entry receives a distinct upstream gradient.
Var readout(const Var& out, const Tensor& weights) {
  Tape& tape = out.tape();
  return nnet::sum(nnet::matmul(nnet::tanh(out), tape.constant(weights)));
}

GradCheckItem check_op(const std::string& name, std::vector<Tensor> inputs,
                       const Builder& build, double tol = kOpTol) {
  auto eval = [&](const std::vector<Tensor>& in, std::vector<Tensor>* grads) {
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& t : in) vars.push_back(tape.leaf(t, true));
    Var root = build(tape, vars);
    if (grads) {
      tape.backward(root);
      for (const Var& v : vars) {
        const Tensor* g = tape.grad_if_any(v.id());
        grads->push_back(g && !g->empty() ? *g : Tensor(v.value().shape(), 0.0));
      }
    }
    return root.scalar();
  };
  std::vector<Tensor> grads;
  eval(inputs, &grads);
  GradCheckItem item{name, 0.0, tol, 0};
  for (size_t i = 0; i < inputs.size(); ++i) {
    for (size_t k = 0; k < inputs[i].size(); ++k) {
      const double orig = inputs[i][k];
      inputs[i][k] = orig + kStep;
      const double up = eval(inputs, nullptr);
      inputs[i][k] = orig - kStep;
      const double down = eval(inputs, nullptr);
      inputs[i][k] = orig;
      const double numeric = (up - down) / (2.0 * kStep);
      item.max_rel_error =
          std::max(item.max_rel_error, relative_error(grads[i][k], numeric));
      ++item.checked;
    }
  }
  return item;
}

// Finite differences over (a sample of) every trainable parameter.
GradCheckItem check_model(const std::string& name, std::vector<ParamStore*> stores,
                          const std::function<Var(Binding&)>& build,
                          std::mt19937_64& rng, size_t per_tensor = 6) {
  std::vector<const ParamStore*> cstores(stores.begin(), stores.end());
  auto eval = [&](nnet::GradMap* grads) {
    Tape tape;
    Binding bind(tape, cstores);
    Var root = build(bind);
    if (grads) {
      tape.backward(root);
      *grads = bind.grads();
    }
    return root.scalar();
  };
  nnet::GradMap grads;
  eval(&grads);
  GradCheckItem item{name, 0.0, kOpTol, 0};
  for (ParamStore* store : stores) {
    for (auto& [pname, p] : store->all()) {
      if (p.frozen) continue;
      const Tensor& g = grads.at(pname);
      for (size_t s = 0; s < std::min(per_tensor, p.value.size()); ++s) {
        const size_t k = static_cast<size_t>(rng() % p.value.size());
        const double orig = p.value[k];
        p.value[k] = orig + kStep;
        const double up = eval(nullptr);
        p.value[k] = orig - kStep;
        const double down = eval(nullptr);
        p.value[k] = orig;
        const double numeric = (up - down) / (2.0 * kStep);
        item.max_rel_error = std::max(item.max_rel_error, relative_error(g[k], numeric));
        ++item.checked;
      }
    }
  }
  return item;
}

GradCheckItem check_lattice(std::mt19937_64& rng) {
  GradCheckItem item{"lattice.rnnt_grad", 0.0, kLatticeTol, 0};
  for (int trial = 0; trial < 5; ++trial) {
    const int T = 2 + static_cast<int>(rng() % 3);
    const int U = static_cast<int>(rng() % 3);
    const int K = 2 + static_cast<int>(rng() % 3);
    LabelSequence y;
    for (int u = 0; u < U; ++u) y.tokens.push_back(1 + static_cast<int>(rng() % K));
    std::vector<double> logits(static_cast<size_t>(T * (U + 1) * (K + 1)));
    for (double& v : logits) v = 2.0 * nnet::uniform01(rng) - 1.0;
    auto loss = [&](const std::vector<double>& z) {
      return -rnnt_forward(LatticeDist::from_logits(T, U, K, z), y);
    };
    // Chain rule through the per-node softmax: dL/dz = g - p * sum(g).
    const LatticeDist d = LatticeDist::from_logits(T, U, K, logits);
    const std::vector<double> g = rnnt_grad(d, y);
    const size_t L = static_cast<size_t>(K + 1);
    for (size_t node = 0; node < logits.size() / L; ++node) {
      double gs = 0.0;
      for (size_t k = 0; k < L; ++k) gs += g[node * L + k];
      for (size_t k = 0; k < L; ++k) {
        const size_t i = node * L + k;
        const double analytic = g[i] - std::exp(d.data()[i]) * gs;
        std::vector<double> z = logits;
        z[i] += kStep;
        const double up = loss(z);
        z[i] -= 2.0 * kStep;
        const double down = loss(z);
        item.max_rel_error = std::max(
            item.max_rel_error, relative_error(analytic, (up - down) / (2.0 * kStep)));
        ++item.checked;
      }
    }
  }
  return item;
}

}  // namespace

std::vector<GradCheckItem> run_grad_checks(uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<GradCheckItem> out;
  auto R = [&](size_t r, size_t c, double s = 1.0) { return random_tensor(r, c, rng, s); };

  out.push_back(check_lattice(rng));

  const Tensor w3 = R(3, 1), w4 = R(4, 1), w5 = R(5, 1), w8 = R(8, 1);
  out.push_back(check_op("nnet.matmul", {R(3, 4), R(4, 3)},
                         [&](Tape&, const auto& v) { return readout(nnet::matmul(v[0], v[1]), w3); }));
  out.push_back(check_op("nnet.add", {R(2, 3), R(2, 3)},
                         [&](Tape&, const auto& v) { return readout(nnet::add(v[0], v[1]), w3); }));
  out.push_back(check_op("nnet.add_row", {R(3, 3), R(1, 3)},
                         [&](Tape&, const auto& v) { return readout(nnet::add_row(v[0], v[1]), w3); }));
  out.push_back(check_op("nnet.scale", {R(2, 3)},
                         [&](Tape&, const auto& v) { return readout(nnet::scale(v[0], -1.7), w3); }));
  out.push_back(check_op("nnet.tanh", {R(2, 3, 2.0)},
                         [&](Tape&, const auto& v) { return readout(nnet::tanh(v[0]), w3); }));
  out.push_back(check_op("nnet.sigmoid", {R(2, 3, 2.0)},
                         [&](Tape&, const auto& v) { return readout(nnet::sigmoid(v[0]), w3); }));
  out.push_back(check_op("nnet.concat_cols", {R(2, 2), R(2, 3)}, [&](Tape&, const auto& v) {
    return readout(nnet::concat_cols(v[0], v[1]), w5);
  }));
  out.push_back(check_op("nnet.slice_cols", {R(2, 5)}, [&](Tape&, const auto& v) {
    return readout(nnet::slice_cols(v[0], 1, 4), w3);
  }));
  out.push_back(check_op("nnet.row_stack", {R(3, 3)}, [&](Tape&, const auto& v) {
    return readout(nnet::stack_rows({nnet::row(v[0], 2), nnet::row(v[0], 0)}), w3);
  }));
  out.push_back(check_op("nnet.dense", {R(3, 4), R(4, 3), R(1, 3)}, [&](Tape&, const auto& v) {
    return readout(nnet::dense(v[0], v[1], v[2]), w3);
  }));
  out.push_back(check_op("nnet.broadcast_add_tanh", {R(2, 3), R(3, 3)}, [&](Tape&, const auto& v) {
    return readout(nnet::broadcast_add_tanh(v[0], v[1]), w3);
  }));
  out.push_back(check_op("nnet.log_softmax_rows", {R(3, 4, 2.0)}, [&](Tape&, const auto& v) {
    return readout(nnet::log_softmax_rows(v[0]), w4);
  }));
  const std::vector<int> ids{2, 0, 2, 1};
  out.push_back(check_op("nnet.embedding", {R(3, 3)}, [&](Tape&, const auto& v) {
    return readout(nnet::embedding(v[0], ids), w3);
  }));
  out.push_back(check_op("nnet.maxpool_time", {R(5, 3)}, [&](Tape&, const auto& v) {
    return readout(nnet::maxpool_time(v[0], 2), w3);
  }));
  out.push_back(check_op("nnet.dropout", {R(4, 3)}, [&](Tape&, const auto& v) {
    std::mt19937_64 mask_rng(seed ^ 0xD0D0);
    return readout(nnet::dropout(v[0], 0.2, true, mask_rng), w3);
  }));
  out.push_back(check_op("nnet.lstm_sequence", {R(3, 3), R(3, 8, 0.5), R(2, 8, 0.5), R(1, 8, 0.5)},
                         [&](Tape&, const auto& v) {
                           return readout(nnet::lstm_sequence(v[0], v[1], v[2], v[3]),
                                          Tensor::matrix(2, 1, 0.7));
                         }));
  out.push_back(check_op("nnet.lstm_cell",
                         {R(1, 3), R(1, 2), R(1, 2), R(3, 8, 0.5), R(2, 8, 0.5), R(1, 8, 0.5)},
                         [&](Tape&, const auto& v) {
                           return readout(nnet::lstm_cell(v[0], v[1], v[2], v[3], v[4], v[5]), w4);
                         }));
  out.push_back(check_op("nnet.dot_attention", {R(2, 4), R(3, 4), R(3, 4)}, [&](Tape&, const auto& v) {
    return readout(nnet::dot_attention(v[0], v[1], v[2], 2), w4);
  }));

  // Loss ops on a small lattice.
  {
    const int T = 3, K = 3;
    const LabelSequence y({2, 1});
    const int U = y.size();
    const size_t rows = static_cast<size_t>(T * (U + 1));
    std::vector<double> tz(rows * (K + 1));
    for (double& z : tz) z = 2.0 * nnet::uniform01(rng) - 1.0;
    auto teacher = std::make_shared<const CoarseLattice>(
        LatticeDist::from_logits(T, U, K, tz), y);
    out.push_back(check_op("nnet.rnnt_loss", {R(rows, K + 1)}, [&](Tape&, const auto& v) {
      return nnet::rnnt_loss(nnet::log_softmax_rows(v[0]), T, y);
    }));
    out.push_back(check_op("nnet.coarse_distill", {R(rows, K + 1)}, [&](Tape&, const auto& v) {
      return nnet::coarse_distill(nnet::log_softmax_rows(v[0]), teacher, y);
    }));
    const std::vector<int> targets{1, 3, 0};
    out.push_back(check_op("nnet.nll_rows", {R(3, 4)}, [&](Tape&, const auto& v) {
      return nnet::nll_rows(nnet::log_softmax_rows(v[0]), targets);
    }));
    Tape scratch;
    const Tensor tlogp = nnet::log_softmax_rows(scratch.constant(R(3, 4, 2.0))).value();
    out.push_back(check_op("nnet.kl_rows", {R(3, 4)}, [&](Tape&, const auto& v) {
      return nnet::kl_rows(tlogp, nnet::log_softmax_rows(v[0]));
    }));
  }

  // Stage objectives through full tiny models in 64-bit storage.
  {
    const int K = 3, F = 3;
    FirstPassDims fd;
    fd.enc_layers = 2;
    fd.enc_width = 4;
    fd.pool_layers = 1;
    fd.pred_embed = 3;
    fd.pred_width = 4;
    fd.joint_width = 5;
    fd.dropout = 0.0;
    SecondPassDims sd;
    sd.addenc_width = 4;
    sd.las_embed = 3;
    sd.las_width = 4;
    sd.att_dim = 4;
    sd.heads = 2;
    const auto f64 = nnet::Precision::kFloat64;
    TwoPassModel student(RnntModel(K, F, fd, seed + 1, f64), sd, seed + 2);
    TwoPassModel teacher(RnntModel(K, F, fd, seed + 3, f64), sd, seed + 4);
    const Tensor feats = R(5, F);
    const LabelSequence y({1, 3});
    const LossWeights w{0.5, 0.5, 0.5, DistillNorm::kPerNode};

    auto coarse = std::make_shared<const CoarseLattice>(
        rnnt_forward_pass(teacher.shared(), feats, y), y);
    const auto tsteps = las_forward_teacher_forced(teacher, feats, y);
    Tensor tlogp = Tensor::matrix(tsteps.size(), tsteps.front().logp.size());
    for (size_t r = 0; r < tsteps.size(); ++r) {
      std::copy(tsteps[r].logp.begin(), tsteps[r].logp.end(), tlogp.row(r).begin());
    }
    const std::vector<int> las_tg = las_targets(y, K);

    out.push_back(check_model("loss.stage1", {&student.shared().params()},
                              [&](Binding& b) {
                                Var enc = encode(student.shared(), b, feats);
                                Var lp = rnnt_logprobs(student.shared(), b, enc, y);
                                const int T = static_cast<int>(enc.rows());
                                Var kd = nnet::scale(nnet::coarse_distill(lp, coarse, y),
                                                     distill_scale(T, y.size(), w.distill_norm));
                                Var rn = nnet::rnnt_loss(lp, T, y);
                                return nnet::add(nnet::scale(kd, w.beta),
                                                 nnet::scale(rn, 1.0 - w.beta));
                              },
                              rng));
    out.push_back(check_model("loss.stage2", {&student.second()},
                              [&](Binding& b) {
                                Tape& tape = b.tape();
                                Tape enc_tape;
                                Binding enc_bind(enc_tape, {&student.shared().params()});
                                Var enc = tape.constant(
                                    encode(student.shared(), enc_bind, feats).value());
                                Var lp = las_logprobs(student, b,
                                                      additional_encode(student, b, enc), y);
                                Var ce = nnet::nll_rows(lp, las_tg);
                                Var kd = nnet::kl_rows(tlogp, lp);
                                return nnet::add(nnet::scale(kd, w.gamma),
                                                 nnet::scale(ce, 1.0 - w.gamma));
                              },
                              rng));
    out.push_back(check_model("loss.stage3", student.stores(),
                              [&](Binding& b) {
                                Var enc = encode(student.shared(), b, feats);
                                Var lp = rnnt_logprobs(student.shared(), b, enc, y);
                                Var rn = nnet::rnnt_loss(lp, static_cast<int>(enc.rows()), y);
                                Var las = las_logprobs(student, b,
                                                       additional_encode(student, b, enc), y);
                                Var ce = nnet::nll_rows(las, las_tg);
                                return nnet::add(nnet::scale(rn, w.lambda),
                                                 nnet::scale(ce, 1.0 - w.lambda));
                              },
                              rng));
  }
  return out;
}

}  // namespace tpkd
