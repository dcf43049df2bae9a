#include "tpkd/models.hpp"

#include <algorithm>
#include <cmath>

#include "tpkd/error.hpp"

namespace tpkd {

using nnet::Binding;
using nnet::ParamStore;
using nnet::Tape;
using nnet::Tensor;
using nnet::Var;

const char* role_name(Role r) {
  switch (r) {
    case Role::kTeacher: return "teacher";
    case Role::kSmall: return "small";
    case Role::kStudent: return "student";
  }
  return "?";
}

Role parse_role(const std::string& s) {
  if (s == "teacher") return Role::kTeacher;
  if (s == "small") return Role::kSmall;
  if (s == "student") return Role::kStudent;
  fail(ErrorCode::kInvalidArgument, "unknown role '" + s + "'");
}

RoleTable::RoleTable() {
  large_first = FirstPassDims{};
  small_first = FirstPassDims{};
  small_first.enc_width = 32;
  small_first.pred_embed = 12;
  small_first.pred_width = 20;
  small_first.joint_width = 20;
  large_second = SecondPassDims{};
  small_second = SecondPassDims{};
  small_second.addenc_width = 32;
  small_second.las_embed = 12;
  small_second.las_width = 32;
  small_second.att_dim = 32;
}

RoleConfig role_config(Role role, const RoleTable& table, LasSize las) {
  RoleConfig rc;
  rc.role = role;
  switch (role) {
    case Role::kTeacher:
      rc.first = table.large_first;
      rc.second = table.large_second;
      break;
    case Role::kSmall:
      rc.first = table.small_first;
      rc.second = table.small_second;
      break;
    case Role::kStudent:
      rc.first = table.small_first;
      rc.second = las == LasSize::kSmall ? table.small_second : table.large_second;
      break;
  }
  return rc;
}

namespace {

void add_lstm(ParamStore& ps, const std::string& prefix, size_t in, size_t hidden,
              std::mt19937_64& rng) {
  ps.add(prefix + "wx", nnet::uniform_init(in, 4 * hidden, in, rng));
  ps.add(prefix + "wh", nnet::uniform_init(hidden, 4 * hidden, hidden, rng));
  Tensor b = Tensor::matrix(1, 4 * hidden);
  for (size_t j = hidden; j < 2 * hidden; ++j) b[j] = 1.0;  // forget gate
  ps.add(prefix + "b", std::move(b));
}

void add_dense(ParamStore& ps, const std::string& prefix, size_t in, size_t out,
               std::mt19937_64& rng, bool bias = true) {
  ps.add(prefix + "_w", nnet::uniform_init(in, out, in, rng));
  if (bias) ps.add(prefix + "_b", Tensor::matrix(1, out));
}

void check_first_pass(const FirstPassDims& d) {
  require(d.enc_layers >= 1 && d.enc_width >= 1 && d.pred_embed >= 1 &&
              d.pred_width >= 1 && d.joint_width >= 1,
          ErrorCode::kInvalidArgument, "first-pass dimensions must be positive");
  require(d.pool_layers >= 0 && d.pool_layers <= d.enc_layers,
          ErrorCode::kInvalidArgument, "pool_layers must be in [0, enc_layers]");
  require(d.dropout >= 0.0 && d.dropout < 1.0, ErrorCode::kInvalidArgument,
          "dropout must be in [0, 1)");
}

void check_second_pass(const SecondPassDims& d) {
  require(d.addenc_width >= 1 && d.las_embed >= 1 && d.las_width >= 1 &&
              d.att_dim >= 1 && d.heads >= 1,
          ErrorCode::kInvalidArgument, "second-pass dimensions must be positive");
  require(d.att_dim % d.heads == 0, ErrorCode::kInvalidArgument,
          "attention width must be divisible by the head count");
}

std::string layer_prefix(int i) {
  return std::string(kEncoderPrefix) + "l" + std::to_string(i) + ".";
}

}  // namespace

RnntModel::RnntModel(int vocab, int feat_dim, const FirstPassDims& dims,
                     uint64_t seed, nnet::Precision precision)
    : vocab_(vocab), feat_dim_(feat_dim), dims_(dims), params_(precision) {
  require(vocab >= 1 && feat_dim >= 1, ErrorCode::kInvalidArgument,
          "vocab and feature dim must be positive");
  check_first_pass(dims);
  std::mt19937_64 rng(seed);
  const size_t H = static_cast<size_t>(dims.enc_width);
  for (int i = 0; i < dims.enc_layers; ++i) {
    add_lstm(params_, layer_prefix(i), i == 0 ? static_cast<size_t>(feat_dim) : H, H,
             rng);
  }
  const size_t E = static_cast<size_t>(dims.pred_embed);
  const size_t P = static_cast<size_t>(dims.pred_width);
  const size_t J = static_cast<size_t>(dims.joint_width);
  const size_t labels = static_cast<size_t>(vocab + 1);
  params_.add("pred.embed", nnet::uniform_init(labels, E, E, rng));
  add_lstm(params_, "pred.", E, P, rng);
  add_dense(params_, "joint.enc", H, J, rng);
  add_dense(params_, "joint.pred", P, J, rng, /*bias=*/false);
  add_dense(params_, "joint.out", J, labels, rng);
}

RnntModel::RnntModel(int vocab, int feat_dim, const FirstPassDims& dims,
                     ParamStore params)
    : vocab_(vocab), feat_dim_(feat_dim), dims_(dims), params_(std::move(params)) {
  check_first_pass(dims);
}

int RnntModel::pooled_frames(int input_frames) const {
  int t = input_frames;
  for (int i = 0; i < dims_.pool_layers; ++i) t = (t + 1) / 2;
  return t;
}

TwoPassModel::TwoPassModel(RnntModel shared, const SecondPassDims& dims,
                           uint64_t seed)
    : shared_(std::move(shared)), dims_(dims), second_(shared_.params().precision()) {
  check_second_pass(dims);
  std::mt19937_64 rng(seed);
  const size_t He = static_cast<size_t>(shared_.dims().enc_width);
  const size_t A = static_cast<size_t>(dims.addenc_width);
  const size_t E = static_cast<size_t>(dims.las_embed);
  const size_t H = static_cast<size_t>(dims.las_width);
  const size_t D = static_cast<size_t>(dims.att_dim);
  const size_t V = static_cast<size_t>(las_vocab(shared_.vocab()));
  add_lstm(second_, kAddEncPrefix, He, A, rng);
  second_.add("las.embed", nnet::uniform_init(V, E, E, rng));
  add_lstm(second_, kLasPrefix, E + D, H, rng);
  second_.add("las.wq", nnet::uniform_init(H, D, H, rng));
  second_.add("las.wk", nnet::uniform_init(A, D, A, rng));
  second_.add("las.wv", nnet::uniform_init(A, D, A, rng));
  add_dense(second_, "las.out", H + D, V, rng);
}

TwoPassModel::TwoPassModel(RnntModel shared, const SecondPassDims& dims,
                           ParamStore second)
    : shared_(std::move(shared)), dims_(dims), second_(std::move(second)) {
  check_second_pass(dims);
}

// ---- freezing ---------------------------------------------------------------

FreezeSelector parse_freeze_selector(const std::string& s) {
  if (s == "shared_encoder") return FreezeSelector::kSharedEncoder;
  if (s == "rnnt_decoder") return FreezeSelector::kRnntDecoder;
  if (s == "las") return FreezeSelector::kLas;
  if (s == "all") return FreezeSelector::kAll;
  if (s == "none") return FreezeSelector::kNone;
  fail(ErrorCode::kInvalidArgument, "unknown freeze selector '" + s + "'");
}

void freeze(RnntModel& model, FreezeSelector sel) {
  ParamStore& ps = model.params();
  switch (sel) {
    case FreezeSelector::kSharedEncoder: ps.set_frozen(kEncoderPrefix, true); break;
    case FreezeSelector::kRnntDecoder:
      ps.set_frozen(kPredPrefix, true);
      ps.set_frozen(kJointPrefix, true);
      break;
    case FreezeSelector::kLas: break;
    case FreezeSelector::kAll: ps.set_all_frozen(true); break;
    case FreezeSelector::kNone: ps.set_all_frozen(false); break;
  }
}

void freeze(TwoPassModel& model, FreezeSelector sel) {
  freeze(model.shared(), sel);
  ParamStore& ps = model.second();
  switch (sel) {
    case FreezeSelector::kLas:
    case FreezeSelector::kAll: ps.set_all_frozen(true); break;
    case FreezeSelector::kNone: ps.set_all_frozen(false); break;
    default: break;
  }
}

// ---- differentiable forward -------------------------------------------------

Var encode(const RnntModel& model, Binding& bind, const Tensor& features,
           ForwardMode mode) {
  require(features.rows() >= 1, ErrorCode::kInvalidArgument, "empty feature input");
  require(features.cols() == static_cast<size_t>(model.feat_dim()),
          ErrorCode::kShapeMismatch, "feature dim mismatch");
  const FirstPassDims& d = model.dims();
  require(!mode.train || mode.rng != nullptr || d.dropout == 0.0,
          ErrorCode::kInvalidArgument, "training mode needs an rng");
  Var x = bind.tape().constant(features);
  for (int i = 0; i < d.enc_layers; ++i) {
    const std::string p = layer_prefix(i);
    x = nnet::lstm_sequence(x, bind(p + "wx"), bind(p + "wh"), bind(p + "b"));
    if (i < d.pool_layers) x = nnet::maxpool_time(x, 2);
    if (i > 0 && mode.train) x = nnet::dropout(x, d.dropout, true, *mode.rng);
  }
  return x;
}

Var rnnt_logprobs(const RnntModel& model, Binding& bind, const Var& enc,
                  const LabelSequence& target) {
  target.validate(model.vocab());
  std::vector<int> inputs;
  inputs.reserve(target.tokens.size() + 1);
  inputs.push_back(kBlank);
  inputs.insert(inputs.end(), target.tokens.begin(), target.tokens.end());
  Var emb = nnet::embedding(bind("pred.embed"), inputs);
  Var g = nnet::lstm_sequence(emb, bind("pred.wx"), bind("pred.wh"), bind("pred.b"));
  Var enc_proj = nnet::dense(enc, bind("joint.enc_w"), bind("joint.enc_b"));
  Var pred_proj = nnet::matmul(g, bind("joint.pred_w"));
  Var z = nnet::broadcast_add_tanh(enc_proj, pred_proj);
  Var logits = nnet::dense(z, bind("joint.out_w"), bind("joint.out_b"));
  return nnet::log_softmax_rows(logits);
}

Var additional_encode(const TwoPassModel& model, Binding& bind, const Var& enc,
                      ForwardMode mode) {
  Var x = nnet::lstm_sequence(enc, bind("addenc.wx"), bind("addenc.wh"), bind("addenc.b"));
  const double rate = model.shared().dims().dropout;
  if (mode.train && rate > 0.0) {
    require(mode.rng != nullptr, ErrorCode::kInvalidArgument, "training mode needs an rng");
    x = nnet::dropout(x, rate, true, *mode.rng);
  }
  return x;
}

std::vector<int> las_targets(const LabelSequence& transcript, int vocab) {
  std::vector<int> out(transcript.tokens);
  out.push_back(eos_token(vocab));
  return out;
}

Var las_logprobs(const TwoPassModel& model, Binding& bind, const Var& addenc,
                 const LabelSequence& transcript) {
  const int K = model.vocab();
  transcript.validate(K);
  const SecondPassDims& d = model.dims();
  Tape& tape = bind.tape();
  std::vector<int> inputs;
  inputs.push_back(sos_token(K));
  inputs.insert(inputs.end(), transcript.tokens.begin(), transcript.tokens.end());

  Var keys = nnet::matmul(addenc, bind("las.wk"));
  Var values = nnet::matmul(addenc, bind("las.wv"));
  Var emb = nnet::embedding(bind("las.embed"), inputs);
  Var wx = bind("las.wx"), wh = bind("las.wh"), b = bind("las.b"), wq = bind("las.wq");
  const size_t H = static_cast<size_t>(d.las_width);
  const size_t D = static_cast<size_t>(d.att_dim);
  Var h = tape.constant(Tensor::matrix(1, H));
  Var c = tape.constant(Tensor::matrix(1, H));
  Var ctx = tape.constant(Tensor::matrix(1, D));
  std::vector<Var> outs;
  outs.reserve(inputs.size());
  for (size_t u = 0; u < inputs.size(); ++u) {
    Var x = nnet::concat_cols(nnet::row(emb, u), ctx);
    Var hc = nnet::lstm_cell(x, h, c, wx, wh, b);
    h = nnet::slice_cols(hc, 0, H);
    c = nnet::slice_cols(hc, H, 2 * H);
    ctx = nnet::dot_attention(nnet::matmul(h, wq), keys, values, d.heads);
    outs.push_back(nnet::concat_cols(h, ctx));
  }
  Var logits = nnet::dense(nnet::stack_rows(outs), bind("las.out_w"), bind("las.out_b"));
  return nnet::log_softmax_rows(logits);
}

// ---- evaluation-mode helpers ------------------------------------------------

LatticeDist rnnt_forward_pass(const RnntModel& model, const Tensor& features,
                              const LabelSequence& target) {
  Tape tape;
  Binding bind(tape, {&model.params()});
  Var enc = encode(model, bind, features);
  Var lp = rnnt_logprobs(model, bind, enc, target);
  const int T = static_cast<int>(enc.rows());
  LatticeDist dist(T, target.size(), model.vocab());
  std::copy(lp.value().storage().begin(), lp.value().storage().end(),
            dist.data().begin());
  return dist;
}

Tensor additional_encoder_output(const TwoPassModel& model, const Tensor& features) {
  Tape tape;
  Binding bind(tape, model.stores());
  Var enc = encode(model.shared(), bind, features);
  return additional_encode(model, bind, enc).value();
}

std::vector<StepDist> las_forward_teacher_forced(const TwoPassModel& model,
                                                 const Tensor& features,
                                                 const LabelSequence& transcript) {
  Tape tape;
  Binding bind(tape, model.stores());
  Var enc = encode(model.shared(), bind, features);
  Var lp = las_logprobs(model, bind, additional_encode(model, bind, enc), transcript);
  std::vector<StepDist> steps(lp.rows());
  for (size_t u = 0; u < lp.rows(); ++u) {
    auto r = lp.value().row(u);
    steps[u].logp.assign(r.begin(), r.end());
  }
  return steps;
}

double las_sequence_logprob(const TwoPassModel& model, const Tensor& addenc_out,
                            const LabelSequence& transcript) {
  Tape tape;
  Binding bind(tape, model.stores());
  Var a = tape.constant(addenc_out);
  Var lp = las_logprobs(model, bind, a, transcript);
  const std::vector<int> tg = las_targets(transcript, model.vocab());
  double s = 0.0;
  for (size_t u = 0; u < tg.size(); ++u) s += lp.value().at(u, static_cast<size_t>(tg[u]));
  return s;
}

FirstPassScorer::FirstPassScorer(const RnntModel& model, const Tensor& features)
    : model_(model) {
  Tape tape;
  Binding bind(tape, {&model.params()});
  Var enc = encode(model, bind, features);
  enc_proj_ = nnet::dense(enc, bind("joint.enc_w"), bind("joint.enc_b")).value();
}

FirstPassScorer::PredState FirstPassScorer::step(const PredState& s, int input) const {
  const ParamStore& ps = model_.params();
  PredState n = s;
  auto emb = ps.get("pred.embed").value.row(static_cast<size_t>(input));
  nnet::lstm_step(emb, n.h, n.c, ps.get("pred.wx").value, ps.get("pred.wh").value,
                  ps.get("pred.b").value);
  const Tensor& w = ps.get("joint.pred_w").value;
  const size_t J = w.cols();
  n.proj.assign(J, 0.0);
  for (size_t i = 0; i < n.h.size(); ++i) {
    const double hv = n.h[i];
    for (size_t j = 0; j < J; ++j) n.proj[j] += hv * w.at(i, j);
  }
  return n;
}

FirstPassScorer::PredState FirstPassScorer::start() const {
  PredState s;
  const size_t P = static_cast<size_t>(model_.dims().pred_width);
  s.h.assign(P, 0.0);
  s.c.assign(P, 0.0);
  return step(s, kBlank);
}

FirstPassScorer::PredState FirstPassScorer::advance(const PredState& s,
                                                    int token) const {
  return step(s, token);
}

std::vector<double> FirstPassScorer::joint(int t, const PredState& s) const {
  const ParamStore& ps = model_.params();
  const Tensor& w = ps.get("joint.out_w").value;
  const Tensor& b = ps.get("joint.out_b").value;
  const size_t J = w.rows(), L = w.cols();
  std::vector<double> z(J);
  auto e = enc_proj_.row(static_cast<size_t>(t));
  for (size_t j = 0; j < J; ++j) z[j] = std::tanh(e[j] + s.proj[j]);
  std::vector<double> out(b.storage());
  for (size_t j = 0; j < J; ++j) {
    for (size_t k = 0; k < L; ++k) out[k] += z[j] * w.at(j, k);
  }
  const double mx = *std::max_element(out.begin(), out.end());
  double sum = 0.0;
  for (double v : out) sum += std::exp(v - mx);
  const double lse = mx + std::log(sum);
  for (double& v : out) v -= lse;
  return out;
}

}  // namespace tpkd
