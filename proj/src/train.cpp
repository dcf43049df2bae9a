#include "tpkd/train.hpp"

#include <functional>
#include <json.hpp>
#include <memory>
#include <numeric>
#include <sstream>

#include "tpkd/error.hpp"

namespace tpkd {

using nnet::Binding;
using nnet::GradMap;
using nnet::ParamStore;
using nnet::Tape;
using nnet::Tensor;
using nnet::Var;

std::string to_json_line(const LossRecord& r) {
  nlohmann::json j{{"stage", r.stage}, {"role", r.role},   {"step", r.step},
                   {"epoch", r.epoch}, {"lr", r.lr},       {"loss", r.loss},
                   {"task", r.task},   {"distill", r.distill}};
  return j.dump();
}

uint64_t derive_seed(uint64_t seed, std::string_view tag) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  // splitmix64 finalizer over the combined value
  uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (h | 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

namespace {

struct Parts {
  Var total;
  double task = 0.0;
  double distill = 0.0;
};

using StepFn = std::function<Parts(const Utterance&, Binding&, std::mt19937_64&)>;

void shuffle(std::vector<size_t>& v, std::mt19937_64& rng) {
  for (size_t i = v.size(); i > 1; --i) {
    const size_t j = static_cast<size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

void accumulate(GradMap& acc, const GradMap& g) {
  for (const auto& [name, t] : g) {
    auto [it, inserted] = acc.try_emplace(name, t);
    if (inserted) continue;
    auto dst = it->second.values();
    auto src = t.values();
    for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }
}

std::vector<LossRecord> run_training(const std::vector<ParamStore*>& stores,
                                     const std::vector<Utterance>& train, int epochs,
                                     const Config& cfg, std::mt19937_64& rng,
                                     int stage, Role role, const StepFn& fn) {
  require(!train.empty(), ErrorCode::kInvalidArgument, "empty training split");
  std::vector<const ParamStore*> cstores(stores.begin(), stores.end());
  nnet::AdamState adam;
  std::vector<LossRecord> curve;
  std::vector<size_t> order(train.size());
  std::iota(order.begin(), order.end(), size_t{0});
  const size_t B = static_cast<size_t>(cfg.train.batch_size);
  long step = 0;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    shuffle(order, rng);
    for (size_t start = 0; start < order.size(); start += B) {
      const size_t end = std::min(order.size(), start + B);
      const double m = static_cast<double>(end - start);
      GradMap acc;
      LossRecord rec;
      for (size_t i = start; i < end; ++i) {
        Tape tape;
        Binding bind(tape, cstores);
        Parts p = fn(train[order[i]], bind, rng);
        tape.backward(p.total);
        accumulate(acc, bind.grads());
        rec.loss += p.total.scalar() / m;
        rec.task += p.task / m;
        rec.distill += p.distill / m;
      }
      for (auto& [name, g] : acc) {
        for (double& v : g.storage()) v /= m;
      }
      rec.lr = nnet::lr_at(step, cfg.sched.lr, cfg.sched.decay, cfg.sched.decay_interval);
      ++step;
      for (ParamStore* s : stores) {
        nnet::adam_step(*s, acc, rec.lr, static_cast<int>(step), adam);
      }
      rec.stage = stage;
      rec.role = role_name(role);
      rec.step = step;
      rec.epoch = epoch;
      curve.push_back(std::move(rec));
    }
  }
  return curve;
}

std::string rng_state(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

std::string hex(uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08x", v);
  return buf;
}

void check_unchanged(uint32_t before, uint32_t after, const std::string& what) {
  require(before == after, ErrorCode::kFrozenDrift, what + " changed while frozen");
}

void check_compatible(const Checkpoint& a, const Checkpoint& b) {
  require(a.vocab == b.vocab && a.feat_dim == b.feat_dim && a.first.pool_layers == b.first.pool_layers,
          ErrorCode::kShapeMismatch, "teacher and student are not compatible");
}

const char* first_family(const FirstPassDims& d, const RoleTable& t) {
  return d.enc_width == t.large_first.enc_width && d.enc_layers == t.large_first.enc_layers
             ? "first.large"
             : "first.small";
}

}  // namespace

StageResult train_stage1(const Config& cfg, Role role, const Dataset& data,
                         const Checkpoint* teacher, uint64_t seed) {
  cfg.validate();
  LossWeights w = cfg.loss;
  if (role != Role::kStudent) w.beta = 0.0;
  const bool distill = w.beta > 0.0;
  if (distill) {
    require(teacher != nullptr, ErrorCode::kMissingTeacher,
            "student stage 1 needs a teacher checkpoint");
    require(teacher->stage == 1, ErrorCode::kWrongStage,
            "stage-1 distillation needs the teacher's stage-1 checkpoint");
  }

  const RoleConfig rc = role_config(role, cfg.roles, cfg.train.student_las);
  const int K = data.spec.vocab;
  RnntModel model(K, data.spec.feat_dim, rc.first,
                  derive_seed(seed, first_family(rc.first, cfg.roles)));

  // Teacher coarse lattices, evaluation mode, computed once.
  std::vector<std::shared_ptr<const CoarseLattice>> coarse;
  uint32_t teacher_hash = 0;
  std::optional<RnntModel> tmodel;
  if (distill) {
    tmodel.emplace(teacher->rnnt());
    check_compatible(*teacher, Checkpoint::from_model(model, role, 1));
    teacher_hash = tmodel->params().hash();
    coarse.reserve(data.train.size());
    for (const Utterance& u : data.train) {
      coarse.push_back(std::make_shared<const CoarseLattice>(
          rnnt_forward_pass(*tmodel, u.features, u.transcript), u.transcript));
    }
  }
  std::map<int, size_t> slot;
  for (size_t i = 0; i < data.train.size(); ++i) slot[data.train[i].id] = i;

  std::mt19937_64 rng(derive_seed(seed, "train.stage1"));
  StepFn fn = [&](const Utterance& u, Binding& bind, std::mt19937_64& r) {
    Var enc = encode(model, bind, u.features, ForwardMode{true, &r});
    Var lp = rnnt_logprobs(model, bind, enc, u.transcript);
    const int T = static_cast<int>(enc.rows());
    Var rnnt = nnet::rnnt_loss(lp, T, u.transcript);
    Parts p;
    p.task = rnnt.scalar();
    if (!distill) {
      p.total = rnnt;
      return p;
    }
    Var kd = nnet::scale(nnet::coarse_distill(lp, coarse[slot.at(u.id)], u.transcript),
                         distill_scale(T, u.transcript.size(), w.distill_norm));
    p.distill = kd.scalar();
    p.total = nnet::add(nnet::scale(kd, w.beta), nnet::scale(rnnt, 1.0 - w.beta));
    return p;
  };
  StageResult res;
  res.curve = run_training({&model.params()}, data.train, cfg.train.epochs_stage1, cfg,
                           rng, 1, role, fn);
  if (distill) check_unchanged(teacher_hash, tmodel->params().hash(), "teacher");

  res.checkpoint = Checkpoint::from_model(model, role, 1);
  res.checkpoint.rng_state = rng_state(rng);
  auto& prov = res.checkpoint.provenance;
  prov["seed"] = std::to_string(seed);
  prov["beta"] = std::to_string(w.beta);
  if (distill) prov["teacher_hash"] = hex(teacher_hash);
  return res;
}

StageResult train_stage2(const Config& cfg, const Checkpoint& stage1,
                         const Dataset& data, const Checkpoint* teacher,
                         uint64_t seed) {
  cfg.validate();
  require(stage1.stage == 1, ErrorCode::kWrongStage,
          "stage 2 starts from a stage-1 checkpoint, got stage " +
              std::to_string(stage1.stage));
  const Role role = stage1.role;
  LossWeights w = cfg.loss;
  if (role != Role::kStudent) w.gamma = 0.0;
  const bool distill = w.gamma > 0.0;
  const int want_teacher_stage =
      cfg.train.teacher_source == TeacherSource::kFinal ? 3 : 2;
  if (distill) {
    require(teacher != nullptr, ErrorCode::kMissingTeacher,
            "student stage 2 needs a teacher two-pass checkpoint");
    require(teacher->stage == want_teacher_stage && teacher->has_second_pass(),
            ErrorCode::kWrongStage,
            "stage-2 distillation needs the teacher's stage-" +
                std::to_string(want_teacher_stage) + " checkpoint");
    check_compatible(*teacher, stage1);
  }

  const RoleConfig rc = role_config(role, cfg.roles, cfg.train.student_las);
  const bool large_las = rc.second.las_width == cfg.roles.large_second.las_width &&
                         rc.second.addenc_width == cfg.roles.large_second.addenc_width;
  TwoPassModel model(stage1.rnnt(), rc.second,
                     derive_seed(seed, large_las ? "second.large" : "second.small"));
  freeze(model, FreezeSelector::kNone);
  freeze(model.shared(), FreezeSelector::kSharedEncoder);
  freeze(model.shared(), FreezeSelector::kRnntDecoder);
  const uint32_t first_hash = model.shared().params().hash();
  const uint32_t encoder_hash = model.shared().params().hash(kEncoderPrefix);

  // Frozen encoder outputs and teacher step distributions, computed once.
  std::vector<Tensor> enc_cache;
  std::vector<Tensor> teacher_steps;
  std::optional<TwoPassModel> tmodel;
  uint32_t teacher_hash = 0;
  if (distill) {
    tmodel.emplace(teacher->two_pass());
    teacher_hash = tmodel->shared().params().hash() ^ tmodel->second().hash();
  }
  std::map<int, size_t> slot;
  for (size_t i = 0; i < data.train.size(); ++i) {
    const Utterance& u = data.train[i];
    slot[u.id] = i;
    Tape tape;
    Binding bind(tape, {&model.shared().params()});
    enc_cache.push_back(encode(model.shared(), bind, u.features).value());
    if (distill) {
      const auto steps = las_forward_teacher_forced(*tmodel, u.features, u.transcript);
      Tensor t = Tensor::matrix(steps.size(), steps.front().logp.size());
      for (size_t r = 0; r < steps.size(); ++r) {
        std::copy(steps[r].logp.begin(), steps[r].logp.end(), t.row(r).begin());
      }
      teacher_steps.push_back(std::move(t));
    }
  }

  const int K = model.vocab();
  std::mt19937_64 rng(derive_seed(seed, "train.stage2"));
  const double rate = model.shared().dims().dropout;
  StepFn fn = [&](const Utterance& u, Binding& bind, std::mt19937_64& r) {
    const size_t i = slot.at(u.id);
    // The cached output stands in for the training-mode encoder, whose last
    // layer is followed by dropout.
    Var enc = bind.tape().constant(enc_cache[i]);
    if (rate > 0.0) enc = nnet::dropout(enc, rate, true, r);
    const ForwardMode mode{true, &r};
    Var lp = las_logprobs(model, bind, additional_encode(model, bind, enc, mode),
                          u.transcript);
    const std::vector<int> tg = las_targets(u.transcript, K);
    Var ce = nnet::nll_rows(lp, tg);
    Parts p;
    p.task = ce.scalar();
    if (!distill) {
      p.total = ce;
      return p;
    }
    Var kd = nnet::kl_rows(teacher_steps[i], lp);
    p.distill = kd.scalar();
    p.total = nnet::add(nnet::scale(kd, w.gamma), nnet::scale(ce, 1.0 - w.gamma));
    return p;
  };
  StageResult res;
  res.curve = run_training({&model.second()}, data.train, cfg.train.epochs_stage2, cfg,
                           rng, 2, role, fn);
  check_unchanged(encoder_hash, model.shared().params().hash(kEncoderPrefix),
                  "shared encoder");
  check_unchanged(first_hash, model.shared().params().hash(), "first pass");
  if (distill) {
    check_unchanged(teacher_hash,
                    tmodel->shared().params().hash() ^ tmodel->second().hash(),
                    "teacher");
  }

  res.checkpoint = Checkpoint::from_model(model, role, 2);
  res.checkpoint.rng_state = rng_state(rng);
  auto& prov = res.checkpoint.provenance;
  prov["seed"] = std::to_string(seed);
  prov["gamma"] = std::to_string(w.gamma);
  prov["parent_hash"] = hex(first_hash);
  if (distill) {
    prov["teacher_hash"] = hex(teacher_hash);
    prov["teacher_stage"] = std::to_string(teacher->stage);
  }
  return res;
}

StageResult train_stage3(const Config& cfg, const Checkpoint& stage2,
                         const Dataset& data, uint64_t seed) {
  cfg.validate();
  require(stage2.stage == 2 && stage2.has_second_pass(), ErrorCode::kWrongStage,
          "stage 3 starts from a stage-2 checkpoint, got stage " +
              std::to_string(stage2.stage));
  const Role role = stage2.role;
  const LossWeights w = cfg.loss;
  TwoPassModel model = stage2.two_pass();
  freeze(model, FreezeSelector::kNone);
  const uint32_t parent = model.shared().params().hash() ^ model.second().hash();
  const int K = model.vocab();

  std::mt19937_64 rng(derive_seed(seed, "train.stage3"));
  StepFn fn = [&](const Utterance& u, Binding& bind, std::mt19937_64& r) {
    Var enc = encode(model.shared(), bind, u.features, ForwardMode{true, &r});
    Var lp = rnnt_logprobs(model.shared(), bind, enc, u.transcript);
    Var rnnt = nnet::rnnt_loss(lp, static_cast<int>(enc.rows()), u.transcript);
    const ForwardMode mode{true, &r};
    Var las = las_logprobs(model, bind, additional_encode(model, bind, enc, mode),
                           u.transcript);
    const std::vector<int> tg = las_targets(u.transcript, K);
    Var ce = nnet::nll_rows(las, tg);
    Parts p;
    p.task = rnnt.scalar();
    p.distill = ce.scalar();
    p.total = nnet::add(nnet::scale(rnnt, w.lambda), nnet::scale(ce, 1.0 - w.lambda));
    return p;
  };
  StageResult res;
  res.curve = run_training(model.stores(), data.train, cfg.train.epochs_stage3, cfg, rng,
                           3, role, fn);
  res.checkpoint = Checkpoint::from_model(model, role, 3);
  res.checkpoint.rng_state = rng_state(rng);
  auto& prov = res.checkpoint.provenance;
  prov["seed"] = std::to_string(seed);
  prov["lambda"] = std::to_string(w.lambda);
  prov["parent_hash"] = hex(parent);
  return res;
}

}  // namespace tpkd
