#include "tpkd/experiment.hpp"

#include <json.hpp>
#include <map>

#include "tpkd/decode.hpp"
#include "tpkd/error.hpp"

namespace tpkd {

using nlohmann::json;

EvalResult evaluate(const Checkpoint& ck, const std::vector<Utterance>& utts,
                    const Config& cfg, bool rescoring) {
  require(!rescoring || ck.has_second_pass(), ErrorCode::kWrongStage,
          "rescoring needs a two-pass checkpoint");
  std::optional<TwoPassModel> two;
  std::optional<RnntModel> one;
  if (ck.has_second_pass()) {
    two.emplace(ck.two_pass());
  } else {
    one.emplace(ck.rnnt());
  }
  const RnntModel& first = two ? two->shared() : *one;

  EvalResult res;
  std::vector<RefHyp> fp_pairs, rs_pairs;
  for (const Utterance& u : utts) {
    UttResult r;
    r.id = u.id;
    r.ref = u.transcript;
    std::vector<Hypothesis> hyps = beam_search(first, u.features, cfg.beam);
    r.first_pass = hyps.front().tokens;
    fp_pairs.push_back({r.ref, r.first_pass});
    if (rescoring) {
      hyps = rescore(*two, u.features, std::move(hyps), cfg.rescore);
      r.rescored = pick_best(hyps).tokens;
      rs_pairs.push_back({r.ref, *r.rescored});
    }
    res.utts.push_back(std::move(r));
  }
  res.wer_first = corpus_wer(fp_pairs);
  res.ser_first = ser(fp_pairs);
  if (rescoring) {
    res.wer_rescored = corpus_wer(rs_pairs);
    res.ser_rescored = ser(rs_pairs);
  }
  return res;
}

std::string to_json_line(const UttResult& r) {
  json j{{"id", r.id}, {"ref", r.ref.tokens}, {"first_pass", r.first_pass.tokens}};
  j["rescored"] = r.rescored ? json(r.rescored->tokens) : json(nullptr);
  const LabelSequence& out = r.rescored ? *r.rescored : r.first_pass;
  j["wer_first"] = round2(wer(r.ref, r.first_pass));
  j["wer"] = round2(wer(r.ref, out));
  j["sentence_error"] = !(r.ref == out);
  return j.dump();
}

std::string to_json_line(const CellResult& r) {
  json j{{"cell", r.cell},
         {"role", r.role},
         {"stage", r.stage},
         {"seed", r.seed},
         {"wer", round2(r.wer)},
         {"ser", round2(r.ser)},
         {"wer_first_pass", round2(r.wer_first)},
         {"ser_first_pass", round2(r.ser_first)},
         {"params", r.params},
         {"teacher_params", r.teacher_params},
         {"reduction_pct", r.reduction}};
  return j.dump();
}

std::string to_json_line(const SweepPoint& p) {
  return json{{"beta", p.beta}, {"seed", p.seed}, {"wer", round2(p.wer)},
              {"ser", round2(p.ser)}}
      .dump();
}

namespace {

struct Cell {
  std::string name;
  StageResult result;
};

CellResult summarize(const std::string& name, const StageResult& sr, uint64_t seed,
                     const Dataset& data, const Config& cfg) {
  const Checkpoint& ck = sr.checkpoint;
  CellResult c;
  c.cell = name;
  c.role = role_name(ck.role);
  c.stage = ck.stage;
  c.seed = seed;
  const EvalResult e = evaluate(ck, data.test, cfg, ck.stage >= 2);
  c.wer = e.wer();
  c.ser = e.ser();
  c.wer_first = e.wer_first;
  c.ser_first = e.ser_first;
  c.params = ck.param_count();
  c.curve = sr.curve;
  return c;
}

void note(const Progress& p, const std::string& msg) {
  if (p) p(msg);
}

}  // namespace

std::vector<CellResult> run_seed_matrix(const Config& cfg, const Dataset& data,
                                        uint64_t seed, const Progress& progress) {
  std::vector<std::pair<std::string, StageResult>> cells;
  auto add = [&](const std::string& name, StageResult r) {
    note(progress, "seed " + std::to_string(seed) + ": trained " + name);
    cells.emplace_back(name, std::move(r));
    return &cells.back().second.checkpoint;
  };
  cells.reserve(13);

  const Checkpoint* t1 = add("T1", train_stage1(cfg, Role::kTeacher, data, nullptr, seed));
  const Checkpoint* t2 = add("T2", train_stage2(cfg, *t1, data, nullptr, seed));
  const Checkpoint* t3 = add("T3", train_stage3(cfg, *t2, data, seed));
  const Checkpoint* las_teacher =
      cfg.train.teacher_source == TeacherSource::kFinal ? t3 : t2;

  const Checkpoint* m1 = add("M1", train_stage1(cfg, Role::kSmall, data, nullptr, seed));
  const Checkpoint* m2 = add("M2", train_stage2(cfg, *m1, data, nullptr, seed));
  add("M3", train_stage3(cfg, *m2, data, seed));

  const Checkpoint* s1 = add("S1", train_stage1(cfg, Role::kStudent, data, t1, seed));
  Config large = cfg;
  large.train.student_las = LasSize::kLarge;
  const Checkpoint* s2 = add("S2", train_stage2(large, *s1, data, las_teacher, seed));
  add("S3", train_stage3(large, *s2, data, seed));

  Config small = cfg;
  small.train.student_las = LasSize::kSmall;
  const Checkpoint* ss2 = add("SS2", train_stage2(small, *s1, data, las_teacher, seed));
  add("SS3", train_stage3(small, *ss2, data, seed));

  Config no_kd = large;
  no_kd.loss.gamma = 0.0;
  const Checkpoint* sp2 = add("S'2", train_stage2(no_kd, *s1, data, nullptr, seed));
  add("S'3", train_stage3(no_kd, *sp2, data, seed));

  std::vector<CellResult> out;
  std::map<int, size_t> teacher_params;
  for (const auto& [name, sr] : cells) {
    out.push_back(summarize(name, sr, seed, data, cfg));
    if (name[0] == 'T') teacher_params[out.back().stage] = out.back().params;
  }
  for (CellResult& c : out) {
    c.teacher_params = teacher_params.at(c.stage);
    c.reduction = nnet::reduction_percent(static_cast<double>(c.teacher_params),
                                          static_cast<double>(c.params));
  }
  note(progress, "seed " + std::to_string(seed) + ": evaluated");
  return out;
}

std::vector<CellResult> run_experiment_matrix(const Config& cfg, const Dataset& data,
                                              const Progress& progress) {
  std::vector<CellResult> all;
  for (int i = 0; i < cfg.experiment.seeds; ++i) {
    auto rows = run_seed_matrix(cfg, data, cfg.seed + static_cast<uint64_t>(i), progress);
    all.insert(all.end(), std::make_move_iterator(rows.begin()),
               std::make_move_iterator(rows.end()));
  }
  return all;
}

std::vector<SweepPoint> sweep_beta(const Config& cfg, const Dataset& data,
                                   const Progress& progress) {
  std::vector<SweepPoint> out;
  for (int i = 0; i < cfg.experiment.sweep_seeds; ++i) {
    const uint64_t seed = cfg.seed + static_cast<uint64_t>(i);
    const StageResult teacher = train_stage1(cfg, Role::kTeacher, data, nullptr, seed);
    for (double beta : cfg.experiment.betas) {
      Config c = cfg;
      c.loss.beta = beta;
      const StageResult s =
          train_stage1(c, Role::kStudent, data, &teacher.checkpoint, seed);
      const EvalResult e = evaluate(s.checkpoint, data.test, cfg, false);
      out.push_back({beta, seed, e.wer(), e.ser()});
      note(progress, "seed " + std::to_string(seed) + ": beta " + std::to_string(beta) +
                         " wer " + std::to_string(e.wer()));
    }
  }
  return out;
}

double mean_wer(const std::vector<CellResult>& rows, const std::string& cell,
                bool first_pass) {
  double s = 0.0;
  int n = 0;
  for (const CellResult& r : rows) {
    if (r.cell != cell) continue;
    s += first_pass ? r.wer_first : r.wer;
    ++n;
  }
  require(n > 0, ErrorCode::kInvalidArgument, "no rows for cell " + cell);
  return s / n;
}

}  // namespace tpkd
