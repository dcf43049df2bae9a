#include "tpkd/tpkd.h"

#include <cstdlib>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <new>
#include <string>

#include "tpkd/checkpoint.hpp"
#include "tpkd/config.hpp"
#include "tpkd/data.hpp"
#include "tpkd/error.hpp"
#include "tpkd/experiment.hpp"
#include "tpkd/gradcheck.hpp"
#include "tpkd/train.hpp"

struct tpkd_config {
  tpkd::Config cfg;
};
struct tpkd_dataset {
  tpkd::Dataset ds;
};
struct tpkd_checkpoint {
  tpkd::Checkpoint ck;
};

namespace {

thread_local std::string g_last_error;

tpkd_status set_error(tpkd_status code, const std::string& msg) {
  g_last_error = msg;
  return code;
}

template <typename F>
tpkd_status guarded(F&& f) {
  try {
    g_last_error.clear();
    f();
    return TPKD_OK;
  } catch (const tpkd::Error& e) {
    return set_error(static_cast<tpkd_status>(e.code()), e.what());
  } catch (const std::bad_alloc&) {
    return set_error(TPKD_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return set_error(TPKD_ERR_INTERNAL, e.what());
  } catch (...) {
    return set_error(TPKD_ERR_INTERNAL, "unknown error");
  }
}

void need(const void* p, const char* what) {
  tpkd::require(p != nullptr, tpkd::ErrorCode::kInvalidArgument,
                std::string(what) + " must not be NULL");
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

std::ofstream open_out(const char* path) {
  std::ofstream f(path, std::ios::trunc);
  tpkd::require(static_cast<bool>(f), tpkd::ErrorCode::kIo,
                std::string("cannot write ") + path);
  return f;
}

tpkd::Role to_role(tpkd_role r) {
  switch (r) {
    case TPKD_ROLE_TEACHER: return tpkd::Role::kTeacher;
    case TPKD_ROLE_SMALL: return tpkd::Role::kSmall;
    case TPKD_ROLE_STUDENT: return tpkd::Role::kStudent;
  }
  tpkd::fail(tpkd::ErrorCode::kInvalidArgument, "unknown role");
}

tpkd_role from_role(tpkd::Role r) {
  switch (r) {
    case tpkd::Role::kTeacher: return TPKD_ROLE_TEACHER;
    case tpkd::Role::kSmall: return TPKD_ROLE_SMALL;
    case tpkd::Role::kStudent: return TPKD_ROLE_STUDENT;
  }
  return TPKD_ROLE_TEACHER;
}

tpkd::Progress wrap(tpkd_progress_fn fn, void* user) {
  if (!fn) return {};
  return [fn, user](const std::string& m) { fn(m.c_str(), user); };
}

}  // namespace

extern "C" {

const char* tpkd_version(void) { return "1.0.0"; }

const char* tpkd_last_error(void) { return g_last_error.c_str(); }

const char* tpkd_status_name(tpkd_status s) {
  switch (s) {
    case TPKD_OK: return "ok";
    case TPKD_ERR_INVALID_ARGUMENT: return "invalid argument";
    case TPKD_ERR_SHAPE_MISMATCH: return "shape mismatch";
    case TPKD_ERR_NO_ALIGNMENT: return "no alignment";
    case TPKD_ERR_ORACLE_GUARD: return "oracle guard";
    case TPKD_ERR_IO: return "i/o error";
    case TPKD_ERR_CORRUPT_FILE: return "corrupt file";
    case TPKD_ERR_VERSION_MISMATCH: return "version mismatch";
    case TPKD_ERR_WRONG_STAGE: return "wrong stage";
    case TPKD_ERR_MISSING_TEACHER: return "missing teacher";
    case TPKD_ERR_CONFIG: return "config error";
    case TPKD_ERR_FROZEN_DRIFT: return "frozen drift";
    case TPKD_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

void tpkd_string_free(char* s) { std::free(s); }

// ---- configuration ----------------------------------------------------------

tpkd_status tpkd_config_default(tpkd_config** out) {
  return guarded([&] {
    need(out, "out");
    *out = new tpkd_config{};
  });
}

tpkd_status tpkd_config_load(const char* path, tpkd_config** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = new tpkd_config{tpkd::load_config(path)};
  });
}

tpkd_status tpkd_config_set(tpkd_config* cfg, const char* key, const char* value) {
  return guarded([&] {
    need(cfg, "cfg");
    need(key, "key");
    need(value, "value");
    tpkd::Config next = cfg->cfg;
    next.set(key, value);
    next.validate();
    cfg->cfg = std::move(next);
  });
}

tpkd_status tpkd_config_to_text(const tpkd_config* cfg, char** out) {
  return guarded([&] {
    need(cfg, "cfg");
    need(out, "out");
    *out = dup_string(cfg->cfg.to_text());
  });
}

void tpkd_config_free(tpkd_config* cfg) { delete cfg; }

// ---- data -------------------------------------------------------------------

tpkd_status tpkd_dataset_generate(const tpkd_config* cfg, tpkd_dataset** out) {
  return guarded([&] {
    need(cfg, "cfg");
    need(out, "out");
    *out = new tpkd_dataset{tpkd::gen_toy_data(cfg->cfg.data, cfg->cfg.data.num_utts)};
  });
}

tpkd_status tpkd_dataset_load(const char* path, tpkd_dataset** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = new tpkd_dataset{tpkd::load_dataset(path)};
  });
}

tpkd_status tpkd_dataset_save(const tpkd_dataset* ds, const char* path) {
  return guarded([&] {
    need(ds, "ds");
    need(path, "path");
    tpkd::save_dataset(path, ds->ds);
  });
}

tpkd_status tpkd_dataset_size(const tpkd_dataset* ds, size_t* n_train, size_t* n_test) {
  return guarded([&] {
    need(ds, "ds");
    if (n_train) *n_train = ds->ds.train.size();
    if (n_test) *n_test = ds->ds.test.size();
  });
}

void tpkd_dataset_free(tpkd_dataset* ds) { delete ds; }

// ---- checkpoints ------------------------------------------------------------

tpkd_status tpkd_checkpoint_load(const char* path, tpkd_checkpoint** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = new tpkd_checkpoint{tpkd::load_checkpoint(path)};
  });
}

tpkd_status tpkd_checkpoint_save(const tpkd_checkpoint* ck, const char* path) {
  return guarded([&] {
    need(ck, "ck");
    need(path, "path");
    tpkd::save_checkpoint(path, ck->ck);
  });
}

tpkd_status tpkd_checkpoint_info(const tpkd_checkpoint* ck, int* stage, tpkd_role* role,
                                 uint64_t* params, uint32_t* hash) {
  return guarded([&] {
    need(ck, "ck");
    if (stage) *stage = ck->ck.stage;
    if (role) *role = from_role(ck->ck.role);
    if (params) *params = ck->ck.param_count();
    if (hash) *hash = ck->ck.shared.hash() ^ ck->ck.second_params.hash();
  });
}

void tpkd_checkpoint_free(tpkd_checkpoint* ck) { delete ck; }

// ---- training ---------------------------------------------------------------

tpkd_status tpkd_train(const tpkd_config* cfg, const tpkd_dataset* ds, int stage,
                       tpkd_role role, const tpkd_checkpoint* previous,
                       const tpkd_checkpoint* teacher, const char* curve_path,
                       tpkd_checkpoint** out) {
  return guarded([&] {
    need(cfg, "cfg");
    need(ds, "ds");
    need(out, "out");
    const tpkd::Config& c = cfg->cfg;
    const tpkd::Checkpoint* t = teacher ? &teacher->ck : nullptr;
    const tpkd::Role r = to_role(role);
    tpkd::StageResult res;
    if (stage == 1) {
      tpkd::require(previous == nullptr, tpkd::ErrorCode::kInvalidArgument,
                    "stage 1 takes no previous checkpoint");
      res = tpkd::train_stage1(c, r, ds->ds, t, c.seed);
    } else if (stage == 2 || stage == 3) {
      tpkd::require(previous != nullptr, tpkd::ErrorCode::kWrongStage,
                    "stage " + std::to_string(stage) + " needs the previous stage's checkpoint");
      tpkd::require(previous->ck.role == r, tpkd::ErrorCode::kInvalidArgument,
                    std::string("previous checkpoint has role ") +
                        tpkd::role_name(previous->ck.role));
      res = stage == 2 ? tpkd::train_stage2(c, previous->ck, ds->ds, t, c.seed)
                       : tpkd::train_stage3(c, previous->ck, ds->ds, c.seed);
    } else {
      tpkd::fail(tpkd::ErrorCode::kInvalidArgument, "stage must be 1, 2 or 3");
    }
    if (curve_path) {
      std::ofstream f = open_out(curve_path);
      for (const auto& rec : res.curve) f << tpkd::to_json_line(rec) << '\n';
    }
    *out = new tpkd_checkpoint{std::move(res.checkpoint)};
  });
}

// ---- evaluation and experiments ---------------------------------------------

tpkd_status tpkd_evaluate(const tpkd_config* cfg, const tpkd_checkpoint* ck,
                          const tpkd_dataset* ds, int rescoring, int use_train_split,
                          const char* records_path, double* wer, double* ser) {
  return guarded([&] {
    need(cfg, "cfg");
    need(ck, "ck");
    need(ds, "ds");
    const auto& utts = use_train_split ? ds->ds.train : ds->ds.test;
    const tpkd::EvalResult r = tpkd::evaluate(ck->ck, utts, cfg->cfg, rescoring != 0);
    if (records_path) {
      std::ofstream f = open_out(records_path);
      for (const auto& u : r.utts) f << tpkd::to_json_line(u) << '\n';
    }
    if (wer) *wer = tpkd::round2(r.wer());
    if (ser) *ser = tpkd::round2(r.ser());
  });
}

tpkd_status tpkd_run_matrix(const tpkd_config* cfg, const tpkd_dataset* ds,
                            const char* out_path, tpkd_progress_fn progress, void* user) {
  return guarded([&] {
    need(cfg, "cfg");
    need(ds, "ds");
    need(out_path, "out_path");
    std::ofstream f = open_out(out_path);
    const auto rows = tpkd::run_experiment_matrix(cfg->cfg, ds->ds, wrap(progress, user));
    for (const auto& r : rows) f << tpkd::to_json_line(r) << '\n';
  });
}

tpkd_status tpkd_sweep_beta(const tpkd_config* cfg, const tpkd_dataset* ds,
                            const char* out_path, tpkd_progress_fn progress, void* user) {
  return guarded([&] {
    need(cfg, "cfg");
    need(ds, "ds");
    need(out_path, "out_path");
    std::ofstream f = open_out(out_path);
    const auto points = tpkd::sweep_beta(cfg->cfg, ds->ds, wrap(progress, user));
    for (const auto& p : points) f << tpkd::to_json_line(p) << '\n';
  });
}

tpkd_status tpkd_grad_check(uint64_t seed, char** report, int* all_passed) {
  return guarded([&] {
    need(report, "report");
    const auto items = tpkd::run_grad_checks(seed);
    std::string text;
    bool ok = true;
    for (const auto& it : items) {
      text += tpkd::to_json_line(it) + "\n";
      ok = ok && it.passed();
    }
    *report = dup_string(text);
    if (all_passed) *all_passed = ok ? 1 : 0;
  });
}

tpkd_status tpkd_count_params(const tpkd_config* cfg, char** report) {
  return guarded([&] {
    need(cfg, "cfg");
    need(report, "report");
    const tpkd::Config& c = cfg->cfg;
    const int K = c.data.vocab, F = c.data.feat_dim;
    auto first = [&](tpkd::Role r) {
      const auto rc = tpkd::role_config(r, c.roles);
      return tpkd::RnntModel(K, F, rc.first, 0);
    };
    auto two = [&](tpkd::Role r, tpkd::LasSize las) {
      const auto rc = tpkd::role_config(r, c.roles, las);
      return tpkd::TwoPassModel(tpkd::RnntModel(K, F, rc.first, 0), rc.second, 0);
    };
    auto total = [](const tpkd::TwoPassModel& m) {
      return m.shared().params().count() + m.second().count();
    };
    const double t1 = static_cast<double>(first(tpkd::Role::kTeacher).params().count());
    const double s1 = static_cast<double>(first(tpkd::Role::kStudent).params().count());
    const double t2 = static_cast<double>(total(two(tpkd::Role::kTeacher, tpkd::LasSize::kLarge)));
    const double s2 = static_cast<double>(total(two(tpkd::Role::kStudent, tpkd::LasSize::kLarge)));
    const double ss2 = static_cast<double>(total(two(tpkd::Role::kStudent, tpkd::LasSize::kSmall)));
    nlohmann::json j;
    j["teacher_first_pass"] = t1;
    j["student_first_pass"] = s1;
    j["teacher_two_pass"] = t2;
    j["student_two_pass"] = s2;
    j["student_small_las_two_pass"] = ss2;
    j["reduction_first_pass_pct"] = tpkd::nnet::reduction_percent(t1, s1);
    j["reduction_two_pass_pct"] = tpkd::nnet::reduction_percent(t2, s2);
    j["reduction_two_pass_small_las_pct"] = tpkd::nnet::reduction_percent(t2, ss2);
    j["reduction_first_pass_exact"] = tpkd::nnet::reduction_exact(t1, s1);
    j["reduction_two_pass_exact"] = tpkd::nnet::reduction_exact(t2, s2);
    j["reduction_two_pass_small_las_exact"] = tpkd::nnet::reduction_exact(t2, ss2);
    *report = dup_string(j.dump(2) + "\n");
  });
}

}  // extern "C"
