// Command-line front end. Talks to the library only through tpkd.h.

#include <CLI11.hpp>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "tpkd/tpkd.h"

namespace {

struct Failure {
  tpkd_status status;
};

void check(tpkd_status s) {
  if (s != TPKD_OK) throw Failure{s};
}

// RAII owners for the opaque handles.
template <typename T, void (*Free)(T*)>
class Handle {
 public:
  Handle() = default;
  Handle(const Handle&) = delete;
  Handle& operator=(const Handle&) = delete;
  ~Handle() {
    if (p_) Free(p_);
  }
  T** out() { return &p_; }
  T* get() const { return p_; }

 private:
  T* p_ = nullptr;
};

using Config = Handle<tpkd_config, tpkd_config_free>;
using Dataset = Handle<tpkd_dataset, tpkd_dataset_free>;
using Checkpoint = Handle<tpkd_checkpoint, tpkd_checkpoint_free>;

struct CommonOpts {
  std::string config_path;
  std::optional<uint64_t> seed;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* app, CommonOpts& o) {
  app->add_option("--config", o.config_path, "key = value configuration file");
  app->add_option("--seed", o.seed, "run seed (for gen-data: the data seed)");
  app->add_option("--set", o.overrides, "extra key=value overrides")->take_all();
}

void load_config(const CommonOpts& o, Config& cfg, const char* seed_key = "seed") {
  if (o.config_path.empty()) {
    check(tpkd_config_default(cfg.out()));
  } else {
    check(tpkd_config_load(o.config_path.c_str(), cfg.out()));
  }
  for (const std::string& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      std::fprintf(stderr, "--set expects key=value, got '%s'\n", kv.c_str());
      throw Failure{TPKD_ERR_CONFIG};
    }
    check(tpkd_config_set(cfg.get(), kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str()));
  }
  if (o.seed) check(tpkd_config_set(cfg.get(), seed_key, std::to_string(*o.seed).c_str()));
}

void load_or_generate(const std::string& path, const Config& cfg, Dataset& ds) {
  if (path.empty()) {
    check(tpkd_dataset_generate(cfg.get(), ds.out()));
  } else {
    check(tpkd_dataset_load(path.c_str(), ds.out()));
  }
}

void print_progress(const char* msg, void*) {
  std::fprintf(stderr, "%s\n", msg);
}

tpkd_role parse_role(const std::string& s) {
  if (s == "teacher") return TPKD_ROLE_TEACHER;
  if (s == "small") return TPKD_ROLE_SMALL;
  return TPKD_ROLE_STUDENT;
}

const char* role_text(tpkd_role r) {
  switch (r) {
    case TPKD_ROLE_TEACHER: return "teacher";
    case TPKD_ROLE_SMALL: return "small";
    case TPKD_ROLE_STUDENT: return "student";
  }
  return "?";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tpkd: two-pass transducer distillation toolkit"};
  app.require_subcommand(1);

  CommonOpts gen_o, train_o, eval_o, sweep_o, matrix_o, grad_o, count_o;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  add_common(gen, gen_o);
  std::string gen_out;
  gen->add_option("--out", gen_out, "dataset file")->required();

  auto* train = app.add_subcommand("train", "run one training stage");
  add_common(train, train_o);
  int stage = 1;
  std::string role = "teacher", train_data, init_path, teacher_path, train_out, curve_path;
  train->add_option("--stage", stage, "1, 2 or 3")->required()->check(CLI::Range(1, 3));
  train->add_option("--role", role, "teacher, small or student")
      ->required()
      ->check(CLI::IsMember({"teacher", "small", "student"}));
  train->add_option("--data", train_data, "dataset file (generated from config if omitted)");
  train->add_option("--init", init_path, "previous-stage checkpoint (stages 2 and 3)");
  train->add_option("--teacher", teacher_path, "teacher checkpoint (student roles)");
  train->add_option("--out", train_out, "output checkpoint")->required();
  train->add_option("--curve", curve_path, "loss-curve JSON lines");

  auto* eval = app.add_subcommand("evaluate", "decode a split and report WER/SER");
  add_common(eval, eval_o);
  std::string eval_ck, eval_data, records_path, split = "test";
  bool rescoring = false;
  eval->add_option("--checkpoint", eval_ck, "checkpoint to evaluate")->required();
  eval->add_option("--data", eval_data, "dataset file (generated from config if omitted)");
  eval->add_flag("--rescoring", rescoring, "rescore the first-pass beam with the second pass");
  eval->add_option("--split", split, "test or train")->check(CLI::IsMember({"test", "train"}));
  eval->add_option("--records", records_path, "per-utterance JSON lines");

  auto* sweep = app.add_subcommand("sweep-beta", "student stage-1 WER over the beta grid");
  add_common(sweep, sweep_o);
  std::string sweep_data, sweep_out;
  sweep->add_option("--data", sweep_data, "dataset file (generated from config if omitted)");
  sweep->add_option("--out", sweep_out, "results JSON lines")->required();

  auto* matrix = app.add_subcommand("matrix", "train and evaluate the full T/M/S grid");
  add_common(matrix, matrix_o);
  std::string matrix_data, matrix_out;
  matrix->add_option("--data", matrix_data, "dataset file (generated from config if omitted)");
  matrix->add_option("--out", matrix_out, "results JSON lines")->required();

  auto* grad = app.add_subcommand("grad-check", "finite-difference gradient checks");
  add_common(grad, grad_o);

  auto* count = app.add_subcommand("count-params", "parameter counts and reductions");
  add_common(count, count_o);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      Config cfg;
      load_config(gen_o, cfg, "data.seed");
      Dataset ds;
      check(tpkd_dataset_generate(cfg.get(), ds.out()));
      check(tpkd_dataset_save(ds.get(), gen_out.c_str()));
      size_t n_train = 0, n_test = 0;
      check(tpkd_dataset_size(ds.get(), &n_train, &n_test));
      std::printf("wrote %s: %zu train, %zu test utterances\n", gen_out.c_str(), n_train,
                  n_test);
    } else if (train->parsed()) {
      Config cfg;
      load_config(train_o, cfg);
      Dataset ds;
      load_or_generate(train_data, cfg, ds);
      Checkpoint prev, teacher, out;
      if (!init_path.empty()) check(tpkd_checkpoint_load(init_path.c_str(), prev.out()));
      if (!teacher_path.empty()) {
        check(tpkd_checkpoint_load(teacher_path.c_str(), teacher.out()));
      }
      check(tpkd_train(cfg.get(), ds.get(), stage, parse_role(role), prev.get(),
                       teacher.get(), curve_path.empty() ? nullptr : curve_path.c_str(),
                       out.out()));
      check(tpkd_checkpoint_save(out.get(), train_out.c_str()));
      uint64_t params = 0;
      uint32_t hash = 0;
      check(tpkd_checkpoint_info(out.get(), nullptr, nullptr, &params, &hash));
      std::printf("wrote %s: stage %d %s, %llu params, hash %08x\n", train_out.c_str(), stage,
                  role.c_str(), static_cast<unsigned long long>(params), hash);
    } else if (eval->parsed()) {
      Config cfg;
      load_config(eval_o, cfg);
      Dataset ds;
      load_or_generate(eval_data, cfg, ds);
      Checkpoint ck;
      check(tpkd_checkpoint_load(eval_ck.c_str(), ck.out()));
      double wer = 0.0, ser = 0.0;
      check(tpkd_evaluate(cfg.get(), ck.get(), ds.get(), rescoring ? 1 : 0,
                          split == "train" ? 1 : 0,
                          records_path.empty() ? nullptr : records_path.c_str(), &wer, &ser));
      int ck_stage = 0;
      tpkd_role ck_role = TPKD_ROLE_TEACHER;
      check(tpkd_checkpoint_info(ck.get(), &ck_stage, &ck_role, nullptr, nullptr));
      std::printf("{\"role\": \"%s\", \"stage\": %d, \"mode\": \"%s\", \"split\": \"%s\", "
                  "\"wer\": %.2f, \"ser\": %.2f}\n",
                  role_text(ck_role), ck_stage, rescoring ? "rescoring" : "first_pass",
                  split.c_str(), wer, ser);
    } else if (sweep->parsed()) {
      Config cfg;
      load_config(sweep_o, cfg);
      Dataset ds;
      load_or_generate(sweep_data, cfg, ds);
      check(tpkd_sweep_beta(cfg.get(), ds.get(), sweep_out.c_str(), print_progress, nullptr));
      std::printf("wrote %s\n", sweep_out.c_str());
    } else if (matrix->parsed()) {
      Config cfg;
      load_config(matrix_o, cfg);
      Dataset ds;
      load_or_generate(matrix_data, cfg, ds);
      check(tpkd_run_matrix(cfg.get(), ds.get(), matrix_out.c_str(), print_progress, nullptr));
      std::printf("wrote %s\n", matrix_out.c_str());
    } else if (grad->parsed()) {
      char* report = nullptr;
      int ok = 0;
      check(tpkd_grad_check(grad_o.seed.value_or(1), &report, &ok));
      std::fputs(report, stdout);
      tpkd_string_free(report);
      return ok ? 0 : 1;
    } else if (count->parsed()) {
      Config cfg;
      load_config(count_o, cfg);
      char* report = nullptr;
      check(tpkd_count_params(cfg.get(), &report));
      std::fputs(report, stdout);
      tpkd_string_free(report);
    }
  } catch (const Failure& f) {
    std::fprintf(stderr, "error (%s): %s\n", tpkd_status_name(f.status), tpkd_last_error());
    return static_cast<int>(f.status);
  }
  return 0;
}
