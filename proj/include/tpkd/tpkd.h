/* tpkd: two-pass transducer training with three-stage distillation.
 *
 * Plain C interface over opaque handles. Every fallible call returns a
 * tpkd_status; on failure tpkd_last_error() describes the problem for the
 * calling thread. Strings returned through char** are owned by the caller
 * and released with tpkd_string_free. */
#ifndef TPKD_H
#define TPKD_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define TPKD_API __declspec(dllexport)
#else
#define TPKD_API __attribute__((visibility("default")))
#endif

typedef enum {
  TPKD_OK = 0,
  TPKD_ERR_INVALID_ARGUMENT = 1,
  TPKD_ERR_SHAPE_MISMATCH = 2,
  TPKD_ERR_NO_ALIGNMENT = 3,
  TPKD_ERR_ORACLE_GUARD = 4,
  TPKD_ERR_IO = 5,
  TPKD_ERR_CORRUPT_FILE = 6,
  TPKD_ERR_VERSION_MISMATCH = 7,
  TPKD_ERR_WRONG_STAGE = 8,
  TPKD_ERR_MISSING_TEACHER = 9,
  TPKD_ERR_CONFIG = 10,
  TPKD_ERR_FROZEN_DRIFT = 11,
  TPKD_ERR_INTERNAL = 99
} tpkd_status;

typedef enum {
  TPKD_ROLE_TEACHER = 0,
  TPKD_ROLE_SMALL = 1,
  TPKD_ROLE_STUDENT = 2
} tpkd_role;

typedef struct tpkd_config tpkd_config;
typedef struct tpkd_dataset tpkd_dataset;
typedef struct tpkd_checkpoint tpkd_checkpoint;

/* Receives one human-readable progress line per finished unit of work. */
typedef void (*tpkd_progress_fn)(const char* message, void* user);

TPKD_API const char* tpkd_version(void);
TPKD_API const char* tpkd_last_error(void);
TPKD_API const char* tpkd_status_name(tpkd_status status);
TPKD_API void tpkd_string_free(char* s);

/* ---- configuration ---- */
TPKD_API tpkd_status tpkd_config_default(tpkd_config** out);
TPKD_API tpkd_status tpkd_config_load(const char* path, tpkd_config** out);
/* Applies one `key = value` setting; unknown keys are TPKD_ERR_CONFIG. */
TPKD_API tpkd_status tpkd_config_set(tpkd_config* cfg, const char* key,
                                     const char* value);
TPKD_API tpkd_status tpkd_config_to_text(const tpkd_config* cfg, char** out);
TPKD_API void tpkd_config_free(tpkd_config* cfg);

/* ---- data ---- */
/* Generates data.num_utts utterances from the data.* settings. */
TPKD_API tpkd_status tpkd_dataset_generate(const tpkd_config* cfg,
                                           tpkd_dataset** out);
TPKD_API tpkd_status tpkd_dataset_load(const char* path, tpkd_dataset** out);
TPKD_API tpkd_status tpkd_dataset_save(const tpkd_dataset* ds, const char* path);
TPKD_API tpkd_status tpkd_dataset_size(const tpkd_dataset* ds, size_t* n_train,
                                       size_t* n_test);
TPKD_API void tpkd_dataset_free(tpkd_dataset* ds);

/* ---- checkpoints ---- */
TPKD_API tpkd_status tpkd_checkpoint_load(const char* path, tpkd_checkpoint** out);
TPKD_API tpkd_status tpkd_checkpoint_save(const tpkd_checkpoint* ck,
                                          const char* path);
/* Any output pointer may be NULL. `hash` is a CRC-32 over all tensors. */
TPKD_API tpkd_status tpkd_checkpoint_info(const tpkd_checkpoint* ck, int* stage,
                                          tpkd_role* role, uint64_t* params,
                                          uint32_t* hash);
TPKD_API void tpkd_checkpoint_free(tpkd_checkpoint* ck);

/* ---- training ----
 * stage 1: `role` selects the model; `previous` must be NULL; a student with
 *          loss.beta > 0 needs the teacher's stage-1 checkpoint.
 * stage 2: `previous` is the stage-1 checkpoint (its role must equal `role`);
 *          a student with loss.gamma > 0 needs the teacher's stage-2 (or,
 *          with train.teacher_source = final, stage-3) checkpoint.
 * stage 3: `previous` is the stage-2 checkpoint; `teacher` is ignored.
 * When curve_path is non-NULL one JSON object per optimizer step is written
 * there. */
TPKD_API tpkd_status tpkd_train(const tpkd_config* cfg, const tpkd_dataset* ds,
                                int stage, tpkd_role role,
                                const tpkd_checkpoint* previous,
                                const tpkd_checkpoint* teacher,
                                const char* curve_path, tpkd_checkpoint** out);

/* ---- evaluation and experiments ---- */
/* Decodes the test split (or the train split when use_train_split != 0).
 * Percentages are written to wer/ser (either may be NULL); per-utterance
 * JSON lines go to records_path when non-NULL. */
TPKD_API tpkd_status tpkd_evaluate(const tpkd_config* cfg, const tpkd_checkpoint* ck,
                                   const tpkd_dataset* ds, int rescoring,
                                   int use_train_split, const char* records_path,
                                   double* wer, double* ser);

/* 13 cells per seed, one JSON object per cell written to out_path. */
TPKD_API tpkd_status tpkd_run_matrix(const tpkd_config* cfg, const tpkd_dataset* ds,
                                     const char* out_path, tpkd_progress_fn progress,
                                     void* user);

/* One JSON object per (seed, beta) written to out_path. */
TPKD_API tpkd_status tpkd_sweep_beta(const tpkd_config* cfg, const tpkd_dataset* ds,
                                     const char* out_path, tpkd_progress_fn progress,
                                     void* user);

/* Finite-difference checks of every differentiable op and loss in 64-bit
 * mode. `report` receives one JSON object per line; all_passed is 1 or 0. */
TPKD_API tpkd_status tpkd_grad_check(uint64_t seed, char** report, int* all_passed);

/* JSON report of parameter counts and reductions for the configured roles. */
TPKD_API tpkd_status tpkd_count_params(const tpkd_config* cfg, char** report);

#ifdef __cplusplus
}
#endif

#endif /* TPKD_H */
