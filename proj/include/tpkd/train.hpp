#pragma once

// Three-stage training: RNN-T (+ coarse distillation), rescorer (+ step
// distillation) with a frozen first pass, and joint deep fine-tuning.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "tpkd/checkpoint.hpp"
#include "tpkd/config.hpp"
#include "tpkd/data.hpp"

namespace tpkd {

/// One optimizer step of a training run.
struct LossRecord {
  int stage = 0;
  std::string role;
  long step = 0;
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;     // batch mean of the combined objective
  double task = 0.0;     // batch mean of the ground-truth term (RNN-T or LAS CE)
  double distill = 0.0;  // batch mean of the distillation / second term
};

std::string to_json_line(const LossRecord& r);

struct StageResult {
  Checkpoint checkpoint;
  std::vector<LossRecord> curve;
};

/// Stable seed derivation: the same (seed, tag) always gives the same value.
uint64_t derive_seed(uint64_t seed, std::string_view tag);

/// Stage 1. Teacher and small roles train on the RNN-T loss alone (beta is
/// forced to 0); students need the teacher's stage-1 checkpoint when
/// beta > 0. Students and small models share initial weights for a seed.
StageResult train_stage1(const Config& cfg, Role role, const Dataset& data,
                         const Checkpoint* teacher, uint64_t seed);

/// Stage 2 from a stage-1 checkpoint. The whole first pass is frozen. A
/// student with gamma > 0 needs a teacher two-pass checkpoint; the student
/// rescorer width follows cfg.train.student_las.
StageResult train_stage2(const Config& cfg, const Checkpoint& stage1,
                         const Dataset& data, const Checkpoint* teacher,
                         uint64_t seed);

/// Stage 3 from a stage-2 checkpoint: everything trainable, objective
/// lambda * RNN-T + (1 - lambda) * LAS CE.
StageResult train_stage3(const Config& cfg, const Checkpoint& stage2,
                         const Dataset& data, uint64_t seed);

}  // namespace tpkd
