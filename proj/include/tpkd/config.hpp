#pragma once

// Flat `key = value` configuration covering data generation, model widths,
// loss weights, schedule, training, decoding and experiment settings.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tpkd/decode.hpp"
#include "tpkd/distill.hpp"
#include "tpkd/models.hpp"

namespace tpkd {

/// Synthetic transduction task: latent symbol runs rendered as noisy
/// prototype frames, transcript = latent symbols.
struct ToyTaskSpec {
  int vocab = 8;
  int feat_dim = 8;
  int min_frames = 8;
  int max_frames = 40;
  int min_len = 1;
  int max_len = 8;
  int min_span = 2;
  int max_span = 4;
  double noise = 0.6;
  uint64_t seed = 1;
  int num_utts = 240;
  double test_fraction = 0.25;

  void validate() const;
};

struct Schedule {
  double lr = 3e-3;
  double decay = 0.9;
  long decay_interval = 500;
};

enum class TeacherSource { kStagewise, kFinal };

struct TrainOptions {
  int epochs_stage1 = 100;
  int epochs_stage2 = 25;
  int epochs_stage3 = 10;
  int batch_size = 8;
  TeacherSource teacher_source = TeacherSource::kStagewise;
  LasSize student_las = LasSize::kLarge;
};

struct ExperimentOptions {
  int seeds = 5;
  int sweep_seeds = 3;
  std::vector<double> betas{0.0, 1e-4, 1e-3, 1e-2, 1e-1, 1.0};
};

struct Config {
  ToyTaskSpec data;
  RoleTable roles;
  LossWeights loss;
  Schedule sched;
  TrainOptions train;
  BeamConfig beam;
  RescoreConfig rescore;
  ExperimentOptions experiment;
  uint64_t seed = 1;

  /// Applies one key; unknown keys and malformed values throw kConfig.
  void set(const std::string& key, const std::string& value);
  /// Canonical `key = value` listing of every setting.
  std::string to_text() const;
  void validate() const;
};

Config parse_config(const std::string& text);
Config load_config(const std::string& path);

}  // namespace tpkd
