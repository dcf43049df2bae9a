#pragma once

// Evaluation (first-pass and rescoring modes), the T/M/S experiment matrix
// and the beta sweep.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "tpkd/checkpoint.hpp"
#include "tpkd/config.hpp"
#include "tpkd/data.hpp"
#include "tpkd/train.hpp"

namespace tpkd {

struct UttResult {
  int id = 0;
  LabelSequence ref;
  LabelSequence first_pass;
  std::optional<LabelSequence> rescored;
};

struct EvalResult {
  double wer_first = 0.0;
  double ser_first = 0.0;
  std::optional<double> wer_rescored;
  std::optional<double> ser_rescored;
  std::vector<UttResult> utts;

  /// Rescored WER when available, first-pass WER otherwise.
  double wer() const { return wer_rescored.value_or(wer_first); }
  double ser() const { return ser_rescored.value_or(ser_first); }
};

/// Decodes every utterance with beam search; with `rescoring` (two-pass
/// checkpoints only) the beam is rescored and pick_best selects the output.
EvalResult evaluate(const Checkpoint& ck, const std::vector<Utterance>& utts,
                    const Config& cfg, bool rescoring);

std::string to_json_line(const UttResult& r);

/// One row of the results table.
struct CellResult {
  std::string cell;  // T1, M2, S3, SS2, S'3, ...
  std::string role;
  int stage = 0;
  uint64_t seed = 0;
  double wer = 0.0;        // reported mode: first pass for stage 1, rescoring otherwise
  double ser = 0.0;
  double wer_first = 0.0;  // first-pass top-1
  double ser_first = 0.0;
  size_t params = 0;
  size_t teacher_params = 0;
  int reduction = 0;       // % smaller than the teacher cell of the same stage
  std::vector<LossRecord> curve;
};

std::string to_json_line(const CellResult& r);

using Progress = std::function<void(const std::string&)>;

/// Trains and evaluates the 13 cells for one seed: T/M/S at stages 1-3,
/// SS2/SS3 (small rescorer) and S'2/S'3 (gamma = 0).
std::vector<CellResult> run_seed_matrix(const Config& cfg, const Dataset& data,
                                        uint64_t seed, const Progress& progress = {});

/// run_seed_matrix for seeds cfg.seed .. cfg.seed + experiment.seeds - 1.
std::vector<CellResult> run_experiment_matrix(const Config& cfg, const Dataset& data,
                                              const Progress& progress = {});

struct SweepPoint {
  double beta = 0.0;
  uint64_t seed = 0;
  double wer = 0.0;
  double ser = 0.0;
};

std::string to_json_line(const SweepPoint& p);

/// Student stage-1 first-pass WER for every beta in experiment.betas over
/// experiment.sweep_seeds seeds (one teacher per seed).
std::vector<SweepPoint> sweep_beta(const Config& cfg, const Dataset& data,
                                   const Progress& progress = {});

/// Mean WER of a cell name across seeds.
double mean_wer(const std::vector<CellResult>& rows, const std::string& cell,
                bool first_pass = false);

}  // namespace tpkd
