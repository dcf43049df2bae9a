#pragma once

// First-pass beam search, second-pass rescoring and error-rate metrics.

#include <optional>
#include <vector>

#include "tpkd/lattice.hpp"
#include "tpkd/models.hpp"

namespace tpkd {

struct Hypothesis {
  LabelSequence tokens;
  double first_pass_logp = 0.0;
  std::optional<double> rescore;
};

struct BeamConfig {
  int beam_size = 8;
  int max_symbols_per_frame = 3;

  void validate() const;
};

/// Frame-synchronous breadth search. Hypotheses sharing a token sequence are
/// merged by log-add; zero-probability extensions are dropped. Result is sorted by descending first_pass_logp; ties
/// keep the earlier-created sequence, then the lexicographically smaller one.
std::vector<Hypothesis> beam_search(const RnntModel& model,
                                    const nnet::Tensor& features,
                                    const BeamConfig& cfg = {});

struct RescoreConfig {
  /// Divide the rescore by (tokens + 1).
  bool length_normalize = false;
  /// When set, rescore = lambda * first_pass + (1 - lambda) * second pass.
  std::optional<double> interpolate_lambda;
};

/// Scores every hypothesis with the teacher-forced rescorer (including the
/// end-of-sequence step). Tokens and first-pass scores are left untouched.
std::vector<Hypothesis> rescore(const TwoPassModel& model,
                                const nnet::Tensor& features,
                                std::vector<Hypothesis> hyps,
                                const RescoreConfig& cfg = {});

/// Highest rescore; ties go to the higher first-pass score, then to the
/// lexicographically smaller token sequence.
const Hypothesis& pick_best(const std::vector<Hypothesis>& hyps);

int levenshtein(const LabelSequence& a, const LabelSequence& b);

/// Edit distance / max(1, |ref|), as a percentage.
double wer(const LabelSequence& ref, const LabelSequence& hyp);

struct RefHyp {
  LabelSequence ref;
  LabelSequence hyp;
};
/// Corpus WER: total edits / total reference tokens, percentage.
double corpus_wer(const std::vector<RefHyp>& pairs);
/// Percentage of pairs with at least one error.
double ser(const std::vector<RefHyp>& pairs);

/// Rounds a percentage to two decimals for reporting.
double round2(double pct);

}  // namespace tpkd
