#pragma once

// Distillation losses: full lattice KL, the 3-way coarse projection and its
// KL, the second-pass step KL, and the per-stage composite losses.

#include <span>
#include <vector>

#include "tpkd/lattice.hpp"

namespace tpkd {

/// Floor applied to student probabilities inside every KL term.
inline constexpr double kStudentFloor = 1e-8;

/// (next-token, blank, remainder) collapse of one lattice node.
struct CoarseDist {
  double p_y = 0.0;
  double p_blank = 0.0;
  double p_r = 0.0;
};

/// One second-pass output distribution (log-probabilities).
struct StepDist {
  std::vector<double> logp;
};

/// How the stage-1 coarse KL sum is scaled before the beta blend.
enum class DistillNorm {
  kPerNode,  // divided by the node count T * (U+1)
  kSum,      // plain sum over nodes
};

struct LossWeights {
  double beta = 1e-2;
  double gamma = 0.5;
  double lambda = 0.5;
  DistillNorm distill_norm = DistillNorm::kSum;

  void validate() const;
};

/// Factor applied to the coarse KL sum of a T x (U+1) lattice.
double distill_scale(int frames, int target_len, DistillNorm norm);

/// Coarse node distribution; the u = U row has p_y = 0.
CoarseDist coarse_project(const LatticeDist& dist, const LabelSequence& target,
                          int t, int u);

double coarse_kl(const CoarseDist& teacher, const CoarseDist& student);

/// Teacher-side coarse lattice: three numbers per node, T x (U+1) x 3.
class CoarseLattice {
 public:
  CoarseLattice() = default;
  CoarseLattice(const LatticeDist& dist, const LabelSequence& target);

  int frames() const { return frames_; }
  int target_len() const { return target_len_; }
  const CoarseDist& at(int t, int u) const {
    return nodes_[static_cast<size_t>(t) * (target_len_ + 1) + u];
  }
  size_t node_count() const { return nodes_.size(); }

 private:
  int frames_ = 0;
  int target_len_ = 0;
  std::vector<CoarseDist> nodes_;
};

/// Sum of coarse_kl over every node, with the gradient of that sum w.r.t. the
/// student log-probabilities (same layout as student.data()). Only the y and
/// blank entries of each node receive gradient.
struct CoarseKlGrad {
  double value;
  std::vector<double> grad;
};
CoarseKlGrad coarse_kl_sum(const CoarseLattice& teacher,
                           const LatticeDist& student,
                           const LabelSequence& target);

/// Uncollapsed KL summed over all lattice nodes.
double full_kl(const LatticeDist& teacher, const LatticeDist& student);

/// KL between two normalized log-probability vectors (student floored).
double categorical_kl(std::span<const double> teacher_logp,
                      std::span<const double> student_logp);

double las_kl(const std::vector<StepDist>& teacher,
              const std::vector<StepDist>& student);

/// beta * distill + (1 - beta) * rnnt.
double stage1_loss(double rnnt_loss, double distill_sum, const LossWeights& w);
/// gamma * las_distill + (1 - gamma) * las_ce.
double stage2_loss(double las_ce, double las_distill, const LossWeights& w);
/// lambda * rnnt + (1 - lambda) * las_ce.
double stage3_loss(double rnnt_loss, double las_ce, const LossWeights& w);

}  // namespace tpkd
