#include "tpkd/distill.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "tpkd/error.hpp"

namespace tpkd {

void LossWeights::validate() const {
  auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  require(in_unit(beta) && in_unit(gamma) && in_unit(lambda),
          ErrorCode::kInvalidArgument, "loss weights must lie in [0, 1]");
}

CoarseDist coarse_project(const LatticeDist& dist, const LabelSequence& target,
                          int t, int u) {
  require(t >= 0 && t < dist.frames() && u >= 0 && u <= dist.target_len(),
          ErrorCode::kInvalidArgument,
          "node (" + std::to_string(t) + "," + std::to_string(u) +
              ") outside lattice");
  require(target.size() == dist.target_len(), ErrorCode::kShapeMismatch,
          "target length does not match lattice");
  CoarseDist c;
  c.p_blank = std::exp(dist.at(t, u, kBlank));
  c.p_y = u < target.size() ? std::exp(dist.at(t, u, target[u])) : 0.0;
  c.p_r = std::max(0.0, 1.0 - c.p_y - c.p_blank);
  return c;
}

namespace {

double kl_term(double pt, double ps) {
  if (pt <= 0.0) return 0.0;
  return pt * (std::log(pt) - std::log(std::max(ps, kStudentFloor)));
}

}  // namespace

double coarse_kl(const CoarseDist& teacher, const CoarseDist& student) {
  double kl = kl_term(teacher.p_y, student.p_y) +
              kl_term(teacher.p_blank, student.p_blank) +
              kl_term(teacher.p_r, student.p_r);
  return std::max(0.0, kl);
}

CoarseLattice::CoarseLattice(const LatticeDist& dist,
                             const LabelSequence& target)
    : frames_(dist.frames()), target_len_(dist.target_len()) {
  nodes_.reserve(static_cast<size_t>(frames_) * (target_len_ + 1));
  for (int t = 0; t < frames_; ++t) {
    for (int u = 0; u <= target_len_; ++u) {
      nodes_.push_back(coarse_project(dist, target, t, u));
    }
  }
}

CoarseKlGrad coarse_kl_sum(const CoarseLattice& teacher,
                           const LatticeDist& student,
                           const LabelSequence& target) {
  require(teacher.frames() == student.frames() &&
              teacher.target_len() == student.target_len(),
          ErrorCode::kShapeMismatch, "teacher/student lattice shape mismatch");
  CoarseKlGrad out{0.0, std::vector<double>(student.data().size(), 0.0)};
  const int U = student.target_len();
  const size_t labels = static_cast<size_t>(student.labels());
  for (int t = 0; t < student.frames(); ++t) {
    for (int u = 0; u <= U; ++u) {
      const CoarseDist& pt = teacher.at(t, u);
      const CoarseDist ps = coarse_project(student, target, t, u);
      const double kl = kl_term(pt.p_y, ps.p_y) + kl_term(pt.p_blank, ps.p_blank) +
                        kl_term(pt.p_r, ps.p_r);
      if (kl <= 0.0) continue;
      out.value += kl;

      double* g = out.grad.data() + (static_cast<size_t>(t) * (U + 1) + u) * labels;
      // d/d logp_l of -p^T_l log p^S_l is -p^T_l; the remainder couples to both
      // y and blank through p_r = 1 - p_y - p_blank.
      const double r_coeff =
          ps.p_r > kStudentFloor ? pt.p_r / ps.p_r : 0.0;
      double g_blank = r_coeff * ps.p_blank;
      if (ps.p_blank > kStudentFloor) g_blank -= pt.p_blank;
      g[kBlank] += g_blank;
      if (u < U) {
        double g_y = r_coeff * ps.p_y;
        if (ps.p_y > kStudentFloor) g_y -= pt.p_y;
        g[target[u]] += g_y;
      }
    }
  }
  return out;
}

double categorical_kl(std::span<const double> teacher_logp,
                      std::span<const double> student_logp) {
  require(teacher_logp.size() == student_logp.size(), ErrorCode::kShapeMismatch,
          "distribution sizes differ");
  double kl = 0.0;
  for (size_t k = 0; k < teacher_logp.size(); ++k) {
    kl += kl_term(std::exp(teacher_logp[k]), std::exp(student_logp[k]));
  }
  return std::max(0.0, kl);
}

double full_kl(const LatticeDist& teacher, const LatticeDist& student) {
  require(teacher.frames() == student.frames() &&
              teacher.target_len() == student.target_len() &&
              teacher.vocab() == student.vocab(),
          ErrorCode::kShapeMismatch, "teacher/student lattice shape mismatch");
  double total = 0.0;
  for (int t = 0; t < teacher.frames(); ++t) {
    for (int u = 0; u <= teacher.target_len(); ++u) {
      total += categorical_kl(teacher.node(t, u), student.node(t, u));
    }
  }
  return total;
}

double las_kl(const std::vector<StepDist>& teacher,
              const std::vector<StepDist>& student) {
  require(teacher.size() == student.size(), ErrorCode::kShapeMismatch,
          "teacher has " + std::to_string(teacher.size()) +
              " steps, student " + std::to_string(student.size()));
  double total = 0.0;
  for (size_t i = 0; i < teacher.size(); ++i) {
    total += categorical_kl(teacher[i].logp, student[i].logp);
  }
  return total;
}

double stage1_loss(double rnnt_loss, double distill_sum, const LossWeights& w) {
  return w.beta * distill_sum + (1.0 - w.beta) * rnnt_loss;
}

double stage2_loss(double las_ce, double las_distill, const LossWeights& w) {
  return w.gamma * las_distill + (1.0 - w.gamma) * las_ce;
}

double stage3_loss(double rnnt_loss, double las_ce, const LossWeights& w) {
  return w.lambda * rnnt_loss + (1.0 - w.lambda) * las_ce;
}

double distill_scale(int frames, int target_len, DistillNorm norm) {
  if (norm == DistillNorm::kSum) return 1.0;
  return 1.0 / (static_cast<double>(frames) * (target_len + 1));
}

}  // namespace tpkd
