#pragma once

// RNN-T probability lattice: forward-backward loss and gradient plus an
// exhaustive alignment-enumeration oracle.
//
// Conventions used throughout the library:
//   * label 0 is blank, non-blank labels are 1..K;
//   * the lattice has T x (U+1) nodes, node (t,u) means "frame t consumed so
//     far, u target tokens emitted";
//   * a blank at (t,u) moves to (t+1,u), the token y_{u+1} moves to (t,u+1),
//     and every path terminates with a blank from (T-1,U);
//   * an unreachable transcript has log-probability kLogZero (-inf); a
//     transcript longer than the frame count (U > T) counts as unreachable.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <vector>

namespace tpkd {

inline constexpr int kBlank = 0;

/// -inf; the documented "no valid alignment" sentinel.
inline constexpr double kLogZero = -std::numeric_limits<double>::infinity();

/// log(exp(a) + exp(b)) that is safe for (-inf, -inf).
inline double log_add(double a, double b) {
  if (a == kLogZero) return b;
  if (b == kLogZero) return a;
  if (a < b) std::swap(a, b);
  return a + std::log1p(std::exp(b - a));
}

/// Target transcript; tokens are non-blank ids in [1, K].
struct LabelSequence {
  std::vector<int> tokens;

  LabelSequence() = default;
  explicit LabelSequence(std::vector<int> t) : tokens(std::move(t)) {}

  int size() const { return static_cast<int>(tokens.size()); }
  bool empty() const { return tokens.empty(); }
  int operator[](int i) const { return tokens[static_cast<size_t>(i)]; }

  /// Throws if a token is blank or outside [1, vocab].
  void validate(int vocab) const;

  friend bool operator==(const LabelSequence&, const LabelSequence&) = default;
  friend auto operator<=>(const LabelSequence&, const LabelSequence&) = default;
};

/// Per-node log-probabilities P(k|t,u), row-major [T][U+1][K+1].
class LatticeDist {
 public:
  LatticeDist() = default;
  LatticeDist(int frames, int target_len, int vocab);

  /// Normalizes raw logits of shape [T][U+1][K+1] node by node.
  static LatticeDist from_logits(int frames, int target_len, int vocab,
                                 std::span<const double> logits);

  int frames() const { return frames_; }
  int target_len() const { return target_len_; }
  int vocab() const { return vocab_; }
  int labels() const { return vocab_ + 1; }

  double& at(int t, int u, int k) { return logp_[index(t, u, k)]; }
  double at(int t, int u, int k) const { return logp_[index(t, u, k)]; }

  std::span<const double> node(int t, int u) const {
    return {logp_.data() + index(t, u, 0), static_cast<size_t>(labels())};
  }
  std::span<double> node(int t, int u) {
    return {logp_.data() + index(t, u, 0), static_cast<size_t>(labels())};
  }

  std::span<const double> data() const { return logp_; }
  std::span<double> data() { return logp_; }

  /// Largest |logsumexp(node)| over all nodes.
  double max_normalization_error() const;

 private:
  size_t index(int t, int u, int k) const {
    return (static_cast<size_t>(t) * static_cast<size_t>(target_len_ + 1) +
            static_cast<size_t>(u)) *
               static_cast<size_t>(vocab_ + 1) +
           static_cast<size_t>(k);
  }

  int frames_ = 0;
  int target_len_ = 0;
  int vocab_ = 0;
  std::vector<double> logp_;
};

/// Label/blank sequence of length T+U.
struct Alignment {
  std::vector<int> steps;
};

/// ln P(y|x) by the forward recursion. Returns kLogZero when the transcript
/// is longer than the frame count.
double rnnt_forward(const LatticeDist& dist, const LabelSequence& target);

/// d(-ln P)/d logp(k|t,u) for every lattice entry. Throws kNoAlignment when
/// the forward score is -inf.
std::vector<double> rnnt_grad(const LatticeDist& dist,
                              const LabelSequence& target);

/// Loss and gradient from a single forward/backward sweep.
struct RnntLossGrad {
  double log_prob;
  std::vector<double> grad;
};
RnntLossGrad rnnt_loss_and_grad(const LatticeDist& dist,
                                const LabelSequence& target);

/// Largest T+U accepted by the enumeration oracle.
inline constexpr int kBruteForceLimit = 12;

/// Sums every alignment in B^{-1}(y) explicitly. Refuses T+U > 12.
double rnnt_brute_force(const LatticeDist& dist, const LabelSequence& target);

/// Calls fn(alignment) for each alignment of target over `frames` frames.
void for_each_alignment(int frames, const LabelSequence& target,
                        const std::function<void(const Alignment&)>& fn);

/// Drops blanks, keeping token order.
LabelSequence remove_blanks(const Alignment& a);

}  // namespace tpkd
