#include "tpkd/lattice.hpp"

#include <algorithm>
#include <string>

#include "tpkd/error.hpp"

namespace tpkd {

void LabelSequence::validate(int vocab) const {
  for (int tok : tokens) {
    require(tok >= 1 && tok <= vocab, ErrorCode::kInvalidArgument,
            "label " + std::to_string(tok) + " outside [1, " +
                std::to_string(vocab) + "]");
  }
}

LatticeDist::LatticeDist(int frames, int target_len, int vocab)
    : frames_(frames), target_len_(target_len), vocab_(vocab) {
  require(frames >= 0 && target_len >= 0 && vocab >= 1,
          ErrorCode::kShapeMismatch, "bad lattice dimensions");
  logp_.assign(static_cast<size_t>(frames) * (target_len + 1) * (vocab + 1),
               kLogZero);
}

LatticeDist LatticeDist::from_logits(int frames, int target_len, int vocab,
                                     std::span<const double> logits) {
  LatticeDist d(frames, target_len, vocab);
  require(logits.size() == d.logp_.size(), ErrorCode::kShapeMismatch,
          "logit count does not match lattice shape");
  const size_t n = static_cast<size_t>(vocab + 1);
  for (size_t off = 0; off < logits.size(); off += n) {
    double mx = *std::max_element(logits.begin() + off, logits.begin() + off + n);
    double s = 0.0;
    for (size_t k = 0; k < n; ++k) s += std::exp(logits[off + k] - mx);
    double lse = mx + std::log(s);
    for (size_t k = 0; k < n; ++k) d.logp_[off + k] = logits[off + k] - lse;
  }
  return d;
}

double LatticeDist::max_normalization_error() const {
  double worst = 0.0;
  for (int t = 0; t < frames_; ++t) {
    for (int u = 0; u <= target_len_; ++u) {
      double acc = kLogZero;
      for (double v : node(t, u)) acc = log_add(acc, v);
      worst = std::max(worst, std::abs(acc));
    }
  }
  return worst;
}

namespace {

void check_dims(const LatticeDist& dist, const LabelSequence& target) {
  require(dist.frames() >= 1, ErrorCode::kShapeMismatch,
          "lattice needs at least one frame");
  require(dist.target_len() == target.size(), ErrorCode::kShapeMismatch,
          "lattice U=" + std::to_string(dist.target_len()) +
              " but target has " + std::to_string(target.size()) + " tokens");
  target.validate(dist.vocab());
}

// Transcripts longer than the frame count have no admissible alignment.
bool reachable(const LatticeDist& dist, const LabelSequence& target) {
  return target.size() <= dist.frames();
}

struct Grid {
  int cols;
  std::vector<double> v;
  Grid(int rows, int c) : cols(c), v(static_cast<size_t>(rows) * c, kLogZero) {}
  double& operator()(int t, int u) { return v[static_cast<size_t>(t) * cols + u]; }
};

Grid forward_vars(const LatticeDist& d, const LabelSequence& y) {
  const int T = d.frames(), U = d.target_len();
  Grid alpha(T, U + 1);
  alpha(0, 0) = 0.0;
  for (int t = 0; t < T; ++t) {
    for (int u = 0; u <= U; ++u) {
      if (t == 0 && u == 0) continue;
      double a = kLogZero;
      if (t > 0) a = alpha(t - 1, u) + d.at(t - 1, u, kBlank);
      if (u > 0) a = log_add(a, alpha(t, u - 1) + d.at(t, u - 1, y[u - 1]));
      alpha(t, u) = a;
    }
  }
  return alpha;
}

Grid backward_vars(const LatticeDist& d, const LabelSequence& y) {
  const int T = d.frames(), U = d.target_len();
  Grid beta(T, U + 1);
  for (int t = T - 1; t >= 0; --t) {
    for (int u = U; u >= 0; --u) {
      if (t == T - 1 && u == U) {
        beta(t, u) = d.at(t, u, kBlank);
        continue;
      }
      double b = kLogZero;
      if (t < T - 1) b = beta(t + 1, u) + d.at(t, u, kBlank);
      if (u < U) b = log_add(b, beta(t, u + 1) + d.at(t, u, y[u]));
      beta(t, u) = b;
    }
  }
  return beta;
}

}  // namespace

double rnnt_forward(const LatticeDist& dist, const LabelSequence& target) {
  check_dims(dist, target);
  if (!reachable(dist, target)) return kLogZero;
  const int T = dist.frames(), U = dist.target_len();
  Grid alpha = forward_vars(dist, target);
  return alpha(T - 1, U) + dist.at(T - 1, U, kBlank);
}

RnntLossGrad rnnt_loss_and_grad(const LatticeDist& dist,
                                const LabelSequence& target) {
  check_dims(dist, target);
  require(reachable(dist, target), ErrorCode::kNoAlignment,
          "transcript longer than frame count: no gradient defined");
  const int T = dist.frames(), U = dist.target_len();
  Grid alpha = forward_vars(dist, target);
  Grid beta = backward_vars(dist, target);
  const double log_prob = beta(0, 0);
  require(log_prob != kLogZero && std::isfinite(log_prob),
          ErrorCode::kNoAlignment, "lattice assigns zero probability to target");

  std::vector<double> grad(dist.data().size(), 0.0);
  const size_t labels = static_cast<size_t>(dist.labels());
  for (int t = 0; t < T; ++t) {
    for (int u = 0; u <= U; ++u) {
      double* g = grad.data() +
                  (static_cast<size_t>(t) * (U + 1) + static_cast<size_t>(u)) * labels;
      const double a = alpha(t, u);
      if (a == kLogZero) continue;
      if (t == T - 1 && u == U) {
        g[kBlank] = -std::exp(a + dist.at(t, u, kBlank) - log_prob);
      } else if (t < T - 1) {
        g[kBlank] = -std::exp(a + dist.at(t, u, kBlank) + beta(t + 1, u) - log_prob);
      }
      if (u < U) {
        g[target[u]] =
            -std::exp(a + dist.at(t, u, target[u]) + beta(t, u + 1) - log_prob);
      }
    }
  }
  return {log_prob, std::move(grad)};
}

std::vector<double> rnnt_grad(const LatticeDist& dist,
                              const LabelSequence& target) {
  return rnnt_loss_and_grad(dist, target).grad;
}

void for_each_alignment(int frames, const LabelSequence& target,
                        const std::function<void(const Alignment&)>& fn) {
  const int U = target.size();
  if (frames < 1 || U > frames) return;
  Alignment a;
  a.steps.reserve(static_cast<size_t>(frames + U));
  // Place T-1 blanks and U tokens freely, then the closing blank.
  std::function<void(int, int)> rec = [&](int blanks_left, int emitted) {
    if (blanks_left == 0 && emitted == U) {
      a.steps.push_back(kBlank);
      fn(a);
      a.steps.pop_back();
      return;
    }
    if (blanks_left > 0) {
      a.steps.push_back(kBlank);
      rec(blanks_left - 1, emitted);
      a.steps.pop_back();
    }
    if (emitted < U) {
      a.steps.push_back(target[emitted]);
      rec(blanks_left, emitted + 1);
      a.steps.pop_back();
    }
  };
  rec(frames - 1, 0);
}

double rnnt_brute_force(const LatticeDist& dist, const LabelSequence& target) {
  check_dims(dist, target);
  require(dist.frames() + target.size() <= kBruteForceLimit,
          ErrorCode::kOracleGuard,
          "enumeration oracle refuses T+U > " + std::to_string(kBruteForceLimit));
  if (!reachable(dist, target)) return kLogZero;
  long double total = 0.0L;
  for_each_alignment(dist.frames(), target, [&](const Alignment& a) {
    int t = 0, u = 0;
    long double lp = 0.0L;
    for (int k : a.steps) {
      lp += dist.at(t, u, k);
      if (k == kBlank) {
        ++t;
      } else {
        ++u;
      }
    }
    total += std::exp(lp);
  });
  if (total <= 0.0L) return kLogZero;
  return static_cast<double>(std::log(total));
}

LabelSequence remove_blanks(const Alignment& a) {
  LabelSequence out;
  for (int k : a.steps) {
    if (k != kBlank) out.tokens.push_back(k);
  }
  return out;
}

}  // namespace tpkd
