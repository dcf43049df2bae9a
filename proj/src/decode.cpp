#include "tpkd/decode.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "tpkd/error.hpp"

namespace tpkd {

void BeamConfig::validate() const {
  require(beam_size >= 1, ErrorCode::kInvalidArgument, "beam_size must be >= 1");
  require(max_symbols_per_frame >= 0, ErrorCode::kInvalidArgument,
          "max_symbols_per_frame must be >= 0");
}

namespace {

struct BeamEntry {
  double logp = kLogZero;
  long order = 0;
  // Parent state and the token to feed; the state is materialized lazily
  // for survivors of pruning.
  const FirstPassScorer::PredState* parent = nullptr;
  int last_token = -1;
  FirstPassScorer::PredState state;
};

using BeamMap = std::map<std::vector<int>, BeamEntry>;

bool ranks_before(const std::pair<const std::vector<int>, BeamEntry>* a,
                  const std::pair<const std::vector<int>, BeamEntry>* b) {
  if (a->second.logp != b->second.logp) return a->second.logp > b->second.logp;
  if (a->second.order != b->second.order) return a->second.order < b->second.order;
  return a->first < b->first;
}

void merge(BeamMap& m, const std::vector<int>& seq, double logp, long order,
           const FirstPassScorer::PredState* parent, int token,
           const FirstPassScorer::PredState* ready) {
  if (logp == kLogZero) return;  // zero-probability extensions are not hypotheses
  auto [it, inserted] = m.try_emplace(seq);
  BeamEntry& e = it->second;
  if (inserted) {
    e.logp = logp;
    e.order = order;
    e.parent = parent;
    e.last_token = token;
    if (ready) e.state = *ready;
  } else {
    e.logp = log_add(e.logp, logp);
    e.order = std::min(e.order, order);
  }
}

// Keeps the best `n` entries and materializes their prediction states.
BeamMap prune(BeamMap&& m, size_t n, const FirstPassScorer& scorer) {
  std::vector<const std::pair<const std::vector<int>, BeamEntry>*> ranked;
  ranked.reserve(m.size());
  for (const auto& kv : m) ranked.push_back(&kv);
  std::sort(ranked.begin(), ranked.end(), ranks_before);
  if (ranked.size() > n) ranked.resize(n);
  BeamMap out;
  for (const auto* kv : ranked) {
    BeamEntry e = kv->second;
    if (e.parent) {
      e.state = scorer.advance(*e.parent, e.last_token);
      e.parent = nullptr;
    }
    out.emplace(kv->first, std::move(e));
  }
  return out;
}

}  // namespace

std::vector<Hypothesis> beam_search(const RnntModel& model,
                                    const nnet::Tensor& features,
                                    const BeamConfig& cfg) {
  cfg.validate();
  require(features.rows() >= 1, ErrorCode::kInvalidArgument, "empty feature input");
  FirstPassScorer scorer(model, features);
  const int K = model.vocab();
  const size_t B = static_cast<size_t>(cfg.beam_size);
  long counter = 0;

  BeamMap beam;
  {
    BeamEntry root;
    root.logp = 0.0;
    root.order = counter++;
    root.state = scorer.start();
    beam.emplace(std::vector<int>{}, std::move(root));
  }

  for (int t = 0; t < scorer.frames(); ++t) {
    BeamMap next;
    BeamMap frontier = std::move(beam);
    for (int s = 0; s <= cfg.max_symbols_per_frame && !frontier.empty(); ++s) {
      BeamMap expanded;
      for (const auto& [seq, h] : frontier) {
        const std::vector<double> lp = scorer.joint(t, h.state);
        merge(next, seq, h.logp + lp[kBlank], h.order, nullptr, -1, &h.state);
        if (s == cfg.max_symbols_per_frame) continue;
        std::vector<int> ext = seq;
        ext.push_back(0);
        for (int k = 1; k <= K; ++k) {
          ext.back() = k;
          merge(expanded, ext, h.logp + lp[static_cast<size_t>(k)], counter++,
                &h.state, k, nullptr);
        }
      }
      // `expanded` refers to states owned by `frontier`; materialize first.
      BeamMap survivors = prune(std::move(expanded), B, scorer);
      frontier = std::move(survivors);
    }
    beam = prune(std::move(next), B, scorer);
  }

  std::vector<const std::pair<const std::vector<int>, BeamEntry>*> ranked;
  for (const auto& kv : beam) ranked.push_back(&kv);
  std::sort(ranked.begin(), ranked.end(), ranks_before);
  std::vector<Hypothesis> out;
  out.reserve(ranked.size());
  for (const auto* kv : ranked) {
    Hypothesis h;
    h.tokens = LabelSequence(kv->first);
    h.first_pass_logp = std::min(0.0, kv->second.logp);
    out.push_back(std::move(h));
  }
  return out;
}

std::vector<Hypothesis> rescore(const TwoPassModel& model,
                                const nnet::Tensor& features,
                                std::vector<Hypothesis> hyps,
                                const RescoreConfig& cfg) {
  if (hyps.empty()) return hyps;
  const nnet::Tensor addenc = additional_encoder_output(model, features);
  for (Hypothesis& h : hyps) {
    double s = las_sequence_logprob(model, addenc, h.tokens);
    if (cfg.length_normalize) s /= static_cast<double>(h.tokens.size() + 1);
    if (cfg.interpolate_lambda) {
      const double lam = *cfg.interpolate_lambda;
      s = lam * h.first_pass_logp + (1.0 - lam) * s;
    }
    h.rescore = s;
  }
  return hyps;
}

const Hypothesis& pick_best(const std::vector<Hypothesis>& hyps) {
  require(!hyps.empty(), ErrorCode::kInvalidArgument, "pick_best on empty list");
  const Hypothesis* best = nullptr;
  for (const Hypothesis& h : hyps) {
    require(h.rescore.has_value(), ErrorCode::kInvalidArgument,
            "pick_best needs rescored hypotheses");
    if (!best) {
      best = &h;
      continue;
    }
    if (*h.rescore != *best->rescore) {
      if (*h.rescore > *best->rescore) best = &h;
    } else if (h.first_pass_logp != best->first_pass_logp) {
      if (h.first_pass_logp > best->first_pass_logp) best = &h;
    } else if (h.tokens < best->tokens) {
      best = &h;
    }
  }
  return *best;
}

int levenshtein(const LabelSequence& a, const LabelSequence& b) {
  const size_t n = a.tokens.size(), m = b.tokens.size();
  std::vector<int> prev(m + 1), cur(m + 1);
  for (size_t j = 0; j <= m; ++j) prev[j] = static_cast<int>(j);
  for (size_t i = 1; i <= n; ++i) {
    cur[0] = static_cast<int>(i);
    for (size_t j = 1; j <= m; ++j) {
      const int sub = prev[j - 1] + (a.tokens[i - 1] == b.tokens[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

double wer(const LabelSequence& ref, const LabelSequence& hyp) {
  return 100.0 * levenshtein(ref, hyp) / std::max(1, ref.size());
}

double corpus_wer(const std::vector<RefHyp>& pairs) {
  long edits = 0, words = 0;
  for (const RefHyp& p : pairs) {
    edits += levenshtein(p.ref, p.hyp);
    words += p.ref.size();
  }
  return 100.0 * static_cast<double>(edits) / static_cast<double>(std::max(1L, words));
}

double ser(const std::vector<RefHyp>& pairs) {
  if (pairs.empty()) return 0.0;
  long wrong = 0;
  for (const RefHyp& p : pairs) wrong += p.ref == p.hyp ? 0 : 1;
  return 100.0 * static_cast<double>(wrong) / static_cast<double>(pairs.size());
}

double round2(double pct) { return std::round(pct * 100.0) / 100.0; }

}  // namespace tpkd
