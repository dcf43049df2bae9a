#pragma once

// Synthetic transduction data: each latent symbol is held for 2-4 frames of
// its noisy prototype vector; the transcript is the latent symbol sequence.

#include <string>
#include <vector>

#include "tpkd/config.hpp"
#include "tpkd/lattice.hpp"
#include "tpkd/nnet.hpp"

namespace tpkd {

struct Utterance {
  int id = 0;
  nnet::Tensor features;  // [frames x feat_dim], values exact in float32
  LabelSequence transcript;

  int frames() const { return static_cast<int>(features.rows()); }
};

struct Dataset {
  ToyTaskSpec spec;
  std::vector<Utterance> train;
  std::vector<Utterance> test;
};

/// Deterministic in spec (including spec.seed). Throws kInvalidArgument for
/// n < 2. Ids 0..n-1; the last round(n * test_fraction) utterances (at least
/// one) form the test split.
Dataset gen_toy_data(const ToyTaskSpec& spec, int n);

void save_dataset(const std::string& path, const Dataset& ds);
Dataset load_dataset(const std::string& path);

}  // namespace tpkd
