#pragma once

// RNN-T first pass (transcription, prediction and joint networks) and the
// two-pass model (shared encoder + additional encoder layer + attention
// rescorer), with per-block freeze control.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "tpkd/distill.hpp"
#include "tpkd/lattice.hpp"
#include "tpkd/params.hpp"

namespace tpkd {

struct FirstPassDims {
  int enc_layers = 4;
  int enc_width = 48;
  /// The first pool_layers encoder layers are followed by 2x max-pooling.
  int pool_layers = 1;
  int pred_embed = 16;
  int pred_width = 32;
  int joint_width = 32;
  double dropout = 0.2;
};

struct SecondPassDims {
  int addenc_width = 48;
  int las_embed = 16;
  int las_width = 48;
  int att_dim = 48;
  int heads = 4;
};

enum class Role { kTeacher, kSmall, kStudent };
enum class LasSize { kLarge, kSmall };

const char* role_name(Role r);
Role parse_role(const std::string& s);

/// Width tables for the large (teacher) and small model families.
struct RoleTable {
  FirstPassDims large_first;
  FirstPassDims small_first;
  SecondPassDims large_second;
  SecondPassDims small_second;

  RoleTable();
};

/// Dimensions for one role. Students share the small first pass; their
/// second pass is large unless las == kSmall.
struct RoleConfig {
  Role role = Role::kTeacher;
  FirstPassDims first;
  SecondPassDims second;
};
RoleConfig role_config(Role role, const RoleTable& table,
                       LasSize las = LasSize::kLarge);

/// Reserved rescorer tokens above the K-label vocabulary.
inline int sos_token(int vocab) { return vocab + 1; }
inline int eos_token(int vocab) { return vocab + 2; }
inline int las_vocab(int vocab) { return vocab + 3; }

class RnntModel {
 public:
  RnntModel(int vocab, int feat_dim, const FirstPassDims& dims, uint64_t seed,
            nnet::Precision precision = nnet::Precision::kFloat32);
  /// Wraps already-populated parameters (checkpoint load).
  RnntModel(int vocab, int feat_dim, const FirstPassDims& dims,
            nnet::ParamStore params);

  int vocab() const { return vocab_; }
  int feat_dim() const { return feat_dim_; }
  const FirstPassDims& dims() const { return dims_; }
  int pooling_factor() const { return 1 << dims_.pool_layers; }
  int pooled_frames(int input_frames) const;

  nnet::ParamStore& params() { return params_; }
  const nnet::ParamStore& params() const { return params_; }

 private:
  int vocab_;
  int feat_dim_;
  FirstPassDims dims_;
  nnet::ParamStore params_;
};

class TwoPassModel {
 public:
  TwoPassModel(RnntModel shared, const SecondPassDims& dims, uint64_t seed);
  TwoPassModel(RnntModel shared, const SecondPassDims& dims,
               nnet::ParamStore second);

  RnntModel& shared() { return shared_; }
  const RnntModel& shared() const { return shared_; }
  const SecondPassDims& dims() const { return dims_; }
  nnet::ParamStore& second() { return second_; }
  const nnet::ParamStore& second() const { return second_; }
  std::vector<nnet::ParamStore*> stores() { return {&shared_.params(), &second_}; }
  std::vector<const nnet::ParamStore*> stores() const {
    return {&shared_.params(), &second_};
  }
  int vocab() const { return shared_.vocab(); }

 private:
  RnntModel shared_;
  SecondPassDims dims_;
  nnet::ParamStore second_;
};

// ---- freezing ---------------------------------------------------------------

enum class FreezeSelector { kSharedEncoder, kRnntDecoder, kLas, kAll, kNone };
FreezeSelector parse_freeze_selector(const std::string& s);

/// Sets frozen flags for the selected blocks; kNone unfreezes everything.
/// kLas covers the whole second pass (additional encoder and LAS decoder).
void freeze(RnntModel& model, FreezeSelector sel);
void freeze(TwoPassModel& model, FreezeSelector sel);

/// Parameter-name prefixes of each block.
inline constexpr const char* kEncoderPrefix = "enc.";
inline constexpr const char* kPredPrefix = "pred.";
inline constexpr const char* kJointPrefix = "joint.";
inline constexpr const char* kAddEncPrefix = "addenc.";
inline constexpr const char* kLasPrefix = "las.";

// ---- differentiable forward (tape) -----------------------------------------

struct ForwardMode {
  bool train = false;
  std::mt19937_64* rng = nullptr;
};

/// Shared encoder output [T x enc_width], T = pooled frame count.
nnet::Var encode(const RnntModel& model, nnet::Binding& bind,
                 const nnet::Tensor& features, ForwardMode mode = {});

/// Node log-probabilities [T*(U+1) x (K+1)].
nnet::Var rnnt_logprobs(const RnntModel& model, nnet::Binding& bind,
                        const nnet::Var& enc, const LabelSequence& target);

/// Additional encoder layer on top of the shared encoder output, followed by
/// dropout in training mode.
nnet::Var additional_encode(const TwoPassModel& model, nnet::Binding& bind,
                            const nnet::Var& enc, ForwardMode mode = {});

/// Teacher-forced rescorer log-probs [(U+1) x (K+3)]; row u predicts token
/// u+1 of transcript + end-of-sequence.
nnet::Var las_logprobs(const TwoPassModel& model, nnet::Binding& bind,
                       const nnet::Var& addenc, const LabelSequence& transcript);

/// Targets for las_logprobs rows: the transcript followed by end-of-sequence.
std::vector<int> las_targets(const LabelSequence& transcript, int vocab);

// ---- evaluation-mode helpers ------------------------------------------------

LatticeDist rnnt_forward_pass(const RnntModel& model,
                              const nnet::Tensor& features,
                              const LabelSequence& target);

std::vector<StepDist> las_forward_teacher_forced(const TwoPassModel& model,
                                                 const nnet::Tensor& features,
                                                 const LabelSequence& transcript);

/// Summed teacher-forced log-probability of transcript + end-of-sequence.
double las_sequence_logprob(const TwoPassModel& model,
                            const nnet::Tensor& addenc_out,
                            const LabelSequence& transcript);

/// Evaluation-mode additional-encoder output for a feature matrix.
nnet::Tensor additional_encoder_output(const TwoPassModel& model,
                                       const nnet::Tensor& features);

/// Incremental first-pass scorer used by beam search.
class FirstPassScorer {
 public:
  struct PredState {
    std::vector<double> h, c;
    std::vector<double> proj;  // U g_u, joint width
  };

  FirstPassScorer(const RnntModel& model, const nnet::Tensor& features);

  int frames() const { return static_cast<int>(enc_proj_.rows()); }
  PredState start() const;
  PredState advance(const PredState& s, int token) const;
  /// log P(k | t, state) for all K+1 labels.
  std::vector<double> joint(int t, const PredState& s) const;

 private:
  PredState step(const PredState& s, int input) const;

  const RnntModel& model_;
  nnet::Tensor enc_proj_;  // [T x J], W h_t + b
};

}  // namespace tpkd
