#pragma once

// Binary tensor container and the checkpoint built on it.
//
// Layout (little-endian):
//   "TPKD" | u32 version | u32 meta length | meta JSON |
//   u32 tensor count | directory entries | payload | u32 CRC-32 of all
//   preceding bytes.
// A directory entry is: name, u32 dtype tag, u32 rank, u32 dims[rank],
// u64 payload byte offset.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tpkd/lattice.hpp"
#include "tpkd/models.hpp"
#include "tpkd/nnet.hpp"
#include "tpkd/params.hpp"

namespace tpkd {

inline constexpr uint32_t kContainerVersion = 1;

enum class DType : uint32_t { kF32 = 0, kF64 = 1, kI32 = 2 };

struct StoredTensor {
  DType dtype = DType::kF32;
  nnet::Tensor tensor;
};

struct Container {
  std::string meta_json = "{}";
  std::map<std::string, StoredTensor> tensors;
};

std::vector<unsigned char> encode_container(const Container& c);
/// Throws kCorruptFile on bad magic, length or checksum and kVersionMismatch
/// on an unknown version. Nothing is returned unless the whole file checks out.
Container decode_container(const std::vector<unsigned char>& bytes);

void save_container(const std::string& path, const Container& c);
Container load_container(const std::string& path);

/// Trained model state plus provenance.
struct Checkpoint {
  Role role = Role::kTeacher;
  int stage = 1;
  int vocab = 0;
  int feat_dim = 0;
  FirstPassDims first;
  std::optional<SecondPassDims> second;
  nnet::ParamStore shared;
  nnet::ParamStore second_params;
  /// Serialized training RNG (std::mt19937_64 stream format).
  std::string rng_state;
  std::map<std::string, std::string> provenance;

  static Checkpoint from_model(const RnntModel& m, Role role, int stage);
  static Checkpoint from_model(const TwoPassModel& m, Role role, int stage);

  RnntModel rnnt() const;
  /// Throws kWrongStage when no second pass is stored.
  TwoPassModel two_pass() const;
  bool has_second_pass() const { return second.has_value(); }
  size_t param_count() const { return shared.count() + second_params.count(); }
};

Container to_container(const Checkpoint& ck);
Checkpoint from_container(const Container& c);

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

/// Lattice fixtures for test exchange (stored in 64-bit).
void save_lattice(const std::string& path, const LatticeDist& dist,
                  const LabelSequence& target);
std::pair<LatticeDist, LabelSequence> load_lattice(const std::string& path);

}  // namespace tpkd
