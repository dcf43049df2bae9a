#pragma once

// Named parameter storage with freeze flags, tape binding, Adam and the
// learning-rate schedule.

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "tpkd/nnet.hpp"

namespace tpkd::nnet {

/// Storage precision of parameter values. In kFloat32 every stored value is
/// exactly representable as a 32-bit float (values are rounded after each
/// update); kFloat64 exists for gradient checks.
enum class Precision { kFloat32, kFloat64 };

struct Param {
  Tensor value;
  bool frozen = false;
};

using GradMap = std::map<std::string, Tensor>;

/// Ordered name -> tensor table.
class ParamStore {
 public:
  explicit ParamStore(Precision precision = Precision::kFloat32)
      : precision_(precision) {}

  Precision precision() const { return precision_; }
  void set_precision(Precision p);

  Param& add(const std::string& name, Tensor value);
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  Param& get(const std::string& name);
  const Param& get(const std::string& name) const;

  const std::map<std::string, Param>& all() const { return params_; }
  std::map<std::string, Param>& all() { return params_; }

  /// Sets the frozen flag of every tensor whose name starts with prefix.
  /// Returns how many tensors matched.
  size_t set_frozen(const std::string& prefix, bool frozen);
  void set_all_frozen(bool frozen);

  /// Total scalar count.
  size_t count() const;
  size_t count(const std::string& prefix) const;

  /// CRC-32 over names and value bytes of tensors matching prefix.
  uint32_t hash(const std::string& prefix = "") const;

  /// Rounds values to the storage precision.
  void round_to_precision();

 private:
  Precision precision_;
  std::map<std::string, Param> params_;
};

/// Uniform [-1/sqrt(fan_in), 1/sqrt(fan_in)].
Tensor uniform_init(size_t rows, size_t cols, size_t fan_in, std::mt19937_64& rng);

/// Binds parameter stores to a tape. Frozen tensors become constants.
class Binding {
 public:
  Binding(Tape& tape, std::vector<const ParamStore*> stores)
      : tape_(tape), stores_(std::move(stores)) {}

  Var operator()(const std::string& name);
  /// Gradients of every bound trainable tensor (zero if untouched).
  GradMap grads() const;
  Tape& tape() { return tape_; }

 private:
  Tape& tape_;
  std::vector<const ParamStore*> stores_;
  std::map<std::string, Var> bound_;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Per-tensor first and second moment estimates.
struct AdamState {
  std::map<std::string, std::pair<Tensor, Tensor>> moments;
};

/// One Adam update with 1-based step_index. Frozen tensors and tensors
/// without a gradient entry are left untouched.
void adam_step(ParamStore& group, const GradMap& grads, double lr,
               int step_index, AdamState& state, const AdamConfig& cfg = {});

/// base * decay^floor(step / interval).
double lr_at(long step, double base = 5e-4, double decay = 0.9,
             long interval = 20000);

size_t count_params(const ParamStore& group);

/// (1 - small / large) * 100, rounded to the nearest integer.
int reduction_percent(double large, double small);
/// Unrounded variant.
double reduction_exact(double large, double small);

}  // namespace tpkd::nnet
