#pragma once

// Reverse-mode differentiation over an explicitly recorded tape of
// matrix-valued operations. Values are held in double precision on the tape;
// parameter storage precision is controlled by ParamStore.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <vector>

#include "tpkd/lattice.hpp"

namespace tpkd {
class CoarseLattice;
}

namespace tpkd::nnet {

/// Dense row-major buffer with a dimension list.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<size_t> shape, double fill = 0.0);
  Tensor(std::vector<size_t> shape, std::vector<double> data);

  static Tensor matrix(size_t rows, size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }

  const std::vector<size_t>& shape() const { return shape_; }
  size_t rank() const { return shape_.size(); }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  /// Leading dimension; 1 for scalars and vectors.
  size_t rows() const { return shape_.size() >= 2 ? shape_[0] : 1; }
  /// Product of trailing dimensions.
  size_t cols() const;

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](size_t i) { return data_[i]; }
  double operator[](size_t i) const { return data_[i]; }
  double& at(size_t r, size_t c) { return data_[r * cols() + c]; }
  double at(size_t r, size_t c) const { return data_[r * cols() + c]; }

  std::span<const double> row(size_t r) const {
    return {data_.data() + r * cols(), cols()};
  }
  std::span<double> row(size_t r) { return {data_.data() + r * cols(), cols()}; }

  void fill(double v);

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::vector<size_t> shape_;
  std::vector<double> data_;
};

class Tape;

/// Handle to a tape node.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  int id() const { return id_; }
  const Tensor& value() const;
  size_t rows() const { return value().rows(); }
  size_t cols() const { return value().cols(); }
  double scalar() const { return value()[0]; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Records a node; `backward` runs only if some input requires grad.
  Var record(Tensor value, bool requires_grad, Backward backward);

  const Tensor& value(int id) const { return nodes_[id].value; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  bool requires_grad(const Var& v) const { return nodes_[v.id()].requires_grad; }

  /// Gradient accumulator for a node; zero-initialized on first access.
  Tensor& grad(int id);
  const Tensor* grad_if_any(int id) const;

  /// Seeds d(root)/d(root) = 1 for a scalar root and sweeps backwards.
  void backward(const Var& root);

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

// ---- elementwise and shape ops ---------------------------------------------

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
/// Adds a [1 x n] row to every row of a.
Var add_row(const Var& a, const Var& bias);
Var scale(const Var& a, double s);
Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var concat_cols(const Var& a, const Var& b);
Var slice_cols(const Var& a, size_t begin, size_t end);
Var row(const Var& a, size_t r);
Var stack_rows(const std::vector<Var>& rows);
/// Sum of all elements as a [1 x 1] scalar.
Var sum(const Var& a);
/// Affine map x * w + b.
Var dense(const Var& x, const Var& w, const Var& b);
/// out[t*M + m] = tanh(a[t] + b[m]) for a [T x J], b [M x J].
Var broadcast_add_tanh(const Var& a, const Var& b);
Var log_softmax_rows(const Var& a);
/// Gathers rows of `table` indexed by ids.
Var embedding(const Var& table, std::span<const int> ids);

/// Max over adjacent frame pairs; an odd tail frame passes through.
Var maxpool_time(const Var& x, int factor = 2);

/// Inverted dropout. Identity when !train or rate == 0.
Var dropout(const Var& x, double rate, bool train, std::mt19937_64& rng);

// ---- recurrent --------------------------------------------------------------

/// Four-gate LSTM (gate order i, f, g, o) over all rows of x, zero initial
/// state. wx: [in x 4H], wh: [H x 4H], b: [1 x 4H]. Returns [T x H].
Var lstm_sequence(const Var& x, const Var& wx, const Var& wh, const Var& b);

/// One LSTM step. Returns [1 x 2H] = [h_new, c_new].
Var lstm_cell(const Var& x, const Var& h, const Var& c, const Var& wx,
              const Var& wh, const Var& b);

/// Non-differentiable single step used by decoders: updates h and c in place.
void lstm_step(std::span<const double> x, std::span<double> h,
               std::span<double> c, const Tensor& wx, const Tensor& wh,
               const Tensor& b);

// ---- attention --------------------------------------------------------------

/// Multi-head scaled dot-product attention. q [M x D], k, v [N x D]; each of
/// the `heads` slices of width D/heads attends independently and the head
/// outputs are concatenated. Returns [M x D].
Var dot_attention(const Var& q, const Var& k, const Var& v, int heads);

/// Attention weights [M x heads x N] without recording anything.
Tensor attention_weights(const Tensor& q, const Tensor& k, int heads);

// ---- losses -----------------------------------------------------------------

/// -ln P(y|x) for a lattice of log-probs laid out [T*(U+1) x (K+1)].
Var rnnt_loss(const Var& logp, int frames, const LabelSequence& target);

/// Sum of coarse KL against a fixed teacher coarse lattice.
Var coarse_distill(const Var& logp, std::shared_ptr<const CoarseLattice> teacher,
                   const LabelSequence& target);

/// -sum_i logp[i, targets[i]].
Var nll_rows(const Var& logp, std::span<const int> targets);

/// sum_i KL(teacher_i || student_i) with teacher rows fixed.
Var kl_rows(const Tensor& teacher_logp, const Var& student_logp);

// ---- helpers ----------------------------------------------------------------

/// Uniform double in [0, 1) from the top 53 bits of the generator.
inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace tpkd::nnet
