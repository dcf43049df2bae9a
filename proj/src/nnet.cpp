#include "tpkd/nnet.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "tpkd/distill.hpp"
#include "tpkd/error.hpp"

namespace tpkd::nnet {

// ---- Tensor -----------------------------------------------------------------

namespace {

size_t product(const std::vector<size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Tensor& t) {
  std::string s = "[";
  for (size_t i = 0; i < t.rank(); ++i) {
    if (i) s += "x";
    s += std::to_string(t.shape()[i]);
  }
  return s + "]";
}

void expect(bool cond, const std::string& what) {
  require(cond, ErrorCode::kShapeMismatch, what);
}

}  // namespace

Tensor::Tensor(std::vector<size_t> shape, double fill)
    : shape_(std::move(shape)), data_(product(shape_), fill) {}

Tensor::Tensor(std::vector<size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  expect(data_.size() == product(shape_), "tensor data length != shape product");
}

size_t Tensor::cols() const {
  if (shape_.empty()) return 1;
  if (shape_.size() == 1) return shape_[0];
  size_t c = 1;
  for (size_t i = 1; i < shape_.size(); ++i) c *= shape_[i];
  return c;
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

// ---- Tape -------------------------------------------------------------------

const Tensor& Var::value() const { return tape_->value(id_); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, nullptr});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::record(Tensor value, bool requires_grad, Backward backward) {
  nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad,
                        requires_grad ? std::move(backward) : nullptr});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Tensor& Tape::grad(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (n.grad.size() != n.value.size() || n.grad.shape() != n.value.shape()) {
    n.grad = Tensor(n.value.shape(), 0.0);
  }
  return n.grad;
}

const Tensor* Tape::grad_if_any(int id) const {
  const Node& n = nodes_[static_cast<size_t>(id)];
  return n.grad.empty() && !n.value.empty() ? nullptr : &n.grad;
}

void Tape::backward(const Var& root) {
  require(root.value().size() == 1, ErrorCode::kShapeMismatch,
          "backward() needs a scalar root");
  if (!nodes_[root.id()].requires_grad) return;
  grad(root.id())[0] += 1.0;
  for (int i = root.id(); i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
    n.backward(*this, n.grad);
  }
}

// ---- kernels ----------------------------------------------------------------

namespace {

// c[m x n] += a[m x k] * b[k x n]
void gemm_nn(const double* a, const double* b, double* c, size_t m, size_t k,
             size_t n) {
  for (size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + p * n;
      for (size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c[m x k] += a[m x n] * b[k x n]^T
void gemm_nt(const double* a, const double* b, double* c, size_t m, size_t n,
             size_t k) {
  for (size_t i = 0; i < m; ++i) {
    const double* ai = a + i * n;
    double* ci = c + i * k;
    for (size_t p = 0; p < k; ++p) {
      const double* bp = b + p * n;
      double s = 0.0;
      for (size_t j = 0; j < n; ++j) s += ai[j] * bp[j];
      ci[p] += s;
    }
  }
}

// c[k x n] += a[m x k]^T * b[m x n]
void gemm_tn(const double* a, const double* b, double* c, size_t m, size_t k,
             size_t n) {
  for (size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * n;
    for (size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      double* cp = c + p * n;
      for (size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

inline double sigm(double x) { return 1.0 / (1.0 + std::exp(-x)); }

bool any_grad(std::initializer_list<const Var*> vars) {
  for (const Var* v : vars) {
    if (v->tape().requires_grad(*v)) return true;
  }
  return false;
}

void accumulate(Tape& tape, const Var& v, const Tensor& g) {
  if (!tape.requires_grad(v)) return;
  Tensor& dst = tape.grad(v.id());
  for (size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

}  // namespace

// ---- elementwise and shape ops ---------------------------------------------

Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const size_t m = av.rows(), k = av.cols(), n = bv.cols();
  expect(bv.rows() == k, "matmul " + shape_str(av) + " * " + shape_str(bv));
  Tensor out = Tensor::matrix(m, n);
  gemm_nn(av.data(), bv.data(), out.data(), m, k, n);
  return a.tape().record(std::move(out), any_grad({&a, &b}),
                         [a, b, m, k, n](Tape& tape, const Tensor& g) {
                           if (tape.requires_grad(a)) {
                             gemm_nt(g.data(), b.value().data(),
                                     tape.grad(a.id()).data(), m, n, k);
                           }
                           if (tape.requires_grad(b)) {
                             gemm_tn(a.value().data(), g.data(),
                                     tape.grad(b.id()).data(), m, k, n);
                           }
                         });
}

Var add(const Var& a, const Var& b) {
  expect(a.value().size() == b.value().size(), "add size mismatch");
  Tensor out = a.value();
  for (size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return a.tape().record(std::move(out), any_grad({&a, &b}),
                         [a, b](Tape& tape, const Tensor& g) {
                           accumulate(tape, a, g);
                           accumulate(tape, b, g);
                         });
}

Var add_row(const Var& a, const Var& bias) {
  const size_t m = a.rows(), n = a.cols();
  expect(bias.value().size() == n, "bias width mismatch");
  Tensor out = a.value();
  for (size_t i = 0; i < m; ++i) {
    for (size_t j = 0; j < n; ++j) out.at(i, j) += bias.value()[j];
  }
  return a.tape().record(std::move(out), any_grad({&a, &bias}),
                         [a, bias, m, n](Tape& tape, const Tensor& g) {
                           accumulate(tape, a, g);
                           if (tape.requires_grad(bias)) {
                             Tensor& gb = tape.grad(bias.id());
                             for (size_t i = 0; i < m; ++i) {
                               for (size_t j = 0; j < n; ++j) gb[j] += g.at(i, j);
                             }
                           }
                         });
}

Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (double& v : out.storage()) v *= s;
  return a.tape().record(std::move(out), any_grad({&a}),
                         [a, s](Tape& tape, const Tensor& g) {
                           Tensor& ga = tape.grad(a.id());
                           for (size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
                         });
}

Var tanh(const Var& a) {
  Tensor out = a.value();
  for (double& v : out.storage()) v = std::tanh(v);
  const int self = static_cast<int>(a.tape().size());
  return a.tape().record(std::move(out), any_grad({&a}),
                         [a, self](Tape& tape, const Tensor& g) {
                           const Tensor& y = tape.value(self);
                           Tensor& ga = tape.grad(a.id());
                           for (size_t i = 0; i < g.size(); ++i) {
                             ga[i] += g[i] * (1.0 - y[i] * y[i]);
                           }
                         });
}

Var sigmoid(const Var& a) {
  Tensor out = a.value();
  for (double& v : out.storage()) v = sigm(v);
  const int self = static_cast<int>(a.tape().size());
  return a.tape().record(std::move(out), any_grad({&a}),
                         [a, self](Tape& tape, const Tensor& g) {
                           const Tensor& y = tape.value(self);
                           Tensor& ga = tape.grad(a.id());
                           for (size_t i = 0; i < g.size(); ++i) {
                             ga[i] += g[i] * y[i] * (1.0 - y[i]);
                           }
                         });
}

Var concat_cols(const Var& a, const Var& b) {
  const size_t m = a.rows(), na = a.cols(), nb = b.cols();
  expect(b.rows() == m, "concat_cols row mismatch");
  Tensor out = Tensor::matrix(m, na + nb);
  for (size_t i = 0; i < m; ++i) {
    std::copy_n(a.value().row(i).data(), na, out.row(i).data());
    std::copy_n(b.value().row(i).data(), nb, out.row(i).data() + na);
  }
  return a.tape().record(std::move(out), any_grad({&a, &b}),
                         [a, b, m, na, nb](Tape& tape, const Tensor& g) {
                           if (tape.requires_grad(a)) {
                             Tensor& ga = tape.grad(a.id());
                             for (size_t i = 0; i < m; ++i) {
                               for (size_t j = 0; j < na; ++j) ga.at(i, j) += g.at(i, j);
                             }
                           }
                           if (tape.requires_grad(b)) {
                             Tensor& gb = tape.grad(b.id());
                             for (size_t i = 0; i < m; ++i) {
                               for (size_t j = 0; j < nb; ++j) {
                                 gb.at(i, j) += g.at(i, na + j);
                               }
                             }
                           }
                         });
}

Var slice_cols(const Var& a, size_t begin, size_t end) {
  const size_t m = a.rows(), n = a.cols();
  expect(begin <= end && end <= n, "slice_cols out of range");
  const size_t w = end - begin;
  Tensor out = Tensor::matrix(m, w);
  for (size_t i = 0; i < m; ++i) {
    std::copy_n(a.value().row(i).data() + begin, w, out.row(i).data());
  }
  return a.tape().record(std::move(out), any_grad({&a}),
                         [a, begin, m, w](Tape& tape, const Tensor& g) {
                           Tensor& ga = tape.grad(a.id());
                           for (size_t i = 0; i < m; ++i) {
                             for (size_t j = 0; j < w; ++j) {
                               ga.at(i, begin + j) += g.at(i, j);
                             }
                           }
                         });
}

Var row(const Var& a, size_t r) {
  const size_t n = a.cols();
  expect(r < a.rows(), "row index out of range");
  Tensor out = Tensor::matrix(1, n);
  std::copy_n(a.value().row(r).data(), n, out.data());
  return a.tape().record(std::move(out), any_grad({&a}),
                         [a, r, n](Tape& tape, const Tensor& g) {
                           Tensor& ga = tape.grad(a.id());
                           for (size_t j = 0; j < n; ++j) ga.at(r, j) += g[j];
                         });
}

Var stack_rows(const std::vector<Var>& parts) {
  expect(!parts.empty(), "stack_rows of nothing");
  const size_t n = parts.front().cols();
  size_t m = 0;
  bool needs = false;
  for (const Var& p : parts) {
    expect(p.cols() == n, "stack_rows width mismatch");
    m += p.rows();
    needs = needs || p.tape().requires_grad(p);
  }
  Tensor out = Tensor::matrix(m, n);
  size_t off = 0;
  for (const Var& p : parts) {
    std::copy(p.value().storage().begin(), p.value().storage().end(),
              out.data() + off);
    off += p.value().size();
  }
  return parts.front().tape().record(
      std::move(out), needs, [parts](Tape& tape, const Tensor& g) {
        size_t off = 0;
        for (const Var& p : parts) {
          const size_t sz = p.value().size();
          if (tape.requires_grad(p)) {
            Tensor& gp = tape.grad(p.id());
            for (size_t i = 0; i < sz; ++i) gp[i] += g[off + i];
          }
          off += sz;
        }
      });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return a.tape().record(Tensor::matrix(1, 1, s), any_grad({&a}),
                         [a](Tape& tape, const Tensor& g) {
                           Tensor& ga = tape.grad(a.id());
                           for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[0];
                         });
}

Var dense(const Var& x, const Var& w, const Var& b) {
  return add_row(matmul(x, w), b);
}

Var broadcast_add_tanh(const Var& a, const Var& b) {
  const size_t T = a.rows(), M = b.rows(), J = a.cols();
  expect(b.cols() == J, "broadcast_add_tanh width mismatch");
  Tensor out = Tensor::matrix(T * M, J);
  for (size_t t = 0; t < T; ++t) {
    for (size_t m = 0; m < M; ++m) {
      double* o = out.row(t * M + m).data();
      const double* ar = a.value().row(t).data();
      const double* br = b.value().row(m).data();
      for (size_t j = 0; j < J; ++j) o[j] = std::tanh(ar[j] + br[j]);
    }
  }
  const int self = static_cast<int>(a.tape().size());
  return a.tape().record(
      std::move(out), any_grad({&a, &b}),
      [a, b, T, M, J, self](Tape& tape, const Tensor& g) {
        const Tensor& y = tape.value(self);
        Tensor* ga = tape.requires_grad(a) ? &tape.grad(a.id()) : nullptr;
        Tensor* gb = tape.requires_grad(b) ? &tape.grad(b.id()) : nullptr;
        for (size_t t = 0; t < T; ++t) {
          for (size_t m = 0; m < M; ++m) {
            const size_t r = t * M + m;
            for (size_t j = 0; j < J; ++j) {
              const double yv = y.at(r, j);
              const double d = g.at(r, j) * (1.0 - yv * yv);
              if (ga) ga->at(t, j) += d;
              if (gb) gb->at(m, j) += d;
            }
          }
        }
      });
}

Var log_softmax_rows(const Var& a) {
  const size_t m = a.rows(), n = a.cols();
  Tensor out = a.value();
  for (size_t i = 0; i < m; ++i) {
    auto r = out.row(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double s = 0.0;
    for (double v : r) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    for (double& v : r) v -= lse;
  }
  const int self = static_cast<int>(a.tape().size());
  return a.tape().record(std::move(out), any_grad({&a}),
                         [a, m, n, self](Tape& tape, const Tensor& g) {
                           const Tensor& y = tape.value(self);
                           Tensor& ga = tape.grad(a.id());
                           for (size_t i = 0; i < m; ++i) {
                             double gs = 0.0;
                             for (size_t j = 0; j < n; ++j) gs += g.at(i, j);
                             for (size_t j = 0; j < n; ++j) {
                               ga.at(i, j) += g.at(i, j) - std::exp(y.at(i, j)) * gs;
                             }
                           }
                         });
}

Var embedding(const Var& table, std::span<const int> ids) {
  const size_t n = table.cols(), V = table.rows();
  Tensor out = Tensor::matrix(ids.size(), n);
  for (size_t i = 0; i < ids.size(); ++i) {
    expect(ids[i] >= 0 && static_cast<size_t>(ids[i]) < V,
           "embedding id " + std::to_string(ids[i]) + " out of range");
    std::copy_n(table.value().row(static_cast<size_t>(ids[i])).data(), n,
                out.row(i).data());
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return table.tape().record(std::move(out), any_grad({&table}),
                             [table, idv, n](Tape& tape, const Tensor& g) {
                               Tensor& gt = tape.grad(table.id());
                               for (size_t i = 0; i < idv.size(); ++i) {
                                 for (size_t j = 0; j < n; ++j) {
                                   gt.at(static_cast<size_t>(idv[i]), j) += g.at(i, j);
                                 }
                               }
                             });
}

Var maxpool_time(const Var& x, int factor) {
  require(factor == 2, ErrorCode::kInvalidArgument, "only factor-2 pooling");
  const size_t T = x.rows(), d = x.cols();
  const size_t To = (T + 1) / 2;
  Tensor out = Tensor::matrix(To, d);
  auto src = std::make_shared<std::vector<size_t>>(To * d);
  for (size_t o = 0; o < To; ++o) {
    const size_t t0 = 2 * o;
    const bool pair = t0 + 1 < T;
    for (size_t j = 0; j < d; ++j) {
      size_t pick = t0;
      if (pair && x.value().at(t0 + 1, j) > x.value().at(t0, j)) pick = t0 + 1;
      out.at(o, j) = x.value().at(pick, j);
      (*src)[o * d + j] = pick;
    }
  }
  return x.tape().record(std::move(out), any_grad({&x}),
                         [x, src, To, d](Tape& tape, const Tensor& g) {
                           Tensor& gx = tape.grad(x.id());
                           for (size_t o = 0; o < To; ++o) {
                             for (size_t j = 0; j < d; ++j) {
                               gx.at((*src)[o * d + j], j) += g.at(o, j);
                             }
                           }
                         });
}

Var dropout(const Var& x, double rate, bool train, std::mt19937_64& rng) {
  if (!train || rate <= 0.0) return x;
  require(rate < 1.0, ErrorCode::kInvalidArgument, "dropout rate must be < 1");
  const double keep_scale = 1.0 / (1.0 - rate);
  auto mask = std::make_shared<std::vector<double>>(x.value().size());
  Tensor out = x.value();
  for (size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = uniform01(rng) >= rate ? keep_scale : 0.0;
    out[i] *= (*mask)[i];
  }
  return x.tape().record(std::move(out), any_grad({&x}),
                         [x, mask](Tape& tape, const Tensor& g) {
                           Tensor& gx = tape.grad(x.id());
                           for (size_t i = 0; i < g.size(); ++i) {
                             gx[i] += g[i] * (*mask)[i];
                           }
                         });
}

// ---- recurrent --------------------------------------------------------------

namespace {

struct LstmCache {
  size_t steps = 0, hidden = 0;
  std::vector<double> gates;   // [T x 4H] post-activation i, f, g, o
  std::vector<double> cells;   // [T x H]
  std::vector<double> tanh_c;  // [T x H]
};

// pre: [4H] pre-activations; writes activated gates, returns nothing.
void activate_gates(double* pre, size_t H) {
  for (size_t j = 0; j < H; ++j) pre[j] = sigm(pre[j]);
  for (size_t j = H; j < 2 * H; ++j) pre[j] = sigm(pre[j]);
  for (size_t j = 2 * H; j < 3 * H; ++j) pre[j] = std::tanh(pre[j]);
  for (size_t j = 3 * H; j < 4 * H; ++j) pre[j] = sigm(pre[j]);
}

// Converts dL/d(activated gates) into dL/d(pre-activations) in place.
void gate_backward(double* dgate, const double* gate, size_t H) {
  for (size_t j = 0; j < 4 * H; ++j) {
    const double y = gate[j];
    dgate[j] *= (j >= 2 * H && j < 3 * H) ? (1.0 - y * y) : y * (1.0 - y);
  }
}

}  // namespace

void lstm_step(std::span<const double> x, std::span<double> h,
               std::span<double> c, const Tensor& wx, const Tensor& wh,
               const Tensor& b) {
  const size_t H = h.size();
  std::vector<double> pre(b.storage());
  gemm_nn(x.data(), wx.data(), pre.data(), 1, x.size(), 4 * H);
  gemm_nn(h.data(), wh.data(), pre.data(), 1, H, 4 * H);
  activate_gates(pre.data(), H);
  for (size_t j = 0; j < H; ++j) {
    c[j] = pre[H + j] * c[j] + pre[j] * pre[2 * H + j];
    h[j] = pre[3 * H + j] * std::tanh(c[j]);
  }
}

Var lstm_sequence(const Var& x, const Var& wx, const Var& wh, const Var& b) {
  const size_t T = x.rows(), in = x.cols(), H = wh.rows();
  expect(wx.rows() == in && wx.cols() == 4 * H && wh.cols() == 4 * H &&
             b.value().size() == 4 * H,
         "lstm weight shapes inconsistent with input " + shape_str(x.value()));
  auto cache = std::make_shared<LstmCache>();
  cache->steps = T;
  cache->hidden = H;
  cache->gates.assign(T * 4 * H, 0.0);
  cache->cells.assign(T * H, 0.0);
  cache->tanh_c.assign(T * H, 0.0);

  for (size_t t = 0; t < T; ++t) {
    std::copy(b.value().storage().begin(), b.value().storage().end(),
              cache->gates.begin() + static_cast<std::ptrdiff_t>(t * 4 * H));
  }
  gemm_nn(x.value().data(), wx.value().data(), cache->gates.data(), T, in, 4 * H);

  Tensor out = Tensor::matrix(T, H);
  for (size_t t = 0; t < T; ++t) {
    double* gt = cache->gates.data() + t * 4 * H;
    if (t > 0) gemm_nn(out.row(t - 1).data(), wh.value().data(), gt, 1, H, 4 * H);
    activate_gates(gt, H);
    const double* c_prev = t > 0 ? cache->cells.data() + (t - 1) * H : nullptr;
    for (size_t j = 0; j < H; ++j) {
      const double c = gt[H + j] * (c_prev ? c_prev[j] : 0.0) + gt[j] * gt[2 * H + j];
      cache->cells[t * H + j] = c;
      cache->tanh_c[t * H + j] = std::tanh(c);
      out.at(t, j) = gt[3 * H + j] * cache->tanh_c[t * H + j];
    }
  }

  const int self = static_cast<int>(x.tape().size());
  return x.tape().record(
      std::move(out), any_grad({&x, &wx, &wh, &b}),
      [x, wx, wh, b, cache, self, in](Tape& tape, const Tensor& g) {
        const size_t T = cache->steps, H = cache->hidden;
        const Tensor& hs = tape.value(self);
        std::vector<double> dpre(T * 4 * H, 0.0);
        std::vector<double> dh_next(H, 0.0), dc_next(H, 0.0);
        for (size_t tt = T; tt-- > 0;) {
          const double* gt = cache->gates.data() + tt * 4 * H;
          double* dp = dpre.data() + tt * 4 * H;
          for (size_t j = 0; j < H; ++j) {
            const double dh = g.at(tt, j) + dh_next[j];
            const double tc = cache->tanh_c[tt * H + j];
            const double dc = dh * gt[3 * H + j] * (1.0 - tc * tc) + dc_next[j];
            const double c_prev = tt > 0 ? cache->cells[(tt - 1) * H + j] : 0.0;
            dp[j] = dc * gt[2 * H + j];
            dp[H + j] = dc * c_prev;
            dp[2 * H + j] = dc * gt[j];
            dp[3 * H + j] = dh * tc;
            dc_next[j] = dc * gt[H + j];
          }
          gate_backward(dp, gt, H);
          std::fill(dh_next.begin(), dh_next.end(), 0.0);
          if (tt > 0) gemm_nt(dp, wh.value().data(), dh_next.data(), 1, 4 * H, H);
        }
        if (tape.requires_grad(x)) {
          gemm_nt(dpre.data(), wx.value().data(), tape.grad(x.id()).data(), T,
                  4 * H, in);
        }
        if (tape.requires_grad(wx)) {
          gemm_tn(x.value().data(), dpre.data(), tape.grad(wx.id()).data(), T, in,
                  4 * H);
        }
        if (tape.requires_grad(wh) && T > 1) {
          gemm_tn(hs.data(), dpre.data() + 4 * H, tape.grad(wh.id()).data(), T - 1,
                  H, 4 * H);
        }
        if (tape.requires_grad(b)) {
          Tensor& gb = tape.grad(b.id());
          for (size_t t = 0; t < T; ++t) {
            for (size_t j = 0; j < 4 * H; ++j) gb[j] += dpre[t * 4 * H + j];
          }
        }
      });
}

Var lstm_cell(const Var& x, const Var& h, const Var& c, const Var& wx,
              const Var& wh, const Var& b) {
  const size_t in = x.cols(), H = wh.rows();
  expect(x.rows() == 1 && h.value().size() == H && c.value().size() == H &&
             wx.rows() == in && wx.cols() == 4 * H,
         "lstm_cell shape mismatch");
  auto gates = std::make_shared<std::vector<double>>(b.value().storage());
  gemm_nn(x.value().data(), wx.value().data(), gates->data(), 1, in, 4 * H);
  gemm_nn(h.value().data(), wh.value().data(), gates->data(), 1, H, 4 * H);
  activate_gates(gates->data(), H);
  Tensor out = Tensor::matrix(1, 2 * H);
  auto tanh_c = std::make_shared<std::vector<double>>(H);
  for (size_t j = 0; j < H; ++j) {
    const double* gt = gates->data();
    const double cn = gt[H + j] * c.value()[j] + gt[j] * gt[2 * H + j];
    (*tanh_c)[j] = std::tanh(cn);
    out[j] = gt[3 * H + j] * (*tanh_c)[j];
    out[H + j] = cn;
  }
  return x.tape().record(
      std::move(out), any_grad({&x, &h, &c, &wx, &wh, &b}),
      [x, h, c, wx, wh, b, gates, tanh_c, in, H](Tape& tape, const Tensor& g) {
        const double* gt = gates->data();
        std::vector<double> dp(4 * H);
        std::vector<double> dc_prev(H);
        for (size_t j = 0; j < H; ++j) {
          const double dh = g[j];
          const double tc = (*tanh_c)[j];
          const double dc = dh * gt[3 * H + j] * (1.0 - tc * tc) + g[H + j];
          dp[j] = dc * gt[2 * H + j];
          dp[H + j] = dc * c.value()[j];
          dp[2 * H + j] = dc * gt[j];
          dp[3 * H + j] = dh * tc;
          dc_prev[j] = dc * gt[H + j];
        }
        gate_backward(dp.data(), gt, H);
        if (tape.requires_grad(x)) {
          gemm_nt(dp.data(), wx.value().data(), tape.grad(x.id()).data(), 1, 4 * H, in);
        }
        if (tape.requires_grad(h)) {
          gemm_nt(dp.data(), wh.value().data(), tape.grad(h.id()).data(), 1, 4 * H, H);
        }
        if (tape.requires_grad(c)) {
          Tensor& gc = tape.grad(c.id());
          for (size_t j = 0; j < H; ++j) gc[j] += dc_prev[j];
        }
        if (tape.requires_grad(wx)) {
          gemm_tn(x.value().data(), dp.data(), tape.grad(wx.id()).data(), 1, in, 4 * H);
        }
        if (tape.requires_grad(wh)) {
          gemm_tn(h.value().data(), dp.data(), tape.grad(wh.id()).data(), 1, H, 4 * H);
        }
        if (tape.requires_grad(b)) {
          Tensor& gb = tape.grad(b.id());
          for (size_t j = 0; j < 4 * H; ++j) gb[j] += dp[j];
        }
      });
}

// ---- attention --------------------------------------------------------------

Tensor attention_weights(const Tensor& q, const Tensor& k, int heads) {
  const size_t M = q.rows(), N = k.rows(), D = q.cols();
  require(heads >= 1 && D % static_cast<size_t>(heads) == 0,
          ErrorCode::kInvalidArgument,
          "attention width " + std::to_string(D) + " not divisible by " +
              std::to_string(heads) + " heads");
  expect(k.cols() == D && N >= 1, "attention key shape mismatch");
  const size_t H = static_cast<size_t>(heads), dh = D / H;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor w({M, H, N});
  for (size_t m = 0; m < M; ++m) {
    for (size_t hd = 0; hd < H; ++hd) {
      double* wr = w.data() + (m * H + hd) * N;
      double mx = -std::numeric_limits<double>::infinity();
      for (size_t n = 0; n < N; ++n) {
        double s = 0.0;
        for (size_t j = 0; j < dh; ++j) s += q.at(m, hd * dh + j) * k.at(n, hd * dh + j);
        wr[n] = s * inv;
        mx = std::max(mx, wr[n]);
      }
      double z = 0.0;
      for (size_t n = 0; n < N; ++n) {
        wr[n] = std::exp(wr[n] - mx);
        z += wr[n];
      }
      for (size_t n = 0; n < N; ++n) wr[n] /= z;
    }
  }
  return w;
}

Var dot_attention(const Var& q, const Var& k, const Var& v, int heads) {
  const size_t M = q.rows(), N = k.rows(), D = q.cols();
  expect(v.rows() == N && v.cols() == D, "attention key/value shape mismatch");
  auto w = std::make_shared<Tensor>(attention_weights(q.value(), k.value(), heads));
  const size_t H = static_cast<size_t>(heads), dh = D / H;
  Tensor out = Tensor::matrix(M, D);
  for (size_t m = 0; m < M; ++m) {
    for (size_t hd = 0; hd < H; ++hd) {
      const double* wr = w->data() + (m * H + hd) * N;
      for (size_t n = 0; n < N; ++n) {
        for (size_t j = 0; j < dh; ++j) out.at(m, hd * dh + j) += wr[n] * v.value().at(n, hd * dh + j);
      }
    }
  }
  return q.tape().record(
      std::move(out), any_grad({&q, &k, &v}),
      [q, k, v, w, M, N, H, dh](Tape& tape, const Tensor& g) {
        const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
        Tensor* gq = tape.requires_grad(q) ? &tape.grad(q.id()) : nullptr;
        Tensor* gk = tape.requires_grad(k) ? &tape.grad(k.id()) : nullptr;
        Tensor* gv = tape.requires_grad(v) ? &tape.grad(v.id()) : nullptr;
        std::vector<double> da(N);
        for (size_t m = 0; m < M; ++m) {
          for (size_t hd = 0; hd < H; ++hd) {
            const double* wr = w->data() + (m * H + hd) * N;
            double dot = 0.0;
            for (size_t n = 0; n < N; ++n) {
              double s = 0.0;
              for (size_t j = 0; j < dh; ++j) {
                s += g.at(m, hd * dh + j) * v.value().at(n, hd * dh + j);
                if (gv) gv->at(n, hd * dh + j) += wr[n] * g.at(m, hd * dh + j);
              }
              da[n] = s;
              dot += wr[n] * s;
            }
            for (size_t n = 0; n < N; ++n) {
              const double ds = wr[n] * (da[n] - dot) * inv;
              if (ds == 0.0) continue;
              for (size_t j = 0; j < dh; ++j) {
                if (gq) gq->at(m, hd * dh + j) += ds * k.value().at(n, hd * dh + j);
                if (gk) gk->at(n, hd * dh + j) += ds * q.value().at(m, hd * dh + j);
              }
            }
          }
        }
      });
}

// ---- losses -----------------------------------------------------------------

namespace {

LatticeDist lattice_view(const Var& logp, int frames, const LabelSequence& target) {
  const int U = target.size();
  const int labels = static_cast<int>(logp.cols());
  expect(logp.rows() == static_cast<size_t>(frames) * (U + 1),
         "lattice rows != T*(U+1)");
  LatticeDist d(frames, U, labels - 1);
  std::copy(logp.value().storage().begin(), logp.value().storage().end(),
            d.data().begin());
  return d;
}

}  // namespace

Var rnnt_loss(const Var& logp, int frames, const LabelSequence& target) {
  LatticeDist d = lattice_view(logp, frames, target);
  auto res = std::make_shared<RnntLossGrad>(rnnt_loss_and_grad(d, target));
  return logp.tape().record(Tensor::matrix(1, 1, -res->log_prob), any_grad({&logp}),
                            [logp, res](Tape& tape, const Tensor& g) {
                              Tensor& gl = tape.grad(logp.id());
                              for (size_t i = 0; i < gl.size(); ++i) {
                                gl[i] += g[0] * res->grad[i];
                              }
                            });
}

Var coarse_distill(const Var& logp, std::shared_ptr<const CoarseLattice> teacher,
                   const LabelSequence& target) {
  LatticeDist d = lattice_view(logp, teacher->frames(), target);
  auto res = std::make_shared<CoarseKlGrad>(coarse_kl_sum(*teacher, d, target));
  return logp.tape().record(Tensor::matrix(1, 1, res->value), any_grad({&logp}),
                            [logp, res](Tape& tape, const Tensor& g) {
                              Tensor& gl = tape.grad(logp.id());
                              for (size_t i = 0; i < gl.size(); ++i) {
                                gl[i] += g[0] * res->grad[i];
                              }
                            });
}

Var nll_rows(const Var& logp, std::span<const int> targets) {
  const size_t n = logp.cols();
  expect(targets.size() == logp.rows(), "nll_rows target count mismatch");
  double s = 0.0;
  for (size_t i = 0; i < targets.size(); ++i) {
    expect(targets[i] >= 0 && static_cast<size_t>(targets[i]) < n,
           "nll target out of range");
    s -= logp.value().at(i, static_cast<size_t>(targets[i]));
  }
  std::vector<int> tv(targets.begin(), targets.end());
  return logp.tape().record(Tensor::matrix(1, 1, s), any_grad({&logp}),
                            [logp, tv](Tape& tape, const Tensor& g) {
                              Tensor& gl = tape.grad(logp.id());
                              for (size_t i = 0; i < tv.size(); ++i) {
                                gl.at(i, static_cast<size_t>(tv[i])) -= g[0];
                              }
                            });
}

Var kl_rows(const Tensor& teacher_logp, const Var& student_logp) {
  expect(teacher_logp.rows() == student_logp.rows() &&
             teacher_logp.cols() == student_logp.cols(),
         "kl_rows shape mismatch");
  const size_t m = teacher_logp.rows(), n = teacher_logp.cols();
  auto grad = std::make_shared<std::vector<double>>(m * n, 0.0);
  double total = 0.0;
  for (size_t i = 0; i < m; ++i) {
    double kl = 0.0;
    for (size_t j = 0; j < n; ++j) {
      const double pt = std::exp(teacher_logp.at(i, j));
      if (pt <= 0.0) continue;
      const double ps = std::exp(student_logp.value().at(i, j));
      kl += pt * (teacher_logp.at(i, j) - std::log(std::max(ps, kStudentFloor)));
      if (ps > kStudentFloor) (*grad)[i * n + j] = -pt;
    }
    if (kl > 0.0) {
      total += kl;
    } else {
      std::fill_n(grad->begin() + static_cast<std::ptrdiff_t>(i * n), n, 0.0);
    }
  }
  return student_logp.tape().record(
      Tensor::matrix(1, 1, total), any_grad({&student_logp}),
      [student_logp, grad](Tape& tape, const Tensor& g) {
        Tensor& gl = tape.grad(student_logp.id());
        for (size_t i = 0; i < gl.size(); ++i) gl[i] += g[0] * (*grad)[i];
      });
}

}  // namespace tpkd::nnet
