#include "tpkd/params.hpp"

#include <zlib.h>

#include <cmath>

#include "tpkd/error.hpp"

namespace tpkd::nnet {

void ParamStore::set_precision(Precision p) {
  precision_ = p;
  round_to_precision();
}

Param& ParamStore::add(const std::string& name, Tensor value) {
  require(!contains(name), ErrorCode::kInvalidArgument,
          "duplicate parameter " + name);
  Param& p = params_[name];
  p.value = std::move(value);
  if (precision_ == Precision::kFloat32) {
    for (double& v : p.value.storage()) v = static_cast<float>(v);
  }
  return p;
}

Param& ParamStore::get(const std::string& name) {
  auto it = params_.find(name);
  require(it != params_.end(), ErrorCode::kInvalidArgument,
          "unknown parameter " + name);
  return it->second;
}

const Param& ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  require(it != params_.end(), ErrorCode::kInvalidArgument,
          "unknown parameter " + name);
  return it->second;
}

size_t ParamStore::set_frozen(const std::string& prefix, bool frozen) {
  size_t n = 0;
  for (auto& [name, p] : params_) {
    if (name.rfind(prefix, 0) == 0) {
      p.frozen = frozen;
      ++n;
    }
  }
  return n;
}

void ParamStore::set_all_frozen(bool frozen) {
  for (auto& kv : params_) kv.second.frozen = frozen;
}

size_t ParamStore::count() const { return count(""); }

size_t ParamStore::count(const std::string& prefix) const {
  size_t n = 0;
  for (const auto& [name, p] : params_) {
    if (name.rfind(prefix, 0) == 0) n += p.value.size();
  }
  return n;
}

uint32_t ParamStore::hash(const std::string& prefix) const {
  uLong crc = crc32(0L, Z_NULL, 0);
  for (const auto& [name, p] : params_) {
    if (name.rfind(prefix, 0) != 0) continue;
    crc = crc32(crc, reinterpret_cast<const Bytef*>(name.data()),
                static_cast<uInt>(name.size()));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(p.value.data()),
                static_cast<uInt>(p.value.size() * sizeof(double)));
  }
  return static_cast<uint32_t>(crc);
}

void ParamStore::round_to_precision() {
  if (precision_ != Precision::kFloat32) return;
  for (auto& kv : params_) {
    for (double& v : kv.second.value.storage()) v = static_cast<float>(v);
  }
}

Tensor uniform_init(size_t rows, size_t cols, size_t fan_in, std::mt19937_64& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(std::max<size_t>(fan_in, 1)));
  Tensor t = Tensor::matrix(rows, cols);
  for (double& v : t.storage()) v = (2.0 * uniform01(rng) - 1.0) * s;
  return t;
}

Var Binding::operator()(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  for (const ParamStore* store : stores_) {
    if (!store->contains(name)) continue;
    const Param& p = store->get(name);
    Var v = tape_.leaf(p.value, !p.frozen);
    bound_.emplace(name, v);
    return v;
  }
  fail(ErrorCode::kInvalidArgument, "unbound parameter " + name);
}

GradMap Binding::grads() const {
  GradMap out;
  for (const auto& [name, v] : bound_) {
    if (!tape_.requires_grad(v)) continue;
    const Tensor* g = tape_.grad_if_any(v.id());
    out.emplace(name, g && !g->empty() ? *g : Tensor(v.value().shape(), 0.0));
  }
  return out;
}

void adam_step(ParamStore& group, const GradMap& grads, double lr,
               int step_index, AdamState& state, const AdamConfig& cfg) {
  require(step_index >= 1, ErrorCode::kInvalidArgument,
          "adam step index is 1-based");
  const double bc1 = 1.0 - std::pow(cfg.beta1, step_index);
  const double bc2 = 1.0 - std::pow(cfg.beta2, step_index);
  for (auto& [name, p] : group.all()) {
    if (p.frozen) continue;
    auto git = grads.find(name);
    if (git == grads.end()) continue;
    const Tensor& g = git->second;
    require(g.size() == p.value.size(), ErrorCode::kShapeMismatch,
            "gradient shape mismatch for " + name);
    auto& [m, v] = state.moments[name];
    if (m.size() != g.size()) {
      m = Tensor(p.value.shape(), 0.0);
      v = Tensor(p.value.shape(), 0.0);
    }
    for (size_t i = 0; i < g.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p.value[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
    if (group.precision() == Precision::kFloat32) {
      for (double& x : p.value.storage()) x = static_cast<float>(x);
    }
  }
}

double lr_at(long step, double base, double decay, long interval) {
  require(interval >= 1, ErrorCode::kInvalidArgument,
          "decay interval must be positive");
  return base * std::pow(decay, static_cast<double>(step / interval));
}

size_t count_params(const ParamStore& group) { return group.count(); }

double reduction_exact(double large, double small) {
  require(large > 0.0, ErrorCode::kInvalidArgument, "reference size must be > 0");
  return (1.0 - small / large) * 100.0;
}

int reduction_percent(double large, double small) {
  return static_cast<int>(std::lround(reduction_exact(large, small)));
}

}  // namespace tpkd::nnet
