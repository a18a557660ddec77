#pragma once

// Differentiable building blocks for the text encoder and the ranking
// losses. There is no graph: each op has a forward that records what its
// backward needs, and callers chain the backwards by hand. All gradient
// outputs are accumulated (+=), never overwritten.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "patr/error.hpp"
#include "patr/random.hpp"
#include "patr/tensor.hpp"

namespace patr {

// ---------------------------------------------------------------------------
// affine: y = x W + b

template <typename T>
Tensor<T> affine(const Tensor<T>& x, const Tensor<T>& W, const Tensor<T>& b) {
  if (x.rank() != 2 || W.rank() != 2 || b.rank() != 1)
    throw ConfigError("affine: expects x[B x I], W[I x O], b[O]");
  const std::size_t B = x.rows(), I = x.cols(), O = W.cols();
  if (W.rows() != I || b.size() != O)
    throw ConfigError("affine: shape mismatch x" + shape_str(x.shape()) + " W" +
                      shape_str(W.shape()) + " b" + shape_str(b.shape()));
  Tensor<T> y({B, O});
  for (std::size_t r = 0; r < B; ++r) {
    auto out = y.row(r);
    for (std::size_t c = 0; c < O; ++c) out[c] = b[c];
    for (std::size_t k = 0; k < I; ++k) {
      const T xv = x(r, k);
      const auto wrow = W.row(k);
      for (std::size_t c = 0; c < O; ++c) out[c] += xv * wrow[c];
    }
  }
  return y;
}

/// Accumulates dx += dy W^T, dW += x^T dy, db += sum_rows(dy).
/// Any of dx/dW/db may be null when that gradient is not wanted.
template <typename T>
void affine_backward(const Tensor<T>& dy, const Tensor<T>& x, const Tensor<T>& W, Tensor<T>* dx,
                     Tensor<T>* dW, Tensor<T>* db) {
  const std::size_t B = x.rows(), I = x.cols(), O = W.cols();
  require_shape(dy.shape(), {B, O}, "affine_backward dy");
  for (std::size_t r = 0; r < B; ++r) {
    const auto g = dy.row(r);
    if (db)
      for (std::size_t c = 0; c < O; ++c) (*db)[c] += g[c];
    for (std::size_t k = 0; k < I; ++k) {
      const auto wrow = W.row(k);
      if (dW) {
        const T xv = x(r, k);
        auto dwrow = dW->row(k);
        for (std::size_t c = 0; c < O; ++c) dwrow[c] += xv * g[c];
      }
      if (dx) {
        T acc{0};
        for (std::size_t c = 0; c < O; ++c) acc += g[c] * wrow[c];
        (*dx)(r, k) += acc;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// LSTM cell
//
// Gate weights are packed column-blockwise in the order
// (input, forget, output, candidate): W is [I x 4H], U is [H x 4H], b is [4H].

enum class Gate : std::size_t { Input = 0, Forget = 1, Output = 2, Candidate = 3 };

inline constexpr std::size_t gate_offset(Gate g, std::size_t hidden) {
  return static_cast<std::size_t>(g) * hidden;
}

template <typename T>
T sigmoid(T z) {
  return z >= T{0} ? T{1} / (T{1} + std::exp(-z)) : std::exp(z) / (T{1} + std::exp(z));
}

template <typename T>
struct LstmWeights {
  const Tensor<T>& W;
  const Tensor<T>& U;
  const Tensor<T>& b;

  std::size_t hidden() const { return U.rows(); }
  std::size_t input() const { return W.rows(); }
};

template <typename T>
struct LstmGrads {
  Tensor<T>& W;
  Tensor<T>& U;
  Tensor<T>& b;
};

/// Everything the backward pass needs from one cell evaluation.
template <typename T>
struct LstmCache {
  Tensor<T> x, h_prev, c_prev;
  Tensor<T> i, f, o, g;  // post-activation gates, each [B x H]
  Tensor<T> c, tanh_c;
};

template <typename T>
struct LstmState {
  Tensor<T> h, c;
};

template <typename T>
LstmState<T> lstm_cell(const Tensor<T>& x, const Tensor<T>& h_prev, const Tensor<T>& c_prev,
                       const LstmWeights<T>& w, LstmCache<T>* cache = nullptr) {
  const std::size_t H = w.hidden();
  const std::size_t B = x.rows();
  if (w.W.rank() != 2 || w.W.cols() != 4 * H || w.U.cols() != 4 * H || w.b.size() != 4 * H)
    throw ConfigError("lstm_cell: gate weights must be W[I x 4H], U[H x 4H], b[4H]");
  if (x.rank() != 2 || x.cols() != w.input())
    throw ConfigError("lstm_cell: input " + shape_str(x.shape()) + " does not match W" +
                      shape_str(w.W.shape()));
  require_shape(h_prev.shape(), {B, H}, "lstm_cell h_prev");
  require_shape(c_prev.shape(), {B, H}, "lstm_cell c_prev");

  // Pre-activations: x W + h U + b.
  Tensor<T> z = affine(x, w.W, w.b);
  for (std::size_t r = 0; r < B; ++r) {
    auto zr = z.row(r);
    for (std::size_t k = 0; k < H; ++k) {
      const T hv = h_prev(r, k);
      const auto urow = w.U.row(k);
      for (std::size_t c = 0; c < 4 * H; ++c) zr[c] += hv * urow[c];
    }
  }

  Tensor<T> i({B, H}), f({B, H}), o({B, H}), g({B, H}), c({B, H}), tc({B, H}), h({B, H});
  for (std::size_t r = 0; r < B; ++r) {
    const auto zr = z.row(r);
    for (std::size_t k = 0; k < H; ++k) {
      i(r, k) = sigmoid(zr[k]);
      f(r, k) = sigmoid(zr[H + k]);
      o(r, k) = sigmoid(zr[2 * H + k]);
      g(r, k) = std::tanh(zr[3 * H + k]);
      c(r, k) = f(r, k) * c_prev(r, k) + i(r, k) * g(r, k);
      tc(r, k) = std::tanh(c(r, k));
      h(r, k) = o(r, k) * tc(r, k);
    }
  }
  if (cache) {
    cache->x = x;
    cache->h_prev = h_prev;
    cache->c_prev = c_prev;
    cache->i = std::move(i);
    cache->f = std::move(f);
    cache->o = std::move(o);
    cache->g = std::move(g);
    cache->c = c;
    cache->tanh_c = std::move(tc);
  }
  return {std::move(h), std::move(c)};
}

template <typename T>
struct LstmInputGrads {
  Tensor<T> dx, dh_prev, dc_prev;
};

/// Backward through one cell. dh/dc are the gradients arriving at this
/// cell's outputs; weight gradients are accumulated into `grads`.
template <typename T>
LstmInputGrads<T> lstm_cell_backward(const Tensor<T>& dh, const Tensor<T>& dc,
                                     const LstmCache<T>& cache, const LstmWeights<T>& w,
                                     LstmGrads<T>& grads) {
  const std::size_t H = w.hidden();
  const std::size_t B = cache.x.rows();
  require_shape(dh.shape(), {B, H}, "lstm_cell_backward dh");
  require_shape(dc.shape(), {B, H}, "lstm_cell_backward dc");

  Tensor<T> dz({B, 4 * H});
  Tensor<T> dc_prev({B, H});
  for (std::size_t r = 0; r < B; ++r) {
    auto dzr = dz.row(r);
    for (std::size_t k = 0; k < H; ++k) {
      const T i = cache.i(r, k), f = cache.f(r, k), o = cache.o(r, k), g = cache.g(r, k);
      const T tc = cache.tanh_c(r, k);
      const T dct = dc(r, k) + dh(r, k) * o * (T{1} - tc * tc);
      const T d_o = dh(r, k) * tc;
      dzr[k] = dct * g * i * (T{1} - i);
      dzr[H + k] = dct * cache.c_prev(r, k) * f * (T{1} - f);
      dzr[2 * H + k] = d_o * o * (T{1} - o);
      dzr[3 * H + k] = dct * i * (T{1} - g * g);
      dc_prev(r, k) = dct * f;
    }
  }

  LstmInputGrads<T> out{Tensor<T>({B, w.input()}), Tensor<T>({B, H}), std::move(dc_prev)};
  affine_backward(dz, cache.x, w.W, &out.dx, &grads.W, &grads.b);
  affine_backward(dz, cache.h_prev, w.U, &out.dh_prev, &grads.U, static_cast<Tensor<T>*>(nullptr));
  return out;
}

// ---------------------------------------------------------------------------
// dropout (inverted: survivors scaled by 1/(1-rate) at train time)

template <typename T>
struct DropoutMask {
  std::vector<T> scale;  // 0 or 1/(1-rate) per element; empty means identity
};

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Rng& rng, bool training,
                  DropoutMask<T>* mask = nullptr) {
  if (!(rate >= 0.0) || rate >= 1.0)
    throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  if (mask) mask->scale.clear();
  if (!training || rate == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  Tensor<T> y = x;
  std::vector<T> scale(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) {
    scale[k] = rng.uniform01() < rate ? T{0} : keep_scale;
    y[k] = x[k] * scale[k];
  }
  if (mask) mask->scale = std::move(scale);
  return y;
}

template <typename T>
void dropout_backward(Tensor<T>& grad, const DropoutMask<T>& mask) {
  if (mask.scale.empty()) return;
  for (std::size_t k = 0; k < grad.size(); ++k) grad[k] *= mask.scale[k];
}

// ---------------------------------------------------------------------------
// squared Euclidean distance

template <typename T>
T squared_distance(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size())
    throw ConfigError("squared_distance: dimension mismatch " + std::to_string(a.size()) +
                      " vs " + std::to_string(b.size()));
  T acc{0};
  for (std::size_t k = 0; k < a.size(); ++k) {
    const T d = a[k] - b[k];
    acc += d * d;
  }
  return acc;
}

/// da += scale * 2(a - b); db -= scale * 2(a - b). Either side may be empty.
template <typename T>
void squared_distance_backward(std::span<const T> a, std::span<const T> b, T scale,
                               std::span<T> da, std::span<T> db) {
  for (std::size_t k = 0; k < a.size(); ++k) {
    const T g = scale * T{2} * (a[k] - b[k]);
    if (!da.empty()) da[k] += g;
    if (!db.empty()) db[k] -= g;
  }
}

// ---------------------------------------------------------------------------
// parameters and Adam

template <typename T>
struct ParamSlot {
  std::string name;
  Tensor<T> value, grad, adam_m, adam_v;
  bool trainable = true;

  ParamSlot(std::string n, Tensor<T> v, bool train = true)
      : name(std::move(n)), value(std::move(v)), trainable(train) {
    grad = Tensor<T>::zeros(value.shape());
    adam_m = Tensor<T>::zeros(value.shape());
    adam_v = Tensor<T>::zeros(value.shape());
  }
};

/// Ordered set of uniquely named parameters.
template <typename T>
class ParamSet {
 public:
  ParamSlot<T>& add(std::string name, Tensor<T> value, bool trainable = true) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    index_.emplace(name, slots_.size());
    slots_.emplace_back(std::move(name), std::move(value), trainable);
    return slots_.back();
  }

  ParamSlot<T>& at(const std::string& name) { return slots_[index_of(name)]; }
  const ParamSlot<T>& at(const std::string& name) const { return slots_[index_of(name)]; }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::vector<ParamSlot<T>>& slots() noexcept { return slots_; }
  const std::vector<ParamSlot<T>>& slots() const noexcept { return slots_; }
  std::size_t size() const noexcept { return slots_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& s : slots_) n += s.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& s : slots_) s.grad.fill(T{0});
  }

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& s : slots_) {
      auto& d = out.add(s.name, s.value.template cast<U>(), s.trainable);
      d.grad = s.grad.template cast<U>();
      d.adam_m = s.adam_m.template cast<U>();
      d.adam_v = s.adam_v.template cast<U>();
    }
    return out;
  }

 private:
  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }

  std::vector<ParamSlot<T>> slots_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.99;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step_count = 0;
  double clip_norm = 0.0;  // global-norm gradient clip; 0 disables

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("adam: learning_rate must be positive");
    if (!(beta1 > 0.0 && beta1 < 1.0)) throw ConfigError("adam: beta1 must lie in (0, 1)");
    if (!(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("adam: beta2 must lie in (0, 1)");
    if (!(epsilon > 0.0)) throw ConfigError("adam: epsilon must be positive");
    if (!(clip_norm >= 0.0)) throw ConfigError("adam: clip_norm must be non-negative");
  }
};

/// One bias-corrected Adam update over every trainable slot, then zeroes
/// all gradients. Throws NumericError naming the first slot with a
/// non-finite gradient; nothing is updated in that case.
template <typename T>
void adam_step(ParamSet<T>& params, AdamConfig& cfg) {
  cfg.validate();
  double sq_norm = 0.0;
  for (const auto& s : params.slots()) {
    if (!s.trainable) continue;
    for (T g : s.grad.data()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter '" + s.name + "'");
      sq_norm += static_cast<double>(g) * static_cast<double>(g);
    }
  }
  T clip_scale{1};
  if (cfg.clip_norm > 0.0 && sq_norm > cfg.clip_norm * cfg.clip_norm)
    clip_scale = static_cast<T>(cfg.clip_norm / std::sqrt(sq_norm));

  ++cfg.step_count;
  const auto t = static_cast<double>(cfg.step_count);
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T bc1 = static_cast<T>(1.0 - std::pow(cfg.beta1, t));
  const T bc2 = static_cast<T>(1.0 - std::pow(cfg.beta2, t));
  const T lr = static_cast<T>(cfg.learning_rate), eps = static_cast<T>(cfg.epsilon);

  for (auto& s : params.slots()) {
    if (!s.trainable) continue;
    auto& theta = s.value.data();
    auto& m = s.adam_m.data();
    auto& v = s.adam_v.data();
    const auto& grad = s.grad.data();
    for (std::size_t k = 0; k < theta.size(); ++k) {
      const T g = grad[k] * clip_scale;
      m[k] = b1 * m[k] + (T{1} - b1) * g;
      v[k] = b2 * v[k] + (T{1} - b2) * g * g;
      const T m_hat = m[k] / bc1;
      const T v_hat = v[k] / bc2;
      theta[k] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
  params.zero_grad();
}

// ---------------------------------------------------------------------------
// finite-difference gradient check

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string slot;         // where the maximum occurred
  std::size_t index = 0;    // flat index within that slot
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;  // number of scalars compared
};

/// Relative error used throughout the verification suite. Gradients
/// smaller than `floor` in magnitude are compared absolutely.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

/// Compares the analytic gradients already stored in `params` with central
/// differences of `loss` for every trainable scalar. `loss` must evaluate
/// the forward pass only and read the current parameter values.
template <typename T>
GradCheckResult finite_diff_check(const std::function<double()>& loss, ParamSet<T>& params,
                                  double h) {
  if (!(h > 0.0)) throw ConfigError("finite_diff_check: step must be positive");
  const double base = loss();
  const double again = loss();
  if (base != again)
    throw NumericError("finite_diff_check: forward pass is not deterministic");

  GradCheckResult res;
  for (auto& s : params.slots()) {
    if (!s.trainable) continue;
    for (std::size_t k = 0; k < s.value.size(); ++k) {
      const T original = s.value[k];
      s.value[k] = static_cast<T>(original + h);
      const double up = loss();
      s.value[k] = static_cast<T>(original - h);
      const double down = loss();
      s.value[k] = original;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = static_cast<double>(s.grad[k]);
      const double err = relative_error(analytic, numeric);
      ++res.checked;
      if (res.slot.empty() || err > res.max_rel_error) {
        res.max_rel_error = err;
        res.slot = s.name;
        res.index = k;
        res.analytic = analytic;
        res.numeric = numeric;
      }
    }
  }
  return res;
}

}  // namespace patr
