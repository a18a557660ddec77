#pragma once

// Ranking losses on squared query-to-image distances.
//
//   PATR      L = s_p + sum_i max(0, eta - s_n[i])
//   Triplet   L = max(s_p - s_n + rho, 0)          (exactly one negative)
//   L2        L = s_p
//
// and the two-source combination (L_caption + L_click) / 2.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "patr/diffcore.hpp"
#include "patr/error.hpp"
#include "patr/tensor.hpp"

namespace patr {

enum class LossVariant { PATR, Triplet, L2 };

inline const char* to_string(LossVariant v) {
  switch (v) {
    case LossVariant::PATR: return "patr";
    case LossVariant::Triplet: return "triplet";
    case LossVariant::L2: return "l2";
  }
  return "?";
}

inline LossVariant parse_loss_variant(const std::string& s) {
  if (s == "patr" || s == "PATR") return LossVariant::PATR;
  if (s == "triplet" || s == "Triplet") return LossVariant::Triplet;
  if (s == "l2" || s == "L2") return LossVariant::L2;
  throw ConfigError("unknown loss variant '" + s + "' (expected patr, triplet or l2)");
}

struct LossConfig {
  LossVariant variant = LossVariant::PATR;
  double eta = 1.2;
  double rho = 0.5;
  std::size_t n_negatives = 3;

  void validate() const {
    if (!(eta > 0.0)) throw ConfigError("loss.eta must be positive");
    if (!(rho > 0.0)) throw ConfigError("loss.rho must be positive");
    if (n_negatives == 0) throw ConfigError("loss.n_negatives must be at least 1");
    if (variant == LossVariant::Triplet && n_negatives != 1)
      throw ConfigError("triplet loss takes exactly one negative (loss.n_negatives = 1)");
  }
};

template <typename T>
struct TripletDistances {
  T s_p{0};
  std::vector<T> s_n;
};

/// Loss value with its derivatives w.r.t. s_p and each s_n.
template <typename T>
struct LossValue {
  T value{0};
  T d_sp{0};
  std::vector<T> d_sn;
};

template <typename T>
LossValue<T> patr_with_grad(const TripletDistances<T>& d, T eta) {
  if (d.s_n.empty()) throw ConfigError("patr: needs at least one negative distance");
  LossValue<T> out{d.s_p, T{1}, std::vector<T>(d.s_n.size(), T{0})};
  for (std::size_t i = 0; i < d.s_n.size(); ++i) {
    if (d.s_n[i] < eta) {
      out.value += eta - d.s_n[i];
      out.d_sn[i] = T{-1};
    }
  }
  return out;
}

template <typename T>
T patr(const TripletDistances<T>& d, T eta) {
  return patr_with_grad(d, eta).value;
}

template <typename T>
LossValue<T> triplet_with_grad(const TripletDistances<T>& d, T rho) {
  if (d.s_n.size() != 1)
    throw ConfigError("triplet: expects exactly one negative, got " + std::to_string(d.s_n.size()));
  const T z = d.s_p - d.s_n[0] + rho;
  if (z > T{0}) return {z, T{1}, {T{-1}}};
  return {T{0}, T{0}, {T{0}}};
}

template <typename T>
T triplet(const TripletDistances<T>& d, T rho) {
  return triplet_with_grad(d, rho).value;
}

template <typename T>
LossValue<T> l2_with_grad(const TripletDistances<T>& d) {
  return {d.s_p, T{1}, std::vector<T>(d.s_n.size(), T{0})};
}

template <typename T>
T l2_baseline(const TripletDistances<T>& d) {
  return d.s_p;
}

template <typename T>
LossValue<T> sample_loss(const TripletDistances<T>& d, const LossConfig& cfg) {
  switch (cfg.variant) {
    case LossVariant::PATR: return patr_with_grad(d, static_cast<T>(cfg.eta));
    case LossVariant::Triplet: return triplet_with_grad(d, static_cast<T>(cfg.rho));
    case LossVariant::L2: return l2_with_grad(d);
  }
  throw ConfigError("unknown loss variant");
}

/// Mean per-sample loss over a batch.
///
/// Row i of `queries` is scored against row i of `images` (its positive)
/// and against the rows listed in `negatives[i]`. Image rows are constants.
/// When `d_queries` is given, d(mean loss)/d(queries) * `grad_scale` is
/// accumulated into it.
///
/// A sample with no mined negatives contributes its positive term only
/// (s_p for PATR and L2, 0 for Triplet).
template <typename T>
T batch_loss(const Tensor<T>& queries, const Tensor<T>& images,
             const std::vector<std::vector<std::size_t>>& negatives, const LossConfig& cfg,
             Tensor<T>* d_queries = nullptr, T grad_scale = T{1}) {
  cfg.validate();
  const std::size_t B = queries.rows();
  if (queries.empty() || B == 0) throw ConfigError("batch_loss: empty batch");
  if (images.rows() != B || negatives.size() != B)
    throw ConfigError("batch_loss: queries, positives and negative sets differ in batch size");
  if (images.cols() != queries.cols())
    throw ConfigError("batch_loss: query dim " + std::to_string(queries.cols()) +
                      " != image dim " + std::to_string(images.cols()));
  if (d_queries) require_shape(d_queries->shape(), queries.shape(), "batch_loss gradient");

  const T inv_b = T{1} / static_cast<T>(B);
  T total{0};
  for (std::size_t i = 0; i < B; ++i) {
    const auto q = queries.row(i);
    TripletDistances<T> d;
    d.s_p = squared_distance(q, images.row(i));
    for (auto j : negatives[i]) {
      if (j >= B) throw ConfigError("batch_loss: negative index out of range");
      d.s_n.push_back(squared_distance(q, images.row(j)));
    }
    LossValue<T> lv;
    if (d.s_n.empty() && cfg.variant != LossVariant::L2) {
      lv = cfg.variant == LossVariant::PATR ? LossValue<T>{d.s_p, T{1}, {}}
                                            : LossValue<T>{T{0}, T{0}, {}};
    } else {
      lv = sample_loss(d, cfg);
    }
    total += lv.value;
    if (d_queries) {
      auto dq = d_queries->row(i);
      const T scale = grad_scale * inv_b;
      squared_distance_backward(q, images.row(i), scale * lv.d_sp, dq, std::span<T>{});
      for (std::size_t k = 0; k < negatives[i].size(); ++k)
        if (lv.d_sn[k] != T{0})
          squared_distance_backward(q, images.row(negatives[i][k]), scale * lv.d_sn[k], dq,
                                    std::span<T>{});
    }
  }
  return total * inv_b;
}

template <typename T>
T multitask_combine(T loss_caption, T loss_click) {
  return (loss_caption + loss_click) / T{2};
}

}  // namespace patr
