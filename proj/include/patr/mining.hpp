#pragma once

// In-batch hard negative selection. For every positive image in a batch,
// candidates are the other images whose texts do not lexically overlap the
// positive's text; the n nearest survivors (squared image-image distance)
// become its negatives.

#include <algorithm>
#include <cstddef>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "patr/error.hpp"
#include "patr/parallel.hpp"
#include "patr/tensor.hpp"

namespace patr {

enum class FilterMode {
  AnyOverlap,  // drop candidates sharing any content word
  AllOverlap,  // drop candidates containing every content word (harder negatives)
  Unfiltered,  // fallback only: nearest distinct image, no lexical filter
};

inline const char* to_string(FilterMode m) {
  switch (m) {
    case FilterMode::AnyOverlap: return "any";
    case FilterMode::AllOverlap: return "all";
    case FilterMode::Unfiltered: return "unfiltered";
  }
  return "?";
}

inline FilterMode parse_filter_mode(const std::string& s) {
  if (s == "any") return FilterMode::AnyOverlap;
  if (s == "all") return FilterMode::AllOverlap;
  throw ConfigError("unknown mining mode '" + s + "' (expected any or all)");
}

struct BatchSample {
  std::size_t index = 0;
  std::string image_id;
  std::span<const float> image_vec;
  std::set<std::string> content_words;
};

struct MinedNegative {
  std::size_t index;
  double sq_dist;

  friend bool operator==(const MinedNegative&, const MinedNegative&) = default;
};

struct MinedEntry {
  std::size_t positive = 0;
  std::vector<MinedNegative> negatives;  // ascending distance, ties by index
  FilterMode mode_used = FilterMode::AnyOverlap;

  friend bool operator==(const MinedEntry&, const MinedEntry&) = default;
};

using MinedTriplets = std::vector<MinedEntry>;

/// Squared distances between all image vectors, accumulated in double.
inline Tensor<double> pairwise_sq_dist(const std::vector<BatchSample>& batch) {
  const std::size_t B = batch.size();
  if (B == 0) throw ConfigError("pairwise_sq_dist: empty batch");
  const std::size_t D = batch[0].image_vec.size();
  for (const auto& s : batch)
    if (s.image_vec.size() != D)
      throw ConfigError("pairwise_sq_dist: sample " + std::to_string(s.index) + " has dimension " +
                        std::to_string(s.image_vec.size()) + ", expected " + std::to_string(D));
  Tensor<double> M({B, B});
  for (std::size_t i = 0; i < B; ++i) {
    for (std::size_t j = i + 1; j < B; ++j) {
      double acc = 0.0;
      const auto a = batch[i].image_vec, b = batch[j].image_vec;
      for (std::size_t k = 0; k < D; ++k) {
        const double d = static_cast<double>(a[k]) - static_cast<double>(b[k]);
        acc += d * d;
      }
      M(i, j) = acc;
      M(j, i) = acc;
    }
  }
  return M;
}

/// True when `candidate` may serve as a negative for `positive`.
/// An empty positive word set never filters anything.
inline bool lexical_filter(const std::set<std::string>& positive,
                           const std::set<std::string>& candidate, FilterMode mode) {
  if (positive.empty() || mode == FilterMode::Unfiltered) return true;
  if (mode == FilterMode::AnyOverlap) {
    for (const auto& w : positive)
      if (candidate.count(w)) return false;
    return true;
  }
  return !std::includes(candidate.begin(), candidate.end(), positive.begin(), positive.end());
}

namespace detail {

inline std::vector<MinedNegative> nearest_survivors(const std::vector<BatchSample>& batch,
                                                    const Tensor<double>& dist, std::size_t i,
                                                    std::size_t n, FilterMode mode) {
  std::vector<MinedNegative> cands;
  for (std::size_t j = 0; j < batch.size(); ++j) {
    if (j == i || batch[j].image_id == batch[i].image_id) continue;
    if (!lexical_filter(batch[i].content_words, batch[j].content_words, mode)) continue;
    cands.push_back({j, dist(i, j)});
  }
  const std::size_t take = std::min(n, cands.size());
  auto closer = [](const MinedNegative& a, const MinedNegative& b) {
    return a.sq_dist < b.sq_dist || (a.sq_dist == b.sq_dist && a.index < b.index);
  };
  std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(take), cands.end(),
                    closer);
  cands.resize(take);
  return cands;
}

}  // namespace detail

/// Selects up to n negatives per positive. If the requested filter leaves
/// nothing, any-overlap falls back to all-overlap, and then to the single
/// nearest distinct image (mode_used = Unfiltered).
inline MinedTriplets mine_negatives(const std::vector<BatchSample>& batch, std::size_t n,
                                    FilterMode mode) {
  if (batch.size() < 2) throw ConfigError("mine_negatives: batch needs at least 2 samples");
  if (n == 0) throw ConfigError("mine_negatives: n must be at least 1");
  if (mode == FilterMode::Unfiltered)
    throw ConfigError("mine_negatives: mode must be any or all");
  const Tensor<double> dist = pairwise_sq_dist(batch);

  MinedTriplets out(batch.size());
  parallel_for(batch.size(), [&](std::size_t i) {
    MinedEntry e;
    e.positive = i;
    e.mode_used = mode;
    e.negatives = detail::nearest_survivors(batch, dist, i, n, mode);
    if (e.negatives.empty() && mode == FilterMode::AnyOverlap) {
      e.mode_used = FilterMode::AllOverlap;
      e.negatives = detail::nearest_survivors(batch, dist, i, n, FilterMode::AllOverlap);
    }
    if (e.negatives.empty()) {
      e.mode_used = FilterMode::Unfiltered;
      e.negatives = detail::nearest_survivors(batch, dist, i, 1, FilterMode::Unfiltered);
    }
    out[i] = std::move(e);
  });
  return out;
}

/// Negative index lists in the shape batch_loss expects.
inline std::vector<std::vector<std::size_t>> negative_indices(const MinedTriplets& mined) {
  std::vector<std::vector<std::size_t>> out;
  out.reserve(mined.size());
  for (const auto& e : mined) {
    auto& v = out.emplace_back();
    for (const auto& n : e.negatives) v.push_back(n.index);
  }
  return out;
}

}  // namespace patr
