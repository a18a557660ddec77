#pragma once

// Exact nearest-neighbour retrieval in the shared space and the two
// ranking metrics: R@K (ground-truth containment) and AP@R averaged into
// mAP@R (label-based relevance).

#include <algorithm>
#include <cstddef>
#include <cstdio>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "patr/dataio.hpp"
#include "patr/error.hpp"
#include "patr/parallel.hpp"
#include "patr/textenc.hpp"

namespace patr {

/// Row-major embedding matrix with one id per row.
class RetrievalIndex {
 public:
  RetrievalIndex() = default;
  explicit RetrievalIndex(std::size_t dim) : dim_(dim) {}

  static RetrievalIndex from_store(const FeatureStore& store) {
    RetrievalIndex idx(store.dim());
    for (std::size_t r = 0; r < store.size(); ++r) idx.add(store.ids()[r], store.row(r));
    return idx;
  }

  void add(const std::string& id, std::span<const float> vec) {
    if (vec.size() != dim_)
      throw ConfigError("index entry '" + id + "' has dimension " + std::to_string(vec.size()) +
                        ", index dimension is " + std::to_string(dim_));
    if (!seen_.insert(id).second) throw DataError("duplicate index id '" + id + "'");
    ids_.push_back(id);
    data_.insert(data_.end(), vec.begin(), vec.end());
  }

  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return ids_.size(); }
  const std::vector<std::string>& ids() const noexcept { return ids_; }
  std::span<const float> row(std::size_t r) const { return {data_.data() + r * dim_, dim_}; }

 private:
  std::size_t dim_ = 0;
  std::vector<std::string> ids_;
  std::unordered_set<std::string> seen_;
  std::vector<float> data_;
};

struct Hit {
  std::string id;
  double sq_dist;

  friend bool operator==(const Hit&, const Hit&) = default;
};

struct TopK {
  std::vector<Hit> hits;
  bool truncated = false;  // k exceeded the index size
};

inline double sq_dist_f64(std::span<const float> a, std::span<const float> b) {
  double acc = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double d = static_cast<double>(a[k]) - static_cast<double>(b[k]);
    acc += d * d;
  }
  return acc;
}

/// The k nearest rows by squared distance; ties keep insertion order.
inline TopK retrieve_topk(std::span<const float> query, const RetrievalIndex& index, std::size_t k) {
  if (k == 0) throw ConfigError("retrieve_topk: k must be at least 1");
  if (query.size() != index.dim())
    throw ConfigError("retrieve_topk: query dimension " + std::to_string(query.size()) +
                      " does not match index dimension " + std::to_string(index.dim()));
  struct Cand {
    double d;
    std::size_t row;
  };
  std::vector<Cand> cands(index.size());
  for (std::size_t r = 0; r < index.size(); ++r) cands[r] = {sq_dist_f64(query, index.row(r)), r};
  TopK out;
  out.truncated = k > index.size();
  const std::size_t take = std::min(k, index.size());
  std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(take), cands.end(),
                    [](const Cand& a, const Cand& b) { return a.d < b.d || (a.d == b.d && a.row < b.row); });
  out.hits.reserve(take);
  for (std::size_t i = 0; i < take; ++i) out.hits.push_back({index.ids()[cands[i].row], cands[i].d});
  return out;
}

struct Ranking {
  std::string query;
  std::vector<std::string> ids;  // best first
};

using GroundTruth = std::unordered_map<std::string, std::unordered_set<std::string>>;

/// Fraction of queries with a ground-truth id among their first k results.
inline double recall_at_k(const std::vector<Ranking>& rankings, const GroundTruth& truth, std::size_t k) {
  if (k == 0) throw ConfigError("recall_at_k: k must be at least 1");
  if (rankings.empty()) throw ConfigError("recall_at_k: no queries");
  std::size_t hits = 0;
  for (const auto& r : rankings) {
    auto it = truth.find(r.query);
    if (it == truth.end() || it->second.empty())
      throw DataError("no ground truth for query '" + r.query + "'");
    const std::size_t n = std::min(k, r.ids.size());
    for (std::size_t i = 0; i < n; ++i) {
      if (it->second.count(r.ids[i])) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(rankings.size());
}

/// AP over the first R results: (1/M) * sum_r p(r) * rel(r), with M the
/// number of relevant items within the top R (0 when M = 0).
inline double average_precision(const std::vector<std::string>& ranking, const LabelMap& labels,
                                const std::string& query_label, std::size_t R) {
  if (R == 0) throw ConfigError("average_precision: R must be at least 1");
  const std::size_t n = std::min(R, ranking.size());
  std::size_t relevant = 0;
  double sum = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    auto it = labels.find(ranking[r]);
    if (it == labels.end()) throw DataError("no label for id '" + ranking[r] + "'");
    if (it->second == query_label) {
      ++relevant;
      sum += static_cast<double>(relevant) / static_cast<double>(r + 1);
    }
  }
  return relevant == 0 ? 0.0 : sum / static_cast<double>(relevant);
}

enum class Direction { Txt2Img, Img2Txt };

inline const char* to_string(Direction d) { return d == Direction::Txt2Img ? "txt2img" : "img2txt"; }

inline Direction parse_direction(const std::string& s) {
  if (s == "txt2img") return Direction::Txt2Img;
  if (s == "img2txt") return Direction::Img2Txt;
  throw ConfigError("unknown direction '" + s + "' (expected txt2img or img2txt)");
}

struct EvalReport {
  std::string dataset;
  Direction direction = Direction::Txt2Img;
  std::vector<std::pair<std::size_t, double>> recall;  // (K, R@K)
  std::optional<double> mean_ap;
  std::size_t map_r = 50;
  std::size_t queries = 0;

  std::optional<double> recall_at(std::size_t k) const {
    for (const auto& [kk, v] : recall)
      if (kk == k) return v;
    return std::nullopt;
  }
};

/// Unweighted mean of two reports over the same K list.
inline EvalReport average_reports(const EvalReport& a, const EvalReport& b, std::string name = "average") {
  if (a.recall.size() != b.recall.size()) throw ConfigError("average_reports: different K lists");
  EvalReport out;
  out.dataset = std::move(name);
  out.direction = a.direction;
  out.map_r = a.map_r;
  out.queries = a.queries + b.queries;
  for (std::size_t i = 0; i < a.recall.size(); ++i) {
    if (a.recall[i].first != b.recall[i].first) throw ConfigError("average_reports: different K lists");
    out.recall.emplace_back(a.recall[i].first, (a.recall[i].second + b.recall[i].second) / 2.0);
  }
  if (a.mean_ap && b.mean_ap) out.mean_ap = (*a.mean_ap + *b.mean_ap) / 2.0;
  return out;
}

struct EvalOptions {
  Direction direction = Direction::Txt2Img;
  std::vector<std::size_t> ks{1, 10, 20};
  std::size_t map_r = 50;
  std::string dataset = "pairs";
  std::size_t max_len = 0;  // token limit; 0 = encoder.max_seq_len
};

/// Rankings produced by `evaluate`, for auditing and re-computation.
struct EvalRankings {
  std::vector<Ranking> rankings;
  GroundTruth truth;
  std::vector<std::string> query_labels;  // empty without labels
  LabelMap item_labels;
};

/// Text gallery ids for image-to-text retrieval: "<image_id>#<pair index>".
inline std::string text_item_id(const PairDataset& pairs, std::size_t i) {
  return pairs.samples[i].image_id + "#" + std::to_string(i);
}

/// Encodes every pair text in inference mode.
template <typename T>
std::vector<std::vector<float>> encode_texts(const TextEncoder<T>& encoder, const std::vector<std::string>& texts,
                                             std::size_t max_len) {
  std::vector<TokenSequence> seqs;
  seqs.reserve(texts.size());
  for (std::size_t i = 0; i < texts.size(); ++i) {
    try {
      seqs.push_back(tokenize(texts[i], max_len));
    } catch (const EmptyTextError& e) {
      throw DataError("text " + std::to_string(i) + ": " + e.what());
    }
  }
  Rng unused;
  const auto mat = encoder.encode_batch(seqs, false, unused);
  std::vector<std::vector<float>> out(texts.size());
  for (std::size_t i = 0; i < texts.size(); ++i) {
    const auto r = mat.row(i);
    out[i].assign(r.begin(), r.end());
  }
  return out;
}

/// Runs retrieval over a pair set and computes R@K (and mAP@R when labels
/// are given). Txt2Img: queries are pair texts, the gallery is the set of
/// distinct images the pairs reference. Img2Txt: queries are those images,
/// the gallery holds one encoded entry per pair text.
template <typename T>
EvalReport evaluate(const TextEncoder<T>& encoder, const PairDataset& pairs, const FeatureStore& store,
                    const LabelMap* labels, const EvalOptions& opt, EvalRankings* dump = nullptr) {
  if (pairs.samples.empty()) throw ConfigError("evaluate: no pairs");
  if (opt.ks.empty()) throw ConfigError("evaluate: no K values");
  if (encoder.config().output_dim != store.dim())
    throw ConfigError("encoder output_dim " + std::to_string(encoder.config().output_dim) +
                      " does not match feature dimension " + std::to_string(store.dim()));
  const std::size_t max_len = opt.max_len ? opt.max_len : encoder.config().max_seq_len;

  std::vector<std::string> texts;
  std::vector<std::string> images;  // distinct, first-appearance order
  std::unordered_set<std::string> seen;
  for (const auto& s : pairs.samples) {
    texts.push_back(s.text);
    if (!store.contains(s.image_id)) throw DataError("image id '" + s.image_id + "' not in the feature store");
    if (seen.insert(s.image_id).second) images.push_back(s.image_id);
  }
  const auto text_vecs = encode_texts(encoder, texts, max_len);

  EvalRankings local;
  EvalRankings& out = dump ? *dump : local;
  out = {};
  std::vector<std::span<const float>> queries;
  RetrievalIndex index(store.dim());
  if (opt.direction == Direction::Txt2Img) {
    for (const auto& id : images) index.add(id, store.at(id));
    for (std::size_t i = 0; i < pairs.samples.size(); ++i) {
      const auto qid = "q" + std::to_string(i);
      out.rankings.push_back({qid, {}});
      out.truth[qid].insert(pairs.samples[i].image_id);
      queries.emplace_back(text_vecs[i]);
    }
  } else {
    for (std::size_t i = 0; i < pairs.samples.size(); ++i) index.add(text_item_id(pairs, i), text_vecs[i]);
    std::unordered_map<std::string, std::size_t> qpos;
    for (const auto& id : images) {
      qpos[id] = out.rankings.size();
      out.rankings.push_back({id, {}});
      queries.push_back(store.at(id));
    }
    for (std::size_t i = 0; i < pairs.samples.size(); ++i)
      out.truth[pairs.samples[i].image_id].insert(text_item_id(pairs, i));
  }

  std::size_t depth = *std::max_element(opt.ks.begin(), opt.ks.end());
  if (labels) depth = std::max(depth, opt.map_r);
  parallel_for(out.rankings.size(), [&](std::size_t q) {
    auto top = retrieve_topk(queries[q], index, depth);
    for (auto& h : top.hits) out.rankings[q].ids.push_back(std::move(h.id));
  });

  EvalReport report;
  report.dataset = opt.dataset;
  report.direction = opt.direction;
  report.map_r = opt.map_r;
  report.queries = out.rankings.size();
  for (auto k : opt.ks) report.recall.emplace_back(k, recall_at_k(out.rankings, out.truth, k));

  if (labels) {
    auto label_of_image = [&](const std::string& id) -> const std::string& {
      auto it = labels->find(id);
      if (it == labels->end()) throw DataError("no label for image id '" + id + "'");
      return it->second;
    };
    // Text items inherit the label of their paired image.
    if (opt.direction == Direction::Txt2Img) {
      for (const auto& id : images) out.item_labels[id] = label_of_image(id);
      for (const auto& s : pairs.samples) out.query_labels.push_back(label_of_image(s.image_id));
    } else {
      for (std::size_t i = 0; i < pairs.samples.size(); ++i)
        out.item_labels[text_item_id(pairs, i)] = label_of_image(pairs.samples[i].image_id);
      for (const auto& id : images) out.query_labels.push_back(label_of_image(id));
    }
    double sum = 0.0;
    for (std::size_t q = 0; q < out.rankings.size(); ++q)
      sum += average_precision(out.rankings[q].ids, out.item_labels, out.query_labels[q], opt.map_r);
    report.mean_ap = sum / static_cast<double>(out.rankings.size());
  }
  return report;
}

inline std::string format_metric(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

/// Header plus one line per report; columns dataset, direction, R@K..., mAP@R.
inline std::string format_reports(const std::vector<EvalReport>& reports, char sep) {
  if (reports.empty()) return {};
  std::string out = "dataset";
  out += sep;
  out += "direction";
  for (const auto& [k, v] : reports.front().recall) out += sep + ("R@" + std::to_string(k));
  out += sep + ("mAP@" + std::to_string(reports.front().map_r));
  out += '\n';
  for (const auto& r : reports) {
    out += r.dataset;
    out += sep;
    out += to_string(r.direction);
    for (const auto& [k, v] : r.recall) out += sep + format_metric(v);
    out += sep;
    out += r.mean_ap ? format_metric(*r.mean_ap) : std::string("-");
    out += '\n';
  }
  return out;
}

}  // namespace patr
