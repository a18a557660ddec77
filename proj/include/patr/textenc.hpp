#pragma once

// Text side of the shared space: tokenizer, frozen word-vector table and
// the stacked-LSTM encoder with a linear projection into image-feature
// space.

#include <cmath>
#include <cstddef>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "patr/diffcore.hpp"
#include "patr/error.hpp"
#include "patr/parallel.hpp"
#include "patr/random.hpp"
#include "patr/tensor.hpp"

namespace patr {

// ---------------------------------------------------------------------------
// tokenization

using StopWords = std::unordered_set<std::string>;

/// Built-in English stop-word list; identical to data/stopwords_en.txt.
inline const std::vector<std::string_view>& default_stopword_list() {
  static const std::vector<std::string_view> words = {
      "a",       "about",   "above",   "after",   "again",   "against", "all",     "am",
      "an",      "and",     "any",     "are",     "as",      "at",      "be",      "because",
      "been",    "before",  "being",   "below",   "between", "both",    "but",     "by",
      "can",     "could",   "did",     "do",      "does",    "doing",   "down",    "during",
      "each",    "few",     "for",     "from",    "further", "had",     "has",     "have",
      "having",  "he",      "her",     "here",    "hers",    "herself", "him",     "himself",
      "his",     "how",     "i",       "if",      "in",      "into",    "is",      "it",
      "its",     "itself",  "just",    "me",      "more",    "most",    "my",      "myself",
      "no",      "nor",     "not",     "now",     "of",      "off",     "on",      "once",
      "only",    "or",      "other",   "our",     "ours",    "ourselves", "out",   "over",
      "own",     "s",       "same",    "she",     "should",  "so",      "some",    "such",
      "t",       "than",    "that",    "the",     "their",   "theirs",  "them",    "themselves",
      "then",    "there",   "these",   "they",    "this",    "those",   "through", "to",
      "too",     "under",   "until",   "up",      "very",    "was",     "we",      "were",
      "what",    "when",    "where",   "which",   "while",   "who",     "whom",    "why",
      "will",    "with",    "would",   "you",     "your",    "yours",   "yourself", "yourselves",
  };
  return words;
}

inline StopWords default_stopwords() {
  StopWords s;
  for (auto w : default_stopword_list()) s.emplace(w);
  return s;
}

struct TokenSequence {
  std::vector<std::string> tokens;
  std::set<std::string> content_words;  // tokens minus stop words
};

inline bool is_word_byte(unsigned char ch) {
  // Non-ASCII bytes (UTF-8 sequences) are kept inside words.
  return ch >= 0x80 || (ch >= '0' && ch <= '9') || (ch >= 'a' && ch <= 'z') ||
         (ch >= 'A' && ch <= 'Z');
}

/// Lowercases, splits on runs of non-alphanumeric characters and keeps the
/// first `max_seq_len` tokens. Content words are computed after truncation.
inline TokenSequence tokenize(std::string_view text, std::size_t max_seq_len,
                              const StopWords& stopwords) {
  if (max_seq_len == 0) throw ConfigError("tokenize: max_seq_len must be at least 1");
  TokenSequence seq;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty() && seq.tokens.size() < max_seq_len) seq.tokens.push_back(cur);
    cur.clear();
  };
  for (char raw : text) {
    const auto ch = static_cast<unsigned char>(raw);
    if (is_word_byte(ch)) {
      cur.push_back(ch >= 'A' && ch <= 'Z' ? static_cast<char>(ch - 'A' + 'a') : raw);
    } else {
      flush();
    }
  }
  flush();
  if (seq.tokens.empty()) throw EmptyTextError("text has no tokens: \"" + std::string(text) + "\"");
  for (const auto& t : seq.tokens)
    if (!stopwords.count(t)) seq.content_words.insert(t);
  return seq;
}

inline TokenSequence tokenize(std::string_view text, std::size_t max_seq_len) {
  static const StopWords defaults = default_stopwords();
  return tokenize(text, max_seq_len, defaults);
}

// ---------------------------------------------------------------------------
// word vectors

/// Frozen vocabulary -> vector table. Rows are in file order.
template <typename T>
class WordVectorTable {
 public:
  WordVectorTable() = default;
  explicit WordVectorTable(std::size_t dim) : dim_(dim) {
    if (dim == 0) throw ConfigError("word vector dimension must be positive");
  }

  /// Appends a word. Returns false (and ignores the vector) for a duplicate.
  bool add(const std::string& word, std::span<const T> vec) {
    if (vec.size() != dim_)
      throw ConfigError("word '" + word + "' has " + std::to_string(vec.size()) +
                        " components, table dimension is " + std::to_string(dim_));
    if (index_.count(word)) return false;
    index_.emplace(word, words_.size());
    words_.push_back(word);
    data_.insert(data_.end(), vec.begin(), vec.end());
    return true;
  }

  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return words_.size(); }
  const std::vector<std::string>& words() const noexcept { return words_; }
  const std::vector<T>& data() const noexcept { return data_; }

  std::optional<std::size_t> find(const std::string& word) const {
    auto it = index_.find(word);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::span<const T> row(std::size_t r) const { return {data_.data() + r * dim_, dim_}; }

  template <typename U>
  WordVectorTable<U> cast() const {
    WordVectorTable<U> out(dim_);
    std::vector<U> buf(dim_);
    for (std::size_t r = 0; r < words_.size(); ++r) {
      const auto src = row(r);
      std::copy(src.begin(), src.end(), buf.begin());
      out.add(words_[r], buf);
    }
    return out;
  }

  friend bool operator==(const WordVectorTable& a, const WordVectorTable& b) {
    return a.dim_ == b.dim_ && a.words_ == b.words_ && a.data_ == b.data_;
  }

 private:
  std::size_t dim_ = 0;
  std::vector<std::string> words_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<T> data_;
};

/// One row per token; out-of-vocabulary tokens map to zero rows.
template <typename T>
Tensor<T> lookup(const TokenSequence& seq, const WordVectorTable<T>& table) {
  Tensor<T> out({seq.tokens.size(), table.dim()});
  for (std::size_t t = 0; t < seq.tokens.size(); ++t) {
    if (auto r = table.find(seq.tokens[t])) {
      const auto src = table.row(*r);
      std::copy(src.begin(), src.end(), out.row(t).begin());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// encoder

struct EncoderConfig {
  std::size_t word_dim = 300;
  std::size_t hidden_size = 256;
  std::size_t num_layers = 5;
  double dropout_rate = 0.25;
  std::size_t max_seq_len = 18;    // caption-style texts
  std::size_t max_query_len = 15;  // click-style queries
  std::size_t output_dim = 2048;

  void validate() const {
    if (word_dim == 0) throw ConfigError("encoder.word_dim must be positive");
    if (hidden_size == 0) throw ConfigError("encoder.hidden_size must be positive");
    if (num_layers == 0) throw ConfigError("encoder.num_layers must be at least 1");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
      throw ConfigError("encoder.dropout_rate must lie in [0, 1)");
    if (max_seq_len == 0 || max_query_len == 0)
      throw ConfigError("encoder sequence limits must be at least 1");
    if (output_dim == 0) throw ConfigError("encoder.output_dim must be positive");
  }

  std::size_t layer_input(std::size_t layer) const { return layer == 0 ? word_dim : hidden_size; }

  std::size_t param_count() const {
    const std::size_t H = hidden_size;
    std::size_t n = 0;
    for (std::size_t l = 0; l < num_layers; ++l) n += 4 * (layer_input(l) * H + H * H + H);
    return n + H * output_dim + output_dim;
  }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

inline std::string lstm_param_name(std::size_t layer, const char* which) {
  return "lstm." + std::to_string(layer) + "." + which;
}

/// Creates the trainable tensors with the default initialization:
/// LSTM and projection weights uniform in +-1/sqrt(H), forget-gate bias 1.
template <typename T>
ParamSet<T> init_encoder_params(const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t H = cfg.hidden_size;
  const double bound = 1.0 / std::sqrt(static_cast<double>(H));
  auto uniform = [&](Shape shape) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
    return t;
  };
  ParamSet<T> params;
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    params.add(lstm_param_name(l, "W"), uniform({cfg.layer_input(l), 4 * H}));
    params.add(lstm_param_name(l, "U"), uniform({H, 4 * H}));
    Tensor<T> b({4 * H});
    for (std::size_t k = 0; k < H; ++k) b[gate_offset(Gate::Forget, H) + k] = T{1};
    params.add(lstm_param_name(l, "b"), std::move(b));
  }
  params.add("proj.W", uniform({H, cfg.output_dim}));
  params.add("proj.b", Tensor<T>({cfg.output_dim}));
  return params;
}

/// Throws ConfigError unless `params` holds exactly the tensors `cfg` implies.
template <typename T>
void check_encoder_params(const ParamSet<T>& params, const EncoderConfig& cfg) {
  cfg.validate();
  const std::size_t H = cfg.hidden_size;
  if (params.size() != 3 * cfg.num_layers + 2)
    throw ConfigError("encoder has " + std::to_string(params.size()) + " tensors, config implies " +
                      std::to_string(3 * cfg.num_layers + 2));
  auto expect = [&](const std::string& name, const Shape& shape) {
    if (!params.contains(name)) throw ConfigError("missing encoder parameter '" + name + "'");
    require_shape(params.at(name).value.shape(), shape, name.c_str());
  };
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    expect(lstm_param_name(l, "W"), {cfg.layer_input(l), 4 * H});
    expect(lstm_param_name(l, "U"), {H, 4 * H});
    expect(lstm_param_name(l, "b"), {4 * H});
  }
  expect("proj.W", {H, cfg.output_dim});
  expect("proj.b", {cfg.output_dim});
}

/// What a training-mode encode must remember for its backward pass.
template <typename T>
struct EncodeTrace {
  std::vector<std::vector<LstmCache<T>>> cells;  // [layer][time]
  std::vector<DropoutMask<T>> masks;             // one per non-top layer
  Tensor<T> h_last;                              // [1 x H]
};

/// Stacked LSTM + linear head. Word vectors are frozen and live outside the
/// trainable parameter set.
template <typename T>
class TextEncoder {
 public:
  TextEncoder() = default;
  TextEncoder(EncoderConfig cfg, WordVectorTable<T> words, ParamSet<T> params)
      : cfg_(cfg), words_(std::move(words)), params_(std::move(params)) {
    if (words_.dim() != cfg_.word_dim)
      throw ConfigError("word vectors have dimension " + std::to_string(words_.dim()) +
                        ", encoder.word_dim is " + std::to_string(cfg_.word_dim));
    check_encoder_params(params_, cfg_);
  }

  static TextEncoder initialize(const EncoderConfig& cfg, WordVectorTable<T> words, Rng& rng) {
    auto params = init_encoder_params<T>(cfg, rng);
    return TextEncoder(cfg, std::move(words), std::move(params));
  }

  const EncoderConfig& config() const noexcept { return cfg_; }
  const WordVectorTable<T>& words() const noexcept { return words_; }
  ParamSet<T>& params() noexcept { return params_; }
  const ParamSet<T>& params() const noexcept { return params_; }

  /// Forward pass for one sequence. Dropout is applied between layers in
  /// training mode only; `trace` is filled when given.
  Tensor<T> encode(const TokenSequence& seq, bool training, Rng& rng,
                   EncodeTrace<T>* trace = nullptr) const {
    const std::size_t H = cfg_.hidden_size;
    const std::size_t len = seq.tokens.size();
    if (len == 0) throw ConfigError("encode: empty token sequence");
    if (trace) {
      trace->cells.assign(cfg_.num_layers, {});
      trace->masks.assign(cfg_.num_layers > 0 ? cfg_.num_layers - 1 : 0, {});
    }

    Tensor<T> input = lookup(seq, words_);
    for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
      const LstmWeights<T> w = layer_weights(l);
      Tensor<T> h({1, H}), c({1, H});
      Tensor<T> outputs({len, H});
      Tensor<T> x_t({1, input.cols()});
      for (std::size_t t = 0; t < len; ++t) {
        const auto src = input.row(t);
        std::copy(src.begin(), src.end(), x_t.row(0).begin());
        LstmCache<T>* cache = nullptr;
        if (trace) cache = &trace->cells[l].emplace_back();
        auto state = lstm_cell(x_t, h, c, w, cache);
        h = std::move(state.h);
        c = std::move(state.c);
        std::copy(h.data().begin(), h.data().end(), outputs.row(t).begin());
      }
      if (l + 1 < cfg_.num_layers) {
        input = dropout(outputs, cfg_.dropout_rate, rng, training, trace ? &trace->masks[l] : nullptr);
      } else {
        if (trace) trace->h_last = h;
        Tensor<T> y = affine(h, params_.at("proj.W").value, params_.at("proj.b").value);
        return Tensor<T>({cfg_.output_dim}, std::move(y.data()));
      }
    }
    return {};  // unreachable: num_layers >= 1
  }

  /// Accumulates parameter gradients for d(loss)/d(encode output) = d_out.
  void backward(const EncodeTrace<T>& trace, std::span<const T> d_out) {
    const std::size_t H = cfg_.hidden_size;
    if (d_out.size() != cfg_.output_dim) throw ConfigError("encoder backward: bad gradient size");
    Tensor<T> dy({1, cfg_.output_dim}, std::vector<T>(d_out.begin(), d_out.end()));
    Tensor<T> dh_last({1, H});
    auto& pW = params_.at("proj.W");
    auto& pb = params_.at("proj.b");
    affine_backward(dy, trace.h_last, pW.value, &dh_last, &pW.grad, &pb.grad);

    const std::size_t len = trace.cells.back().size();
    Tensor<T> d_outputs({len, H});  // gradient w.r.t. current layer's output sequence
    std::copy(dh_last.data().begin(), dh_last.data().end(), d_outputs.row(len - 1).begin());

    for (std::size_t l = cfg_.num_layers; l-- > 0;) {
      const LstmWeights<T> w = layer_weights(l);
      LstmGrads<T> g{params_.at(lstm_param_name(l, "W")).grad,
                     params_.at(lstm_param_name(l, "U")).grad,
                     params_.at(lstm_param_name(l, "b")).grad};
      Tensor<T> dh_next({1, H}), dc_next({1, H}), dh({1, H});
      Tensor<T> d_inputs({len, w.input()});
      for (std::size_t t = len; t-- > 0;) {
        const auto src = d_outputs.row(t);
        for (std::size_t k = 0; k < H; ++k) dh[k] = src[k] + dh_next[k];
        auto grads = lstm_cell_backward(dh, dc_next, trace.cells[l][t], w, g);
        std::copy(grads.dx.data().begin(), grads.dx.data().end(), d_inputs.row(t).begin());
        dh_next = std::move(grads.dh_prev);
        dc_next = std::move(grads.dc_prev);
      }
      if (l == 0) break;  // word vectors are frozen
      dropout_backward(d_inputs, trace.masks[l - 1]);
      d_outputs = std::move(d_inputs);
    }
  }

  /// Encodes every sequence into one row of a [B x output_dim] matrix.
  /// Training mode runs sequentially so the dropout stream is consumed in
  /// sample order; inference may run in parallel.
  Tensor<T> encode_batch(const std::vector<TokenSequence>& seqs, bool training, Rng& rng) const {
    if (seqs.empty()) throw ConfigError("encode_batch: empty batch");
    Tensor<T> out({seqs.size(), cfg_.output_dim});
    auto run_one = [&](std::size_t i, Rng& r) {
      try {
        const auto y = encode(seqs[i], training, r);
        std::copy(y.data().begin(), y.data().end(), out.row(i).begin());
      } catch (const ConfigError& e) {
        throw ConfigError("sample " + std::to_string(i) + ": " + e.what());
      }
    };
    if (training && cfg_.dropout_rate > 0.0) {
      for (std::size_t i = 0; i < seqs.size(); ++i) run_one(i, rng);
    } else {
      parallel_for(seqs.size(), [&](std::size_t i) {
        Rng unused;
        run_one(i, unused);
      });
    }
    return out;
  }

 private:
  LstmWeights<T> layer_weights(std::size_t l) const {
    return {params_.at(lstm_param_name(l, "W")).value, params_.at(lstm_param_name(l, "U")).value,
            params_.at(lstm_param_name(l, "b")).value};
  }

  EncoderConfig cfg_;
  WordVectorTable<T> words_;
  ParamSet<T> params_;
};

}  // namespace patr
