#pragma once

// Multi-task training loop. Each step draws one caption batch and one
// click batch, mines in-batch negatives for both, and back-propagates the
// mean of the two batch losses through the text encoder. With no click
// dataset the step uses the caption batch alone.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <istream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "patr/dataio.hpp"
#include "patr/diffcore.hpp"
#include "patr/error.hpp"
#include "patr/loss.hpp"
#include "patr/mining.hpp"
#include "patr/random.hpp"
#include "patr/textenc.hpp"

namespace patr {

struct TrainConfig {
  std::size_t batch_size = 512;
  std::size_t epochs = 30;
  /// (start_epoch, learning_rate), start epochs strictly increasing from 0.
  std::vector<std::pair<std::size_t, double>> lr_schedule{{0, 1e-4}};
  LossConfig loss;
  FilterMode mining_mode = FilterMode::AnyOverlap;
  std::uint64_t seed = 0;
  EncoderConfig encoder;
  AdamConfig optimizer;

  void validate() const {
    if (batch_size < 2) throw ConfigError("batch_size must be at least 2");
    if (lr_schedule.empty() || lr_schedule.front().first != 0)
      throw ConfigError("lr_schedule must start at epoch 0");
    for (std::size_t i = 0; i < lr_schedule.size(); ++i) {
      if (!(lr_schedule[i].second > 0.0)) throw ConfigError("learning rates must be positive");
      if (i && lr_schedule[i].first <= lr_schedule[i - 1].first)
        throw ConfigError("lr_schedule epochs must be strictly increasing");
    }
    if (mining_mode == FilterMode::Unfiltered) throw ConfigError("mining.mode must be any or all");
    loss.validate();
    encoder.validate();
    optimizer.validate();
  }

  double learning_rate(std::size_t epoch) const {
    double lr = lr_schedule.front().second;
    for (const auto& [start, rate] : lr_schedule)
      if (epoch >= start) lr = rate;
    return lr;
  }
};

namespace detail {

inline std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  if (!io::parse_u64(v, out)) throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

inline double to_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (...) {
    used = 0;
  }
  if (used != v.size() || !std::isfinite(out))
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  return out;
}

/// "0:0.0005, 25:0.0001" or a single rate "0.0001".
inline std::vector<std::pair<std::size_t, double>> parse_schedule(const std::string& key,
                                                                  const std::string& v) {
  std::vector<std::pair<std::size_t, double>> out;
  for (auto part : io::split(v, ',')) {
    auto item = std::string(io::trim(part));
    const auto colon = item.find(':');
    if (colon == std::string::npos) {
      if (!out.empty()) throw ConfigError(key + ": expected 'epoch:rate' entries");
      out.emplace_back(0, to_double(key, item));
    } else {
      out.emplace_back(to_u64(key, std::string(io::trim(item.substr(0, colon)))),
                       to_double(key, std::string(io::trim(item.substr(colon + 1)))));
    }
  }
  return out;
}

}  // namespace detail

/// Applies one `key = value` setting. Unknown keys are errors.
inline void apply_config_key(TrainConfig& cfg, const std::string& key, const std::string& value) {
  using detail::to_double;
  using detail::to_u64;
  if (key == "batch_size") cfg.batch_size = to_u64(key, value);
  else if (key == "epochs") cfg.epochs = to_u64(key, value);
  else if (key == "seed") cfg.seed = to_u64(key, value);
  else if (key == "lr_schedule" || key == "learning_rate") cfg.lr_schedule = detail::parse_schedule(key, value);
  else if (key == "mining.mode") cfg.mining_mode = parse_filter_mode(value);
  else if (key == "loss.variant") cfg.loss.variant = parse_loss_variant(value);
  else if (key == "loss.eta") cfg.loss.eta = to_double(key, value);
  else if (key == "loss.rho") cfg.loss.rho = to_double(key, value);
  else if (key == "loss.n_negatives") cfg.loss.n_negatives = to_u64(key, value);
  else if (key == "encoder.word_dim") cfg.encoder.word_dim = to_u64(key, value);
  else if (key == "encoder.hidden_size") cfg.encoder.hidden_size = to_u64(key, value);
  else if (key == "encoder.num_layers") cfg.encoder.num_layers = to_u64(key, value);
  else if (key == "encoder.dropout_rate") cfg.encoder.dropout_rate = to_double(key, value);
  else if (key == "encoder.max_seq_len") cfg.encoder.max_seq_len = to_u64(key, value);
  else if (key == "encoder.max_query_len") cfg.encoder.max_query_len = to_u64(key, value);
  else if (key == "encoder.output_dim") cfg.encoder.output_dim = to_u64(key, value);
  else if (key == "optimizer.beta1") cfg.optimizer.beta1 = to_double(key, value);
  else if (key == "optimizer.beta2") cfg.optimizer.beta2 = to_double(key, value);
  else if (key == "optimizer.epsilon") cfg.optimizer.epsilon = to_double(key, value);
  else if (key == "optimizer.clip_norm") cfg.optimizer.clip_norm = to_double(key, value);
  else throw ConfigError("unknown config key '" + key + "'");
}

/// Reads a config file over the defaults. Keys not mentioned keep their
/// default; encoder.word_dim and encoder.output_dim are normally taken from
/// the word vectors and feature store instead.
inline TrainConfig parse_train_config(std::istream& in, const std::string& name = "<config>",
                                      std::vector<std::string>* keys_set = nullptr) {
  TrainConfig cfg;
  const auto kv = read_key_values(in, name);
  for (std::size_t i = 0; i < kv.entries.size(); ++i) {
    const auto& [key, value] = kv.entries[i];
    try {
      apply_config_key(cfg, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(io::at_line(name, kv.lines[i], e.what()));
    }
    if (keys_set) keys_set->push_back(key);
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// batches

using Batch = std::vector<std::size_t>;

/// Shuffles [0, n) and cuts it into consecutive batches; a final batch with
/// fewer than two samples is dropped.
inline std::vector<Batch> make_epoch_batches(std::size_t n, std::size_t batch_size, Rng& rng) {
  if (n == 0) throw ConfigError("make_epoch_batches: empty dataset");
  if (batch_size < 2) throw ConfigError("make_epoch_batches: batch_size must be at least 2");
  Batch order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  std::vector<Batch> out;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    if (end - start < 2) break;
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

/// A dataset with texts tokenized and image ids resolved once up front.
struct TokenizedDataset {
  Source source = Source::Caption;
  std::vector<TokenSequence> seqs;
  std::vector<std::size_t> feature_rows;
  std::vector<std::string> image_ids;

  std::size_t size() const noexcept { return seqs.size(); }
};

inline TokenizedDataset tokenize_dataset(const PairDataset& ds, const FeatureStore& store,
                                         const StopWords& stopwords, const EncoderConfig& enc) {
  if (ds.samples.empty()) throw ConfigError(std::string(to_string(ds.source)) + " dataset is empty");
  const std::size_t max_len = ds.source == Source::Click ? enc.max_query_len : enc.max_seq_len;
  TokenizedDataset out;
  out.source = ds.source;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const auto& s = ds.samples[i];
    if (!store.contains(s.image_id))
      throw DataError(std::string(to_string(ds.source)) + " sample " + std::to_string(i) +
                      ": image id '" + s.image_id + "' not in the feature store");
    try {
      out.seqs.push_back(tokenize(s.text, max_len, stopwords));
    } catch (const EmptyTextError& e) {
      throw DataError(std::string(to_string(ds.source)) + " sample " + std::to_string(i) + ": " + e.what());
    }
    out.feature_rows.push_back(store.row_of(s.image_id));
    out.image_ids.push_back(s.image_id);
  }
  return out;
}

/// One batch ready for a training step: token sequences, positive image
/// embeddings and the mined negatives (indices into the same batch).
template <typename T>
struct PreparedBatch {
  std::vector<TokenSequence> seqs;
  Tensor<T> positives;
  MinedTriplets mined;
  std::vector<std::vector<std::size_t>> negatives;
};

template <typename T>
PreparedBatch<T> prepare_batch(const TokenizedDataset& ds, const Batch& batch,
                               const FeatureStore& store, std::size_t n_negatives, FilterMode mode) {
  if (batch.size() < 2) throw ConfigError("prepare_batch: batch needs at least 2 samples");
  PreparedBatch<T> out;
  out.positives = Tensor<T>({batch.size(), store.dim()});
  std::vector<BatchSample> samples;
  samples.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const std::size_t k = batch[i];
    const auto vec = store.row(ds.feature_rows[k]);
    std::copy(vec.begin(), vec.end(), out.positives.row(i).begin());
    out.seqs.push_back(ds.seqs[k]);
    samples.push_back({i, ds.image_ids[k], vec, ds.seqs[k].content_words});
  }
  out.mined = mine_negatives(samples, n_negatives, mode);
  out.negatives = negative_indices(out.mined);
  return out;
}

// ---------------------------------------------------------------------------
// steps

/// Forward + backward over one or two batches. Accumulates into the
/// encoder's gradients the gradient of the returned loss, which is the
/// batch loss for one batch and the two-source mean for two.
template <typename T>
double compute_step_loss(TextEncoder<T>& encoder, const std::vector<const PreparedBatch<T>*>& batches,
                         const LossConfig& loss_cfg, Rng& rng, bool training) {
  if (batches.empty() || batches.size() > 2)
    throw ConfigError("a step takes one batch or a caption/click pair");
  const T weight = T{1} / static_cast<T>(batches.size());
  std::vector<T> losses;
  for (const auto* b : batches) {
    const std::size_t B = b->seqs.size();
    if (b->positives.cols() != encoder.config().output_dim)
      throw ConfigError("encoder output_dim " + std::to_string(encoder.config().output_dim) +
                        " does not match image feature dimension " + std::to_string(b->positives.cols()));
    std::vector<EncodeTrace<T>> traces(B);
    Tensor<T> queries({B, encoder.config().output_dim});
    for (std::size_t i = 0; i < B; ++i) {
      const auto q = encoder.encode(b->seqs[i], training, rng, &traces[i]);
      std::copy(q.data().begin(), q.data().end(), queries.row(i).begin());
    }
    Tensor<T> d_queries(queries.shape());
    losses.push_back(batch_loss(queries, b->positives, b->negatives, loss_cfg, &d_queries, weight));
    for (std::size_t i = 0; i < B; ++i) encoder.backward(traces[i], d_queries.row(i));
  }
  const T total = losses.size() == 2 ? multitask_combine(losses[0], losses[1]) : losses[0];
  return static_cast<double>(total);
}

/// One optimizer step. Throws NumericError (without updating) when the
/// loss or any gradient is not finite.
template <typename T>
double train_step(TextEncoder<T>& encoder, AdamConfig& adam,
                  const std::vector<const PreparedBatch<T>*>& batches, const LossConfig& loss_cfg,
                  Rng& rng) {
  encoder.params().zero_grad();
  const double loss = compute_step_loss(encoder, batches, loss_cfg, rng, true);
  if (!std::isfinite(loss)) {
    std::ostringstream os;
    os << "non-finite training loss (step " << adam.step_count + 1 << ", batch sizes";
    for (const auto* b : batches) os << " " << b->seqs.size();
    os << ")";
    encoder.params().zero_grad();
    throw NumericError(os.str());
  }
  adam_step(encoder.params(), adam);
  return loss;
}

// ---------------------------------------------------------------------------
// trainer

struct EpochStats {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double learning_rate = 0.0;
  std::size_t steps = 0;
};

template <typename T>
class Trainer {
 public:
  /// `click` may be empty for single-source training.
  Trainer(TrainConfig cfg, const WordVectorTable<float>& words, const FeatureStore& store,
          const PairDataset& caption, const PairDataset* click, const StopWords& stopwords)
      : cfg_(std::move(cfg)), store_(store), rng_(cfg_.seed) {
    cfg_.validate();
    if (cfg_.encoder.output_dim != store.dim())
      throw ConfigError("encoder.output_dim " + std::to_string(cfg_.encoder.output_dim) +
                        " does not match feature dimension " + std::to_string(store.dim()));
    if (cfg_.encoder.word_dim != words.dim())
      throw ConfigError("encoder.word_dim " + std::to_string(cfg_.encoder.word_dim) +
                        " does not match word vector dimension " + std::to_string(words.dim()));
    caption_ = tokenize_dataset(caption, store, stopwords, cfg_.encoder);
    if (click) click_ = tokenize_dataset(*click, store, stopwords, cfg_.encoder);
    for (const auto* ds : sources())
      if (ds->size() < 2)
        throw ConfigError(std::string(to_string(ds->source)) + " dataset needs at least 2 samples");
    encoder_ = TextEncoder<T>::initialize(cfg_.encoder, words.template cast<T>(), rng_);
    adam_ = cfg_.optimizer;
    adam_.step_count = 0;
    adam_.learning_rate = cfg_.learning_rate(0);
  }

  /// Continues from a checkpoint written by a run with the same config and data.
  void resume(const Checkpoint& ck) {
    if (!(ck.encoder == cfg_.encoder)) throw ConfigError("checkpoint encoder config differs from the training config");
    auto params = ck.params.template cast<T>();
    check_encoder_params(params, cfg_.encoder);
    encoder_ = TextEncoder<T>(cfg_.encoder, encoder_.words(), std::move(params));
    adam_ = ck.adam;
    epoch_ = ck.epoch;
    rng_.set_state(ck.rng_state);
  }

  EpochStats run_epoch() {
    const double lr = cfg_.learning_rate(epoch_);
    adam_.learning_rate = lr;
    const auto srcs = sources();
    std::vector<std::vector<Batch>> lists;
    for (const auto* ds : srcs) lists.push_back(make_epoch_batches(ds->size(), cfg_.batch_size, rng_));
    std::size_t steps = 0;
    for (const auto& l : lists) steps = std::max(steps, l.size());
    std::vector<std::size_t> cursor(srcs.size(), 0);

    double sum = 0.0;
    for (std::size_t s = 0; s < steps; ++s) {
      std::vector<PreparedBatch<T>> prepared;
      prepared.reserve(srcs.size());
      for (std::size_t k = 0; k < srcs.size(); ++k) {
        if (cursor[k] == lists[k].size()) {
          // shorter source cycles with a fresh shuffle
          lists[k] = make_epoch_batches(srcs[k]->size(), cfg_.batch_size, rng_);
          cursor[k] = 0;
        }
        prepared.push_back(prepare_batch<T>(*srcs[k], lists[k][cursor[k]++], store_,
                                            cfg_.loss.n_negatives, cfg_.mining_mode));
      }
      std::vector<const PreparedBatch<T>*> ptrs;
      for (const auto& p : prepared) ptrs.push_back(&p);
      sum += train_step(encoder_, adam_, ptrs, cfg_.loss, rng_);
    }
    EpochStats stats{epoch_, steps ? sum / static_cast<double>(steps) : 0.0, lr, steps};
    ++epoch_;
    return stats;
  }

  Checkpoint checkpoint() const {
    Checkpoint ck;
    ck.encoder = cfg_.encoder;
    ck.adam = adam_;
    ck.words = encoder_.words().template cast<float>();
    ck.params = encoder_.params().template cast<float>();
    ck.epoch = epoch_;
    ck.seed = cfg_.seed;
    ck.rng_state = rng_.state();
    return ck;
  }

  const TextEncoder<T>& encoder() const noexcept { return encoder_; }
  TextEncoder<T>& encoder() noexcept { return encoder_; }
  const AdamConfig& optimizer() const noexcept { return adam_; }
  const TrainConfig& config() const noexcept { return cfg_; }
  std::size_t epoch() const noexcept { return epoch_; }
  Rng& rng() noexcept { return rng_; }
  const TokenizedDataset& caption_data() const noexcept { return caption_; }
  const std::optional<TokenizedDataset>& click_data() const noexcept { return click_; }

 private:
  std::vector<const TokenizedDataset*> sources() const {
    std::vector<const TokenizedDataset*> out{&caption_};
    if (click_) out.push_back(&*click_);
    return out;
  }

  TrainConfig cfg_;
  const FeatureStore& store_;
  Rng rng_;
  TokenizedDataset caption_;
  std::optional<TokenizedDataset> click_;
  TextEncoder<T> encoder_;
  AdamConfig adam_;
  std::size_t epoch_ = 0;
};

struct TrainHooks {
  std::function<void(const EpochStats&)> on_epoch;
  std::optional<std::filesystem::path> checkpoint_path;  // written after every epoch
  const Checkpoint* resume_from = nullptr;
};

/// Runs the epoch loop to cfg.epochs and returns the final checkpoint.
inline Checkpoint train(const PairDataset& caption, const PairDataset* click, const FeatureStore& store,
                        const WordVectorTable<float>& words, const TrainConfig& cfg,
                        const StopWords& stopwords, const TrainHooks& hooks = {}) {
  Trainer<float> trainer(cfg, words, store, caption, click, stopwords);
  if (hooks.resume_from) trainer.resume(*hooks.resume_from);
  while (trainer.epoch() < cfg.epochs) {
    const auto stats = trainer.run_epoch();
    if (hooks.on_epoch) hooks.on_epoch(stats);
    if (hooks.checkpoint_path) save_checkpoint(trainer.checkpoint(), *hooks.checkpoint_path);
  }
  auto ck = trainer.checkpoint();
  if (hooks.checkpoint_path) save_checkpoint(ck, *hooks.checkpoint_path);
  return ck;
}

/// Rebuilds an inference encoder from a checkpoint.
template <typename T = float>
TextEncoder<T> encoder_from_checkpoint(const Checkpoint& ck) {
  return TextEncoder<T>(ck.encoder, ck.words.template cast<T>(), ck.params.template cast<T>());
}

}  // namespace patr
