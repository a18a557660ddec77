#pragma once

// Command-line front end: train, eval, retrieve, encode, mine.
//
// Exit codes: 0 success, 1 usage/config error, 2 data or format error,
// 3 numeric failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include "patr/dataio.hpp"
#include "patr/error.hpp"
#include "patr/evalret.hpp"
#include "patr/mining.hpp"
#include "patr/trainer.hpp"

namespace patr::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

namespace detail {

inline std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline StopWords stopwords_from(const std::string& path) {
  return path.empty() ? default_stopwords() : load_stopwords(std::filesystem::path(path));
}

struct TrainArgs {
  std::string config, captions, clicks, features, wordvecs, stopwords, out, resume;
  std::optional<std::uint64_t> seed;
};

inline int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  std::vector<std::string> keys;
  TrainConfig cfg;
  {
    auto in = io::open_text(a.config);
    cfg = parse_train_config(in, a.config, &keys);
  }
  auto has_key = [&](const char* k) { return std::find(keys.begin(), keys.end(), k) != keys.end(); };
  if (a.seed) cfg.seed = *a.seed;

  const auto store = load_features(a.features);
  const auto words = load_word_vectors(std::filesystem::path(a.wordvecs), &err);
  if (has_key("encoder.word_dim") && cfg.encoder.word_dim != words.dim())
    throw ConfigError("encoder.word_dim = " + std::to_string(cfg.encoder.word_dim) +
                      " but word vectors have dimension " + std::to_string(words.dim()));
  if (has_key("encoder.output_dim") && cfg.encoder.output_dim != store.dim())
    throw ConfigError("encoder.output_dim = " + std::to_string(cfg.encoder.output_dim) +
                      " but features have dimension " + std::to_string(store.dim()));
  cfg.encoder.word_dim = words.dim();
  cfg.encoder.output_dim = store.dim();

  const auto stop = stopwords_from(a.stopwords);
  const auto captions = load_pairs(std::filesystem::path(a.captions), Source::Caption);
  std::optional<PairDataset> clicks;
  if (!a.clicks.empty()) clicks = load_pairs(std::filesystem::path(a.clicks), Source::Click);

  std::optional<Checkpoint> resume;
  if (!a.resume.empty()) resume = load_checkpoint(a.resume);

  TrainHooks hooks;
  hooks.checkpoint_path = std::filesystem::path(a.out);
  hooks.resume_from = resume ? &*resume : nullptr;
  hooks.on_epoch = [&](const EpochStats& s) {
    out << s.epoch << '\t' << fmt_g(s.mean_loss) << '\t' << fmt_g(s.learning_rate) << '\n';
    out.flush();
  };
  train(captions, clicks ? &*clicks : nullptr, store, words, cfg, stop, hooks);
  return kOk;
}

struct EvalArgs {
  std::string ckpt, pairs, features, labels, direction = "txt2img", out;
  std::vector<std::size_t> ks{1, 10, 20};
  std::size_t map_r = 50;
};

inline int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const auto ck = load_checkpoint(a.ckpt);
  const auto encoder = encoder_from_checkpoint<float>(ck);
  const auto store = load_features(a.features);
  const auto pairs = load_pairs(std::filesystem::path(a.pairs), Source::Caption);
  std::optional<LabelMap> labels;
  if (!a.labels.empty()) labels = load_labels(std::filesystem::path(a.labels));

  EvalOptions opt;
  opt.direction = parse_direction(a.direction);
  opt.ks = a.ks;
  opt.map_r = a.map_r;
  opt.dataset = std::filesystem::path(a.pairs).stem().string();
  const auto report = evaluate(encoder, pairs, store, labels ? &*labels : nullptr, opt);
  const auto table = format_reports({report}, '\t');
  out << table;
  if (!a.out.empty()) io::write_file_atomic(a.out, table);
  return kOk;
}

inline int cmd_retrieve(const std::string& ckpt_path, const std::string& features, const std::string& query,
                        std::size_t top, std::ostream& out, std::ostream& err) {
  const auto ck = load_checkpoint(ckpt_path);
  const auto encoder = encoder_from_checkpoint<float>(ck);
  const auto store = load_features(features);
  if (store.dim() != ck.encoder.output_dim)
    throw ConfigError("checkpoint output_dim " + std::to_string(ck.encoder.output_dim) +
                      " does not match feature dimension " + std::to_string(store.dim()));
  const auto vecs = encode_texts(encoder, {query}, ck.encoder.max_query_len);
  const auto result = retrieve_topk(vecs[0], RetrievalIndex::from_store(store), top);
  if (result.truncated)
    err << "note: --top " << top << " exceeds the " << store.size() << " stored images\n";
  for (const auto& h : result.hits) out << h.id << '\t' << fmt_g(h.sq_dist) << '\n';
  return kOk;
}

/// Text file: one text per line, optionally "<id>\t<text>"; otherwise the
/// id is the 1-based line number.
inline int cmd_encode(const std::string& ckpt_path, const std::string& texts_path, const std::string& out_path) {
  const auto ck = load_checkpoint(ckpt_path);
  const auto encoder = encoder_from_checkpoint<float>(ck);
  auto in = io::open_text(texts_path);
  std::vector<std::string> ids, texts;
  std::string line;
  std::size_t lineno = 0;
  while (io::read_line(in, line)) {
    ++lineno;
    if (io::is_blank(line)) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      ids.push_back(std::to_string(lineno));
      texts.push_back(line);
    } else {
      if (tab == 0) throw DataError(io::at_line(texts_path, lineno, "empty id"));
      ids.push_back(line.substr(0, tab));
      texts.push_back(line.substr(tab + 1));
    }
  }
  FeatureStore store(ck.encoder.output_dim);
  if (!texts.empty()) {
    const auto vecs = encode_texts(encoder, texts, ck.encoder.max_seq_len);
    for (std::size_t i = 0; i < ids.size(); ++i) store.add(ids[i], vecs[i]);
  }
  write_features(store, out_path);
  return kOk;
}

struct MineArgs {
  std::string features, pairs, mode = "any", stopwords;
  std::size_t batch_size = 512, n = 3, max_seq_len = 18;
  std::uint64_t seed = 0;
};

/// Dumps "pos_index\tneg_index\tsq_dist\tmode" for one shuffled epoch;
/// indices refer to samples in the pairs file.
inline int cmd_mine(const MineArgs& a, std::ostream& out) {
  const auto store = load_features(a.features);
  const auto pairs = load_pairs(std::filesystem::path(a.pairs), Source::Caption);
  EncoderConfig enc;
  enc.max_seq_len = a.max_seq_len;
  const auto data = tokenize_dataset(pairs, store, stopwords_from(a.stopwords), enc);
  const auto mode = parse_filter_mode(a.mode);
  Rng rng(a.seed);
  for (const auto& batch : make_epoch_batches(data.size(), a.batch_size, rng)) {
    const auto prepared = prepare_batch<float>(data, batch, store, a.n, mode);
    for (const auto& e : prepared.mined)
      for (const auto& neg : e.negatives)
        out << batch[e.positive] << '\t' << batch[neg.index] << '\t' << fmt_g(neg.sq_dist) << '\t'
            << to_string(e.mode_used) << '\n';
  }
  return kOk;
}

}  // namespace detail

/// Parses and runs one invocation. `args` excludes the program name.
inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Text-to-image embedding training and cross-modal retrieval", "patr"};
  app.require_subcommand(1);

  detail::TrainArgs ta;
  auto* train = app.add_subcommand("train", "train a text encoder into an image feature space");
  train->add_option("--config", ta.config, "key = value config file")->required();
  train->add_option("--captions", ta.captions, "caption pairs TSV")->required();
  train->add_option("--clicks", ta.clicks, "click pairs TSV (enables multi-task training)");
  train->add_option("--features", ta.features, "image feature file")->required();
  train->add_option("--wordvecs", ta.wordvecs, "word vector text file")->required();
  train->add_option("--stopwords", ta.stopwords, "stop-word list (default: built-in English)");
  train->add_option("--out", ta.out, "checkpoint path")->required();
  train->add_option("--seed", ta.seed, "override the config seed");
  train->add_option("--resume", ta.resume, "continue from a checkpoint of the same run");

  detail::EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "evaluate retrieval (R@K, mAP@R)");
  eval->add_option("--ckpt", ea.ckpt, "checkpoint")->required();
  eval->add_option("--pairs", ea.pairs, "test pairs TSV")->required();
  eval->add_option("--features", ea.features, "image feature file")->required();
  eval->add_option("--labels", ea.labels, "image id -> label TSV (enables mAP)");
  eval->add_option("--direction", ea.direction, "txt2img or img2txt")
      ->check(CLI::IsMember({"txt2img", "img2txt"}));
  eval->add_option("--k", ea.ks, "comma-separated K values")->delimiter(',');
  eval->add_option("--map-r", ea.map_r, "R for mAP@R")->check(CLI::PositiveNumber);
  eval->add_option("--out", ea.out, "also write the table as TSV");

  std::string r_ckpt, r_features, r_query;
  std::size_t r_top = 10;
  auto* retrieve = app.add_subcommand("retrieve", "rank stored images for a text query");
  retrieve->add_option("--ckpt", r_ckpt, "checkpoint")->required();
  retrieve->add_option("--features", r_features, "image feature file")->required();
  retrieve->add_option("--query", r_query, "query text")->required();
  retrieve->add_option("--top", r_top, "number of results")->check(CLI::PositiveNumber);

  std::string e_ckpt, e_texts, e_out;
  auto* encode = app.add_subcommand("encode", "embed texts into the image feature space");
  encode->add_option("--ckpt", e_ckpt, "checkpoint")->required();
  encode->add_option("--texts", e_texts, "one text (or id<TAB>text) per line")->required();
  encode->add_option("--out", e_out, "output feature file")->required();

  detail::MineArgs ma;
  auto* mine = app.add_subcommand("mine", "dump mined hard negatives for one shuffled epoch");
  mine->add_option("--features", ma.features, "image feature file")->required();
  mine->add_option("--pairs", ma.pairs, "pairs TSV")->required();
  mine->add_option("--batch-size", ma.batch_size, "batch size")->check(CLI::Range(2, 1 << 30));
  mine->add_option("--n", ma.n, "negatives per positive")->check(CLI::PositiveNumber);
  mine->add_option("--mode", ma.mode, "any or all")->check(CLI::IsMember({"any", "all"}));
  mine->add_option("--seed", ma.seed, "shuffle seed");
  mine->add_option("--stopwords", ma.stopwords, "stop-word list (default: built-in English)");
  mine->add_option("--max-seq-len", ma.max_seq_len, "token limit")->check(CLI::PositiveNumber);

  std::vector<std::string> argv_store{"patr"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& s : argv_store) argv.push_back(s.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const CLI::App* sub = nullptr;
    for (const auto* s : app.get_subcommands()) sub = s;
    err << (sub ? sub->help() : app.help());
    return kUsage;
  }

  try {
    if (*train) return detail::cmd_train(ta, out, err);
    if (*eval) return detail::cmd_eval(ea, out);
    if (*retrieve) return detail::cmd_retrieve(r_ckpt, r_features, r_query, r_top, out, err);
    if (*encode) return detail::cmd_encode(e_ckpt, e_texts, e_out);
    if (*mine) return detail::cmd_mine(ma, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kData;
  }
  return kUsage;
}

}  // namespace patr::cli
