#include <gtest/gtest.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "patr/cli.hpp"
#include "support/synthetic.hpp"

namespace patr {
namespace {

namespace fs = std::filesystem;

struct Result {
  int code;
  std::string out, err;
};

Result run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::vector<std::string> lines_of(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

std::string read_all(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream(p, std::ios::binary) << text;
}

void write_pairs(const PairDataset& ds, const fs::path& p) {
  std::string text;
  for (const auto& s : ds.samples) text += s.image_id + "\t" + s.text + "\n";
  write_text(p, text);
}

// A small synthetic corpus written to disk in every input format.
class CliFixture : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("patr_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter_++));
    fs::create_directories(dir_);
    testing::SyntheticConfig s;
    s.clusters = 4;
    s.dim = 6;
    s.word_dim = 5;
    s.train_per_source = 40;
    s.test_per_source = 20;
    data_ = testing::make_synthetic(s);
    write_features(data_.features, path("feat.bin"));
    save_word_vectors(data_.words, path("words.vec"));
    write_pairs(data_.caption_train, path("captions.tsv"));
    write_pairs(data_.click_train, path("clicks.tsv"));
    write_pairs(data_.caption_test, path("test.tsv"));
    std::string labels;
    for (const auto& [id, l] : data_.labels) labels += id + "\t" + l + "\n";
    write_text(path("labels.tsv"), labels);
    write_config("train.cfg", 2, "0.01");
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  void write_config(const std::string& name, int epochs, const std::string& lr) {
    write_text(path(name), "batch_size = 16\nepochs = " + std::to_string(epochs) + "\nlr_schedule = " + lr +
                               "\nseed = 42\nencoder.hidden_size = 6\nencoder.num_layers = 1\n");
  }

  std::vector<std::string> train_args(const std::string& cfg, const std::string& out) const {
    return {"train", "--config", path(cfg), "--captions", path("captions.tsv"), "--clicks", path("clicks.tsv"),
            "--features", path("feat.bin"), "--wordvecs", path("words.vec"), "--out", path(out)};
  }

  Result train_default() {
    auto r = run(train_args("train.cfg", "model.ckpt"));
    EXPECT_EQ(r.code, 0) << r.err;
    return r;
  }

  fs::path dir_;
  testing::SyntheticData data_;
  static inline int counter_ = 0;
};

TEST(CliUsage, NoSubcommandIsUsageError) {
  const auto r = run({});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("error:"), std::string::npos);
}

TEST(CliUsage, HelpSucceeds) {
  const auto r = run({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("retrieve"), std::string::npos);
}

TEST(CliUsage, MissingRequiredFlagPrintsUsage) {
  const auto r = run({"retrieve", "--ckpt", "x.ckpt", "--features", "f.bin"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("--query"), std::string::npos);
  EXPECT_NE(r.err.find("Usage"), std::string::npos);
}

TEST(CliUsage, InvalidChoiceIsUsageError) {
  EXPECT_EQ(run({"eval", "--ckpt", "a", "--pairs", "b", "--features", "c", "--direction", "both"}).code, 1);
  EXPECT_EQ(run({"mine", "--features", "a", "--pairs", "b", "--mode", "none"}).code, 1);
  EXPECT_EQ(run({"mine", "--features", "a", "--pairs", "b", "--batch-size", "1"}).code, 1);
}

TEST_F(CliFixture, TrainWritesCheckpointAndLogsEpochs) {
  const auto r = train_default();
  const auto lines = lines_of(r.out);
  ASSERT_EQ(lines.size(), 2u);
  EXPECT_EQ(lines[0].rfind("0\t", 0), 0u);
  EXPECT_EQ(lines[1].rfind("1\t", 0), 0u);
  const auto ck = load_checkpoint(path("model.ckpt"));
  EXPECT_EQ(ck.epoch, 2u);
  EXPECT_EQ(ck.encoder.word_dim, 5u);
  EXPECT_EQ(ck.encoder.output_dim, 6u);
  EXPECT_EQ(ck.encoder.hidden_size, 6u);
  EXPECT_EQ(ck.seed, 42u);
}

TEST_F(CliFixture, TrainIsReproducibleAndResumable) {
  train_default();
  ASSERT_EQ(run(train_args("train.cfg", "again.ckpt")).code, 0);
  EXPECT_EQ(read_all(path("model.ckpt")), read_all(path("again.ckpt")));

  write_config("one.cfg", 1, "0.01");
  ASSERT_EQ(run(train_args("one.cfg", "half.ckpt")).code, 0);
  auto args = train_args("train.cfg", "resumed.ckpt");
  args.insert(args.end(), {"--resume", path("half.ckpt")});
  const auto r = run(args);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(lines_of(r.out).size(), 1u);
  EXPECT_EQ(read_all(path("model.ckpt")), read_all(path("resumed.ckpt")));
}

TEST_F(CliFixture, SeedFlagOverridesConfig) {
  train_default();
  auto args = train_args("train.cfg", "other.ckpt");
  args.insert(args.end(), {"--seed", "7"});
  ASSERT_EQ(run(args).code, 0);
  EXPECT_EQ(load_checkpoint(path("other.ckpt")).seed, 7u);
  EXPECT_NE(read_all(path("model.ckpt")), read_all(path("other.ckpt")));
}

TEST_F(CliFixture, UnknownConfigKeyIsUsageError) {
  write_text(path("bad.cfg"), "epochs = 1\nwarmup = 3\n");
  const auto r = run(train_args("bad.cfg", "x.ckpt"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("bad.cfg:2:"), std::string::npos);
  EXPECT_FALSE(fs::exists(path("x.ckpt")));
}

TEST_F(CliFixture, DivergingTrainingIsNumericError) {
  write_config("huge.cfg", 2, "1e300");
  const auto r = run(train_args("huge.cfg", "x.ckpt"));
  EXPECT_EQ(r.code, 3) << r.err;
  EXPECT_NE(r.err.find("non-finite"), std::string::npos);
}

TEST_F(CliFixture, CorruptInputsAreDataErrors) {
  auto bytes = read_all(path("feat.bin"));
  write_text(path("trunc.bin"), bytes.substr(0, bytes.size() - 3));
  auto args = train_args("train.cfg", "x.ckpt");
  args[8] = path("trunc.bin");
  auto r = run(args);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("trunc.bin"), std::string::npos);

  write_text(path("bad.tsv"), "img_no_tab\n");
  args = train_args("train.cfg", "x.ckpt");
  args[4] = path("bad.tsv");
  r = run(args);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("bad.tsv:1:"), std::string::npos);

  args = train_args("train.cfg", "x.ckpt");
  args[10] = path("missing.vec");
  EXPECT_EQ(run(args).code, 2);
}

TEST_F(CliFixture, EvalPrintsTable) {
  train_default();
  const auto r = run({"eval", "--ckpt", path("model.ckpt"), "--pairs", path("test.tsv"), "--features",
                      path("feat.bin"), "--labels", path("labels.tsv"), "--k", "1,5", "--map-r", "10", "--out",
                      path("eval.tsv")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto lines = lines_of(r.out);
  ASSERT_EQ(lines.size(), 2u);
  EXPECT_EQ(lines[0], "dataset\tdirection\tR@1\tR@5\tmAP@10");
  EXPECT_EQ(lines[1].rfind("test\ttxt2img\t", 0), 0u);
  EXPECT_EQ(read_all(path("eval.tsv")), r.out);

  const auto img = run({"eval", "--ckpt", path("model.ckpt"), "--pairs", path("test.tsv"), "--features",
                        path("feat.bin"), "--direction", "img2txt"});
  ASSERT_EQ(img.code, 0) << img.err;
  EXPECT_NE(img.out.find("img2txt"), std::string::npos);
  EXPECT_NE(lines_of(img.out)[1].find("\t-"), std::string::npos);  // no labels, no mAP
}

TEST_F(CliFixture, EncodeThenRetrieveFindsExactMatch) {
  train_default();
  write_text(path("texts.txt"), "a\tc0w0 c0w1\nb\tc1w2 c1w3\ntarget\tc2w0 c2w2\nc3w1\n");
  ASSERT_EQ(run({"encode", "--ckpt", path("model.ckpt"), "--texts", path("texts.txt"), "--out", path("enc.bin")}).code,
            0);
  const auto enc = load_features(path("enc.bin"));
  EXPECT_EQ(enc.ids(), (std::vector<std::string>{"a", "b", "target", "4"}));

  const auto r = run({"retrieve", "--ckpt", path("model.ckpt"), "--features", path("enc.bin"), "--query",
                      "c2w0 c2w2", "--top", "2"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto lines = lines_of(r.out);
  ASSERT_EQ(lines.size(), 2u);
  EXPECT_EQ(lines[0], "target\t0");

  const auto many = run({"retrieve", "--ckpt", path("model.ckpt"), "--features", path("enc.bin"), "--query",
                         "c2w0", "--top", "10"});
  EXPECT_EQ(many.code, 0);
  EXPECT_EQ(lines_of(many.out).size(), 4u);
  EXPECT_NE(many.err.find("exceeds"), std::string::npos);
}

TEST_F(CliFixture, RetrieveRejectsDimensionMismatch) {
  train_default();
  FeatureStore other(3);
  other.add("x", std::vector<float>{1, 2, 3});
  write_features(other, path("other.bin"));
  const auto r = run({"retrieve", "--ckpt", path("model.ckpt"), "--features", path("other.bin"), "--query", "c0w0"});
  EXPECT_EQ(r.code, 1);
}

TEST_F(CliFixture, MineDumpsNegatives) {
  const std::vector<std::string> args{"mine", "--features", path("feat.bin"), "--pairs", path("captions.tsv"),
                                      "--batch-size", "16", "--n", "2", "--seed", "3"};
  const auto r = run(args);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(run(args).out, r.out);
  std::set<std::size_t> positives;
  const auto& samples = data_.caption_train.samples;
  for (const auto& line : lines_of(r.out)) {
    std::istringstream in(line);
    std::size_t pos = 0, neg = 0;
    double dist = 0;
    std::string mode;
    ASSERT_TRUE(in >> pos >> neg >> dist >> mode) << line;
    ASSERT_LT(pos, samples.size());
    ASSERT_LT(neg, samples.size());
    EXPECT_NE(samples[pos].image_id, samples[neg].image_id);
    EXPECT_TRUE(mode == "any" || mode == "all" || mode == "unfiltered") << mode;
    EXPECT_GE(dist, 0.0);
    positives.insert(pos);
  }
  // 40 samples in batches of 16: the last 8 form a third batch
  EXPECT_EQ(positives.size(), 40u);
}

}  // namespace
}  // namespace patr
