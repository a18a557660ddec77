#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "patr/evalret.hpp"
#include "patr/trainer.hpp"
#include "support/oracles.hpp"
#include "support/synthetic.hpp"

namespace patr {
namespace {

RetrievalIndex random_index(Rng& rng, std::size_t m, std::size_t d, bool coarse) {
  RetrievalIndex idx(d);
  std::vector<float> v(d);
  for (std::size_t i = 0; i < m; ++i) {
    for (auto& x : v) x = coarse ? static_cast<float>(rng.below(2)) : static_cast<float>(rng.normal());
    idx.add("id" + std::to_string(i), v);
  }
  return idx;
}

TEST(RetrieveTopK, Examples) {
  RetrievalIndex idx(2);
  idx.add("far", std::vector<float>{10, 0});
  idx.add("near", std::vector<float>{1, 0});
  idx.add("mid", std::vector<float>{0, 3});
  const std::vector<float> q{0, 0};
  const auto top = retrieve_topk(q, idx, 2);
  EXPECT_FALSE(top.truncated);
  EXPECT_EQ(top.hits, (std::vector<Hit>{{"near", 1.0}, {"mid", 9.0}}));
  const auto all = retrieve_topk(q, idx, 5);
  EXPECT_TRUE(all.truncated);
  EXPECT_EQ(all.hits.size(), 3u);
  EXPECT_EQ(all.hits.back().id, "far");
}

TEST(RetrieveTopK, ExactMatchComesFirstAtZero) {
  Rng rng(3);
  const auto idx = random_index(rng, 200, 8, false);
  const auto row = idx.row(57);
  const std::vector<float> q(row.begin(), row.end());
  const auto top = retrieve_topk(q, idx, 3);
  EXPECT_EQ(top.hits[0].id, "id57");
  EXPECT_EQ(top.hits[0].sq_dist, 0.0);
}

TEST(RetrieveTopK, MatchesFullSortOracle) {
  Rng rng(17);
  for (bool coarse : {false, true}) {
    const auto idx = random_index(rng, 10000, 64, coarse);
    for (int q = 0; q < 5; ++q) {
      std::vector<float> query(64);
      for (auto& x : query) x = coarse ? static_cast<float>(rng.below(2)) : static_cast<float>(rng.normal());
      std::vector<std::pair<double, std::size_t>> all;
      for (std::size_t r = 0; r < idx.size(); ++r) {
        double s = 0;
        for (std::size_t k = 0; k < 64; ++k) {
          const double d = static_cast<double>(query[k]) - idx.row(r)[k];
          s += d * d;
        }
        all.emplace_back(s, r);
      }
      std::sort(all.begin(), all.end());  // pair order breaks ties by row
      const auto top = retrieve_topk(query, idx, 20);
      ASSERT_EQ(top.hits.size(), 20u);
      for (std::size_t i = 0; i < 20; ++i) {
        EXPECT_EQ(top.hits[i].id, "id" + std::to_string(all[i].second));
        EXPECT_EQ(top.hits[i].sq_dist, all[i].first);
      }
    }
  }
}

TEST(RetrieveTopK, RejectsBadArguments) {
  RetrievalIndex idx(2);
  idx.add("a", std::vector<float>{0, 0});
  EXPECT_THROW(retrieve_topk(std::vector<float>{0, 0}, idx, 0), ConfigError);
  EXPECT_THROW(retrieve_topk(std::vector<float>{0}, idx, 1), ConfigError);
  EXPECT_THROW(idx.add("a", std::vector<float>{1, 1}), DataError);
  EXPECT_THROW(idx.add("b", std::vector<float>{1}), ConfigError);
}

TEST(RecallAtK, Examples) {
  const std::vector<Ranking> r{{"q0", {"a", "b", "c"}}, {"q1", {"x", "y", "b"}}};
  GroundTruth truth{{"q0", {"a"}}, {"q1", {"b"}}};
  EXPECT_DOUBLE_EQ(recall_at_k(r, truth, 1), 0.5);
  EXPECT_DOUBLE_EQ(recall_at_k(r, truth, 2), 0.5);
  EXPECT_DOUBLE_EQ(recall_at_k(r, truth, 3), 1.0);
  EXPECT_DOUBLE_EQ(recall_at_k({{"q0", {"a"}}}, truth, 1), 1.0);
}

TEST(RecallAtK, MissingTruthIsDataError) {
  EXPECT_THROW(recall_at_k({{"q9", {"a"}}}, GroundTruth{{"q0", {"a"}}}, 1), DataError);
  EXPECT_THROW(recall_at_k({}, GroundTruth{}, 1), ConfigError);
  EXPECT_THROW(recall_at_k({{"q0", {"a"}}}, GroundTruth{{"q0", {"a"}}}, 0), ConfigError);
}

TEST(RecallAtK, MatchesOracle) {
  Rng rng(23);
  std::vector<Ranking> rankings;
  std::vector<std::vector<std::string>> plain;
  std::vector<std::string> truth_ids;
  GroundTruth truth;
  for (int q = 0; q < 1000; ++q) {
    std::vector<std::string> ids(50);
    std::vector<std::size_t> perm(100);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    for (std::size_t i = 0; i < 50; ++i) ids[i] = "g" + std::to_string(perm[i]);
    const auto qid = "q" + std::to_string(q);
    const auto t = "g" + std::to_string(rng.below(100));
    rankings.push_back({qid, ids});
    plain.push_back(ids);
    truth_ids.push_back(t);
    truth[qid] = {t};
  }
  for (std::size_t k : {1u, 5u, 10u, 20u, 50u})
    EXPECT_DOUBLE_EQ(recall_at_k(rankings, truth, k), testing::recall_oracle(plain, truth_ids, k)) << k;
}

TEST(AveragePrecision, Examples) {
  const LabelMap labels{{"a", "x"}, {"b", "y"}, {"c", "x"}, {"d", "y"}};
  // relevant at ranks 1 and 3: (1/1 + 2/3) / 2
  EXPECT_DOUBLE_EQ(average_precision({"a", "b", "c", "d"}, labels, "x", 4), (1.0 + 2.0 / 3.0) / 2.0);
  // relevant at ranks 2 and 4: (1/2 + 2/4) / 2
  EXPECT_DOUBLE_EQ(average_precision({"a", "b", "c", "d"}, labels, "y", 4), 0.5);
  // only the first two ranks count
  EXPECT_DOUBLE_EQ(average_precision({"a", "b", "c", "d"}, labels, "y", 2), 0.5);
  EXPECT_DOUBLE_EQ(average_precision({"b", "d"}, labels, "x", 2), 0.0);
  EXPECT_DOUBLE_EQ(average_precision({"a", "c"}, labels, "x", 50), 1.0);
}

TEST(AveragePrecision, MissingLabelOrZeroR) {
  const LabelMap labels{{"a", "x"}};
  EXPECT_THROW(average_precision({"zz"}, labels, "x", 5), DataError);
  EXPECT_THROW(average_precision({"a"}, labels, "x", 0), ConfigError);
}

TEST(AveragePrecision, MatchesOracle) {
  Rng rng(31);
  for (int c = 0; c < 500; ++c) {
    const std::size_t n = 1 + rng.below(80);
    const std::size_t n_labels = 1 + rng.below(5);
    LabelMap labels;
    std::vector<std::string> ranking, ranked_labels;
    for (std::size_t i = 0; i < n; ++i) {
      const auto id = "i" + std::to_string(i);
      const auto l = "L" + std::to_string(rng.below(n_labels));
      labels[id] = l;
      ranking.push_back(id);
      ranked_labels.push_back(l);
    }
    const auto q = "L" + std::to_string(rng.below(n_labels));
    const std::size_t R = 1 + rng.below(60);
    EXPECT_NEAR(average_precision(ranking, labels, q, R), testing::ap_oracle(ranked_labels, q, R), 1e-12);
  }
}

TEST(AveragePrecision, AllSameLabelIsOne) {
  LabelMap labels;
  std::vector<std::string> ranking;
  for (int i = 0; i < 60; ++i) {
    labels["i" + std::to_string(i)] = "same";
    ranking.push_back("i" + std::to_string(i));
  }
  EXPECT_DOUBLE_EQ(average_precision(ranking, labels, "same", 50), 1.0);
}

TEST(Reports, AverageAndFormat) {
  EvalReport a{"cap", Direction::Txt2Img, {{1, 0.5}, {10, 0.9}}, 0.4, 50, 10};
  EvalReport b{"clk", Direction::Txt2Img, {{1, 0.7}, {10, 1.0}}, 0.6, 50, 20};
  const auto avg = average_reports(a, b);
  EXPECT_DOUBLE_EQ(*avg.recall_at(1), 0.6);
  EXPECT_DOUBLE_EQ(*avg.recall_at(10), 0.95);
  EXPECT_FALSE(avg.recall_at(20).has_value());
  EXPECT_DOUBLE_EQ(*avg.mean_ap, 0.5);
  EXPECT_EQ(avg.queries, 30u);
  EXPECT_EQ(format_reports({a}, '\t'), "dataset\tdirection\tR@1\tR@10\tmAP@50\ncap\ttxt2img\t0.5000\t0.9000\t0.4000\n");
  a.mean_ap.reset();
  EXPECT_EQ(format_reports({a}, ','), "dataset,direction,R@1,R@10,mAP@50\ncap,txt2img,0.5000,0.9000,-\n");
  b.recall.pop_back();
  EXPECT_THROW(average_reports(a, b), ConfigError);
}

TEST(Direction, Parse) {
  EXPECT_EQ(parse_direction("txt2img"), Direction::Txt2Img);
  EXPECT_EQ(parse_direction("img2txt"), Direction::Img2Txt);
  EXPECT_THROW(parse_direction("both"), ConfigError);
}

struct EvalFixture {
  testing::SyntheticData data;
  TextEncoder<float> encoder;

  EvalFixture() {
    testing::SyntheticConfig s;
    s.clusters = 5;
    s.dim = 8;
    s.word_dim = 6;
    s.train_per_source = 10;
    s.test_per_source = 120;
    data = testing::make_synthetic(s);
    EncoderConfig enc;
    enc.word_dim = 6;
    enc.hidden_size = 5;
    enc.num_layers = 2;
    enc.output_dim = 8;
    Rng rng(1);
    encoder = TextEncoder<float>::initialize(enc, data.words, rng);
  }
};

// Recomputes every metric from the dumped rankings with the oracles, and
// the rankings themselves by brute force.
void check_against_dump(const EvalFixture& f, Direction dir) {
  EvalOptions opt;
  opt.direction = dir;
  opt.ks = {1, 5, 10};
  opt.map_r = 20;
  EvalRankings dump;
  const auto report = evaluate(f.encoder, f.data.caption_test, f.data.features, &f.data.labels, opt, &dump);
  ASSERT_EQ(report.queries, dump.rankings.size());
  ASSERT_EQ(dump.query_labels.size(), dump.rankings.size());

  const auto texts = [&] {
    std::vector<std::string> t;
    for (const auto& s : f.data.caption_test.samples) t.push_back(s.text);
    return encode_texts(f.encoder, t, f.encoder.config().max_seq_len);
  }();

  for (auto k : opt.ks) {
    std::size_t hits = 0;
    for (const auto& r : dump.rankings) {
      const auto& truth = dump.truth.at(r.query);
      for (std::size_t i = 0; i < std::min<std::size_t>(k, r.ids.size()); ++i)
        if (truth.count(r.ids[i])) {
          ++hits;
          break;
        }
    }
    EXPECT_DOUBLE_EQ(*report.recall_at(k), static_cast<double>(hits) / dump.rankings.size());
  }
  double ap_sum = 0;
  for (std::size_t q = 0; q < dump.rankings.size(); ++q) {
    std::vector<std::string> ranked_labels;
    for (const auto& id : dump.rankings[q].ids) ranked_labels.push_back(dump.item_labels.at(id));
    ap_sum += testing::ap_oracle(ranked_labels, dump.query_labels[q], opt.map_r);
  }
  EXPECT_NEAR(*report.mean_ap, ap_sum / dump.rankings.size(), 1e-12);

  // The first query's ranking equals a brute-force sort of the gallery.
  const auto& first = dump.rankings.front();
  std::vector<std::pair<double, std::string>> gallery;
  if (dir == Direction::Txt2Img) {
    std::vector<std::string> seen;
    for (const auto& s : f.data.caption_test.samples)
      if (std::find(seen.begin(), seen.end(), s.image_id) == seen.end()) seen.push_back(s.image_id);
    for (std::size_t g = 0; g < seen.size(); ++g) {
      const auto v = f.data.features.at(seen[g]);
      gallery.emplace_back(sq_dist_f64(texts[0], v), seen[g]);
    }
    EXPECT_EQ(first.query, "q0");
  } else {
    const auto q = f.data.features.at(first.query);
    for (std::size_t i = 0; i < texts.size(); ++i)
      gallery.emplace_back(sq_dist_f64(q, texts[i]), text_item_id(f.data.caption_test, i));
  }
  std::stable_sort(gallery.begin(), gallery.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  ASSERT_EQ(first.ids.size(), std::min<std::size_t>(20, gallery.size()));
  for (std::size_t i = 0; i < first.ids.size(); ++i) EXPECT_EQ(first.ids[i], gallery[i].second) << i;
}

TEST(Evaluate, Txt2ImgMatchesRecomputation) {
  EvalFixture f;
  check_against_dump(f, Direction::Txt2Img);
}

TEST(Evaluate, Img2TxtMatchesRecomputation) {
  EvalFixture f;
  check_against_dump(f, Direction::Img2Txt);
}

TEST(Evaluate, WithoutLabelsHasNoMap) {
  EvalFixture f;
  const auto r = evaluate(f.encoder, f.data.caption_test, f.data.features, nullptr, EvalOptions{});
  EXPECT_FALSE(r.mean_ap.has_value());
  EXPECT_EQ(r.recall.size(), 3u);
  EXPECT_EQ(r.queries, f.data.caption_test.samples.size());
}

TEST(Evaluate, SinglePairIsPerfect) {
  EvalFixture f;
  const PairDataset one{Source::Caption, {f.data.caption_test.samples[0]}};
  EvalOptions opt;
  opt.ks = {1};
  const auto r = evaluate(f.encoder, one, f.data.features, &f.data.labels, opt);
  EXPECT_DOUBLE_EQ(*r.recall_at(1), 1.0);
  EXPECT_DOUBLE_EQ(*r.mean_ap, 1.0);
}

TEST(Evaluate, DataErrors) {
  EvalFixture f;
  PairDataset bad{Source::Caption, {{"c0w0", "missing"}}};
  EXPECT_THROW(evaluate(f.encoder, bad, f.data.features, nullptr, EvalOptions{}), DataError);
  LabelMap partial;
  EXPECT_THROW(evaluate(f.encoder, f.data.caption_test, f.data.features, &partial, EvalOptions{}), DataError);
  EXPECT_THROW(evaluate(f.encoder, PairDataset{}, f.data.features, nullptr, EvalOptions{}), ConfigError);
  FeatureStore other(3);
  EXPECT_THROW(evaluate(f.encoder, f.data.caption_test, other, nullptr, EvalOptions{}), ConfigError);
}

}  // namespace
}  // namespace patr
