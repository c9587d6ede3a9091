#include <gtest/gtest.h>

#include "cgd/cause_id.hpp"
#include "cgd/synthetic.hpp"

using namespace cgd;

namespace {

Corpus fixture() { return load_corpus(std::string(CGD_TEST_DATA) + "/fixture_corpus.jsonl"); }

std::vector<CausePrediction> baseline(const Corpus& c, Baseline kind) {
  std::vector<CausePrediction> out;
  for (const auto& p : c.pairs) out.push_back(baseline_causes(p, kind));
  return out;
}

// Score of candidate j is scores[j].
TripleScorer table_scorer(const std::vector<double>& scores) {
  return [scores](const Triple& tr) { return scores.at(tr.j); };
}

}  // namespace

TEST(SecondCause, ArgmaxPrefersLaterOnTies) {
  const std::vector<std::string> history{"u0", "u1", "u2", "u3", "u4"};
  const auto sc = identify_second_cause(table_scorer({0.2, 0.7, 0.7, 0.1, 0.99}), history, "r");
  // j ranges over 0..3; u4 is u_{t-1} and never a candidate.
  EXPECT_EQ(sc.j, 2u);
  EXPECT_DOUBLE_EQ(sc.p, 0.7);
  EXPECT_THROW(identify_second_cause(table_scorer({0.5}), {"only"}, "r"), NoCandidates);
  EXPECT_EQ(identify_second_cause(table_scorer({0.3}), {"u0", "u1"}, "r").j, 0u);
}

TEST(SecondCause, MatchesIndependentArgmax) {
  Rng rng(12);
  for (int round = 0; round < 1000; ++round) {
    const std::size_t t = 2 + rng.below(10);
    std::vector<double> scores(t);
    for (auto& s : scores) s = static_cast<double>(rng.below(5)) / 4.0;  // many ties
    std::vector<std::string> history(t, "x");
    std::size_t want = 0;
    for (std::size_t j = 0; j + 1 < t; ++j)
      if (scores[j] >= scores[want]) want = j;
    const auto sc = identify_second_cause(table_scorer(scores), history, "r");
    ASSERT_EQ(sc.j, want);
    ASSERT_EQ(sc.p, scores[want]);
  }
}

TEST(Predict, ModesAndThreshold) {
  const auto c = fixture();
  const auto& d = c.dialogues[0];  // 8 utterances
  const auto low = table_scorer({0.1, 0.3, 0.5, 0.2, 0.4, 0.0});
  const auto inf = predict_causes(low, d, 7, PredictMode::inference);
  EXPECT_EQ(inf.causes, (std::vector<std::size_t>{6}));
  ASSERT_TRUE(inf.second_cause);
  EXPECT_EQ(inf.second_cause->j, 2u);
  // p* = 0.5 is not above the 0.5 threshold.
  const auto pre = predict_causes(low, d, 7, PredictMode::train_preprocess);
  EXPECT_EQ(pre.causes, (std::vector<std::size_t>{6, 2}));
  EXPECT_EQ(predict_causes(low, d, 7, PredictMode::inference, 0.45).causes,
            (std::vector<std::size_t>{6, 2}));
  const auto first = predict_causes(low, d, 1, PredictMode::train_preprocess);
  EXPECT_EQ(first.causes, (std::vector<std::size_t>{0}));
  EXPECT_FALSE(first.second_cause);
}

TEST(Baselines, FixtureScores) {
  const auto c = fixture();
  // Every gold set contains t-1; four gold causes lie further back.
  const auto prev = evaluate_cause_id(baseline(c, Baseline::always_prev), c.pairs);
  EXPECT_EQ(prev.tp, 12u);
  EXPECT_EQ(prev.fp, 0u);
  EXPECT_EQ(prev.fn, 4u);
  EXPECT_DOUBLE_EQ(prev.precision, 1.0);
  EXPECT_DOUBLE_EQ(prev.recall, 0.75);
  EXPECT_DOUBLE_EQ(prev.f1, 6.0 / 7.0);

  // Adding t-2 helps only at esc-001 t=3.
  const auto two = evaluate_cause_id(baseline(c, Baseline::always_prev_two), c.pairs);
  EXPECT_EQ(two.tp, 13u);
  EXPECT_EQ(two.fp, 7u);
  EXPECT_EQ(two.fn, 3u);
  EXPECT_DOUBLE_EQ(two.precision, 13.0 / 20.0);
  EXPECT_DOUBLE_EQ(two.recall, 13.0 / 16.0);

  const auto ov = overlap_analysis(baseline(c, Baseline::always_prev), c.pairs);
  EXPECT_DOUBLE_EQ(ov.exact, 8.0 / 12.0);
  EXPECT_DOUBLE_EQ(ov.partial, 4.0 / 12.0);
  EXPECT_DOUBLE_EQ(ov.disjoint, 0.0);
}

TEST(Evaluation, OverlapFractionsSumToOne) {
  const auto c = fixture();
  Rng rng(3);
  for (int round = 0; round < 200; ++round) {
    std::vector<CausePrediction> preds;
    for (const auto& p : c.pairs) {
      CausePrediction cp{p.dialogue_id, p.t, {}, std::nullopt};
      for (std::size_t j = 0; j < p.t; ++j)
        if (rng.bernoulli(0.3)) cp.causes.push_back(j);
      preds.push_back(cp);
    }
    const auto ov = overlap_analysis(preds, c.pairs);
    EXPECT_NEAR(ov.exact + ov.partial + ov.disjoint, 1.0, 1e-12);
    const auto ev = evaluate_cause_id(preds, c.pairs);
    EXPECT_EQ(ev.tp + ev.fn, 16u);
  }
}

TEST(Evaluation, Alignment) {
  const auto c = fixture();
  auto preds = baseline(c, Baseline::always_prev);
  preds.pop_back();
  EXPECT_THROW(evaluate_cause_id(preds, c.pairs), MisalignedInputs);
  preds.push_back({"nope", 1, {0}, std::nullopt});
  EXPECT_THROW(overlap_analysis(preds, c.pairs), MisalignedInputs);
}

TEST(Serialization, RoundTrip) {
  CausePrediction p{"d", 5, {4, 1}, SecondCause{1, 0.83}};
  const auto back = prediction_from_json(to_json(p));
  EXPECT_EQ(back.causes, p.causes);
  ASSERT_TRUE(back.second_cause);
  EXPECT_EQ(back.second_cause->j, 1u);
  EXPECT_DOUBLE_EQ(back.second_cause->p, 0.83);
  const auto bare = prediction_from_json(nlohmann::json{{"dialogue_id", "d"}, {"t", 1}, {"causes", {0}}});
  EXPECT_FALSE(bare.second_cause);
  EXPECT_THROW(prediction_from_json(nlohmann::json{{"t", 1}}), nlohmann::json::exception);
}

TEST(EndToEnd, ClassifierBeatsPreviousTurnBaseline) {
  const auto world = SyntheticWorld::make(4, 0.1);
  const auto train = synthesize_corpus(world, 40, 1), test = synthesize_corpus(world, 40, 2);
  std::vector<std::string> texts;
  for (const auto* c : {&train, &test})
    for (const auto& d : c->dialogues)
      for (const auto& u : d.utterances) texts.push_back(u.text);
  CIClassifier clf(std::make_shared<BowEncoder>(BowEncoder::fit(texts, "</s>", 16)));
  TrainConfig cfg;
  cfg.lr = 0.2;
  train_supervised(clf, build_supervised_set(train.pairs, train.dialogues), cfg);

  DialogueIndex idx(test.dialogues);
  std::vector<CausePrediction> preds, base;
  for (const auto& p : test.pairs) {
    preds.push_back(predict_causes(clf, idx.at(p.dialogue_id), p.t, PredictMode::inference));
    base.push_back(baseline_causes(p, Baseline::always_prev));
  }
  const auto ours = evaluate_cause_id(preds, test.pairs);
  const auto prev = evaluate_cause_id(base, test.pairs);
  EXPECT_GT(ours.f1, prev.f1);
  EXPECT_GT(ours.recall, prev.recall);
  // Gold sets always include t-1, so the baseline is never wrong, only incomplete.
  EXPECT_DOUBLE_EQ(prev.precision, 1.0);
}
