#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "cgd/metrics.hpp"

using namespace cgd;

namespace {

Tokens toks(std::string_view s) { return whitespace_tokens(s); }

// Straightforward BLEU written against joined n-gram strings, for cross-checking.
double reference_bleu(const Tokens& hyp, const Tokens& ref, int max_order) {
  if (hyp.empty()) return 0.0;
  auto grams = [](const Tokens& t, int n) {
    std::unordered_map<std::string, int> m;
    for (int i = 0; i + n <= static_cast<int>(t.size()); ++i) {
      std::string g;
      for (int k = 0; k < n; ++k) g += t[i + k] + "\x01";
      m[g]++;
    }
    return m;
  };
  double log_sum = 0;
  int used = 0;
  for (int n = 1; n <= max_order && n <= static_cast<int>(hyp.size()); ++n) {
    auto h = grams(hyp, n), r = grams(ref, n);
    int match = 0, total = 0;
    for (auto& [g, c] : h) {
      total += c;
      match += std::min(c, r.count(g) ? r[g] : 0);
    }
    double p = static_cast<double>(match) / total;
    if (match == 0) {
      if (n == 1) return 0.0;
      p = 0.5 / hyp.size();
    }
    log_sum += std::log(p);
    ++used;
  }
  const double c = hyp.size(), rl = ref.size();
  const double bp = c > rl ? 1.0 : std::exp(1 - rl / c);
  return bp * std::exp(log_sum / used);
}

Tokens random_sentence(Rng& rng, std::size_t max_len) {
  static const char* words[] = {"a", "b", "c", "d", "e", "f"};
  Tokens out(1 + rng.below(max_len));
  for (auto& w : out) w = words[rng.below(6)];
  return out;
}

}  // namespace

TEST(Bleu, HandComputedOrders) {
  const auto hyp = toks("the cat sat on the mat");
  const std::vector<Tokens> ref{toks("the cat sat on a mat")};
  // Clipped precisions 5/6, 3/5, 2/4, 1/3 and equal lengths.
  EXPECT_NEAR(bleu(hyp, ref, 1), 5.0 / 6.0, 1e-12);
  EXPECT_NEAR(bleu(hyp, ref, 2), std::sqrt(0.5), 1e-12);
  EXPECT_NEAR(bleu(hyp, ref, 3), std::cbrt(0.25), 1e-12);
  EXPECT_NEAR(bleu(hyp, ref, 4), std::pow(1.0 / 12.0, 0.25), 1e-12);
  const double avg = (5.0 / 6.0 + std::sqrt(0.5) + std::cbrt(0.25) + std::pow(1.0 / 12.0, 0.25)) / 4;
  EXPECT_NEAR(average_bleu(hyp, ref), avg, 1e-12);
}

TEST(Bleu, BrevityPenaltyAndShortHypothesis) {
  // Only orders 1 and 2 exist in a two-token hypothesis; both match fully.
  EXPECT_NEAR(bleu(toks("the cat"), {toks("the cat sat on")}, 4), std::exp(-1.0), 1e-12);
}

TEST(Bleu, SmoothsMissingHigherOrders) {
  EXPECT_NEAR(bleu(toks("a b c"), {toks("a c b")}, 4), std::cbrt(1.0 / 36.0), 1e-12);
  EXPECT_EQ(bleu(toks("x y"), {toks("a b")}, 4), 0.0);
}

TEST(Bleu, ClosestReferenceLength) {
  // Refs of length 3 and 6 for a 5-token hypothesis: 6 is closer.
  const auto hyp = toks("a b c d e");
  const std::vector<Tokens> refs{toks("a b c"), toks("a b c d e f")};
  EXPECT_NEAR(bleu(hyp, refs, 1), std::exp(1.0 - 6.0 / 5.0), 1e-12);
}

TEST(Bleu, EdgeCases) {
  EXPECT_EQ(bleu({}, {toks("a")}), 0.0);
  EXPECT_EQ(bleu(toks("a"), {}), 0.0);
  EXPECT_THROW(bleu(toks("a"), {toks("a")}, 0), ConfigError);
  EXPECT_DOUBLE_EQ(average_bleu("same words here", "same words here"), 1.0);
}

TEST(Bleu, MatchesReferenceImplementation) {
  Rng rng(17);
  for (int i = 0; i < 2000; ++i) {
    const auto h = random_sentence(rng, 9), r = random_sentence(rng, 9);
    for (int n = 1; n <= 4; ++n) {
      const double got = bleu(h, {r}, n);
      ASSERT_NEAR(got, std::clamp(reference_bleu(h, r, n), 0.0, 1.0), 1e-12)
          << join(h, " ") << " | " << join(r, " ") << " n=" << n;
      ASSERT_GE(got, 0.0);
      ASSERT_LE(got, 1.0);
    }
  }
}

TEST(Diversity, DistinctPooledWithinOutputs) {
  const std::vector<Tokens> outs{toks("a b a"), toks("a c")};
  EXPECT_DOUBLE_EQ(distinct_n(outs, 1), 3.0 / 5.0);
  // Bigrams never straddle outputs: "a b", "b a", "a c".
  EXPECT_DOUBLE_EQ(distinct_n(outs, 2), 1.0);
  EXPECT_THROW(distinct_n({toks("a")}, 2), DegenerateInput);
  EXPECT_THROW(distinct_n(outs, 0), ConfigError);
}

TEST(Diversity, DistinctIsOrderInvariantAndBounded) {
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    std::vector<Tokens> outs;
    for (int k = 0; k < 4; ++k) outs.push_back(random_sentence(rng, 6));
    const double d = distinct_n(outs, 1);
    auto shuffled = outs;
    rng.shuffle(shuffled);
    EXPECT_DOUBLE_EQ(distinct_n(shuffled, 1), d);
    EXPECT_GT(d, 0.0);
    EXPECT_LE(d, 1.0);
  }
}

TEST(Diversity, SelfBleu) {
  EXPECT_DOUBLE_EQ(self_bleu({toks("a b c"), toks("a b c"), toks("a b c")}), 1.0);
  EXPECT_DOUBLE_EQ(self_bleu({toks("a b"), toks("c d")}), 0.0);
  EXPECT_THROW(self_bleu({toks("a")}), DegenerateInput);
}

TEST(Kappa, HandComputed) {
  // n11=2, n10=1, n01=1, n00=2: po=2/3, pe=1/2.
  EXPECT_NEAR(cohen_kappa({1, 1, 0, 0, 1, 0}, {1, 0, 0, 0, 1, 1}).kappa, 1.0 / 3.0, 1e-12);
  EXPECT_DOUBLE_EQ(cohen_kappa({1, 0, 1}, {1, 0, 1}).kappa, 1.0);
  EXPECT_DOUBLE_EQ(cohen_kappa({1, 0}, {0, 1}).kappa, -1.0);
  const auto constant = cohen_kappa({1, 1, 1}, {1, 1, 1});
  EXPECT_TRUE(constant.degenerate);
  EXPECT_EQ(constant.kappa, 1.0);
  EXPECT_THROW(cohen_kappa({1}, {1, 0}), MisalignedInputs);
  EXPECT_THROW(cohen_kappa({}, {}), InsufficientData);
}

TEST(Kappa, SymmetricAndBounded) {
  Rng rng(8);
  for (int i = 0; i < 500; ++i) {
    std::vector<int> a(10), b(10);
    for (auto& x : a) x = rng.bernoulli(0.4);
    for (auto& x : b) x = rng.bernoulli(0.6);
    const auto ab = cohen_kappa(a, b), ba = cohen_kappa(b, a);
    EXPECT_NEAR(ab.kappa, ba.kappa, 1e-12);
    EXPECT_GE(ab.kappa, -1.0 - 1e-12);
    EXPECT_LE(ab.kappa, 1.0 + 1e-12);
  }
}

TEST(SpanOverlap, TokenF1) {
  EXPECT_NEAR(pair_f1({0, 1, 2}, {1, 2, 3, 4}), 4.0 / 7.0, 1e-12);
  EXPECT_EQ(pair_f1({}, {}), 1.0);
  EXPECT_EQ(pair_f1({1}, {}), 0.0);
  EXPECT_NEAR(span_f1({{0, 1}, {0, 1}, {1}}), (1.0 + 2.0 / 3.0 + 2.0 / 3.0) / 3.0, 1e-12);
  EXPECT_THROW(span_f1({{0}}), InsufficientData);
}

TEST(SpanOverlap, CharacterSpansToTokens) {
  const std::string text = "I lost my job last week and I feel lost";
  EXPECT_EQ(span_token_indices(text, {{0, 23}}), (std::set<std::size_t>{0, 1, 2, 3, 4, 5}));
  // A span that clips part of a token still covers it.
  EXPECT_EQ(span_token_indices(text, {{3, 4}}), (std::set<std::size_t>{1}));
  EXPECT_TRUE(span_token_indices(text, {}).empty());
}

TEST(Agreement, CorpusLevel) {
  const auto a = load_corpus(std::string(CGD_TEST_DATA) + "/fixture_corpus.jsonl");
  const auto same = annotation_agreement(a, a);
  EXPECT_EQ(same.n_pairs, 12u);
  EXPECT_EQ(same.kappa.kappa, 1.0);
  EXPECT_EQ(same.span_f1, 1.0);
  EXPECT_EQ(same.n_span_slots, 16u);

  // Second annotator drops the t=1 span of esc-001 and the cause 0 of t=5.
  Corpus b = a;
  b.pairs[0].cause_spans.clear();
  b.pairs[2].cause_indices.erase(0);
  b.pairs[2].cause_spans.erase(0);
  const auto r = annotation_agreement(a, b);
  EXPECT_EQ(r.n_slots, same.n_slots);
  EXPECT_EQ(r.n_span_slots, 15u);
  // Span "I lost my job last week" (6 tokens) vs whole utterance (10 tokens): F1 = 12/16.
  EXPECT_NEAR(r.span_f1, (14.0 + 0.75) / 15.0, 1e-12);
  EXPECT_LT(r.kappa.kappa, 1.0);

  Corpus c = a;
  c.dialogues.pop_back();
  EXPECT_THROW(annotation_agreement(a, c), MisalignedInputs);
}

TEST(Significance, MatchesScipyWelch) {
  struct Case {
    std::vector<double> a, b;
    double t, p, df;
  };
  const Case cases[] = {
      {{1, 2, 3, 4, 5}, {2, 4, 6, 8, 10, 12}, -2.3763541031440183, 0.04928433820673049, 6.972255729794934},
      {{10.1, 9.8, 10.4, 10.0}, {9.0, 9.5, 9.2}, 4.391304347826088, 0.009322409213415317, 4.4360762804559055},
      {{0.5, 0.51, 0.49}, {0.5, 0.52, 0.47, 0.5}, 0.2116036847575795, 0.8416379564417373, 4.511557788944723},
  };
  for (const auto& c : cases) {
    const auto r = two_sample_t_test(c.a, c.b);
    EXPECT_NEAR(r.t_statistic, c.t, 1e-9);
    EXPECT_NEAR(r.p_value, c.p, 1e-6);
    EXPECT_NEAR(r.df, c.df, 1e-9);
    EXPECT_EQ(r.significant, c.p <= 0.05);
  }
}

TEST(Significance, StudentTail) {
  EXPECT_NEAR(student_t_two_sided_p(2.5, 7), 0.040992218585752874, 1e-9);
  EXPECT_NEAR(student_t_two_sided_p(0.1, 30), 0.9210096117902711, 1e-9);
  EXPECT_NEAR(student_t_two_sided_p(10, 3), 0.0021283990584141494, 1e-9);
  EXPECT_DOUBLE_EQ(student_t_two_sided_p(0, 5), 1.0);
}

TEST(Significance, AntisymmetricAndDegenerate) {
  const std::vector<double> a{1, 3, 2, 5}, b{4, 6, 5, 9, 7};
  const auto ab = two_sample_t_test(a, b), ba = two_sample_t_test(b, a);
  EXPECT_NEAR(ab.t_statistic, -ba.t_statistic, 1e-12);
  EXPECT_NEAR(ab.p_value, ba.p_value, 1e-12);

  const auto same = two_sample_t_test({2, 2}, {2, 2, 2});
  EXPECT_TRUE(same.degenerate);
  EXPECT_EQ(same.p_value, 1.0);
  EXPECT_FALSE(same.significant);
  const auto apart = two_sample_t_test({3, 3}, {2, 2});
  EXPECT_TRUE(apart.degenerate);
  EXPECT_TRUE(std::isinf(apart.t_statistic));
  EXPECT_EQ(apart.p_value, 0.0);
  EXPECT_THROW(two_sample_t_test({1}, {1, 2}), InsufficientData);
}

TEST(Bws, FixtureScores) {
  std::ifstream in(std::string(CGD_TEST_DATA) + "/bws_fixture.csv");
  const auto records = load_bws_csv(in);
  std::map<std::string, std::vector<BWSRecord>> by_exp;
  for (const auto& r : records) by_exp[r.experiment_id].push_back(r);
  const auto s1 = bws_scores(by_exp.at("exp1"));
  EXPECT_EQ(s1.at("cgd"), 3);
  EXPECT_EQ(s1.at("baseline"), -3);
  for (const auto& [exp, recs] : by_exp) {
    long total = 0;
    for (const auto& [sys, v] : bws_scores(recs)) total += v;
    EXPECT_EQ(total, 0) << exp;
  }
}

TEST(Bws, Validation) {
  std::istringstream bad_metric("e,i,a,b,taste,r1,a_best\n");
  EXPECT_THROW(load_bws_csv(bad_metric), MalformedRecord);
  std::istringstream bad_judgment("e,i,a,b,fluency,r1,best\n");
  EXPECT_THROW(load_bws_csv(bad_judgment), MalformedRecord);
  std::istringstream short_row("e,i,a,b,fluency\n");
  EXPECT_THROW(load_bws_csv(short_row), MalformedRecord);
  EXPECT_THROW(bws_scores({{"e1", "i", "a", "b", "fluency", {}}, {"e2", "i", "a", "b", "fluency", {}}}),
               MisalignedInputs);
  EXPECT_THROW(bws_scores({{"e1", "i", "a", "a", "fluency", {}}}), MisalignedInputs);
}
