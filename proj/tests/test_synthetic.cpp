#include <gtest/gtest.h>

#include <cmath>

#include "cgd/synthetic.hpp"

using namespace cgd;

namespace {

// Brute-force d-separation: enumerate simple undirected paths and test each for activity.
bool path_d_connected(const LatentGraph& g, std::size_t x, std::size_t y, const std::set<std::size_t>& z) {
  const auto ch = g.children();
  std::vector<std::set<std::size_t>> desc(g.n);
  for (std::size_t v = g.n; v-- > 0;) {
    desc[v].insert(v);
    for (auto c : ch[v]) desc[v].insert(desc[c].begin(), desc[c].end());
  }
  auto edge = [&](std::size_t a, std::size_t b) { return g.parents[b].count(a) > 0; };
  auto active = [&](const std::vector<std::size_t>& path) {
    for (std::size_t i = 1; i + 1 < path.size(); ++i) {
      const auto a = path[i - 1], m = path[i], b = path[i + 1];
      const bool collider = edge(a, m) && edge(b, m);
      if (collider) {
        bool hit = false;
        for (auto d : desc[m]) hit = hit || z.count(d);
        if (!hit) return false;
      } else if (z.count(m)) {
        return false;
      }
    }
    return true;
  };
  std::vector<std::size_t> path{x};
  std::vector<char> on(g.n, 0);
  on[x] = 1;
  std::function<bool(std::size_t)> walk = [&](std::size_t v) {
    if (v == y) return active(path);
    std::vector<std::size_t> nbrs(g.parents[v].begin(), g.parents[v].end());
    nbrs.insert(nbrs.end(), ch[v].begin(), ch[v].end());
    for (auto n : nbrs) {
      if (on[n]) continue;
      on[n] = 1;
      path.push_back(n);
      const bool found = walk(n);
      path.pop_back();
      on[n] = 0;
      if (found) return true;
    }
    return false;
  };
  return walk(x);
}

LatentGraph random_dag(Rng& rng, std::size_t n, double p) {
  LatentGraph g(n);
  for (std::size_t b = 1; b < n; ++b)
    for (std::size_t a = 0; a < b; ++a)
      if (rng.bernoulli(p)) g.add_edge(a, b);
  return g;
}

SyntheticWorld quiet_world(std::uint64_t seed) {
  SyntheticWorld w;
  w.seed = seed;
  w.noise_rate = 0.0;
  w.build_vocabulary();
  return w;
}

}  // namespace

TEST(DSeparation, TextbookStructures) {
  LatentGraph chain(3), fork(3), collider(4);
  chain.add_edge(0, 1);
  chain.add_edge(1, 2);
  EXPECT_TRUE(d_connected(chain, 0, 2, {}));
  EXPECT_FALSE(d_connected(chain, 0, 2, {1}));
  fork.add_edge(0, 1);
  fork.add_edge(0, 2);
  EXPECT_FALSE(d_connected(fork, 1, 2, {0}));
  collider.add_edge(0, 2);
  collider.add_edge(1, 2);
  collider.add_edge(2, 3);
  EXPECT_FALSE(d_connected(collider, 0, 1, {}));
  EXPECT_TRUE(d_connected(collider, 0, 1, {2}));
  EXPECT_TRUE(d_connected(collider, 0, 1, {3}));
}

TEST(DSeparation, MatchesPathEnumeration) {
  Rng rng(44);
  for (int round = 0; round < 300; ++round) {
    const std::size_t n = 3 + rng.below(5);
    const auto g = random_dag(rng, n, 0.35);
    for (std::size_t x = 0; x < n; ++x)
      for (std::size_t y = x + 1; y < n; ++y) {
        std::set<std::size_t> z;
        for (std::size_t v = 0; v < n; ++v)
          if (v != x && v != y && rng.bernoulli(0.3)) z.insert(v);
        ASSERT_EQ(d_connected(g, x, y, z), path_d_connected(g, x, y, z)) << "round " << round;
        ASSERT_EQ(d_connected(g, x, y, z), d_connected(g, y, x, z));
      }
  }
}

TEST(Graphs, SampledGraphsSatisfyAssumptions) {
  SyntheticWorld w;
  for (int s = 0; s < 200; ++s) {
    const auto g = sample_graph(w, 2 + static_cast<std::size_t>(s % 12), static_cast<std::uint64_t>(s));
    ASSERT_TRUE(g.satisfies_assumptions());
    ASSERT_EQ(g.neighborhood[1], Neighborhood::d);
    for (std::size_t v = 0; v < g.n; ++v) {
      ASSERT_EQ(g.is_response[v], v % 2 == 1);
      if (!g.is_response[v]) {
        ASSERT_LE(g.parents[v].size(), 1u);
      }
    }
  }
  EXPECT_THROW(sample_graph(w, 1, 0), ConfigError);
  const auto a = sample_graph(w, 12, 5), b = sample_graph(w, 12, 5);
  EXPECT_EQ(a.edges(), b.edges());
}

TEST(Graphs, OracleFollowsNeighborhood) {
  for (auto nb : {Neighborhood::a, Neighborhood::b, Neighborhood::c, Neighborhood::d}) {
    SyntheticWorld w;
    w.mix = StructureMix::only(nb);
    for (std::uint64_t s = 0; s < 40; ++s) {
      const auto g = sample_graph(w, 12, s);
      for (std::size_t t = 3; t < g.n; t += 2) {
        ASSERT_EQ(g.neighborhood[t], nb);
        EXPECT_TRUE(oracle_ci(g, t - 1, t));
        std::size_t dependent = 0;
        for (std::size_t j = 0; j + 1 < t; ++j) dependent += oracle_ci(g, j, t);
        if (nb == Neighborhood::a || nb == Neighborhood::b) {
          // The second parent is dependent given z_{t-1}.
          const auto j = *g.parents[t].begin();
          EXPECT_TRUE(oracle_ci(g, j, t));
          EXPECT_GE(dependent, 1u);
        } else {
          EXPECT_EQ(dependent, 0u);
        }
      }
    }
  }
  LatentGraph g(2);
  EXPECT_THROW(oracle_ci(g, 1, 1), ConfigError);
}

TEST(Graphs, EdgesMustPointForward) {
  LatentGraph g(3);
  EXPECT_THROW(g.add_edge(2, 1), ConfigError);
  EXPECT_THROW(g.add_edge(1, 3), ConfigError);
  g.is_response[2] = true;
  g.add_edge(0, 2);
  EXPECT_FALSE(g.satisfies_assumptions());
}

TEST(World, ValidationAndVocabulary) {
  const auto w = SyntheticWorld::make(3, 0.1);
  std::set<std::string> words;
  for (const auto& word : w.all_words()) EXPECT_TRUE(words.insert(word).second) << word;
  EXPECT_EQ(words.size(), w.n_components * w.n_values * w.words_per_value);
  EXPECT_THROW(SyntheticWorld::make(3, 1.0), ConfigError);
  SyntheticWorld bad;
  bad.mix.weights = {0.5, 0.5, 0.5, 0.0};
  EXPECT_THROW(bad.validate(), ConfigError);
  bad.mix = StructureMix{};
  bad.copy_second = 0.8;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(World, JsonRoundTrip) {
  auto w = SyntheticWorld::make(17, 0.2);
  w.mix = StructureMix::only(Neighborhood::b);
  const auto back = world_from_json(to_json(w));
  EXPECT_EQ(back.vocabulary, w.vocabulary);
  EXPECT_EQ(back.mix.weights, w.mix.weights);
  EXPECT_EQ(back.noise_rate, 0.2);
  EXPECT_EQ(to_json(back), to_json(w));
  auto j = to_json(w);
  j.erase("vocabulary");
  EXPECT_EQ(world_from_json(j).vocabulary, w.vocabulary);
}

TEST(Corpus, GoldCausesAreGraphParents) {
  const auto w = SyntheticWorld::make(2, 0.1);
  const auto c = synthesize_corpus(w, 25, 8);
  ASSERT_EQ(c.dialogues.size(), 25u);
  std::size_t k = 0;
  for (std::size_t i = 0; i < c.dialogues.size(); ++i) {
    const auto& d = c.dialogues[i];
    const auto& g = c.graphs[i];
    EXPECT_GE(d.utterances.size(), 8u);
    EXPECT_LE(d.utterances.size(), 12u);
    EXPECT_EQ(d.source, Source::synthetic);
    for (std::size_t t = 1; t < g.n; t += 2, ++k) {
      const auto& p = c.pairs.at(k);
      EXPECT_EQ(p.dialogue_id, d.id);
      EXPECT_EQ(p.t, t);
      EXPECT_EQ(p.cause_indices, g.parents[t]);
      EXPECT_TRUE(p.cause_indices.count(t - 1));
    }
  }
  EXPECT_EQ(k, c.pairs.size());
  const auto again = synthesize_corpus(w, 25, 8);
  for (std::size_t i = 0; i < c.dialogues.size(); ++i) EXPECT_EQ(again.dialogues[i], c.dialogues[i]);
  EXPECT_NE(synthesize_corpus(w, 1, 9).dialogues[0].id, c.dialogues[0].id);
  EXPECT_THROW(synthesize_corpus(w, 1, 0, 5, 4), ConfigError);
}

TEST(Decoder, RecoversNoiselessLatents) {
  const auto w = quiet_world(6);
  const WorldDecoder dec(w);
  Rng rng(1);
  for (int i = 0; i < 50; ++i) {
    Latent z(w.n_components);
    for (auto& v : z) v = static_cast<std::size_t>(rng.below(w.n_values));
    EXPECT_EQ(dec.decode(render_text(z, w, rng)), z);
  }
  const auto empty = dec.decode("nothing here");
  for (auto v : empty) EXPECT_EQ(v, w.n_values);
}

TEST(Cmi, PluginHandValues) {
  // X = Y uniform on {0,1}, Z constant: I = ln 2.
  EXPECT_NEAR(detail::plugin_cmi({0, 1, 0, 1}, {0, 1, 0, 1}, {0, 0, 0, 0}), std::log(2.0), 1e-12);
  // Full product table: zero.
  EXPECT_NEAR(detail::plugin_cmi({0, 0, 1, 1}, {0, 1, 0, 1}, {0, 0, 0, 0}), 0.0, 1e-12);
  // Z determines X: nothing left to share.
  EXPECT_NEAR(detail::plugin_cmi({0, 1, 0, 1}, {0, 1, 1, 0}, {0, 1, 0, 1}), 0.0, 1e-12);
}

TEST(Cmi, EmpiricalCheckMatchesOracle) {
  const auto w = SyntheticWorld::make(5, 0.1);
  LatentGraph b(4), d(4);
  for (auto* g : {&b, &d}) {
    g->is_response[1] = g->is_response[3] = true;
    g->add_edge(0, 1);
    g->add_edge(2, 3);
  }
  b.add_edge(1, 3);
  const auto dep = empirical_ci_check(w, b, 1, 3, 1000, 3);
  const auto ind = empirical_ci_check(w, d, 1, 3, 1000, 3);
  EXPECT_TRUE(oracle_ci(b, 1, 3));
  EXPECT_FALSE(oracle_ci(d, 1, 3));
  EXPECT_TRUE(dep.dependent);
  EXPECT_FALSE(ind.dependent);
  EXPECT_GT(dep.cmi, ind.cmi);
  EXPECT_THROW(empirical_ci_check(w, b, 1, 3, 999, 3), InsufficientSamples);
  EXPECT_THROW(empirical_ci_check(w, b, 3, 3, 1000, 3), ConfigError);
}

TEST(WorldGenerator, UsesDecodedContext) {
  const auto w = quiet_world(9);
  const WorldGenerator full(w, false), last(w, true);
  const WorldDecoder dec(w);
  Rng rng(2);
  Latent za(w.n_components, 0), zb(w.n_components, 1);
  const auto ua = render_text(za, w, rng), ub = render_text(zb, w, rng);
  DecodeParams p;
  p.seed = 4;
  EXPECT_EQ(full.generate(ua + "\n" + ub, p), full.generate(ua + "\n" + ub, p));
  // Copies from the first turn show up only when it is treated as z_j.
  std::size_t zeros_full = 0, zeros_last = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    p.seed = seed;
    for (auto v : dec.decode(full.generate(ua + "\n" + ub, p))) zeros_full += v == 0;
    for (auto v : dec.decode(last.generate(ua + "\n" + ub, p))) zeros_last += v == 0;
  }
  EXPECT_GT(zeros_full, 100u);
  EXPECT_LT(zeros_last, 40u);
  EXPECT_EQ(last.name(), "world-last");
  EXPECT_EQ(full.score_target(ua, "x y").size(), 2u);
}
