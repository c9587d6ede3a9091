#pragma once

// Synthetic dialogues drawn from known latent causal graphs.
//
// Each utterance has a latent vector of K independent components with V values each.
// Every (component, value) owns a disjoint set of pseudo-words; an utterance renders a
// few words per component. A node without parents draws fresh values; a node copies each
// component from one of its parents with fixed probabilities, otherwise draws fresh.
// Components are independent, so every component follows the same DAG and the joint
// distribution is faithful to it.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "cgd/common.hpp"
#include "cgd/corpus.hpp"
#include "cgd/encoder.hpp"
#include "cgd/generators.hpp"

namespace cgd {

class InsufficientSamples : public Error {
 public:
  explicit InsufficientSamples(const std::string& what) : Error("InsufficientSamples", what) {}
};

/// Response neighborhoods. a: z_j -> z_t and z_j -> z_{t-1}; b: z_j -> z_t with z_j and
/// z_{t-1} unconnected; c: only z_{t-1} -> z_t, plus a chain z_j -> z_k -> z_{t-1};
/// d: only z_{t-1} -> z_t.
enum class Neighborhood { a, b, c, d };

inline std::string to_string(Neighborhood n) {
  switch (n) {
    case Neighborhood::a: return "a";
    case Neighborhood::b: return "b";
    case Neighborhood::c: return "c";
    case Neighborhood::d: return "d";
  }
  return "d";
}

struct StructureMix {
  std::array<double, 4> weights{0.25, 0.25, 0.25, 0.25};  // a, b, c, d

  static StructureMix only(Neighborhood n) {
    StructureMix m;
    m.weights = {0, 0, 0, 0};
    m.weights[static_cast<std::size_t>(n)] = 1.0;
    return m;
  }
};

struct SyntheticWorld {
  std::size_t n_components = 12;
  std::size_t n_values = 8;
  std::size_t words_per_value = 4;
  std::size_t words_per_component = 4;
  double noise_rate = 0.1;
  StructureMix mix;
  double copy_single = 0.6;  // one parent: copy probability per component
  double copy_second = 0.6;  // two parents: copy from z_j
  double copy_prev = 0.3;    // two parents: copy from z_{t-1}
  std::uint64_t seed = 0;
  std::vector<std::vector<std::vector<std::string>>> vocabulary;  // [component][value][word]

  /// Builds the disjoint pseudo-word vocabulary from the seed.
  void build_vocabulary() {
    static const char* kOnsets[] = {"b", "d", "f", "g", "k", "l", "m", "n",
                                    "p", "r", "s", "t", "v", "z", "sh"};
    static const char* kVowels[] = {"a", "e", "i", "o", "u"};
    std::vector<std::string> syllables;
    for (auto* o : kOnsets)
      for (auto* v : kVowels) syllables.push_back(std::string(o) + v);
    const std::size_t need = n_components * n_values * words_per_value;
    const std::size_t cap = syllables.size() * syllables.size() * syllables.size();
    if (need > cap) throw ConfigError("world too large for the pseudo-word inventory");
    std::vector<std::size_t> ids(cap);
    std::iota(ids.begin(), ids.end(), 0);
    Rng rng(derive_seed(seed, "vocabulary"));
    rng.shuffle(ids);
    const std::size_t s = syllables.size();
    vocabulary.assign(n_components, std::vector<std::vector<std::string>>(n_values));
    std::size_t k = 0;
    for (auto& comp : vocabulary)
      for (auto& val : comp)
        for (std::size_t w = 0; w < words_per_value; ++w, ++k) {
          const auto id = ids[k];
          val.push_back(syllables[id / (s * s)] + syllables[(id / s) % s] + syllables[id % s]);
        }
  }

  static SyntheticWorld make(std::uint64_t seed, double noise_rate = 0.1,
                             StructureMix mix = {}) {
    SyntheticWorld w;
    w.seed = seed;
    w.noise_rate = noise_rate;
    w.mix = mix;
    w.validate();
    w.build_vocabulary();
    return w;
  }

  void validate() const {
    if (n_components == 0 || n_values < 2 || words_per_value == 0 ||
        words_per_component == 0 || words_per_component > words_per_value)
      throw ConfigError("invalid world dimensions");
    if (noise_rate < 0.0 || noise_rate >= 1.0) throw ConfigError("noise_rate must lie in [0, 1)");
    double s = 0.0;
    for (double x : mix.weights) {
      if (x < 0.0) throw ConfigError("structure weights must be non-negative");
      s += x;
    }
    if (std::abs(s - 1.0) > 1e-9) throw ConfigError("structure weights must sum to 1");
    if (copy_second + copy_prev > 1.0) throw ConfigError("copy probabilities exceed 1");
  }

  std::vector<std::string> all_words() const {
    std::vector<std::string> out;
    for (const auto& c : vocabulary)
      for (const auto& v : c) out.insert(out.end(), v.begin(), v.end());
    return out;
  }
};

inline nlohmann::json to_json(const SyntheticWorld& w) {
  return {{"version", 1},
          {"n_components", w.n_components},
          {"n_values", w.n_values},
          {"words_per_value", w.words_per_value},
          {"words_per_component", w.words_per_component},
          {"noise_rate", w.noise_rate},
          {"mix", {{"a", w.mix.weights[0]}, {"b", w.mix.weights[1]}, {"c", w.mix.weights[2]}, {"d", w.mix.weights[3]}}},
          {"copy_single", w.copy_single},
          {"copy_second", w.copy_second},
          {"copy_prev", w.copy_prev},
          {"seed", w.seed},
          {"vocabulary", w.vocabulary}};
}

inline SyntheticWorld world_from_json(const nlohmann::json& j) {
  SyntheticWorld w;
  w.n_components = j.at("n_components").get<std::size_t>();
  w.n_values = j.at("n_values").get<std::size_t>();
  w.words_per_value = j.at("words_per_value").get<std::size_t>();
  w.words_per_component = j.at("words_per_component").get<std::size_t>();
  w.noise_rate = j.at("noise_rate").get<double>();
  const auto& m = j.at("mix");
  w.mix.weights = {m.at("a").get<double>(), m.at("b").get<double>(), m.at("c").get<double>(),
                   m.at("d").get<double>()};
  w.copy_single = j.value("copy_single", 0.6);
  w.copy_second = j.value("copy_second", 0.6);
  w.copy_prev = j.value("copy_prev", 0.3);
  w.seed = j.at("seed").get<std::uint64_t>();
  w.validate();
  if (j.contains("vocabulary"))
    w.vocabulary = j["vocabulary"].get<std::vector<std::vector<std::vector<std::string>>>>();
  else
    w.build_vocabulary();
  return w;
}

// ---------------------------------------------------------------------------
// Graphs

struct LatentGraph {
  std::size_t n = 0;
  std::vector<std::set<std::size_t>> parents;
  std::vector<bool> is_response;
  std::vector<std::optional<Neighborhood>> neighborhood;  // per response node

  explicit LatentGraph(std::size_t nodes = 0)
      : n(nodes), parents(nodes), is_response(nodes, false), neighborhood(nodes) {}

  void add_edge(std::size_t from, std::size_t to) {
    if (from >= to || to >= n) throw ConfigError("edges must point forward in time");
    parents[to].insert(from);
  }

  std::vector<std::pair<std::size_t, std::size_t>> edges() const {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t v = 0; v < n; ++v)
      for (auto p : parents[v]) out.emplace_back(p, v);
    return out;
  }

  std::vector<std::vector<std::size_t>> children() const {
    std::vector<std::vector<std::size_t>> ch(n);
    for (std::size_t v = 0; v < n; ++v)
      for (auto p : parents[v]) ch[p].push_back(v);
    return ch;
  }

  /// Every response has z_{t-1} as a parent and at most two parents.
  bool satisfies_assumptions() const {
    for (std::size_t v = 0; v < n; ++v) {
      if (parents[v].size() > 2) return false;
      if (is_response[v] && (v == 0 || !parents[v].count(v - 1))) return false;
    }
    return true;
  }
};

namespace detail {

// j in [lo, hi] with weight 0.5^(hi - j).
inline std::size_t recent_biased(Rng& rng, std::size_t lo, std::size_t hi) {
  std::vector<double> w;
  for (std::size_t j = lo; j <= hi; ++j) w.push_back(std::pow(0.5, static_cast<double>(hi - j)));
  return lo + rng.categorical(w);
}

}  // namespace detail

/// Speakers alternate; odd indices are responses. Each response draws its neighborhood
/// from the structure mix (t = 1 always gets d).
inline LatentGraph sample_graph(const SyntheticWorld& world, std::size_t n_turns, std::uint64_t seed) {
  if (n_turns < 2) throw ConfigError("a dialogue needs at least 2 turns");
  LatentGraph g(n_turns);
  Rng rng(derive_seed(seed, "graph"));
  for (std::size_t t = 1; t < n_turns; t += 2) {
    g.is_response[t] = true;
    auto nb = static_cast<Neighborhood>(rng.categorical(
        std::vector<double>(world.mix.weights.begin(), world.mix.weights.end())));
    if (t < 2 || (nb == Neighborhood::c && t < 3)) nb = Neighborhood::d;
    g.neighborhood[t] = nb;
    g.add_edge(t - 1, t);
    switch (nb) {
      case Neighborhood::d: break;
      case Neighborhood::b: g.add_edge(detail::recent_biased(rng, 0, t - 2), t); break;
      case Neighborhood::a: {
        const auto j = detail::recent_biased(rng, 0, t - 2);
        g.add_edge(j, t);
        if (g.parents[t - 1].empty()) g.add_edge(j, t - 1);
        break;
      }
      case Neighborhood::c: {
        const auto k = detail::recent_biased(rng, 1, t - 2);
        if (g.parents[t - 1].empty()) g.add_edge(k, t - 1);
        if (g.parents[k].empty()) g.add_edge(detail::recent_biased(rng, 0, k - 1), k);
        break;
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// d-separation

/// True iff x and y are d-connected given `given` (reachability over active trails).
inline bool d_connected(const LatentGraph& g, std::size_t x, std::size_t y,
                        const std::set<std::size_t>& given) {
  if (x == y) return true;
  const auto ch = g.children();
  // Nodes with a descendant (or themselves) in the conditioning set.
  std::vector<char> anc(g.n, 0);
  std::vector<std::size_t> stack(given.begin(), given.end());
  while (!stack.empty()) {
    auto v = stack.back();
    stack.pop_back();
    if (anc[v]) continue;
    anc[v] = 1;
    for (auto p : g.parents[v]) stack.push_back(p);
  }
  // State: (node, arrived from a child = going up).
  std::vector<std::array<char, 2>> seen(g.n, {0, 0});
  std::vector<std::pair<std::size_t, int>> q{{x, 1}};
  while (!q.empty()) {
    auto [v, up] = q.back();
    q.pop_back();
    if (seen[v][static_cast<std::size_t>(up)]) continue;
    seen[v][static_cast<std::size_t>(up)] = 1;
    if (v == y && !given.count(v)) return true;
    const bool observed = given.count(v) > 0;
    if (up && !observed) {
      for (auto p : g.parents[v]) q.emplace_back(p, 1);
      for (auto c : ch[v]) q.emplace_back(c, 0);
    } else if (!up) {
      if (!observed)
        for (auto c : ch[v]) q.emplace_back(c, 0);
      if (anc[v])
        for (auto p : g.parents[v]) q.emplace_back(p, 1);
    }
  }
  return false;
}

/// Is z_t dependent on z_j given z_{t-1}?
inline bool oracle_ci(const LatentGraph& g, std::size_t j, std::size_t t) {
  if (t == 0 || j >= t) throw ConfigError("oracle_ci needs j < t");
  if (j == t - 1) return true;
  return d_connected(g, j, t, {t - 1});
}

// ---------------------------------------------------------------------------
// Rendering

using Latent = std::vector<std::size_t>;

inline std::vector<Latent> sample_latents(const LatentGraph& g, const SyntheticWorld& w, Rng& rng) {
  std::vector<Latent> z(g.n, Latent(w.n_components));
  for (std::size_t v = 0; v < g.n; ++v) {
    const auto& ps = g.parents[v];
    for (std::size_t c = 0; c < w.n_components; ++c) {
      const double u = rng.uniform();
      const std::size_t fresh = static_cast<std::size_t>(rng.below(w.n_values));
      if (ps.empty()) {
        z[v][c] = fresh;
      } else if (ps.size() == 1) {
        z[v][c] = u < w.copy_single ? z[*ps.begin()][c] : fresh;
      } else {
        // the earlier parent plays z_j, the later z_{t-1}
        const std::size_t pj = *ps.begin(), pp = *ps.rbegin();
        z[v][c] = u < w.copy_second ? z[pj][c] : (u < w.copy_second + w.copy_prev ? z[pp][c] : fresh);
      }
    }
  }
  return z;
}

inline std::string render_text(const Latent& z, const SyntheticWorld& w, Rng& rng) {
  const auto& vocab = w.vocabulary;
  const std::size_t total = w.n_components * w.n_values * w.words_per_value;
  std::vector<std::string> words;
  for (std::size_t c = 0; c < w.n_components; ++c) {
    auto pool = vocab[c][z[c]];
    rng.shuffle(pool);
    for (std::size_t k = 0; k < w.words_per_component; ++k) {
      if (rng.bernoulli(w.noise_rate)) {
        const auto id = static_cast<std::size_t>(rng.below(total));
        const auto per_c = w.n_values * w.words_per_value;
        words.push_back(vocab[id / per_c][(id % per_c) / w.words_per_value][id % w.words_per_value]);
      } else {
        words.push_back(pool[k]);
      }
    }
  }
  rng.shuffle(words);
  return join(words, " ");
}

struct RenderedDialogue {
  Dialogue dialogue;
  std::vector<HistoryResponsePair> pairs;
  std::vector<Latent> latents;
};

/// Renders a graph; gold causes of each response are its graph parents.
inline RenderedDialogue render_dialogue(const LatentGraph& g, const SyntheticWorld& w,
                                        std::uint64_t seed, const std::string& id = "syn") {
  Rng rng(derive_seed(seed, "render"));
  RenderedDialogue out;
  out.latents = sample_latents(g, w, rng);
  out.dialogue.id = id;
  out.dialogue.source = Source::synthetic;
  for (std::size_t v = 0; v < g.n; ++v)
    out.dialogue.utterances.push_back(
        {v, v % 2 ? Speaker::generic_b : Speaker::generic_a, render_text(out.latents[v], w, rng), {}});
  for (std::size_t t = 1; t < g.n; ++t)
    if (g.is_response[t]) out.pairs.push_back({id, t, g.parents[t], {}});
  return out;
}

struct SyntheticCorpus {
  std::vector<Dialogue> dialogues;
  std::vector<HistoryResponsePair> pairs;
  std::vector<LatentGraph> graphs;
};

/// n dialogues with lengths uniform in [min_turns, max_turns]; dialogue i uses the seed
/// stream ("synthesis", i).
inline SyntheticCorpus synthesize_corpus(const SyntheticWorld& w, std::size_t n_dialogues,
                                         std::uint64_t seed, std::size_t min_turns = 8,
                                         std::size_t max_turns = 12,
                                         const std::string& prefix = "syn") {
  if (min_turns < 2 || max_turns < min_turns) throw ConfigError("invalid turn range");
  SyntheticCorpus c;
  for (std::size_t i = 0; i < n_dialogues; ++i) {
    const auto s = derive_seed(seed, "synthesis", i);
    Rng len_rng(derive_seed(s, "length"));
    const auto turns = min_turns + static_cast<std::size_t>(len_rng.below(max_turns - min_turns + 1));
    auto g = sample_graph(w, turns, s);
    auto r = render_dialogue(g, w, s, prefix + "-" + std::to_string(seed) + "-" + std::to_string(i));
    c.dialogues.push_back(std::move(r.dialogue));
    c.pairs.insert(c.pairs.end(), r.pairs.begin(), r.pairs.end());
    c.graphs.push_back(std::move(g));
  }
  return c;
}

// ---------------------------------------------------------------------------
// Decoding and the empirical CI check

/// Maps rendered words back to (component, value).
class WorldDecoder {
 public:
  explicit WorldDecoder(const SyntheticWorld& w) : n_components_(w.n_components), n_values_(w.n_values) {
    for (std::size_t c = 0; c < w.n_components; ++c)
      for (std::size_t v = 0; v < w.n_values; ++v)
        for (const auto& word : w.vocabulary[c][v]) lookup_.emplace(word, std::make_pair(c, v));
  }

  /// Majority value per component; n_values when no word of the component occurs.
  Latent decode(const std::string& text) const {
    std::vector<std::vector<int>> counts(n_components_, std::vector<int>(n_values_, 0));
    for (const auto& w : normalized_tokens(text))
      if (auto it = lookup_.find(w); it != lookup_.end()) counts[it->second.first][it->second.second]++;
    Latent z(n_components_, n_values_);
    for (std::size_t c = 0; c < n_components_; ++c) {
      int best = 0;
      for (std::size_t v = 0; v < n_values_; ++v)
        if (counts[c][v] > best) {
          best = counts[c][v];
          z[c] = v;
        }
    }
    return z;
  }

 private:
  std::size_t n_components_;
  std::size_t n_values_;
  std::unordered_map<std::string, std::pair<std::size_t, std::size_t>> lookup_;
};

namespace detail {

// Plug-in estimate of I(X; Y | Z) in nats from aligned samples.
inline double plugin_cmi(const std::vector<std::size_t>& x, const std::vector<std::size_t>& y,
                         const std::vector<std::size_t>& z) {
  std::map<std::tuple<std::size_t, std::size_t, std::size_t>, double> xyz;
  std::map<std::pair<std::size_t, std::size_t>, double> xz, yz;
  std::map<std::size_t, double> zc;
  for (std::size_t i = 0; i < x.size(); ++i) {
    xyz[{x[i], y[i], z[i]}] += 1;
    xz[{x[i], z[i]}] += 1;
    yz[{y[i], z[i]}] += 1;
    zc[z[i]] += 1;
  }
  const double n = static_cast<double>(x.size());
  double cmi = 0.0;
  for (const auto& [k, c] : xyz) {
    const auto [a, b, s] = k;
    cmi += c / n * std::log(c * zc[s] / (xz[{a, s}] * yz[{b, s}]));
  }
  return cmi;
}

}  // namespace detail

struct EmpiricalCI {
  double cmi = 0.0;  // debiased, averaged over components
  bool dependent = false;
};

/// Renders `g` n_samples times and estimates the dependence of u_j and r_t given the
/// latent value of u_{t-1}: per component, the plug-in CMI between decoded values minus
/// the mean CMI after permuting u_j within strata of the conditioning value; averaged
/// over components.
inline EmpiricalCI empirical_ci_check(const SyntheticWorld& w, const LatentGraph& g, std::size_t j,
                                      std::size_t t, std::size_t n_samples, std::uint64_t seed,
                                      double threshold = 0.0075, std::size_t min_samples = 1000,
                                      int shuffles = 10) {
  if (n_samples < min_samples)
    throw InsufficientSamples(std::to_string(n_samples) + " samples is below the floor of " +
                              std::to_string(min_samples));
  if (j >= t || t >= g.n || t == 0) throw ConfigError("empirical_ci_check needs j < t < n");
  const WorldDecoder dec(w);
  const std::size_t K = w.n_components;
  std::vector<std::vector<std::size_t>> xs(K), ys(K), zs(K);
  Rng rng(derive_seed(seed, "empirical"));
  for (std::size_t s = 0; s < n_samples; ++s) {
    const auto lat = sample_latents(g, w, rng);
    const auto xj = dec.decode(render_text(lat[j], w, rng));
    const auto yt = dec.decode(render_text(lat[t], w, rng));
    for (std::size_t c = 0; c < K; ++c) {
      xs[c].push_back(xj[c]);
      ys[c].push_back(yt[c]);
      zs[c].push_back(lat[t - 1][c]);
    }
  }
  double total = 0.0;
  for (std::size_t c = 0; c < K; ++c) {
    const double raw = detail::plugin_cmi(xs[c], ys[c], zs[c]);
    std::map<std::size_t, std::vector<std::size_t>> strata;
    for (std::size_t i = 0; i < n_samples; ++i) strata[zs[c][i]].push_back(i);
    double null_sum = 0.0;
    for (int k = 0; k < shuffles; ++k) {
      auto xp = xs[c];
      for (auto& [_, idx] : strata) {
        auto perm = idx;
        rng.shuffle(perm);
        for (std::size_t m = 0; m < idx.size(); ++m) xp[idx[m]] = xs[c][perm[m]];
      }
      null_sum += detail::plugin_cmi(xp, ys[c], zs[c]);
    }
    total += raw - null_sum / shuffles;
  }
  EmpiricalCI r;
  r.cmi = total / static_cast<double>(K);
  r.dependent = r.cmi > threshold;
  return r;
}

// ---------------------------------------------------------------------------
// World-aware generator

/// Generates responses by the world's own mechanism from the decoded latent values of
/// its context turns: with one turn it copies each component with copy_single, with two
/// or more it treats the first as z_j and the last as z_{t-1}. With `use_last_only` every
/// context is treated as if only its last turn were a cause.
class WorldGenerator : public GeneratorAdapter {
 public:
  WorldGenerator(SyntheticWorld world, bool use_last_only, std::string separator = "\n")
      : world_(std::move(world)), decoder_(world_), last_only_(use_last_only), sep_(std::move(separator)) {}

  std::string generate(const std::string& context, const DecodeParams& p) const override {
    auto turns = split_on(context, sep_);
    Rng rng(derive_seed(p.seed, "world-generator", fnv1a64(context)));
    Latent out(world_.n_components);
    const Latent last = decoder_.decode(turns.back());
    const Latent first = decoder_.decode(turns.front());
    for (std::size_t c = 0; c < world_.n_components; ++c) {
      const double u = rng.uniform();
      const auto fresh = static_cast<std::size_t>(rng.below(world_.n_values));
      auto pick = [&](std::size_t v) { return v < world_.n_values ? v : fresh; };
      if (last_only_ || turns.size() < 2)
        out[c] = u < world_.copy_single ? pick(last[c]) : fresh;
      else
        out[c] = u < world_.copy_second ? pick(first[c])
                 : u < world_.copy_second + world_.copy_prev ? pick(last[c]) : fresh;
    }
    return render_text(out, world_, rng);
  }

  std::vector<double> score_target(const std::string& context,
                                   const std::string& target) const override {
    return detail::unigram_nll(normalized_tokens(context), target);
  }

  std::string name() const override { return last_only_ ? "world-last" : "world"; }
  std::string version() const override { return "1"; }
  std::string turn_separator() const override { return sep_; }

 private:
  SyntheticWorld world_;
  WorldDecoder decoder_;
  bool last_only_;
  std::string sep_;
};

}  // namespace cgd
