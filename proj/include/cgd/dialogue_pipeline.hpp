#pragma once

// Cause-filtered training data and CI-scored response selection over a generator adapter.

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cgd/cause_id.hpp"
#include "cgd/ci_core.hpp"
#include "cgd/common.hpp"
#include "cgd/corpus.hpp"
#include "cgd/generators.hpp"
#include "cgd/metrics.hpp"

namespace cgd {

struct TrainingExample {
  std::string dialogue_id;
  std::size_t t = 1;
  std::string conditioning;
  std::string response;
  std::vector<std::size_t> kept;  // history indices in the conditioning text
};

/// Keeps only u_{j*} and u_{t-1} of each history, j* being the CI argmax.
inline std::vector<TrainingExample> preprocess_training_set(
    const std::vector<HistoryResponsePair>& pairs, const std::vector<Dialogue>& dialogues,
    const TripleScorer& scorer, const std::string& turn_separator = "\n",
    const ParallelFor& pfor = serial_for) {
  DialogueIndex index(dialogues);
  std::vector<TrainingExample> out(pairs.size());
  pfor(pairs.size(), [&](std::size_t i) {
    const auto& p = pairs[i];
    const Dialogue& d = index.at(p.dialogue_id);
    TrainingExample ex{p.dialogue_id, p.t, {}, d.utterances.at(p.t).text, {}};
    if (p.t < 2) {
      ex.conditioning = d.utterances[0].text;
      ex.kept = {0};
    } else {
      const auto sc = identify_second_cause(scorer, history_texts(d, p.t), ex.response, d.id);
      ex.conditioning = d.utterances[sc.j].text + turn_separator + d.utterances[p.t - 1].text;
      ex.kept = {sc.j, p.t - 1};
    }
    out[i] = std::move(ex);
  });
  return out;
}

struct CandidateResponse {
  std::optional<std::size_t> j;  // absent for the u_{t-1}-only candidate
  std::string conditioning;
  std::string text;
  std::optional<double> ci_score;
  bool failed = false;
  std::string error;
};

/// One candidate per j in [0, t-2] conditioned on (u_j, u_{t-1}), then the u_{t-1}-only
/// candidate last. Generator failures are recorded on the candidate.
inline std::vector<CandidateResponse> generate_candidates(const GeneratorAdapter& gen,
                                                          const std::vector<std::string>& history,
                                                          const DecodeParams& params = {},
                                                          const ParallelFor& pfor = serial_for) {
  const std::size_t t = history.size();
  if (t < 1) throw NoCandidates("empty history");
  const auto sep = gen.turn_separator();
  std::vector<CandidateResponse> out(t);
  for (std::size_t j = 0; j + 2 <= t; ++j)
    out[j] = {j, history[j] + sep + history[t - 1], {}, std::nullopt, false, {}};
  out[t - 1] = {std::nullopt, history[t - 1], {}, std::nullopt, false, {}};
  auto run = [&](std::size_t i) {
    try {
      out[i].text = gen.generate(out[i].conditioning, params);
    } catch (const std::exception& e) {
      out[i].failed = true;
      out[i].error = e.what();
    }
  };
  if (gen.concurrent()) pfor(out.size(), run);
  else serial_for(out.size(), run);
  return out;
}

struct Selection {
  std::size_t index = 0;
  CandidateResponse candidate;
  bool fallback = false;
};

namespace detail {

inline std::size_t fallback_index(const std::vector<CandidateResponse>& cands) {
  for (std::size_t i = cands.size(); i-- > 0;)
    if (!cands[i].j && !cands[i].failed) return i;
  throw MissingFallback("no usable u_{t-1}-only candidate");
}

}  // namespace detail

/// Scores each j-candidate with p(l=1 | u_j, u_{t-1}, text) and returns the argmax when it
/// exceeds the threshold, otherwise the u_{t-1}-only candidate. Ties go to the largest j.
inline Selection select_response(const TripleScorer& scorer, const std::vector<std::string>& history,
                                 std::vector<CandidateResponse>& candidates, double threshold = 0.5) {
  const std::size_t fb = detail::fallback_index(candidates);
  const std::size_t t = history.size();
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    auto& c = candidates[i];
    if (!c.j || c.failed) continue;
    c.ci_score = scorer({history.at(*c.j), history.at(t - 1), c.text, *c.j, t, {}});
    if (!best || *c.ci_score > *candidates[*best].ci_score ||
        (*c.ci_score == *candidates[*best].ci_score && *c.j > *candidates[*best].j))
      best = i;
  }
  if (best && *candidates[*best].ci_score > threshold) return {*best, candidates[*best], false};
  return {fb, candidates[fb], true};
}

/// Dependence-only baseline: argmax over j-candidates of p_depend(u_j, text), no
/// conditioning on u_{t-1}. Ties go to the largest j.
inline Selection rerank_by_dependence(const TripleScorer& dep_scorer,
                                      const std::vector<std::string>& history,
                                      std::vector<CandidateResponse>& candidates) {
  const std::size_t fb = detail::fallback_index(candidates);
  const std::size_t t = history.size();
  std::optional<std::size_t> best;
  double best_score = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto& c = candidates[i];
    if (!c.j || c.failed) continue;
    const double s = dep_scorer({history.at(*c.j), history.at(t - 1), c.text, *c.j, t, {}});
    if (!best || s > best_score || (s == best_score && *c.j > *candidates[*best].j)) {
      best = i;
      best_score = s;
    }
  }
  if (!best) return {fb, candidates[fb], true};
  return {*best, candidates[*best], false};
}

/// Dependence training triples: (u_{t-1}, r_t) positives and distant (j <= t-4)
/// negatives, one per positive where available, in the response_j layout.
inline std::vector<LabeledTriple> build_dependence_set(const std::vector<HistoryResponsePair>& pairs,
                                                       const std::vector<Dialogue>& dialogues,
                                                       std::uint64_t seed) {
  DialogueIndex index(dialogues);
  Rng rng(derive_seed(seed, "negatives"));
  std::vector<LabeledTriple> out;
  for (const auto& p : pairs) {
    const Dialogue& d = index.at(p.dialogue_id);
    out.push_back({make_triple(d, p.t - 1, p.t), 1, Origin::gold});
    if (p.t >= 4) {
      const std::size_t j = static_cast<std::size_t>(rng.below(p.t - 3));
      out.push_back({make_triple(d, j, p.t), 0, Origin::gold});
    }
  }
  return out;
}

struct DiversityReport {
  double self_bleu = 0.0;
  double distinct_1 = 0.0;
  double distinct_2 = 0.0;
};

/// Self-BLEU averaged over candidate sets; distinct-n pooled over every candidate.
inline DiversityReport candidate_diversity(const std::vector<std::vector<std::string>>& sets) {
  if (sets.empty()) throw DegenerateInput("no candidate sets");
  DiversityReport r;
  std::vector<Tokens> all;
  for (const auto& s : sets) {
    if (s.size() < 2) throw DegenerateInput("candidate set with fewer than 2 candidates");
    std::vector<Tokens> toks;
    for (const auto& c : s) toks.push_back(whitespace_tokens(c));
    r.self_bleu += self_bleu(toks);
    all.insert(all.end(), toks.begin(), toks.end());
  }
  r.self_bleu /= static_cast<double>(sets.size());
  r.distinct_1 = distinct_n(all, 1);
  r.distinct_2 = distinct_n(all, 2);
  return r;
}

inline nlohmann::json to_json(const CandidateResponse& c) {
  nlohmann::json j{{"conditioning", c.conditioning}, {"text", c.text}};
  j["j"] = c.j ? nlohmann::json(*c.j) : nlohmann::json(nullptr);
  j["ci_score"] = c.ci_score ? nlohmann::json(*c.ci_score) : nlohmann::json(nullptr);
  if (c.failed) j["error"] = c.error;
  return j;
}

}  // namespace cgd
