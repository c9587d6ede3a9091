#pragma once

// Direct-cause identification: u_{t-1} plus at most one CI-selected earlier utterance.

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "cgd/ci_core.hpp"
#include "cgd/common.hpp"
#include "cgd/corpus.hpp"

namespace cgd {

struct SecondCause {
  std::size_t j = 0;
  double p = 0.0;
};

struct CausePrediction {
  std::string dialogue_id;
  std::size_t t = 1;
  std::vector<std::size_t> causes;  // t-1 first
  std::optional<SecondCause> second_cause;

  std::set<std::size_t> cause_set() const { return {causes.begin(), causes.end()}; }
};

enum class PredictMode { train_preprocess, inference };
enum class Baseline { always_prev, always_prev_two };

/// argmax over j in [0, t-2] of the CI score of (u_j, u_{t-1}, response); ties go to
/// the largest j. `history` holds u_0..u_{t-1}.
inline SecondCause identify_second_cause(const TripleScorer& scorer,
                                         const std::vector<std::string>& history,
                                         const std::string& response,
                                         const std::string& dialogue_id = {},
                                         const ParallelFor& pfor = serial_for) {
  const std::size_t t = history.size();
  if (t < 2) throw NoCandidates("no candidate j exists for t=" + std::to_string(t));
  std::vector<double> scores(t - 1);
  pfor(t - 1, [&](std::size_t j) {
    scores[j] = scorer({history[j], history[t - 1], response, j, t, dialogue_id});
  });
  SecondCause best{0, scores[0]};
  for (std::size_t j = 1; j + 1 < t; ++j)
    if (scores[j] >= best.p) best = {j, scores[j]};
  return best;
}

inline SecondCause identify_second_cause(const CIClassifier& c,
                                         const std::vector<std::string>& history,
                                         const std::string& response) {
  return identify_second_cause(scorer_of(c), history, response);
}

/// train_preprocess always adds the argmax j; inference adds it only when p* > threshold.
inline CausePrediction predict_causes(const TripleScorer& scorer, const Dialogue& d,
                                      std::size_t t, PredictMode mode, double threshold = 0.5,
                                      const ParallelFor& pfor = serial_for) {
  CausePrediction out{d.id, t, {t - 1}, std::nullopt};
  if (t < 2) return out;
  const auto sc = identify_second_cause(scorer, history_texts(d, t), d.utterances.at(t).text,
                                        d.id, pfor);
  out.second_cause = sc;
  if (mode == PredictMode::train_preprocess || sc.p > threshold) out.causes.push_back(sc.j);
  return out;
}

inline CausePrediction predict_causes(const CIClassifier& c, const Dialogue& d, std::size_t t,
                                      PredictMode mode, double threshold = 0.5) {
  return predict_causes(scorer_of(c), d, t, mode, threshold);
}

inline CausePrediction baseline_causes(const HistoryResponsePair& pair, Baseline kind) {
  if (pair.t < 1) throw ConfigError("baseline needs t >= 1");
  CausePrediction out{pair.dialogue_id, pair.t, {pair.t - 1}, std::nullopt};
  if (kind == Baseline::always_prev_two && pair.t >= 2) out.causes.push_back(pair.t - 2);
  return out;
}

struct CauseIdEval {
  std::size_t tp = 0, fp = 0, fn = 0;
  double precision = 0.0, recall = 0.0, f1 = 0.0;
};

namespace detail {

inline std::map<std::pair<std::string, std::size_t>, const HistoryResponsePair*> align(
    const std::vector<CausePrediction>& preds, const std::vector<HistoryResponsePair>& gold) {
  std::map<std::pair<std::string, std::size_t>, const HistoryResponsePair*> by_key;
  for (const auto& g : gold) by_key[{g.dialogue_id, g.t}] = &g;
  if (preds.size() != gold.size())
    throw MisalignedInputs(std::to_string(preds.size()) + " predictions for " +
                           std::to_string(gold.size()) + " gold pairs");
  for (const auto& p : preds)
    if (!by_key.count({p.dialogue_id, p.t}))
      throw MisalignedInputs("prediction (" + p.dialogue_id + ", " + std::to_string(p.t) +
                             ") has no gold pair");
  return by_key;
}

}  // namespace detail

/// Micro-averaged precision/recall/F1 of predicted against gold cause index sets.
inline CauseIdEval evaluate_cause_id(const std::vector<CausePrediction>& preds,
                                     const std::vector<HistoryResponsePair>& gold) {
  const auto by_key = detail::align(preds, gold);
  CauseIdEval e;
  for (const auto& p : preds) {
    const auto& g = by_key.at({p.dialogue_id, p.t})->cause_indices;
    for (auto j : p.cause_set()) (g.count(j) ? e.tp : e.fp)++;
    const auto ps = p.cause_set();
    for (auto j : g)
      if (!ps.count(j)) ++e.fn;
  }
  e.precision = e.tp + e.fp ? double(e.tp) / double(e.tp + e.fp) : 0.0;
  e.recall = e.tp + e.fn ? double(e.tp) / double(e.tp + e.fn) : 0.0;
  e.f1 = e.precision + e.recall > 0 ? 2 * e.precision * e.recall / (e.precision + e.recall) : 0.0;
  return e;
}

struct OverlapReport {
  double exact = 0.0, partial = 0.0, disjoint = 0.0;
};

/// Fractions of pairs whose predicted set equals, partly overlaps, or misses the gold set.
inline OverlapReport overlap_analysis(const std::vector<CausePrediction>& preds,
                                      const std::vector<HistoryResponsePair>& gold) {
  const auto by_key = detail::align(preds, gold);
  OverlapReport r;
  if (preds.empty()) return r;
  std::size_t ex = 0, pa = 0, di = 0;
  for (const auto& p : preds) {
    const auto& g = by_key.at({p.dialogue_id, p.t})->cause_indices;
    const auto ps = p.cause_set();
    std::size_t inter = 0;
    for (auto j : ps) inter += g.count(j);
    if (ps == g) ++ex;
    else if (inter > 0) ++pa;
    else ++di;
  }
  const double n = static_cast<double>(preds.size());
  r.exact = static_cast<double>(ex) / n;
  r.partial = static_cast<double>(pa) / n;
  r.disjoint = static_cast<double>(di) / n;
  return r;
}

inline nlohmann::json to_json(const CausePrediction& p) {
  nlohmann::json j{{"dialogue_id", p.dialogue_id}, {"t", p.t}, {"causes", p.causes}};
  if (p.second_cause) {
    j["p_star"] = p.second_cause->p;
    j["j_star"] = p.second_cause->j;
  }
  return j;
}

inline CausePrediction prediction_from_json(const nlohmann::json& j) {
  CausePrediction p;
  p.dialogue_id = j.at("dialogue_id").get<std::string>();
  p.t = j.at("t").get<std::size_t>();
  p.causes = j.at("causes").get<std::vector<std::size_t>>();
  if (j.contains("p_star")) {
    SecondCause sc;
    sc.p = j["p_star"].get<double>();
    sc.j = j.contains("j_star") ? j["j_star"].get<std::size_t>()
                                : (p.causes.size() > 1 ? p.causes[1] : 0);
    p.second_cause = sc;
  }
  return p;
}

inline nlohmann::json to_json(const CauseIdEval& e) {
  return {{"precision", e.precision}, {"recall", e.recall}, {"f1", e.f1},
          {"confusion", {{"tp", e.tp}, {"fp", e.fp}, {"fn", e.fn}}}};
}

inline nlohmann::json to_json(const OverlapReport& r) {
  return {{"exact", r.exact}, {"partial", r.partial}, {"disjoint", r.disjoint}};
}

}  // namespace cgd
