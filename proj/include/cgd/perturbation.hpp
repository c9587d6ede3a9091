#pragma once

// History perturbation study: replace or drop causes, non-causes, or k random non-causes,
// then measure response perplexity and output drift.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cgd/common.hpp"
#include "cgd/corpus.hpp"
#include "cgd/generators.hpp"
#include "cgd/metrics.hpp"

namespace cgd {

enum class Target { causes, non_causes, non_causes_random_k };
enum class PerturbMode { replace_pad, drop };

inline std::string to_string(Target t) {
  switch (t) {
    case Target::causes: return "causes";
    case Target::non_causes: return "non_causes";
    case Target::non_causes_random_k: return "non_causes_random_k";
  }
  return "causes";
}

inline std::string to_string(PerturbMode m) { return m == PerturbMode::drop ? "drop" : "replace_pad"; }

inline Target target_from_string(const std::string& s) {
  if (s == "causes") return Target::causes;
  if (s == "non_causes") return Target::non_causes;
  if (s == "non_causes_random_k") return Target::non_causes_random_k;
  throw ConfigError("unknown perturbation target '" + s + "'");
}

inline PerturbMode mode_from_string(const std::string& s) {
  if (s == "drop") return PerturbMode::drop;
  if (s == "replace_pad") return PerturbMode::replace_pad;
  throw ConfigError("unknown perturbation mode '" + s + "'");
}

struct PerturbationSpec {
  Target target = Target::causes;
  PerturbMode mode = PerturbMode::drop;
  std::string pad_token = "<pad>";
  int repetitions = 5;
  std::uint64_t seed = 0;

  std::string name() const { return to_string(mode) + ":" + to_string(target); }
  void validate() const {
    if (repetitions < 1) throw ConfigError("repetitions must be >= 1");
    if (mode == PerturbMode::replace_pad && pad_token.empty())
      throw ConfigError("replace_pad needs a non-empty pad token");
  }
};

struct PerturbedHistory {
  std::vector<Utterance> history;
  std::vector<std::size_t> targeted;
  bool skipped = false;
  std::string flag;
};

/// Applies a spec to the history u_0..u_{t-1} of a gold pair. Random-k draws
/// k = |causes| non-causes without replacement from the repetition's seed stream.
inline PerturbedHistory perturb_history(const HistoryResponsePair& pair, const Dialogue& d,
                                        const PerturbationSpec& spec, int repetition = 0) {
  PerturbedHistory out;
  std::vector<std::size_t> causes, non_causes;
  for (std::size_t i = 0; i < pair.t; ++i) (pair.cause_indices.count(i) ? causes : non_causes).push_back(i);
  switch (spec.target) {
    case Target::causes: out.targeted = causes; break;
    case Target::non_causes: out.targeted = non_causes; break;
    case Target::non_causes_random_k: {
      const std::size_t k = causes.size();
      if (k > non_causes.size()) {
        out.skipped = true;
        out.flag = "KTooLarge";
        out.history.assign(d.utterances.begin(), d.utterances.begin() + static_cast<std::ptrdiff_t>(pair.t));
        return out;
      }
      const std::uint64_t stream = fnv1a64(pair.dialogue_id) ^ splitmix64(pair.t);
      Rng rng(derive_seed(derive_seed(spec.seed, "perturbation", stream), "repetition",
                          static_cast<std::uint64_t>(repetition)));
      auto pool = non_causes;
      rng.shuffle(pool);
      out.targeted.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
      std::sort(out.targeted.begin(), out.targeted.end());
      break;
    }
  }
  std::vector<char> hit(pair.t, 0);
  for (auto i : out.targeted) hit[i] = 1;
  for (std::size_t i = 0; i < pair.t; ++i) {
    Utterance u = d.utterances.at(i);
    if (hit[i]) {
      if (spec.mode == PerturbMode::drop) continue;
      const auto n = whitespace_tokens(u.text).size();
      u.text = join(std::vector<std::string>(n, spec.pad_token), " ");
      u.clause_spans.clear();
    }
    out.history.push_back(std::move(u));
  }
  return out;
}

/// Joins utterance texts with the separator, dropping the oldest utterances while the
/// whitespace token count exceeds `max_context` (0 = unlimited).
inline std::string conditioning_text(const std::vector<Utterance>& history, const std::string& sep,
                                     std::size_t max_context) {
  std::size_t begin = 0;
  if (max_context > 0) {
    std::size_t total = 0;
    for (const auto& u : history) total += whitespace_tokens(u.text).size();
    while (begin < history.size() && total > max_context)
      total -= whitespace_tokens(history[begin++].text).size();
  }
  std::vector<std::string> texts;
  for (std::size_t i = begin; i < history.size(); ++i) texts.push_back(history[i].text);
  return join(texts, sep);
}

// ---------------------------------------------------------------------------
// Study

/// Generator used for a given pair. Lets per-pair oracles plug into the study.
using GeneratorProvider = std::function<const GeneratorAdapter&(const HistoryResponsePair&)>;

struct PairOutcome {
  std::string dialogue_id;
  std::size_t t = 0;
  bool ok = false;
  bool skipped = false;
  std::string flag;
  double ppl = 0.0;
  double nll_sum = 0.0;
  std::size_t n_tokens = 0;
  double avg_bleu = 0.0;
  std::string output;
};

struct ConditionReport {
  std::string name;
  std::optional<PerturbationSpec> spec;  // empty for the unperturbed baseline
  double ppl = 0.0;         // per-pair exp(mean NLL), averaged over pairs and repetitions
  double ppl_corpus = 0.0;  // exp of the token-weighted NLL over the corpus
  std::optional<double> avg_bleu;
  double coverage = 0.0;
  std::vector<double> rep_ppl;
  std::vector<double> rep_bleu;
  std::vector<std::vector<PairOutcome>> per_pair;  // [repetition][pair]
};

struct SignificanceEntry {
  std::string mode;
  std::string metric;
  std::string condition_a;
  std::string condition_b;
  SignificanceResult result;
};

struct PerturbationReport {
  ConditionReport baseline;
  std::vector<ConditionReport> conditions;
  std::vector<SignificanceEntry> significance;
};

namespace detail {

inline PairOutcome score_pair(const GeneratorAdapter& gen, const std::vector<Utterance>& history,
                              const std::string& response, const DecodeParams& params,
                              const std::string* reference) {
  PairOutcome o;
  try {
    const auto ctx = conditioning_text(history, gen.turn_separator(), gen.max_context());
    const auto nll = gen.score_target(ctx, response);
    o.n_tokens = nll.size();
    for (double v : nll) o.nll_sum += v;
    o.ppl = o.n_tokens ? std::exp(o.nll_sum / static_cast<double>(o.n_tokens)) : 1.0;
    o.output = gen.generate(ctx, params);
    if (reference) {
      if (o.output.empty() && reference->empty()) o.avg_bleu = 1.0;
      else o.avg_bleu = average_bleu(o.output, *reference);
    }
    o.ok = true;
  } catch (const std::exception& e) {
    o.flag = e.what();
  }
  return o;
}

// Order-independent aggregation: pairs are folded in (dialogue_id, t) order.
inline void aggregate(const std::vector<PairOutcome>& outs, bool with_bleu, double& ppl,
                      double& ppl_corpus, double& bleu, std::size_t& ok) {
  std::vector<const PairOutcome*> sorted;
  for (const auto& o : outs)
    if (o.ok) sorted.push_back(&o);
  std::sort(sorted.begin(), sorted.end(), [](const PairOutcome* a, const PairOutcome* b) {
    return std::tie(a->dialogue_id, a->t) < std::tie(b->dialogue_id, b->t);
  });
  ok = sorted.size();
  double s_ppl = 0, s_bleu = 0, s_nll = 0;
  std::size_t n_tok = 0;
  for (const auto* o : sorted) {
    s_ppl += o->ppl;
    s_bleu += o->avg_bleu;
    s_nll += o->nll_sum;
    n_tok += o->n_tokens;
  }
  ppl = ok ? s_ppl / static_cast<double>(ok) : 0.0;
  bleu = with_bleu && ok ? s_bleu / static_cast<double>(ok) : 0.0;
  ppl_corpus = n_tok ? std::exp(s_nll / static_cast<double>(n_tok)) : 0.0;
}

}  // namespace detail

/// Runs the unperturbed baseline and every spec over the gold pairs. Every condition is
/// repeated spec.repetitions times (decode seed and random-k draw vary per repetition);
/// t-tests compare repetition means.
inline PerturbationReport run_perturbation_study(const GeneratorProvider& provider,
                                                 const std::vector<HistoryResponsePair>& pairs,
                                                 const std::vector<Dialogue>& dialogues,
                                                 const std::vector<PerturbationSpec>& specs,
                                                 const DecodeParams& params = {},
                                                 double alpha = 0.05,
                                                 const ParallelFor& pfor = serial_for) {
  for (const auto& s : specs) s.validate();
  DialogueIndex index(dialogues);
  PerturbationReport report;

  std::vector<PairOutcome> base(pairs.size());
  pfor(pairs.size(), [&](std::size_t i) {
    const auto& p = pairs[i];
    const Dialogue& d = index.at(p.dialogue_id);
    std::vector<Utterance> hist(d.utterances.begin(), d.utterances.begin() + static_cast<std::ptrdiff_t>(p.t));
    base[i] = detail::score_pair(provider(p), hist, d.utterances.at(p.t).text, params, nullptr);
    base[i].dialogue_id = p.dialogue_id;
    base[i].t = p.t;
  });
  {
    auto& b = report.baseline;
    b.name = "none";
    double bleu;
    std::size_t ok;
    detail::aggregate(base, false, b.ppl, b.ppl_corpus, bleu, ok);
    b.coverage = pairs.empty() ? 0.0 : static_cast<double>(ok) / static_cast<double>(pairs.size());
    b.rep_ppl = {b.ppl};
    b.per_pair = {base};
  }

  for (const auto& spec : specs) {
    ConditionReport c;
    c.name = spec.name();
    c.spec = spec;
    std::size_t ok_total = 0;
    for (int rep = 0; rep < spec.repetitions; ++rep) {
      DecodeParams dp = params;
      dp.seed = derive_seed(params.seed, "repetition", static_cast<std::uint64_t>(rep));
      std::vector<PairOutcome> outs(pairs.size());
      pfor(pairs.size(), [&](std::size_t i) {
        const auto& p = pairs[i];
        const Dialogue& d = index.at(p.dialogue_id);
        auto ph = perturb_history(p, d, spec, rep);
        if (ph.skipped || !base[i].ok) {
          outs[i].skipped = true;
          outs[i].flag = ph.skipped ? ph.flag : "baseline failed";
        } else {
          outs[i] = detail::score_pair(provider(p), ph.history, d.utterances.at(p.t).text, dp,
                                       &base[i].output);
        }
        outs[i].dialogue_id = p.dialogue_id;
        outs[i].t = p.t;
      });
      double ppl, ppl_c, bleu;
      std::size_t ok;
      detail::aggregate(outs, true, ppl, ppl_c, bleu, ok);
      c.rep_ppl.push_back(ppl);
      c.rep_bleu.push_back(bleu);
      c.ppl_corpus += ppl_c;
      ok_total += ok;
      c.per_pair.push_back(std::move(outs));
    }
    const double reps = static_cast<double>(spec.repetitions);
    c.ppl = mean_std(c.rep_ppl).mean;
    c.avg_bleu = mean_std(c.rep_bleu).mean;
    c.ppl_corpus /= reps;
    c.coverage = pairs.empty() ? 0.0 : static_cast<double>(ok_total) / (reps * static_cast<double>(pairs.size()));
    report.conditions.push_back(std::move(c));
  }

  auto find = [&](PerturbMode m, Target t) -> const ConditionReport* {
    for (const auto& c : report.conditions)
      if (c.spec->mode == m && c.spec->target == t) return &c;
    return nullptr;
  };
  for (auto mode : {PerturbMode::replace_pad, PerturbMode::drop}) {
    const auto* cause = find(mode, Target::causes);
    if (!cause) continue;
    for (auto other : {Target::non_causes, Target::non_causes_random_k}) {
      const auto* o = find(mode, other);
      if (!o || cause->rep_ppl.size() < 2 || o->rep_ppl.size() < 2) continue;
      report.significance.push_back({to_string(mode), "ppl", cause->name, o->name,
                                     two_sample_t_test(cause->rep_ppl, o->rep_ppl, alpha)});
      report.significance.push_back({to_string(mode), "avg_bleu", cause->name, o->name,
                                     two_sample_t_test(cause->rep_bleu, o->rep_bleu, alpha)});
    }
  }
  return report;
}

inline PerturbationSpec spec_from_json(const nlohmann::json& j) {
  PerturbationSpec s;
  s.target = target_from_string(j.at("target").get<std::string>());
  s.mode = mode_from_string(j.at("mode").get<std::string>());
  s.pad_token = j.value("pad_token", std::string("<pad>"));
  s.repetitions = j.value("repetitions", 5);
  s.seed = j.value("seed", std::uint64_t{0});
  s.validate();
  return s;
}

inline nlohmann::json to_json(const PerturbationReport& r, bool include_pairs = true) {
  auto cond = [&](const ConditionReport& c) {
    nlohmann::json j{{"name", c.name},
                     {"ppl", c.ppl},
                     {"ppl_corpus", c.ppl_corpus},
                     {"avg_bleu", c.avg_bleu ? nlohmann::json(*c.avg_bleu) : nlohmann::json(nullptr)},
                     {"coverage", c.coverage},
                     {"rep_ppl", c.rep_ppl},
                     {"rep_avg_bleu", c.rep_bleu}};
    if (c.spec)
      j["spec"] = {{"target", to_string(c.spec->target)}, {"mode", to_string(c.spec->mode)},
                   {"pad_token", c.spec->pad_token}, {"repetitions", c.spec->repetitions},
                   {"seed", c.spec->seed}};
    if (include_pairs) {
      nlohmann::json reps = nlohmann::json::array();
      for (const auto& rep : c.per_pair) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& o : rep) {
          nlohmann::json po{{"dialogue_id", o.dialogue_id}, {"t", o.t}, {"ok", o.ok},
                            {"ppl", o.ppl}, {"avg_bleu", o.avg_bleu}};
          if (!o.flag.empty()) po["flag"] = o.flag;
          arr.push_back(std::move(po));
        }
        reps.push_back(std::move(arr));
      }
      j["per_pair"] = std::move(reps);
    }
    return j;
  };
  nlohmann::json out{{"baseline", cond(r.baseline)}};
  out["conditions"] = nlohmann::json::array();
  for (const auto& c : r.conditions) out["conditions"].push_back(cond(c));
  out["significance"] = nlohmann::json::array();
  for (const auto& s : r.significance) {
    const bool finite = std::isfinite(s.result.t_statistic);
    out["significance"].push_back(
        {{"mode", s.mode}, {"metric", s.metric}, {"a", s.condition_a}, {"b", s.condition_b},
         {"t_statistic", finite ? nlohmann::json(s.result.t_statistic)
                                : nlohmann::json(s.result.t_statistic > 0 ? "inf" : "-inf")},
         {"p_value", s.result.p_value}, {"df", s.result.df},
         {"significant", s.result.significant}, {"degenerate", s.result.degenerate}});
  }
  return out;
}

}  // namespace cgd
