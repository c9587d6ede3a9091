#pragma once

// Constrained incremental self-training of the CI classifier and its ablation variants.

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "cgd/ci_core.hpp"
#include "cgd/common.hpp"
#include "cgd/corpus.hpp"

namespace cgd {

enum class Variant { constrain, init, fc, ist };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::constrain: return "constrain";
    case Variant::init: return "init";
    case Variant::fc: return "fc";
    case Variant::ist: return "ist";
  }
  return "constrain";
}

inline Variant variant_from_string(const std::string& s) {
  if (s == "constrain") return Variant::constrain;
  if (s == "init") return Variant::init;
  if (s == "fc") return Variant::fc;
  if (s == "ist") return Variant::ist;
  throw ConfigError("unknown variant '" + s + "'");
}

struct SelfTrainConfig {
  double threshold = 0.9;
  std::set<std::size_t> context_window{2, 3};  // offsets t - j
  Variant variant = Variant::constrain;
  int max_iterations = 5;
  int epochs_per_iteration = 10;
  int patience = 1;  // non-improving iterations tolerated before stopping
  std::uint64_t seed = 0;
  TrainConfig train;  // optimizer settings; its epochs field is replaced per round

  bool uses_window() const { return variant == Variant::constrain || variant == Variant::fc; }

  void validate() const {
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("threshold must lie in (0, 1)");
    if (uses_window() && context_window.empty())
      throw ConfigError("variant " + to_string(variant) + " needs a context window");
    for (auto o : context_window)
      if (o < 2) throw ConfigError("context window offsets must be >= 2");
    if (max_iterations < 0) throw ConfigError("max_iterations must be >= 0");
    if (patience < 1) throw ConfigError("patience must be >= 1");
  }
};

using TripleKey = std::tuple<std::string, std::size_t, std::size_t>;

inline TripleKey key_of(const Triple& t) { return {t.dialogue_id, t.t, t.j}; }

/// Every candidate triple (j <= t-2) of the unlabeled pairs.
inline std::vector<Triple> candidate_pool(const std::vector<HistoryResponsePair>& pairs,
                                          const std::vector<Dialogue>& dialogues) {
  DialogueIndex index(dialogues);
  std::vector<Triple> out;
  for (const auto& p : pairs) {
    if (p.t < 2) continue;
    const Dialogue& d = index.at(p.dialogue_id);
    for (std::size_t j = 0; j + 2 <= p.t; ++j) out.push_back(make_triple(d, j, p.t));
  }
  return out;
}

inline bool passes_constraints(const Triple& tr, double score, const SelfTrainConfig& cfg) {
  if (!(score > cfg.threshold)) return false;
  if (!cfg.uses_window()) return true;
  return cfg.context_window.count(tr.t - tr.j) > 0;
}

/// Pool triples scoring above the threshold (and, for windowed variants, with t - j in
/// the context window), labeled positive. Keys in `exclude` are skipped.
inline std::vector<LabeledTriple> select_pseudo_positives(
    const TripleScorer& scorer, const std::vector<Triple>& pool, const SelfTrainConfig& cfg,
    const std::set<TripleKey>& exclude = {}, const ParallelFor& pfor = serial_for) {
  std::vector<double> scores(pool.size(), 0.0);
  std::vector<char> eligible(pool.size(), 0);
  for (std::size_t i = 0; i < pool.size(); ++i)
    eligible[i] = (!cfg.uses_window() || cfg.context_window.count(pool[i].t - pool[i].j)) &&
                  !exclude.count(key_of(pool[i]));
  pfor(pool.size(), [&](std::size_t i) {
    if (eligible[i]) scores[i] = scorer(pool[i]);
  });
  std::vector<LabeledTriple> out;
  for (std::size_t i = 0; i < pool.size(); ++i)
    if (eligible[i] && passes_constraints(pool[i], scores[i], cfg))
      out.push_back({pool[i], 1, Origin::pseudo, 0, scores[i]});
  return out;
}

inline std::vector<LabeledTriple> select_pseudo_positives(
    const CIClassifier& c, const std::vector<HistoryResponsePair>& unlabeled,
    const std::vector<Dialogue>& dialogues, const SelfTrainConfig& cfg) {
  return select_pseudo_positives(scorer_of(c), candidate_pool(unlabeled, dialogues), cfg);
}

struct NegativeSample {
  std::vector<LabeledTriple> triples;
  bool resampled = false;    // drawn with replacement because too few were eligible
  std::size_t borrowed = 0;  // per-response draws that fell back to the whole pool
};

/// Uniform sample of `count` pool triples whose keys are not in `taken`.
inline NegativeSample sample_negatives(const std::vector<Triple>& pool,
                                       const std::set<TripleKey>& taken, std::size_t count,
                                       std::uint64_t seed) {
  NegativeSample out;
  if (count == 0) return out;
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < pool.size(); ++i)
    if (!taken.count(key_of(pool[i]))) eligible.push_back(i);
  if (eligible.empty()) throw NoEligibleCandidates("no unlabeled triple is left for negatives");
  Rng rng(derive_seed(seed, "negatives"));
  std::vector<std::size_t> chosen;
  if (count <= eligible.size()) {
    rng.shuffle(eligible);
    chosen.assign(eligible.begin(), eligible.begin() + static_cast<std::ptrdiff_t>(count));
    std::sort(chosen.begin(), chosen.end());
  } else {
    out.resampled = true;
    for (std::size_t k = 0; k < count; ++k) chosen.push_back(eligible[rng.below(eligible.size())]);
  }
  for (auto i : chosen) out.triples.push_back({pool[i], 0, Origin::pseudo});
  return out;
}

/// One negative per positive, drawn uniformly from the same response's candidates that
/// are neither taken nor already drawn. A response without such a candidate borrows a
/// uniform draw from the rest of the pool.
inline NegativeSample sample_negatives_per_response(const std::vector<Triple>& pool,
                                                    const std::set<TripleKey>& taken,
                                                    const std::vector<LabeledTriple>& positives,
                                                    std::uint64_t seed) {
  NegativeSample out;
  if (positives.empty()) return out;
  std::map<std::pair<std::string, std::size_t>, std::vector<std::size_t>> by_response;
  for (std::size_t i = 0; i < pool.size(); ++i)
    if (!taken.count(key_of(pool[i]))) by_response[{pool[i].dialogue_id, pool[i].t}].push_back(i);
  Rng rng(derive_seed(seed, "negatives"));
  std::set<std::size_t> drawn;
  std::vector<std::size_t> chosen;
  auto draw_from = [&](const std::vector<std::size_t>& cands) -> std::optional<std::size_t> {
    std::vector<std::size_t> free;
    for (auto i : cands)
      if (!drawn.count(i)) free.push_back(i);
    if (free.empty()) return std::nullopt;
    return free[rng.below(free.size())];
  };
  std::vector<std::size_t> all_free;
  for (const auto& [_, v] : by_response) all_free.insert(all_free.end(), v.begin(), v.end());
  std::sort(all_free.begin(), all_free.end());
  if (all_free.empty()) throw NoEligibleCandidates("no unlabeled triple is left for negatives");
  for (const auto& p : positives) {
    auto it = by_response.find({p.triple.dialogue_id, p.triple.t});
    std::optional<std::size_t> pick;
    if (it != by_response.end()) pick = draw_from(it->second);
    if (!pick) {
      pick = draw_from(all_free);
      if (pick) ++out.borrowed;
    }
    if (!pick) {
      out.resampled = true;
      pick = all_free[rng.below(all_free.size())];
    }
    drawn.insert(*pick);
    chosen.push_back(*pick);
  }
  for (auto i : chosen) out.triples.push_back({pool[i], 0, Origin::pseudo});
  return out;
}

inline NegativeSample sample_negatives(const std::vector<HistoryResponsePair>& unlabeled,
                                       const std::vector<Dialogue>& dialogues,
                                       const std::vector<LabeledTriple>& selected,
                                       std::size_t count, std::uint64_t seed) {
  std::set<TripleKey> taken;
  for (const auto& s : selected) taken.insert(key_of(s.triple));
  return sample_negatives(candidate_pool(unlabeled, dialogues), taken, count, seed);
}

// ---------------------------------------------------------------------------
// Self-training loop

struct IterationRecord {
  int iteration = 0;
  std::size_t n_pseudo_positives = 0;
  std::size_t n_negatives = 0;
  bool resampled = false;
  Confusion valid;
  std::size_t dataset_size = 0;
  std::size_t borrowed_negatives = 0;
};

struct SelfTrainTrace {
  std::vector<IterationRecord> iterations;
  std::vector<LabeledTriple> pseudo_labels;  // every pseudo-positive ever added
  std::vector<std::pair<int, BatchRecord>> batches;  // (iteration, batch)
  int best_iteration = 0;
  std::string stop_reason;
};

class Divergence : public Error {
 public:
  Divergence(const std::string& what, SelfTrainTrace trace)
      : Error("Divergence", what), trace_(std::move(trace)) {}
  const SelfTrainTrace& trace() const noexcept { return trace_; }

 private:
  SelfTrainTrace trace_;
};

struct SelfTrainResult {
  CIClassifier classifier;
  SelfTrainTrace trace;
};

inline nlohmann::json to_json(const IterationRecord& r) {
  return {{"iteration", r.iteration},
          {"n_pseudo_positives", r.n_pseudo_positives},
          {"n_negatives", r.n_negatives},
          {"resampled", r.resampled},
          {"valid_precision", r.valid.precision()},
          {"valid_recall", r.valid.recall()},
          {"valid_f1", r.valid.f1()},
          {"dataset_size", r.dataset_size},
          {"borrowed_negatives", r.borrowed_negatives}};
}

/// Writes trace.jsonl, pseudo_labels.jsonl and batches.jsonl into `dir`.
inline void write_trace(const SelfTrainTrace& tr, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream t(dir / "trace.jsonl", std::ios::binary);
  for (const auto& r : tr.iterations) t << to_json(r).dump() << '\n';
  std::ofstream p(dir / "pseudo_labels.jsonl", std::ios::binary);
  for (const auto& l : tr.pseudo_labels)
    p << nlohmann::json{{"dialogue_id", l.triple.dialogue_id}, {"t", l.triple.t},
                        {"j", l.triple.j}, {"score", l.score}, {"iteration", l.iteration}}
             .dump()
      << '\n';
  std::ofstream b(dir / "batches.jsonl", std::ios::binary);
  for (const auto& [it, rec] : tr.batches)
    b << nlohmann::json{{"iteration", it}, {"epoch", rec.epoch}, {"n_pos", rec.n_pos},
                        {"n_neg", rec.n_neg}}
             .dump()
      << '\n';
}

/// Algorithm: train on labeled data, then repeatedly pseudo-label the unlabeled pool,
/// grow the dataset and fine-tune, keeping the best validation-F1 classifier.
///
/// INIT stops after the first round. FC runs one pass over the whole pool and fine-tunes
/// on the pseudo-labeled data alone. IST is the loop without the context window.
inline SelfTrainResult self_train(const CIClassifier& base, const std::vector<LabeledTriple>& train,
                                  const std::vector<LabeledTriple>& valid,
                                  const std::vector<HistoryResponsePair>& unlabeled,
                                  const std::vector<Dialogue>& dialogues,
                                  const SelfTrainConfig& cfg,
                                  const std::optional<std::filesystem::path>& ckpt_dir = std::nullopt,
                                  const ParallelFor& pfor = serial_for) {
  cfg.validate();
  if (train.empty()) throw InsufficientData("self-training needs labeled training data");
  TrainConfig tc = cfg.train;
  tc.epochs = cfg.epochs_per_iteration;
  tc.seed = cfg.seed;

  CIClassifier current = base;
  SelfTrainTrace trace;
  std::vector<LabeledTriple> data = train;
  FeatureSet data_fs = featurize(current, data, pfor);
  const FeatureSet valid_fs = featurize(current, valid, pfor);
  const FeatureSet* vptr = valid_fs.x.empty() ? nullptr : &valid_fs;

  auto record_batches = [&](int it, const TrainLog& log) {
    for (const auto& b : log.batches) trace.batches.emplace_back(it, b);
  };
  auto save_iter = [&](int it, const CIClassifier& c) {
    if (ckpt_dir) c.save(*ckpt_dir / ("iter_" + std::to_string(it)));
  };

  record_batches(0, train_features(current, data_fs, vptr, tc));
  const Confusion initial = confusion_at(current, valid_fs);
  trace.iterations.push_back({0, 0, 0, false, initial, data.size(), 0});
  save_iter(0, current);

  CIClassifier best = current;
  double best_f1 = initial.f1();
  const int max_it = cfg.variant == Variant::init ? 0
                     : cfg.variant == Variant::fc ? std::min(cfg.max_iterations, 1)
                                                  : cfg.max_iterations;
  if (max_it == 0) trace.stop_reason = "no self-training iterations";

  const auto pool = candidate_pool(unlabeled, dialogues);
  const auto pool_fs = featurize(current, [&] {
    std::vector<LabeledTriple> lt;
    lt.reserve(pool.size());
    for (const auto& p : pool) lt.push_back({p, 0, Origin::pseudo});
    return lt;
  }(), pfor);
  std::map<TripleKey, std::size_t> pool_index;
  for (std::size_t i = 0; i < pool.size(); ++i) pool_index.emplace(key_of(pool[i]), i);

  std::set<TripleKey> taken;
  for (const auto& d : data) taken.insert(key_of(d.triple));
  int low_streak = 0;
  int stale = 0;

  for (int it = 1; it <= max_it; ++it) {
    std::vector<LabeledTriple> pseudo;
    for (std::size_t i = 0; i < pool.size(); ++i) {
      if (taken.count(key_of(pool[i]))) continue;
      if (cfg.uses_window() && !cfg.context_window.count(pool[i].t - pool[i].j)) continue;
      const double s = current.score_features(pool_fs.x[i]);
      if (passes_constraints(pool[i], s, cfg)) pseudo.push_back({pool[i], 1, Origin::pseudo, it, s});
    }
    if (pseudo.empty()) {
      trace.stop_reason = "no new pseudo-positives";
      break;
    }
    for (const auto& p : pseudo) taken.insert(key_of(p.triple));
    auto neg = sample_negatives_per_response(
        pool, taken, pseudo, derive_seed(cfg.seed, "negatives", static_cast<std::uint64_t>(it)));
    for (auto& n : neg.triples) {
      n.iteration = it;
      taken.insert(key_of(n.triple));
    }

    std::vector<LabeledTriple> added = pseudo;
    added.insert(added.end(), neg.triples.begin(), neg.triples.end());
    FeatureSet added_fs;
    for (const auto& a : added) {
      added_fs.x.push_back(pool_fs.x[pool_index.at(key_of(a.triple))]);
      added_fs.y.push_back(a.label);
    }
    trace.pseudo_labels.insert(trace.pseudo_labels.end(), pseudo.begin(), pseudo.end());

    TrainConfig round = tc;
    round.seed = derive_seed(cfg.seed, "batching", static_cast<std::uint64_t>(it));
    if (cfg.variant == Variant::fc) {
      record_batches(it, train_features(current, added_fs, vptr, round));
    } else {
      data.insert(data.end(), added.begin(), added.end());
      data_fs.x.insert(data_fs.x.end(), added_fs.x.begin(), added_fs.x.end());
      data_fs.y.insert(data_fs.y.end(), added_fs.y.begin(), added_fs.y.end());
      record_batches(it, train_features(current, data_fs, vptr, round));
    }
    const Confusion m = confusion_at(current, valid_fs);
    const std::size_t size = cfg.variant == Variant::fc ? train.size() + added.size() : data.size();
    trace.iterations.push_back(
        {it, pseudo.size(), neg.triples.size(), neg.resampled, m, size, neg.borrowed});
    save_iter(it, current);

    low_streak = m.f1() < 0.5 * initial.f1() ? low_streak + 1 : 0;
    if (low_streak >= 2) {
      trace.stop_reason = "diverged";
      throw Divergence("validation F1 fell below half its initial value twice", trace);
    }
    if (m.f1() > best_f1) {
      best_f1 = m.f1();
      best = current;
      trace.best_iteration = it;
      stale = 0;
    } else if (++stale >= cfg.patience) {
      trace.stop_reason = "validation F1 stopped improving";
      break;
    }
  }
  if (trace.stop_reason.empty()) trace.stop_reason = "max iterations reached";
  return {best, trace};
}

}  // namespace cgd
