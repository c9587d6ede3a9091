#pragma once

// Agreement, n-gram overlap, diversity, significance and best-worst scaling.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cgd/common.hpp"
#include "cgd/corpus.hpp"

namespace cgd {

using Tokens = std::vector<std::string>;

// ---------------------------------------------------------------------------
// Agreement

struct KappaResult {
  double kappa = 0.0;
  bool degenerate = false;  // p_e == 1: both raters constant and identical
};

inline KappaResult cohen_kappa(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size()) throw MisalignedInputs("kappa: label vectors differ in length");
  if (a.empty()) throw InsufficientData("kappa: empty label vectors");
  double n11 = 0, n10 = 0, n01 = 0, n00 = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a[i] != 0, y = b[i] != 0;
    if (x && y) ++n11;
    else if (x) ++n10;
    else if (y) ++n01;
    else ++n00;
  }
  const double n = static_cast<double>(a.size());
  const double po = (n11 + n00) / n;
  const double pa1 = (n11 + n10) / n, pb1 = (n11 + n01) / n;
  const double pe = pa1 * pb1 + (1 - pa1) * (1 - pb1);
  if (pe >= 1.0) return {1.0, true};
  return {(po - pe) / (1.0 - pe), false};
}

/// Indices of whitespace tokens of `text` overlapping any of the character spans.
inline std::set<std::size_t> span_token_indices(std::string_view text,
                                                const std::vector<CharSpan>& spans) {
  std::set<std::size_t> out;
  std::size_t i = 0, tok = 0;
  while (i < text.size()) {
    while (i < text.size() && static_cast<unsigned char>(text[i]) <= ' ') ++i;
    std::size_t j = i;
    while (j < text.size() && static_cast<unsigned char>(text[j]) > ' ') ++j;
    if (j > i) {
      for (const auto& s : spans)
        if (s.start < j && i < s.end) {
          out.insert(tok);
          break;
        }
      ++tok;
    }
    i = j;
  }
  return out;
}

inline double pair_f1(const std::set<std::size_t>& a, const std::set<std::size_t>& b) {
  if (a.empty() && b.empty()) return 1.0;
  if (a.empty() || b.empty()) return 0.0;
  std::size_t inter = 0;
  for (auto x : a) inter += b.count(x);
  if (inter == 0) return 0.0;
  const double p = static_cast<double>(inter) / static_cast<double>(a.size());
  const double r = static_cast<double>(inter) / static_cast<double>(b.size());
  return 2 * p * r / (p + r);
}

/// Token-overlap F1 averaged over all unordered annotator pairs.
inline double span_f1(const std::vector<std::set<std::size_t>>& annotators) {
  if (annotators.size() < 2) throw InsufficientData("span_f1 needs at least 2 annotators");
  double sum = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < annotators.size(); ++i)
    for (std::size_t j = i + 1; j < annotators.size(); ++j) {
      sum += pair_f1(annotators[i], annotators[j]);
      ++pairs;
    }
  return sum / static_cast<double>(pairs);
}

struct AgreementReport {
  std::size_t n_pairs = 0;
  std::size_t n_slots = 0;
  KappaResult kappa;
  std::size_t n_span_slots = 0;
  double span_f1 = 0.0;  // over causes both annotators marked
};

/// Agreement between two annotations of the same dialogues. Kappa runs over every
/// (pair, j < t) slot of pairs annotated by either side; span F1 over the slots both
/// mark as causes, a cause without spans covering its whole utterance.
inline AgreementReport annotation_agreement(const Corpus& a, const Corpus& b) {
  using Key = std::pair<std::string, std::size_t>;
  std::map<Key, const HistoryResponsePair*> pa, pb;
  for (const auto& p : a.pairs) pa[{p.dialogue_id, p.t}] = &p;
  for (const auto& p : b.pairs) pb[{p.dialogue_id, p.t}] = &p;
  std::set<Key> keys;
  for (const auto& [k, _] : pa) keys.insert(k);
  for (const auto& [k, _] : pb) keys.insert(k);

  DialogueIndex ia(a.dialogues), ib(b.dialogues);
  AgreementReport r;
  std::vector<int> la, lb;
  double f1_sum = 0.0;
  for (const auto& key : keys) {
    const Dialogue* d = ia.find(key.first);
    const Dialogue* other = ib.find(key.first);
    if (!d || !other) throw MisalignedInputs("dialogue '" + key.first + "' missing on one side");
    if (d->utterances.size() != other->utterances.size())
      throw MisalignedInputs("dialogue '" + key.first + "' differs in length");
    ++r.n_pairs;
    const auto* x = pa.count(key) ? pa.at(key) : nullptr;
    const auto* y = pb.count(key) ? pb.at(key) : nullptr;
    for (std::size_t j = 0; j < key.second; ++j) {
      const bool ca = x && x->cause_indices.count(j);
      const bool cb = y && y->cause_indices.count(j);
      la.push_back(ca);
      lb.push_back(cb);
      if (!(ca && cb)) continue;
      const auto& text = d->utterances.at(j).text;
      auto tokens_of = [&](const HistoryResponsePair& p) {
        auto it = p.cause_spans.find(j);
        if (it == p.cause_spans.end() || it->second.empty())
          return span_token_indices(text, {{0, text.size()}});
        return span_token_indices(text, it->second);
      };
      f1_sum += pair_f1(tokens_of(*x), tokens_of(*y));
      ++r.n_span_slots;
    }
  }
  r.n_slots = la.size();
  if (!la.empty()) r.kappa = cohen_kappa(la, lb);
  if (r.n_span_slots) r.span_f1 = f1_sum / static_cast<double>(r.n_span_slots);
  return r;
}

// ---------------------------------------------------------------------------
// BLEU

namespace detail {

inline std::map<Tokens, std::size_t> ngram_counts(const Tokens& toks, std::size_t n) {
  std::map<Tokens, std::size_t> out;
  if (toks.size() < n) return out;
  for (std::size_t i = 0; i + n <= toks.size(); ++i)
    out[Tokens(toks.begin() + static_cast<std::ptrdiff_t>(i),
               toks.begin() + static_cast<std::ptrdiff_t>(i + n))]++;
  return out;
}

}  // namespace detail

/// Sentence BLEU with clipped counts and the closest-reference brevity penalty.
/// A zero precision at order >= 2 is smoothed to 1/(2*|hyp|); orders longer than the
/// hypothesis have no n-grams and drop out of the geometric mean.
inline double bleu(const Tokens& hyp, const std::vector<Tokens>& refs, int max_order = 4) {
  if (max_order < 1) throw ConfigError("bleu: max_order must be >= 1");
  if (hyp.empty() || refs.empty()) return 0.0;
  const double c = static_cast<double>(hyp.size());
  double log_sum = 0.0;
  int orders = 0;
  for (int n = 1; n <= max_order; ++n) {
    const auto un = static_cast<std::size_t>(n);
    if (hyp.size() < un) break;
    const auto hc = detail::ngram_counts(hyp, un);
    std::map<Tokens, std::size_t> max_ref;
    for (const auto& r : refs)
      for (const auto& [g, k] : detail::ngram_counts(r, un)) max_ref[g] = std::max(max_ref[g], k);
    std::size_t clipped = 0;
    for (const auto& [g, k] : hc) {
      auto it = max_ref.find(g);
      if (it != max_ref.end()) clipped += std::min(k, it->second);
    }
    const double total = static_cast<double>(hyp.size() - un + 1);
    double p = static_cast<double>(clipped) / total;
    if (clipped == 0) {
      if (n == 1) return 0.0;
      p = 1.0 / (2.0 * c);
    }
    log_sum += std::log(p);
    ++orders;
  }
  std::size_t best = refs.front().size();
  for (const auto& r : refs) {
    const auto d = std::abs(static_cast<double>(r.size()) - c);
    const auto db = std::abs(static_cast<double>(best) - c);
    if (d < db || (d == db && r.size() < best)) best = r.size();
  }
  const double r = static_cast<double>(best);
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return std::clamp(bp * std::exp(log_sum / orders), 0.0, 1.0);
}

/// Mean of BLEU-1..BLEU-4.
inline double average_bleu(const Tokens& hyp, const std::vector<Tokens>& refs) {
  double s = 0.0;
  for (int n = 1; n <= 4; ++n) s += bleu(hyp, refs, n);
  return s / 4.0;
}

inline double average_bleu(std::string_view hyp, std::string_view ref) {
  return average_bleu(whitespace_tokens(hyp), std::vector<Tokens>{whitespace_tokens(ref)});
}

// ---------------------------------------------------------------------------
// Diversity

/// Unique n-grams over total n-grams; n-grams are taken within each output and pooled.
inline double distinct_n(const std::vector<Tokens>& outputs, int n) {
  if (n < 1) throw ConfigError("distinct_n: n must be >= 1");
  std::set<Tokens> unique;
  std::size_t total = 0;
  for (const auto& o : outputs)
    for (const auto& [g, k] : detail::ngram_counts(o, static_cast<std::size_t>(n))) {
      unique.insert(g);
      total += k;
    }
  if (total == 0) throw DegenerateInput("distinct_n: no " + std::to_string(n) + "-grams");
  return static_cast<double>(unique.size()) / static_cast<double>(total);
}

/// Mean average-BLEU of each candidate against all the others.
inline double self_bleu(const std::vector<Tokens>& candidates) {
  if (candidates.size() < 2) throw DegenerateInput("self_bleu needs at least 2 candidates");
  double s = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    std::vector<Tokens> others;
    for (std::size_t j = 0; j < candidates.size(); ++j)
      if (j != i) others.push_back(candidates[j]);
    s += average_bleu(candidates[i], others);
  }
  return s / static_cast<double>(candidates.size());
}

// ---------------------------------------------------------------------------
// Best-worst scaling

enum class Judgment { a_best, b_best, tie };

struct BWSRecord {
  std::string experiment_id;
  std::string item_id;
  std::string system_a;
  std::string system_b;
  std::string metric;  // empathy | fluency | informativeness | relevance
  std::vector<Judgment> judgments;
};

/// Per system: times judged best minus times judged worst.
inline std::map<std::string, long> bws_scores(const std::vector<BWSRecord>& records) {
  std::map<std::string, long> out;
  if (records.empty()) return out;
  for (const auto& r : records) {
    if (r.experiment_id != records.front().experiment_id)
      throw MisalignedInputs("bws_scores: records span several experiments");
    if (r.system_a == r.system_b) throw MisalignedInputs("bws_scores: system_a == system_b");
    out.try_emplace(r.system_a, 0);
    out.try_emplace(r.system_b, 0);
    for (auto j : r.judgments) {
      if (j == Judgment::a_best) {
        ++out[r.system_a];
        --out[r.system_b];
      } else if (j == Judgment::b_best) {
        ++out[r.system_b];
        --out[r.system_a];
      }
    }
  }
  return out;
}

/// Reads `experiment_id,item_id,system_a,system_b,metric,rater_id,judgment` rows (header
/// optional) and folds rows sharing (experiment, item, systems, metric) into one record.
inline std::vector<BWSRecord> load_bws_csv(std::istream& in) {
  static const std::set<std::string> kMetrics{"empathy", "fluency", "informativeness",
                                              "relevance"};
  std::vector<BWSRecord> out;
  std::map<std::string, std::size_t> slot;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (n == 1 && !f.empty() && f[0] == "experiment_id") continue;
    if (f.size() != 7) throw MalformedRecord(n, "expected 7 CSV fields");
    if (!kMetrics.count(f[4])) throw MalformedRecord(n, "unknown metric '" + f[4] + "'");
    Judgment j;
    if (f[6] == "a_best") j = Judgment::a_best;
    else if (f[6] == "b_best") j = Judgment::b_best;
    else if (f[6] == "tie") j = Judgment::tie;
    else throw MalformedRecord(n, "unknown judgment '" + f[6] + "'");
    const std::string key = f[0] + '\x1f' + f[1] + '\x1f' + f[2] + '\x1f' + f[3] + '\x1f' + f[4];
    auto [it, fresh] = slot.emplace(key, out.size());
    if (fresh) out.push_back({f[0], f[1], f[2], f[3], f[4], {}});
    out[it->second].judgments.push_back(j);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Significance

namespace detail {

// Continued fraction for the incomplete beta function (modified Lentz).
inline double betacf(double a, double b, double x) {
  constexpr int kMaxIter = 10000;
  constexpr double kEps = 1e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

}  // namespace detail

/// Regularized incomplete beta I_x(a, b).
inline double regularized_incomplete_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                          a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::betacf(a, b, x) / a;
  return 1.0 - front * detail::betacf(b, a, 1.0 - x) / b;
}

/// Two-sided tail probability P(|T| >= |t|) of Student's t with df degrees of freedom.
inline double student_t_two_sided_p(double t, double df) {
  if (std::isinf(t)) return 0.0;
  return regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
}

struct SignificanceResult {
  double t_statistic = 0.0;
  double p_value = 1.0;
  double df = 0.0;
  bool significant = false;
  bool degenerate = false;  // zero variance in both samples
};

/// Welch's unequal-variance two-sample t-test, two-sided.
inline SignificanceResult two_sample_t_test(const std::vector<double>& a,
                                            const std::vector<double>& b, double alpha = 0.05) {
  if (a.size() < 2 || b.size() < 2)
    throw InsufficientData("t-test needs at least 2 values per sample");
  const auto sa = mean_std(a), sb = mean_std(b);
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double qa = sa.stdev * sa.stdev / na, qb = sb.stdev * sb.stdev / nb;
  SignificanceResult r;
  const double diff = sa.mean - sb.mean;
  if (qa + qb == 0.0) {
    r.degenerate = true;
    r.df = na + nb - 2.0;
    if (diff == 0.0) return r;
    r.t_statistic = diff > 0 ? std::numeric_limits<double>::infinity()
                             : -std::numeric_limits<double>::infinity();
    r.p_value = 0.0;
    r.significant = true;
    return r;
  }
  r.t_statistic = diff / std::sqrt(qa + qb);
  r.df = (qa + qb) * (qa + qb) / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
  r.p_value = std::clamp(student_t_two_sided_p(r.t_statistic, r.df), 0.0, 1.0);
  r.significant = r.p_value <= alpha;
  return r;
}

}  // namespace cgd
