#pragma once

// Cause-annotated dialogue corpora: data model, JSONL ingestion, splitting, statistics.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "cgd/common.hpp"

namespace cgd {

using json = nlohmann::json;

enum class Speaker { seeker, supporter, generic_a, generic_b };
enum class Source { esconv, msc, synthetic, other };

inline std::string to_string(Speaker s) {
  switch (s) {
    case Speaker::seeker: return "seeker";
    case Speaker::supporter: return "supporter";
    case Speaker::generic_a: return "generic_a";
    case Speaker::generic_b: return "generic_b";
  }
  return "generic_a";
}

inline std::optional<Speaker> speaker_from_string(std::string_view s) {
  if (s == "seeker") return Speaker::seeker;
  if (s == "supporter") return Speaker::supporter;
  if (s == "generic_a") return Speaker::generic_a;
  if (s == "generic_b") return Speaker::generic_b;
  return std::nullopt;
}

inline std::string to_string(Source s) {
  switch (s) {
    case Source::esconv: return "esconv";
    case Source::msc: return "msc";
    case Source::synthetic: return "synthetic";
    case Source::other: return "other";
  }
  return "other";
}

inline std::optional<Source> source_from_string(std::string_view s) {
  if (s == "esconv") return Source::esconv;
  if (s == "msc") return Source::msc;
  if (s == "synthetic") return Source::synthetic;
  if (s == "other") return Source::other;
  return std::nullopt;
}

/// Half-open character range [start, end) within an utterance text.
struct CharSpan {
  std::size_t start = 0;
  std::size_t end = 0;
  bool operator==(const CharSpan&) const = default;
};

struct Utterance {
  std::size_t index = 0;
  Speaker speaker = Speaker::generic_a;
  std::string text;
  std::vector<CharSpan> clause_spans;
  bool operator==(const Utterance&) const = default;
};

struct Dialogue {
  std::string id;
  Source source = Source::other;
  std::vector<Utterance> utterances;
  bool operator==(const Dialogue&) const = default;
};

/// A response u_t together with its history u_0..u_{t-1}. `cause_indices` is empty for
/// unlabeled pairs.
struct HistoryResponsePair {
  std::string dialogue_id;
  std::size_t t = 1;
  std::set<std::size_t> cause_indices;
  std::map<std::size_t, std::vector<CharSpan>> cause_spans;
  bool operator==(const HistoryResponsePair&) const = default;
};

struct Corpus {
  std::vector<Dialogue> dialogues;
  std::vector<HistoryResponsePair> pairs;
  std::vector<std::string> warnings;
};

/// Id → dialogue lookup over a dialogue list. The referenced vector must outlive the index.
class DialogueIndex {
 public:
  DialogueIndex() = default;
  explicit DialogueIndex(const std::vector<Dialogue>& dialogues) {
    for (const auto& d : dialogues) by_id_.emplace(d.id, &d);
  }
  const Dialogue& at(const std::string& id) const {
    auto it = by_id_.find(id);
    if (it == by_id_.end()) throw DanglingAnnotation("unknown dialogue id '" + id + "'");
    return *it->second;
  }
  const Dialogue* find(const std::string& id) const {
    auto it = by_id_.find(id);
    return it == by_id_.end() ? nullptr : it->second;
  }

 private:
  std::unordered_map<std::string, const Dialogue*> by_id_;
};

// ---------------------------------------------------------------------------
// JSONL I/O

namespace detail {

inline std::vector<CharSpan> parse_spans(const json& j, std::size_t line, std::size_t text_len,
                                         const std::string& where) {
  if (!j.is_array()) throw MalformedRecord(line, where + ": spans must be an array");
  std::vector<CharSpan> spans;
  for (const auto& s : j) {
    if (!s.is_array() || s.size() != 2 || !s[0].is_number_unsigned() ||
        !s[1].is_number_unsigned())
      throw MalformedRecord(line, where + ": span must be [start, end] of non-negative ints");
    CharSpan span{s[0].get<std::size_t>(), s[1].get<std::size_t>()};
    if (span.start > span.end || span.end > text_len)
      throw MalformedRecord(line, where + ": span [" + std::to_string(span.start) + "," +
                                      std::to_string(span.end) + ") outside text");
    spans.push_back(span);
  }
  auto sorted = spans;
  std::sort(sorted.begin(), sorted.end(),
            [](const CharSpan& a, const CharSpan& b) { return a.start < b.start; });
  for (std::size_t i = 1; i < sorted.size(); ++i)
    if (sorted[i].start < sorted[i - 1].end)
      throw MalformedRecord(line, where + ": overlapping spans");
  return spans;
}

inline json spans_to_json(const std::vector<CharSpan>& spans) {
  json out = json::array();
  for (const auto& s : spans) out.push_back({s.start, s.end});
  return out;
}

inline void warn_unknown(const json& obj, std::initializer_list<std::string_view> known,
                         std::size_t line, const std::string& where,
                         std::vector<std::string>& warnings) {
  for (const auto& [key, _] : obj.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end())
      warnings.push_back("line " + std::to_string(line) + ": ignoring unknown field '" + key +
                         "' in " + where);
  }
}

}  // namespace detail

/// Parses one corpus JSONL record. `line` is used for error messages only.
inline void parse_corpus_record(const std::string& text, std::size_t line, Corpus& out) {
  json rec;
  try {
    rec = json::parse(text);
  } catch (const json::parse_error& e) {
    throw MalformedRecord(line, std::string("invalid JSON: ") + e.what());
  }
  if (!rec.is_object()) throw MalformedRecord(line, "record must be a JSON object");
  detail::warn_unknown(rec, {"id", "source", "utterances", "annotations"}, line, "record",
                       out.warnings);

  Dialogue d;
  if (!rec.contains("id") || !rec["id"].is_string())
    throw MalformedRecord(line, "missing string field 'id'");
  d.id = rec["id"].get<std::string>();
  if (!rec.contains("source") || !rec["source"].is_string())
    throw MalformedRecord(line, "missing string field 'source'");
  auto src = source_from_string(rec["source"].get<std::string>());
  if (!src) throw MalformedRecord(line, "unknown source '" + rec["source"].get<std::string>() + "'");
  d.source = *src;

  if (!rec.contains("utterances") || !rec["utterances"].is_array())
    throw MalformedRecord(line, "missing array field 'utterances'");
  for (const auto& u : rec["utterances"]) {
    if (!u.is_object()) throw MalformedRecord(line, "utterance must be an object");
    detail::warn_unknown(u, {"speaker", "text", "spans"}, line, "utterance", out.warnings);
    if (!u.contains("speaker") || !u["speaker"].is_string())
      throw MalformedRecord(line, "utterance missing string 'speaker'");
    if (!u.contains("text") || !u["text"].is_string())
      throw MalformedRecord(line, "utterance missing string 'text'");
    auto sp = speaker_from_string(u["speaker"].get<std::string>());
    if (!sp) throw MalformedRecord(line, "unknown speaker '" + u["speaker"].get<std::string>() + "'");
    Utterance utt;
    utt.index = d.utterances.size();
    utt.speaker = *sp;
    utt.text = u["text"].get<std::string>();
    if (u.contains("spans"))
      utt.clause_spans = detail::parse_spans(u["spans"], line, utt.text.size(),
                                             "utterance " + std::to_string(utt.index));
    d.utterances.push_back(std::move(utt));
  }
  if (d.utterances.size() < 2)
    throw MalformedRecord(line, "dialogue '" + d.id + "' has fewer than 2 utterances");
  for (const auto& existing : out.dialogues)
    if (existing.id == d.id) throw MalformedRecord(line, "duplicate dialogue id '" + d.id + "'");

  if (rec.contains("annotations")) {
    if (!rec["annotations"].is_array()) throw MalformedRecord(line, "'annotations' must be an array");
    for (const auto& a : rec["annotations"]) {
      if (!a.is_object()) throw MalformedRecord(line, "annotation must be an object");
      detail::warn_unknown(a, {"t", "causes"}, line, "annotation", out.warnings);
      if (!a.contains("t") || !a["t"].is_number_integer())
        throw MalformedRecord(line, "annotation missing integer 't'");
      const auto t = a["t"].get<long long>();
      if (t < 1 || t >= static_cast<long long>(d.utterances.size()))
        throw DanglingAnnotation("line " + std::to_string(line) + ": annotation t=" +
                                 std::to_string(t) + " outside dialogue '" + d.id + "'");
      HistoryResponsePair p;
      p.dialogue_id = d.id;
      p.t = static_cast<std::size_t>(t);
      if (!a.contains("causes") || !a["causes"].is_array() || a["causes"].empty())
        throw MalformedRecord(line, "annotation t=" + std::to_string(t) + " has no causes");
      for (const auto& c : a["causes"]) {
        if (!c.is_object() || !c.contains("u") || !c["u"].is_number_integer())
          throw MalformedRecord(line, "cause must be an object with integer 'u'");
        detail::warn_unknown(c, {"u", "spans"}, line, "cause", out.warnings);
        const auto j = c["u"].get<long long>();
        if (j < 0 || j >= t)
          throw DanglingAnnotation("line " + std::to_string(line) + ": cause u=" +
                                   std::to_string(j) + " is not before t=" + std::to_string(t));
        const auto ju = static_cast<std::size_t>(j);
        p.cause_indices.insert(ju);
        if (c.contains("spans"))
          p.cause_spans[ju] = detail::parse_spans(c["spans"], line, d.utterances[ju].text.size(),
                                                  "cause " + std::to_string(j));
      }
      for (const auto& q : out.pairs)
        if (q.dialogue_id == p.dialogue_id && q.t == p.t)
          throw MalformedRecord(line, "duplicate annotation for t=" + std::to_string(t));
      out.pairs.push_back(std::move(p));
    }
  }
  out.dialogues.push_back(std::move(d));
}

inline Corpus load_corpus_stream(std::istream& in) {
  Corpus c;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    parse_corpus_record(line, n, c);
  }
  return c;
}

/// Loads a corpus JSONL file (one dialogue per line).
inline Corpus load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open corpus file " + path.string());
  return load_corpus_stream(in);
}

inline json dialogue_to_json(const Dialogue& d, const std::vector<HistoryResponsePair>& pairs) {
  json rec;
  rec["id"] = d.id;
  rec["source"] = to_string(d.source);
  json utts = json::array();
  for (const auto& u : d.utterances) {
    json ju{{"speaker", to_string(u.speaker)}, {"text", u.text}};
    if (!u.clause_spans.empty()) ju["spans"] = detail::spans_to_json(u.clause_spans);
    utts.push_back(std::move(ju));
  }
  rec["utterances"] = std::move(utts);
  json anns = json::array();
  for (const auto& p : pairs) {
    if (p.dialogue_id != d.id || p.cause_indices.empty()) continue;
    json causes = json::array();
    for (auto j : p.cause_indices) {
      json c{{"u", j}};
      if (auto it = p.cause_spans.find(j); it != p.cause_spans.end())
        c["spans"] = detail::spans_to_json(it->second);
      causes.push_back(std::move(c));
    }
    anns.push_back({{"t", p.t}, {"causes", std::move(causes)}});
  }
  if (!anns.empty()) rec["annotations"] = std::move(anns);
  return rec;
}

inline void save_corpus_stream(std::ostream& out, const std::vector<Dialogue>& dialogues,
                               const std::vector<HistoryResponsePair>& pairs) {
  for (const auto& d : dialogues) out << dialogue_to_json(d, pairs).dump() << '\n';
}

inline void save_corpus(const std::filesystem::path& path, const std::vector<Dialogue>& dialogues,
                        const std::vector<HistoryResponsePair>& pairs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write corpus file " + path.string());
  save_corpus_stream(out, dialogues, pairs);
}

// ---------------------------------------------------------------------------
// Pair enumeration

/// One unlabeled pair per utterance of the responder role at index t >= 1.
inline std::vector<HistoryResponsePair> enumerate_pairs(const Dialogue& dialogue,
                                                        Speaker responder) {
  std::vector<HistoryResponsePair> out;
  for (std::size_t t = 1; t < dialogue.utterances.size(); ++t)
    if (dialogue.utterances[t].speaker == responder) out.push_back({dialogue.id, t, {}, {}});
  return out;
}

/// Pairs for every utterance at index t >= 1 regardless of speaker.
inline std::vector<HistoryResponsePair> enumerate_pairs(const Dialogue& dialogue) {
  std::vector<HistoryResponsePair> out;
  for (std::size_t t = 1; t < dialogue.utterances.size(); ++t)
    out.push_back({dialogue.id, t, {}, {}});
  return out;
}

// ---------------------------------------------------------------------------
// Statistics

struct MeanStd {
  double mean = 0.0;
  double stdev = 0.0;
};

inline MeanStd mean_std(const std::vector<double>& xs) {
  MeanStd r;
  if (xs.empty()) return r;
  double s = 0.0;
  for (double x : xs) s += x;
  r.mean = s / static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - r.mean) * (x - r.mean);
    r.stdev = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return r;
}

struct StatsReport {
  std::size_t n_dialogues = 0;
  std::size_t n_pairs = 0;
  std::size_t n_utterances = 0;
  std::size_t n_cause_utterances = 0;
  MeanStd avg_cause_token_length;
  MeanStd cause_proportion_in_utterance;
  std::map<std::size_t, double> causes_per_response_histogram;
  std::map<std::size_t, double> proximity_histogram;
};

/// Number of whitespace tokens covered by a cause: the spans when present, else the
/// whole utterance.
inline std::size_t cause_token_length(const Utterance& u, const std::vector<CharSpan>* spans) {
  if (!spans || spans->empty()) return whitespace_tokens(u.text).size();
  std::size_t n = 0;
  for (const auto& s : *spans)
    n += whitespace_tokens(std::string_view(u.text).substr(s.start, s.end - s.start)).size();
  return n;
}

inline StatsReport corpus_stats(const std::vector<HistoryResponsePair>& pairs,
                                const std::vector<Dialogue>& dialogues) {
  StatsReport r;
  if (pairs.empty()) return r;
  DialogueIndex index(dialogues);

  std::set<std::string> dialogue_ids;
  std::set<std::pair<std::string, std::size_t>> cause_utts;
  std::vector<double> lengths, proportions;
  std::map<std::size_t, std::size_t> per_response, proximity;
  std::size_t slots = 0;

  for (const auto& p : pairs) {
    const Dialogue& d = index.at(p.dialogue_id);
    dialogue_ids.insert(p.dialogue_id);
    per_response[p.cause_indices.size()]++;
    for (auto j : p.cause_indices) {
      if (j >= p.t) throw DanglingAnnotation("cause index not before response");
      const Utterance& u = d.utterances.at(j);
      auto sit = p.cause_spans.find(j);
      const auto* spans = sit == p.cause_spans.end() ? nullptr : &sit->second;
      const auto len = cause_token_length(u, spans);
      const auto full = whitespace_tokens(u.text).size();
      lengths.push_back(static_cast<double>(len));
      proportions.push_back(full == 0 ? 0.0 : static_cast<double>(len) / static_cast<double>(full));
      cause_utts.emplace(p.dialogue_id, j);
      proximity[p.t - j]++;
      ++slots;
    }
  }
  r.n_dialogues = dialogue_ids.size();
  r.n_pairs = pairs.size();
  for (const auto& id : dialogue_ids) r.n_utterances += index.at(id).utterances.size();
  r.n_cause_utterances = cause_utts.size();
  r.avg_cause_token_length = mean_std(lengths);
  r.cause_proportion_in_utterance = mean_std(proportions);
  for (auto [k, n] : per_response)
    r.causes_per_response_histogram[k] = static_cast<double>(n) / static_cast<double>(pairs.size());
  for (auto [k, n] : proximity)
    r.proximity_histogram[k] = static_cast<double>(n) / static_cast<double>(slots);
  return r;
}

inline json to_json(const StatsReport& r) {
  auto hist = [](const std::map<std::size_t, double>& h) {
    json o = json::object();
    for (auto [k, v] : h) o[std::to_string(k)] = v;
    return o;
  };
  return {{"n_dialogues", r.n_dialogues},
          {"n_pairs", r.n_pairs},
          {"n_utterances", r.n_utterances},
          {"n_cause_utterances", r.n_cause_utterances},
          {"avg_cause_token_length",
           {{"mean", r.avg_cause_token_length.mean}, {"stdev", r.avg_cause_token_length.stdev}}},
          {"cause_proportion_in_utterance",
           {{"mean", r.cause_proportion_in_utterance.mean},
            {"stdev", r.cause_proportion_in_utterance.stdev}}},
          {"causes_per_response_histogram", hist(r.causes_per_response_histogram)},
          {"proximity_histogram", hist(r.proximity_histogram)}};
}

// ---------------------------------------------------------------------------
// Splitting

struct CorpusSplit {
  std::vector<HistoryResponsePair> train, valid, test;
  std::array<std::size_t, 3> dialogue_counts{};
};

/// Dialogue-granular split. Dialogue order (first appearance) is shuffled with the seed
/// and cut by the largest-remainder rounding of ratios.
inline CorpusSplit split_corpus(const std::vector<HistoryResponsePair>& pairs,
                                std::array<double, 3> ratios, std::uint64_t seed) {
  double sum = 0.0;
  for (double r : ratios) {
    if (r < 0.0 || !std::isfinite(r)) throw ConfigError("split ratios must be non-negative");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");

  std::vector<std::string> ids;
  std::unordered_set<std::string> seen;
  for (const auto& p : pairs)
    if (seen.insert(p.dialogue_id).second) ids.push_back(p.dialogue_id);
  const std::size_t n = ids.size();

  std::array<std::size_t, 3> counts{};
  std::array<double, 3> frac{};
  std::size_t assigned = 0;
  for (int i = 0; i < 3; ++i) {
    const double exact = ratios[i] * static_cast<double>(n);
    counts[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    frac[i] = exact - static_cast<double>(counts[i]);
    assigned += counts[i];
  }
  while (assigned < n) {
    int best = 0;
    for (int i = 1; i < 3; ++i)
      if (frac[i] > frac[best] + 1e-12) best = i;
    counts[best]++;
    frac[best] = -1.0;
    ++assigned;
  }
  for (int i = 0; i < 3; ++i)
    if (counts[i] == 0)
      throw InsufficientData("split " + std::to_string(i) + " would be empty (" +
                             std::to_string(n) + " dialogues)");

  Rng rng(derive_seed(seed, "split"));
  rng.shuffle(ids);
  std::unordered_map<std::string, int> bucket;
  for (std::size_t i = 0; i < n; ++i)
    bucket[ids[i]] = i < counts[0] ? 0 : (i < counts[0] + counts[1] ? 1 : 2);

  CorpusSplit s;
  s.dialogue_counts = counts;
  for (const auto& p : pairs) {
    switch (bucket[p.dialogue_id]) {
      case 0: s.train.push_back(p); break;
      case 1: s.valid.push_back(p); break;
      default: s.test.push_back(p); break;
    }
  }
  return s;
}

/// Text of utterances [0, t) of a pair's dialogue.
inline std::vector<std::string> history_texts(const Dialogue& d, std::size_t t) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < t && i < d.utterances.size(); ++i) out.push_back(d.utterances[i].text);
  return out;
}

}  // namespace cgd
