#pragma once

// Response generator adapters: the contract, two in-repo generators and a subprocess client.

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "cgd/common.hpp"
#include "cgd/encoder.hpp"
#include "cgd/subprocess.hpp"

namespace cgd {

struct DecodeParams {
  int beam = 5;
  int min_len = 0;
  int ngram_block = 0;
  std::uint64_t seed = 0;
  bool operator==(const DecodeParams&) const = default;
};

inline DecodeParams decode_preset(const std::string& name) {
  if (name == "plain5") return {5, 0, 0, 0};
  if (name == "reg10") return {10, 20, 3, 0};
  throw ConfigError("unknown decode preset '" + name + "'");
}

inline nlohmann::json to_json(const DecodeParams& p) {
  return {{"beam", p.beam}, {"min_len", p.min_len}, {"ngram_block", p.ngram_block}, {"seed", p.seed}};
}

class GeneratorAdapter {
 public:
  virtual ~GeneratorAdapter() = default;
  virtual std::string generate(const std::string& context, const DecodeParams& params) const = 0;
  /// One negative log-likelihood per whitespace token of `target`.
  virtual std::vector<double> score_target(const std::string& context,
                                           const std::string& target) const = 0;
  virtual std::string name() const = 0;
  virtual std::string version() const = 0;
  virtual std::string turn_separator() const { return "\n"; }
  /// Maximum context length in whitespace tokens; 0 means unlimited.
  virtual std::size_t max_context() const { return 0; }
  virtual bool concurrent() const { return true; }
};

namespace detail {

// Smoothed unigram NLL of each target token under the bag of `context_tokens`.
inline std::vector<double> unigram_nll(const std::vector<std::string>& context_tokens,
                                       const std::string& target) {
  constexpr double kAlpha = 0.1;
  constexpr double kVocab = 10000.0;
  std::unordered_map<std::string, double> counts;
  for (const auto& t : context_tokens) counts[t] += 1.0;
  const double denom = static_cast<double>(context_tokens.size()) + kAlpha * kVocab;
  std::vector<double> out;
  for (const auto& raw : whitespace_tokens(target)) {
    const auto norm = normalized_tokens(raw);
    const double c = norm.empty() ? 0.0 : (counts.count(norm[0]) ? counts[norm[0]] : 0.0);
    out.push_back(-std::log((c + kAlpha) / denom));
  }
  return out;
}

}  // namespace detail

/// Echoes the content words of its context in order of first appearance.
class TemplateGenerator : public GeneratorAdapter {
 public:
  explicit TemplateGenerator(std::string separator = "\n", std::size_t max_words = 12)
      : sep_(std::move(separator)), max_words_(max_words) {}

  std::string generate(const std::string& context, const DecodeParams& params) const override {
    static const std::unordered_set<std::string> kStop{
        "a", "an", "the", "and", "or", "but", "i", "you", "it", "is", "are", "was", "to",
        "of", "in", "on", "for", "my", "me", "so", "that", "this", "do", "be", "with", "at"};
    static const std::vector<std::string> kFill{
        "well", "honestly", "maybe", "we", "could", "talk", "about", "how", "things",
        "feel", "right", "now", "since", "there", "seems", "plenty", "worth", "sharing",
        "here", "together", "today", "again"};
    std::vector<std::string> words;
    std::unordered_set<std::string> seen;
    for (const auto& w : normalized_tokens(context)) {
      if (kStop.count(w) || !seen.insert(w).second) continue;
      words.push_back(w);
      if (words.size() >= max_words_) break;
    }
    for (std::size_t k = 0; static_cast<int>(words.size()) < params.min_len && k < kFill.size(); ++k)
      if (!seen.count(kFill[k])) words.push_back(kFill[k]);
    return join(words, " ");
  }

  std::vector<double> score_target(const std::string& context,
                                   const std::string& target) const override {
    return detail::unigram_nll(normalized_tokens(context), target);
  }

  std::string name() const override { return "template"; }
  std::string version() const override { return "1"; }
  std::string turn_separator() const override { return sep_; }

 private:
  std::string sep_;
  std::size_t max_words_;
};

/// Reads only the context turns whose text is exactly one of the given cause texts and
/// outputs their words sorted. Every other turn is ignored, so both outputs and scores
/// are functions of the cause turns alone.
class CauseOnlyGenerator : public GeneratorAdapter {
 public:
  CauseOnlyGenerator(std::vector<std::string> cause_texts, std::string separator = "\n")
      : causes_(cause_texts.begin(), cause_texts.end()), sep_(std::move(separator)) {}

  std::vector<std::string> cause_tokens(const std::string& context) const {
    std::vector<std::string> out;
    for (const auto& turn : split_on(context, sep_))
      if (causes_.count(turn)) {
        auto toks = normalized_tokens(turn);
        out.insert(out.end(), toks.begin(), toks.end());
      }
    return out;
  }

  std::string generate(const std::string& context, const DecodeParams&) const override {
    auto toks = cause_tokens(context);
    std::sort(toks.begin(), toks.end());
    return join(toks, " ");
  }

  std::vector<double> score_target(const std::string& context,
                                   const std::string& target) const override {
    return detail::unigram_nll(cause_tokens(context), target);
  }

  std::string name() const override { return "cause-oracle"; }
  std::string version() const override { return "1"; }
  std::string turn_separator() const override { return sep_; }

 private:
  std::set<std::string> causes_;
  std::string sep_;
};

/// External generator over the newline-delimited JSON protocol.
class SubprocessGenerator : public GeneratorAdapter {
 public:
  explicit SubprocessGenerator(const std::vector<std::string>& argv)
      : proc_(std::make_unique<JsonProcess>(argv)), info_(proc_->handshake()) {}

  std::string generate(const std::string& context, const DecodeParams& p) const override {
    nlohmann::json r;
    try {
      r = proc_->request({{"op", "generate"}, {"context", context}, {"params", to_json(p)}});
    } catch (const AdapterError& e) {
      throw GeneratorFailure(e.what());
    }
    if (!r.contains("text") || !r["text"].is_string())
      throw GeneratorFailure(info_.name + ": reply lacks 'text'");
    return r["text"].get<std::string>();
  }

  std::vector<double> score_target(const std::string& context,
                                   const std::string& target) const override {
    nlohmann::json r;
    try {
      r = proc_->request({{"op", "score"}, {"context", context}, {"target", target}});
    } catch (const AdapterError& e) {
      throw GeneratorFailure(e.what());
    }
    if (!r.contains("nll") || !r["nll"].is_array())
      throw GeneratorFailure(info_.name + ": reply lacks 'nll'");
    auto out = r["nll"].get<std::vector<double>>();
    if (out.size() != whitespace_tokens(target).size())
      throw GeneratorFailure(info_.name + ": nll length differs from target token count");
    return out;
  }

  std::string name() const override { return info_.name; }
  std::string version() const override { return info_.version; }
  std::string turn_separator() const override { return info_.turn_separator; }
  std::size_t max_context() const override { return info_.max_context; }
  bool concurrent() const override { return info_.concurrent; }

 private:
  std::unique_ptr<JsonProcess> proc_;
  AdapterInfo info_;
};

}  // namespace cgd
