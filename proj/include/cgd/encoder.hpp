#pragma once

// Encoder adapters: the in-repo segment-aware bag-of-words encoder and a subprocess client.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "cgd/common.hpp"
#include "cgd/subprocess.hpp"

namespace cgd {

using Vector = std::vector<double>;

/// Maps text to a sequence of fixed-dimension vectors. Implementations are deterministic
/// once their parameters are fixed.
class EncoderAdapter {
 public:
  virtual ~EncoderAdapter() = default;
  virtual std::vector<Vector> encode(const std::string& text) const = 0;
  virtual std::size_t dim() const = 0;
  virtual std::string name() const = 0;
  virtual std::string version() const = 0;
  /// Maximum whitespace tokens per input; 0 means unlimited.
  virtual std::size_t max_tokens() const { return 0; }
  virtual bool concurrent() const { return true; }
  /// Parameters embedded into classifier checkpoints (null when not embeddable).
  virtual nlohmann::json params() const { return nullptr; }

  Vector mean_pool(const std::string& text) const {
    const auto seq = encode(text);
    if (seq.empty()) throw EncoderFailure(name() + " returned no vectors");
    Vector out(dim(), 0.0);
    for (const auto& v : seq) {
      if (v.size() != out.size()) throw EncoderFailure(name() + " returned a vector of wrong size");
      for (std::size_t i = 0; i < v.size(); ++i) out[i] += v[i];
    }
    for (auto& x : out) x /= static_cast<double>(seq.size());
    return out;
  }
};

/// Lowercased tokens with leading and trailing punctuation stripped.
inline std::vector<std::string> normalized_tokens(std::string_view text) {
  std::vector<std::string> out;
  for (auto& raw : whitespace_tokens(text)) {
    std::size_t b = 0, e = raw.size();
    while (b < e && std::ispunct(static_cast<unsigned char>(raw[b]))) ++b;
    while (e > b && std::ispunct(static_cast<unsigned char>(raw[e - 1]))) --e;
    if (b == e) continue;
    std::string t = raw.substr(b, e - b);
    for (auto& c : t) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    out.push_back(std::move(t));
  }
  return out;
}

/// Splits on every occurrence of a non-empty separator.
inline std::vector<std::string> split_on(const std::string& text, const std::string& sep) {
  std::vector<std::string> out;
  if (sep.empty()) return {text};
  std::size_t start = 0;
  for (;;) {
    auto pos = text.find(sep, start);
    if (pos == std::string::npos) {
      out.push_back(text.substr(start));
      return out;
    }
    out.push_back(text.substr(start, pos - start));
    start = pos + sep.size();
  }
}

// ---------------------------------------------------------------------------
// Word embeddings from positive PMI of within-utterance co-occurrence

struct WordEmbeddings {
  std::vector<std::string> vocab;
  Eigen::MatrixXd vectors;  // one unit-norm (or zero) row per vocabulary word
  std::unordered_map<std::string, std::size_t> index;

  void reindex() {
    index.clear();
    for (std::size_t i = 0; i < vocab.size(); ++i) index.emplace(vocab[i], i);
  }

  /// Cosine similarity clamped to [0, 1]; identical strings score 1.
  double similarity(const std::string& a, const std::string& b) const {
    if (a == b) return 1.0;
    auto ia = index.find(a), ib = index.find(b);
    if (ia == index.end() || ib == index.end()) return 0.0;
    const double c = vectors.row(static_cast<Eigen::Index>(ia->second))
                         .dot(vectors.row(static_cast<Eigen::Index>(ib->second)));
    return std::clamp(c, 0.0, 1.0);
  }
};

inline WordEmbeddings fit_embeddings(const std::vector<std::string>& texts, std::size_t dim,
                                     std::size_t vocab_cap = 1000) {
  std::unordered_map<std::string, std::size_t> df;
  std::vector<std::vector<std::string>> docs;
  docs.reserve(texts.size());
  for (const auto& t : texts) {
    auto toks = normalized_tokens(t);
    std::sort(toks.begin(), toks.end());
    toks.erase(std::unique(toks.begin(), toks.end()), toks.end());
    for (const auto& w : toks) df[w]++;
    docs.push_back(std::move(toks));
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(df.begin(), df.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  if (ranked.size() > vocab_cap) ranked.resize(vocab_cap);
  std::sort(ranked.begin(), ranked.end());

  WordEmbeddings emb;
  for (const auto& [w, _] : ranked) emb.vocab.push_back(w);
  emb.reindex();
  const auto V = static_cast<Eigen::Index>(emb.vocab.size());
  if (V == 0) {
    emb.vectors = Eigen::MatrixXd::Zero(0, static_cast<Eigen::Index>(dim));
    return emb;
  }

  Eigen::MatrixXd co = Eigen::MatrixXd::Zero(V, V);
  Eigen::VectorXd count = Eigen::VectorXd::Zero(V);
  double n_docs = 0;
  for (const auto& d : docs) {
    std::vector<Eigen::Index> ids;
    for (const auto& w : d)
      if (auto it = emb.index.find(w); it != emb.index.end())
        ids.push_back(static_cast<Eigen::Index>(it->second));
    if (ids.empty()) continue;
    ++n_docs;
    for (auto a : ids) {
      count(a) += 1;
      for (auto b : ids)
        if (a != b) co(a, b) += 1;
    }
  }
  Eigen::MatrixXd ppmi = Eigen::MatrixXd::Zero(V, V);
  for (Eigen::Index a = 0; a < V; ++a)
    for (Eigen::Index b = 0; b < V; ++b)
      if (co(a, b) > 0) ppmi(a, b) = std::max(0.0, std::log(co(a, b) * n_docs / (count(a) * count(b))));

  const auto k = std::min<Eigen::Index>(static_cast<Eigen::Index>(dim), V);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(ppmi);
  // Eigenvalues come in ascending order; keep the k largest.
  Eigen::MatrixXd e = Eigen::MatrixXd::Zero(V, static_cast<Eigen::Index>(dim));
  for (Eigen::Index c = 0; c < k; ++c) {
    const Eigen::Index src = V - 1 - c;
    const double lambda = std::max(0.0, solver.eigenvalues()(src));
    e.col(c) = solver.eigenvectors().col(src) * std::sqrt(lambda);
  }
  for (Eigen::Index r = 0; r < V; ++r) {
    const double n = e.row(r).norm();
    if (n > 1e-12) e.row(r) /= n;
  }
  emb.vectors = std::move(e);
  return emb;
}

// ---------------------------------------------------------------------------
// Reference encoder

/// Segment-aware bag-of-words encoder over `response SEP a SEP b` inputs. Overlap with b
/// only counts where a does not already account for it.
///
/// Per-token features (9 dims):
///   response tokens:  [1, in_a, in_b_not_a, sim_a, max(0, sim_b - sim_a), 0 ...]
///   segment-a tokens: [.., 1, in_resp, 0, 0]
///   segment-b tokens: [.., 0, 0, 1, in_resp_not_a]
/// where in_x is exact membership and sim_x the best embedding similarity to segment x.
class BowEncoder : public EncoderAdapter {
 public:
  static constexpr std::size_t kDim = 9;

  BowEncoder(WordEmbeddings emb, std::string separator, std::size_t max_tokens = 512)
      : emb_(std::move(emb)), sep_(std::move(separator)), max_tokens_(max_tokens) {}

  static BowEncoder fit(const std::vector<std::string>& texts, std::string separator,
                        std::size_t embed_dim = 64, std::size_t vocab_cap = 1000) {
    return BowEncoder(fit_embeddings(texts, embed_dim, vocab_cap), std::move(separator));
  }

  std::vector<Vector> encode(const std::string& text) const override {
    auto parts = split_on(text, sep_);
    std::array<std::vector<std::string>, 3> seg;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      auto toks = normalized_tokens(parts[i]);
      auto& dst = seg[std::min<std::size_t>(i, 2)];
      dst.insert(dst.end(), toks.begin(), toks.end());
    }
    std::array<std::unordered_set<std::string>, 3> sets;
    for (int s = 0; s < 3; ++s) sets[s].insert(seg[s].begin(), seg[s].end());
    auto in = [&](int s, const std::string& w) { return sets[s].count(w) ? 1.0 : 0.0; };
    auto sim = [&](int s, const std::string& w) {
      double best = 0.0;
      for (const auto& u : sets[s]) best = std::max(best, emb_.similarity(w, u));
      return best;
    };

    std::vector<Vector> out;
    for (const auto& w : seg[0]) {
      Vector v(kDim, 0.0);
      const double sa = sim(1, w), sb = sim(2, w);
      v[0] = 1.0;
      v[1] = in(1, w);
      v[2] = in(2, w) * (1.0 - v[1]);
      v[3] = sa;
      v[4] = std::max(0.0, sb - sa);
      out.push_back(std::move(v));
    }
    for (const auto& w : seg[1]) {
      Vector v(kDim, 0.0);
      v[5] = 1.0;
      v[6] = in(0, w);
      out.push_back(std::move(v));
    }
    for (const auto& w : seg[2]) {
      Vector v(kDim, 0.0);
      v[7] = 1.0;
      v[8] = in(0, w) * (1.0 - in(1, w));
      out.push_back(std::move(v));
    }
    if (out.empty()) out.emplace_back(kDim, 0.0);
    return out;
  }

  std::size_t dim() const override { return kDim; }
  std::string name() const override { return "bow-ppmi"; }
  std::string version() const override { return "1"; }
  std::size_t max_tokens() const override { return max_tokens_; }
  const std::string& separator() const { return sep_; }
  const WordEmbeddings& embeddings() const { return emb_; }

  nlohmann::json params() const override {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index r = 0; r < emb_.vectors.rows(); ++r) {
      std::vector<double> row_copy(static_cast<std::size_t>(emb_.vectors.cols()));
      for (Eigen::Index c = 0; c < emb_.vectors.cols(); ++c)
        row_copy[static_cast<std::size_t>(c)] = emb_.vectors(r, c);
      rows.push_back(std::move(row_copy));
    }
    return {{"separator", sep_},
            {"max_tokens", max_tokens_},
            {"embed_dim", emb_.vectors.cols()},
            {"vocab", emb_.vocab},
            {"vectors", std::move(rows)}};
  }

  static BowEncoder from_params(const nlohmann::json& p) {
    WordEmbeddings emb;
    emb.vocab = p.at("vocab").get<std::vector<std::string>>();
    const auto cols = p.at("embed_dim").get<Eigen::Index>();
    const auto& rows = p.at("vectors");
    emb.vectors = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(emb.vocab.size()), cols);
    for (std::size_t r = 0; r < emb.vocab.size(); ++r)
      for (Eigen::Index c = 0; c < cols; ++c)
        emb.vectors(static_cast<Eigen::Index>(r), c) = rows.at(r).at(static_cast<std::size_t>(c)).get<double>();
    emb.reindex();
    return BowEncoder(std::move(emb), p.at("separator").get<std::string>(),
                      p.value("max_tokens", std::size_t{512}));
  }

 private:
  WordEmbeddings emb_;
  std::string sep_;
  std::size_t max_tokens_;
};

// ---------------------------------------------------------------------------
// Subprocess encoder

/// Talks to an external encoder over the newline-delimited JSON protocol.
class SubprocessEncoder : public EncoderAdapter {
 public:
  explicit SubprocessEncoder(const std::vector<std::string>& argv)
      : proc_(std::make_unique<JsonProcess>(argv)), info_(proc_->handshake()) {
    dim_ = encode("probe").front().size();
  }

  std::vector<Vector> encode(const std::string& text) const override {
    nlohmann::json r;
    try {
      r = proc_->request({{"op", "encode"}, {"text", text}});
    } catch (const AdapterError& e) {
      throw EncoderFailure(e.what());
    }
    if (!r.contains("vectors") || !r["vectors"].is_array() || r["vectors"].empty())
      throw EncoderFailure(info_.name + ": reply lacks non-empty 'vectors'");
    auto out = r["vectors"].get<std::vector<Vector>>();
    for (const auto& v : out)
      if (dim_ != 0 && v.size() != dim_) throw EncoderFailure(info_.name + ": inconsistent dimension");
    return out;
  }

  std::size_t dim() const override { return dim_; }
  std::string name() const override { return info_.name; }
  std::string version() const override { return info_.version; }
  std::size_t max_tokens() const override { return info_.max_context; }
  bool concurrent() const override { return info_.concurrent; }

 private:
  std::unique_ptr<JsonProcess> proc_;
  AdapterInfo info_;
  std::size_t dim_ = 0;
};

}  // namespace cgd
