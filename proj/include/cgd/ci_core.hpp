#pragma once

// Classifier-based conditional-independence test: p(l = 1 | u_j, u_{t-1}, r_t).

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cgd/common.hpp"
#include "cgd/corpus.hpp"
#include "cgd/encoder.hpp"

namespace cgd {

inline constexpr std::string_view kDefaultSeparator = "</s>";
inline constexpr int kCheckpointFormat = 1;

struct Triple {
  std::string u_j;
  std::string u_prev;
  std::string response;
  std::size_t j = 0;
  std::size_t t = 0;
  std::string dialogue_id;
};

enum class Origin { gold, pseudo };

struct LabeledTriple {
  Triple triple;
  int label = 0;
  Origin origin = Origin::gold;
  int iteration = 0;  // self-training iteration that added a pseudo label
  double score = 0.0;  // selection score for pseudo labels
};

/// Which texts enter the encoder input, in order.
enum class InputLayout {
  response_prev_j,  // conditional test: response SEP u_{t-1} SEP u_j
  response_j,       // dependence test: response SEP u_j
};

inline std::vector<std::string> layout_names(InputLayout layout) {
  if (layout == InputLayout::response_j) return {"response", "u_j"};
  return {"response", "u_prev", "u_j"};
}

namespace detail {

inline std::vector<std::string> layout_segments(const Triple& tr, InputLayout layout) {
  if (layout == InputLayout::response_j) return {tr.response, tr.u_j};
  return {tr.response, tr.u_prev, tr.u_j};
}

inline std::string join_segments(const std::vector<std::string>& segs, const std::string& sep) {
  return join(segs, sep.empty() ? std::string(" ") : " " + sep + " ");
}

}  // namespace detail

/// Serializes a triple as `response SEP u_prev SEP u_j`. An empty separator joins the
/// texts with single spaces.
inline std::string build_input(const Triple& triple, const std::string& separator,
                               InputLayout layout = InputLayout::response_prev_j) {
  return detail::join_segments(detail::layout_segments(triple, layout), separator);
}

/// build_input under a whitespace-token budget. Tokens are removed oldest first: the
/// start of u_j, then of u_{t-1}, then of the response.
inline std::string build_input_truncated(const Triple& triple, const std::string& separator,
                                         std::size_t max_tokens,
                                         InputLayout layout = InputLayout::response_prev_j) {
  auto segs = detail::layout_segments(triple, layout);
  if (max_tokens == 0) return detail::join_segments(segs, separator);
  std::vector<std::vector<std::string>> toks;
  std::size_t total = 0;
  for (const auto& s : segs) {
    toks.push_back(whitespace_tokens(s));
    total += toks.back().size();
  }
  const std::size_t sep_tokens =
      separator.empty() ? 0 : whitespace_tokens(separator).size() * (segs.size() - 1);
  total += sep_tokens;
  if (total <= max_tokens) return detail::join_segments(segs, separator);
  std::size_t excess = total - max_tokens;
  for (std::size_t k = toks.size(); k-- > 0 && excess > 0;) {
    const std::size_t cut = std::min(excess, toks[k].size());
    toks[k].erase(toks[k].begin(), toks[k].begin() + static_cast<std::ptrdiff_t>(cut));
    excess -= cut;
  }
  for (std::size_t k = 0; k < segs.size(); ++k) segs[k] = join(toks[k], " ");
  return detail::join_segments(segs, separator);
}

// ---------------------------------------------------------------------------
// Supervised data

/// Triple (u_j, u_{t-1}, r_t) for candidate j of response t in a dialogue.
inline Triple make_triple(const Dialogue& d, std::size_t j, std::size_t t) {
  return {d.utterances.at(j).text, d.utterances.at(t - 1).text, d.utterances.at(t).text,
          j, t, d.id};
}

/// Gold-labeled triples: for every pair and every j <= t-2, label 1 iff j is an annotated
/// cause. u_{t-1} never appears as u_j.
inline std::vector<LabeledTriple> build_supervised_set(const std::vector<HistoryResponsePair>& pairs,
                                                       const std::vector<Dialogue>& dialogues) {
  DialogueIndex index(dialogues);
  std::vector<LabeledTriple> out;
  for (const auto& p : pairs) {
    if (p.t < 2) continue;
    const Dialogue& d = index.at(p.dialogue_id);
    for (std::size_t j = 0; j + 2 <= p.t; ++j)
      out.push_back({make_triple(d, j, p.t), p.cause_indices.count(j) ? 1 : 0, Origin::gold});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Classifier

struct Confusion {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  double precision() const { return tp + fp ? double(tp) / double(tp + fp) : 0.0; }
  double recall() const { return tp + fn ? double(tp) / double(tp + fn) : 0.0; }
  double f1() const {
    const double p = precision(), r = recall();
    return p + r > 0 ? 2 * p * r / (p + r) : 0.0;
  }
};

class CIClassifier {
 public:
  CIClassifier(std::shared_ptr<const EncoderAdapter> encoder,
               std::string separator = std::string(kDefaultSeparator),
               InputLayout layout = InputLayout::response_prev_j)
      : encoder_(std::move(encoder)),
        separator_(std::move(separator)),
        layout_(layout),
        weights_(encoder_->dim(), 0.0) {}

  const EncoderAdapter& encoder() const { return *encoder_; }
  std::shared_ptr<const EncoderAdapter> encoder_ptr() const { return encoder_; }
  const std::string& separator() const { return separator_; }
  InputLayout layout() const { return layout_; }
  const std::vector<double>& weights() const { return weights_; }
  double bias() const { return bias_; }
  void set_head(std::vector<double> w, double b) {
    if (w.size() != weights_.size()) throw ConfigError("head size does not match encoder");
    weights_ = std::move(w);
    bias_ = b;
  }
  int epochs_trained() const { return epochs_trained_; }
  void add_epochs(int n) { epochs_trained_ += n; }

  std::string input_text(const Triple& tr) const {
    return build_input_truncated(tr, separator_, encoder_->max_tokens(), layout_);
  }

  /// Mean-pooled encoder features of a triple.
  Vector features(const Triple& tr) const {
    try {
      return encoder_->mean_pool(input_text(tr));
    } catch (const Error& e) {
      throw EncoderFailure("triple (" + tr.dialogue_id + ", j=" + std::to_string(tr.j) +
                           ", t=" + std::to_string(tr.t) + "): " + e.what());
    }
  }

  double logit(const Vector& x) const {
    double z = bias_;
    for (std::size_t i = 0; i < x.size(); ++i) z += weights_[i] * x[i];
    return z;
  }

  /// Probability kept strictly inside (0, 1).
  double score_features(const Vector& x) const {
    return std::clamp(sigmoid(logit(x)), std::numeric_limits<double>::min(),
                      1.0 - std::numeric_limits<double>::epsilon() / 2);
  }

  double score(const Triple& tr) const { return score_features(features(tr)); }

  void save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    nlohmann::json j{{"format_version", kCheckpointFormat},
                     {"weights", weights_},
                     {"bias", bias_},
                     {"input_order", layout_names(layout_)},
                     {"separator", separator_},
                     {"encoder", {{"name", encoder_->name()}, {"version", encoder_->version()}}},
                     {"encoder_params", encoder_->params()},
                     {"epochs_trained", epochs_trained_}};
    std::ofstream out(dir / "head.json", std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint in " + dir.string());
    out << j.dump(1) << '\n';
  }

  /// Loads a checkpoint. Embedded reference-encoder parameters are used unless an
  /// encoder is supplied, in which case its name must match.
  static CIClassifier load(const std::filesystem::path& dir,
                           std::shared_ptr<const EncoderAdapter> encoder = nullptr) {
    const auto file = dir / "head.json";
    std::ifstream in(file, std::ios::binary);
    if (!in) throw MissingCheckpoint("no checkpoint at " + file.string());
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw MissingCheckpoint("unreadable checkpoint " + file.string() + ": " + e.what());
    }
    if (!j.contains("format_version") || j["format_version"] != kCheckpointFormat)
      throw MissingCheckpoint("unsupported checkpoint format in " + file.string());
    const auto enc_name = j.at("encoder").at("name").get<std::string>();
    if (!encoder) {
      if (enc_name != "bow-ppmi" || j["encoder_params"].is_null())
        throw MissingCheckpoint("checkpoint needs external encoder '" + enc_name + "'");
      encoder = std::make_shared<BowEncoder>(BowEncoder::from_params(j["encoder_params"]));
    } else if (encoder->name() != enc_name) {
      throw ConfigError("checkpoint encoder '" + enc_name + "' does not match '" +
                        encoder->name() + "'");
    }
    const auto order = j.at("input_order").get<std::vector<std::string>>();
    const auto layout = order.size() == 2 ? InputLayout::response_j : InputLayout::response_prev_j;
    CIClassifier c(encoder, j.at("separator").get<std::string>(), layout);
    c.set_head(j.at("weights").get<std::vector<double>>(), j.at("bias").get<double>());
    c.epochs_trained_ = j.value("epochs_trained", 0);
    return c;
  }

 private:
  std::shared_ptr<const EncoderAdapter> encoder_;
  std::string separator_;
  InputLayout layout_;
  std::vector<double> weights_;
  double bias_ = 0.0;
  int epochs_trained_ = 0;
};

using TripleScorer = std::function<double(const Triple&)>;

inline TripleScorer scorer_of(const CIClassifier& c) {
  return [&c](const Triple& t) { return c.score(t); };
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  double lr = 2e-5;
  int epochs = 10;
  std::size_t batch_size = 16;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double warmup_ratio = 0.1;
  bool shuffle = true;
  std::uint64_t seed = 0;
};

struct BatchRecord {
  int epoch = 0;
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  std::optional<Confusion> valid;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  std::vector<BatchRecord> batches;
  int best_epoch = -1;
  double best_valid_f1 = -1.0;
};

/// Precomputed features with labels; the encoder is frozen so features are fixed.
struct FeatureSet {
  std::vector<Vector> x;
  std::vector<int> y;
};

inline FeatureSet featurize(const CIClassifier& c, const std::vector<LabeledTriple>& data,
                            const ParallelFor& pfor = serial_for) {
  FeatureSet fs;
  fs.x.resize(data.size());
  fs.y.resize(data.size());
  pfor(data.size(), [&](std::size_t i) {
    fs.x[i] = c.features(data[i].triple);
    fs.y[i] = data[i].label;
  });
  return fs;
}

/// Mean binary cross-entropy of a linear-sigmoid head over the given rows.
inline double bce_loss(const std::vector<double>& w, double b, const std::vector<Vector>& x,
                       const std::vector<int>& y) {
  double loss = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double z = b;
    for (std::size_t k = 0; k < w.size(); ++k) z += w[k] * x[i][k];
    // log(1 + e^z) - y z, computed stably
    const double softplus = z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
    loss += softplus - (y[i] ? z : 0.0);
  }
  return loss / static_cast<double>(x.size());
}

/// Analytic gradient of bce_loss; the last entry is the bias component.
inline std::vector<double> bce_gradient(const std::vector<double>& w, double b,
                                        const std::vector<Vector>& x, const std::vector<int>& y) {
  std::vector<double> g(w.size() + 1, 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    double z = b;
    for (std::size_t k = 0; k < w.size(); ++k) z += w[k] * x[i][k];
    const double r = sigmoid(z) - (y[i] ? 1.0 : 0.0);
    for (std::size_t k = 0; k < w.size(); ++k) g[k] += r * x[i][k];
    g.back() += r;
  }
  for (auto& v : g) v /= static_cast<double>(x.size());
  return g;
}

inline Confusion confusion_at(const CIClassifier& c, const FeatureSet& fs, double threshold = 0.5) {
  Confusion m;
  for (std::size_t i = 0; i < fs.x.size(); ++i) {
    const bool pred = c.score_features(fs.x[i]) > threshold;
    if (pred && fs.y[i]) ++m.tp;
    else if (pred) ++m.fp;
    else if (fs.y[i]) ++m.fn;
    else ++m.tn;
  }
  return m;
}

/// Balanced mini-batches for one epoch: the majority class is down-sampled to the
/// minority count and each batch holds equal numbers of positives and negatives.
inline std::vector<std::vector<std::size_t>> balanced_batches(const std::vector<int>& y,
                                                              std::size_t batch_size, bool shuffle,
                                                              Rng& rng) {
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < y.size(); ++i) (y[i] ? pos : neg).push_back(i);
  if (shuffle) {
    rng.shuffle(pos);
    rng.shuffle(neg);
  }
  const std::size_t m = std::min(pos.size(), neg.size());
  const std::size_t half = batch_size / 2;
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t s = 0; s < m; s += half) {
    const std::size_t e = std::min(m, s + half);
    std::vector<std::size_t> b;
    for (std::size_t k = s; k < e; ++k) {
      b.push_back(pos[k]);
      b.push_back(neg[k]);
    }
    batches.push_back(std::move(b));
  }
  if (shuffle) rng.shuffle(batches);
  return batches;
}

/// Adam with a linear warmup-then-decay schedule over the head parameters. Keeps the
/// best-validation-F1 weights when validation data is supplied.
inline TrainLog train_features(CIClassifier& c, const FeatureSet& train,
                               const FeatureSet* valid, const TrainConfig& cfg) {
  if (cfg.batch_size < 2 || cfg.batch_size % 2 != 0)
    throw ConfigError("batch size must be an even number >= 2");
  if (cfg.epochs < 0) throw ConfigError("epochs must be >= 0");
  const auto n_pos = static_cast<std::size_t>(std::count(train.y.begin(), train.y.end(), 1));
  if (n_pos == 0 || n_pos == train.y.size())
    throw SingleClassData("training data must contain both labels");

  const std::size_t d = c.weights().size();
  std::vector<double> w = c.weights();
  double b = c.bias();
  std::vector<double> m1(d + 1, 0.0), m2(d + 1, 0.0);

  const std::size_t per_class = std::min(n_pos, train.y.size() - n_pos);
  const std::size_t half = cfg.batch_size / 2;
  const std::size_t steps_per_epoch = (per_class + half - 1) / half;
  const std::size_t total = steps_per_epoch * static_cast<std::size_t>(cfg.epochs);
  const auto warmup = static_cast<std::size_t>(std::ceil(cfg.warmup_ratio * static_cast<double>(total)));

  TrainLog log;
  Rng rng(derive_seed(cfg.seed, "batching"));
  std::size_t step = 0;
  std::vector<double> best_w = w;
  double best_b = b;

  for (int ep = 0; ep < cfg.epochs; ++ep) {
    auto batches = balanced_batches(train.y, cfg.batch_size, cfg.shuffle, rng);
    double loss_sum = 0.0;
    std::size_t loss_n = 0;
    for (const auto& batch : batches) {
      ++step;
      std::vector<Vector> bx;
      std::vector<int> by;
      std::size_t np = 0;
      for (auto i : batch) {
        bx.push_back(train.x[i]);
        by.push_back(train.y[i]);
        np += train.y[i] ? 1 : 0;
      }
      log.batches.push_back({ep, np, batch.size() - np});
      loss_sum += bce_loss(w, b, bx, by) * static_cast<double>(bx.size());
      loss_n += bx.size();
      const auto g = bce_gradient(w, b, bx, by);
      double lr = cfg.lr;
      if (step <= warmup && warmup > 0)
        lr *= static_cast<double>(step) / static_cast<double>(warmup);
      else if (total > warmup)
        lr *= static_cast<double>(total - step + 1) / static_cast<double>(total - warmup);
      const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
      for (std::size_t k = 0; k <= d; ++k) {
        m1[k] = cfg.beta1 * m1[k] + (1 - cfg.beta1) * g[k];
        m2[k] = cfg.beta2 * m2[k] + (1 - cfg.beta2) * g[k] * g[k];
        const double upd = lr * (m1[k] / bc1) / (std::sqrt(m2[k] / bc2) + cfg.adam_eps);
        if (k < d) w[k] -= upd;
        else b -= upd;
      }
    }
    c.set_head(w, b);
    EpochRecord rec{ep, loss_n ? loss_sum / static_cast<double>(loss_n) : 0.0, std::nullopt};
    if (valid && !valid->x.empty()) {
      rec.valid = confusion_at(c, *valid);
      const double f1 = rec.valid->f1();
      if (f1 > log.best_valid_f1) {
        log.best_valid_f1 = f1;
        log.best_epoch = ep;
        best_w = w;
        best_b = b;
      }
    } else {
      log.best_epoch = ep;
      best_w = w;
      best_b = b;
    }
    log.epochs.push_back(rec);
  }
  c.set_head(best_w, best_b);
  c.add_epochs(cfg.epochs);
  return log;
}

/// Minimizes binary cross-entropy on labeled triples. Validation triples, when given,
/// select the best epoch by F1.
inline TrainLog train_supervised(CIClassifier& c, const std::vector<LabeledTriple>& data,
                                 const TrainConfig& cfg = {},
                                 const std::vector<LabeledTriple>* valid = nullptr,
                                 const ParallelFor& pfor = serial_for) {
  const auto train = featurize(c, data, pfor);
  if (valid) {
    const auto v = featurize(c, *valid, pfor);
    return train_features(c, train, &v, cfg);
  }
  return train_features(c, train, nullptr, cfg);
}

// ---------------------------------------------------------------------------
// Evaluation

struct ClassifierEval {
  Confusion confusion;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double balanced_accuracy = 0.0;
};

/// P/R/F1 over all candidate triples of the gold pairs; balanced accuracy over a 1:1
/// resample (negatives down-sampled with the seed).
inline ClassifierEval evaluate_classifier(const CIClassifier& c,
                                          const std::vector<HistoryResponsePair>& gold,
                                          const std::vector<Dialogue>& dialogues,
                                          std::uint64_t seed = 0, double threshold = 0.5,
                                          const ParallelFor& pfor = serial_for) {
  const auto data = build_supervised_set(gold, dialogues);
  const auto fs = featurize(c, data, pfor);
  ClassifierEval ev;
  ev.confusion = confusion_at(c, fs, threshold);
  const auto& m = ev.confusion;
  if (m.tp + m.fn == 0) throw NoPositives("no positive triples in the gold pairs");
  ev.precision = m.precision();
  ev.recall = m.recall();
  ev.f1 = m.f1();

  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < fs.y.size(); ++i) (fs.y[i] ? pos : neg).push_back(i);
  Rng rng(derive_seed(seed, "evaluation"));
  rng.shuffle(neg);
  rng.shuffle(pos);
  const std::size_t k = std::min(pos.size(), neg.size());
  if (k == 0) {
    ev.balanced_accuracy = ev.recall;
    return ev;
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < k; ++i) {
    correct += c.score_features(fs.x[pos[i]]) > threshold ? 1 : 0;
    correct += c.score_features(fs.x[neg[i]]) > threshold ? 0 : 1;
  }
  ev.balanced_accuracy = static_cast<double>(correct) / static_cast<double>(2 * k);
  return ev;
}

inline nlohmann::json to_json(const ClassifierEval& e) {
  return {{"precision", e.precision},
          {"recall", e.recall},
          {"f1", e.f1},
          {"balanced_accuracy", e.balanced_accuracy},
          {"confusion",
           {{"tp", e.confusion.tp}, {"fp", e.confusion.fp}, {"fn", e.confusion.fn}, {"tn", e.confusion.tn}}}};
}

}  // namespace cgd
