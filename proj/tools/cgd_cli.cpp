// cgd: command-line front end. Every command writes its artifacts and a manifest into
// one run directory and prints a JSON summary on stdout.
//
// Exit codes: 0 ok, 1 generic failure, 2 input schema violation, 3 self-training
// divergence, 4 adapter handshake failure, 5 missing checkpoint.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <openssl/evp.h>

#include "cgd/cgd.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cgd;

namespace {

enum Exit : int { ok = 0, generic = 1, schema = 2, divergence = 3, handshake = 4, checkpoint = 5 };

constexpr int kConfigVersion = 1;

// ---------------------------------------------------------------------------
// Hashing and run directories

std::string sha256_hex(std::string_view data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("SHA-256 failed");
  std::ostringstream o;
  for (unsigned i = 0; i < len; ++i) o << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return o.str();
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string file_sha256(const fs::path& p) { return sha256_hex(read_file(p)); }

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream o;
  o << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return o.str();
}

/// Output directory of one command invocation plus the manifest describing it.
class Run {
 public:
  Run(std::string command, json config, const std::optional<fs::path>& out)
      : command_(std::move(command)), config_(std::move(config)) {
    hash_ = sha256_hex(config_.dump());
    if (out) {
      dir_ = *out;
    } else {
      const char* root = std::getenv("CG_RUNS_DIR");
      dir_ = fs::path(root && *root ? root : "runs") / (command_ + "-" + hash_.substr(0, 12));
    }
    fs::create_directories(dir_);
  }

  const fs::path& dir() const { return dir_; }

  void input(const fs::path& p) { inputs_.push_back(p); }
  void seed(const std::string& stream, std::uint64_t base) { seeds_[stream] = derive_seed(base, stream); }

  fs::path path(const std::string& rel) {
    const auto p = dir_ / rel;
    fs::create_directories(p.parent_path());
    return p;
  }

  void write(const std::string& rel, const std::string& content) {
    std::ofstream out(path(rel), std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + (dir_ / rel).string());
    out << content;
    outputs_.insert(rel);
  }
  void write_json(const std::string& rel, const json& j) { write(rel, j.dump(2) + "\n"); }
  void write_jsonl(const std::string& rel, const std::vector<json>& rows) {
    std::string s;
    for (const auto& r : rows) s += r.dump() + "\n";
    write(rel, s);
  }
  /// Registers files some library call wrote under `rel`.
  void adopt(const std::string& rel) {
    const auto p = dir_ / rel;
    if (fs::is_directory(p)) {
      for (const auto& e : fs::recursive_directory_iterator(p))
        if (e.is_regular_file()) outputs_.insert(fs::relative(e.path(), dir_).generic_string());
    } else if (fs::exists(p)) {
      outputs_.insert(rel);
    }
  }

  void finish() const {
    json m{{"command", command_},
           {"config", config_},
           {"config_hash", hash_},
           {"toolkit_version", std::string(kToolkitVersion)},
           {"timestamp", utc_timestamp()}};
    m["seeds"] = json::object();
    for (const auto& [k, v] : seeds_) m["seeds"][k] = v;
    m["inputs"] = json::array();
    for (const auto& p : inputs_) m["inputs"].push_back({{"path", p.string()}, {"sha256", file_sha256(p)}});
    m["outputs"] = json::array();
    for (const auto& rel : outputs_)
      m["outputs"].push_back({{"path", rel}, {"sha256", file_sha256(dir_ / rel)}});
    std::ofstream out(dir_ / "manifest.json", std::ios::binary);
    out << m.dump(2) << "\n";
  }

 private:
  std::string command_;
  json config_;
  std::string hash_;
  fs::path dir_;
  std::vector<fs::path> inputs_;
  std::map<std::string, std::uint64_t> seeds_;
  std::set<std::string> outputs_;
};

// ---------------------------------------------------------------------------
// Config files: {"version": 1, "<command>": {"<long option>": value}}; flat keys apply
// to every command. Command-line values win.

std::string config_scalar(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  return v.dump();
}

void apply_config(CLI::App& sub, const fs::path& file) {
  json cfg;
  try {
    cfg = json::parse(read_file(file));
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + file.string() + ": " + e.what());
  }
  if (!cfg.is_object() || !cfg.contains("version") || cfg["version"] != kConfigVersion)
    throw ConfigError("config " + file.string() + " needs \"version\": " + std::to_string(kConfigVersion));
  json merged = json::object();
  for (const auto& [k, v] : cfg.items())
    if (!v.is_object() && k != "version") merged[k] = v;
  if (cfg.contains(sub.get_name()) && cfg[sub.get_name()].is_object())
    for (const auto& [k, v] : cfg[sub.get_name()].items()) merged[k] = v;

  for (const auto& [key, value] : merged.items()) {
    std::string name = key;
    std::replace(name.begin(), name.end(), '_', '-');
    CLI::Option* opt = nullptr;
    try {
      opt = sub.get_option("--" + name);
    } catch (const CLI::OptionNotFound&) {
      continue;  // keys for other commands
    }
    if (opt->count() > 0) continue;
    if (value.is_array()) {
      std::vector<std::string> parts;
      for (const auto& x : value) parts.push_back(config_scalar(x));
      opt->add_result(join(parts, ","));
    } else {
      opt->add_result(config_scalar(value));
    }
    opt->run_callback();
  }
}

json effective_config(const CLI::App& sub) {
  json j{{"command", sub.get_name()}};
  json opts = json::object();
  for (const auto* o : sub.get_options()) {
    if (o == sub.get_help_ptr()) continue;
    const auto name = o->get_name(false, true);
    const auto& res = o->results();
    std::string key = o->get_lnames().empty() ? name : o->get_lnames().front();
    if (!res.empty()) opts[key] = res.size() == 1 ? json(res.front()) : json(res);
    else opts[key] = o->get_default_str();
  }
  j["options"] = opts;
  return j;
}

// ---------------------------------------------------------------------------
// Shared helpers

std::vector<double> parse_doubles(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    try {
      out.push_back(std::stod(cell));
    } catch (const std::exception&) {
      throw ConfigError("not a number: '" + cell + "'");
    }
  }
  return out;
}

std::set<std::size_t> parse_window(const std::string& s) {
  std::set<std::size_t> out;
  for (double v : parse_doubles(s)) {
    if (v < 0 || v != std::floor(v)) throw ConfigError("window offsets must be integers");
    out.insert(static_cast<std::size_t>(v));
  }
  return out;
}

json corpus_summary(const Corpus& c) {
  std::size_t utts = 0;
  for (const auto& d : c.dialogues) utts += d.utterances.size();
  return {{"n_dialogues", c.dialogues.size()}, {"n_pairs", c.pairs.size()},
          {"n_utterances", utts}, {"warnings", c.warnings}};
}

Corpus load_checked(Run& run, const fs::path& p) {
  run.input(p);
  auto c = load_corpus(p);
  for (const auto& w : c.warnings) std::cerr << "warning: " << p.string() << ": " << w << "\n";
  return c;
}

/// Pairs of an unlabeled corpus: its annotated (dialogue, t) slots when present, else
/// every utterance of the responder role.
std::vector<HistoryResponsePair> unlabeled_pairs(const Corpus& c, const std::string& responder) {
  if (!c.pairs.empty() && responder == "auto") {
    std::vector<HistoryResponsePair> out;
    for (const auto& p : c.pairs) out.push_back({p.dialogue_id, p.t, {}, {}});
    return out;
  }
  std::vector<HistoryResponsePair> out;
  for (const auto& d : c.dialogues) {
    std::vector<HistoryResponsePair> ps;
    if (responder == "auto" || responder == "any") {
      ps = enumerate_pairs(d);
    } else {
      const auto sp = speaker_from_string(responder);
      if (!sp) throw ConfigError("unknown responder role '" + responder + "'");
      ps = enumerate_pairs(d, *sp);
    }
    out.insert(out.end(), ps.begin(), ps.end());
  }
  return out;
}

std::shared_ptr<const EncoderAdapter> external_encoder(const std::string& spec) {
  if (spec.empty() || spec == "bow") return nullptr;
  return std::make_shared<SubprocessEncoder>(split_command(spec));
}

CIClassifier load_classifier(const fs::path& dir, const std::string& encoder) {
  return CIClassifier::load(dir, external_encoder(encoder));
}

std::unique_ptr<GeneratorAdapter> make_generator(const std::string& spec, const std::string& sep) {
  if (spec == "tmpl" || spec == "template") return std::make_unique<TemplateGenerator>(sep);
  if (spec == "oracle") throw ConfigError("the oracle generator is only available to perturb");
  return std::make_unique<SubprocessGenerator>(split_command(spec));
}

std::vector<json> read_jsonl(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::vector<json> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::parse_error& e) {
      throw MalformedRecord(n, p.filename().string() + ": " + e.what());
    }
  }
  return out;
}

std::vector<std::string> read_lines(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    out.push_back(line);
  }
  return out;
}

json confusion_json(const Confusion& m) {
  return {{"precision", m.precision()}, {"recall", m.recall()}, {"f1", m.f1()},
          {"tp", m.tp}, {"fp", m.fp}, {"fn", m.fn}, {"tn", m.tn}};
}

// ---------------------------------------------------------------------------
// Commands

struct Globals {
  std::optional<fs::path> config;
  std::optional<fs::path> out;
  unsigned jobs = 1;
};

using Handler = std::function<json(Run&, const ParallelFor&)>;

struct IngestArgs {
  fs::path corpus;
};

json cmd_ingest(Run& run, const IngestArgs& a) {
  const auto c = load_checked(run, a.corpus);
  std::ostringstream ss;
  save_corpus_stream(ss, c.dialogues, c.pairs);
  run.write("corpus.jsonl", ss.str());
  const auto s = corpus_summary(c);
  run.write_json("summary.json", s);
  return s;
}

json cmd_stats(Run& run, const IngestArgs& a) {
  const auto c = load_checked(run, a.corpus);
  const auto j = to_json(corpus_stats(c.pairs, c.dialogues));
  run.write_json("stats.json", j);
  return j;
}

struct AgreementArgs {
  fs::path a, b;
};

json cmd_agreement(Run& run, const AgreementArgs& a) {
  const auto x = load_checked(run, a.a);
  const auto y = load_checked(run, a.b);
  const auto r = annotation_agreement(x, y);
  json j{{"n_pairs", r.n_pairs}, {"n_slots", r.n_slots}, {"kappa", r.kappa.kappa},
         {"kappa_degenerate", r.kappa.degenerate}, {"n_span_slots", r.n_span_slots},
         {"span_f1", r.span_f1}};
  run.write_json("agreement.json", j);
  return j;
}

struct SplitArgs {
  fs::path corpus;
  std::string ratios = "0.8,0.1,0.1";
  std::uint64_t seed = 0;
};

json cmd_split(Run& run, const SplitArgs& a) {
  const auto c = load_checked(run, a.corpus);
  const auto r = parse_doubles(a.ratios);
  if (r.size() != 3) throw ConfigError("--ratios needs three values");
  run.seed("split", a.seed);
  const auto s = split_corpus(c.pairs, {r[0], r[1], r[2]}, a.seed);
  DialogueIndex index(c.dialogues);
  auto emit = [&](const std::string& name, const std::vector<HistoryResponsePair>& pairs) {
    std::vector<std::string> ids;
    std::set<std::string> seen;
    for (const auto& p : pairs)
      if (seen.insert(p.dialogue_id).second) ids.push_back(p.dialogue_id);
    std::ostringstream ss;
    for (const auto& id : ids) ss << dialogue_to_json(index.at(id), pairs).dump() << '\n';
    run.write(name + ".jsonl", ss.str());
  };
  emit("train", s.train);
  emit("valid", s.valid);
  emit("test", s.test);
  json j{{"dialogues", {{"train", s.dialogue_counts[0]}, {"valid", s.dialogue_counts[1]}, {"test", s.dialogue_counts[2]}}},
         {"pairs", {{"train", s.train.size()}, {"valid", s.valid.size()}, {"test", s.test.size()}}}};
  run.write_json("summary.json", j);
  return j;
}

struct TrainArgs {
  fs::path train;
  std::optional<fs::path> unlabeled, valid;
  std::string variant = "constrain";
  double threshold = 0.9;
  std::string window = "2,3";
  std::uint64_t seed = 0;
  std::string encoder = "bow";
  std::size_t embed_dim = 32;
  double lr = 2e-5;
  int epochs = 10;
  std::size_t batch_size = 16;
  int max_iters = 5;
  int patience = 1;
  std::string responder = "auto";
};

json cmd_train_ci(Run& run, const TrainArgs& a, const ParallelFor& pfor) {
  SelfTrainConfig cfg;
  cfg.variant = variant_from_string(a.variant);
  cfg.threshold = a.threshold;
  cfg.context_window = parse_window(a.window);
  cfg.seed = a.seed;
  cfg.max_iterations = a.max_iters;
  cfg.epochs_per_iteration = a.epochs;
  cfg.patience = a.patience;
  cfg.train.lr = a.lr;
  cfg.train.batch_size = a.batch_size;
  cfg.train.seed = a.seed;
  cfg.validate();
  for (const auto* s : {"split", "negatives", "batching"}) run.seed(s, a.seed);

  const auto labeled = load_checked(run, a.train);
  if (labeled.pairs.empty()) throw InsufficientData("training corpus has no annotated pairs");
  Corpus unl;
  if (a.unlabeled) unl = load_checked(run, *a.unlabeled);
  else if (cfg.variant != Variant::init && cfg.max_iterations > 0)
    throw ConfigError("--unlabeled is required for variant " + a.variant);
  const auto unl_pairs = unlabeled_pairs(unl, a.responder);

  std::vector<HistoryResponsePair> train_pairs, valid_pairs;
  std::vector<Dialogue> dialogues = labeled.dialogues;
  if (a.valid) {
    const auto v = load_checked(run, *a.valid);
    train_pairs = labeled.pairs;
    valid_pairs = v.pairs;
    dialogues.insert(dialogues.end(), v.dialogues.begin(), v.dialogues.end());
  } else {
    auto s = split_corpus(labeled.pairs, {0.8, 0.1, 0.1}, a.seed);
    train_pairs = std::move(s.train);
    valid_pairs = std::move(s.valid);
    valid_pairs.insert(valid_pairs.end(), s.test.begin(), s.test.end());
  }

  std::shared_ptr<const EncoderAdapter> enc = external_encoder(a.encoder);
  if (!enc) {
    std::vector<std::string> texts;
    for (const Corpus* c : {&labeled, static_cast<const Corpus*>(&unl)})
      for (const auto& d : c->dialogues)
        for (const auto& u : d.utterances) texts.push_back(u.text);
    enc = std::make_shared<BowEncoder>(BowEncoder::fit(texts, std::string(kDefaultSeparator), a.embed_dim));
  }
  const CIClassifier base(enc, std::string(kDefaultSeparator), InputLayout::response_prev_j);
  const auto train = build_supervised_set(train_pairs, dialogues);
  const auto valid = build_supervised_set(valid_pairs, dialogues);

  SelfTrainResult res{base, {}};
  try {
    res = self_train(base, train, valid, unl_pairs, unl.dialogues, cfg, run.path("checkpoints"), pfor);
  } catch (const Divergence& e) {
    write_trace(e.trace(), run.dir());
    for (const auto* f : {"trace.jsonl", "pseudo_labels.jsonl", "batches.jsonl", "checkpoints"}) run.adopt(f);
    throw;
  }
  write_trace(res.trace, run.dir());
  res.classifier.save(run.path("final"));
  for (const auto* f : {"trace.jsonl", "pseudo_labels.jsonl", "batches.jsonl", "checkpoints", "final"})
    run.adopt(f);

  const auto vfs = featurize(res.classifier, valid, pfor);
  const auto m = confusion_at(res.classifier, vfs);
  json j{{"variant", a.variant},
         {"best_iteration", res.trace.best_iteration},
         {"iterations", res.trace.iterations.size() - 1},
         {"n_pseudo_labels", res.trace.pseudo_labels.size()},
         {"stop_reason", res.trace.stop_reason},
         {"valid", confusion_json(m)}};
  run.write_json("summary.json", j);
  std::cerr << "validation P " << m.precision() << " R " << m.recall() << " F1 " << m.f1() << "\n";
  return j;
}

struct IdentifyArgs {
  fs::path corpus;
  std::optional<fs::path> ci;
  std::string mode = "inference";
  double threshold = 0.5;
  std::string baseline = "none";
  std::string encoder = "bow";
};

json cmd_identify(Run& run, const IdentifyArgs& a, const ParallelFor& pfor) {
  const auto c = load_checked(run, a.corpus);
  const bool gold = !c.pairs.empty();
  std::vector<HistoryResponsePair> pairs = gold ? c.pairs : unlabeled_pairs(c, "any");
  std::vector<CausePrediction> preds(pairs.size());
  if (a.baseline != "none") {
    Baseline kind;
    if (a.baseline == "always_prev") kind = Baseline::always_prev;
    else if (a.baseline == "always_prev_two") kind = Baseline::always_prev_two;
    else throw ConfigError("unknown baseline '" + a.baseline + "'");
    for (std::size_t i = 0; i < pairs.size(); ++i) preds[i] = baseline_causes(pairs[i], kind);
  } else {
    if (!a.ci) throw ConfigError("--ci is required unless --baseline is given");
    const auto clf = load_classifier(*a.ci, a.encoder);
    run.input(*a.ci / "head.json");
    PredictMode mode;
    if (a.mode == "inference") mode = PredictMode::inference;
    else if (a.mode == "train") mode = PredictMode::train_preprocess;
    else throw ConfigError("--mode must be inference or train");
    DialogueIndex index(c.dialogues);
    const auto scorer = scorer_of(clf);
    pfor(pairs.size(), [&](std::size_t i) {
      preds[i] = predict_causes(scorer, index.at(pairs[i].dialogue_id), pairs[i].t, mode, a.threshold);
    });
  }
  std::vector<json> rows;
  for (const auto& p : preds) rows.push_back(to_json(p));
  run.write_jsonl("predictions.jsonl", rows);
  json j{{"n_predictions", preds.size()}};
  if (gold) {
    j["cause_id"] = to_json(evaluate_cause_id(preds, pairs));
    j["overlap"] = to_json(overlap_analysis(preds, pairs));
  }
  run.write_json("summary.json", j);
  return j;
}

struct PreprocessArgs {
  fs::path corpus;
  fs::path ci;
  std::string separator = "\n";
  std::string encoder = "bow";
};

json cmd_preprocess(Run& run, const PreprocessArgs& a, const ParallelFor& pfor) {
  const auto c = load_checked(run, a.corpus);
  const auto clf = load_classifier(a.ci, a.encoder);
  run.input(a.ci / "head.json");
  const auto pairs = c.pairs.empty() ? unlabeled_pairs(c, "any") : c.pairs;
  const auto ex = preprocess_training_set(pairs, c.dialogues, scorer_of(clf), a.separator, pfor);
  std::vector<json> rows;
  for (const auto& e : ex)
    rows.push_back({{"dialogue_id", e.dialogue_id}, {"t", e.t}, {"conditioning", e.conditioning},
                    {"response", e.response}, {"kept", e.kept}});
  run.write_jsonl("training_set.jsonl", rows);
  json j{{"n_examples", ex.size()}};
  run.write_json("summary.json", j);
  return j;
}

struct RespondArgs {
  fs::path history;
  std::string generator = "tmpl";
  fs::path ci;
  double threshold = 0.5;
  std::string preset = "plain5";
  std::uint64_t seed = 0;
  std::string encoder = "bow";
};

std::vector<std::string> load_history(const fs::path& p) {
  json h;
  try {
    h = json::parse(read_file(p));
  } catch (const json::parse_error& e) {
    throw MalformedRecord(1, p.filename().string() + ": " + e.what());
  }
  if (h.is_object() && h.contains("history")) h = h["history"];
  if (!h.is_array() || h.empty()) throw MalformedRecord(1, "history must be a non-empty array of strings");
  std::vector<std::string> out;
  for (const auto& u : h) {
    if (u.is_string()) out.push_back(u.get<std::string>());
    else if (u.is_object() && u.contains("text") && u["text"].is_string()) out.push_back(u["text"].get<std::string>());
    else throw MalformedRecord(1, "history entries must be strings or {\"text\": ...}");
  }
  return out;
}

json cmd_respond(Run& run, const RespondArgs& a, const ParallelFor& pfor) {
  run.input(a.history);
  const auto hist = load_history(a.history);
  const auto clf = load_classifier(a.ci, a.encoder);
  run.input(a.ci / "head.json");
  const auto gen = make_generator(a.generator, "\n");
  auto params = decode_preset(a.preset);
  params.seed = derive_seed(a.seed, "selection");
  run.seed("selection", a.seed);
  auto cands = generate_candidates(*gen, hist, params, pfor);
  const auto sel = select_response(scorer_of(clf), hist, cands, a.threshold);
  json j{{"text", sel.candidate.text},
         {"fallback", sel.fallback},
         {"selected_index", sel.index},
         {"j", sel.candidate.j ? json(*sel.candidate.j) : json(nullptr)},
         {"generator", {{"name", gen->name()}, {"version", gen->version()}}},
         {"decode", to_json(params)}};
  j["candidates"] = json::array();
  for (const auto& c : cands) j["candidates"].push_back(to_json(c));
  run.write_json("response.json", j);
  return j;
}

struct PerturbArgs {
  fs::path spec;
  std::optional<fs::path> corpus;
  std::string generator = "oracle";
  double alpha = 0.05;
  std::string preset = "plain5";
  bool pairs = false;
};

json cmd_perturb(Run& run, const PerturbArgs& a, const ParallelFor& pfor) {
  run.input(a.spec);
  json spec;
  try {
    spec = json::parse(read_file(a.spec));
  } catch (const json::parse_error& e) {
    throw MalformedRecord(1, a.spec.filename().string() + ": " + e.what());
  }
  const json conds = spec.is_array() ? spec : spec.value("conditions", json::array());
  if (!conds.is_array() || conds.empty()) throw ConfigError("study spec lists no conditions");
  std::vector<PerturbationSpec> specs;
  for (const auto& c : conds) specs.push_back(spec_from_json(c));

  fs::path corpus_path;
  if (a.corpus) corpus_path = *a.corpus;
  else if (spec.is_object() && spec.contains("corpus"))
    corpus_path = a.spec.parent_path() / spec["corpus"].get<std::string>();
  else throw ConfigError("no corpus: pass --corpus or set \"corpus\" in the study spec");
  const auto c = load_checked(run, corpus_path);
  if (c.pairs.empty()) throw InsufficientData("perturbation needs annotated pairs");
  run.seed("perturbation", specs.front().seed);

  DialogueIndex index(c.dialogues);
  std::map<std::pair<std::string, std::size_t>, CauseOnlyGenerator> oracles;
  std::unique_ptr<GeneratorAdapter> shared;
  if (a.generator == "oracle") {
    for (const auto& p : c.pairs) {
      std::vector<std::string> texts;
      for (auto j : p.cause_indices) texts.push_back(index.at(p.dialogue_id).utterances.at(j).text);
      oracles.emplace(std::make_pair(p.dialogue_id, p.t), CauseOnlyGenerator(texts, "\n"));
    }
  } else {
    shared = make_generator(a.generator, "\n");
  }
  const GeneratorProvider provider = [&](const HistoryResponsePair& p) -> const GeneratorAdapter& {
    if (shared) return *shared;
    return oracles.at({p.dialogue_id, p.t});
  };
  const auto report = run_perturbation_study(provider, c.pairs, c.dialogues, specs,
                                             decode_preset(a.preset), a.alpha, pfor);
  auto j = to_json(report, a.pairs);
  j["generator"] = a.generator == "oracle" ? "cause-oracle" : shared->name();
  run.write_json("perturbation.json", j);
  return to_json(report, false);
}

struct EvalArgs {
  std::optional<fs::path> pred, gold, hyp, ref, candidates;
};

json cmd_eval(Run& run, const EvalArgs& a) {
  json j = json::object();
  if (a.pred || a.gold) {
    if (!a.pred || !a.gold) throw ConfigError("--pred and --gold go together");
    run.input(*a.pred);
    const auto gold = load_checked(run, *a.gold);
    std::vector<CausePrediction> preds;
    std::size_t line = 0;
    for (const auto& r : read_jsonl(*a.pred)) {
      ++line;
      try {
        preds.push_back(prediction_from_json(r));
      } catch (const json::exception& e) {
        throw MalformedRecord(line, std::string("prediction: ") + e.what());
      }
    }
    j["cause_id"] = to_json(evaluate_cause_id(preds, gold.pairs));
    j["overlap"] = to_json(overlap_analysis(preds, gold.pairs));
  }
  if (a.hyp || a.ref) {
    if (!a.hyp || !a.ref) throw ConfigError("--hyp and --ref go together");
    run.input(*a.hyp);
    run.input(*a.ref);
    const auto hyps = read_lines(*a.hyp), refs = read_lines(*a.ref);
    if (hyps.size() != refs.size()) throw MisalignedInputs("--hyp and --ref differ in line count");
    if (hyps.empty()) throw InsufficientData("no hypotheses");
    double avg = 0.0, b4 = 0.0;
    std::vector<Tokens> outs;
    for (std::size_t i = 0; i < hyps.size(); ++i) {
      const auto h = whitespace_tokens(hyps[i]);
      const std::vector<Tokens> r{whitespace_tokens(refs[i])};
      avg += average_bleu(h, r);
      b4 += bleu(h, r, 4);
      outs.push_back(h);
    }
    const double n = static_cast<double>(hyps.size());
    j["generation"] = {{"n", hyps.size()}, {"avg_bleu", avg / n}, {"bleu4", b4 / n},
                       {"distinct_1", distinct_n(outs, 1)}, {"distinct_2", distinct_n(outs, 2)}};
  }
  if (a.candidates) {
    run.input(*a.candidates);
    std::vector<std::vector<std::string>> sets;
    std::size_t line = 0;
    for (const auto& r : read_jsonl(*a.candidates)) {
      ++line;
      if (!r.is_array()) throw MalformedRecord(line, "candidate set must be an array of strings");
      sets.push_back(r.get<std::vector<std::string>>());
    }
    const auto d = candidate_diversity(sets);
    j["diversity"] = {{"n_sets", sets.size()}, {"self_bleu", d.self_bleu},
                      {"distinct_1", d.distinct_1}, {"distinct_2", d.distinct_2}};
  }
  if (j.empty()) throw ConfigError("eval needs --pred/--gold, --hyp/--ref or --candidates");
  run.write_json("eval.json", j);
  return j;
}

struct SynthArgs {
  std::size_t dialogues = 100;
  std::uint64_t seed = 0;
  double noise = 0.1;
  std::string mix = "0.25,0.25,0.25,0.25";
  std::size_t min_turns = 8, max_turns = 12;
  std::string prefix = "syn";
  std::optional<fs::path> world;
};

json cmd_synth(Run& run, const SynthArgs& a) {
  SyntheticWorld w;
  if (a.world) {
    run.input(*a.world);
    w = world_from_json(json::parse(read_file(*a.world)));
  } else {
    const auto m = parse_doubles(a.mix);
    if (m.size() != 4) throw ConfigError("--mix needs four weights (a,b,c,d)");
    StructureMix mix;
    std::copy(m.begin(), m.end(), mix.weights.begin());
    w = SyntheticWorld::make(derive_seed(a.seed, "world"), a.noise, mix);
  }
  run.seed("synthesis", a.seed);
  const auto c = synthesize_corpus(w, a.dialogues, a.seed, a.min_turns, a.max_turns, a.prefix);
  std::ostringstream ss;
  save_corpus_stream(ss, c.dialogues, c.pairs);
  run.write("corpus.jsonl", ss.str());
  run.write_json("world.json", to_json(w));
  std::vector<json> graphs;
  for (std::size_t i = 0; i < c.graphs.size(); ++i) {
    const auto& g = c.graphs[i];
    json nb = json::array();
    for (std::size_t v = 0; v < g.n; ++v)
      nb.push_back(g.neighborhood[v] ? json(to_string(*g.neighborhood[v])) : json(nullptr));
    json parents = json::array();
    for (const auto& p : g.parents) parents.push_back(std::vector<std::size_t>(p.begin(), p.end()));
    graphs.push_back({{"dialogue_id", c.dialogues[i].id}, {"parents", parents}, {"neighborhood", nb}});
  }
  run.write_jsonl("graphs.jsonl", graphs);
  json j{{"n_dialogues", c.dialogues.size()}, {"n_pairs", c.pairs.size()}};
  run.write_json("summary.json", j);
  return j;
}

struct BwsArgs {
  fs::path judgments;
};

json cmd_bws(Run& run, const BwsArgs& a) {
  run.input(a.judgments);
  std::ifstream in(a.judgments, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + a.judgments.string());
  const auto records = load_bws_csv(in);
  std::map<std::string, std::vector<BWSRecord>> by_exp;
  for (const auto& r : records) by_exp[r.experiment_id].push_back(r);
  json exps = json::object();
  for (const auto& [exp, recs] : by_exp) {
    std::map<std::string, std::vector<BWSRecord>> by_metric;
    for (const auto& r : recs) by_metric[r.metric].push_back(r);
    json e{{"overall", bws_scores(recs)}, {"by_metric", json::object()}};
    for (const auto& [m, rs] : by_metric) e["by_metric"][m] = bws_scores(rs);
    exps[exp] = std::move(e);
  }
  json j{{"n_records", records.size()}, {"experiments", exps}};
  run.write_json("bws.json", j);
  return j;
}

int exit_for(const Error& e) {
  if (e.kind() == "MalformedRecord" || e.kind() == "DanglingAnnotation") return Exit::schema;
  if (e.kind() == "Divergence") return Exit::divergence;
  if (e.kind() == "AdapterError") return Exit::handshake;
  if (e.kind() == "MissingCheckpoint") return Exit::checkpoint;
  return Exit::generic;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Causal-grounding dialogue toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  app.option_defaults()->always_capture_default();
  app.footer("Exit codes: 0 ok, 1 error, 2 input schema violation, 3 divergence, "
             "4 adapter handshake failure, 5 missing checkpoint.\n"
             "Run directories default to $CG_RUNS_DIR/<command>-<config hash>.");
  Globals g;
  app.add_option("--config", g.config, "JSON config file with a version field")->check(CLI::ExistingFile);
  app.add_option("--out", g.out, "Run directory (default: derived from the config hash)");
  app.add_option("--jobs", g.jobs, "Worker threads")->check(CLI::PositiveNumber);

  std::map<CLI::App*, Handler> handlers;
  auto add = [&](const std::string& name, const std::string& desc, Handler h) {
    auto* s = app.add_subcommand(name, desc);
    handlers[s] = std::move(h);
    return s;
  };

  IngestArgs ingest, stats;
  auto* s = add("ingest", "Validate and normalize a corpus", [&](Run& r, const ParallelFor&) { return cmd_ingest(r, ingest); });
  s->add_option("--corpus", ingest.corpus)->required()->check(CLI::ExistingFile);
  s = add("stats", "Corpus statistics", [&](Run& r, const ParallelFor&) { return cmd_stats(r, stats); });
  s->add_option("--corpus", stats.corpus)->required()->check(CLI::ExistingFile);

  AgreementArgs agr;
  s = add("agreement", "Kappa and span F1 between two annotations", [&](Run& r, const ParallelFor&) { return cmd_agreement(r, agr); });
  s->add_option("--a", agr.a)->required()->check(CLI::ExistingFile);
  s->add_option("--b", agr.b)->required()->check(CLI::ExistingFile);

  SplitArgs split;
  s = add("split", "Dialogue-level train/valid/test split", [&](Run& r, const ParallelFor&) { return cmd_split(r, split); });
  s->add_option("--corpus", split.corpus)->required()->check(CLI::ExistingFile);
  s->add_option("--ratios", split.ratios);
  s->add_option("--seed", split.seed);

  TrainArgs tr;
  s = add("train-ci", "Train the CI classifier (constrain, init, fc, ist)",
          [&](Run& r, const ParallelFor& p) { return cmd_train_ci(r, tr, p); });
  s->add_option("--train", tr.train, "Labeled corpus")->required()->check(CLI::ExistingFile);
  s->add_option("--unlabeled", tr.unlabeled)->check(CLI::ExistingFile);
  s->add_option("--valid", tr.valid)->check(CLI::ExistingFile);
  s->add_option("--variant", tr.variant)->check(CLI::IsMember({"constrain", "init", "fc", "ist"}));
  s->add_option("--threshold", tr.threshold);
  s->add_option("--window", tr.window, "Offsets t-j eligible for pseudo-labels");
  s->add_option("--seed", tr.seed);
  s->add_option("--encoder", tr.encoder, "bow or an encoder adapter command");
  s->add_option("--embed-dim", tr.embed_dim);
  s->add_option("--lr", tr.lr);
  s->add_option("--epochs", tr.epochs);
  s->add_option("--batch-size", tr.batch_size);
  s->add_option("--max-iters", tr.max_iters);
  s->add_option("--patience", tr.patience);
  s->add_option("--responder", tr.responder, "Role whose turns form unlabeled pairs (auto, any, or a speaker)");

  IdentifyArgs idn;
  s = add("identify", "Predict direct causes", [&](Run& r, const ParallelFor& p) { return cmd_identify(r, idn, p); });
  s->add_option("--corpus", idn.corpus)->required()->check(CLI::ExistingFile);
  s->add_option("--ci", idn.ci, "Checkpoint directory");
  s->add_option("--mode", idn.mode)->check(CLI::IsMember({"inference", "train"}));
  s->add_option("--threshold", idn.threshold);
  s->add_option("--baseline", idn.baseline)->check(CLI::IsMember({"none", "always_prev", "always_prev_two"}));
  s->add_option("--encoder", idn.encoder);

  PreprocessArgs pre;
  s = add("preprocess", "Cause-filtered generator training data", [&](Run& r, const ParallelFor& p) { return cmd_preprocess(r, pre, p); });
  s->add_option("--corpus", pre.corpus)->required()->check(CLI::ExistingFile);
  s->add_option("--ci", pre.ci)->required();
  s->add_option("--separator", pre.separator);
  s->add_option("--encoder", pre.encoder);

  RespondArgs rsp;
  s = add("respond", "Generate and select a response", [&](Run& r, const ParallelFor& p) { return cmd_respond(r, rsp, p); });
  s->add_option("--history", rsp.history)->required()->check(CLI::ExistingFile);
  s->add_option("--generator", rsp.generator, "tmpl or a generator adapter command");
  s->add_option("--ci", rsp.ci)->required();
  s->add_option("--threshold", rsp.threshold);
  s->add_option("--preset", rsp.preset)->check(CLI::IsMember({"plain5", "reg10"}));
  s->add_option("--seed", rsp.seed);
  s->add_option("--encoder", rsp.encoder);

  PerturbArgs per;
  s = add("perturb", "Cause/non-cause perturbation study", [&](Run& r, const ParallelFor& p) { return cmd_perturb(r, per, p); });
  s->add_option("--spec", per.spec)->required()->check(CLI::ExistingFile);
  s->add_option("--corpus", per.corpus)->check(CLI::ExistingFile);
  s->add_option("--generator", per.generator, "oracle, tmpl or a generator adapter command");
  s->add_option("--alpha", per.alpha);
  s->add_option("--preset", per.preset)->check(CLI::IsMember({"plain5", "reg10"}));
  s->add_flag("--pairs", per.pairs, "Include per-pair outcomes");

  EvalArgs ev;
  s = add("eval", "Cause-id, generation and diversity metrics", [&](Run& r, const ParallelFor&) { return cmd_eval(r, ev); });
  s->add_option("--pred", ev.pred)->check(CLI::ExistingFile);
  s->add_option("--gold", ev.gold)->check(CLI::ExistingFile);
  s->add_option("--hyp", ev.hyp)->check(CLI::ExistingFile);
  s->add_option("--ref", ev.ref)->check(CLI::ExistingFile);
  s->add_option("--candidates", ev.candidates)->check(CLI::ExistingFile);

  SynthArgs syn;
  s = add("synth", "Sample a synthetic corpus with known causal graphs", [&](Run& r, const ParallelFor&) { return cmd_synth(r, syn); });
  s->add_option("--dialogues", syn.dialogues);
  s->add_option("--seed", syn.seed);
  s->add_option("--noise", syn.noise);
  s->add_option("--mix", syn.mix, "Weights of neighborhoods a,b,c,d");
  s->add_option("--min-turns", syn.min_turns);
  s->add_option("--max-turns", syn.max_turns);
  s->add_option("--prefix", syn.prefix);
  s->add_option("--world", syn.world)->check(CLI::ExistingFile);

  BwsArgs bws;
  s = add("bws", "Best-worst scaling scores", [&](Run& r, const ParallelFor&) { return cmd_bws(r, bws); });
  s->add_option("--judgments", bws.judgments)->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? Exit::ok : Exit::generic;
  }

  CLI::App* sub = app.get_subcommands().front();
  try {
    if (g.config) apply_config(*sub, *g.config);
    Run run(sub->get_name(), effective_config(*sub), g.out);
    std::cerr << "run directory: " << run.dir().string() << "\n";
    json result;
    try {
      result = handlers.at(sub)(run, threaded_for(g.jobs));
    } catch (...) {
      run.finish();
      throw;
    }
    run.finish();
    std::cout << result.dump(2) << std::endl;
    return Exit::ok;
  } catch (const Error& e) {
    std::cerr << "error: " << e.kind() << ": " << e.what() << "\n";
    return exit_for(e);
  } catch (const json::exception& e) {
    std::cerr << "error: MalformedRecord: " << e.what() << "\n";
    return Exit::schema;
  } catch (const CLI::Error& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return Exit::generic;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return Exit::generic;
  }
}
