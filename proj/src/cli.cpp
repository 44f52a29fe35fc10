#include "unimt/cli.hpp"

#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <memory>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "unimt/corpus.hpp"
#include "unimt/errors.hpp"
#include "unimt/infer.hpp"
#include "unimt/metrics.hpp"
#include "unimt/model.hpp"
#include "unimt/reframe.hpp"
#include "unimt/style.hpp"
#include "unimt/trainer.hpp"
#include "unimt/vocab.hpp"

namespace unimt::cli {

using nlohmann::json;
using nlohmann::ordered_json;
namespace fs = std::filesystem;

std::string config_hash(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) s[static_cast<std::size_t>(i)] = digits[h & 0xf];
  return s;
}

namespace {

constexpr const char* kFiles = "Files";
constexpr const char* kVersion = "1.0.0";

/// Bad or missing command-line arguments (exit status 2).
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Reads CLI11 configuration from a JSON object. Nested objects address
/// subcommands, e.g. {"seed": 3, "translate": {"beam": 5}}.
class JsonConfig : public CLI::Config {
 public:
  std::string to_config(const CLI::App* app, bool default_also, bool, std::string) const override {
    return dump(app, default_also).dump(2);
  }

  std::vector<CLI::ConfigItem> from_config(std::istream& in) const override {
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw CLI::ConversionError(std::string("config file is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw CLI::ConversionError("config file must hold a JSON object");
    std::vector<CLI::ConfigItem> items;
    collect(j, {}, items);
    return items;
  }

 private:
  static json dump(const CLI::App* app, bool default_also) {
    json j = json::object();
    for (const CLI::Option* o : app->get_options()) {
      if (o->get_lnames().empty() || !o->get_configurable()) continue;
      const std::string& name = o->get_lnames().front();
      if (o->count() > 0) {
        const auto& r = o->results();
        j[name] = r.size() == 1 ? json(r.front()) : json(r);
      } else if (default_also && !o->get_default_str().empty()) {
        j[name] = o->get_default_str();
      }
    }
    for (const CLI::App* sub : app->get_subcommands({})) j[sub->get_name()] = dump(sub, default_also);
    return j;
  }

  static void collect(const json& j, const std::vector<std::string>& parents, std::vector<CLI::ConfigItem>& items) {
    for (auto it = j.begin(); it != j.end(); ++it) {
      std::string name = it.key();
      std::replace(name.begin(), name.end(), '_', '-');
      if (it->is_object()) {
        auto p = parents;
        p.push_back(name);
        collect(*it, p, items);
        continue;
      }
      CLI::ConfigItem item;
      item.parents = parents;
      item.name = name;
      if (it->is_array()) {
        for (const auto& x : *it) item.inputs.push_back(scalar(x));
      } else {
        item.inputs.push_back(scalar(*it));
      }
      items.push_back(std::move(item));
    }
  }

  static std::string scalar(const json& x) {
    if (x.is_string()) return x.get<std::string>();
    if (x.is_boolean()) return x.get<bool>() ? "true" : "false";
    if (x.is_number() || x.is_null()) return x.dump();
    throw CLI::ConversionError("config values must be scalars or arrays of scalars");
  }
};

std::string error_kind(const std::exception& e) {
  if (dynamic_cast<const UsageError*>(&e)) return "UsageError";
  if (dynamic_cast<const MissingFileError*>(&e)) return "MissingFileError";
  if (dynamic_cast<const ConfigError*>(&e)) return "ConfigError";
  if (dynamic_cast<const FormatError*>(&e)) return "FormatError";
  if (dynamic_cast<const DecodeError*>(&e)) return "DecodeError";
  if (dynamic_cast<const IoError*>(&e)) return "IoError";
  if (dynamic_cast<const BuildError*>(&e)) return "BuildError";
  if (dynamic_cast<const RangeError*>(&e)) return "RangeError";
  if (dynamic_cast<const ReframeError*>(&e)) return "ReframeError";
  if (dynamic_cast<const MalformedOutputError*>(&e)) return "MalformedOutputError";
  if (dynamic_cast<const BudgetError*>(&e)) return "BudgetError";
  if (dynamic_cast<const DimensionError*>(&e)) return "DimensionError";
  if (dynamic_cast<const StateError*>(&e)) return "StateError";
  if (dynamic_cast<const NonFiniteError*>(&e)) return "NonFiniteError";
  if (dynamic_cast<const fs::filesystem_error*>(&e)) return "IoError";
  return "Error";
}

int report(std::ostream& err, const std::string& kind, const std::string& message, int code) {
  ordered_json j;
  j["error"] = {{"type", kind}, {"message", message}, {"exit_code", code}};
  err << j.dump() << '\n';
  return code;
}

std::shared_ptr<spdlog::logger> logger() {
  static auto log = [] {
    auto l = spdlog::stderr_logger_st("unimt");
    l->set_pattern("[%l] %v");
    return l;
  }();
  const char* level = std::getenv("UNIMT_LOG");
  log->set_level(level ? spdlog::level::from_str(level) : spdlog::level::warn);
  return log;
}

void require(const std::string& value, const std::string& flag) {
  if (value.empty()) throw UsageError("missing required option " + flag);
}

void require_file(const std::string& path, const std::string& flag) {
  require(path, flag);
  if (!fs::exists(path)) throw MissingFileError("cannot open '" + path + "' (" + flag + ")");
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFileError("cannot open '" + path + "'");
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

/// Text lines; in a .jsonl file each object contributes its "translation" or "target" field.
std::vector<std::string> read_texts(const std::string& path) {
  std::vector<std::string> lines = read_lines(path);
  if (fs::path(path).extension() != ".jsonl") return lines;
  std::vector<std::string> out;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    try {
      const json j = json::parse(lines[i]);
      if (j.contains("translation")) out.push_back(j.at("translation").get<std::string>());
      else out.push_back(j.at("target").get<std::string>());
    } catch (const json::exception& e) {
      throw FormatError(path + " line " + std::to_string(i + 1) + ": " + e.what());
    }
  }
  return out;
}

void write_text(const std::string& path, const std::string& text) {
  if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << text;
  if (!out) throw IoError("failed writing '" + path + "'");
}

/// Effective non-file settings of one command level; these determine the config hash.
ordered_json settings_of(const CLI::App* app) {
  ordered_json j = ordered_json::object();
  for (const CLI::Option* o : app->get_options()) {
    if (o->get_group() == kFiles || o->get_lnames().empty()) continue;
    const std::string& name = o->get_lnames().front();
    if (name == "help" || name == "dry-run") continue;
    const std::vector<std::string> values = o->count() ? o->results() : std::vector<std::string>{o->get_default_str()};
    j[name] = values.size() == 1 ? ordered_json(values.front()) : ordered_json(values);
  }
  return j;
}

std::vector<TaskKind> parse_tasks(const std::vector<std::string>& names) {
  std::vector<TaskKind> out;
  for (const auto& n : names) {
    const auto t = try_parse_task(n);
    if (!t) throw UsageError("unknown task '" + n + "'");
    out.push_back(*t);
  }
  return out;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

struct Common {
  std::uint64_t seed = 1;
  std::string out;
  bool dry_run = false;
  CLI::Option* seed_opt = nullptr;
};

/// What every artifact records about how it was produced.
struct Provenance {
  std::string subcommand;
  std::string hash;
  ordered_json settings;

  ordered_json json_object() const {
    ordered_json j;
    j["tool"] = "unimt";
    j["version"] = kVersion;
    j["subcommand"] = subcommand;
    j["config_hash"] = hash;
    return j;
  }
};

void write_meta(const std::string& artifact, const Provenance& p, const ordered_json& extra = ordered_json::object()) {
  ordered_json j = p.json_object();
  for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
  write_text(artifact + ".meta.json", j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Subcommands

struct PreprocessArgs {
  std::string in;
  std::vector<std::string> test_sets;
  std::string source_lang = "en";
  std::string target_lang = "en";
  std::size_t max_length = 80;
};

void run_preprocess(const PreprocessArgs& a, const Common& c, const Provenance& p, std::ostream& out) {
  require_file(a.in, "--in");
  require(c.out, "--out");
  for (const auto& t : a.test_sets) require_file(t, "--test-set");
  PreprocessOptions po;
  po.source_lang = parse_language(a.source_lang);
  po.target_lang = parse_language(a.target_lang);
  po.max_length = a.max_length;
  if (po.max_length == 0) throw ConfigError("--max-length must be positive");
  if (c.dry_run) return;

  const auto raw = read_records(a.in);
  std::vector<std::vector<TaskRecord>> tests;
  for (const auto& t : a.test_sets) tests.push_back(read_records(t));
  PreprocessStats stats;
  const auto kept = preprocess(raw, tests, po, &stats);
  write_records(c.out, kept);
  ordered_json s;
  s["input"] = stats.input;
  s["empty"] = stats.empty;
  s["too_long"] = stats.too_long;
  s["duplicates"] = stats.duplicates;
  s["leaked"] = stats.leaked;
  s["output"] = stats.output;
  write_meta(c.out, p, {{"stats", s}});
  out << s.dump() << '\n';
}

struct VocabArgs {
  std::vector<std::string> in;
  std::size_t size = 8000;
  bool byte_fallback = true;
  std::size_t min_pair_frequency = 2;
};

void run_vocab(const VocabArgs& a, const Common& c, const Provenance& p, std::ostream& out) {
  if (a.in.empty()) throw UsageError("missing required option --in");
  for (const auto& f : a.in) require_file(f, "--in");
  require(c.out, "--out");
  if (c.dry_run) return;
  std::vector<std::string> corpus;
  for (const auto& f : a.in)
    for (const auto& r : read_records(f)) {
      corpus.push_back(r.source);
      corpus.push_back(r.target);
      for (const auto& s : r.context_segments) corpus.push_back(s);
    }
  VocabBuildOptions vo;
  vo.byte_fallback = a.byte_fallback;
  vo.min_pair_frequency = a.min_pair_frequency;
  const Vocabulary v = Vocabulary::build(corpus, a.size, SpecialTokens::defaults(), vo);
  v.save(c.out, p.hash);
  out << ordered_json{{"size", v.size()}, {"merges", v.merges().size()}}.dump() << '\n';
}

struct ReframeArgs {
  std::string in;
  std::string vocab;
  std::string format = "Format3";
  bool prompting = true;
  std::size_t max_context_tokens = 128;
  std::size_t max_context_segments = 3;
  bool per_domain_dsmt = false;
};

ReframeOptions reframe_options(const ReframeArgs& a) {
  ReframeOptions ro;
  ro.format = parse_prompt_format(a.format);
  ro.prompting = a.prompting;
  ro.max_context_tokens = a.max_context_tokens;
  ro.max_context_segments = a.max_context_segments;
  ro.per_domain_dsmt = a.per_domain_dsmt;
  return ro;
}

void run_reframe(const ReframeArgs& a, const Common& c, const Provenance& p, std::ostream& out) {
  require_file(a.in, "--in");
  require_file(a.vocab, "--vocab");
  require(c.out, "--out");
  const ReframeOptions ro = reframe_options(a);
  if (c.dry_run) return;
  const Vocabulary v = Vocabulary::load(a.vocab);
  std::vector<UnifiedExample> examples;
  for (const auto& r : read_records(a.in)) examples.push_back(reframe(r, v, ro));
  write_unified(c.out, examples);
  write_meta(c.out, p, {{"examples", examples.size()}});
  out << ordered_json{{"examples", examples.size()}}.dump() << '\n';
}

struct TrainArgs {
  std::string plan;
  std::string manifest;
  std::string vocab;
  std::string model_config;
  double mix_temperature = 1.0;
  std::size_t batch_tokens = 4096;
  std::vector<std::string> ablate;
  bool resume = false;
  CLI::Option* mix_opt = nullptr;
  CLI::Option* batch_opt = nullptr;
};

TrainData load_datasets(const std::string& manifest_path) {
  const fs::path base = fs::path(manifest_path).parent_path();
  TrainData data;
  for (DatasetManifest m : read_manifest(manifest_path)) {
    if (fs::path(m.path).is_relative()) m.path = (base / m.path).string();
    if (m.split == Split::Test) continue;
    verify_manifest(m);
    NamedDataset d{m.name, m.task, read_records(m.path)};
    (m.split == Split::Train ? data.train : data.dev).push_back(std::move(d));
  }
  return data;
}

void run_train(const TrainArgs& a, const Common& c, const Provenance& p, std::ostream& out) {
  require_file(a.plan, "--plan");
  require_file(a.manifest, "--manifest");
  require_file(a.vocab, "--vocab");
  require(c.out, "--out");
  if (!a.model_config.empty()) require_file(a.model_config, "--model-config");

  std::ifstream pin(a.plan);
  TrainPlan plan = TrainPlan::from_json(std::string(std::istreambuf_iterator<char>(pin), {}));
  if (a.mix_opt->count()) plan.mix_temperature = a.mix_temperature;
  if (a.batch_opt->count()) plan.batch_tokens = a.batch_tokens;
  if (c.seed_opt->count()) plan.seed = c.seed;
  for (const auto& name : a.ablate) plan = ablate(plan, parse_ablation(name));
  plan.validate();

  const Vocabulary v = Vocabulary::load(a.vocab);
  ModelConfig mc = ModelConfig::base(static_cast<int>(v.size()));
  if (!a.model_config.empty()) {
    std::ifstream min(a.model_config);
    mc = ModelConfig::from_json(std::string(std::istreambuf_iterator<char>(min), {}));
    if (mc.vocab_size == 0) mc.vocab_size = static_cast<int>(v.size());
  }
  mc.pad_id = v.pad_id();
  mc.bos_id = v.bos_id();
  if (mc.vocab_size != static_cast<int>(v.size()))
    throw ConfigError("model vocab_size " + std::to_string(mc.vocab_size) + " differs from the vocabulary (" +
                      std::to_string(v.size()) + ")");
  mc.validate();
  const TrainData data = load_datasets(a.manifest);
  if (c.dry_run) return;

  ModelState<float> state;
  init_state(state, mc);
  randomize(state, plan.seed);
  TrainOptions to;
  to.out_dir = c.out;
  to.resume = a.resume;
  to.provenance = p.json_object().dump();
  logger()->info("training {} parameters for up to {} + {} steps", state.params.scalar_count(),
                 plan.from_scratch ? 0 : plan.stage1.max_steps, plan.stage2.max_steps);
  const TrainResult r = run(plan, state, v, data, to);
  ordered_json j;
  j["completed"] = r.completed;
  j["best_checkpoint"] = r.best_checkpoint;
  j["best_step"] = r.best_step;
  j["best_mean_bleu"] = r.best_mean_bleu;
  j["steps"] = r.losses.size();
  out << j.dump() << '\n';
}

struct TranslateArgs {
  std::string model;
  std::string vocab;
  std::string in;
  std::string prompt = "own";
  std::vector<std::string> prompts = {"SentMT", "DocMT", "ChatMT", "PerMT", "MMT", "DsMT", "AphMT"};
  int beam = 4;
  double alpha = 0.6;
  std::size_t extra_len = 50;
  std::size_t batch_size = 32;
  std::string prompting = "auto";
  std::string format = "auto";
};

void run_translate(const TranslateArgs& a, const Common& c, const Provenance& p, std::ostream& out) {
  require_file(a.model, "--model");
  require_file(a.vocab, "--vocab");
  require_file(a.in, "--in");
  if (a.beam < 1) throw ConfigError("--beam must be at least 1");
  if (a.alpha < 0) throw ConfigError("--alpha must not be negative");
  std::vector<TaskKind> prompts;
  if (a.prompt == "all") prompts = parse_tasks(a.prompts);
  else if (a.prompt != "own") prompts = parse_tasks({a.prompt});
  if (a.prompt == "all" && prompts.empty()) throw ConfigError("--prompts is empty");
  if (a.prompting != "auto" && a.prompting != "true" && a.prompting != "false")
    throw UsageError("--prompting must be auto, true or false");
  if (c.dry_run) return;

  CheckpointExtra extra;
  ModelState<float> state = load_checkpoint(a.model, &extra);
  const Vocabulary v = Vocabulary::load(a.vocab);
  if (state.config.vocab_size != static_cast<int>(v.size()))
    throw ConfigError("checkpoint and vocabulary sizes differ");
  // Defaults follow the plan the checkpoint was trained with.
  json plan = json::object();
  try {
    plan = json::parse(extra.json).value("plan", json::object());
  } catch (const json::exception&) {
  }
  DecodeOptions opts;
  opts.beam = a.beam;
  opts.alpha = a.alpha;
  opts.extra_len = a.extra_len;
  opts.batch_size = a.batch_size;
  opts.prompting = a.prompting == "auto" ? plan.value("prompting", true) : a.prompting == "true";
  ReframeOptions ro;
  ro.format = parse_prompt_format(a.format == "auto" ? plan.value("prompt_format", std::string("Format3")) : a.format);
  ro.prompting = opts.prompting;

  const auto records = read_records(a.in);
  std::vector<std::vector<FanOutEntry>> results(records.size());
  if (a.prompt == "own") {
    std::map<TaskKind, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < records.size(); ++i) groups[records[i].task].push_back(i);
    for (const auto& [task, idx] : groups) {
      std::vector<TaskRecord> subset;
      for (auto i : idx) subset.push_back(records[i]);
      const std::vector<TaskKind> one = {task};
      auto r = fan_out_all(state, v, std::span<const TaskRecord>(subset), std::span<const TaskKind>(one), opts, ro);
      for (std::size_t k = 0; k < idx.size(); ++k) results[idx[k]] = std::move(r[k]);
    }
  } else {
    results = fan_out_all(state, v, std::span<const TaskRecord>(records), std::span<const TaskKind>(prompts), opts, ro);
  }

  std::string text;
  std::size_t lines = 0, anomalous = 0;
  for (std::size_t i = 0; i < results.size(); ++i)
    for (const auto& e : results[i]) {
      ordered_json j;
      j["id"] = i;
      j["prompt"] = std::string(to_string(e.prompt));
      j["translation"] = e.text;
      j["score"] = e.score;
      if (e.anomalous) {
        j["anomalous"] = true;
        j["error"] = e.error;
        ++anomalous;
      }
      text += j.dump() + '\n';
      ++lines;
    }
  if (anomalous) logger()->warn("{} of {} outputs could not be parsed", anomalous, lines);
  if (c.out.empty()) {
    out << text;
  } else {
    write_text(c.out, text);
    write_meta(c.out, p, {{"lines", lines}, {"anomalous", anomalous}});
  }
}

struct EvaluateArgs {
  std::string hyp;
  std::string ref;
  std::string sig_baseline;
  std::string metric = "bleu,chrf2,ter,dist";
  bool case_sensitive = false;
  std::size_t bootstrap_iterations = 1000;
};

void run_evaluate(const EvaluateArgs& a, const Common& c, const Provenance& p, std::ostream& out) {
  require_file(a.hyp, "--hyp");
  require_file(a.ref, "--ref");
  if (!a.sig_baseline.empty()) require_file(a.sig_baseline, "--sig-baseline");
  EvaluateOptions opts;
  opts.metrics = split_list(a.metric);
  if (opts.metrics.empty()) throw UsageError("--metric lists no metrics");
  for (const auto& m : opts.metrics)
    if (m != "bleu" && m != "chrf2" && m != "ter" && m != "dist") throw UsageError("unknown metric '" + m + "'");
  opts.case_sensitive = a.case_sensitive;
  opts.bootstrap_iterations = a.bootstrap_iterations;
  opts.seed = c.seed;
  if (c.dry_run) return;

  const auto hyps = read_texts(a.hyp);
  const auto refs = read_texts(a.ref);
  if (!a.sig_baseline.empty()) {
    opts.baseline_hyps = read_texts(a.sig_baseline);
    opts.baseline_name = fs::path(a.sig_baseline).filename().string();
  }
  const MetricReport r = evaluate(hyps, refs, opts);
  if (r.significance && !r.significance->warning.empty()) logger()->warn("{}", r.significance->warning);
  ordered_json j = ordered_json::parse(r.to_json());
  j["config_hash"] = p.hash;
  if (c.out.empty()) {
    out << j.dump() << '\n';
  } else {
    write_text(c.out, j.dump(2) + '\n');
  }
  out << r.to_table();
}

struct StyleTrainArgs {
  std::string pos;
  std::string neg;
  std::string vocab;
  int embed_dim = 64;
  std::vector<int> widths = {3, 4, 5};
  int filters = 100;
  double dropout = 0.5;
  int max_len = 256;
  int epochs = 30;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double holdout = 0.1;
};

void run_style_train(const StyleTrainArgs& a, const Common& c, const Provenance& p, std::ostream& out) {
  require_file(a.pos, "--pos");
  require_file(a.neg, "--neg");
  require_file(a.vocab, "--vocab");
  require(c.out, "--out");
  const Vocabulary v = Vocabulary::load(a.vocab);
  TextCnnConfig cfg;
  cfg.vocab_size = static_cast<int>(v.size());
  cfg.pad_id = v.pad_id();
  cfg.embed_dim = a.embed_dim;
  cfg.filter_widths = a.widths;
  cfg.filters_per_width = a.filters;
  cfg.dropout = a.dropout;
  cfg.max_len = a.max_len;
  cfg.validate();
  StyleTrainOptions so;
  so.max_epochs = a.epochs;
  so.batch_size = a.batch_size;
  so.lr = a.lr;
  so.holdout_fraction = a.holdout;
  so.seed = c.seed;
  if (c.dry_run) return;
  const auto pos = read_lines(a.pos), neg = read_lines(a.neg);
  const StyleClassifier model = train_classifier(pos, neg, cfg, v, so);
  save_classifier(c.out, model, p.json_object().dump());
  ordered_json j;
  j["heldout_accuracy"] = model.heldout_accuracy;
  j["heldout_size"] = model.heldout_size;
  j["epochs"] = model.epochs;
  out << j.dump() << '\n';
}

struct StyleClassifyArgs {
  std::string model;
  std::string vocab;
  std::string in;
};

void run_style_classify(const StyleClassifyArgs& a, const Common& c, const Provenance& p, std::ostream& out) {
  require_file(a.model, "--model");
  require_file(a.vocab, "--vocab");
  require_file(a.in, "--in");
  if (c.dry_run) return;
  StyleClassifier model = load_classifier(a.model);
  const Vocabulary v = Vocabulary::load(a.vocab);
  if (model.state.config.vocab_size != static_cast<int>(v.size()))
    throw ConfigError("classifier and vocabulary sizes differ");
  const auto texts = read_lines(a.in);
  std::string text;
  for (const auto& pred : classify(model.state, v, texts)) {
    ordered_json j;
    j["label"] = pred.label;
    j["probability"] = pred.probability;
    j["probs"] = pred.probs;
    text += j.dump() + '\n';
  }
  if (c.out.empty()) {
    out << text;
  } else {
    write_text(c.out, text);
    write_meta(c.out, p, {{"lines", texts.size()}});
  }
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Unified multi-scenario neural machine translation toolkit", "unimt"};
  app.require_subcommand(1);
  app.fallthrough();
  app.config_formatter(std::make_shared<JsonConfig>());
  app.set_config("--config", "", "JSON config file; command-line flags take precedence")->group(kFiles);
  app.allow_config_extras(CLI::config_extras_mode::error);

  Common common;
  common.seed_opt = app.add_option("--seed", common.seed, "Random seed")->capture_default_str();
  app.add_option("--out", common.out, "Output file or directory")->group(kFiles);
  app.add_flag("--dry-run", common.dry_run, "Validate the configuration without writing artifacts");

  PreprocessArgs pre;
  auto* pre_cmd = app.add_subcommand("preprocess", "Normalize, filter, deduplicate and decontaminate records");
  pre_cmd->add_option("--in", pre.in, "Raw record file")->group(kFiles);
  pre_cmd->add_option("--test-set", pre.test_sets, "Dev/test record files for leakage filtering")->group(kFiles);
  pre_cmd->add_option("--source-lang", pre.source_lang, "zh, en or de")->capture_default_str();
  pre_cmd->add_option("--target-lang", pre.target_lang, "zh, en or de")->capture_default_str();
  pre_cmd->add_option("--max-length", pre.max_length, "Maximum source/target length")->capture_default_str();

  VocabArgs voc;
  auto* voc_cmd = app.add_subcommand("vocab", "Build the joint byte-level BPE vocabulary");
  voc_cmd->add_option("--in", voc.in, "Record files")->group(kFiles);
  voc_cmd->add_option("--size", voc.size, "Vocabulary size")->capture_default_str();
  voc_cmd->add_option("--byte-fallback", voc.byte_fallback, "Reserve all 256 byte pieces")->capture_default_str();
  voc_cmd->add_option("--min-pair-frequency", voc.min_pair_frequency, "Stop merging below this count")
      ->capture_default_str();

  ReframeArgs ref;
  auto* ref_cmd = app.add_subcommand("reframe", "Turn records into prompted unified examples");
  ref_cmd->add_option("--in", ref.in, "Record file")->group(kFiles);
  ref_cmd->add_option("--vocab", ref.vocab, "Vocabulary file")->group(kFiles);
  ref_cmd->add_option("--format", ref.format, "Format1, Format2 or Format3")->capture_default_str();
  ref_cmd->add_option("--prompting", ref.prompting, "Prefix prompts on both sides")->capture_default_str();
  ref_cmd->add_option("--max-context-tokens", ref.max_context_tokens, "Context token budget")->capture_default_str();
  ref_cmd->add_option("--max-context-segments", ref.max_context_segments, "Most recent segments kept (0 = all)")
      ->capture_default_str();
  ref_cmd->add_option("--per-domain-dsmt", ref.per_domain_dsmt, "Use per-domain DsMT prompts")->capture_default_str();

  TrainArgs tr;
  auto* tr_cmd = app.add_subcommand("train", "Two-stage training with dev-BLEU checkpoint selection");
  tr_cmd->add_option("--plan", tr.plan, "Training plan JSON")->group(kFiles);
  tr_cmd->add_option("--manifest", tr.manifest, "Dataset manifest JSON")->group(kFiles);
  tr_cmd->add_option("--vocab", tr.vocab, "Vocabulary file")->group(kFiles);
  tr_cmd->add_option("--model-config", tr.model_config, "Model config JSON (default: base preset)")->group(kFiles);
  tr.mix_opt = tr_cmd->add_option("--mix-temperature", tr.mix_temperature, "Dataset mixing temperature")
                   ->capture_default_str();
  tr.batch_opt = tr_cmd->add_option("--batch-tokens", tr.batch_tokens, "Padded target tokens per batch")
                     ->capture_default_str();
  tr_cmd->add_option("--ablate", tr.ablate, "no_prompt and/or from_scratch")->delimiter(',');
  tr_cmd->add_flag("--resume", tr.resume, "Continue from last.ckpt in the output directory");

  TranslateArgs tl;
  auto* tl_cmd = app.add_subcommand("translate", "Decode records with one, own or all prompts");
  tl_cmd->add_option("--model", tl.model, "Checkpoint")->group(kFiles);
  tl_cmd->add_option("--vocab", tl.vocab, "Vocabulary file")->group(kFiles);
  tl_cmd->add_option("--in", tl.in, "Record file")->group(kFiles);
  tl_cmd->add_option("--prompt", tl.prompt, "A task name, 'own' (the record's task) or 'all'")->capture_default_str();
  tl_cmd->add_option("--prompts", tl.prompts, "Prompts used by --prompt all")->delimiter(',')->capture_default_str();
  tl_cmd->add_option("--beam", tl.beam, "Beam size")->capture_default_str();
  tl_cmd->add_option("--alpha", tl.alpha, "Length penalty exponent")->capture_default_str();
  tl_cmd->add_option("--extra-len", tl.extra_len, "Output length cap beyond the source length")
      ->capture_default_str();
  tl_cmd->add_option("--batch-size", tl.batch_size, "Sources decoded together")->capture_default_str();
  tl_cmd->add_option("--prompting", tl.prompting, "auto (from the checkpoint), true or false")
      ->capture_default_str();
  tl_cmd->add_option("--format", tl.format, "auto (from the checkpoint) or a prompt format")->capture_default_str();

  EvaluateArgs ev;
  auto* ev_cmd = app.add_subcommand("evaluate", "Corpus metrics with optional paired bootstrap");
  ev_cmd->add_option("--hyp", ev.hyp, "Hypotheses (text lines or translate output .jsonl)")->group(kFiles);
  ev_cmd->add_option("--ref", ev.ref, "References (text lines or record .jsonl)")->group(kFiles);
  ev_cmd->add_option("--sig-baseline", ev.sig_baseline, "Baseline hypotheses for significance")->group(kFiles);
  ev_cmd->add_option("--metric", ev.metric, "Comma-separated: bleu,chrf2,ter,dist")->capture_default_str();
  ev_cmd->add_option("--case-sensitive", ev.case_sensitive, "true or false")->capture_default_str();
  ev_cmd->add_option("--bootstrap-iterations", ev.bootstrap_iterations, "Resamples")->capture_default_str();

  auto* st_cmd = app.add_subcommand("style", "Text-CNN style classifier");
  st_cmd->require_subcommand(1);
  StyleTrainArgs stt;
  auto* stt_cmd = st_cmd->add_subcommand("train", "Train on two styles (pos = label 1)");
  stt_cmd->add_option("--pos", stt.pos, "Texts of style 1, one per line")->group(kFiles);
  stt_cmd->add_option("--neg", stt.neg, "Texts of style 0, one per line")->group(kFiles);
  stt_cmd->add_option("--vocab", stt.vocab, "Vocabulary file")->group(kFiles);
  stt_cmd->add_option("--embed-dim", stt.embed_dim, "Embedding size")->capture_default_str();
  stt_cmd->add_option("--widths", stt.widths, "Filter widths")->delimiter(',')->capture_default_str();
  stt_cmd->add_option("--filters", stt.filters, "Filters per width")->capture_default_str();
  stt_cmd->add_option("--dropout", stt.dropout, "Dropout before the output layer")->capture_default_str();
  stt_cmd->add_option("--max-len", stt.max_len, "Truncation length in tokens")->capture_default_str();
  stt_cmd->add_option("--epochs", stt.epochs, "Maximum epochs")->capture_default_str();
  stt_cmd->add_option("--batch-size", stt.batch_size, "Examples per update")->capture_default_str();
  stt_cmd->add_option("--lr", stt.lr, "Adam learning rate")->capture_default_str();
  stt_cmd->add_option("--holdout", stt.holdout, "Held-out fraction")->capture_default_str();
  StyleClassifyArgs stc;
  auto* stc_cmd = st_cmd->add_subcommand("classify", "Label texts with a trained classifier");
  stc_cmd->add_option("--model", stc.model, "Classifier file")->group(kFiles);
  stc_cmd->add_option("--vocab", stc.vocab, "Vocabulary file")->group(kFiles);
  stc_cmd->add_option("--in", stc.in, "Texts, one per line")->group(kFiles);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, out, err);
      return kOk;
    }
    return report(err, "UsageError", e.what(), kUsage);
  }

  try {
    const CLI::App* cmd = app.get_subcommands().front();
    const CLI::App* leaf = cmd->get_subcommands().empty() ? cmd : cmd->get_subcommands().front();
    Provenance prov;
    prov.subcommand = leaf == cmd ? cmd->get_name() : cmd->get_name() + " " + leaf->get_name();
    prov.settings["subcommand"] = prov.subcommand;
    prov.settings["common"] = settings_of(&app);
    prov.settings["options"] = settings_of(leaf);
    // Settings files that shape the result contribute their contents.
    for (const CLI::Option* o : leaf->get_options())
      if (o->get_group() == kFiles && o->count() && (o->get_lnames().front() == "plan" ||
                                                     o->get_lnames().front() == "model-config")) {
        std::ifstream f(o->results().front(), std::ios::binary);
        if (f) prov.settings["files"][o->get_lnames().front()] = config_hash({std::istreambuf_iterator<char>(f), {}});
      }
    prov.hash = config_hash(prov.settings.dump());
    logger()->info("{} (config {})", prov.subcommand, prov.hash);

    if (cmd == pre_cmd) run_preprocess(pre, common, prov, out);
    else if (cmd == voc_cmd) run_vocab(voc, common, prov, out);
    else if (cmd == ref_cmd) run_reframe(ref, common, prov, out);
    else if (cmd == tr_cmd) run_train(tr, common, prov, out);
    else if (cmd == tl_cmd) run_translate(tl, common, prov, out);
    else if (cmd == ev_cmd) run_evaluate(ev, common, prov, out);
    else if (leaf == stt_cmd) run_style_train(stt, common, prov, out);
    else run_style_classify(stc, common, prov, out);

    if (common.dry_run) {
      ordered_json j;
      j["dry_run"] = true;
      j["subcommand"] = prov.subcommand;
      j["config_hash"] = prov.hash;
      j["settings"] = prov.settings;
      out << j.dump() << '\n';
    }
    return kOk;
  } catch (const UsageError& e) {
    return report(err, "UsageError", e.what(), kUsage);
  } catch (const MissingFileError& e) {
    return report(err, "MissingFileError", e.what(), kMissingFile);
  } catch (const std::exception& e) {
    return report(err, error_kind(e), e.what(), kFailure);
  }
}

}  // namespace unimt::cli
