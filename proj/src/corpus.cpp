#include "unimt/corpus.hpp"

#include <fstream>
#include <set>
#include <unordered_set>
#include <utility>

#include <unicode/normalizer2.h>
#include <unicode/unistr.h>

#include "json.hpp"
#include "unimt/errors.hpp"
#include "unimt/utf8.hpp"

namespace unimt {

using nlohmann::json;

namespace {

constexpr std::array<std::string_view, 7> kTaskNames = {
    "SentMT", "DocMT", "ChatMT", "PerMT", "MMT", "DsMT", "AphMT"};

std::string nfc(const std::string& text) {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* normalizer = icu::Normalizer2::getNFCInstance(status);
  if (U_FAILURE(status)) throw Error("ICU NFC normalizer unavailable");
  const icu::UnicodeString input = icu::UnicodeString::fromUTF8(text);
  if (normalizer->isNormalized(input, status) && U_SUCCESS(status)) return text;
  status = U_ZERO_ERROR;
  const icu::UnicodeString output = normalizer->normalize(input, status);
  if (U_FAILURE(status)) throw Error("NFC normalization failed");
  std::string out;
  output.toUTF8String(out);
  return out;
}

// Maps one code point onto the canonical set. Returns false to delete it.
bool canonical_char(char32_t cp, std::string& out) {
  if (cp >= 0xFF01 && cp <= 0xFF5E) {  // full-width ASCII block
    out.push_back(static_cast<char>(cp - 0xFEE0));
    return true;
  }
  switch (cp) {
    case 0x2018: case 0x2019: case 0x201A: case 0x201B: case 0x2032:
      out.push_back('\'');
      return true;
    case 0x201C: case 0x201D: case 0x201E: case 0x201F: case 0x2033:
    case 0x00AB: case 0x00BB:
      out.push_back('"');
      return true;
    case 0x2010: case 0x2011: case 0x2012: case 0x2013: case 0x2014:
    case 0x2015: case 0x2212:
      out.push_back('-');
      return true;
    case 0x2026:
      out.append("...");
      return true;
    case 0x200B: case 0x200C: case 0x200D: case 0x2060: case 0xFEFF:
      return false;
    default:
      break;
  }
  if (utf8::is_space(cp)) {
    out.push_back(' ');
    return true;
  }
  utf8::append(out, cp);
  return true;
}

std::string collapse_spaces(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (char c : text) {
    if (c == ' ') {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(c);
  }
  return out;
}

std::size_t word_count(std::string_view text) {
  std::size_t n = 0;
  bool in_word = false;
  for (char32_t cp : utf8::decode(text)) {
    const bool space = utf8::is_space(cp);
    if (!space && !in_word) ++n;
    in_word = !space;
  }
  return n;
}

json record_to_json(const TaskRecord& r) {
  json j;
  j["task"] = std::string(to_string(r.task));
  j["source"] = r.source;
  j["target"] = r.target;
  j["context_segments"] = r.context_segments;
  if (!r.context_vectors.empty()) j["context_vectors"] = r.context_vectors;
  j["meta"] = json::object();
  for (const auto& [k, v] : r.meta) j["meta"][k] = v;
  return j;
}

}  // namespace

std::string_view to_string(TaskKind task) { return kTaskNames[static_cast<std::size_t>(task)]; }

std::optional<TaskKind> try_parse_task(std::string_view name) {
  for (std::size_t i = 0; i < kTaskNames.size(); ++i) {
    if (kTaskNames[i] == name) return static_cast<TaskKind>(i);
  }
  return std::nullopt;
}

TaskKind parse_task(std::string_view name) {
  if (auto t = try_parse_task(name)) return *t;
  throw FormatError("unknown task kind '" + std::string(name) + "'");
}

Language parse_language(std::string_view tag) {
  if (tag == "zh") return Language::Chinese;
  if (tag == "en") return Language::English;
  if (tag == "de") return Language::German;
  throw ConfigError("unknown language tag '" + std::string(tag) + "' (expected zh, en or de)");
}

std::string_view to_string(Language lang) {
  switch (lang) {
    case Language::Chinese: return "zh";
    case Language::English: return "en";
    case Language::German: return "de";
  }
  return "en";
}

std::string_view to_string(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Dev: return "dev";
    case Split::Test: return "test";
  }
  return "train";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::Train;
  if (name == "dev") return Split::Dev;
  if (name == "test") return Split::Test;
  throw FormatError("unknown split '" + std::string(name) + "'");
}

void validate(const TaskRecord& r) {
  if (r.source.empty()) throw FormatError("record has an empty source");
  if (r.target.empty()) throw FormatError("record has an empty target");
  if (!r.context_vectors.empty()) {
    if (r.task != TaskKind::MMT) {
      throw FormatError("context_vectors are only allowed on MMT records");
    }
    const std::size_t dim = r.context_vectors.front().size();
    if (dim == 0) throw FormatError("context vector of dimension 0");
    for (const auto& v : r.context_vectors) {
      if (v.size() != dim) throw FormatError("context vectors disagree in dimension");
    }
  }
}

std::string to_json_line(const TaskRecord& record) { return record_to_json(record).dump(); }

TaskRecord parse_record_line(std::string_view line, std::size_t line_number) {
  const std::string where = line_number ? " (line " + std::to_string(line_number) + ")" : "";
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw FormatError("invalid JSON record" + where + ": " + e.what());
  }
  if (!j.is_object()) throw FormatError("record is not a JSON object" + where);
  TaskRecord r;
  try {
    r.task = parse_task(j.at("task").get<std::string>());
    r.source = j.at("source").get<std::string>();
    r.target = j.at("target").get<std::string>();
    if (j.contains("context_segments")) {
      r.context_segments = j["context_segments"].get<std::vector<std::string>>();
    }
    if (j.contains("context_vectors") && !j["context_vectors"].is_null()) {
      r.context_vectors = j["context_vectors"].get<std::vector<std::vector<double>>>();
    }
    if (j.contains("meta")) {
      for (const auto& [k, v] : j["meta"].items()) {
        r.meta[k] = v.is_string() ? v.get<std::string>() : v.dump();
      }
    }
  } catch (const json::exception& e) {
    throw FormatError("malformed record" + where + ": " + e.what());
  } catch (const FormatError& e) {
    throw FormatError(std::string(e.what()) + where);
  }
  return r;
}

std::vector<TaskRecord> read_records(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFileError("cannot open record file '" + path + "'");
  std::vector<TaskRecord> out;
  std::string line;
  std::size_t line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    out.push_back(parse_record_line(line, line_number));
  }
  return out;
}

void write_records(const std::string& path, std::span<const TaskRecord> records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write record file '" + path + "'");
  for (const auto& r : records) out << to_json_line(r) << '\n';
  if (!out) throw IoError("write failed for '" + path + "'");
}

std::vector<DatasetManifest> read_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFileError("cannot open manifest '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw FormatError("invalid manifest JSON: " + std::string(e.what()));
  }
  if (!j.is_array()) throw FormatError("manifest must be a JSON array");
  std::vector<DatasetManifest> out;
  for (const auto& e : j) {
    try {
      DatasetManifest m;
      m.name = e.at("name").get<std::string>();
      m.task = parse_task(e.at("task").get<std::string>());
      m.split = parse_split(e.at("split").get<std::string>());
      m.path = e.at("path").get<std::string>();
      m.size = e.at("size").get<std::size_t>();
      m.source_lang = e.value("source_lang", std::string("en"));
      m.target_lang = e.value("target_lang", std::string("en"));
      out.push_back(std::move(m));
    } catch (const json::exception& ex) {
      throw FormatError("malformed manifest entry: " + std::string(ex.what()));
    }
  }
  return out;
}

void write_manifest(const std::string& path, std::span<const DatasetManifest> manifest) {
  json j = json::array();
  for (const auto& m : manifest) {
    j.push_back({{"name", m.name},
                 {"task", std::string(to_string(m.task))},
                 {"split", std::string(to_string(m.split))},
                 {"path", m.path},
                 {"size", m.size},
                 {"source_lang", m.source_lang},
                 {"target_lang", m.target_lang}});
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write manifest '" + path + "'");
  out << j.dump(2) << '\n';
}

void verify_manifest(const DatasetManifest& entry) {
  const auto records = read_records(entry.path);
  if (records.size() != entry.size) {
    throw FormatError("manifest '" + entry.name + "' declares " + std::to_string(entry.size) +
                      " records but " + entry.path + " holds " +
                      std::to_string(records.size()));
  }
}

std::string normalize_text(std::string_view raw, Language /*lang*/) {
  const std::vector<char32_t> cps = utf8::decode(raw);
  std::string mapped;
  mapped.reserve(raw.size());
  for (char32_t cp : cps) canonical_char(cp, mapped);
  return nfc(collapse_spaces(mapped));
}

std::size_t text_length(std::string_view text, Language lang) {
  if (lang == Language::Chinese) {
    std::size_t n = 0;
    for (char32_t cp : utf8::decode(text)) {
      if (!utf8::is_space(cp)) ++n;
    }
    return n;
  }
  return word_count(text);
}

FilterDecision length_filter(const TaskRecord& record, Language source_lang,
                             Language target_lang, std::size_t limit) {
  if (text_length(record.source, source_lang) > limit) return FilterDecision::Drop;
  if (text_length(record.target, target_lang) > limit) return FilterDecision::Drop;
  return FilterDecision::Keep;
}

std::vector<TaskRecord> dedupe(std::span<const TaskRecord> records) {
  std::set<std::pair<std::string_view, std::string_view>> seen;
  std::vector<TaskRecord> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    if (seen.emplace(r.source, r.target).second) out.push_back(r);
  }
  return out;
}

LeakageResult leakage_filter(std::span<const TaskRecord> train,
                             std::span<const std::vector<TaskRecord>> test_sets) {
  std::unordered_set<std::string_view> test_sources;
  for (const auto& set : test_sets) {
    for (const auto& r : set) test_sources.insert(r.source);
  }
  LeakageResult result;
  result.kept.reserve(train.size());
  for (const auto& r : train) {
    if (test_sources.contains(r.source)) {
      ++result.removed;
    } else {
      result.kept.push_back(r);
    }
  }
  return result;
}

std::vector<TaskRecord> preprocess(std::span<const TaskRecord> raw,
                                   std::span<const std::vector<TaskRecord>> test_sets,
                                   const PreprocessOptions& options, PreprocessStats* stats) {
  PreprocessStats local;
  local.input = raw.size();
  std::vector<TaskRecord> normalized;
  normalized.reserve(raw.size());
  for (const auto& r : raw) {
    TaskRecord n = r;
    n.source = normalize_text(r.source, options.source_lang);
    n.target = normalize_text(r.target, options.target_lang);
    for (auto& seg : n.context_segments) seg = normalize_text(seg, options.source_lang);
    if (n.source.empty() || n.target.empty()) {
      ++local.empty;
      continue;
    }
    if (length_filter(n, options.source_lang, options.target_lang, options.max_length) ==
        FilterDecision::Drop) {
      ++local.too_long;
      continue;
    }
    validate(n);
    normalized.push_back(std::move(n));
  }
  auto unique = dedupe(normalized);
  local.duplicates = normalized.size() - unique.size();
  auto leak = leakage_filter(unique, test_sets);
  local.leaked = leak.removed;
  local.output = leak.kept.size();
  if (stats) *stats = local;
  return std::move(leak.kept);
}

}  // namespace unimt
