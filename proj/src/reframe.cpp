#include "unimt/reframe.hpp"

#include <algorithm>
#include <fstream>

#include "json.hpp"
#include "unimt/errors.hpp"

namespace unimt {

using nlohmann::json;

std::string_view to_string(PromptFormat format) {
  switch (format) {
    case PromptFormat::Format1: return "Format1";
    case PromptFormat::Format2: return "Format2";
    case PromptFormat::Format3: return "Format3";
  }
  return "Format3";
}

PromptFormat parse_prompt_format(std::string_view name) {
  if (name == "Format1" || name == "1") return PromptFormat::Format1;
  if (name == "Format2" || name == "2") return PromptFormat::Format2;
  if (name == "Format3" || name == "3") return PromptFormat::Format3;
  throw ConfigError("unknown prompt format '" + std::string(name) + "'");
}

int target_prompt_id(const TaskRecord& record, TaskKind task, const Vocabulary& v,
                     const ReframeOptions& options) {
  if (task == TaskKind::DsMT && options.per_domain_dsmt) {
    if (auto it = record.meta.find("domain"); it != record.meta.end()) {
      if (auto id = v.dsmt_domain_id(it->second)) return *id;
    }
  }
  return v.prompt_id(task);
}

std::vector<int> context_tokens(const TaskRecord& record, const Vocabulary& v,
                                const ReframeOptions& options) {
  if (record.task == TaskKind::MMT || record.context_segments.empty()) return {v.null_id()};
  const auto& segs = record.context_segments;
  std::size_t first = 0;
  if (options.max_context_segments > 0 && segs.size() > options.max_context_segments) {
    first = segs.size() - options.max_context_segments;
  }
  // Walk from the most recent segment backwards while the budget allows.
  std::vector<std::vector<int>> kept;
  std::size_t used = 0;
  for (std::size_t i = segs.size(); i-- > first;) {
    std::vector<int> ids = v.encode_plain(segs[i]);
    if (ids.empty()) continue;
    const std::size_t cost = ids.size() + (kept.empty() ? 0 : 1);
    if (used + cost <= options.max_context_tokens) {
      used += cost;
      kept.push_back(std::move(ids));
      continue;
    }
    if (kept.empty() && options.max_context_tokens > 0) {
      ids.erase(ids.begin(), ids.end() - static_cast<std::ptrdiff_t>(options.max_context_tokens));
      kept.push_back(std::move(ids));
    }
    break;
  }
  if (kept.empty()) return {v.null_id()};
  std::vector<int> out;
  for (std::size_t k = kept.size(); k-- > 0;) {
    out.insert(out.end(), kept[k].begin(), kept[k].end());
    if (k > 0) out.push_back(v.sep_id());
  }
  return out;
}

std::vector<int> reframe_source(const TaskRecord& record, TaskKind task, const Vocabulary& v,
                                const ReframeOptions& options) {
  if (record.source.empty()) throw ReframeError("cannot reframe a record with an empty source");
  const std::vector<int> text = v.encode_plain(record.source);
  const std::vector<int> context = context_tokens(record, v, options);

  const bool descriptive = options.format != PromptFormat::Format3;
  int prompt = target_prompt_id(record, task, v, options);
  if (descriptive && prompt == v.prompt_id(task)) prompt = v.descriptive_prompt_id(task);
  const int ctx = descriptive ? v.descriptive_ctx_id() : v.ctx_id();

  std::vector<int> sentence;
  sentence.reserve(text.size() + 3);
  if (options.prompting) sentence.push_back(prompt);
  sentence.push_back(v.bos_id());
  sentence.insert(sentence.end(), text.begin(), text.end());
  sentence.push_back(v.eos_id());

  std::vector<int> block;
  block.reserve(context.size() + 1);
  block.push_back(ctx);
  block.insert(block.end(), context.begin(), context.end());

  std::vector<int> out;
  out.reserve(sentence.size() + block.size());
  if (options.format == PromptFormat::Format2) {
    out.insert(out.end(), block.begin(), block.end());
    out.insert(out.end(), sentence.begin(), sentence.end());
  } else {
    out.insert(out.end(), sentence.begin(), sentence.end());
    out.insert(out.end(), block.begin(), block.end());
  }
  return out;
}

std::vector<int> reframe_source(const TaskRecord& record, const Vocabulary& v,
                                const ReframeOptions& options) {
  return reframe_source(record, record.task, v, options);
}

std::vector<int> reframe_target(const TaskRecord& record, const Vocabulary& v, bool prompting,
                                const ReframeOptions& options) {
  if (record.target.empty()) throw ReframeError("cannot reframe a record with an empty target");
  std::vector<int> out;
  if (prompting) {
    out.push_back(target_prompt_id(record, record.task, v, options));
    out.push_back(v.prefix_sep_id());
  }
  const std::vector<int> text = v.encode_plain(record.target);
  out.insert(out.end(), text.begin(), text.end());
  out.push_back(v.eos_id());
  return out;
}

UnifiedExample reframe(const TaskRecord& record, const Vocabulary& v, const ReframeOptions& options) {
  UnifiedExample ex;
  ex.task = record.task;
  ex.source_ids = reframe_source(record, v, options);
  ex.target_ids = reframe_target(record, v, options.prompting, options);
  if (record.task == TaskKind::MMT) ex.context_vectors = record.context_vectors;
  return ex;
}

ParsedOutput parse_output(std::span<const int> ids, const Vocabulary& v, bool prompting) {
  ParsedOutput out;
  std::size_t begin = 0;
  if (prompting) {
    const auto task = ids.empty() ? std::nullopt : v.prompt_task(ids[0]);
    if (!task) throw MalformedOutputError("decoder output does not start with a prompt token");
    out.task = task;
    begin = 1;
    if (begin < ids.size() && ids[begin] == v.prefix_sep_id()) ++begin;
  }
  std::size_t end = begin;
  while (end < ids.size() && ids[end] != v.eos_id()) ++end;
  out.text = v.decode(ids.subspan(begin, end - begin));
  return out;
}

std::string to_json_line(const UnifiedExample& ex) {
  json j;
  j["task"] = std::string(to_string(ex.task));
  j["source_ids"] = ex.source_ids;
  j["target_ids"] = ex.target_ids;
  if (!ex.context_vectors.empty()) j["context_vectors"] = ex.context_vectors;
  return j.dump();
}

UnifiedExample parse_unified_line(std::string_view line, std::size_t line_number) {
  const std::string where = line_number ? " (line " + std::to_string(line_number) + ")" : "";
  try {
    const json j = json::parse(line);
    UnifiedExample ex;
    ex.task = parse_task(j.at("task").get<std::string>());
    ex.source_ids = j.at("source_ids").get<std::vector<int>>();
    ex.target_ids = j.at("target_ids").get<std::vector<int>>();
    if (j.contains("context_vectors")) {
      ex.context_vectors = j["context_vectors"].get<std::vector<std::vector<double>>>();
    }
    return ex;
  } catch (const json::exception& e) {
    throw FormatError("malformed unified example" + where + ": " + e.what());
  }
}

std::vector<UnifiedExample> read_unified(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFileError("cannot open unified example file '" + path + "'");
  std::vector<UnifiedExample> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    out.push_back(parse_unified_line(line, n));
  }
  return out;
}

void write_unified(const std::string& path, std::span<const UnifiedExample> examples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  for (const auto& ex : examples) out << to_json_line(ex) << '\n';
}

}  // namespace unimt
