#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "unimt/corpus.hpp"
#include "unimt/vocab.hpp"

namespace unimt {

/// Source layouts:
///   Format1  <descriptive prompt> <bos> X <eos> <given the context> X_add
///   Format2  <given the context> X_add <descriptive prompt> <bos> X <eos>
///   Format3  <prompt> <bos> X <eos> <context> X_add
enum class PromptFormat { Format1, Format2, Format3 };

std::string_view to_string(PromptFormat format);
PromptFormat parse_prompt_format(std::string_view name);  // "Format1" or "1"

struct ReframeOptions {
  PromptFormat format = PromptFormat::Format3;
  bool prompting = true;
  std::size_t max_context_tokens = 128;
  std::size_t max_context_segments = 3;  // most recent segments kept; 0 keeps all
  bool per_domain_dsmt = false;          // use <DsMT-domain> when meta["domain"] names one
};

/// A reframed example ready for batching.
struct UnifiedExample {
  TaskKind task = TaskKind::SentMT;
  std::vector<int> source_ids;
  std::vector<int> target_ids;
  std::vector<std::vector<double>> context_vectors;

  bool operator==(const UnifiedExample&) const = default;
};

/// Prompt token used on the target side (and for forced decoding).
int target_prompt_id(const TaskRecord& record, TaskKind task, const Vocabulary& v,
                     const ReframeOptions& options);

/// Context block X_add: segments joined by <sep>, oldest dropped first to fit
/// the token budget; the single NULL token when nothing remains.
std::vector<int> context_tokens(const TaskRecord& record, const Vocabulary& v,
                                const ReframeOptions& options);

std::vector<int> reframe_source(const TaskRecord& record, const Vocabulary& v,
                                const ReframeOptions& options = {});
/// Same as above but prefixed with the prompt of `task` instead of the record's own.
std::vector<int> reframe_source(const TaskRecord& record, TaskKind task, const Vocabulary& v,
                                const ReframeOptions& options = {});

std::vector<int> reframe_target(const TaskRecord& record, const Vocabulary& v, bool prompting,
                                const ReframeOptions& options = {});

UnifiedExample reframe(const TaskRecord& record, const Vocabulary& v,
                       const ReframeOptions& options = {});

struct ParsedOutput {
  std::optional<TaskKind> task;  // empty when prompting is disabled
  std::string text;
};

/// Strips the [prompt, ':'] prefix and everything from the first <eos> on.
/// Throws MalformedOutputError when prompting is enabled and no prompt leads.
ParsedOutput parse_output(std::span<const int> ids, const Vocabulary& v, bool prompting);

std::string to_json_line(const UnifiedExample& example);
UnifiedExample parse_unified_line(std::string_view line, std::size_t line_number = 0);
std::vector<UnifiedExample> read_unified(const std::string& path);
void write_unified(const std::string& path, std::span<const UnifiedExample> examples);

}  // namespace unimt
