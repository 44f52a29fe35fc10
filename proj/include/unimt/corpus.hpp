#pragma once

#include <array>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace unimt {

/// The seven translation scenarios a single model is trained on.
enum class TaskKind { SentMT, DocMT, ChatMT, PerMT, MMT, DsMT, AphMT };

inline constexpr std::array<TaskKind, 7> kAllTasks = {
    TaskKind::SentMT, TaskKind::DocMT, TaskKind::ChatMT, TaskKind::PerMT,
    TaskKind::MMT,    TaskKind::DsMT,  TaskKind::AphMT};

std::string_view to_string(TaskKind task);
/// Parses "SentMT", "DocMT", ...; throws FormatError otherwise.
TaskKind parse_task(std::string_view name);
std::optional<TaskKind> try_parse_task(std::string_view name);

enum class Language { Chinese, English, German };

/// Accepts "zh", "en", "de"; anything else is a ConfigError.
Language parse_language(std::string_view tag);
std::string_view to_string(Language lang);

/// One heterogeneous example. Context segments are oldest first.
struct TaskRecord {
  TaskKind task = TaskKind::SentMT;
  std::string source;
  std::string target;
  std::vector<std::string> context_segments;
  std::vector<std::vector<double>> context_vectors;  // MMT only
  std::map<std::string, std::string> meta;

  bool operator==(const TaskRecord&) const = default;
};

/// Throws FormatError when a record breaks the schema invariants.
void validate(const TaskRecord& record);

std::string to_json_line(const TaskRecord& record);
TaskRecord parse_record_line(std::string_view line, std::size_t line_number = 0);

std::vector<TaskRecord> read_records(const std::string& path);
void write_records(const std::string& path, std::span<const TaskRecord> records);

enum class Split { Train, Dev, Test };
std::string_view to_string(Split split);
Split parse_split(std::string_view name);

struct DatasetManifest {
  std::string name;
  TaskKind task = TaskKind::SentMT;
  Split split = Split::Train;
  std::string path;
  std::size_t size = 0;
  std::string source_lang = "en";
  std::string target_lang = "en";

  bool operator==(const DatasetManifest&) const = default;
};

std::vector<DatasetManifest> read_manifest(const std::string& path);
void write_manifest(const std::string& path, std::span<const DatasetManifest> manifest);
/// Throws FormatError when `size` disagrees with the number of readable records.
void verify_manifest(const DatasetManifest& entry);

// ---------------------------------------------------------------------------
// Text normalization and filtering

/// Full-width to half-width, punctuation canonicalization, whitespace
/// collapsing and canonical (NFC) composition. Idempotent.
std::string normalize_text(std::string_view raw, Language lang);

/// Characters for Chinese, whitespace-delimited words otherwise.
std::size_t text_length(std::string_view text, Language lang);

enum class FilterDecision { Keep, Drop };

/// Drops a record when either side is longer than `limit` (limit itself survives).
FilterDecision length_filter(const TaskRecord& record, Language source_lang,
                             Language target_lang, std::size_t limit = 80);

/// Keeps the first occurrence of each exact (source, target) pair.
std::vector<TaskRecord> dedupe(std::span<const TaskRecord> records);

struct LeakageResult {
  std::vector<TaskRecord> kept;
  std::size_t removed = 0;
};

/// Removes training records whose source appears in any of the test sets.
LeakageResult leakage_filter(std::span<const TaskRecord> train,
                             std::span<const std::vector<TaskRecord>> test_sets);

struct PreprocessOptions {
  Language source_lang = Language::English;
  Language target_lang = Language::English;
  std::size_t max_length = 80;
};

struct PreprocessStats {
  std::size_t input = 0;
  std::size_t empty = 0;
  std::size_t too_long = 0;
  std::size_t duplicates = 0;
  std::size_t leaked = 0;
  std::size_t output = 0;
};

/// normalize → length filter → dedupe → leakage filter, order-stable.
std::vector<TaskRecord> preprocess(std::span<const TaskRecord> raw,
                                   std::span<const std::vector<TaskRecord>> test_sets,
                                   const PreprocessOptions& options,
                                   PreprocessStats* stats = nullptr);

}  // namespace unimt
