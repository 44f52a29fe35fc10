#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "unimt/corpus.hpp"

namespace unimt {

/// Control tokens. They occupy a contiguous block of ids starting at 0, in
/// the order returned by `reserved_block()`, and are never split by BPE.
struct SpecialTokens {
  std::map<TaskKind, std::string> prompt_tokens;
  std::string bos = "<bos>";
  std::string eos = "<eos>";
  std::string ctx = "<context>";
  std::string sep = "<sep>";
  std::string null = "NULL";
  std::string pad = "<pad>";
  std::string unk = "<unk>";
  std::string target_prefix_sep = ":";
  // Surfaces used by the descriptive prompt layouts (Format1/Format2).
  std::map<TaskKind, std::string> descriptive_prompts;
  std::string descriptive_ctx = "<given the context>";
  // Optional per-domain DsMT prompts, rendered as "<DsMT-domain>".
  std::vector<std::string> dsmt_domains;

  static SpecialTokens defaults();
  std::vector<std::string> reserved_block() const;
  std::string dsmt_domain_token(std::string_view domain) const;

  bool operator==(const SpecialTokens&) const = default;
};

struct VocabBuildOptions {
  bool byte_fallback = true;
  std::size_t min_pair_frequency = 2;
};

/// Joint source/target byte-level BPE vocabulary. Immutable once built.
class Vocabulary {
 public:
  static constexpr int kFormatVersion = 1;

  static Vocabulary build(std::span<const std::string> corpus, std::size_t vocab_size,
                          const SpecialTokens& specials = SpecialTokens::defaults(),
                          const VocabBuildOptions& options = {});

  std::vector<int> encode(std::string_view text) const;
  /// Encodes text as plain bytes; control-token surfaces are not recognized.
  std::vector<int> encode_plain(std::string_view text) const;
  /// Pads are dropped; throws RangeError on ids outside the vocabulary.
  std::string decode(std::span<const int> ids) const;

  std::size_t size() const { return entries_.size(); }
  std::size_t reserved_size() const { return reserved_; }
  const std::vector<std::string>& entries() const { return entries_; }
  const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }
  const SpecialTokens& specials() const { return specials_; }
  bool byte_fallback() const { return byte_fallback_; }

  std::optional<int> find(std::string_view token) const;
  /// Id of a control token surface or a subword piece; throws RangeError when absent.
  int id(std::string_view token) const;

  int pad_id() const { return pad_; }
  int unk_id() const { return unk_; }
  int bos_id() const { return bos_; }
  int eos_id() const { return eos_; }
  int ctx_id() const { return ctx_; }
  int sep_id() const { return sep_; }
  int null_id() const { return null_; }
  int prefix_sep_id() const { return prefix_sep_; }
  int prompt_id(TaskKind task) const { return prompt_[static_cast<std::size_t>(task)]; }
  int descriptive_prompt_id(TaskKind task) const {
    return descriptive_prompt_[static_cast<std::size_t>(task)];
  }
  int descriptive_ctx_id() const { return descriptive_ctx_; }
  std::optional<int> dsmt_domain_id(std::string_view domain) const;

  bool is_control(int id) const { return id >= 0 && static_cast<std::size_t>(id) < reserved_; }
  /// Task selected by a prompt-like token (plain, descriptive or per-domain).
  std::optional<TaskKind> prompt_task(int id) const;

  std::string to_json() const;
  static Vocabulary from_json(std::string_view text);
  void save(const std::string& path, std::string_view config_hash = {}) const;
  static Vocabulary load(const std::string& path);

  bool operator==(const Vocabulary& other) const {
    return entries_ == other.entries_ && merges_ == other.merges_ &&
           specials_ == other.specials_ && byte_fallback_ == other.byte_fallback_;
  }

 private:
  struct PairHash {
    std::size_t operator()(const std::pair<int, int>& p) const noexcept {
      return std::hash<std::uint64_t>{}((static_cast<std::uint64_t>(p.first) << 32) ^
                                        static_cast<std::uint32_t>(p.second));
    }
  };

  void index();
  void encode_text(std::string_view text, std::vector<int>& out) const;
  void encode_chunk(std::string_view chunk, std::vector<int>& out) const;

  SpecialTokens specials_;
  bool byte_fallback_ = true;
  std::size_t reserved_ = 0;
  std::vector<std::string> entries_;  // control surfaces then raw-byte pieces
  std::vector<std::pair<std::string, std::string>> merges_;

  std::unordered_map<std::string, int> piece_ids_;
  std::unordered_map<std::string, int> control_ids_;
  std::unordered_map<std::pair<int, int>, std::pair<int, int>, PairHash> merge_rank_;  // -> (rank, result)
  std::array<int, 256> byte_ids_{};
  std::vector<std::optional<TaskKind>> prompt_task_;
  std::vector<std::pair<std::string, int>> angle_controls_;  // sorted longest first

  int pad_ = 0, unk_ = 0, bos_ = 0, eos_ = 0, ctx_ = 0, sep_ = 0, null_ = 0, prefix_sep_ = 0;
  int descriptive_ctx_ = 0;
  std::array<int, 7> prompt_{};
  std::array<int, 7> descriptive_prompt_{};
};

/// Splits text into BPE chunks: an optional single leading space plus a run
/// of non-space bytes, or a lone space. Concatenating the chunks restores the text.
std::vector<std::string_view> pretokenize(std::string_view text);

}  // namespace unimt
