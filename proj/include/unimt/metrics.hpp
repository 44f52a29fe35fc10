#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace unimt {

/// Tokenization of the "13a" BLEU signature (mteval-v13a).
std::vector<std::string> tokenize_13a(std::string_view line);

/// Unicode lowercasing (root locale).
std::string lowercase(std::string_view text);

/// Splits on Unicode whitespace.
std::vector<std::string> split_words(std::string_view text);

/// Sufficient statistics of corpus BLEU; segment statistics add up.
struct BleuStats {
  std::array<std::size_t, 4> matches{};
  std::array<std::size_t, 4> totals{};
  std::size_t hyp_len = 0;
  std::size_t ref_len = 0;

  BleuStats& operator+=(const BleuStats& o);
  bool operator==(const BleuStats&) const = default;
};

BleuStats bleu_stats(std::string_view hyp, std::string_view ref, bool case_sensitive = true);

struct BleuDetail {
  double score = 0;
  std::array<double, 4> precisions{};  // percent, smoothed
  double brevity_penalty = 0;
};

/// BLEU from accumulated statistics, exponential smoothing on zero match counts.
BleuDetail bleu_from_stats(const BleuStats& stats);

/// Corpus BLEU, 0..100. case_sensitive=false lowercases both sides first.
double bleu(std::span<const std::string> hyps, std::span<const std::string> refs, bool case_sensitive = true);

/// Corpus chrF with beta = 2 over character 1..6-grams, whitespace removed.
double chrf2(std::span<const std::string> hyps, std::span<const std::string> refs);

struct TerOptions {
  bool shifts = true;
  bool case_sensitive = false;
};

/// Edits of one segment: shifts plus word-level Levenshtein distance after shifting.
struct TerCounts {
  std::size_t edits = 0;
  std::size_t ref_words = 0;
};

TerCounts ter_counts(std::string_view hyp, std::string_view ref, const TerOptions& options = {});

/// Corpus TER: total edits / total reference words * 100. Empty references are an error.
double ter(std::span<const std::string> hyps, std::span<const std::string> refs, const TerOptions& options = {});

/// Word-level Levenshtein distance (unit costs).
std::size_t edit_distance(std::span<const std::string> a, std::span<const std::string> b);

/// Distinct word n-grams / total word n-grams over all texts pooled; 0 when none exist.
double dist_n(std::span<const std::string> texts, int n);

struct Significance {
  double p_value = 0;
  std::size_t iterations = 0;
  std::string warning;  // set when iterations < 100
};

/// Paired bootstrap on corpus BLEU: fraction of resamples where B scores at
/// most A (ties weigh 0.5). Small p supports "B is better than A".
Significance bootstrap_significance(std::span<const std::string> hyps_a, std::span<const std::string> hyps_b,
                                    std::span<const std::string> refs, std::size_t iterations = 1000,
                                    std::uint64_t seed = 1, bool case_sensitive = true);

struct MetricReport {
  std::optional<double> bleu, chrf2, ter, dist1, dist2;
  std::size_t n = 0;
  bool case_sensitive = true;
  std::optional<Significance> significance;
  std::string baseline;

  std::string to_json() const;
  std::string to_table() const;
};

struct EvaluateOptions {
  std::vector<std::string> metrics = {"bleu", "chrf2", "ter", "dist"};
  bool case_sensitive = true;
  std::vector<std::string> baseline_hyps;  // significance against these when non-empty
  std::string baseline_name;
  std::size_t bootstrap_iterations = 1000;
  std::uint64_t seed = 1;
};

MetricReport evaluate(std::span<const std::string> hyps, std::span<const std::string> refs,
                      const EvaluateOptions& options = {});

}  // namespace unimt
