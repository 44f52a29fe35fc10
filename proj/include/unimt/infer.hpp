#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "unimt/model.hpp"
#include "unimt/reframe.hpp"

namespace unimt {

struct Hypothesis {
  std::vector<int> ids;         // forced prefix, generated tokens, eos when emitted
  double score = 0;             // sum of log-probabilities of generated tokens
  double normalized_score = 0;  // score / length_penalty

  bool operator==(const Hypothesis&) const = default;
};

/// ((5 + generated) / 6)^alpha.
double length_penalty(std::size_t generated, double alpha);

/// One search: a forced prefix and the total length cap (prefix and eos included).
struct BeamRequest {
  std::vector<int> prefix;
  std::size_t max_len = 0;
};

struct BeamQuery {
  std::size_t request = 0;
  std::span<const int> ids;
};

/// Next-token log-probabilities, one row per query.
using StepFunction = std::function<Eigen::MatrixXd(const std::vector<BeamQuery>&)>;

/// Beam search over independent requests. Candidates rank by score, then
/// lower token id, then parent order; a finished candidate keeps its slot.
/// A hypothesis ends at eos or when it reaches max_len.
std::vector<Hypothesis> beam_search(const StepFunction& step, std::span<const BeamRequest> requests, int eos_id,
                                    int beam, double alpha);
Hypothesis beam_search(const StepFunction& step, const BeamRequest& request, int eos_id, int beam, double alpha);

struct DecodeOptions {
  int beam = 4;
  double alpha = 0.6;
  std::size_t max_len = 0;     // 0: source length + extra_len
  std::size_t extra_len = 50;
  bool prompting = true;       // force [prompt, ':'] at the start of every output
  std::size_t batch_size = 32; // sources decoded together
};

/// [prompt, ':'] when prompting, otherwise empty.
std::vector<int> forced_prefix(const Vocabulary& v, int prompt_id, bool prompting);

/// Decodes a list of sources, each with its own forced prefix. Sources are
/// grouped by length internally; results come back in input order.
template <typename Scalar>
std::vector<Hypothesis> decode_batch(ModelState<Scalar>& state, const Vocabulary& v,
                                     std::span<const UnifiedExample> sources,
                                     std::span<const std::vector<int>> prefixes, const DecodeOptions& options);

template <typename Scalar>
Hypothesis decode(ModelState<Scalar>& state, const Vocabulary& v, const UnifiedExample& source, TaskKind prompt,
                  const DecodeOptions& options);

struct FanOutEntry {
  TaskKind prompt = TaskKind::SentMT;
  std::string text;
  double score = 0;
  std::vector<int> ids;
  bool anomalous = false;  // output could not be parsed
  std::string error;
};

/// Decodes one record once per prompt; entries follow the order of `prompts`.
template <typename Scalar>
std::vector<FanOutEntry> fan_out(ModelState<Scalar>& state, const Vocabulary& v, const TaskRecord& record,
                                 std::span<const TaskKind> prompts, const DecodeOptions& options,
                                 const ReframeOptions& reframe_options);

/// Fan-out over many records at once: result[i][j] is record i under prompts[j].
template <typename Scalar>
std::vector<std::vector<FanOutEntry>> fan_out_all(ModelState<Scalar>& state, const Vocabulary& v,
                                                  std::span<const TaskRecord> records,
                                                  std::span<const TaskKind> prompts,
                                                  const DecodeOptions& options,
                                                  const ReframeOptions& reframe_options);

}  // namespace unimt
