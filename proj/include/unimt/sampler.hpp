#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "unimt/reframe.hpp"

namespace unimt {

struct MixPolicy {
  double temperature = 1.0;
  std::vector<double> weights;  // explicit per-dataset probabilities; empty = use sizes
};

/// p_i proportional to size_i^(1/T), or the explicit weights when given.
std::vector<double> dataset_probabilities(std::span<const std::size_t> sizes, const MixPolicy& policy);

using IdGrid = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MaskGrid = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Batch {
  std::vector<UnifiedExample> examples;
  IdGrid source;       // batch x max source length, padded with the pad id
  IdGrid target;
  MaskGrid source_mask;  // 1 at real tokens
  MaskGrid target_mask;
  /// Per-example context vectors (objects x feature dim); empty matrices for text.
  std::vector<Eigen::MatrixXd> context;

  std::size_t size() const { return examples.size(); }
  std::size_t real_target_tokens() const;
  bool has_context() const;
};

/// Pads examples into a batch. Left-aligned rows, masks mark real tokens.
Batch make_batch(std::vector<UnifiedExample> examples, int pad_id);

/// Uniform double in [0, 1) from 53 high bits; stable across standard libraries.
inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

/// Uniform integer in [0, n) by rejection; stable across standard libraries.
std::uint64_t uniform_below(std::mt19937_64& rng, std::uint64_t n);

struct SamplerOptions {
  MixPolicy policy;
  std::size_t token_budget = 4096;  // padded target tokens per batch
  std::uint64_t seed = 1;
  int pad_id = 0;
  bool length_bucketing = false;  // sort by length inside shuffled shards
  std::size_t shard_size = 1000;
};

/// Draws token-budgeted batches from several datasets. Each example is drawn
/// by first picking a dataset, then its next example in a per-epoch shuffle.
class Sampler {
 public:
  Sampler(std::vector<std::vector<UnifiedExample>> datasets, SamplerOptions options);
  Sampler(const Sampler&) = delete;
  Sampler& operator=(const Sampler&) = delete;

  Batch next_batch();
  /// Index of the dataset the next example comes from (consumes randomness).
  std::size_t draw_dataset();

  const std::vector<double>& probabilities() const { return probs_; }
  std::size_t batches_drawn() const { return batches_; }
  std::size_t epoch(std::size_t dataset) const { return epochs_.at(dataset); }
  /// Replays `n` batches without building them, e.g. after resuming.
  void skip_batches(std::size_t n);

 private:
  const UnifiedExample& take(std::size_t dataset);
  void reshuffle(std::size_t dataset);
  std::vector<UnifiedExample> collect();

  std::vector<std::vector<UnifiedExample>> data_;
  SamplerOptions opts_;
  std::vector<double> probs_;
  std::vector<double> cumulative_;
  std::mt19937_64 rng_;
  std::vector<std::vector<std::size_t>> order_;
  std::vector<std::size_t> cursor_;
  std::vector<std::size_t> epochs_;
  const UnifiedExample* pending_ = nullptr;
  std::size_t batches_ = 0;
};

}  // namespace unimt
