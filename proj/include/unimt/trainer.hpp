#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "unimt/corpus.hpp"
#include "unimt/model.hpp"
#include "unimt/reframe.hpp"
#include "unimt/vocab.hpp"

namespace unimt {

/// Names of the training datasets used in one stage and its step budget.
struct StagePlan {
  std::vector<std::string> datasets;
  std::int64_t max_steps = 0;

  bool operator==(const StagePlan&) const = default;
};

/// Two-stage schedule: sentence-level pretraining, then all tasks jointly.
struct TrainPlan {
  StagePlan stage1;
  StagePlan stage2;
  bool prompting = true;
  bool from_scratch = false;  // skip stage 1
  std::int64_t eval_every = 1000;
  PromptFormat prompt_format = PromptFormat::Format3;

  std::size_t batch_tokens = 4096;  // padded target tokens per batch
  double mix_temperature = 1.0;
  std::int64_t warmup = 4000;
  double lr_scale = 1.0;
  std::uint64_t seed = 1;
  int eval_beam = 4;
  double eval_alpha = 0.6;
  std::size_t dev_limit = 0;           // examples per dev set at each eval; 0 = all
  std::map<std::string, double> dev_weights;  // per dev set; missing sets weigh 1

  void validate() const;
  std::string to_json() const;
  static TrainPlan from_json(const std::string& text);

  bool operator==(const TrainPlan&) const = default;
};

enum class Ablation { NoPrompt, FromScratch };

/// The plan with exactly the ablated flag changed.
TrainPlan ablate(const TrainPlan& plan, Ablation variant);
Ablation parse_ablation(std::string_view name);  // "no_prompt" or "from_scratch"

struct NamedDataset {
  std::string name;
  TaskKind task = TaskKind::SentMT;
  std::vector<TaskRecord> records;
};

struct TrainData {
  std::vector<NamedDataset> train;
  std::vector<NamedDataset> dev;
};

struct EvalResult {
  int stage = 0;
  std::int64_t step = 0;
  std::vector<std::pair<std::string, double>> bleu;  // per dev set
  double mean_bleu = 0;
  bool skipped = false;
  std::string error;
};

struct TrainOptions {
  std::string out_dir;
  bool resume = false;                     // continue from out_dir/last.ckpt when present
  std::optional<std::int64_t> stop_after;  // global step at which to stop early (simulated interruption)
  std::string provenance = "{}";           // JSON object stored in every checkpoint
};

struct TrainResult {
  std::string best_checkpoint;
  std::int64_t best_step = 0;
  double best_mean_bleu = 0;
  std::vector<double> losses;  // one per step run by this call
  std::vector<EvalResult> evals;
  bool completed = false;
};

/// Checkpoint selection rule: strictly higher mean BLEU wins, so ties keep the earlier one.
bool improves(const std::optional<double>& best, double mean_bleu);

/// Per-dev-set BLEU of a model, decoding every set with its own prompt.
EvalResult evaluate_dev(ModelState<float>& state, const Vocabulary& v, const TrainPlan& plan,
                        const std::vector<NamedDataset>& dev);

/// Runs stage 1 (unless skipped) and stage 2. Stage 2 starts from the stage-1
/// best checkpoint. Writes train_log.jsonl, last.ckpt, stage1_best.ckpt and
/// best.ckpt to options.out_dir. `state` holds the last trained weights on return.
TrainResult run(const TrainPlan& plan, ModelState<float>& state, const Vocabulary& v, const TrainData& data,
                const TrainOptions& options);

}  // namespace unimt
