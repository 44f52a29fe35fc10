#include "unimt/trainer.hpp"

#include <filesystem>
#include <fstream>
#include <set>

#include "json.hpp"
#include "unimt/errors.hpp"
#include "unimt/infer.hpp"
#include "unimt/metrics.hpp"
#include "unimt/sampler.hpp"

namespace unimt {

using nlohmann::json;
using nlohmann::ordered_json;

void TrainPlan::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("train plan: " + m); };
  if (stage2.max_steps <= 0) fail("stage2.max_steps must be positive");
  if (stage2.datasets.empty()) fail("stage2 needs at least one dataset");
  if (stage1.max_steps < 0) fail("stage1.max_steps must not be negative");
  if (!from_scratch && stage1.max_steps > 0 && stage1.datasets.empty()) fail("stage1 needs at least one dataset");
  if (eval_every <= 0) fail("eval_every must be positive");
  if (batch_tokens == 0) fail("batch_tokens must be positive");
  if (!(mix_temperature > 0)) fail("mix_temperature must be positive");
  if (warmup <= 0) fail("warmup must be positive");
  if (!(lr_scale > 0)) fail("lr_scale must be positive");
  if (eval_beam < 1) fail("eval_beam must be at least 1");
  if (!(eval_alpha >= 0)) fail("eval_alpha must not be negative");
  for (const auto& [name, w] : dev_weights)
    if (!(w >= 0)) fail("dev weight of '" + name + "' must not be negative");
}

std::string TrainPlan::to_json() const {
  ordered_json j;
  j["stage1"] = {{"datasets", stage1.datasets}, {"max_steps", stage1.max_steps}};
  j["stage2"] = {{"datasets", stage2.datasets}, {"max_steps", stage2.max_steps}};
  j["prompting"] = prompting;
  j["from_scratch"] = from_scratch;
  j["eval_every"] = eval_every;
  j["prompt_format"] = std::string(unimt::to_string(prompt_format));
  j["batch_tokens"] = batch_tokens;
  j["mix_temperature"] = mix_temperature;
  j["warmup"] = warmup;
  j["lr_scale"] = lr_scale;
  j["seed"] = seed;
  j["eval_beam"] = eval_beam;
  j["eval_alpha"] = eval_alpha;
  j["dev_limit"] = dev_limit;
  j["dev_weights"] = dev_weights;
  return j.dump();
}

namespace {

StagePlan stage_from_json(const json& j, const std::string& which) {
  StagePlan s;
  if (!j.is_object()) throw ConfigError("train plan: " + which + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it.key() == "datasets") s.datasets = it->get<std::vector<std::string>>();
    else if (it.key() == "max_steps") s.max_steps = it->get<std::int64_t>();
    else throw ConfigError("train plan: unknown key '" + which + "." + it.key() + "'");
  }
  return s;
}

}  // namespace

TrainPlan TrainPlan::from_json(const std::string& text) {
  TrainPlan p;
  try {
    const json j = json::parse(text);
    if (!j.is_object()) throw ConfigError("train plan must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& k = it.key();
      const json& v = it.value();
      if (k == "stage1") p.stage1 = stage_from_json(v, k);
      else if (k == "stage2") p.stage2 = stage_from_json(v, k);
      else if (k == "prompting") p.prompting = v.get<bool>();
      else if (k == "from_scratch") p.from_scratch = v.get<bool>();
      else if (k == "eval_every") p.eval_every = v.get<std::int64_t>();
      else if (k == "prompt_format") p.prompt_format = parse_prompt_format(v.get<std::string>());
      else if (k == "batch_tokens") p.batch_tokens = v.get<std::size_t>();
      else if (k == "mix_temperature") p.mix_temperature = v.get<double>();
      else if (k == "warmup") p.warmup = v.get<std::int64_t>();
      else if (k == "lr_scale") p.lr_scale = v.get<double>();
      else if (k == "seed") p.seed = v.get<std::uint64_t>();
      else if (k == "eval_beam") p.eval_beam = v.get<int>();
      else if (k == "eval_alpha") p.eval_alpha = v.get<double>();
      else if (k == "dev_limit") p.dev_limit = v.get<std::size_t>();
      else if (k == "dev_weights") p.dev_weights = v.get<std::map<std::string, double>>();
      else throw ConfigError("train plan: unknown key '" + k + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid train plan: ") + e.what());
  }
  p.validate();
  return p;
}

TrainPlan ablate(const TrainPlan& plan, Ablation variant) {
  TrainPlan p = plan;
  switch (variant) {
    case Ablation::NoPrompt: p.prompting = false; break;
    case Ablation::FromScratch: p.from_scratch = true; break;
  }
  return p;
}

Ablation parse_ablation(std::string_view name) {
  if (name == "no_prompt") return Ablation::NoPrompt;
  if (name == "from_scratch") return Ablation::FromScratch;
  throw ConfigError("unknown ablation '" + std::string(name) + "' (expected no_prompt or from_scratch)");
}

bool improves(const std::optional<double>& best, double mean_bleu) { return !best || mean_bleu > *best; }

namespace {

ReframeOptions reframe_options(const TrainPlan& plan) {
  ReframeOptions ro;
  ro.format = plan.prompt_format;
  ro.prompting = plan.prompting;
  return ro;
}

const NamedDataset& find_dataset(const std::vector<NamedDataset>& sets, const std::string& name) {
  for (const auto& d : sets)
    if (d.name == name) return d;
  throw ConfigError("train plan names unknown dataset '" + name + "'");
}

}  // namespace

EvalResult evaluate_dev(ModelState<float>& state, const Vocabulary& v, const TrainPlan& plan,
                        const std::vector<NamedDataset>& dev) {
  EvalResult r;
  const ReframeOptions ro = reframe_options(plan);
  DecodeOptions opts;
  opts.beam = plan.eval_beam;
  opts.alpha = plan.eval_alpha;
  opts.prompting = plan.prompting;
  double total = 0, weight = 0;
  for (const auto& set : dev) {
    const std::size_t n = plan.dev_limit ? std::min(plan.dev_limit, set.records.size()) : set.records.size();
    if (n == 0) throw DimensionError("dev set '" + set.name + "' is empty");
    std::vector<UnifiedExample> sources;
    std::vector<std::vector<int>> prefixes;
    std::vector<std::string> refs;
    for (std::size_t i = 0; i < n; ++i) {
      const TaskRecord& rec = set.records[i];
      sources.push_back(reframe(rec, v, ro));
      prefixes.push_back(forced_prefix(v, target_prompt_id(rec, rec.task, v, ro), plan.prompting));
      refs.push_back(rec.target);
    }
    const auto hyps = decode_batch(state, v, std::span<const UnifiedExample>(sources),
                                   std::span<const std::vector<int>>(prefixes), opts);
    std::vector<std::string> texts;
    for (const auto& h : hyps) {
      try {
        texts.push_back(parse_output(h.ids, v, plan.prompting).text);
      } catch (const MalformedOutputError&) {
        texts.emplace_back();
      }
    }
    const double b = bleu(texts, refs);
    r.bleu.emplace_back(set.name, b);
    const auto w = plan.dev_weights.find(set.name);
    const double wt = w == plan.dev_weights.end() ? 1.0 : w->second;
    total += wt * b;
    weight += wt;
  }
  if (!(weight > 0)) throw ConfigError("dev weights sum to zero");
  r.mean_bleu = total / weight;
  return r;
}

namespace {

struct Cursor {
  int stage = 1;
  std::int64_t stage_step = 0;  // steps taken in the current stage
  std::int64_t step = 0;        // steps taken overall
  std::optional<double> best_mean;
  std::int64_t best_step = 0;

  json to_json() const {
    json j = {{"stage", stage}, {"stage_step", stage_step}, {"step", step}, {"best_step", best_step}};
    j["best_mean"] = best_mean ? json(*best_mean) : json(nullptr);
    return j;
  }
  static Cursor from_json(const json& j) {
    Cursor c;
    c.stage = j.at("stage").get<int>();
    c.stage_step = j.at("stage_step").get<std::int64_t>();
    c.step = j.at("step").get<std::int64_t>();
    c.best_step = j.at("best_step").get<std::int64_t>();
    if (!j.at("best_mean").is_null()) c.best_mean = j.at("best_mean").get<double>();
    return c;
  }
};

class Run {
 public:
  Run(const TrainPlan& plan, ModelState<float>& state, const Vocabulary& v, const TrainData& data,
      const TrainOptions& options)
      : plan_(plan), state_(state), v_(v), data_(data), opts_(options), dir_(options.out_dir) {}

  TrainResult execute() {
    plan_.validate();
    if (opts_.out_dir.empty()) throw ConfigError("training needs an output directory");
    check_data();
    std::filesystem::create_directories(dir_);
    Cursor cur;
    cur.stage = stage1_active() ? 1 : 2;
    const bool resuming = opts_.resume && std::filesystem::exists(path("last.ckpt"));
    if (resuming) {
      CheckpointExtra extra;
      state_ = load_checkpoint(path("last.ckpt"), &extra);
      try {
        cur = Cursor::from_json(json::parse(extra.json).at("trainer"));
      } catch (const json::exception& e) {
        throw FormatError(std::string("last.ckpt has no trainer cursor: ") + e.what());
      }
    }
    log_.open(path("train_log.jsonl"), resuming ? std::ios::app : std::ios::trunc);
    if (!log_) throw IoError("cannot write '" + path("train_log.jsonl") + "'");

    if (cur.stage == 1) {
      if (!run_stage(cur, plan_.stage1, dev_for_stage(1))) return finish(cur, false);
      const auto best = path("stage1_best.ckpt");
      if (std::filesystem::exists(best)) state_ = load_checkpoint(best);
      cur = Cursor{2, 0, cur.step, std::nullopt, 0};
      emit({{"event", "stage_start"}, {"stage", 2}, {"step", cur.step}, {"init", "stage1_best.ckpt"},
            {"init_update", state_.step}});
      save(path("last.ckpt"), cur, json::object());
    }
    const bool done = run_stage(cur, plan_.stage2, dev_for_stage(2));
    return finish(cur, done);
  }

 private:
  bool stage1_active() const { return !plan_.from_scratch && plan_.stage1.max_steps > 0; }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  void check_data() const {
    std::set<TaskKind> tasks;
    for (const auto& name : plan_.stage2.datasets) tasks.insert(find_dataset(data_.train, name).task);
    if (stage1_active())
      for (const auto& name : plan_.stage1.datasets)
        if (find_dataset(data_.train, name).task != TaskKind::SentMT)
          throw ConfigError("stage 1 trains on sentence-level data only; '" + name + "' is not SentMT");
    for (TaskKind t : tasks) {
      bool found = false;
      for (const auto& d : data_.dev) found = found || d.task == t;
      if (!found) throw ConfigError("no dev set for task " + std::string(unimt::to_string(t)));
    }
  }

  std::vector<NamedDataset> dev_for_stage(int stage) const {
    std::vector<NamedDataset> out;
    for (const auto& d : data_.dev)
      if (stage == 2 || d.task == TaskKind::SentMT) out.push_back(d);
    if (out.empty()) throw ConfigError("stage 1 needs a SentMT dev set");
    return out;
  }

  std::vector<std::vector<UnifiedExample>> reframed(const StagePlan& stage) const {
    const ReframeOptions ro = reframe_options(plan_);
    std::vector<std::vector<UnifiedExample>> sets;
    for (const auto& name : stage.datasets) {
      const auto& d = find_dataset(data_.train, name);
      if (d.records.empty()) throw ConfigError("training dataset '" + name + "' is empty");
      std::vector<UnifiedExample> xs;
      xs.reserve(d.records.size());
      for (const auto& r : d.records) xs.push_back(reframe(r, v_, ro));
      sets.push_back(std::move(xs));
    }
    return sets;
  }

  // Returns false when stopped before the stage budget was used up.
  bool run_stage(Cursor& cur, const StagePlan& stage, const std::vector<NamedDataset>& dev) {
    SamplerOptions so;
    so.policy.temperature = plan_.mix_temperature;
    so.token_budget = plan_.batch_tokens;
    so.seed = mix_seed(plan_.seed, static_cast<std::uint64_t>(cur.stage));
    so.pad_id = v_.pad_id();
    Sampler sampler(reframed(stage), so);
    sampler.skip_batches(static_cast<std::size_t>(cur.stage_step));
    emit({{"event", "stage"}, {"stage", cur.stage}, {"step", cur.step}, {"datasets", stage.datasets},
          {"max_steps", stage.max_steps}, {"resumed_at", cur.stage_step}});

    bool evaluated_last = false;
    while (cur.stage_step < stage.max_steps) {
      if (opts_.stop_after && cur.step >= *opts_.stop_after) {
        save(path("last.ckpt"), cur, json::object());
        return false;
      }
      const Batch batch = sampler.next_batch();
      const double lr = lr_schedule(state_.step + 1, plan_.warmup, state_.config.hidden_size, plan_.lr_scale);
      state_.params.zero_grad();
      double loss = 0;
      {
        Graph<float> g;
        Transformer<float> model(state_);
        auto r = model.forward(g, batch, RunMode{true, mix_seed(plan_.seed, static_cast<std::uint64_t>(cur.step))});
        loss = g.value(r.loss)(0, 0);
        g.backward(r.loss);
      }
      adam_step(state_, lr);
      ++cur.step;
      ++cur.stage_step;
      result_.losses.push_back(loss);
      emit({{"event", "step"}, {"stage", cur.stage}, {"step", cur.step}, {"loss", loss}, {"lr", lr},
            {"tokens", batch.real_target_tokens()}});
      evaluated_last = cur.stage_step % plan_.eval_every == 0;
      if (evaluated_last) eval_point(cur, dev);
    }
    if (!evaluated_last) eval_point(cur, dev);
    return true;
  }

  void eval_point(Cursor& cur, const std::vector<NamedDataset>& dev) {
    EvalResult r;
    try {
      r = evaluate_dev(state_, v_, plan_, dev);
    } catch (const std::exception& e) {
      r.skipped = true;
      r.error = e.what();
    }
    r.stage = cur.stage;
    r.step = cur.step;
    json per = json::object();
    for (const auto& [name, b] : r.bleu) per[name] = b;
    if (r.skipped) {
      emit({{"event", "eval"}, {"stage", cur.stage}, {"step", cur.step}, {"skipped", true}, {"error", r.error}});
    } else {
      const bool better = improves(cur.best_mean, r.mean_bleu);
      emit({{"event", "eval"}, {"stage", cur.stage}, {"step", cur.step}, {"bleu", per},
            {"mean_bleu", r.mean_bleu}, {"best", better}});
      if (better) {
        cur.best_mean = r.mean_bleu;
        cur.best_step = cur.step;
        save(path(cur.stage == 1 ? "stage1_best.ckpt" : "best.ckpt"), cur,
             {{"mean_bleu", r.mean_bleu}, {"bleu", per}});
      }
    }
    result_.evals.push_back(r);
    save(path("last.ckpt"), cur, json::object());
  }

  void save(const std::string& file, const Cursor& cur, json eval) {
    json extra;
    extra["trainer"] = cur.to_json();
    extra["plan"] = json::parse(plan_.to_json());
    extra["eval"] = std::move(eval);
    try {
      extra["provenance"] = json::parse(opts_.provenance);
    } catch (const json::exception&) {
      throw ConfigError("provenance must be a JSON object");
    }
    save_checkpoint(file, state_, CheckpointExtra{extra.dump()});
  }

  void emit(const json& event) {
    log_ << event.dump() << '\n';
    log_.flush();
    if (!log_) throw IoError("failed writing the training log");
  }

  TrainResult finish(const Cursor& cur, bool done) {
    result_.completed = done;
    if (cur.best_mean) {
      result_.best_checkpoint = path(cur.stage == 1 ? "stage1_best.ckpt" : "best.ckpt");
      result_.best_step = cur.best_step;
      result_.best_mean_bleu = *cur.best_mean;
    }
    return std::move(result_);
  }

  const TrainPlan& plan_;
  ModelState<float>& state_;
  const Vocabulary& v_;
  const TrainData& data_;
  const TrainOptions& opts_;
  std::filesystem::path dir_;
  std::ofstream log_;
  TrainResult result_;
};

}  // namespace

TrainResult run(const TrainPlan& plan, ModelState<float>& state, const Vocabulary& v, const TrainData& data,
                const TrainOptions& options) {
  return Run(plan, state, v, data, options).execute();
}

}  // namespace unimt
