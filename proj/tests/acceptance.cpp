// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero when any fails. Pass criterion numbers to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <optional>
#include <random>
#include <regex>
#include <set>
#include <sstream>

#include <fmt/core.h>

#include "json.hpp"
#include "oracles/beam_enumeration.hpp"
#include "oracles/edit_graph.hpp"
#include "oracles/finite_difference.hpp"
#include "oracles/ngram_bruteforce.hpp"
#include "support/model_fixtures.hpp"
#include "support/toy_tasks.hpp"
#include "unimt/cli.hpp"
#include "unimt/metrics.hpp"
#include "unimt/style.hpp"

using namespace unimt;
namespace fs = std::filesystem;
using Texts = std::vector<std::string>;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int number;
  std::string title;
  std::function<Outcome()> run;
};

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("unimt_acceptance_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string random_sentence(std::mt19937_64& rng, const Texts& words, int min_len, int max_len) {
  std::uniform_int_distribution<int> len(min_len, max_len);
  std::uniform_int_distribution<std::size_t> pick(0, words.size() - 1);
  std::string s;
  for (int i = len(rng); i > 0; --i) {
    if (!s.empty()) s += ' ';
    s += words[pick(rng)];
  }
  return s;
}

// ---------------------------------------------------------------------------
// 1 and 2: prompt-conditioned toy tasks

struct ToyRun {
  std::map<std::string, double> accuracy;
  double mean = 0;
  std::int64_t steps = 0;
  double seconds = 0;
  std::string best_checkpoint;
};

TrainPlan toy_plan() {
  TrainPlan p;
  p.stage1 = {{"copy.train"}, 400};
  p.stage2 = {{"copy.train", "reverse.train", "shift.train"}, 3000};
  p.eval_every = 500;
  p.batch_tokens = 1024;
  p.warmup = 1000;
  p.lr_scale = 0.5;
  p.eval_beam = 1;
  p.dev_limit = 100;
  p.seed = 7;
  return p;
}

const toy::Suite& toy_suite() {
  static const toy::Suite s = toy::suite(5000, 500, 500, 2024);
  return s;
}

ToyRun train_toy(const TrainPlan& plan, const std::string& name) {
  const Vocabulary v = toy::vocab();
  ModelState<float> state;
  init_state(state, toy::mini_config(v));
  randomize(state, 3);
  const auto dir = scratch(name);
  const auto t0 = std::chrono::steady_clock::now();
  const TrainResult r = run(plan, state, v, toy_suite().data, TrainOptions{dir.string()});
  ToyRun out;
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out.steps = static_cast<std::int64_t>(r.losses.size());
  out.best_checkpoint = r.best_checkpoint;
  ModelState<float> best = load_checkpoint(r.best_checkpoint);
  for (const auto& set : toy_suite().test) {
    out.accuracy[set.name] = 100 * toy::accuracy(best, v, set, plan.prompting);
    out.mean += out.accuracy[set.name] / static_cast<double>(toy_suite().test.size());
  }
  return out;
}

std::string describe(const ToyRun& r) {
  std::string s;
  for (const auto& [name, acc] : r.accuracy) s += fmt::format("{} {:.1f}%, ", name, acc);
  return s + fmt::format("mean {:.1f}% after {} steps in {:.0f} s", r.mean, r.steps, r.seconds);
}

std::optional<ToyRun> g_prompted;

Outcome criterion1() {
  g_prompted = train_toy(toy_plan(), "prompted");
  const ToyRun& r = *g_prompted;
  bool pass = r.steps <= 20000 && r.seconds <= 1800;
  for (const auto& [name, acc] : r.accuracy) pass = pass && acc >= 95.0;

  const Vocabulary v = toy::vocab();
  ModelState<float> best = load_checkpoint(r.best_checkpoint);
  const std::string symbols = "qRaXbM";
  const std::vector<TaskRecord> input = {toy::record(TaskKind::SentMT, symbols)};
  DecodeOptions d;
  d.beam = 1;
  const auto fan = fan_out_all(best, v, std::span<const TaskRecord>(input),
                               std::span<const TaskKind>(toy::tasks()), d, ReframeOptions{});
  std::set<std::string> distinct;
  bool correct = fan.size() == 1 && fan[0].size() == 3;
  for (const auto& e : fan.at(0)) {
    distinct.insert(e.text);
    correct = correct && !e.anomalous && e.text == toy::join(toy::apply(e.prompt, symbols));
  }
  correct = correct && distinct.size() == 3;
  return {pass && correct, describe(r) + fmt::format("; fan-out {} distinct, {}", distinct.size(),
                                                     correct ? "all correct" : "not all correct")};
}

Outcome criterion2() {
  if (!g_prompted) g_prompted = train_toy(toy_plan(), "prompted");
  const ToyRun ablated = train_toy(ablate(toy_plan(), Ablation::NoPrompt), "no_prompt");
  const double gap = g_prompted->mean - ablated.mean;
  return {gap >= 20.0, "without prompts: " + describe(ablated) + fmt::format("; gap {:.1f} points", gap)};
}

// ---------------------------------------------------------------------------
// 3: gradients

double cnn_loss(TextCnnState<double>& s, const std::vector<std::vector<int>>& ids, const std::vector<int>& labels,
                const RunMode& mode) {
  Graph<double> g(false);
  TextCnn<double> net(s);
  return g.value(net.loss(g, ids, labels, mode))(0, 0);
}

Outcome criterion3() {
  ModelState<double> state;
  init_state(state, fixtures::tiny_config());
  randomize(state, 5);
  const Batch batch = fixtures::random_batch(state.config, 11);
  double worst = 0;
  int checked = 0;
  bool pass = true;
  for (const auto& r : fixtures::check_model_gradients(state, batch, RunMode{true, 1234},
                                                       fixtures::gradient_check_parameters(), 20, 77)) {
    worst = std::max(worst, r.worst);
    checked += r.checked;
    pass = pass && r.checked >= 20;
  }

  std::vector<std::string> corpus = {"the day was moreover", "yeah lol", "we then kinda went"};
  const Vocabulary v = Vocabulary::build(corpus, 300);
  TextCnnConfig c;
  c.vocab_size = static_cast<int>(v.size());
  c.pad_id = v.pad_id();
  c.embed_dim = 12;
  c.filters_per_width = 6;
  c.filter_widths = {2, 3};
  c.dropout = 0.3;
  TextCnnState<double> s;
  init_text_cnn(s, c);
  randomize(s, 3);
  for (std::size_t i = 0; i < s.params.size(); ++i)
    if (s.params[i].name.ends_with(".b")) s.params[i].value.setConstant(0.05);
  std::vector<std::vector<int>> ids;
  for (const auto& t : corpus) ids.push_back(style_tokens(v, t, 256));
  const std::vector<int> labels = {1, 0, 1};
  const RunMode mode{true, 77};
  s.params.zero_grad();
  {
    Graph<double> g;
    TextCnn<double> net(s);
    g.backward(net.loss(g, ids, labels, mode));
  }
  std::mt19937_64 rng(5);
  for (std::size_t i = 0; i < s.params.size(); ++i) {
    auto& p = s.params[i];
    for (int k = 0; k < 20; ++k) {
      const Eigen::Index r = p.name == "embed" ? ids[0][rng() % ids[0].size()]
                                               : static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(p.value.rows()));
      const auto col = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(p.value.cols()));
      const double numeric =
          oracle::central_difference(p.value(r, col), [&] { return cnn_loss(s, ids, labels, mode); }, 1e-6);
      worst = std::max(worst, oracle::relative_error(p.grad(r, col), numeric));
      ++checked;
    }
  }
  pass = pass && worst <= 1e-3;
  return {pass, fmt::format("{} scalars over {} transformer and {} text-CNN tensors, worst relative error {:.2e}",
                            checked, fixtures::gradient_check_parameters().size(), s.params.size(), worst)};
}

// ---------------------------------------------------------------------------
// 4: reframing

const std::string kSource = "以上 就是 出门 的 理由 。";
const std::string kPinyin = "yǐshàng jiùshì chūmén de lǐyóu";
const std::string kTarget = "All these were the reasons to go out.";
const Texts kZhContext = {"打 起 点 精神 ， 对 狗狗纳纳 说 ： 妈妈 带 你 出门 。",
                          "细细 地 写 了 出门 要 办 的 几 宗 事情 ...",
                          "取 西服 ， 买 营养 粒 ， 付款 ， 买 生 鱼片 ， 纳纳 的 小 零食 。"};
const Texts kPinyinContext = {"dǎ qǐ diǎn jīngshén, duì gǒugǒunànà shuō: māmā dài nǐ chūmén.",
                              "xìxì dì xiě le chūmén yào bàn de jǐ zōng shìqing...",
                              "qǔ xīfú, mǎi yíngyǎng lì, fùkuǎn, mǎi shēng yúpiàn, nànà de xiǎo língshí."};

// One space on each side of every control surface; the printed Chinese rows
// are inconsistent about spacing before <eos> and <sep>.
std::string canonical_spacing(std::string s) {
  static const std::regex controls(R"((<[^<>]+>|\bNULL\b))");
  static const std::regex spaces(R"(\s+)");
  s = std::regex_replace(s, controls, " $1 ");
  s = std::regex_replace(s, spaces, " ");
  const auto b = s.find_first_not_of(' ');
  const auto e = s.find_last_not_of(' ');
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

Outcome criterion4() {
  Texts corpus = {kSource, kPinyin, kTarget};
  corpus.insert(corpus.end(), kZhContext.begin(), kZhContext.end());
  corpus.insert(corpus.end(), kPinyinContext.begin(), kPinyinContext.end());
  const Vocabulary v = Vocabulary::build(corpus, 600);
  auto record = [](TaskKind t, const std::string& src, const Texts& ctx) {
    TaskRecord r;
    r.task = t;
    r.source = src;
    r.target = kTarget;
    r.context_segments = ctx;
    return r;
  };
  auto target_text = [&](const TaskRecord& r) {
    auto ids = reframe_target(r, v, true);
    ids.pop_back();
    return v.decode(ids);
  };
  int rows = 0, exact = 0;
  auto expect = [&](const std::string& got, const std::string& want) {
    ++rows;
    exact += got == want;
  };
  const auto sent = record(TaskKind::SentMT, kSource, {});
  expect(v.decode(reframe_source(sent, v)), "<SentMT> <bos> 以上 就是 出门 的 理由 。 <eos> <context> NULL");
  expect(target_text(sent), "<SentMT>: All these were the reasons to go out.");
  const auto zh = record(TaskKind::DocMT, kSource, kZhContext);
  expect(v.decode(reframe_source(zh, v)),
         canonical_spacing("<DocMT> <bos> 以上 就是 出门 的 理由 。 <eos> <context> 打 起 点 精神 ， 对 狗狗纳纳 "
                           "说 ： 妈妈 带 你 出门 。<sep>\n细细 地 写 了 出门 要 办 的 几 宗 事情 ... <sep> 取 西服 ， "
                           "买 营养 粒 ， 付款 ， 买 生 鱼片 ， 纳纳 的 小 零食 。"));
  expect(target_text(zh), "<DocMT>: All these were the reasons to go out.");
  expect(v.decode(reframe_source(record(TaskKind::DocMT, kPinyin, kPinyinContext), v)),
         "<DocMT> <bos> yǐshàng jiùshì chūmén de lǐyóu <eos> <context> dǎ qǐ diǎn jīngshén, duì "
         "gǒugǒunànà shuō: māmā dài nǐ chūmén. <sep> xìxì dì xiě le chūmén yào bàn de jǐ zōng "
         "shìqing... <sep> qǔ xīfú, mǎi yíngyǎng lì, fùkuǎn, mǎi shēng yúpiàn, nànà de xiǎo língshí.");

  const Texts words = {"a", "the", "以上", "。", "NULL", "<eos>", ":", "x:y", "<SentMT>", "ǐ", "Nana,", "...", "<sep>"};
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> nctx(0, 5), task(0, 6), fmt_pick(0, 2);
  int failures = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    TaskRecord r;
    r.task = static_cast<TaskKind>(task(rng));
    r.source = random_sentence(rng, words, 1, 10);
    r.target = random_sentence(rng, words, 1, 10);
    for (int i = nctx(rng); i > 0; --i) r.context_segments.push_back(random_sentence(rng, words, 1, 10));
    ReframeOptions opts;
    opts.format = static_cast<PromptFormat>(fmt_pick(rng));
    const auto parsed = parse_output(reframe_target(r, v, true, opts), v, true);
    failures += parsed.task != r.task || parsed.text != r.target;
  }
  return {exact == rows && failures == 0,
          fmt::format("{}/{} table rows exact; {} round-trip failures in 10000 records", exact, rows, failures)};
}

// ---------------------------------------------------------------------------
// 5: metrics

std::string spaced(const std::string& letters) {
  std::string s;
  for (char c : letters) {
    if (!s.empty()) s += ' ';
    s += c;
  }
  return s;
}

Outcome criterion5() {
  std::mt19937_64 rng(123);
  const Texts words = {"a", "b", "c", "d", "e", "f"};
  double bleu_gap = 0;
  for (int corpus = 0; corpus < 50; ++corpus) {
    Texts hyps, refs;
    for (int i = 1 + static_cast<int>(rng() % 5); i > 0; --i) {
      hyps.push_back(random_sentence(rng, words, 0, 9));
      refs.push_back(random_sentence(rng, words, 1, 9));
    }
    bleu_gap = std::max(bleu_gap, std::abs(bleu(hyps, refs) - oracle::bleu(hyps, refs)));
  }

  const oracle::EditGraph graph("abc", 6);
  const auto& nodes = graph.nodes();
  std::size_t ter_pairs = 0, ter_mismatches = 0;
  for (const auto& ref : nodes) {
    const auto dist = graph.distances(ref);
    const std::string r = spaced(ref);
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      const TerCounts c = ter_counts(spaced(nodes[i]), r, TerOptions{false, true});
      ter_mismatches += c.edits != static_cast<std::size_t>(dist[i]);
      ++ter_pairs;
    }
  }

  const Texts dwords = {"x", "y", "z", "w", "v"};
  int dist_mismatches = 0;
  for (int i = 0; i < 100; ++i) {
    Texts texts;
    for (int k = 1 + static_cast<int>(rng() % 4); k > 0; --k) texts.push_back(random_sentence(rng, dwords, 0, 10));
    for (std::size_t n : {1, 2}) dist_mismatches += std::abs(dist_n(texts, n) - oracle::dist(texts, n)) > 1e-12;
  }

  // Hand-computed chrF2: P = R = (2/3 + 1/2 + 0) / 3; P = (2/3 + 1/2) / 2 with R = 1; disjoint.
  const double chrf_gap = std::max({std::abs(chrf2(Texts{"abc"}, Texts{"abd"}) - 100.0 * 7 / 18),
                                    std::abs(chrf2(Texts{"aab"}, Texts{"ab"}) - 87.5),
                                    std::abs(chrf2(Texts{"abc"}, Texts{"xyz"}) - 0.0)});
  const bool pass = bleu_gap <= 1e-6 && ter_mismatches == 0 && dist_mismatches == 0 && chrf_gap <= 1e-9;
  return {pass, fmt::format("BLEU max gap {:.1e} on 50 corpora; TER {} mismatches in {} pairs; Dist {} mismatches; "
                            "chrF2 max gap {:.1e}",
                            bleu_gap, ter_mismatches, ter_pairs, dist_mismatches, chrf_gap)};
}

// ---------------------------------------------------------------------------
// 6: schedule and optimizer

Outcome criterion6() {
  const double lr = lr_schedule(4000, 4000, 512, 1.0);
  const double closed = std::pow(512.0, -0.5) * std::pow(4000.0, -0.5);
  const bool lr_ok = std::abs(lr - 6.988e-4) <= 1e-7 && std::abs(lr - closed) <= 1e-12;

  ModelState<double> s;
  init_state(s, fixtures::tiny_config());
  randomize(s, 5);
  std::vector<Mat<double>> before;
  for (std::size_t i = 0; i < s.params.size(); ++i) before.push_back(s.params[i].value);
  s.params.zero_grad();
  adam_step(s, 1e-3);
  bool noop = true;
  for (std::size_t i = 0; i < s.params.size(); ++i) noop = noop && (s.params[i].value.array() == before[i].array()).all();

  // First step moves each entry by -lr * g / (|g| + eps) with bias-corrected moments.
  ModelState<double> fresh;
  init_state(fresh, fixtures::tiny_config());
  randomize(fresh, 5);
  auto& fw = fresh.params.get("softmax.w");
  const Mat<double> w0 = fw.value;
  fresh.params.zero_grad();
  fw.grad(0, 0) = 0.37;
  fw.grad(1, 2) = -2.5;
  const double step_lr = 1e-2;
  adam_step(fresh, step_lr);
  const double gap = std::max(std::abs((fw.value(0, 0) - w0(0, 0)) + step_lr * 0.37 / (0.37 + 1e-9)),
                              std::abs((fw.value(1, 2) - w0(1, 2)) - step_lr * 2.5 / (2.5 + 1e-9)));
  const bool sign_ok = gap <= 1e-6 && fw.value(0, 0) < w0(0, 0) && fw.value(1, 2) > w0(1, 2);
  return {lr_ok && noop && sign_ok,
          fmt::format("lr(4000) = {:.6e}; zero-gradient step {}; first-step gap {:.1e}", lr,
                      noop ? "is a no-op" : "changed parameters", gap)};
}

// ---------------------------------------------------------------------------
// 7: sampler

Outcome criterion7() {
  auto dataset = [](int first, std::size_t n) {
    std::vector<UnifiedExample> out;
    for (std::size_t i = 0; i < n; ++i) {
      UnifiedExample ex;
      ex.source_ids = {first + static_cast<int>(i)};
      ex.target_ids = {7, 7};
      out.push_back(ex);
    }
    return out;
  };
  const std::vector<std::vector<UnifiedExample>> data = {dataset(0, 900), dataset(5000, 100)};
  const std::size_t sizes_raw[] = {900, 100};
  std::string detail;
  bool pass = true;
  for (double temperature : {1.0, 100.0}) {
    const double a = std::pow(900.0, 1 / temperature), b = std::pow(100.0, 1 / temperature);
    const double expected = a / (a + b);
    SamplerOptions opts;
    opts.policy.temperature = temperature;
    opts.seed = 17;
    Sampler s(data, opts);
    const int n = 100000;
    int first = 0;
    for (int i = 0; i < n; ++i) first += s.draw_dataset() == 0;
    const double sigma = std::sqrt(n * expected * (1 - expected));
    const double z = (first - n * expected) / sigma;
    MixPolicy policy;
    policy.temperature = temperature;
    const auto probs = dataset_probabilities(std::span<const std::size_t>(sizes_raw), policy);
    pass = pass && std::abs(z) <= 3 && std::abs(probs[0] - expected) <= 1e-12;
    detail += fmt::format("T={}: expected {:.4f}, observed {:.4f} (z {:+.2f}); ", temperature, expected,
                          first / double(n), z);
  }
  pass = pass && std::abs(std::pow(900.0, 0.01) / (std::pow(900.0, 0.01) + std::pow(100.0, 0.01)) - 0.5055) <= 5e-5;
  return {pass, detail.substr(0, detail.size() - 2)};
}

// ---------------------------------------------------------------------------
// 8: beam search

using Table = std::map<std::vector<int>, std::vector<double>>;

Table random_table(std::mt19937_64& rng, int V, std::size_t depth) {
  Table t;
  std::uniform_real_distribution<double> u(0.05, 1.0);
  std::vector<std::vector<int>> frontier = {{}};
  for (std::size_t d = 0; d <= depth; ++d) {
    std::vector<std::vector<int>> next;
    for (const auto& g : frontier) {
      std::vector<double> p(static_cast<std::size_t>(V));
      double z = 0;
      for (auto& x : p) z += x = u(rng);
      for (auto& x : p) x /= z;
      t[g] = p;
      for (int tok = 1; tok < V; ++tok) {
        auto h = g;
        h.push_back(tok);
        next.push_back(h);
      }
    }
    frontier = std::move(next);
  }
  return t;
}

Outcome criterion8() {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> alpha_dist(0.0, 1.5);
  int agree = 0;
  for (int inst = 0; inst < 20; ++inst) {
    // Even instances: {eos, a} up to four tokens. Odd: three tokens up to two.
    const bool binary = inst % 2 == 0;
    const int V = binary ? 2 : 3;
    const int beam = binary ? 2 + inst % 4 / 2 : 3;
    const std::vector<int> prefix = inst % 3 == 0 ? std::vector<int>{} : std::vector<int>{7};
    const std::size_t max_len = prefix.size() + (binary ? 4 : 2);
    const Table t = random_table(rng, V, max_len);
    const double alpha = alpha_dist(rng);
    auto probs = [&](const std::vector<int>& g) { return t.at(g); };
    StepFunction step = [&](const std::vector<BeamQuery>& qs) {
      Eigen::MatrixXd out(static_cast<Eigen::Index>(qs.size()), V);
      for (std::size_t i = 0; i < qs.size(); ++i) {
        const std::vector<int> gen(qs[i].ids.begin() + static_cast<std::ptrdiff_t>(prefix.size()), qs[i].ids.end());
        const auto& p = t.at(gen);
        for (int k = 0; k < V; ++k) out(static_cast<Eigen::Index>(i), k) = std::log(p[static_cast<std::size_t>(k)]);
      }
      return out;
    };
    const auto want = oracle::enumerate(probs, prefix, max_len, 0, alpha);
    const auto got = beam_search(step, BeamRequest{prefix, max_len}, 0, beam, alpha);
    agree += got.ids == want.ids && std::abs(got.normalized_score - want.normalized) <= 1e-9;
  }
  return {agree == 20, fmt::format("{}/20 instances match exhaustive enumeration", agree)};
}

// ---------------------------------------------------------------------------
// 9: style classifier

const Texts kShared = {"the", "a", "day", "was", "it", "we", "and", "then"};
const Texts kFormal = {"moreover", "therefore", "consequently", "furthermore"};
const Texts kCasual = {"gonna", "yeah", "kinda", "lol"};

Texts styled(std::mt19937_64& rng, const Texts& markers, int n) {
  Texts out;
  for (int i = 0; i < n; ++i)
    out.push_back(random_sentence(rng, kShared, 2, 6) + ' ' + markers[rng() % markers.size()] + ' ' +
                  random_sentence(rng, kShared, 1, 3));
  return out;
}

Outcome criterion9() {
  Texts corpus = kShared;
  corpus.insert(corpus.end(), kFormal.begin(), kFormal.end());
  corpus.insert(corpus.end(), kCasual.begin(), kCasual.end());
  const Vocabulary v = Vocabulary::build(corpus, 300);
  TextCnnConfig c;
  c.vocab_size = static_cast<int>(v.size());
  c.pad_id = v.pad_id();
  c.embed_dim = 12;
  c.filters_per_width = 6;
  c.filter_widths = {2, 3};
  c.dropout = 0.3;
  std::mt19937_64 rng(21);
  const Texts formal = styled(rng, kFormal, 500), casual = styled(rng, kCasual, 500);
  StyleTrainOptions opts;
  opts.max_epochs = 15;
  StyleClassifier model = train_classifier(formal, casual, c, v, opts);

  TextCnn<float> net(model.state);
  double worst = 0;
  for (int i = 0; i < 100; ++i) {
    const auto ids = style_tokens(v, styled(rng, i % 2 ? kFormal : kCasual, 1)[0], 256);
    auto padded = ids;
    padded.insert(padded.begin(), static_cast<std::size_t>(1 + rng() % 7), v.pad_id());
    const Mat<double> a = net.probabilities({ids});
    const Mat<double> b = net.probabilities({padded, ids});
    worst = std::max({worst, std::abs(a(0, 1) - b(0, 1)), std::abs(a(0, 1) - b(1, 1))});
  }
  return {model.heldout_accuracy >= 0.99 && worst <= 1e-6,
          fmt::format("held-out accuracy {:.3f} on {} texts; largest shift difference {:.1e} over 100 inputs",
                      model.heldout_accuracy, model.heldout_size, worst)};
}

// ---------------------------------------------------------------------------
// 10: determinism of the CLI pipeline

void pipeline(const fs::path& dir) {
  const toy::Suite s = toy::suite(200, 10, 10, 5);
  std::vector<DatasetManifest> manifest;
  auto add = [&](const NamedDataset& d, Split split) {
    const std::string file = d.name + ".jsonl";
    write_records((dir / file).string(), d.records);
    manifest.push_back(DatasetManifest{d.name, d.task, split, file, d.records.size(), "en", "en"});
  };
  for (const auto& d : s.data.train) add(d, Split::Train);
  for (const auto& d : s.data.dev) add(d, Split::Dev);
  for (const auto& d : s.test) add(d, Split::Test);
  write_manifest((dir / "manifest.json").string(), manifest);
  std::ofstream(dir / "plan.json")
      << R"({"stage1": {"datasets": ["copy.train"], "max_steps": 6}, "stage2": {"datasets": ["copy.train", )"
         R"("reverse.train", "shift.train"], "max_steps": 8}, "eval_every": 4, "batch_tokens": 300, "warmup": 10, )"
         R"("eval_beam": 2, "dev_limit": 5})";
  std::ofstream(dir / "model.json") << R"({"hidden_size": 32, "filter_size": 64, "encoder_layers": 1, )"
                                       R"("decoder_layers": 1, "attention_heads": 4, "context_feature_dim": 8})";

  const std::vector<std::vector<std::string>> steps = {
      {"vocab", "--in", "copy.train.jsonl", "--in", "reverse.train.jsonl", "--in", "shift.train.jsonl", "--size",
       "400", "--out", "vocab.json"},
      {"train", "--plan", "plan.json", "--manifest", "manifest.json", "--vocab", "vocab.json", "--model-config",
       "model.json", "--seed", "11", "--out", "run"},
      {"translate", "--model", "run/best.ckpt", "--vocab", "vocab.json", "--in", "shift.test.jsonl",
       "--beam", "3", "--out", "translations.jsonl"},
      {"evaluate", "--hyp", "translations.jsonl", "--ref", "shift.test.jsonl", "--metric", "bleu,chrf2,ter,dist",
       "--out", "report.json"},
  };
  const fs::path cwd = fs::current_path();
  fs::current_path(dir);
  for (const auto& args : steps) {
    std::ostringstream out, err;
    const int code = cli::dispatch(args, out, err);
    if (code != 0) {
      fs::current_path(cwd);
      throw Error(args[0] + " failed: " + err.str());
    }
  }
  fs::current_path(cwd);
}

Outcome criterion10() {
  const fs::path a = scratch("pipeline_a"), b = scratch("pipeline_b");
  pipeline(a);
  pipeline(b);
  const std::vector<std::string> artifacts = {"vocab.json",       "run/best.ckpt",   "run/last.ckpt",
                                              "run/stage1_best.ckpt", "translations.jsonl", "report.json"};
  std::size_t same = 0;
  std::string differing;
  for (const auto& f : artifacts) {
    const std::string x = slurp(a / f), y = slurp(b / f);
    if (!x.empty() && x == y) {
      ++same;
    } else {
      differing += " " + f;
    }
  }
  fs::remove_all(a);
  fs::remove_all(b);
  return {same == artifacts.size(),
          fmt::format("{}/{} artifacts byte-identical across two runs{}", same, artifacts.size(),
                      differing.empty() ? "" : "; differing:" + differing)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all = {
      {1, "prompt-conditioned toy tasks", criterion1},
      {2, "no-prompt ablation degrades accuracy", criterion2},
      {3, "analytic gradients", criterion3},
      {4, "reframing byte-exactness", criterion4},
      {5, "metric oracles", criterion5},
      {6, "schedule and optimizer algebra", criterion6},
      {7, "sampler statistics", criterion7},
      {8, "beam search oracle", criterion8},
      {9, "style classifier", criterion9},
      {10, "pipeline determinism", criterion10},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::stoi(argv[i]));
  int failed = 0;
  for (const auto& c : all) {
    if (!selected.empty() && !selected.count(c.number)) continue;
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.pass;
    std::cout << fmt::format("criterion {:>2} {}: {} ({}) [{:.1f} s]", c.number, o.pass ? "PASS" : "FAIL", c.title,
                             o.detail, secs)
              << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
