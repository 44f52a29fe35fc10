#include "unimt/style.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "json.hpp"
#include "unimt/errors.hpp"
#include "unimt/sampler.hpp"
#include "unimt/tensor_file.hpp"

namespace unimt {

using nlohmann::json;

void TextCnnConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("text-CNN config: " + m); };
  if (vocab_size <= 0) fail("vocab_size must be positive");
  if (embed_dim <= 0 || filters_per_width <= 0) fail("embed_dim and filters_per_width must be positive");
  if (filter_widths.empty()) fail("at least one filter width is required");
  for (int w : filter_widths)
    if (w < 1) fail("filter widths must be at least 1");
  if (!(dropout >= 0 && dropout < 1)) fail("dropout must lie in [0, 1)");
  if (classes != 2) fail("only two classes are supported");
  if (max_len < 1) fail("max_len must be positive");
  if (pad_id < 0 || pad_id >= vocab_size) fail("pad_id outside the vocabulary");
}

std::string TextCnnConfig::to_json() const {
  json j;
  j["vocab_size"] = vocab_size;
  j["embed_dim"] = embed_dim;
  j["filter_widths"] = filter_widths;
  j["filters_per_width"] = filters_per_width;
  j["dropout"] = dropout;
  j["classes"] = classes;
  j["max_len"] = max_len;
  j["pad_id"] = pad_id;
  return j.dump();
}

TextCnnConfig TextCnnConfig::from_json(const std::string& text) {
  TextCnnConfig c;
  try {
    const json j = json::parse(text);
    if (!j.is_object()) throw ConfigError("text-CNN config must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& k = it.key();
      if (k == "vocab_size") c.vocab_size = it->get<int>();
      else if (k == "embed_dim") c.embed_dim = it->get<int>();
      else if (k == "filter_widths") c.filter_widths = it->get<std::vector<int>>();
      else if (k == "filters_per_width") c.filters_per_width = it->get<int>();
      else if (k == "dropout") c.dropout = it->get<double>();
      else if (k == "classes") c.classes = it->get<int>();
      else if (k == "max_len") c.max_len = it->get<int>();
      else if (k == "pad_id") c.pad_id = it->get<int>();
      else throw ConfigError("unknown text-CNN config key '" + k + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid text-CNN config: ") + e.what());
  }
  return c;
}

template <typename S>
void init_text_cnn(TextCnnState<S>& state, const TextCnnConfig& c) {
  c.validate();
  state.config = c;
  state.params = ParamSet<S>();
  auto& ps = state.params;
  ps.add("embed", c.vocab_size, c.embed_dim);
  for (int w : c.filter_widths) {
    ps.add("conv." + std::to_string(w) + ".w", w * c.embed_dim, c.filters_per_width);
    ps.add("conv." + std::to_string(w) + ".b", 1, c.filters_per_width);
  }
  const int pooled = c.filters_per_width * static_cast<int>(c.filter_widths.size());
  ps.add("out.w", pooled, c.classes);
  ps.add("out.b", 1, c.classes);
  state.adam_m.clear();
  state.adam_v.clear();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    state.adam_m.push_back(Mat<S>::Zero(ps[i].value.rows(), ps[i].value.cols()));
    state.adam_v.push_back(Mat<S>::Zero(ps[i].value.rows(), ps[i].value.cols()));
  }
  state.step = 0;
}

template <typename S>
void randomize(TextCnnState<S>& state, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < state.params.size(); ++i) {
    auto& p = state.params[i];
    auto& v = p.value;
    double limit = 0;
    if (p.name == "embed") limit = 0.1;
    else if (v.rows() > 1) limit = std::sqrt(6.0 / static_cast<double>(v.rows() + v.cols()));
    for (Eigen::Index k = 0; k < v.size(); ++k)
      v.data()[k] = static_cast<S>(limit * (2 * uniform01(rng) - 1));
  }
}

template <typename S>
TextCnn<S>::TextCnn(TextCnnState<S>& state) : state_(state) {}

template <typename S>
Var TextCnn<S>::logits(Graph<S>& g, const std::vector<std::vector<int>>& ids, const RunMode& mode) {
  const auto& c = state_.config;
  const int B = static_cast<int>(ids.size());
  if (B == 0) throw DimensionError("text-CNN needs at least one input");
  // Real tokens span [first, last] of each row after dropping pads and truncating.
  std::vector<std::pair<int, int>> span(static_cast<std::size_t>(B), {0, -1});
  int L = 1;
  for (int b = 0; b < B; ++b) {
    const auto& row = ids[static_cast<std::size_t>(b)];
    const int n = std::min(static_cast<int>(row.size()), c.max_len);
    L = std::max(L, n);
    for (int t = 0; t < n; ++t) {
      if (row[static_cast<std::size_t>(t)] == c.pad_id) continue;
      if (span[static_cast<std::size_t>(b)].second < 0) span[static_cast<std::size_t>(b)].first = t;
      span[static_cast<std::size_t>(b)].second = t;
    }
  }
  std::vector<int> flat(static_cast<std::size_t>(B) * L, -1);
  for (int b = 0; b < B; ++b) {
    const auto& row = ids[static_cast<std::size_t>(b)];
    const int n = std::min(static_cast<int>(row.size()), c.max_len);
    for (int t = 0; t < n; ++t) {
      const int id = row[static_cast<std::size_t>(t)];
      if (id == c.pad_id) continue;
      if (id < 0 || id >= c.vocab_size) throw RangeError("token id outside the classifier vocabulary", t);
      flat[static_cast<std::size_t>(b) * L + t] = id;
    }
  }
  Var x = g.embedding(g.param(state_.params.get("embed")), flat);

  std::vector<Var> pooled;
  for (int w : c.filter_widths) {
    const std::string pre = "conv." + std::to_string(w);
    Var windows = g.unfold(x, B, L, w);
    Var h = g.relu(g.linear(windows, g.param(state_.params.get(pre + ".w")), g.param(state_.params.get(pre + ".b"))));
    // Window s covers positions s-w+1..s; keep those touching a real token.
    std::vector<std::pair<int, int>> ranges;
    for (const auto& [first, last] : span)
      ranges.push_back(last < 0 ? std::pair{0, 0} : std::pair{first, last + w});
    pooled.push_back(g.max_pool(h, B, L + w - 1, ranges));
  }
  Var features = pooled.size() == 1 ? pooled[0] : g.concat_cols(pooled);
  if (mode.train) features = g.dropout(features, static_cast<S>(c.dropout), mode.seed);
  return g.linear(features, g.param(state_.params.get("out.w")), g.param(state_.params.get("out.b")));
}

template <typename S>
Var TextCnn<S>::loss(Graph<S>& g, const std::vector<std::vector<int>>& ids, const std::vector<int>& labels,
                     const RunMode& mode) {
  if (labels.size() != ids.size()) throw DimensionError("one label per input is required");
  for (int l : labels)
    if (l < 0 || l >= state_.config.classes) throw RangeError("class label out of range", 0);
  return g.cross_entropy(logits(g, ids, mode), labels, S(0), -1);
}

template <typename S>
Mat<double> TextCnn<S>::probabilities(const std::vector<std::vector<int>>& ids) {
  Graph<S> g(false);
  const Mat<S> lp = Graph<S>::log_softmax_rows(g.value(logits(g, ids, RunMode{})));
  return lp.template cast<double>().array().exp().matrix();
}

std::vector<int> style_tokens(const Vocabulary& v, const std::string& text, int max_len) {
  std::vector<int> ids = v.encode(text);
  if (static_cast<int>(ids.size()) > max_len) ids.resize(static_cast<std::size_t>(max_len));
  return ids;
}

StyleClassifier train_classifier(std::span<const std::string> pos, std::span<const std::string> neg,
                                 const TextCnnConfig& config, const Vocabulary& v,
                                 const StyleTrainOptions& options) {
  if (pos.size() < options.min_class_examples || neg.size() < options.min_class_examples)
    throw ConfigError("insufficient data: each style needs at least " + std::to_string(options.min_class_examples) +
                      " examples (got " + std::to_string(pos.size()) + " and " + std::to_string(neg.size()) + ")");
  if (!(options.holdout_fraction > 0 && options.holdout_fraction < 1))
    throw ConfigError("holdout_fraction must lie in (0, 1)");
  TextCnnConfig cfg = config;
  cfg.vocab_size = static_cast<int>(v.size());
  cfg.pad_id = v.pad_id();

  StyleClassifier out;
  init_text_cnn(out.state, cfg);
  randomize(out.state, options.seed);

  std::vector<std::pair<std::vector<int>, int>> data;
  for (const auto& t : pos) data.emplace_back(style_tokens(v, t, cfg.max_len), 1);
  for (const auto& t : neg) data.emplace_back(style_tokens(v, t, cfg.max_len), 0);
  std::mt19937_64 rng(options.seed);
  auto shuffle = [&](auto& items) {
    for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[uniform_below(rng, i)]);
  };
  shuffle(data);
  const auto held = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(options.holdout_fraction *
                                                                                     static_cast<double>(data.size()))));
  std::vector<std::pair<std::vector<int>, int>> heldout(data.end() - static_cast<std::ptrdiff_t>(held), data.end());
  data.resize(data.size() - held);

  TextCnn<float> net(out.state);
  const std::size_t bs = std::max<std::size_t>(1, options.batch_size);
  for (int epoch = 1; epoch <= options.max_epochs; ++epoch) {
    shuffle(data);
    double total = 0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < data.size(); start += bs) {
      const std::size_t end = std::min(data.size(), start + bs);
      std::vector<std::vector<int>> ids;
      std::vector<int> labels;
      for (std::size_t k = start; k < end; ++k) {
        ids.push_back(data[k].first);
        labels.push_back(data[k].second);
      }
      out.state.params.zero_grad();
      Graph<float> g;
      Var l = net.loss(g, ids, labels, RunMode{true, mix_seed(options.seed, static_cast<std::uint64_t>(out.state.step))});
      total += g.value(l)(0, 0);
      ++batches;
      g.backward(l);
      adam_update(out.state.params, out.state.adam_m, out.state.adam_v, out.state.step, options.lr);
    }
    out.epochs = epoch;
    if (batches > 0 && total / static_cast<double>(batches) < options.converged_loss) break;
  }

  std::vector<std::vector<int>> ids;
  for (const auto& [x, y] : heldout) ids.push_back(x);
  const Mat<double> p = net.probabilities(ids);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < heldout.size(); ++i) {
    const int label = p(static_cast<Eigen::Index>(i), 1) > p(static_cast<Eigen::Index>(i), 0) ? 1 : 0;
    correct += label == heldout[i].second;
  }
  out.heldout_size = heldout.size();
  out.heldout_accuracy = static_cast<double>(correct) / static_cast<double>(heldout.size());
  return out;
}

std::vector<StylePrediction> classify(TextCnnState<float>& state, const Vocabulary& v,
                                      std::span<const std::string> texts) {
  std::vector<StylePrediction> out;
  if (texts.empty()) return out;
  std::vector<std::vector<int>> ids;
  for (const auto& t : texts) ids.push_back(style_tokens(v, t, state.config.max_len));
  TextCnn<float> net(state);
  const Mat<double> p = net.probabilities(ids);
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    StylePrediction s;
    s.probs = {p(i, 0), p(i, 1)};
    s.label = p(i, 1) > p(i, 0) ? 1 : 0;
    s.probability = s.probs[static_cast<std::size_t>(s.label)];
    out.push_back(s);
  }
  return out;
}

namespace {
constexpr char kStyleMagic[] = "UNIMTCNN";
}

void save_classifier(const std::string& path, const StyleClassifier& c, std::string_view provenance_json) {
  TensorFile f;
  f.config_json = c.state.config.to_json();
  f.step = c.state.step;
  json extra;
  extra["heldout_accuracy"] = c.heldout_accuracy;
  extra["heldout_size"] = c.heldout_size;
  extra["epochs"] = c.epochs;
  try {
    extra["provenance"] = json::parse(provenance_json);
  } catch (const json::exception&) {
    throw ConfigError("classifier provenance must be JSON");
  }
  f.extra_json = extra.dump();
  for (std::size_t i = 0; i < c.state.params.size(); ++i)
    f.entries.push_back({c.state.params[i].name, c.state.params[i].value, c.state.adam_m[i], c.state.adam_v[i]});
  write_tensor_file(path, kStyleMagic, f);
}

StyleClassifier load_classifier(const std::string& path) {
  TensorFile f = read_tensor_file(path, kStyleMagic);
  StyleClassifier c;
  init_text_cnn(c.state, TextCnnConfig::from_json(f.config_json));
  c.state.step = f.step;
  if (f.entries.size() != c.state.params.size()) throw FormatError("classifier tensors do not match its config");
  for (std::size_t i = 0; i < f.entries.size(); ++i) {
    auto& p = c.state.params[i];
    auto& e = f.entries[i];
    if (e.name != p.name || e.value.rows() != p.value.rows() || e.value.cols() != p.value.cols())
      throw FormatError("classifier tensor '" + e.name + "' does not match its config");
    p.value = std::move(e.value);
    c.state.adam_m[i] = std::move(e.m);
    c.state.adam_v[i] = std::move(e.v);
  }
  try {
    const json extra = json::parse(f.extra_json);
    c.heldout_accuracy = extra.value("heldout_accuracy", 0.0);
    c.heldout_size = extra.value("heldout_size", std::size_t{0});
    c.epochs = extra.value("epochs", 0);
  } catch (const json::exception& e) {
    throw FormatError(std::string("classifier metadata is corrupt: ") + e.what());
  }
  return c;
}

template void init_text_cnn(TextCnnState<float>&, const TextCnnConfig&);
template void init_text_cnn(TextCnnState<double>&, const TextCnnConfig&);
template void randomize(TextCnnState<float>&, std::uint64_t);
template void randomize(TextCnnState<double>&, std::uint64_t);
template class TextCnn<float>;
template class TextCnn<double>;

}  // namespace unimt
