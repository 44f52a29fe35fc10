#include "unimt/model.hpp"

#include <cmath>
#include <random>

#include "json.hpp"
#include "unimt/errors.hpp"
#include "unimt/tensor_file.hpp"

namespace unimt {

using nlohmann::json;

// ---------------------------------------------------------------- config

ModelConfig ModelConfig::base(int vocab_size) {
  ModelConfig c;
  c.vocab_size = vocab_size;
  return c;
}

ModelConfig ModelConfig::big(int vocab_size) {
  ModelConfig c;
  c.vocab_size = vocab_size;
  c.hidden_size = 1024;
  c.filter_size = 4096;
  c.attention_heads = 16;
  c.residual_dropout = 0.3;
  return c;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
  if (vocab_size <= 0) fail("vocab_size must be positive");
  if (hidden_size <= 0 || filter_size <= 0) fail("hidden_size and filter_size must be positive");
  if (attention_heads <= 0 || hidden_size % attention_heads != 0)
    fail("hidden_size must be divisible by attention_heads");
  if (encoder_layers < 0 || decoder_layers < 1) fail("layer counts out of range");
  for (double d : {residual_dropout, attention_dropout, activation_dropout})
    if (!(d >= 0 && d < 1)) fail("dropout rates must lie in [0, 1)");
  if (!(label_smoothing >= 0 && label_smoothing < 1)) fail("label_smoothing must lie in [0, 1)");
  if (layer_norm_style != "postnorm") fail("only postnorm layer normalization is implemented");
  if (position_encoding != "relative") fail("only relative position encoding is implemented");
  if (share_softmax_weights) fail("tied softmax weights are not supported");
  if (relative_clip < 0) fail("relative_clip must be nonnegative");
  if (context_feature_dim <= 0) fail("context_feature_dim must be positive");
  if (pad_id < 0 || pad_id >= vocab_size || bos_id < 0 || bos_id >= vocab_size)
    fail("pad_id/bos_id outside the vocabulary");
}

std::string ModelConfig::to_json() const {
  json j;
  j["vocab_size"] = vocab_size;
  j["hidden_size"] = hidden_size;
  j["filter_size"] = filter_size;
  j["encoder_layers"] = encoder_layers;
  j["decoder_layers"] = decoder_layers;
  j["attention_heads"] = attention_heads;
  j["residual_dropout"] = residual_dropout;
  j["attention_dropout"] = attention_dropout;
  j["activation_dropout"] = activation_dropout;
  j["label_smoothing"] = label_smoothing;
  j["layer_norm_style"] = layer_norm_style;
  j["position_encoding"] = position_encoding;
  j["share_embeddings"] = share_embeddings;
  j["share_softmax_weights"] = share_softmax_weights;
  j["relative_clip"] = relative_clip;
  j["context_feature_dim"] = context_feature_dim;
  j["pad_id"] = pad_id;
  j["bos_id"] = bos_id;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  ModelConfig c;
  if (auto it = j.find("preset"); it != j.end()) {
    const std::string preset = it->get<std::string>();
    if (preset == "base") c = base(0);
    else if (preset == "big") c = big(0);
    else throw ConfigError("unknown model preset '" + preset + "'");
  }
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& k = it.key();
      const json& v = it.value();
      if (k == "preset") continue;
      else if (k == "vocab_size") c.vocab_size = v.get<int>();
      else if (k == "hidden_size") c.hidden_size = v.get<int>();
      else if (k == "filter_size") c.filter_size = v.get<int>();
      else if (k == "encoder_layers") c.encoder_layers = v.get<int>();
      else if (k == "decoder_layers") c.decoder_layers = v.get<int>();
      else if (k == "attention_heads") c.attention_heads = v.get<int>();
      else if (k == "residual_dropout") c.residual_dropout = v.get<double>();
      else if (k == "attention_dropout") c.attention_dropout = v.get<double>();
      else if (k == "activation_dropout") c.activation_dropout = v.get<double>();
      else if (k == "label_smoothing") c.label_smoothing = v.get<double>();
      else if (k == "layer_norm_style") c.layer_norm_style = v.get<std::string>();
      else if (k == "position_encoding") c.position_encoding = v.get<std::string>();
      else if (k == "share_embeddings") c.share_embeddings = v.get<bool>();
      else if (k == "share_softmax_weights") c.share_softmax_weights = v.get<bool>();
      else if (k == "relative_clip") c.relative_clip = v.get<int>();
      else if (k == "context_feature_dim") c.context_feature_dim = v.get<int>();
      else if (k == "pad_id") c.pad_id = v.get<int>();
      else if (k == "bos_id") c.bos_id = v.get<int>();
      else throw ConfigError("unknown model config key '" + k + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config has a mistyped value: ") + e.what());
  }
  return c;
}

std::size_t parameter_count(const ModelConfig& c) {
  const std::size_t d = c.hidden_size, f = c.filter_size, V = c.vocab_size;
  const std::size_t dh = d / c.attention_heads, R = 2 * c.relative_clip + 1;
  const std::size_t attn = 4 * (d * d + d);
  const std::size_t rel = 2 * R * dh;
  const std::size_t ln = 2 * d;
  const std::size_t ffn = d * f + f + f * d + d;
  const std::size_t enc = attn + rel + 2 * ln + ffn;
  const std::size_t dec = 2 * attn + rel + 3 * ln + ffn;
  const std::size_t embeddings = V * d * (c.share_embeddings ? 1 : 2);
  const std::size_t softmax = d * V;
  const std::size_t context = c.context_feature_dim * d + 2 * d;
  return embeddings + softmax + enc * c.encoder_layers + dec * c.decoder_layers + context;
}

// ---------------------------------------------------------------- state

namespace {

template <typename S>
void add_attention(ParamSet<S>& ps, const std::string& prefix, int d, bool relative, int R, int dh) {
  for (const char* proj : {"q", "k", "v", "o"}) {
    ps.add(prefix + "." + proj + ".w", d, d);
    ps.add(prefix + "." + proj + ".b", 1, d);
  }
  if (relative) {
    ps.add(prefix + ".rel_k", R, dh);
    ps.add(prefix + ".rel_v", R, dh);
  }
}

template <typename S>
void add_norm(ParamSet<S>& ps, const std::string& prefix, int d) {
  ps.add(prefix + ".g", 1, d);
  ps.add(prefix + ".b", 1, d);
}

template <typename S>
void add_ffn(ParamSet<S>& ps, const std::string& prefix, int d, int f) {
  ps.add(prefix + ".w1", d, f);
  ps.add(prefix + ".b1", 1, f);
  ps.add(prefix + ".w2", f, d);
  ps.add(prefix + ".b2", 1, d);
}

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

double normal01(std::mt19937_64& rng) {
  // Box-Muller on the library-independent uniform source.
  double u1 = uniform01(rng);
  while (u1 <= 0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

}  // namespace

template <typename S>
void init_state(ModelState<S>& state, const ModelConfig& c) {
  c.validate();
  state.config = c;
  state.params = ParamSet<S>();
  auto& ps = state.params;
  const int d = c.hidden_size, dh = d / c.attention_heads, R = 2 * c.relative_clip + 1;
  ps.add("embed", c.vocab_size, d);
  if (!c.share_embeddings) ps.add("embed.dec", c.vocab_size, d);
  for (int l = 0; l < c.encoder_layers; ++l) {
    const std::string p = "enc." + std::to_string(l);
    add_attention(ps, p + ".self", d, true, R, dh);
    add_norm(ps, p + ".ln1", d);
    add_ffn(ps, p + ".ffn", d, c.filter_size);
    add_norm(ps, p + ".ln2", d);
  }
  for (int l = 0; l < c.decoder_layers; ++l) {
    const std::string p = "dec." + std::to_string(l);
    add_attention(ps, p + ".self", d, true, R, dh);
    add_norm(ps, p + ".ln1", d);
    add_attention(ps, p + ".cross", d, false, R, dh);
    add_norm(ps, p + ".ln2", d);
    add_ffn(ps, p + ".ffn", d, c.filter_size);
    add_norm(ps, p + ".ln3", d);
  }
  ps.add("ctx.w", c.context_feature_dim, d);
  ps.add("ctx.b", 1, d);
  ps.add("ctx.segment", 1, d);
  ps.add("softmax.w", d, c.vocab_size);
  state.adam_m.clear();
  state.adam_v.clear();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    state.adam_m.push_back(Mat<S>::Zero(ps[i].value.rows(), ps[i].value.cols()));
    state.adam_v.push_back(Mat<S>::Zero(ps[i].value.rows(), ps[i].value.cols()));
  }
  state.step = 0;
}

template <typename S>
void randomize(ModelState<S>& state, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const double embed_std = 1.0 / std::sqrt(static_cast<double>(state.config.hidden_size));
  for (std::size_t i = 0; i < state.params.size(); ++i) {
    auto& p = state.params[i];
    auto& v = p.value;
    if (p.name == "embed" || p.name == "embed.dec" || p.name == "ctx.segment") {
      for (Eigen::Index t = 0; t < v.size(); ++t) v.data()[t] = static_cast<S>(normal01(rng) * embed_std);
    } else if (ends_with(p.name, ".g")) {
      v.setOnes();
    } else if (ends_with(p.name, ".b") || ends_with(p.name, ".b1") || ends_with(p.name, ".b2")) {
      v.setZero();
    } else {
      const double limit = std::sqrt(6.0 / static_cast<double>(v.rows() + v.cols()));
      for (Eigen::Index t = 0; t < v.size(); ++t)
        v.data()[t] = static_cast<S>((2.0 * uniform01(rng) - 1.0) * limit);
    }
    p.grad.setZero();
  }
}

template <typename To, typename From>
ModelState<To> convert_state(const ModelState<From>& from) {
  ModelState<To> to;
  init_state(to, from.config);
  for (std::size_t i = 0; i < from.params.size(); ++i) {
    to.params[i].value = from.params[i].value.template cast<To>();
    to.adam_m[i] = from.adam_m[i].template cast<To>();
    to.adam_v[i] = from.adam_v[i].template cast<To>();
  }
  to.step = from.step;
  return to;
}

// ---------------------------------------------------------------- model

namespace {

enum Role : std::uint64_t {
  kEmbedDrop = 1,
  kSelfProbs,
  kSelfOut,
  kCrossProbs,
  kCrossOut,
  kFfnAct,
  kFfnOut,
};

std::uint64_t site_seed(std::uint64_t seed, std::uint64_t site, std::uint64_t role) {
  return mix_seed(mix_seed(seed, site), role);
}

}  // namespace

template <typename S>
Transformer<S>::Transformer(ModelState<S>& state) : state_(state) {}

template <typename S>
Var Transformer<S>::p(Graph<S>& g, const std::string& name) {
  return g.param(state_.params.get(name));
}

template <typename S>
Var Transformer<S>::norm(Graph<S>& g, const std::string& prefix, Var x) {
  return g.layer_norm(x, p(g, prefix + ".g"), p(g, prefix + ".b"));
}

template <typename S>
Var Transformer<S>::embed(Graph<S>& g, const std::string& table, const IdGrid& ids, const MaskGrid& mask) {
  std::vector<int> flat(static_cast<std::size_t>(ids.size()));
  for (Eigen::Index i = 0; i < ids.size(); ++i) {
    const int id = ids.data()[i];
    if (mask.data()[i] && (id < 0 || id >= state_.config.vocab_size))
      throw DimensionError("token id " + std::to_string(id) + " is outside the model vocabulary");
    flat[static_cast<std::size_t>(i)] = mask.data()[i] ? id : -1;
  }
  return g.embedding(p(g, table), flat, std::sqrt(static_cast<S>(state_.config.hidden_size)));
}

template <typename S>
Var Transformer<S>::attention_block(Graph<S>& g, const std::string& prefix, Var query_in, Var kv_in,
                                    int batch, int q_len, int k_len,
                                    const std::vector<std::uint8_t>& key_mask, bool causal,
                                    bool relative, const RunMode& mode, std::uint64_t seed,
                                    std::vector<Mat<S>>* probe) {
  Var q = g.linear(query_in, p(g, prefix + ".q.w"), p(g, prefix + ".q.b"));
  Var k = g.linear(kv_in, p(g, prefix + ".k.w"), p(g, prefix + ".k.b"));
  Var v = g.linear(kv_in, p(g, prefix + ".v.w"), p(g, prefix + ".v.b"));
  AttentionSpec<S> spec;
  spec.batch = batch;
  spec.q_len = q_len;
  spec.k_len = k_len;
  spec.heads = state_.config.attention_heads;
  spec.causal = causal;
  spec.key_mask = &key_mask;
  spec.dropout = mode.train ? static_cast<S>(state_.config.attention_dropout) : S(0);
  spec.seed = seed;
  spec.clip = state_.config.relative_clip;
  spec.probe = probe;
  if (relative) {
    spec.rel_k = p(g, prefix + ".rel_k");
    spec.rel_v = p(g, prefix + ".rel_v");
  }
  Var a = g.attention(q, k, v, spec);
  return g.linear(a, p(g, prefix + ".o.w"), p(g, prefix + ".o.b"));
}

template <typename S>
Var Transformer<S>::feed_forward(Graph<S>& g, const std::string& prefix, Var x, const RunMode& mode,
                                 std::uint64_t seed) {
  Var h = g.relu(g.linear(x, p(g, prefix + ".w1"), p(g, prefix + ".b1")));
  if (mode.train) h = g.dropout(h, static_cast<S>(state_.config.activation_dropout), seed);
  return g.linear(h, p(g, prefix + ".w2"), p(g, prefix + ".b2"));
}

template <typename S>
Mat<S> Transformer<S>::project_context(const Eigen::MatrixXd& vectors) {
  const auto& c = state_.config;
  if (vectors.cols() != c.context_feature_dim)
    throw DimensionError("context vectors have dimension " + std::to_string(vectors.cols()) +
                         ", expected " + std::to_string(c.context_feature_dim));
  Mat<S> out = vectors.cast<S>() * state_.params.get("ctx.w").value;
  out.rowwise() += state_.params.get("ctx.b").value.row(0) + state_.params.get("ctx.segment").value.row(0);
  return out;
}

template <typename S>
Encoded<S> Transformer<S>::encode(Graph<S>& g, const IdGrid& source, const MaskGrid& source_mask,
                                  const std::vector<Eigen::MatrixXd>& context, const RunMode& mode,
                                  std::vector<std::vector<Mat<S>>>* probes) {
  const auto& c = state_.config;
  const int B = static_cast<int>(source.rows());
  const int Ls = static_cast<int>(source.cols());
  if (source_mask.rows() != B || source_mask.cols() != Ls)
    throw DimensionError("source mask shape differs from the source grid");
  if (!context.empty() && context.size() != static_cast<std::size_t>(B))
    throw DimensionError("context list must have one entry per batch row");

  Encoded<S> enc;
  enc.batch = B;
  Var x = embed(g, "embed", source, source_mask);

  std::size_t ctx_rows = 0;
  for (const auto& m : context) ctx_rows += static_cast<std::size_t>(m.rows());
  if (ctx_rows == 0) {
    enc.len = Ls;
    enc.mask.assign(source_mask.data(), source_mask.data() + source_mask.size());
  } else {
    Mat<S> stacked(static_cast<Eigen::Index>(ctx_rows), c.context_feature_dim);
    Eigen::Index r = 0;
    for (const auto& m : context) {
      if (m.rows() == 0) continue;
      if (m.cols() != c.context_feature_dim)
        throw DimensionError("context vectors have dimension " + std::to_string(m.cols()) +
                             ", expected " + std::to_string(c.context_feature_dim));
      stacked.middleRows(r, m.rows()) = m.cast<S>();
      r += m.rows();
    }
    Var proj = g.linear(g.constant(std::move(stacked)), p(g, "ctx.w"), p(g, "ctx.b"));
    proj = g.add_rowvec(proj, p(g, "ctx.segment"));

    std::vector<int> last(B, -1);
    int L = Ls;
    for (int b = 0; b < B; ++b) {
      for (int t = 0; t < Ls; ++t)
        if (source_mask(b, t)) last[b] = t;
      L = std::max(L, last[b] + 1 + static_cast<int>(context[b].rows()));
    }
    std::vector<std::pair<int, int>> picks(static_cast<std::size_t>(B) * L, {-1, 0});
    enc.mask.assign(static_cast<std::size_t>(B) * L, 0);
    int offset = 0;
    for (int b = 0; b < B; ++b) {
      const int m = static_cast<int>(context[b].rows());
      for (int t = 0; t < L; ++t) {
        const std::size_t at = static_cast<std::size_t>(b) * L + t;
        if (t < Ls && source_mask(b, t)) {
          picks[at] = {0, b * Ls + t};
          enc.mask[at] = 1;
        } else if (t > last[b] && t <= last[b] + m) {
          picks[at] = {1, offset + (t - last[b] - 1)};
          enc.mask[at] = 1;
        }
      }
      offset += m;
    }
    x = g.gather_rows({x, proj}, picks);
    enc.len = L;
  }

  if (mode.train) x = g.dropout(x, static_cast<S>(c.residual_dropout), site_seed(mode.seed, 1, kEmbedDrop));
  for (int l = 0; l < c.encoder_layers; ++l) {
    const std::string pre = "enc." + std::to_string(l);
    const std::uint64_t site = 100 + static_cast<std::uint64_t>(l);
    std::vector<Mat<S>>* probe = nullptr;
    if (probes) probe = &probes->emplace_back();
    Var a = attention_block(g, pre + ".self", x, x, B, enc.len, enc.len, enc.mask, false, true, mode,
                            site_seed(mode.seed, site, kSelfProbs), probe);
    if (mode.train) a = g.dropout(a, static_cast<S>(c.residual_dropout), site_seed(mode.seed, site, kSelfOut));
    x = norm(g, pre + ".ln1", g.add(x, a));
    Var f = feed_forward(g, pre + ".ffn", x, mode, site_seed(mode.seed, site, kFfnAct));
    if (mode.train) f = g.dropout(f, static_cast<S>(c.residual_dropout), site_seed(mode.seed, site, kFfnOut));
    x = norm(g, pre + ".ln2", g.add(x, f));
  }
  enc.memory = x;
  return enc;
}

template <typename S>
Var Transformer<S>::decode(Graph<S>& g, const Encoded<S>& enc, const IdGrid& input, const MaskGrid& mask,
                           const RunMode& mode, std::vector<std::vector<Mat<S>>>* probes) {
  const auto& c = state_.config;
  const int B = static_cast<int>(input.rows());
  const int Lt = static_cast<int>(input.cols());
  if (B != enc.batch) throw DimensionError("decoder batch differs from encoder batch");
  if (mask.rows() != B || mask.cols() != Lt) throw DimensionError("decoder mask shape differs from its input");
  std::vector<std::uint8_t> self_mask(mask.data(), mask.data() + mask.size());

  Var x = embed(g, c.share_embeddings ? "embed" : "embed.dec", input, mask);
  if (mode.train) x = g.dropout(x, static_cast<S>(c.residual_dropout), site_seed(mode.seed, 2, kEmbedDrop));
  for (int l = 0; l < c.decoder_layers; ++l) {
    const std::string pre = "dec." + std::to_string(l);
    const std::uint64_t site = 200 + static_cast<std::uint64_t>(l);
    std::vector<Mat<S>>* probe = nullptr;
    if (probes) probe = &probes->emplace_back();
    Var a = attention_block(g, pre + ".self", x, x, B, Lt, Lt, self_mask, true, true, mode,
                            site_seed(mode.seed, site, kSelfProbs), probe);
    if (mode.train) a = g.dropout(a, static_cast<S>(c.residual_dropout), site_seed(mode.seed, site, kSelfOut));
    x = norm(g, pre + ".ln1", g.add(x, a));
    probe = probes ? &probes->emplace_back() : nullptr;
    Var ca = attention_block(g, pre + ".cross", x, enc.memory, B, Lt, enc.len, enc.mask, false, false, mode,
                             site_seed(mode.seed, site, kCrossProbs), probe);
    if (mode.train) ca = g.dropout(ca, static_cast<S>(c.residual_dropout), site_seed(mode.seed, site, kCrossOut));
    x = norm(g, pre + ".ln2", g.add(x, ca));
    Var f = feed_forward(g, pre + ".ffn", x, mode, site_seed(mode.seed, site, kFfnAct));
    if (mode.train) f = g.dropout(f, static_cast<S>(c.residual_dropout), site_seed(mode.seed, site, kFfnOut));
    x = norm(g, pre + ".ln3", g.add(x, f));
  }
  return x;
}

template <typename S>
Var Transformer<S>::project(Graph<S>& g, Var hidden) {
  return g.matmul(hidden, p(g, "softmax.w"));
}

template <typename S>
IdGrid Transformer<S>::decoder_input(const IdGrid& target, const MaskGrid& mask) const {
  IdGrid in = IdGrid::Constant(target.rows(), target.cols(), state_.config.pad_id);
  for (Eigen::Index b = 0; b < target.rows(); ++b) {
    int prev = state_.config.bos_id;
    for (Eigen::Index t = 0; t < target.cols(); ++t) {
      if (!mask(b, t)) continue;
      in(b, t) = prev;
      prev = target(b, t);
    }
  }
  return in;
}

template <typename S>
ForwardResult<S> Transformer<S>::forward(Graph<S>& g, const Batch& batch, const RunMode& mode,
                                         Reduction reduction, std::vector<std::vector<Mat<S>>>* probes) {
  const auto& c = state_.config;
  Encoded<S> enc = encode(g, batch.source, batch.source_mask, batch.context, mode, probes);
  const IdGrid dec_in = decoder_input(batch.target, batch.target_mask);
  Var hidden = decode(g, enc, dec_in, batch.target_mask, mode, probes);
  ForwardResult<S> out;
  out.logits = project(g, hidden);
  out.targets.resize(static_cast<std::size_t>(batch.target.size()));
  for (Eigen::Index i = 0; i < batch.target.size(); ++i)
    out.targets[static_cast<std::size_t>(i)] = batch.target_mask.data()[i] ? batch.target.data()[i] : -1;
  out.loss = g.cross_entropy(out.logits, out.targets, static_cast<S>(c.label_smoothing), c.pad_id, reduction,
                             &out.log_probs);
  return out;
}

// ---------------------------------------------------------------- optimization

double lr_schedule(std::int64_t step, std::int64_t warmup, int d_model, double scale) {
  if (step < 1) throw ConfigError("lr_schedule: step must be at least 1");
  if (warmup < 1) throw ConfigError("lr_schedule: warmup must be at least 1");
  if (d_model < 1) throw ConfigError("lr_schedule: d_model must be positive");
  const double s = static_cast<double>(step);
  return scale / std::sqrt(static_cast<double>(d_model)) *
         std::min(1.0 / std::sqrt(s), s * std::pow(static_cast<double>(warmup), -1.5));
}

template <typename S>
void adam_update(ParamSet<S>& ps, std::vector<Mat<S>>& adam_m, std::vector<Mat<S>>& adam_v, std::int64_t& step,
                 double lr, const AdamOptions& o) {
  for (std::size_t i = 0; i < ps.size(); ++i)
    if (!ps[i].grad.allFinite()) throw NonFiniteError("non-finite gradient in parameter '" + ps[i].name + "'");
  ++step;
  const double t = static_cast<double>(step);
  const S c1 = static_cast<S>(1.0 / (1.0 - std::pow(o.beta1, t)));
  const S c2 = static_cast<S>(1.0 / (1.0 - std::pow(o.beta2, t)));
  const S b1 = static_cast<S>(o.beta1), b2 = static_cast<S>(o.beta2);
  const S eps = static_cast<S>(o.eps), rate = static_cast<S>(lr);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    auto g = ps[i].grad.array();
    auto m = adam_m[i].array();
    auto v = adam_v[i].array();
    m = b1 * m + (S(1) - b1) * g;
    v = b2 * v + (S(1) - b2) * g.square();
    ps[i].value.array() -= rate * (m * c1) / ((v * c2).sqrt() + eps);
  }
}

template <typename S>
void adam_step(ModelState<S>& state, double lr, const AdamOptions& o) {
  adam_update(state.params, state.adam_m, state.adam_v, state.step, lr, o);
}

// ---------------------------------------------------------------- checkpoints

namespace {

constexpr char kMagic[] = "UNIMTCKP";

}  // namespace

void save_checkpoint(const std::string& path, const ModelState<float>& state, const CheckpointExtra& extra) {
  TensorFile f;
  f.config_json = state.config.to_json();
  f.step = state.step;
  f.extra_json = extra.json;
  for (std::size_t i = 0; i < state.params.size(); ++i)
    f.entries.push_back({state.params[i].name, state.params[i].value, state.adam_m[i], state.adam_v[i]});
  write_tensor_file(path, kMagic, f);
}

ModelState<float> load_checkpoint(const std::string& path, CheckpointExtra* extra) {
  TensorFile f = read_tensor_file(path, kMagic);
  ModelState<float> state;
  init_state(state, ModelConfig::from_json(f.config_json));
  state.step = f.step;
  if (f.entries.size() != state.params.size()) throw FormatError("checkpoint tensor table does not match its config");
  for (std::size_t i = 0; i < state.params.size(); ++i) {
    auto& p = state.params[i];
    auto& e = f.entries[i];
    if (e.name != p.name || e.value.rows() != p.value.rows() || e.value.cols() != p.value.cols())
      throw FormatError("checkpoint tensor '" + e.name + "' does not match the model");
    p.value = std::move(e.value);
    state.adam_m[i] = std::move(e.m);
    state.adam_v[i] = std::move(e.v);
  }
  if (extra) extra->json = f.extra_json;
  return state;
}

template void init_state(ModelState<float>&, const ModelConfig&);
template void init_state(ModelState<double>&, const ModelConfig&);
template void randomize(ModelState<float>&, std::uint64_t);
template void randomize(ModelState<double>&, std::uint64_t);
template void adam_update(ParamSet<float>&, std::vector<Mat<float>>&, std::vector<Mat<float>>&, std::int64_t&, double,
                          const AdamOptions&);
template void adam_update(ParamSet<double>&, std::vector<Mat<double>>&, std::vector<Mat<double>>&, std::int64_t&,
                          double, const AdamOptions&);
template void adam_step(ModelState<float>&, double, const AdamOptions&);
template void adam_step(ModelState<double>&, double, const AdamOptions&);
template ModelState<double> convert_state<double, float>(const ModelState<float>&);
template ModelState<float> convert_state<float, double>(const ModelState<double>&);
template ModelState<float> convert_state<float, float>(const ModelState<float>&);
template class Transformer<float>;
template class Transformer<double>;

}  // namespace unimt
