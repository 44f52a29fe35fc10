#pragma once

// Small models and batches shared by the model, style and acceptance tests.

#include <random>
#include <string>
#include <vector>

#include "oracles/finite_difference.hpp"
#include "unimt/model.hpp"

namespace fixtures {

inline unimt::ModelConfig tiny_config() {
  unimt::ModelConfig c;
  c.vocab_size = 24;
  c.hidden_size = 8;
  c.filter_size = 12;
  c.encoder_layers = 2;
  c.decoder_layers = 2;
  c.attention_heads = 2;
  c.relative_clip = 2;
  c.context_feature_dim = 5;
  c.residual_dropout = 0.1;
  c.attention_dropout = 0.1;
  c.activation_dropout = 0.1;
  c.label_smoothing = 0.1;
  return c;
}

/// Three rows of random tokens with ragged lengths; row 1 carries two context vectors.
inline unimt::Batch random_batch(const unimt::ModelConfig& c, std::uint64_t seed, bool with_context = true) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> tok(3, c.vocab_size - 1);
  std::uniform_real_distribution<double> feat(-1.0, 1.0);
  std::vector<unimt::UnifiedExample> exs;
  const int src_lens[] = {5, 7, 4};
  const int tgt_lens[] = {4, 3, 6};
  for (int i = 0; i < 3; ++i) {
    unimt::UnifiedExample ex;
    for (int t = 0; t < src_lens[i]; ++t) ex.source_ids.push_back(tok(rng));
    for (int t = 0; t < tgt_lens[i]; ++t) ex.target_ids.push_back(tok(rng));
    if (with_context && i == 1) {
      ex.task = unimt::TaskKind::MMT;
      ex.context_vectors.assign(2, std::vector<double>(static_cast<std::size_t>(c.context_feature_dim)));
      for (auto& v : ex.context_vectors)
        for (auto& x : v) x = feat(rng);
    }
    exs.push_back(std::move(ex));
  }
  return unimt::make_batch(std::move(exs), c.pad_id);
}

inline double model_loss(unimt::ModelState<double>& state, const unimt::Batch& batch, const unimt::RunMode& mode) {
  unimt::Graph<double> g(false);
  unimt::Transformer<double> model(state);
  return g.value(model.forward(g, batch, mode).loss)(0, 0);
}

struct GradCheck {
  std::string parameter;
  int checked = 0;
  double worst = 0;  // largest relative error seen
};

/// Compares analytic gradients with central differences on `per_param`
/// random entries of each named parameter.
inline std::vector<GradCheck> check_model_gradients(unimt::ModelState<double>& state, const unimt::Batch& batch,
                                                    const unimt::RunMode& mode,
                                                    const std::vector<std::string>& names, int per_param,
                                                    std::uint64_t seed) {
  state.params.zero_grad();
  {
    unimt::Graph<double> g;
    unimt::Transformer<double> model(state);
    auto r = model.forward(g, batch, mode);
    g.backward(r.loss);
  }
  std::mt19937_64 rng(seed);
  std::vector<int> used_ids;
  for (Eigen::Index i = 0; i < batch.source.size(); ++i)
    if (batch.source_mask.data()[i]) used_ids.push_back(batch.source.data()[i]);
  std::vector<GradCheck> out;
  for (const auto& name : names) {
    auto& p = state.params.get(name);
    GradCheck gc{name};
    for (int k = 0; k < per_param; ++k) {
      Eigen::Index r, c;
      if (name == "embed") {
        r = used_ids[std::uniform_int_distribution<std::size_t>(0, used_ids.size() - 1)(rng)];
      } else {
        r = std::uniform_int_distribution<Eigen::Index>(0, p.value.rows() - 1)(rng);
      }
      c = std::uniform_int_distribution<Eigen::Index>(0, p.value.cols() - 1)(rng);
      const double numeric = oracle::central_difference(p.value(r, c), [&] { return model_loss(state, batch, mode); });
      gc.worst = std::max(gc.worst, oracle::relative_error(p.grad(r, c), numeric));
      ++gc.checked;
    }
    out.push_back(gc);
  }
  return out;
}

inline std::vector<std::string> gradient_check_parameters() {
  return {"embed",          "enc.0.self.q.w", "enc.0.self.k.w", "enc.1.self.v.w", "enc.1.self.o.b",
          "enc.0.self.rel_k", "enc.1.self.rel_v", "dec.0.self.rel_k", "dec.1.self.rel_v", "dec.0.cross.q.w",
          "dec.1.cross.k.w", "dec.0.cross.v.b", "enc.0.ffn.w1",   "enc.1.ffn.b1",   "dec.0.ffn.w2",
          "dec.1.ffn.b2",   "enc.0.ln1.g",    "enc.1.ln2.b",    "dec.0.ln3.g",    "dec.1.ln2.b",
          "ctx.w",          "ctx.b",          "ctx.segment",    "softmax.w"};
}

}  // namespace fixtures
