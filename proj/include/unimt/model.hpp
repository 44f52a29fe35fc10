#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "unimt/sampler.hpp"
#include "unimt/tensor.hpp"

namespace unimt {

struct ModelConfig {
  int vocab_size = 0;
  int hidden_size = 512;
  int filter_size = 2048;
  int encoder_layers = 6;
  int decoder_layers = 6;
  int attention_heads = 8;
  double residual_dropout = 0.1;
  double attention_dropout = 0.1;
  double activation_dropout = 0.1;
  double label_smoothing = 0.1;
  std::string layer_norm_style = "postnorm";
  std::string position_encoding = "relative";
  bool share_embeddings = true;
  bool share_softmax_weights = false;
  int relative_clip = 16;
  int context_feature_dim = 2048;
  int pad_id = 0;
  int bos_id = 2;

  static ModelConfig base(int vocab_size);
  static ModelConfig big(int vocab_size);

  /// Throws ConfigError on inconsistent settings.
  void validate() const;
  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);

  bool operator==(const ModelConfig&) const = default;
};

/// Parameters plus Adam moments and the update counter.
template <typename Scalar>
struct ModelState {
  ModelConfig config;
  ParamSet<Scalar> params;
  std::vector<Mat<Scalar>> adam_m;
  std::vector<Mat<Scalar>> adam_v;
  std::int64_t step = 0;
};

/// Registers every parameter of `config` (zero valued) and allocates moments.
template <typename Scalar>
void init_state(ModelState<Scalar>& state, const ModelConfig& config);

/// Fills parameters with seeded initial values: Glorot-uniform weights,
/// N(0, 1/d) embeddings, unit layer-norm gains and zero biases.
template <typename Scalar>
void randomize(ModelState<Scalar>& state, std::uint64_t seed);

struct RunMode {
  bool train = false;
  std::uint64_t seed = 0;  // dropout mask seed
};

template <typename Scalar>
struct Encoded {
  Var memory;  // batch*len x d
  int batch = 0;
  int len = 0;
  std::vector<std::uint8_t> mask;  // batch*len
};

template <typename Scalar>
struct ForwardResult {
  Var loss;
  Var logits;               // batch*target_len x vocab
  Mat<Scalar> log_probs;    // same shape as logits
  std::vector<int> targets; // flattened, -1 at masked positions
};

/// Post-norm encoder-decoder with relative self-attention. Parameters live in
/// the ModelState; the class only holds references.
template <typename Scalar>
class Transformer {
 public:
  explicit Transformer(ModelState<Scalar>& state);

  /// Encodes a padded source grid. Context vectors (one matrix per row, may be
  /// empty) are projected and placed right after each row's last real token.
  Encoded<Scalar> encode(Graph<Scalar>& g, const IdGrid& source, const MaskGrid& source_mask,
                         const std::vector<Eigen::MatrixXd>& context, const RunMode& mode,
                         std::vector<std::vector<Mat<Scalar>>>* probes = nullptr);

  /// Decoder hidden states for a padded decoder-input grid.
  Var decode(Graph<Scalar>& g, const Encoded<Scalar>& enc, const IdGrid& input, const MaskGrid& mask,
             const RunMode& mode, std::vector<std::vector<Mat<Scalar>>>* probes = nullptr);

  Var project(Graph<Scalar>& g, Var hidden);

  /// Teacher-forced loss over a batch: label-smoothed cross-entropy on real target tokens.
  ForwardResult<Scalar> forward(Graph<Scalar>& g, const Batch& batch, const RunMode& mode,
                                Reduction reduction = Reduction::Mean,
                                std::vector<std::vector<Mat<Scalar>>>* probes = nullptr);

  /// Decoder input grid: bos followed by the target shifted right within real positions.
  IdGrid decoder_input(const IdGrid& target, const MaskGrid& mask) const;

  /// Context vectors mapped to model space (zero-vector input gives bias + segment).
  Mat<Scalar> project_context(const Eigen::MatrixXd& vectors);

  const ModelConfig& config() const { return state_.config; }

 private:
  Var attention_block(Graph<Scalar>& g, const std::string& prefix, Var query_in, Var kv_in, int batch,
                      int q_len, int k_len, const std::vector<std::uint8_t>& key_mask, bool causal,
                      bool relative, const RunMode& mode, std::uint64_t seed,
                      std::vector<Mat<Scalar>>* probe);
  Var feed_forward(Graph<Scalar>& g, const std::string& prefix, Var x, const RunMode& mode,
                   std::uint64_t seed);
  Var norm(Graph<Scalar>& g, const std::string& prefix, Var x);
  Var p(Graph<Scalar>& g, const std::string& name);
  Var embed(Graph<Scalar>& g, const std::string& table, const IdGrid& ids, const MaskGrid& mask);

  ModelState<Scalar>& state_;
};

/// Closed-form parameter count of a configuration.
std::size_t parameter_count(const ModelConfig& config);

/// scale * d^-0.5 * min(step^-0.5, step * warmup^-1.5).
double lr_schedule(std::int64_t step, std::int64_t warmup, int d_model, double scale);

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
};

/// One bias-corrected Adam update of any parameter set from its grad fields.
/// Throws NonFiniteError naming the first parameter with a non-finite gradient.
template <typename Scalar>
void adam_update(ParamSet<Scalar>& params, std::vector<Mat<Scalar>>& adam_m, std::vector<Mat<Scalar>>& adam_v,
                 std::int64_t& step, double lr, const AdamOptions& options = {});

/// One bias-corrected Adam update from the parameters' grad fields.
/// Throws NonFiniteError naming the first parameter with a non-finite gradient.
template <typename Scalar>
void adam_step(ModelState<Scalar>& state, double lr, const AdamOptions& options = {});

/// Checkpoint container: magic, version, JSON header, little-endian float32 tensors.
struct CheckpointExtra {
  std::string json = "{}";  // caller-owned metadata (trainer cursor, scores, config hash)
};

void save_checkpoint(const std::string& path, const ModelState<float>& state,
                     const CheckpointExtra& extra = {});
ModelState<float> load_checkpoint(const std::string& path, CheckpointExtra* extra = nullptr);

/// Copies parameter values (and moments) between precisions.
template <typename To, typename From>
ModelState<To> convert_state(const ModelState<From>& from);

}  // namespace unimt
