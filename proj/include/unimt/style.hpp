#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "unimt/model.hpp"
#include "unimt/tensor.hpp"
#include "unimt/vocab.hpp"

namespace unimt {

/// Convolutional sentence classifier: parallel wide convolutions of several
/// widths, ReLU, max-over-time pooling, dropout, affine softmax.
struct TextCnnConfig {
  int vocab_size = 0;
  int embed_dim = 64;
  std::vector<int> filter_widths = {3, 4, 5};
  int filters_per_width = 100;
  double dropout = 0.5;
  int classes = 2;
  int max_len = 256;  // longer inputs are truncated
  int pad_id = 0;

  void validate() const;
  std::string to_json() const;
  static TextCnnConfig from_json(const std::string& text);

  bool operator==(const TextCnnConfig&) const = default;
};

template <typename Scalar>
struct TextCnnState {
  TextCnnConfig config;
  ParamSet<Scalar> params;
  std::vector<Mat<Scalar>> adam_m;
  std::vector<Mat<Scalar>> adam_v;
  std::int64_t step = 0;
};

template <typename Scalar>
void init_text_cnn(TextCnnState<Scalar>& state, const TextCnnConfig& config);

/// Glorot-uniform filters and output layer, small uniform embeddings, zero biases.
template <typename Scalar>
void randomize(TextCnnState<Scalar>& state, std::uint64_t seed);

template <typename Scalar>
class TextCnn {
 public:
  explicit TextCnn(TextCnnState<Scalar>& state);

  /// batch x classes logits. Pad ids are ignored; sequences may differ in length.
  Var logits(Graph<Scalar>& g, const std::vector<std::vector<int>>& ids, const RunMode& mode);

  /// Mean cross-entropy against `labels`.
  Var loss(Graph<Scalar>& g, const std::vector<std::vector<int>>& ids, const std::vector<int>& labels,
           const RunMode& mode);

  /// Eval-mode class probabilities, one row per input.
  Mat<double> probabilities(const std::vector<std::vector<int>>& ids);

 private:
  TextCnnState<Scalar>& state_;
};

/// Token ids of a text for the classifier (encoded, truncated to max_len).
std::vector<int> style_tokens(const Vocabulary& v, const std::string& text, int max_len);

struct StyleTrainOptions {
  int max_epochs = 30;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double holdout_fraction = 0.1;
  double converged_loss = 1e-3;  // stop once an epoch's mean loss falls below this
  std::size_t min_class_examples = 10;
  std::uint64_t seed = 1;
};

struct StyleClassifier {
  TextCnnState<float> state;
  double heldout_accuracy = 0;
  std::size_t heldout_size = 0;
  int epochs = 0;
};

/// Label 1 is the `pos` style, label 0 the `neg` style.
StyleClassifier train_classifier(std::span<const std::string> pos, std::span<const std::string> neg,
                                 const TextCnnConfig& config, const Vocabulary& v,
                                 const StyleTrainOptions& options = {});

struct StylePrediction {
  int label = 0;
  double probability = 0;          // of the predicted label
  std::array<double, 2> probs{};   // per class
};

std::vector<StylePrediction> classify(TextCnnState<float>& state, const Vocabulary& v,
                                      std::span<const std::string> texts);

/// `provenance_json` (a JSON object) is stored alongside the weights.
void save_classifier(const std::string& path, const StyleClassifier& classifier,
                     std::string_view provenance_json = "{}");
StyleClassifier load_classifier(const std::string& path);

}  // namespace unimt
