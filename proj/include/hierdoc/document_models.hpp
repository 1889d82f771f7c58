#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "hierdoc/nn.hpp"
#include "hierdoc/training.hpp"

namespace hierdoc {

enum class FeatureKind { pooled, posterior };  // H or P
enum class FeatureSource { untrained_encoder, fine_tuned_encoder };

std::string_view feature_kind_name(FeatureKind k);  // "H" / "P"
FeatureKind parse_feature_kind(std::string_view name);

// Per-segment features of one document, rows in segment order.
struct SegmentSequence {
  std::string doc_id;
  Array<float> features;  // (num_segments, width)
  int label = 0;
  std::size_t doc_length = 0;  // tokens

  std::size_t num_segments() const { return features.rows(); }
  std::size_t width() const { return features.cols(); }
};

enum class DocModelKind { robert, tobert };
enum class SegmentPooling { mean, first };

struct DocModelConfig {
  DocModelKind kind = DocModelKind::robert;
  std::size_t input_width = 128;
  std::size_t num_classes = 2;
  std::size_t lstm_dim = 100;
  std::size_t head_hidden = 30;
  std::size_t tobert_layers = 2;
  std::size_t tobert_heads = 4;
  std::size_t tobert_width = 128;
  std::size_t tobert_ff = 512;
  bool use_position_embeddings = false;
  std::size_t max_segments = 64;
  SegmentPooling pooling = SegmentPooling::mean;
  // Z-score each input dimension with statistics of the training segments.
  bool standardize_inputs = true;
  double dropout = 0.1;
  double layer_norm_epsilon = 1e-12;

  void validate() const;
};

std::string_view doc_model_kind_name(DocModelKind k);
DocModelKind parse_doc_model_kind(std::string_view name);
nlohmann::json to_json(const DocModelConfig& c);
DocModelConfig doc_model_config_from_json(const nlohmann::json& j);

// RoBERT: LSTM over segment features, final hidden state as the document
// embedding. ToBERT: projection, optional learned segment positions, a small
// Transformer stack and pooling over segments. Both end in
// ReLU(affine, head_hidden) -> softmax(affine, C).
template <typename T>
class DocumentModel {
 public:
  DocumentModel(DocModelConfig config, std::uint64_t seed);
  DocumentModel(DocumentModel&&) noexcept = default;
  DocumentModel& operator=(DocumentModel&&) noexcept = default;

  const DocModelConfig& config() const { return config_; }
  ad::ParameterSet<T>& parameters() { return params_; }
  const ad::ParameterSet<T>& parameters() const { return params_; }

  // features holds `groups` sequences of equal length stacked row-wise.
  ad::Var logits(ad::Tape<T>& t, const Array<T>& features, std::size_t groups,
                 std::mt19937_64* dropout_rng) const;

  // Class posterior (C) for one sequence, dropout off.
  Array<T> posterior(const SegmentSequence& seq) const;
  int predict(const SegmentSequence& seq) const;

  // Fixed (untrained) per-dimension input shift and scale.
  void fit_input_standardization(std::span<const SegmentSequence> seqs);
  void set_input_standardization(Array<T> mean, Array<T> scale);
  const Array<T>& input_mean() const { return input_mean_; }
  const Array<T>& input_scale() const { return input_scale_; }

 private:
  ad::Var document_embedding(ad::Tape<T>& t, const Array<T>& features, std::size_t groups,
                             std::mt19937_64* dropout_rng) const;

  DocModelConfig config_;
  ad::ParameterSet<T> params_;
  Array<T> input_mean_, input_scale_;  // empty: no standardization
  // RoBERT
  ad::Parameter<T>* lstm_input_ = nullptr;      // (input_width, 4 * lstm_dim)
  ad::Parameter<T>* lstm_recurrent_ = nullptr;  // (lstm_dim, 4 * lstm_dim)
  ad::Parameter<T>* lstm_bias_ = nullptr;       // gates i, f, g, o
  // ToBERT
  nn::Linear<T> projection_;
  ad::Parameter<T>* segment_positions_ = nullptr;
  std::vector<nn::TransformerLayer<T>> layers_;
  // head
  nn::Linear<T> hidden_;
  nn::Linear<T> output_;
};

template <typename T>
Array<T> robert_forward(const SegmentSequence& seq, const DocumentModel<T>& model);
template <typename T>
Array<T> tobert_forward(const SegmentSequence& seq, const DocumentModel<T>& model);

// Argmax of the column means; ties go to the lowest class index.
template <typename T>
int aggregate_average(const Array<T>& posteriors);
// Modal per-row argmax; ties (in both steps) go to the lowest class index.
template <typename T>
int aggregate_most_frequent(const Array<T>& posteriors);

// Encoder parameters are not touched here: features are fixed inputs.
// Fits input standardization on `train` when the config asks for it.
// Restores the parameters with the best validation document accuracy.
template <typename T>
TrainResult train_document_model(DocumentModel<T>& model, std::span<const SegmentSequence> train,
                                 std::span<const SegmentSequence> valid,
                                 const TrainOptions& options);

template <typename T>
std::vector<int> predict_documents(const DocumentModel<T>& model,
                                   std::span<const SegmentSequence> sequences);

// Default optimizer per model kind: Adam 1e-3 with plateau schedule for
// RoBERT, BERT-style Adam 5e-5 for ToBERT.
TrainOptions default_train_options(DocModelKind kind);

}  // namespace hierdoc
