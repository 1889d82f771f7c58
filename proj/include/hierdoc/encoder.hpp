#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include <json.hpp>

#include "hierdoc/nn.hpp"
#include "hierdoc/segmenter.hpp"
#include "hierdoc/training.hpp"

namespace hierdoc {

struct EncoderConfig {
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t d_model = 128;
  std::size_t d_ff = 512;
  std::size_t max_positions = 202;
  std::size_t vocab_size = 0;
  std::size_t num_classes = 2;
  double dropout = 0.1;
  double layer_norm_epsilon = 1e-12;

  // Throws std::invalid_argument naming the offending field.
  void validate() const;
};

nlohmann::json to_json(const EncoderConfig& c);
EncoderConfig encoder_config_from_json(const nlohmann::json& j);

// Miniature BERT-style encoder: token + learned position embeddings, post-norm
// Transformer blocks, tanh pooler over the CLS state (H) and a softmax
// classification head (P).
template <typename T>
class SegmentEncoder {
 public:
  SegmentEncoder(EncoderConfig config, std::uint64_t seed);
  SegmentEncoder(SegmentEncoder&&) noexcept = default;
  SegmentEncoder& operator=(SegmentEncoder&&) noexcept = default;

  const EncoderConfig& config() const { return config_; }
  ad::ParameterSet<T>& parameters() { return params_; }
  const ad::ParameterSet<T>& parameters() const { return params_; }

  // Pooled representation graph, shape (rows, d_model). A non-null
  // dropout_rng enables dropout.
  ad::Var pooled(ad::Tape<T>& t, std::span<const std::int32_t> tokens,
                 std::span<const std::uint8_t> mask, std::size_t width,
                 std::mt19937_64* dropout_rng) const;
  ad::Var logits(ad::Tape<T>& t, ad::Var pooled) const;

  Array<T> encode_segments(const SegmentBatch& batch) const;
  Array<T> classify_segments(const Array<T>& pooled) const;

 private:
  EncoderConfig config_;
  ad::ParameterSet<T> params_;
  ad::Parameter<T>* token_embedding_ = nullptr;
  ad::Parameter<T>* position_embedding_ = nullptr;
  nn::LayerNorm<T> embedding_norm_;
  std::vector<nn::TransformerLayer<T>> layers_;
  nn::Linear<T> pooler_;
  nn::Linear<T> classifier_;
};

struct SegmentationOptions {
  std::size_t segment_size = 200;
  std::size_t stride = 50;
  std::size_t max_segments = 0;  // 0 keeps every window
};

std::vector<SegmentBatch> segment_documents(std::span<const Document> docs,
                                            const SegmentationOptions& seg);

// Trains the encoder on (segment, parent label) pairs; restores the
// parameters with the best validation segment accuracy. On a non-finite
// loss the best parameters so far are restored and TrainingDiverged thrown.
template <typename T>
TrainResult fine_tune_segments(SegmentEncoder<T>& encoder, std::span<const Document> train,
                               std::span<const Document> valid,
                               const SegmentationOptions& seg, const TrainOptions& options);

// H for every segment of every document, one matrix per document.
template <typename T>
std::vector<Array<T>> extract_pooled(const SegmentEncoder<T>& encoder,
                                     std::span<const SegmentBatch> batches,
                                     std::size_t chunk_rows = 64);

enum class AttentionMode { full_attention, segmented };

struct FlopEstimate {
  double attention = 0;     // score and weighted-sum products
  double projections = 0;   // query/key/value/output projections
  double feed_forward = 0;
  double total = 0;
  std::size_t segments = 0;
  std::size_t positions_per_segment = 0;
};

// Multiply-add counts (2 flops each) of a forward pass over a document of
// doc_length tokens. full_attention feeds all tokens as one sequence;
// segmented runs every window of width segment_size + 2.
FlopEstimate count_flops(std::size_t doc_length, std::size_t segment_size, std::size_t stride,
                         const EncoderConfig& config, AttentionMode mode);

}  // namespace hierdoc
