#include "hierdoc/encoder.hpp"

#include "hierdoc/json_util.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

namespace hierdoc {

void EncoderConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("encoder." + field + ": " + why);
  };
  if (layers == 0) fail("layers", "must be positive");
  if (heads == 0) fail("heads", "must be positive");
  if (d_model == 0) fail("d_model", "must be positive");
  if (d_model % heads != 0) fail("d_model", "must be divisible by heads");
  if (d_ff == 0) fail("d_ff", "must be positive");
  if (max_positions < 3) fail("max_positions", "must hold CLS, SEP and one token");
  if (vocab_size <= Vocabulary::num_specials) fail("vocab_size", "must exceed the 4 specials");
  if (num_classes < 2) fail("num_classes", "must be at least 2");
  if (!(dropout >= 0 && dropout < 1)) fail("dropout", "must lie in [0, 1)");
  if (!(layer_norm_epsilon > 0)) fail("layer_norm_epsilon", "must be positive");
}

nlohmann::json to_json(const EncoderConfig& c) {
  return {{"layers", c.layers},          {"heads", c.heads},
          {"d_model", c.d_model},        {"d_ff", c.d_ff},
          {"max_positions", c.max_positions}, {"vocab_size", c.vocab_size},
          {"num_classes", c.num_classes}, {"dropout", c.dropout},
          {"layer_norm_epsilon", c.layer_norm_epsilon}};
}

EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j, "encoder", {"layers", "heads", "d_model", "d_ff", "max_positions", "vocab_size", "num_classes", "dropout", "layer_norm_epsilon"});
  EncoderConfig c;
  c.layers = json_field(j, "layers", c.layers, "encoder");
  c.heads = json_field(j, "heads", c.heads, "encoder");
  c.d_model = json_field(j, "d_model", c.d_model, "encoder");
  c.d_ff = json_field(j, "d_ff", c.d_ff, "encoder");
  c.max_positions = json_field(j, "max_positions", c.max_positions, "encoder");
  c.vocab_size = json_field(j, "vocab_size", c.vocab_size, "encoder");
  c.num_classes = json_field(j, "num_classes", c.num_classes, "encoder");
  c.dropout = json_field(j, "dropout", c.dropout, "encoder");
  c.layer_norm_epsilon = json_field(j, "layer_norm_epsilon", c.layer_norm_epsilon, "encoder");
  return c;
}

template <typename T>
SegmentEncoder<T>::SegmentEncoder(EncoderConfig config, std::uint64_t seed)
    : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = config_.d_model;
  token_embedding_ = &params_.add("embeddings.token",
                                  nn::truncated_normal<T>({config_.vocab_size, d}, 0.02, rng));
  position_embedding_ = &params_.add(
      "embeddings.position", nn::truncated_normal<T>({config_.max_positions, d}, 0.02, rng));
  embedding_norm_ =
      nn::LayerNorm<T>::create(params_, "embeddings.norm", d, config_.layer_norm_epsilon);
  for (std::size_t i = 0; i < config_.layers; ++i) {
    layers_.push_back(nn::TransformerLayer<T>::create(params_, "layer" + std::to_string(i), d,
                                                      config_.d_ff, config_.heads,
                                                      config_.layer_norm_epsilon, rng));
  }
  pooler_ = nn::Linear<T>::create(params_, "pooler", d, d, rng);
  classifier_ = nn::Linear<T>::create(params_, "classifier", d, config_.num_classes, rng);
}

template <typename T>
ad::Var SegmentEncoder<T>::pooled(ad::Tape<T>& t, std::span<const std::int32_t> tokens,
                                  std::span<const std::uint8_t> mask, std::size_t width,
                                  std::mt19937_64* dropout_rng) const {
  if (width == 0 || tokens.empty() || tokens.size() % width != 0 || mask.size() != tokens.size()) {
    throw std::invalid_argument("segment batch shape inconsistent with width " +
                                std::to_string(width));
  }
  if (width > config_.max_positions) {
    throw std::invalid_argument("segment width " + std::to_string(width) +
                                " exceeds max_positions " +
                                std::to_string(config_.max_positions));
  }
  const std::size_t rows = tokens.size() / width;
  std::vector<std::int32_t> positions(width);
  std::iota(positions.begin(), positions.end(), 0);

  ad::Var x = ad::embedding(t, t.parameter(*token_embedding_), tokens);
  x = ad::add_tiled(t, x, ad::embedding(t, t.parameter(*position_embedding_),
                                        std::span<const std::int32_t>(positions)));
  x = embedding_norm_(t, x);
  const double rate = dropout_rng ? config_.dropout : 0.0;
  for (const auto& layer : layers_) x = layer(t, x, rows, mask, rate, dropout_rng);

  std::vector<std::size_t> cls_rows(rows);
  for (std::size_t r = 0; r < rows; ++r) cls_rows[r] = r * width;
  ad::Var h = ad::tanh(t, pooler_(t, ad::gather_rows(t, x, std::move(cls_rows))));
  if (!t.value(h).all_finite()) throw NumericError("non-finite value in encoder forward pass");
  return h;
}

template <typename T>
ad::Var SegmentEncoder<T>::logits(ad::Tape<T>& t, ad::Var pooled) const {
  if (t.value(pooled).cols() != config_.d_model) {
    throw std::invalid_argument("pooled width " + std::to_string(t.value(pooled).cols()) +
                                " does not match d_model " + std::to_string(config_.d_model));
  }
  return classifier_(t, pooled);
}

template <typename T>
Array<T> SegmentEncoder<T>::encode_segments(const SegmentBatch& batch) const {
  ad::Tape<T> tape(false);
  return tape.value(pooled(tape, batch.tokens, batch.mask, batch.width, nullptr));
}

template <typename T>
Array<T> SegmentEncoder<T>::classify_segments(const Array<T>& pooled_rows) const {
  pooled_rows.check_finite("pooled representation");
  ad::Tape<T> tape(false);
  ad::Var l = logits(tape, tape.constant(pooled_rows.reshaped({pooled_rows.rows(), pooled_rows.cols()})));
  return softmax(tape.value(l), -1);
}

std::vector<SegmentBatch> segment_documents(std::span<const Document> docs,
                                            const SegmentationOptions& seg) {
  std::vector<SegmentBatch> out;
  out.reserve(docs.size());
  for (const auto& d : docs) {
    SegmentPlan plan = plan_segments(d.token_ids.size(), seg.segment_size, seg.stride);
    if (seg.max_segments > 0) plan = truncate_plan(std::move(plan), seg.max_segments, d.id);
    out.push_back(materialize_segments(d, plan));
  }
  return out;
}

namespace {

struct SegmentRef {
  std::size_t doc = 0;
  std::size_t row = 0;
};

struct Minibatch {
  std::vector<std::int32_t> tokens;
  std::vector<std::uint8_t> mask;
  std::vector<int> labels;
};

Minibatch gather(std::span<const SegmentBatch> batches, std::span<const Document> docs,
                 std::span<const SegmentRef> refs) {
  Minibatch mb;
  const std::size_t w = batches.front().width;
  mb.tokens.reserve(refs.size() * w);
  mb.mask.reserve(refs.size() * w);
  for (const auto& r : refs) {
    const auto& b = batches[r.doc];
    mb.tokens.insert(mb.tokens.end(), b.tokens.begin() + static_cast<std::ptrdiff_t>(r.row * w),
                     b.tokens.begin() + static_cast<std::ptrdiff_t>((r.row + 1) * w));
    mb.mask.insert(mb.mask.end(), b.mask.begin() + static_cast<std::ptrdiff_t>(r.row * w),
                   b.mask.begin() + static_cast<std::ptrdiff_t>((r.row + 1) * w));
    mb.labels.push_back(docs[r.doc].label);
  }
  return mb;
}

std::vector<SegmentRef> all_segments(std::span<const SegmentBatch> batches) {
  std::vector<SegmentRef> refs;
  for (std::size_t d = 0; d < batches.size(); ++d) {
    for (std::size_t r = 0; r < batches[d].rows(); ++r) refs.push_back({d, r});
  }
  return refs;
}

template <typename T>
std::pair<double, double> evaluate_segments(const SegmentEncoder<T>& encoder,
                                            std::span<const SegmentBatch> batches,
                                            std::span<const Document> docs,
                                            std::span<const SegmentRef> refs,
                                            std::size_t chunk) {
  double loss = 0.0;
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < refs.size(); begin += chunk) {
    const auto part = refs.subspan(begin, std::min(chunk, refs.size() - begin));
    const Minibatch mb = gather(batches, docs, part);
    ad::Tape<T> tape(false);
    ad::Var l = encoder.logits(tape, encoder.pooled(tape, mb.tokens, mb.mask,
                                                    batches.front().width, nullptr));
    loss += static_cast<double>(tape.value(ad::cross_entropy(tape, l, mb.labels))[0]) *
            static_cast<double>(part.size());
    const Array<T>& lv = tape.value(l);
    for (std::size_t r = 0; r < part.size(); ++r) {
      const auto row = lv.row(r);
      const auto best = std::max_element(row.begin(), row.end()) - row.begin();
      correct += best == mb.labels[r];
    }
  }
  const double n = static_cast<double>(refs.size());
  return {loss / n, static_cast<double>(correct) / n};
}

}  // namespace

template <typename T>
TrainResult fine_tune_segments(SegmentEncoder<T>& encoder, std::span<const Document> train,
                               std::span<const Document> valid,
                               const SegmentationOptions& seg, const TrainOptions& options) {
  if (train.empty()) throw std::invalid_argument("fine_tune_segments: empty training set");
  if (valid.empty()) throw std::invalid_argument("fine_tune_segments: empty validation set");
  if (options.batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  for (const auto* set : {&train, &valid}) {
    for (const auto& d : *set) {
      if (d.label < 0 || static_cast<std::size_t>(d.label) >= encoder.config().num_classes) {
        throw std::invalid_argument("document '" + d.id + "' label outside encoder classes");
      }
    }
  }
  const auto train_batches = segment_documents(train, seg);
  const auto valid_batches = segment_documents(valid, seg);
  std::vector<SegmentRef> train_refs = all_segments(train_batches);
  const std::vector<SegmentRef> valid_refs = all_segments(valid_batches);

  TrainResult result;
  result.examples_per_epoch = train_refs.size();
  const std::size_t steps_per_epoch =
      (train_refs.size() + options.batch_size - 1) / options.batch_size;
  Adam<T> optimizer(options.optimizer, steps_per_epoch * options.epochs);
  PlateauSchedule plateau(options.optimizer.learning_rate);
  std::mt19937_64 order_rng(options.seed);
  std::mt19937_64 dropout_rng(options.seed ^ 0x9e3779b97f4a7c15ULL);
  const std::size_t eval_chunk = 64;

  auto [v_loss, v_acc] = evaluate_segments(encoder, valid_batches, valid, valid_refs, eval_chunk);
  result.history.push_back({0, std::nan(""), v_loss, v_acc, optimizer.current_learning_rate()});
  result.best_valid_accuracy = v_acc;
  auto best_params = encoder.parameters().snapshot();
  std::size_t since_best = 0;
  std::size_t step = 0;

  for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
    std::shuffle(train_refs.begin(), train_refs.end(), order_rng);
    double epoch_loss = 0.0;
    for (std::size_t begin = 0; begin < train_refs.size(); begin += options.batch_size) {
      const auto part = std::span<const SegmentRef>(train_refs).subspan(
          begin, std::min(options.batch_size, train_refs.size() - begin));
      const Minibatch mb = gather(train_batches, train, part);
      encoder.parameters().zero_grad();
      double loss_value = std::nan("");
      try {
        ad::Tape<T> tape;
        ad::Var l = encoder.logits(tape, encoder.pooled(tape, mb.tokens, mb.mask,
                                                        train_batches.front().width,
                                                        &dropout_rng));
        ad::Var loss = ad::cross_entropy(tape, l, mb.labels);
        loss_value = static_cast<double>(tape.value(loss)[0]);
        if (std::isfinite(loss_value)) tape.backward(loss);
      } catch (const NumericError&) {
        loss_value = std::nan("");
      }
      if (!std::isfinite(loss_value)) {
        encoder.parameters().restore(best_params);
        throw TrainingDiverged("segment fine-tuning diverged at epoch " + std::to_string(epoch));
      }
      optimizer.step(encoder.parameters());
      epoch_loss += loss_value * static_cast<double>(part.size());
      if (options.on_step) options.on_step(step, loss_value);
      ++step;
    }
    epoch_loss /= static_cast<double>(train_refs.size());
    std::tie(v_loss, v_acc) =
        evaluate_segments(encoder, valid_batches, valid, valid_refs, eval_chunk);
    result.history.push_back({epoch, epoch_loss, v_loss, v_acc, optimizer.current_learning_rate()});
    if (options.verbose) {
      std::cerr << "encoder epoch " << epoch << " train_loss " << epoch_loss << " valid_loss "
                << v_loss << " valid_acc " << v_acc << '\n';
    }
    if (options.plateau_schedule) {
      optimizer.set_base_learning_rate(plateau.update(v_loss));
    }
    if (v_acc > result.best_valid_accuracy) {
      result.best_valid_accuracy = v_acc;
      result.best_epoch = epoch;
      best_params = encoder.parameters().snapshot();
      since_best = 0;
    } else if (options.early_stop_patience > 0 && ++since_best >= options.early_stop_patience) {
      break;
    }
  }
  encoder.parameters().restore(best_params);
  return result;
}

template <typename T>
std::vector<Array<T>> extract_pooled(const SegmentEncoder<T>& encoder,
                                     std::span<const SegmentBatch> batches,
                                     std::size_t chunk_rows) {
  std::vector<Array<T>> out;
  out.reserve(batches.size());
  // Pack several small documents into one forward pass.
  std::size_t begin = 0;
  while (begin < batches.size()) {
    std::size_t end = begin, rows = 0;
    while (end < batches.size() && (rows == 0 || rows + batches[end].rows() <= chunk_rows)) {
      rows += batches[end].rows();
      ++end;
    }
    std::vector<const SegmentBatch*> parts;
    for (std::size_t i = begin; i < end; ++i) parts.push_back(&batches[i]);
    const Array<T> h = encoder.encode_segments(concat_batches(parts));
    std::size_t offset = 0;
    for (std::size_t i = begin; i < end; ++i) {
      const std::size_t n = batches[i].rows();
      std::vector<T> block(h.data() + offset * h.cols(), h.data() + (offset + n) * h.cols());
      out.emplace_back(Shape{n, h.cols()}, std::move(block));
      offset += n;
    }
    begin = end;
  }
  return out;
}

FlopEstimate count_flops(std::size_t doc_length, std::size_t segment_size, std::size_t stride,
                         const EncoderConfig& config, AttentionMode mode) {
  if (doc_length == 0) throw std::invalid_argument("count_flops: document length must be positive");
  FlopEstimate f;
  if (mode == AttentionMode::full_attention) {
    f.segments = 1;
    f.positions_per_segment = doc_length;
  } else {
    f.segments = segment_count(doc_length, segment_size, stride);
    f.positions_per_segment = segment_size + 2;
  }
  const double p = static_cast<double>(f.positions_per_segment);
  const double d = static_cast<double>(config.d_model);
  const double dff = static_cast<double>(config.d_ff);
  const double per_layer = static_cast<double>(config.layers) * static_cast<double>(f.segments);
  f.attention = per_layer * 2.0 * (2.0 * p * p * d);
  f.projections = per_layer * 2.0 * (4.0 * p * d * d);
  f.feed_forward = per_layer * 2.0 * (2.0 * p * d * dff);
  f.total = f.attention + f.projections + f.feed_forward;
  return f;
}

template class SegmentEncoder<float>;
template class SegmentEncoder<double>;
template TrainResult fine_tune_segments<float>(SegmentEncoder<float>&, std::span<const Document>,
                                               std::span<const Document>,
                                               const SegmentationOptions&, const TrainOptions&);
template TrainResult fine_tune_segments<double>(SegmentEncoder<double>&,
                                                std::span<const Document>,
                                                std::span<const Document>,
                                                const SegmentationOptions&, const TrainOptions&);
template std::vector<Array<float>> extract_pooled(const SegmentEncoder<float>&,
                                                  std::span<const SegmentBatch>, std::size_t);
template std::vector<Array<double>> extract_pooled(const SegmentEncoder<double>&,
                                                   std::span<const SegmentBatch>, std::size_t);

}  // namespace hierdoc
